"""Synthetic data for smoke runs and tests.

write_fixture() lays down a small run that exercises every stage with
the stub backends: 8 children x 8 frames of 96 x 96 RGB noise, most
with a bright-red "face" patch that BrightPatchDetector finds, plus
matching scorer CSVs and a config file.  Per child, frames 0-4 are
good faces, frame 5 is blurry (a constant image), frame 6 has no face
and frame 7 has a low-confidence face.  The last child's frame 6 is
not an image at all.

study_outcomes() is a stream of frame outcomes whose counts match
the dataset we were built for (48,891 frames, 19,322 faces).
"""

from __future__ import absolute_import
import os

import cv2
import numpy as np
import pandas as pd
import yaml

from . import facegraph
from . import preprocess
from . import softlabel


# Frame counts per outcome in the field study we were built for.  The
# 7,794 frames that were valid but neither blurry, faceless nor
# extracted are split arbitrarily between the two detection gates.
STUDY_OUTCOMES = {
    preprocess.UNREADABLE: 5,
    preprocess.BLURRY: 1600,
    preprocess.NO_DETECTION: 20170,
    preprocess.LOW_CONFIDENCE: 4794,
    preprocess.TOO_SMALL: 3000,
    preprocess.EXTRACTED: 19322,
}

CHILDREN = 8
FRAMES_PER_CHILD = 8
IMAGE_SIZE = 96
FACE_SIZE = 48

GOOD_FRAMES = frozenset(range(5))
BLURRY_FRAME = 5
NO_FACE_FRAME = 6
LOW_CONFIDENCE_FRAME = 7


def study_outcomes(seed=0):
    """The outcome of every frame, shuffled, summing to STUDY_OUTCOMES."""
    outcomes = []
    for (outcome, count) in sorted(STUDY_OUTCOMES.items()):
        outcomes.extend([outcome] * count)
    np.random.RandomState(seed).shuffle(outcomes)
    return outcomes


def child_id(child):
    return 'c%02d' % child


def frame_id(child, k):
    return 'c%02d_f%02d' % (child, k)


def frame_image(rng, kind):
    """One synthetic RGB frame; kind is 'face', 'blurry', 'no_face' or 'low'."""
    if kind == 'blurry':
        return np.full((IMAGE_SIZE, IMAGE_SIZE, 3), 120, dtype=np.uint8)
    image = rng.randint(0, 100, size=(IMAGE_SIZE, IMAGE_SIZE, 3)).astype(
        np.uint8)
    if kind == 'no_face':
        return image
    confidence = 0.9 if kind == 'face' else 0.5
    (dx, dy) = rng.randint(0, IMAGE_SIZE - FACE_SIZE - 16, size=2) + 8
    patch = image[dy:dy + FACE_SIZE, dx:dx + FACE_SIZE]
    patch[:, :, 0] = 230
    patch[:, :, 1] = int(round(confidence * 255))
    patch[:, :, 2] = rng.randint(0, 100, size=(FACE_SIZE, FACE_SIZE))
    return image


def _kind(child, k):
    if k in GOOD_FRAMES:
        return 'face'
    return {BLURRY_FRAME: 'blurry', NO_FACE_FRAME: 'no_face',
            LOW_CONFIDENCE_FRAME: 'low'}[k]


def expected_outcome(child, k):
    """What the stub pipeline should decide for one fixture frame."""
    if child == CHILDREN - 1 and k == NO_FACE_FRAME:
        return preprocess.UNREADABLE
    return {'face': preprocess.EXTRACTED, 'blurry': preprocess.BLURRY,
            'no_face': preprocess.NO_DETECTION,
            'low': preprocess.LOW_CONFIDENCE}[_kind(child, k)]


def scorer_table(frame_ids, children, rng, sharpness):
    """Dirichlet scores that lean toward one emotion per child."""
    rows = []
    for (fid, child) in zip(frame_ids, children):
        alpha = np.ones(facegraph.NUM_CLASSES)
        alpha[child % facegraph.NUM_CLASSES] += sharpness
        rows.append([fid] + list(rng.dirichlet(alpha)))
    return pd.DataFrame(rows, columns=softlabel.SCORER_COLUMNS)


def write_fixture(out_dir, seed=0, epochs=2):
    """Write frames/, fer_scores.csv, deepface_scores.csv and config.yaml.

    Returns a dict of those paths.
    """
    rng = np.random.RandomState(seed)
    frames_dir = os.path.join(out_dir, 'frames')
    frame_ids = []
    children = []
    for child in range(CHILDREN):
        child_dir = os.path.join(frames_dir, child_id(child))
        os.makedirs(child_dir, exist_ok=True)
        for k in range(FRAMES_PER_CHILD):
            path = os.path.join(child_dir, '%s.png' % frame_id(child, k))
            image = frame_image(rng, _kind(child, k))
            if expected_outcome(child, k) == preprocess.UNREADABLE:
                with open(path, 'wb') as f:
                    f.write(b'not a png')
            else:
                cv2.imwrite(path, cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
            frame_ids.append(frame_id(child, k))
            children.append(child)

    paths = {'frames': frames_dir}
    for (name, sharpness) in (('fer_scores', 6.0), ('deepface_scores', 3.0)):
        paths[name] = os.path.join(out_dir, '%s.csv' % name)
        scorer_table(frame_ids, children, rng, sharpness).to_csv(
            paths[name], index=False)

    config = {
        'seed': seed,
        'dataset': {
            'manifest': os.path.abspath(frames_dir),
            'fer_scores': os.path.abspath(paths['fer_scores']),
            'deepface_scores': os.path.abspath(paths['deepface_scores']),
        },
        'preprocess': {'backend': 'stub'},
        'model': {'backbone': {'kind': 'stub'}},
        'train': {'epochs': epochs, 'batch_size': 8},
    }
    paths['config'] = os.path.join(out_dir, 'config.yaml')
    with open(paths['config'], 'w') as f:
        yaml.safe_dump(config, f, sort_keys=True)
    return paths
