"""Emotion classes, face landmarks and the fixed face-graph topology.

Every probability vector in affectlib is indexed by EmotionClass, in
this order, and every CSV that carries one uses these column names.

A face is 468 MediaPipe face-mesh landmarks.  We normalize them by
moving the nose tip (mesh index 1) to the origin and then mapping each
axis so its minimum lands on -1 and its maximum on +1.  The map is
piecewise linear about the nose tip: the negative side is divided by
|min| and the positive side by max.  No rotation is removed.

The graph edges are closed chains along seven contour groups of the
mesh (face oval, both eyebrows, both eyes, outer and inner lips).  They
live in data/face_topology.txt, whose header carries a version and the
sha256 of the edge lines.
"""

import collections
import enum
import functools
import logging
import os

import numpy as np
import pandas as pd

from . import base


EMOTIONS = ('angry', 'disgust', 'fear', 'happy', 'sad', 'surprise',
            'neutral')
NUM_CLASSES = len(EMOTIONS)


class EmotionClass(enum.IntEnum):
    angry = 0
    disgust = 1
    fear = 2
    happy = 3
    sad = 4
    surprise = 5
    neutral = 6


NUM_LANDMARKS = 468
# MediaPipe face-mesh "nose tip" (pronasale).
NOSE_TIP_INDEX = 1

TOPOLOGY_PATH = os.path.join(os.path.dirname(__file__), 'data',
                             'face_topology.txt')
TOPOLOGY_VERSION = 'face-topology v1'


# coords is NUM_LANDMARKS x 3.  degenerate_axes and one_sided_axes are
# tuples of bools, one per axis: degenerate when the axis had zero extent
# and was zeroed, one-sided when the nose tip was the axis minimum or
# maximum, so that axis only spans [0, 1] or [-1, 0].
LandmarkSet = collections.namedtuple(
    'LandmarkSet', ('coords', 'degenerate_axes', 'one_sided_axes'))

FaceGraph = collections.namedtuple('FaceGraph', ('landmarks', 'edges'))

Topology = collections.namedtuple(
    'Topology', ('version', 'sha256', 'edges', 'groups'))


def validate_distribution(p, atol=1e-6):
    """Return p as a float64 vector, or raise DistributionError."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (NUM_CLASSES,):
        raise base.DistributionError('Expected %d probabilities, got shape %s'
                                     % (NUM_CLASSES, p.shape))
    if not np.all(np.isfinite(p)):
        raise base.DistributionError('Non-finite probability in %s' % p)
    if p.min() < -atol or p.max() > 1 + atol:
        raise base.DistributionError('Probability outside [0, 1] in %s' % p)
    if abs(p.sum() - 1.0) > atol:
        raise base.DistributionError('Probabilities sum to %r, not 1'
                                     % p.sum())
    return p


def argmax_label(p):
    """The most probable class; ties go to the lowest class index."""
    # np.argmax returns the first maximal index.
    return int(np.argmax(p))


def normalize_landmarks(raw, nose_index=NOSE_TIP_INDEX):
    """Translate to the nose tip and min-max scale each axis into [-1, 1].

    The map is piecewise linear about the nose tip: the negative side
    is divided by |min| and the positive side by max, so min goes to -1
    and max to +1.  An axis with zero extent maps to all zeros and is
    flagged in the returned LandmarkSet.degenerate_axes.  When the nose
    tip is itself the minimum (or maximum) of an axis, as it usually is
    for MediaPipe depth, nothing reaches -1 (or +1) on that axis; such
    axes are flagged in LandmarkSet.one_sided_axes.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (NUM_LANDMARKS, 3):
        raise base.ShapeError('Expected %d x 3 landmarks, got shape %s'
                              % (NUM_LANDMARKS, raw.shape))
    if not np.all(np.isfinite(raw)):
        raise base.LandmarkError('Non-finite landmark coordinates')

    centered = raw - raw[nose_index]
    coords = np.zeros_like(centered)
    degenerate = []
    one_sided = []
    for axis in range(3):
        v = centered[:, axis]
        lo = v.min()
        hi = v.max()
        if hi == lo:
            degenerate.append(True)
            one_sided.append(False)
            continue
        degenerate.append(False)
        one_sided.append(bool(lo == 0 or hi == 0))
        if one_sided[-1]:
            logging.debug('affectlib: nose tip is the %s of axis %d; '
                          'that axis spans only one side of [-1, 1]'
                          % ('minimum' if lo == 0 else 'maximum', axis))
        neg = v < 0
        pos = v > 0
        coords[neg, axis] = v[neg] / -lo
        coords[pos, axis] = v[pos] / hi
    return LandmarkSet(coords, tuple(degenerate), tuple(one_sided))


def _parse_topology(path):
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except (IOError, OSError) as why:
        raise base.TopologyError('Cannot read topology file %s: %s'
                                 % (path, why))

    if not lines or not lines[0].startswith('# %s sha256=' % TOPOLOGY_VERSION):
        raise base.TopologyError('Topology file %s has no "%s" header'
                                 % (path, TOPOLOGY_VERSION))
    recorded = lines[0].rsplit('=', 1)[1].strip()

    edges = []
    edge_lines = []
    groups = collections.OrderedDict()
    group = None
    seen = set()
    for (lineno, line) in enumerate(lines[1:], start=2):
        if line.startswith('# group '):
            group = line[len('# group '):].strip()
            groups[group] = []
            continue
        if line.startswith('#') or not line.strip():
            continue
        edge_lines.append(line)
        try:
            (i, j) = (int(x) for x in line.split())
        except ValueError:
            raise base.TopologyError('%s:%d: expected "i j", got %r'
                                     % (path, lineno, line))
        if not (0 <= i < NUM_LANDMARKS and 0 <= j < NUM_LANDMARKS):
            raise base.TopologyError('%s:%d: index out of range in %r'
                                     % (path, lineno, line))
        if i == j:
            raise base.TopologyError('%s:%d: self-loop %d' % (path, lineno, i))
        key = (min(i, j), max(i, j))
        if key in seen:
            raise base.TopologyError('%s:%d: duplicate edge %r'
                                     % (path, lineno, line))
        seen.add(key)
        edges.append((i, j))
        if group is not None:
            groups[group].append((i, j))

    actual = base.sha256_text('\n'.join(edge_lines) + '\n')
    if actual != recorded:
        raise base.TopologyError('Topology file %s is corrupt: header says '
                                 'sha256=%s, edges hash to %s'
                                 % (path, recorded, actual))
    return Topology(TOPOLOGY_VERSION, actual, tuple(edges), groups)


def load_topology(path=None):
    """Parse and verify a topology file (default: the bundled one)."""
    return _parse_topology(path or TOPOLOGY_PATH)


@functools.lru_cache(maxsize=None)
def _bundled_topology():
    return load_topology()


def build_topology():
    """The fixed face-graph edge list, as a list of (i, j) pairs."""
    return list(_bundled_topology().edges)


def topology_hash():
    return _bundled_topology().sha256


def contour_groups():
    """Map each contour group name to the landmark indices it covers."""
    return collections.OrderedDict(
        (name, sorted({n for edge in edges for n in edge}))
        for (name, edges) in _bundled_topology().groups.items())


def edge_array(edges):
    """A 2 x 2E int64 array holding each undirected edge both ways."""
    if not edges:
        return np.zeros((2, 0), dtype=np.int64)
    forward = np.asarray(edges, dtype=np.int64).T
    return np.concatenate([forward, forward[::-1]], axis=1)


def face_graph(landmark_set):
    return FaceGraph(landmark_set, build_topology())


def landmark_csv_header():
    columns = ['frame_id', 'face_id']
    for k in range(NUM_LANDMARKS):
        columns.extend(['x_%d' % k, 'y_%d' % k, 'z_%d' % k])
    return columns


def landmark_row(frame_id, face_id, coords):
    return [frame_id, face_id] + list(np.asarray(coords).reshape(-1))


def write_landmark_csv(path, rows):
    """rows is a list of landmark_row() lists, written in order."""
    frame = pd.DataFrame(rows, columns=landmark_csv_header())
    frame.to_csv(path, index=False)


def read_landmark_csv(path):
    """Return a DataFrame indexed by frame_id with the coordinate columns."""
    frame = pd.read_csv(path, dtype={'frame_id': str})
    missing = set(landmark_csv_header()) - set(frame.columns)
    if missing:
        raise base.IntegrityError('%s is missing %d landmark columns'
                                  % (path, len(missing)))
    return frame.set_index('frame_id')


def coords_from_row(row):
    """The 468 x 3 coordinate matrix of one read_landmark_csv() row."""
    return np.asarray(row[landmark_csv_header()[2:]],
                      dtype=np.float64).reshape(NUM_LANDMARKS, 3)
