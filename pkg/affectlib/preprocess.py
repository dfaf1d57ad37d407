"""Mixin for run_preprocess(): frames in, gated face crops and landmarks out.

Per frame we: read the image, drop it if blurry, detect faces and keep
the most confident one, gate it on confidence and size, confirm it with
a second backend on a temporarily padded crop, crop the *unpadded* box
and resize it to 224 x 224 (bilinear), then extract and normalize the
468 landmarks.  Nothing a single frame does can abort the batch; every
frame ends up as exactly one outcome, and the QualityReport is the sum
of those outcomes.

Blur is the variance of the 3 x 3 Laplacian [[0,1,0],[1,-4,1],[0,1,0]]
over the valid region of the luma image (0.299 R + 0.587 G + 0.114 B).
"""

from __future__ import absolute_import
import collections
import concurrent.futures
import hashlib
import logging
import os
import time

import cv2
import numpy as np
import pandas as pd
import tqdm

from . import backends
from . import base
from . import facegraph


BLUR_THRESHOLD = 25.0
MIN_FACE = 30
MIN_CONFIDENCE = 0.70
PADDING = 0.2
CROP_SIZE = 224
DEFAULT_FPS = 15

LUMA = np.array([0.299, 0.587, 0.114])

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp')

# Frame outcomes.
EXTRACTED = 'extracted'
UNREADABLE = 'unreadable'
BLURRY = 'blurry'
NO_DETECTION = 'no_detection'
DETECTOR_FAILED = 'detector_failed'
VALIDATOR_REJECTED = 'validator_rejected'
VALIDATOR_FAILED = 'validator_failed'
LOW_CONFIDENCE = 'low_confidence'
TOO_SMALL = 'too_small'
LANDMARK_FAILED = 'landmark_failed'

_NO_FACE_OUTCOMES = frozenset((NO_DETECTION, DETECTOR_FAILED,
                               VALIDATOR_REJECTED, VALIDATOR_FAILED))
_GATE_OUTCOMES = frozenset((LOW_CONFIDENCE, TOO_SMALL, LANDMARK_FAILED))

FRAME_COLUMNS = ['frame_id', 'source_video', 'timestamp_s', 'outcome']


FrameEntry = collections.namedtuple(
    'FrameEntry', ('frame_id', 'source_video', 'timestamp_s', 'path'))

FrameRecord = collections.namedtuple(
    'FrameRecord', ('frame_id', 'source_video', 'timestamp_s', 'image'))

FaceSample = collections.namedtuple(
    'FaceSample', ('frame_id', 'crop', 'graph', 'soft_label'))

FrameResult = collections.namedtuple(
    'FrameResult', ('entry', 'outcome', 'sample', 'bbox', 'detail'))

GateDecision = collections.namedtuple('GateDecision', ('accepted', 'reason'))

GateSettings = collections.namedtuple(
    'GateSettings',
    ('blur_threshold', 'min_face', 'min_confidence', 'padding', 'fps'))

DEFAULT_SETTINGS = GateSettings(BLUR_THRESHOLD, MIN_FACE, MIN_CONFIDENCE,
                                PADDING, DEFAULT_FPS)


class QualityReport(object):
    """Counters for one preprocessing run.

    valid_images = total_found - unreadable, and
    faces_extracted = valid_images - blurry_skipped - no_face
                      - rejected_by_gates.
    no_face covers frames where no face was confirmed: nothing detected,
    the detector or validator failed, or the validator said no.
    rejected_by_gates covers low confidence, too small, and landmark
    failures.
    """
    COUNTERS = ('total_found', 'unreadable', 'valid_images',
                'blurry_skipped', 'no_face', 'validator_failed',
                'low_confidence', 'too_small', 'landmark_failed',
                'rejected_by_gates', 'faces_extracted')

    def __init__(self):
        for name in self.COUNTERS:
            setattr(self, name, 0)
        self.processing_time_s = 0.0

    def record(self, outcome):
        self.total_found += 1
        if outcome == UNREADABLE:
            self.unreadable += 1
            return
        self.valid_images += 1
        if outcome == BLURRY:
            self.blurry_skipped += 1
        elif outcome in _NO_FACE_OUTCOMES:
            self.no_face += 1
            if outcome == VALIDATOR_FAILED:
                self.validator_failed += 1
        elif outcome in _GATE_OUTCOMES:
            setattr(self, outcome, getattr(self, outcome) + 1)
            self.rejected_by_gates += 1
        elif outcome == EXTRACTED:
            self.faces_extracted += 1
        else:
            raise ValueError('Unknown frame outcome %r' % outcome)

    @property
    def empty_input(self):
        return self.total_found == 0

    @property
    def success_rate(self):
        if self.total_found == 0:
            return 0.0
        return self.faces_extracted / float(self.total_found)

    def as_dict(self):
        d = collections.OrderedDict(
            (name, getattr(self, name)) for name in self.COUNTERS)
        d['success_rate'] = round(self.success_rate, 4)
        d['empty_input'] = self.empty_input
        d['processing_time_s'] = round(self.processing_time_s, 3)
        return d

    def write(self, path):
        with open(path, 'w') as f:
            for (key, value) in self.as_dict().items():
                if isinstance(value, bool):
                    value = str(value).lower()
                f.write('%s: %s\n' % (key, value))


def read_quality_report(path):
    """Parse a file written by QualityReport.write() into a dict."""
    return base.read_key_values(path)


def to_gray(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[:, :, :3].dot(LUMA)


def blur_score(image):
    """Variance of the valid-region Laplacian of the luma image."""
    gray = to_gray(image)
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        raise base.ImageError('Image of shape %s is smaller than the 3x3 '
                              'Laplacian kernel' % (gray.shape,))
    # ksize=1 is exactly the 4-neighbour kernel; drop the padded border.
    laplacian = cv2.Laplacian(gray, cv2.CV_64F, ksize=1)[1:-1, 1:-1]
    return float(laplacian.var())


def gate_detection(det, image, min_confidence=MIN_CONFIDENCE,
                   min_face=MIN_FACE):
    """Accept a detection unless it is low-confidence or too small.

    Both thresholds are inclusive: confidence == min_confidence and
    w == h == min_face are accepted.
    """
    if det.confidence < min_confidence:
        return GateDecision(False, LOW_CONFIDENCE)
    (_, _, w, h) = det.bbox
    if w < min_face or h < min_face:
        return GateDecision(False, TOO_SMALL)
    return GateDecision(True, None)


def padded_bbox(bbox, image_shape, padding=PADDING):
    """Grow bbox by `padding` of its size on every side, clamped to the image."""
    (x, y, w, h) = bbox
    (height, width) = image_shape[:2]
    pad_w = int(w * padding)
    pad_h = int(h * padding)
    left = max(0, x - pad_w)
    top = max(0, y - pad_h)
    right = min(width, x + w + pad_w)
    bottom = min(height, y + h + pad_h)
    return (left, top, right - left, bottom - top)


def _cut(image, bbox):
    (x, y, w, h) = bbox
    return image[y:y + h, x:x + w]


def validate_with_padding(det, image, validator, padding=PADDING):
    """Ask the validator about a padded crop around det.

    The padded crop exists only for this call.  Raises BackendError if
    the validator itself fails.
    """
    crop = _cut(image, padded_bbox(det.bbox, image.shape, padding))
    try:
        return bool(validator.validate(crop))
    except Exception as why:
        raise base.BackendError('Validator failed: %s' % why)


def crop_face(image, bbox, size=CROP_SIZE):
    """The unpadded face, resized to size x size with bilinear sampling."""
    return cv2.resize(_cut(image, bbox), (size, size),
                      interpolation=cv2.INTER_LINEAR)


def _raise(error):
    raise error


def _manifest_paths(manifest):
    if os.path.isdir(manifest):
        paths = []
        for (dirpath, dirnames, filenames) in os.walk(manifest,
                                                      onerror=_raise):
            dirnames.sort()
            for filename in sorted(filenames):
                if filename.lower().endswith(IMAGE_EXTENSIONS):
                    paths.append(os.path.join(dirpath, filename))
        return sorted(paths)
    root = os.path.dirname(os.path.abspath(manifest))
    with open(manifest) as f:
        lines = [l.strip() for l in f]
    return [l if os.path.isabs(l) else os.path.join(root, l)
            for l in lines if l and not l.startswith('#')]


def read_manifest(manifest, fps=DEFAULT_FPS):
    """List the frames of a manifest, in manifest order.

    A manifest is either a directory, walked in lexicographic order, or
    a text file with one frame path per line (relative paths are
    relative to the manifest file).  A frame's id is its file stem and
    its source video is the directory that holds it.  Timestamps count
    frames within each source video at `fps`.
    """
    if not os.path.exists(manifest):
        raise base.UsageError('Manifest not found: %s' % manifest)

    try:
        paths = _manifest_paths(manifest)
    except (IOError, OSError, UnicodeDecodeError) as why:
        raise base.UsageError('Cannot read manifest %s: %s' % (manifest, why))

    entries = []
    seen = set()
    per_video = collections.Counter()
    for path in paths:
        frame_id = os.path.splitext(os.path.basename(path))[0]
        if frame_id in seen:
            raise base.UsageError('Duplicate frame id %r in %s'
                                  % (frame_id, manifest))
        seen.add(frame_id)
        source_video = os.path.basename(os.path.dirname(path))
        timestamp = per_video[source_video] / float(fps)
        per_video[source_video] += 1
        entries.append(FrameEntry(frame_id, source_video, timestamp, path))
    return entries


def load_frame(entry):
    """Read a manifest entry as an RGB FrameRecord, or None if unreadable."""
    image = cv2.imread(entry.path, cv2.IMREAD_COLOR)
    if image is None or image.size == 0:
        return None
    return FrameRecord(entry.frame_id, entry.source_video, entry.timestamp_s,
                       cv2.cvtColor(image, cv2.COLOR_BGR2RGB))


def process_frame(entry, detector, validator, landmarker,
                  settings=DEFAULT_SETTINGS):
    """Run one frame through every gate; return its FrameResult."""
    def result(outcome, sample=None, bbox=None, detail=None):
        return FrameResult(entry, outcome, sample, bbox, detail)

    frame = load_frame(entry)
    if frame is None:
        logging.warning('affectlib: unreadable frame %s' % entry.path)
        return result(UNREADABLE)
    image = frame.image

    try:
        if blur_score(image) < settings.blur_threshold:
            return result(BLURRY)
    except base.ImageError as why:
        logging.warning('affectlib: unusable frame %s: %s' % (entry.path, why))
        return result(UNREADABLE, detail=str(why))

    try:
        detections = detector.detect(image)
    except Exception as why:
        logging.warning('affectlib: detector failed on %s: %s'
                        % (entry.path, why))
        return result(DETECTOR_FAILED, detail=str(why))
    if not detections:
        return result(NO_DETECTION)
    # One child per frame: keep the most confident face.
    det = max(detections, key=lambda d: d.confidence)

    decision = gate_detection(det, image, settings.min_confidence,
                              settings.min_face)
    if not decision.accepted:
        return result(decision.reason, bbox=det.bbox)

    try:
        if not validate_with_padding(det, image, validator, settings.padding):
            return result(VALIDATOR_REJECTED, bbox=det.bbox)
    except base.BackendError as why:
        logging.warning('affectlib: %s on %s' % (why, entry.path))
        return result(VALIDATOR_FAILED, bbox=det.bbox, detail=str(why))

    crop = crop_face(image, det.bbox)
    try:
        raw = landmarker.locate(crop)
        if raw is None:
            return result(LANDMARK_FAILED, bbox=det.bbox,
                          detail='no landmarks found')
        landmarks = facegraph.normalize_landmarks(raw)
    except Exception as why:
        logging.warning('affectlib: landmarks failed on %s: %s'
                        % (entry.path, why))
        return result(LANDMARK_FAILED, bbox=det.bbox, detail=str(why))

    sample = FaceSample(entry.frame_id, crop,
                        facegraph.face_graph(landmarks), None)
    return result(EXTRACTED, sample=sample, bbox=det.bbox)


def _chunks(items, size):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def run_pipeline(entries, detector, validator, landmarker,
                 settings=DEFAULT_SETTINGS, workers=1, on_frame=None):
    """Process a manifest; return (stream of FaceSamples, QualityReport).

    The stream is lazy and yields samples in manifest order whatever
    the number of workers.  The report is filled in as the stream is
    consumed, so read it after exhausting the stream.  on_frame, if
    given, is called with every FrameResult in manifest order from the
    consuming thread.
    """
    report = QualityReport()

    def process(entry):
        return process_frame(entry, detector, validator, landmarker, settings)

    def stream():
        start = time.time()
        progress = tqdm.tqdm(total=len(entries), desc='preprocess',
                             unit='frame', disable=base.in_test_mode())
        try:
            if workers <= 1:
                results = (process(e) for e in entries)
                for frame_result in results:
                    report.record(frame_result.outcome)
                    progress.update(1)
                    if on_frame is not None:
                        on_frame(frame_result)
                    if frame_result.sample is not None:
                        yield frame_result.sample
            else:
                with concurrent.futures.ThreadPoolExecutor(workers) as pool:
                    # Bounded chunks keep at most a few crops per worker
                    # in memory; map() keeps manifest order.
                    for chunk in _chunks(entries, workers * 16):
                        for frame_result in pool.map(process, chunk):
                            report.record(frame_result.outcome)
                            progress.update(1)
                            if on_frame is not None:
                                on_frame(frame_result)
                            if frame_result.sample is not None:
                                yield frame_result.sample
        finally:
            progress.close()
            report.processing_time_s = time.time() - start

    return (stream(), report)


def settings_from_config(section):
    return GateSettings(section['blur_threshold'], section['min_face'],
                        section['min_confidence'], section['padding'],
                        section['fps'])


class Mixin(base.BaseMixin):
    """A mixin for run_preprocess()."""
    def run_preprocess(self, manifest=None):
        """Write preprocess/{crops/, landmarks.csv, frames.csv, quality_report.txt}.

        Arguments:
            manifest: a frame directory or a file listing frame paths.
                Defaults to config['dataset']['manifest'].
        """
        manifest = manifest or self.config['dataset']['manifest']
        if not manifest:
            raise base.UsageError('No manifest given (dataset.manifest)')
        section = self.config['preprocess']
        settings = settings_from_config(section)
        entries = read_manifest(manifest, settings.fps)
        logging.info('affectlib: preprocessing %d frames from %s'
                     % (len(entries), manifest))

        out_dir = self._stage_dir('preprocess')
        crops_dir = os.path.join(out_dir, 'crops')
        os.makedirs(crops_dir, exist_ok=True)
        found = backends.make_backends(section['backend'], self.seed)

        frame_rows = []
        landmark_rows = []
        crop_digest = hashlib.sha256()

        def on_frame(frame_result):
            entry = frame_result.entry
            frame_rows.append([entry.frame_id, entry.source_video,
                               entry.timestamp_s, frame_result.outcome])

        (samples, report) = run_pipeline(
            entries, found.detector, found.validator, found.landmarker,
            settings, self.config['workers'], on_frame)
        for sample in samples:
            crop_path = os.path.join(crops_dir, '%s.png' % sample.frame_id)
            ok = cv2.imwrite(crop_path,
                             cv2.cvtColor(sample.crop, cv2.COLOR_RGB2BGR))
            if not ok:
                raise base.UsageError('Cannot write %s' % crop_path)
            crop_digest.update(('%s %s\n' % (
                sample.frame_id, base.sha256_file(crop_path))).encode('utf-8'))
            landmark_rows.append(facegraph.landmark_row(
                sample.frame_id, 0, sample.graph.landmarks.coords))

        landmarks_path = os.path.join(out_dir, 'landmarks.csv')
        facegraph.write_landmark_csv(landmarks_path, landmark_rows)
        frames_path = os.path.join(out_dir, 'frames.csv')
        pd.DataFrame(frame_rows, columns=FRAME_COLUMNS).to_csv(
            frames_path, index=False)
        report_path = os.path.join(out_dir, 'quality_report.txt')
        report.write(report_path)

        self._record_stage(
            'preprocess',
            {'landmarks': landmarks_path, 'frames': frames_path,
             'quality_report': report_path},
            schemas={'landmarks': facegraph.landmark_csv_header(),
                     'frames': FRAME_COLUMNS},
            extra={'topology_sha256': facegraph.topology_hash(),
                   'crops_sha256': crop_digest.hexdigest()})

        if report.empty_input:
            logging.warning('affectlib: manifest %s is empty' % manifest)
        logging.info('affectlib: extracted %d of %d frames (%.1f%%)'
                     % (report.faces_extracted, report.total_found,
                        100.0 * report.success_rate))
        self.quality_report = report
        return self
