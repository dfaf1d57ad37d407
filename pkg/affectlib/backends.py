"""Pluggable face detector, validator and landmarker backends.

A detector has detect(image) -> [DetectionResult].  A validator has
validate(crop) -> bool.  A landmarker has locate(crop) -> a 468 x 3
array of raw landmarks, or None when it finds no face.  Images are
H x W x 3 uint8 RGB arrays.

The stub backends are deterministic and reentrant, and are what we
always use in test mode.  The real ones wrap MTCNN (facenet-pytorch),
face_recognition and MediaPipe face mesh; those libraries are optional
and only imported when a real backend is built.  Real backends are not
reentrant, so each worker thread gets its own instance.
"""

from __future__ import absolute_import
import collections
import logging
import threading

import numpy as np

from . import base
from . import facegraph


# bbox is (x, y, w, h) in pixels.
DetectionResult = collections.namedtuple(
    'DetectionResult', ('bbox', 'confidence', 'detector_id'))

Backends = collections.namedtuple(
    'Backends', ('detector', 'validator', 'landmarker'))


_REAL_NOT_ALLOWED = (
    "ImportError occurred. Did you install the optional face backends?"
    " You may need to run"
    " `pip install facenet-pytorch face_recognition mediapipe`,"
    " or set preprocess.backend to 'stub'.")


# --- stubs

class BrightPatchDetector(object):
    """Finds the bounding box of the "face": pixels with red >= threshold.

    The confidence is the mean green value inside the patch, over 255,
    so a fixture can dial the confidence of every frame.
    """
    detector_id = 'stub-patch'

    def __init__(self, red_threshold=200):
        self.red_threshold = red_threshold

    def detect(self, image):
        mask = image[:, :, 0] >= self.red_threshold
        if not mask.any():
            return []
        ys = np.flatnonzero(mask.any(axis=1))
        xs = np.flatnonzero(mask.any(axis=0))
        bbox = (int(xs[0]), int(ys[0]),
                int(xs[-1] - xs[0] + 1), int(ys[-1] - ys[0] + 1))
        confidence = float(image[:, :, 1][mask].mean()) / 255.0
        return [DetectionResult(bbox, confidence, self.detector_id)]


class PatchValidator(object):
    """Says yes when enough of the crop is bright-red "face"."""
    def __init__(self, red_threshold=200, min_fraction=0.25):
        self.red_threshold = red_threshold
        self.min_fraction = min_fraction

    def validate(self, crop):
        if crop.size == 0:
            return False
        fraction = (crop[:, :, 0] >= self.red_threshold).mean()
        return bool(fraction >= self.min_fraction)


class ConstantValidator(object):
    def __init__(self, verdict):
        self.verdict = verdict

    def validate(self, crop):
        return self.verdict


class TemplateLandmarker(object):
    """A fixed random face template, warped by the crop's mean color.

    The warp is non-linear so that different crops survive landmark
    normalization as different graphs.
    """
    def __init__(self, seed=0):
        rng = np.random.RandomState(seed)
        self.template = rng.uniform(-1.0, 1.0,
                                    size=(facegraph.NUM_LANDMARKS, 3))

    def locate(self, crop):
        if crop.size == 0:
            return None
        mean_rgb = crop.reshape(-1, 3).mean(axis=0) / 255.0
        return self.template + 0.1 * np.sin(self.template *
                                             (1.0 + 3.0 * mean_rgb))


def stub_backends(seed=0):
    return Backends(BrightPatchDetector(), PatchValidator(),
                    TemplateLandmarker(seed))


# --- real backends

class MtcnnDetector(object):
    detector_id = 'mtcnn'

    def __init__(self, device='cpu'):
        try:
            from facenet_pytorch import MTCNN
        except ImportError:
            raise base.BackendError(_REAL_NOT_ALLOWED)
        self._mtcnn = MTCNN(keep_all=True, device=device)

    def detect(self, image):
        (boxes, probs) = self._mtcnn.detect(image)
        if boxes is None:
            return []
        (h, w) = image.shape[:2]
        results = []
        for (box, prob) in zip(boxes, probs):
            x1 = max(0, int(box[0]))
            y1 = max(0, int(box[1]))
            x2 = min(w, int(box[2]))
            y2 = min(h, int(box[3]))
            if x2 <= x1 or y2 <= y1:
                continue
            results.append(DetectionResult((x1, y1, x2 - x1, y2 - y1),
                                           float(prob), self.detector_id))
        return results


class FaceRecognitionValidator(object):
    def __init__(self):
        try:
            import face_recognition
        except ImportError:
            raise base.BackendError(_REAL_NOT_ALLOWED)
        self._face_recognition = face_recognition

    def validate(self, crop):
        return len(self._face_recognition.face_locations(
            np.ascontiguousarray(crop))) > 0


class MediaPipeLandmarker(object):
    def __init__(self):
        try:
            import mediapipe as mp
        except ImportError:
            raise base.BackendError(_REAL_NOT_ALLOWED)
        self._face_mesh = mp.solutions.face_mesh.FaceMesh(
            static_image_mode=True, max_num_faces=1, refine_landmarks=False)

    def locate(self, crop):
        results = self._face_mesh.process(np.ascontiguousarray(crop))
        if not results.multi_face_landmarks:
            return None
        (h, w) = crop.shape[:2]
        points = results.multi_face_landmarks[0].landmark
        # MediaPipe z shares the x scale.
        return np.array([[p.x * w, p.y * h, p.z * w]
                         for p in points[:facegraph.NUM_LANDMARKS]])


class _PerThread(object):
    """Give every thread its own instance of a non-reentrant backend."""
    def __init__(self, factory, method):
        self._factory = factory
        self._method = method
        self._local = threading.local()

    def __getattr__(self, name):
        if name != self._method:
            raise AttributeError(name)
        instance = getattr(self._local, 'instance', None)
        if instance is None:
            instance = self._local.instance = self._factory()
        return getattr(instance, name)


def real_backends():
    try:
        import facenet_pytorch  # noqa: F401
        import face_recognition  # noqa: F401
        import mediapipe  # noqa: F401
    except ImportError:
        raise base.BackendError(_REAL_NOT_ALLOWED)
    return Backends(_PerThread(MtcnnDetector, 'detect'),
                    _PerThread(FaceRecognitionValidator, 'validate'),
                    _PerThread(MediaPipeLandmarker, 'locate'))


def make_backends(kind, seed=0):
    """Build the backends named by preprocess.backend ('real' or 'stub')."""
    if base.in_test_mode() or kind == 'stub':
        return stub_backends(seed)
    if kind == 'real':
        logging.info('affectlib: using MTCNN / face_recognition / '
                     'MediaPipe backends')
        return real_backends()
    raise base.ConfigError('Unknown preprocess.backend %r (want real|stub)'
                           % kind)
