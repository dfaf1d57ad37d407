"""Mixin for run_label(): turn two scorers' outputs into soft labels.

For every frame we fuse the two scorers with fixed weights (2/3 for
the FER scorer, 1/3 for the DeepFace scorer by default), scale the
neutral probability by gamma, renormalize with a softmax, and sharpen
with temperature T by raising to the power 1/T and renormalizing.

Note that the softmax renormalization is not the identity on a valid
distribution: it flattens it.  Set softlabel.renorm to 'sum' to divide
by the sum instead.

Weights are bound to scorer ids, never to argument order.
"""

from __future__ import absolute_import
import collections
import logging
import os

import numpy as np
import pandas as pd
import scipy.special

from . import base
from . import facegraph


FER_SCORER = 'fer'
DEEPFACE_SCORER = 'deepface'

CALIB_VERSION = 'calib-v1'

SCORER_COLUMNS = ['frame_id'] + list(facegraph.EMOTIONS)
SOFT_LABEL_COLUMNS = SCORER_COLUMNS + ['calib_version']

RENORM_MODES = ('softmax', 'sum')

ScorerOutput = collections.namedtuple(
    'ScorerOutput', ('scorer_id', 'dist', 'frame_id'))

# weights maps a scorer id to its fusion weight.
CalibrationConfig = collections.namedtuple(
    'CalibrationConfig', ('weights', 'gamma', 'temperature', 'renorm'))


def make_calibration_config(fer_weight=2.0 / 3.0, deepface_weight=1.0 / 3.0,
                            gamma=0.7, temperature=0.7, renorm='softmax'):
    cfg = CalibrationConfig({FER_SCORER: fer_weight,
                             DEEPFACE_SCORER: deepface_weight},
                            gamma, temperature, renorm)
    check_config(cfg)
    return cfg


def config_from_section(section):
    """Build a CalibrationConfig from the `softlabel` config section."""
    return make_calibration_config(section['weights']['fer_role'],
                                   section['weights']['deepface_role'],
                                   section['gamma'], section['temperature'],
                                   section['renorm'])


def check_config(cfg):
    weights = list(cfg.weights.values())
    if any(w < 0 for w in weights):
        raise base.ConfigError('Fusion weights must be non-negative: %s'
                               % cfg.weights)
    if abs(sum(weights) - 1.0) > 1e-9:
        raise base.ConfigError('Fusion weights must sum to 1, not %r'
                               % sum(weights))
    if not 0 < cfg.gamma <= 1:
        raise base.ConfigError('gamma must be in (0, 1], not %r' % cfg.gamma)
    if not cfg.temperature > 0:
        raise base.ConfigError('temperature must be positive, not %r'
                               % cfg.temperature)
    if cfg.renorm not in RENORM_MODES:
        raise base.ConfigError('renorm must be one of %s, not %r'
                               % ('|'.join(RENORM_MODES), cfg.renorm))


def fuse(a, b, cfg):
    """The weighted average of two scorers' distributions for one frame."""
    if a.frame_id != b.frame_id:
        raise base.PairingError('Cannot fuse scores for different frames: '
                                '%r vs %r' % (a.frame_id, b.frame_id))
    if a.scorer_id == b.scorer_id:
        raise base.PairingError('Both inputs for frame %r come from %r'
                                % (a.frame_id, a.scorer_id))
    check_config(cfg)
    for scorer_id in (a.scorer_id, b.scorer_id):
        if scorer_id not in cfg.weights:
            raise base.ConfigError('No fusion weight for scorer %r'
                                   % scorer_id)
    return (cfg.weights[a.scorer_id] * np.asarray(a.dist, dtype=np.float64) +
            cfg.weights[b.scorer_id] * np.asarray(b.dist, dtype=np.float64))


def neutral_penalty(p, gamma, renorm='softmax'):
    """Scale the neutral entry by gamma, then renormalize."""
    q = np.array(p, dtype=np.float64)
    q[facegraph.EmotionClass.neutral] *= gamma
    if renorm == 'softmax':
        return scipy.special.softmax(q)
    return q / q.sum()


def temperature_sharpen(p, temperature):
    """p ** (1/T), renormalized.  T < 1 sharpens."""
    powered = np.power(np.asarray(p, dtype=np.float64), 1.0 / temperature)
    total = powered.sum()
    if not np.isfinite(total) or total <= 0:
        raise base.NumericalError('Cannot sharpen %s at T=%r' % (p, temperature))
    return powered / total


def calibrate(a, b, cfg):
    fused = fuse(a, b, cfg)
    penalized = neutral_penalty(fused, cfg.gamma, cfg.renorm)
    return temperature_sharpen(penalized, cfg.temperature)


def read_scorer_csv(path, scorer_id):
    """Read a scorer CSV into {frame_id: ScorerOutput}, checking every row."""
    if not os.path.exists(path):
        raise base.UsageError('Scorer file not found: %s' % path)
    frame = pd.read_csv(path, dtype={'frame_id': str})
    if list(frame.columns) != SCORER_COLUMNS:
        raise base.IntegrityError('%s: expected columns %s, found %s'
                                  % (path, ','.join(SCORER_COLUMNS),
                                     ','.join(frame.columns)))
    if frame['frame_id'].duplicated().any():
        raise base.PairingError('%s lists some frames twice' % path)
    outputs = collections.OrderedDict()
    values = frame[list(facegraph.EMOTIONS)].to_numpy(dtype=np.float64)
    for (frame_id, dist) in zip(frame['frame_id'], values):
        try:
            dist = facegraph.validate_distribution(dist)
        except base.DistributionError as why:
            raise base.DistributionError('%s, frame %s: %s'
                                         % (path, frame_id, why))
        outputs[frame_id] = ScorerOutput(scorer_id, dist, frame_id)
    return outputs


def calibrate_tables(fer_path, deepface_path, cfg, frame_ids=None):
    """Calibrate two scorer CSVs into a soft-label DataFrame.

    If frame_ids is given we label exactly those frames (in that order)
    and both scorers must cover them.  Otherwise both scorers must list
    the same frames, and we keep the FER file's order.
    """
    fer = read_scorer_csv(fer_path, FER_SCORER)
    deepface = read_scorer_csv(deepface_path, DEEPFACE_SCORER)
    if frame_ids is None:
        if set(fer) != set(deepface):
            only = sorted(set(fer) ^ set(deepface))
            raise base.PairingError('Scorer files disagree on %d frames, '
                                    'e.g. %s' % (len(only), only[:5]))
        frame_ids = list(fer)
    else:
        frame_ids = list(frame_ids)
        for (path, table) in ((fer_path, fer), (deepface_path, deepface)):
            missing = [f for f in frame_ids if f not in table]
            if missing:
                raise base.PairingError('%s has no scores for %d frames, '
                                        'e.g. %s' % (path, len(missing),
                                                     missing[:5]))

    rows = []
    for frame_id in frame_ids:
        label = calibrate(fer[frame_id], deepface[frame_id], cfg)
        rows.append([frame_id] + list(label) + [CALIB_VERSION])
    return pd.DataFrame(rows, columns=SOFT_LABEL_COLUMNS)


def read_soft_labels(path):
    frame = pd.read_csv(path, dtype={'frame_id': str})
    return frame.set_index('frame_id')[list(facegraph.EMOTIONS)]


class Mixin(base.BaseMixin):
    """A mixin for run_label()."""
    def run_label(self, fer_scores=None, deepface_scores=None):
        """Write label/soft_labels.csv for every extracted frame.

        Arguments:
            fer_scores, deepface_scores: scorer CSVs with columns
                frame_id, angry, ..., neutral.  Default to the paths
                in config['dataset'].
        """
        dataset = self.config['dataset']
        fer_scores = fer_scores or dataset['fer_scores']
        deepface_scores = deepface_scores or dataset['deepface_scores']
        if not fer_scores or not deepface_scores:
            raise base.UsageError('Labeling needs dataset.fer_scores and '
                                  'dataset.deepface_scores')

        landmarks_path = self._require_artifact(
            'preprocess', 'landmarks', facegraph.landmark_csv_header())
        frame_ids = pd.read_csv(landmarks_path, usecols=['frame_id'],
                                dtype={'frame_id': str})['frame_id']

        cfg = config_from_section(self.config['softlabel'])
        if cfg.renorm == 'softmax':
            logging.info('affectlib: renormalizing with softmax; '
                         'set softlabel.renorm=sum to divide by the sum')
        labels = calibrate_tables(fer_scores, deepface_scores, cfg,
                                  list(frame_ids))

        out_path = os.path.join(self._stage_dir('label'), 'soft_labels.csv')
        labels.to_csv(out_path, index=False)
        self._record_stage('label', {'soft_labels': out_path},
                           schemas={'soft_labels': SOFT_LABEL_COLUMNS},
                           extra={'fer_scores_sha256':
                                      base.sha256_file(fer_scores),
                                  'deepface_scores_sha256':
                                      base.sha256_file(deepface_scores)})
        logging.info('affectlib: labeled %d frames' % len(labels))
        return self
