"""The pipeline configuration: defaults, YAML overrides, CLI overrides.

Every key a stage reads lives in DEFAULTS; a config file may override
any of them but may not introduce new ones.  If the environment
variable AFFECTLIB_CONFIG is set and no config file is given, we load
the file it names.
"""

import copy
import os

import yaml

from . import base


CONFIG_ENVVAR = 'AFFECTLIB_CONFIG'

DEFAULTS = {
    'seed': 0,
    'workers': 1,
    'run_dir': None,
    'dataset': {
        'manifest': None,
        'fer_scores': None,
        'deepface_scores': None,
    },
    'preprocess': {
        'blur_threshold': 25.0,
        'min_face': 30,
        'min_confidence': 0.70,
        'fps': 15.0,
        'padding': 0.2,
        # 'real' (MTCNN + face_recognition + MediaPipe) or 'stub'.
        'backend': 'real',
    },
    'softlabel': {
        'weights': {
            'fer_role': 2.0 / 3.0,
            'deepface_role': 1.0 / 3.0,
        },
        'gamma': 0.7,
        'temperature': 0.7,
        'renorm': 'softmax',
    },
    'model': {
        'gcn': {'hidden': 64},
        'attn': {'cnn_bottleneck': 128, 'gcn_bottleneck': 32},
        'head': {'dropout1': 0.325, 'dropout2': 0.275},
        'backbone': {'kind': 'stub', 'frozen_prefix': 44,
                     'pretrained': False},
        # ImageNet statistics, which is what a pretrained ResNet expects.
        'image_mean': [0.485, 0.456, 0.406],
        'image_std': [0.229, 0.224, 0.225],
    },
    'train': {
        'lr_backbone': 3e-6,
        'lr_head': 1e-5,
        'weight_decay': 5e-4,
        'clip_norm': 1.0,
        'smoothing': 0.1,
        'schedule': {
            'T0': 10,
            'T_mult': 2,
            'eta_min': 1e-5,
            # If set, replaces eta_min for the backbone group only.
            'eta_min_backbone': None,
        },
        'epochs': 50,
        'batch_size': 32,
        'val_fraction': 0.2,
    },
    'analysis': {
        'alpha': 0.05,
    },
}


def _merge(into, overrides, path=''):
    for (key, value) in overrides.items():
        dotted = path + key
        if key not in into:
            raise base.ConfigError('Unknown config key: %s' % dotted)
        if isinstance(into[key], dict):
            if not isinstance(value, dict):
                raise base.ConfigError('Config key %s must be a section'
                                       % dotted)
            _merge(into[key], value, dotted + '.')
        elif isinstance(value, dict):
            raise base.ConfigError('Config key %s is not a section' % dotted)
        else:
            into[key] = _coerce(into[key], value, dotted)


def _coerce(default, value, dotted):
    """Check value against the type of its default, if we know one."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise base.ConfigError('Config key %s must be true/false' % dotted)
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise base.ConfigError('Config key %s must be a number, not %r'
                                   % (dotted, value))
        if isinstance(default, float):
            return float(value)
        if isinstance(value, float):
            if not value.is_integer():
                raise base.ConfigError('Config key %s must be an integer, '
                                       'not %r' % (dotted, value))
            return int(value)
        return value
    return value


class PipelineConfig(object):
    """The effective configuration of a run.

    Sections are accessed like a dict: config['train']['lr_head'].
    """
    def __init__(self, overrides=None):
        self._values = copy.deepcopy(DEFAULTS)
        if overrides:
            _merge(self._values, overrides)

    def __getitem__(self, key):
        return self._values[key]

    def get(self, dotted):
        """Look up a dotted key like 'model.backbone.kind'."""
        value = self._values
        for part in dotted.split('.'):
            if not isinstance(value, dict) or part not in value:
                raise base.ConfigError('Unknown config key: %s' % dotted)
            value = value[part]
        return value

    def set(self, dotted, value):
        """Override a single dotted key, e.g. from a commandline flag."""
        parts = dotted.split('.')
        overrides = value
        for part in reversed(parts):
            overrides = {part: overrides}
        _merge(self._values, overrides)

    def as_dict(self):
        return copy.deepcopy(self._values)


def load_config(path=None):
    """Load a PipelineConfig from a YAML file, or just the defaults.

    If path is None we fall back to $AFFECTLIB_CONFIG, and to the
    defaults if that is unset too.
    """
    path = path or os.environ.get(CONFIG_ENVVAR)
    if not path:
        return PipelineConfig()
    if not os.path.exists(path):
        raise base.UsageError('Config file not found: %s' % path)
    with open(path) as f:
        try:
            overrides = yaml.safe_load(f) or {}
        except yaml.YAMLError as why:
            raise base.ConfigError('Cannot parse %s: %s' % (path, why))
    if not isinstance(overrides, dict):
        raise base.ConfigError('%s must hold a mapping of sections' % path)
    return PipelineConfig(overrides)
