"""Defines the "base" mixin that all stage mixins derive from.

It defines a few helpful utility functions, the error hierarchy, and the
run-directory bookkeeping shared by every stage.

To create a new stage mixin that defines run_xx:
1) Create a new file for your new mixin
2) Have it inherit from BaseMixin
3) Include the mixin in Run in __init__.py.

If possible, your new Mixin class should *ONLY* define run_xx.
Everything else should be free functions in your file.  This minimizes
the chance that methods on your mixin will have a name conflict with
methods on another mixin.

If you must have methods on your Mixin (because they need access to
the vars of `self`), try to include the name of your stage in the
method name, e.g. `_load_train_split`, not `_load_split`.

Stages talk to each other only through files in the run directory.
Every stage records the sha256 of what it wrote in `stages.json`, and
every stage checks those hashes before it reads an upstream artifact.
"""

import collections
import hashlib
import json
import logging
import os
import random

import numpy as np
import torch
import yaml


STAGE_LEDGER = 'stages.json'

_TEST_MODE = False


def enter_test_mode():
    """In test mode we always use the stub backends and hide progress bars."""
    global _TEST_MODE
    _TEST_MODE = True


def exit_test_mode():
    """Exit test mode, and resume using the configured backends."""
    global _TEST_MODE
    _TEST_MODE = False


def in_test_mode():
    return _TEST_MODE


class AffectError(Exception):
    """Base class for everything affectlib raises on purpose.

    exit_code is what affect.py returns when this error ends a run.
    """
    exit_code = 1


class UsageError(AffectError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class IntegrityError(AffectError):
    exit_code = 3


class PairingError(IntegrityError):
    pass


class TopologyError(IntegrityError):
    pass


class NumericalError(AffectError):
    exit_code = 4


class ShapeError(UsageError, ValueError):
    pass


class DistributionError(UsageError, ValueError):
    pass


class LandmarkError(UsageError, ValueError):
    pass


class ImageError(UsageError, ValueError):
    pass


class BackendError(UsageError):
    pass


def seed_everything(seed):
    """Seed python, numpy and torch from one integer."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text):
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def schema_hash(columns):
    """The hash of a CSV schema is the hash of its comma-joined header."""
    return sha256_text(','.join(columns))


def read_csv_header(path):
    with open(path) as f:
        return f.readline().rstrip('\r\n').split(',')


def read_key_values(path):
    """Parse the `key: value` report files the stages write."""
    values = collections.OrderedDict()
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            (key, value) = line.split(':', 1)
            value = value.strip()
            if value in ('true', 'false'):
                values[key] = (value == 'true')
                continue
            for parse in (int, float):
                try:
                    values[key] = parse(value)
                    break
                except ValueError:
                    pass
            else:
                values[key] = value
    return values


class BaseMixin(object):
    def __init__(self, config, run_dir=None):
        """Create a new Run.

        The arguments here are things that are common to all stages.

        Arguments:
            config: a config.PipelineConfig holding the effective
                settings for every stage.
            run_dir: the directory all stages read from and write to.
                If omitted, we use config['run_dir'].
        """
        self.config = config
        self.run_dir = run_dir or config['run_dir']
        if not self.run_dir:
            raise UsageError('No run directory given (--run-dir or run_dir)')
        self.seed = config['seed']
        os.makedirs(self.run_dir, exist_ok=True)

    def _in_test_mode(self):
        return _TEST_MODE

    def _stage_dir(self, stage):
        path = os.path.join(self.run_dir, stage)
        os.makedirs(path, exist_ok=True)
        return path

    def _load_ledger(self):
        path = os.path.join(self.run_dir, STAGE_LEDGER)
        if not os.path.exists(path):
            return {}
        with open(path) as f:
            return json.load(f)

    def _snapshot_config(self, stage):
        """Write the effective config for this stage; return its hash."""
        text = yaml.safe_dump(self.config.as_dict(), sort_keys=True)
        with open(os.path.join(self.run_dir,
                               'config.%s.yaml' % stage), 'w') as f:
            f.write(text)
        return sha256_text(text)

    def _record_stage(self, stage, outputs, schemas=None, extra=None):
        """Record the hashes of the files a stage wrote.

        outputs maps an artifact name to its path.  schemas optionally
        maps an artifact name to its column list.
        """
        from . import __version__

        ledger = self._load_ledger()
        entry = {
            'version': __version__,
            'seed': self.seed,
            'config_hash': self._snapshot_config(stage),
            'outputs': {},
        }
        for (name, path) in sorted(outputs.items()):
            entry['outputs'][name] = {
                'path': os.path.relpath(path, self.run_dir),
                'sha256': sha256_file(path),
            }
            if schemas and name in schemas:
                entry['outputs'][name]['schema'] = schema_hash(schemas[name])
        if extra:
            entry.update(extra)
        ledger[stage] = entry
        with open(os.path.join(self.run_dir, STAGE_LEDGER), 'w') as f:
            json.dump(ledger, f, indent=2, sort_keys=True)
        logging.info('affectlib: recorded stage %s (%d outputs)'
                     % (stage, len(outputs)))

    def _require_artifact(self, stage, name, columns=None):
        """Return the path of an upstream artifact after checking it.

        We raise IntegrityError if the upstream stage never ran, if the
        file changed since it was recorded, or if its header does not
        match the schema we expect to read.
        """
        entry = self._load_ledger().get(stage)
        if not entry or name not in entry['outputs']:
            raise IntegrityError('Missing upstream artifact %s/%s; run the '
                                 '`%s` stage first' % (stage, name, stage))
        record = entry['outputs'][name]
        path = os.path.join(self.run_dir, record['path'])
        if not os.path.exists(path):
            raise IntegrityError('Upstream artifact %s is gone' % path)
        actual = sha256_file(path)
        if actual != record['sha256']:
            raise IntegrityError('Artifact %s changed since stage %s: '
                                 'recorded %s, found %s'
                                 % (path, stage, record['sha256'], actual))
        if columns is not None:
            expected = schema_hash(columns)
            found = schema_hash(read_csv_header(path))
            if expected != found:
                raise IntegrityError('Schema mismatch in %s: expected %s, '
                                     'found %s' % (path, expected, found))
        return path
