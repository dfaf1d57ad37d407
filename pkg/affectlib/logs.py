"""Mixin for log_to_run_dir().

We always log using the python logging mechanism.  This mixin also
copies everything logged during a run into <run_dir>/run.log, so a run
directory carries its own history.
"""

from __future__ import absolute_import
import logging
import os

from . import base


RUN_LOG = 'run.log'
_LOG_FORMAT = '%(asctime)s %(levelname)s %(message)s'


class Mixin(base.BaseMixin):
    """A mixin for log_to_run_dir()."""
    _run_log_handler = None

    def log_to_run_dir(self, level=logging.INFO):
        """Attach a file handler for <run_dir>/run.log to the root logger."""
        if self._run_log_handler is not None:
            return self

        # Test runs leave the root logger alone.
        if self._in_test_mode():
            return self

        handler = logging.FileHandler(os.path.join(self.run_dir, RUN_LOG))
        handler.setLevel(level)
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        logging.getLogger().addHandler(handler)
        self._run_log_handler = handler
        logging.info('affectlib: logging to %s' % handler.baseFilename)
        return self

    def close_run_log(self):
        if self._run_log_handler is not None:
            logging.getLogger().removeHandler(self._run_log_handler)
            self._run_log_handler.close()
            self._run_log_handler = None
        return self
