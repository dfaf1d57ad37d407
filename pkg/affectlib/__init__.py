"""Library for recognizing children's emotions in video frames.

The goal of affectlib is to take a pile of frames extracted from
interaction videos and get, at the end, per-frame emotion scores and
the statistics over them, with every intermediate result on disk.

USAGE:
   affectlib.Run(config, run_dir)
       .run_preprocess()
       .run_label()
       .run_train()
       .run_eval()
       .run_analyze()

or, if you don't like chaining:
   run = affectlib.Run(config, run_dir)
   run.run_preprocess()
   run.run_label()
   [etc]

config is a config.PipelineConfig; see config.load_config().

The stages are:

    * preprocess -- quality-gated face crops and normalized 468-point
      landmarks from raw frames (preprocess.py)
    * label -- soft labels calibrated from two upstream emotion
      scorers (softlabel.py)
    * train -- the image + face-graph fusion network (fusionnet.py),
      trained against the soft labels (trainer.py)
    * eval -- per-frame predictions and classification metrics
      (trainer.py)
    * analyze -- descriptive statistics, significance tests and
      figures (analysis.py, reports.py)

Each stage reads only what earlier stages wrote into the run
directory, and refuses to run if those files have changed since.
So you can run each stage separately, e.g. from affect.py.
"""

__version__ = '1.0'

from .base import enter_test_mode, exit_test_mode, BaseMixin  # noqa: E402
from .config import PipelineConfig, load_config  # noqa: E402

# These each define a mixin that we incorporate to the Run object
# to define run_foo().
from . import preprocess     # run_preprocess()  # noqa: E402
from . import softlabel      # run_label()  # noqa: E402
from . import trainer        # run_train(), run_eval()  # noqa: E402
from . import analysis       # run_analyze()  # noqa: E402
from . import logs           # log_to_run_dir()  # noqa: E402


class Run(preprocess.Mixin,
          softlabel.Mixin,
          trainer.Mixin,
          analysis.Mixin,
          logs.Mixin,
          BaseMixin):
    """One pipeline run, rooted at a run directory."""
    # BaseMixin defines __init__.
    pass


__all__ = [
    'enter_test_mode',     # defined in base.py
    'exit_test_mode',      # defined in base.py
    'PipelineConfig',      # defined in config.py
    'load_config',         # defined in config.py
    'Run',
]
