#!/usr/bin/env python

"""A front-end for the affectlib library.

Each pipeline stage is a subcommand; they communicate only through the
run directory, so you run them in order:

   affect.py preprocess --config c.yaml --run-dir runs/1
   affect.py label      --config c.yaml --run-dir runs/1
   affect.py train      --config c.yaml --run-dir runs/1 --epochs 2
   affect.py eval       --config c.yaml --run-dir runs/1
   affect.py analyze    --config c.yaml --run-dir runs/1
   affect.py report     --run-dir runs/1

`affect.py synth <dir>` writes a small synthetic dataset and config to
try all this on.

The exit code is 0 on success, 2 for usage errors (bad flags, missing
files, bad config), 3 when a stage's inputs are missing or changed
since the stage that wrote them, and 4 on numerical failure.
"""

from __future__ import print_function
import argparse
import json
import logging
import os
import sys

import affectlib
import affectlib.base
import affectlib.preprocess
import affectlib.synthetic


DEFAULT_LOG_LEVEL = logging.INFO

# Commandline flag -> config key it overrides.
_CONFIG_FLAGS = {
    'seed': 'seed',
    'workers': 'workers',
    'run_dir': 'run_dir',
    'manifest': 'dataset.manifest',
    'blur_threshold': 'preprocess.blur_threshold',
    'min_face': 'preprocess.min_face',
    'min_confidence': 'preprocess.min_confidence',
    'fps': 'preprocess.fps',
    'backend': 'preprocess.backend',
    'fer_scores': 'dataset.fer_scores',
    'deepface_scores': 'dataset.deepface_scores',
    'epochs': 'train.epochs',
    'batch_size': 'train.batch_size',
}


class _ParseLogLevel(argparse.Action):
    """Parse the argument as a logging.<level>."""
    def __call__(self, parser, namespace, value, option_string=None):
        setattr(namespace, self.dest, getattr(logging, value.upper()))


def _common_flags():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None,
                        help=('YAML config file.  Defaults to '
                              '$%s, then to built-in defaults.'
                              % affectlib.config.CONFIG_ENVVAR))
    common.add_argument('--run-dir', default=None,
                        help='Directory every stage reads and writes.')
    common.add_argument('--seed', type=int, default=None,
                        help='Overrides the config seed.')
    common.add_argument('--workers', type=int, default=None,
                        help='Worker threads for per-frame processing.')
    common.add_argument('--log-level', default=DEFAULT_LOG_LEVEL,
                        action=_ParseLogLevel,
                        choices=('debug', 'info', 'warning', 'error'),
                        help='Log level (default: info).')
    return common


def setup_parser():
    """Create an ArgumentParser for the pipeline subcommands."""
    parser = argparse.ArgumentParser(
        description='Run the stages of the emotion-recognition pipeline.')
    subparsers = parser.add_subparsers(dest='command')
    subparsers.required = True
    common = _common_flags()

    p = subparsers.add_parser(
        'preprocess', parents=[common],
        help='Gate frames and extract face crops and landmarks.')
    p.add_argument('--manifest', default=None,
                   help=('A frame directory, or a file listing one frame '
                         'path per line.'))
    p.add_argument('--blur-threshold', type=float, default=None,
                   help='Laplacian-variance floor (default %s).'
                   % affectlib.preprocess.BLUR_THRESHOLD)
    p.add_argument('--min-face', type=int, default=None,
                   help='Minimum face width and height in pixels '
                   '(default %s).' % affectlib.preprocess.MIN_FACE)
    p.add_argument('--min-confidence', type=float, default=None,
                   help='Minimum detector confidence (default %s).'
                   % affectlib.preprocess.MIN_CONFIDENCE)
    p.add_argument('--fps', type=float, default=None,
                   help='Frame rate the frames were extracted at '
                   '(default %s).' % affectlib.preprocess.DEFAULT_FPS)
    p.add_argument('--backend', choices=('real', 'stub'), default=None,
                   help='Face backends to use.')
    p.set_defaults(func=cmd_preprocess)

    p = subparsers.add_parser(
        'label', parents=[common],
        help='Calibrate soft labels from two scorer CSVs.')
    p.add_argument('--fer-scores', default=None)
    p.add_argument('--deepface-scores', default=None)
    p.set_defaults(func=cmd_label)

    p = subparsers.add_parser('train', parents=[common],
                              help='Train the fusion network.')
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--batch-size', type=int, default=None)
    p.add_argument('--resume', default=None, metavar='CHECKPOINT',
                   help='Continue training from this checkpoint.')
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser('eval', parents=[common],
                              help='Predict every labeled frame.')
    p.add_argument('--checkpoint', default=None,
                   help='Defaults to the checkpoint `train` recorded.')
    p.set_defaults(func=cmd_eval)

    p = subparsers.add_parser('analyze', parents=[common],
                              help='Statistics and figures over predictions.')
    p.add_argument('--predictions', default=None,
                   help='Defaults to the predictions `eval` recorded.')
    p.set_defaults(func=cmd_analyze)

    p = subparsers.add_parser('report', parents=[common],
                              help='Print the summary of a run.')
    p.set_defaults(func=cmd_report)

    p = subparsers.add_parser('synth', parents=[common],
                              help='Write a small synthetic dataset.')
    p.add_argument('out_dir', help='Where to write the dataset.')
    p.add_argument('--epochs', type=int, default=2,
                   help='Epochs to put in the generated config.')
    p.set_defaults(func=cmd_synth)

    return parser


def build_config(args):
    """Load the config file, then apply the commandline overrides."""
    config = affectlib.load_config(args.config)
    for (flag, key) in sorted(_CONFIG_FLAGS.items()):
        value = getattr(args, flag, None)
        if value is not None:
            config.set(key, value)
    return config


def _run_stage(args, stage, **kwargs):
    """Run one stage with its log copied to <run_dir>/run.log."""
    run = affectlib.Run(build_config(args), args.run_dir).log_to_run_dir()
    try:
        return getattr(run, 'run_%s' % stage)(**kwargs)
    finally:
        run.close_run_log()


def cmd_preprocess(args):
    run = _run_stage(args, 'preprocess')
    for (key, value) in run.quality_report.as_dict().items():
        if isinstance(value, bool):
            value = str(value).lower()
        print('%s: %s' % (key, value))


def cmd_label(args):
    _run_stage(args, 'label')


def cmd_train(args):
    _run_stage(args, 'train', resume=args.resume)


def cmd_eval(args):
    _run_stage(args, 'eval', checkpoint=args.checkpoint)


def cmd_analyze(args):
    _run_stage(args, 'analyze', predictions=args.predictions)


def cmd_report(args):
    run_dir = args.run_dir or build_config(args)['run_dir']
    if not run_dir or not os.path.isdir(run_dir):
        raise affectlib.base.UsageError('No such run directory: %s'
                                        % run_dir)
    summary_path = os.path.join(run_dir, 'analyze', 'run_summary.json')
    if os.path.exists(summary_path):
        with open(summary_path) as f:
            summary = json.load(f)
    else:
        ledger_path = os.path.join(run_dir, affectlib.base.STAGE_LEDGER)
        if not os.path.exists(ledger_path):
            raise affectlib.base.IntegrityError('%s has no completed stages'
                                                % run_dir)
        with open(ledger_path) as f:
            summary = {'stages': sorted(json.load(f))}
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_synth(args):
    seed = args.seed if args.seed is not None else 0
    paths = affectlib.synthetic.write_fixture(args.out_dir, seed, args.epochs)
    print(paths['config'])


def main(argv):
    parser = setup_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(format='%(levelname)s %(message)s')
    logging.getLogger().setLevel(args.log_level)

    try:
        args.func(args)
    except affectlib.base.AffectError as why:
        logging.error('affect %s: %s' % (args.command, why))
        return why.exit_code
    return 0


if __name__ == '__main__':
    sys.exit(main(sys.argv[1:]))
