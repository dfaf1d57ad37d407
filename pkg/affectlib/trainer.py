"""Mixin for run_train() and run_eval().

Training minimizes KL(y~ || softmax(logits)), where y~ is the soft
label smoothed toward uniform: y~ = (1 - eps) y + eps / 7.  We use
AdamW (decoupled weight decay) with two parameter groups: the
trainable backbone tensors at lr_backbone, everything else at lr_head.
Gradients are clipped to a global L2 norm of clip_norm, and each
group's rate follows cosine annealing with warm restarts, updated once
per epoch.

Metrics use hard labels: the argmax of the soft label, lowest class
index on ties.
"""

from __future__ import absolute_import
import collections
import logging
import math
import os

import cv2
import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
import torch.utils.data
import tqdm

from . import base
from . import facegraph
from . import fusionnet
from . import preprocess
from . import softlabel


METRICS_COLUMNS = ['epoch', 'loss', 'lr_backbone', 'lr_head', 'accuracy',
                   'macro_f1']
PREDICTION_COLUMNS = ['frame_id', 'child_id'] + list(facegraph.EMOTIONS)

Schedule = collections.namedtuple('Schedule', ('T0', 'T_mult', 'eta_min'))

StepResult = collections.namedtuple(
    'StepResult', ('loss', 'grad_norm', 'fallbacks'))

MetricsReport = collections.namedtuple(
    'MetricsReport',
    ('n', 'empty', 'loss', 'accuracy', 'confusion', 'precision', 'recall',
     'f1', 'support', 'absent', 'macro_precision', 'macro_recall',
     'macro_f1'))


def smooth_targets(y_soft, epsilon):
    """(1 - eps) * y + eps / 7, for one distribution or a batch."""
    return (1.0 - epsilon) * y_soft + epsilon / facegraph.NUM_CLASSES


def kl_loss(logits, targets, batch_index=None):
    """Mean over the batch of KL(targets || softmax(logits))."""
    if not torch.isfinite(logits).all():
        raise base.NumericalError('Non-finite logits in batch %s'
                                  % batch_index)
    # kl_div computes targets * (log targets - input), with 0 log 0 = 0.
    return F.kl_div(F.log_softmax(logits, dim=-1), targets,
                    reduction='batchmean')


def lr_at(step_epoch, group_base, sched):
    """Cosine annealing with warm restarts.

    Cycles last T0, T0 * T_mult, T0 * T_mult**2, ... epochs; within a
    cycle of length T the rate is
    eta_min + (base - eta_min) * (1 + cos(pi * t / T)) / 2.
    """
    _check_schedule(sched)
    start = 0
    length = sched.T0
    while step_epoch >= start + length:
        start += length
        length *= sched.T_mult
    t_cur = step_epoch - start
    return (sched.eta_min + (group_base - sched.eta_min) *
            (1 + math.cos(math.pi * t_cur / length)) / 2)


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _check_schedule(sched):
    if not (_is_int(sched.T0) and sched.T0 > 0):
        raise base.ConfigError('train.schedule.T0 must be a positive '
                               'integer, not %r' % (sched.T0,))
    if not (_is_int(sched.T_mult) and sched.T_mult >= 1):
        raise base.ConfigError('train.schedule.T_mult must be an integer '
                               '>= 1, not %r' % (sched.T_mult,))


def group_schedules(train_cfg):
    """The Schedule for each parameter group, keyed 'backbone' and 'head'."""
    section = train_cfg['schedule']
    head = Schedule(section['T0'], section['T_mult'], section['eta_min'])
    eta_min_backbone = section['eta_min_backbone']
    if eta_min_backbone is None:
        backbone = head
    else:
        backbone = head._replace(eta_min=eta_min_backbone)
    return {'backbone': backbone, 'head': head}


def check_train_config(train_cfg):
    for key in ('lr_backbone', 'lr_head'):
        if not train_cfg[key] > 0:
            raise base.ConfigError('train.%s must be positive' % key)
    if not 0 <= train_cfg['smoothing'] < 1:
        raise base.ConfigError('train.smoothing must be in [0, 1)')
    schedules = group_schedules(train_cfg)
    for (group, sched) in sorted(schedules.items()):
        _check_schedule(sched)
        if not sched.eta_min > 0:
            raise base.ConfigError('eta_min must be positive')
        base_lr = train_cfg['lr_%s' % group]
        if sched.eta_min > base_lr:
            logging.warning(
                'affectlib: WARNING: eta_min=%g is above the %s base rate '
                '%g, so its schedule anneals *upward*.  Set '
                'train.schedule.eta_min_backbone to override.'
                % (sched.eta_min, group, base_lr))


def adamw(param_groups, weight_decay):
    return torch.optim.AdamW(param_groups, weight_decay=weight_decay)


def make_optimizer(model, train_cfg):
    groups = []
    for (name, params) in (('backbone', model.backbone_parameters()),
                           ('head', model.head_parameters())):
        if params:
            base_lr = train_cfg['lr_%s' % name]
            groups.append({'params': params, 'lr': base_lr,
                           'base_lr': base_lr, 'name': name})
    return adamw(groups, train_cfg['weight_decay'])


def apply_schedule(optimizer, epoch, train_cfg):
    """Set every group's rate for this epoch; return {group: rate}."""
    schedules = group_schedules(train_cfg)
    rates = {}
    for group in optimizer.param_groups:
        group['lr'] = lr_at(epoch, group['base_lr'], schedules[group['name']])
        rates[group['name']] = group['lr']
    return rates


def clip_gradients(params, max_norm):
    """Scale gradients to a global L2 norm <= max_norm; return the old norm."""
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


def train_step(model, batch, optimizer, clip_norm=1.0, batch_index=None):
    """One optimization step on (images, coords, smoothed targets).

    On a non-finite loss or gradient we raise NumericalError without
    stepping, leaving the parameters and optimizer state as they were.
    """
    (images, coords, targets) = batch
    model.train()
    optimizer.zero_grad(set_to_none=True)
    logits = model(images, coords)
    loss = kl_loss(logits, targets, batch_index)
    if not torch.isfinite(loss):
        raise base.NumericalError('Non-finite loss %r in batch %s'
                                  % (float(loss), batch_index))
    loss.backward()
    params = [p for group in optimizer.param_groups for p in group['params']]
    grad_norm = clip_gradients(params, clip_norm)
    if not math.isfinite(grad_norm):
        optimizer.zero_grad(set_to_none=True)
        raise base.NumericalError('Non-finite gradient norm in batch %s'
                                  % batch_index)
    optimizer.step()
    return StepResult(float(loss), grad_norm, model.last_fallbacks)


def metrics_from_labels(y_true, y_pred, loss=0.0):
    """Accuracy, per-class P/R/F1 and the confusion matrix.

    0/0 counts as 0.  A class absent from both labels and predictions
    is flagged and left out of the macro averages.
    """
    k = facegraph.NUM_CLASSES
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    n = len(y_true)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)

    true_pos = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    support = confusion.sum(axis=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        precision = np.where(predicted > 0, true_pos / predicted, 0.0)
        recall = np.where(support > 0, true_pos / support, 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    absent = (support == 0) & (predicted == 0)
    present = ~absent

    def macro(values):
        return float(values[present].mean()) if present.any() else 0.0

    return MetricsReport(
        n=n, empty=(n == 0), loss=float(loss),
        accuracy=float(true_pos.sum() / n) if n else 0.0,
        confusion=confusion, precision=precision, recall=recall, f1=f1,
        support=support, absent=absent,
        macro_precision=macro(precision), macro_recall=macro(recall),
        macro_f1=macro(f1))


def predict_dataset(model, dataset, batch_size=32):
    """Softmax outputs and targets for a whole dataset, in order."""
    model.eval()
    probs = []
    targets = []
    loader = torch.utils.data.DataLoader(dataset, batch_size=batch_size,
                                         shuffle=False)
    with torch.no_grad():
        for (images, coords, target) in loader:
            (logits, _) = fusionnet.fusion_forward(model, images, coords)
            probs.append(fusionnet.softmax_probabilities(logits))
            targets.append(target)
    if not probs:
        empty = torch.zeros(0, facegraph.NUM_CLASSES)
        return (empty, empty)
    return (torch.cat(probs), torch.cat(targets))


def metrics_from_predictions(probs, targets, smoothing=0.0):
    """MetricsReport for predicted probabilities against soft targets."""
    if len(probs) == 0:
        return metrics_from_labels([], [])
    smoothed = smooth_targets(targets, smoothing)
    loss = F.kl_div(torch.log(probs.clamp_min(1e-30)), smoothed,
                    reduction='batchmean')
    # torch.argmax, like np.argmax, returns the first maximal index.
    return metrics_from_labels(targets.argmax(dim=1).numpy(),
                               probs.argmax(dim=1).numpy(), float(loss))


def evaluate(model, dataset, batch_size=32, smoothing=0.0):
    """MetricsReport for a dataset of (image, coords, soft label) triplets."""
    (probs, targets) = predict_dataset(model, dataset, batch_size)
    return metrics_from_predictions(probs, targets, smoothing)


def write_metrics_report(report, out_dir, prefix='metrics'):
    """Write <prefix>.txt, <prefix>_per_class.csv and <prefix>_confusion.csv."""
    paths = {}
    paths['summary'] = os.path.join(out_dir, '%s.txt' % prefix)
    with open(paths['summary'], 'w') as f:
        for key in ('n', 'empty', 'loss', 'accuracy', 'macro_precision',
                    'macro_recall', 'macro_f1'):
            value = getattr(report, key)
            if isinstance(value, bool):
                value = str(value).lower()
            f.write('%s: %s\n' % (key, value))
    paths['per_class'] = os.path.join(out_dir, '%s_per_class.csv' % prefix)
    pd.DataFrame({
        'class': facegraph.EMOTIONS,
        'precision': report.precision,
        'recall': report.recall,
        'f1': report.f1,
        'support': report.support,
        'absent': report.absent,
    }).to_csv(paths['per_class'], index=False)
    paths['confusion'] = os.path.join(out_dir, '%s_confusion.csv' % prefix)
    pd.DataFrame(report.confusion, index=facegraph.EMOTIONS,
                 columns=facegraph.EMOTIONS).to_csv(paths['confusion'],
                                                    index_label='label')
    return paths


class FaceDataset(torch.utils.data.Dataset):
    """(image, landmarks, soft label) triplets read from a run directory.

    Crops are read from disk on access; landmarks and labels are held
    in memory.
    """
    def __init__(self, frame_ids, crops_dir, landmarks, labels, mean, std):
        self.frame_ids = list(frame_ids)
        self.crops_dir = crops_dir
        self.coords = {f: facegraph.coords_from_row(landmarks.loc[f])
                       for f in self.frame_ids}
        self.labels = labels
        self.mean = mean
        self.std = std

    def __len__(self):
        return len(self.frame_ids)

    def __getitem__(self, index):
        frame_id = self.frame_ids[index]
        path = os.path.join(self.crops_dir, '%s.png' % frame_id)
        image = cv2.imread(path, cv2.IMREAD_COLOR)
        if image is None:
            raise base.IntegrityError('Missing face crop %s' % path)
        image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
        return (fusionnet.image_tensor(image, self.mean, self.std)[0],
                torch.as_tensor(self.coords[frame_id], dtype=torch.float32),
                torch.as_tensor(self.labels.loc[frame_id].to_numpy(
                    dtype=np.float64), dtype=torch.float32))


def split_frames(frame_ids, val_fraction, seed):
    """A seeded (train, validation) split by frame, each in input order."""
    frame_ids = list(frame_ids)
    n_val = int(round(len(frame_ids) * val_fraction))
    if len(frame_ids) > 1:
        n_val = min(n_val, len(frame_ids) - 1)
    else:
        n_val = 0
    rng = np.random.RandomState(seed)
    val = set(rng.permutation(len(frame_ids))[:n_val].tolist())
    train_ids = [f for (i, f) in enumerate(frame_ids) if i not in val]
    val_ids = [f for (i, f) in enumerate(frame_ids) if i in val]
    return (train_ids, val_ids)


def fit(model, train_set, val_set, train_cfg, out_dir, seed,
        config_hash=None, resume_payload=None):
    """Train for train_cfg['epochs'] epochs; return the metrics DataFrame.

    Writes out_dir/metrics.csv after every epoch, plus last.pt and
    best.pt (by validation macro-F1).  resume_payload is a checkpoint
    dict from fusionnet.load_checkpoint() to continue from.
    """
    check_train_config(train_cfg)
    optimizer = make_optimizer(model, train_cfg)
    generator = torch.Generator()
    generator.manual_seed(seed)
    rows = []
    start_epoch = 0
    best_f1 = -1.0
    if resume_payload is not None:
        optimizer.load_state_dict(resume_payload['optimizer'])
        generator.set_state(resume_payload['generator_state'])
        torch.set_rng_state(resume_payload['torch_rng_state'])
        rows = [list(r) for r in resume_payload['metrics']]
        start_epoch = resume_payload['epoch'] + 1
        best_f1 = resume_payload.get('best_macro_f1', -1.0)
        logging.info('affectlib: resuming at epoch %d' % start_epoch)

    loader = torch.utils.data.DataLoader(
        train_set, batch_size=train_cfg['batch_size'], shuffle=True,
        generator=generator, num_workers=0)
    metrics_path = os.path.join(out_dir, 'metrics.csv')

    epochs = range(start_epoch, train_cfg['epochs'])
    for epoch in tqdm.tqdm(epochs, desc='train', unit='epoch',
                           disable=base.in_test_mode()):
        rates = apply_schedule(optimizer, epoch, train_cfg)
        losses = []
        for (i, (images, coords, targets)) in enumerate(loader):
            targets = smooth_targets(targets, train_cfg['smoothing'])
            step = train_step(model, (images, coords, targets), optimizer,
                              train_cfg['clip_norm'], batch_index=i)
            losses.append(step.loss)
        report = evaluate(model, val_set, train_cfg['batch_size'],
                          train_cfg['smoothing'])
        rows.append([epoch, float(np.mean(losses)) if losses else 0.0,
                     rates.get('backbone', 0.0), rates.get('head', 0.0),
                     report.accuracy, report.macro_f1])
        pd.DataFrame(rows, columns=METRICS_COLUMNS).to_csv(metrics_path,
                                                           index=False)
        logging.info('affectlib: epoch %d loss %.6f val accuracy %.4f '
                     'macro-F1 %.4f' % tuple(rows[-1][:2] + rows[-1][4:]))

        payload = {
            'epoch': epoch,
            'optimizer': optimizer.state_dict(),
            'generator_state': generator.get_state(),
            'torch_rng_state': torch.get_rng_state(),
            'metrics': rows,
            'best_macro_f1': max(best_f1, report.macro_f1),
        }
        fusionnet.save_checkpoint(os.path.join(out_dir, 'last.pt'), model,
                                  config_hash, seed, payload)
        if report.macro_f1 > best_f1:
            best_f1 = report.macro_f1
            fusionnet.save_checkpoint(os.path.join(out_dir, 'best.pt'),
                                      model, config_hash, seed, payload)

    if not os.path.exists(metrics_path):
        pd.DataFrame(rows, columns=METRICS_COLUMNS).to_csv(metrics_path,
                                                           index=False)
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


class Mixin(base.BaseMixin):
    """A mixin for run_train() and run_eval()."""
    def _load_train_inputs(self):
        labels_path = self._require_artifact('label', 'soft_labels',
                                             softlabel.SOFT_LABEL_COLUMNS)
        landmarks_path = self._require_artifact(
            'preprocess', 'landmarks', facegraph.landmark_csv_header())
        labels = softlabel.read_soft_labels(labels_path)
        landmarks = facegraph.read_landmark_csv(landmarks_path)
        frame_ids = [f for f in labels.index if f in landmarks.index]
        crops_dir = os.path.join(self.run_dir, 'preprocess', 'crops')
        model_cfg = self.config['model']
        return (frame_ids, crops_dir, landmarks, labels,
                model_cfg['image_mean'], model_cfg['image_std'])

    def run_train(self, resume=None):
        """Write train/{metrics.csv, last.pt, best.pt, validation metrics}.

        Arguments:
            resume: a checkpoint written by an earlier run_train() to
                continue from.
        """
        base.seed_everything(self.seed)
        (frame_ids, crops_dir, landmarks, labels, mean, std) = \
            self._load_train_inputs()
        train_cfg = self.config['train']
        (train_ids, val_ids) = split_frames(frame_ids,
                                           train_cfg['val_fraction'],
                                           self.seed)
        train_set = FaceDataset(train_ids, crops_dir, landmarks, labels,
                                mean, std)
        val_set = FaceDataset(val_ids, crops_dir, landmarks, labels,
                              mean, std)
        logging.info('affectlib: training on %d frames, validating on %d'
                     % (len(train_set), len(val_set)))

        model = fusionnet.build_model(self.config)
        resume_payload = None
        if resume:
            resume_payload = fusionnet.load_checkpoint(resume, model)

        out_dir = self._stage_dir('train')
        config_hash = self._snapshot_config('train')
        metrics = fit(model, train_set, val_set, train_cfg, out_dir,
                      self.seed, config_hash, resume_payload)
        report = evaluate(model, val_set, train_cfg['batch_size'],
                          train_cfg['smoothing'])
        paths = write_metrics_report(report, out_dir, 'validation')

        outputs = {'metrics': os.path.join(out_dir, 'metrics.csv'),
                   'validation': paths['summary']}
        if os.path.exists(os.path.join(out_dir, 'last.pt')):
            outputs['checkpoint'] = os.path.join(out_dir, 'last.pt')
        self._record_stage('train', outputs,
                           schemas={'metrics': METRICS_COLUMNS},
                           extra={'train_frames': len(train_ids),
                                  'val_frames': len(val_ids),
                                  'epochs_run': len(metrics)})
        self.train_metrics = metrics
        return self

    def run_eval(self, checkpoint=None):
        """Predict every labeled frame; write eval/predictions.csv and metrics.

        Arguments:
            checkpoint: defaults to the checkpoint the train stage
                recorded.
        """
        checkpoint = checkpoint or self._require_artifact('train',
                                                          'checkpoint')
        frames_path = self._require_artifact('preprocess', 'frames',
                                             preprocess.FRAME_COLUMNS)
        (frame_ids, crops_dir, landmarks, labels, mean, std) = \
            self._load_train_inputs()
        model = fusionnet.build_model(self.config)
        fusionnet.load_checkpoint(checkpoint, model)

        dataset = FaceDataset(frame_ids, crops_dir, landmarks, labels,
                              mean, std)
        batch_size = self.config['train']['batch_size']
        (probs, targets) = predict_dataset(model, dataset, batch_size)
        report = metrics_from_predictions(probs, targets)

        frames = pd.read_csv(frames_path, dtype={'frame_id': str,
                                                 'source_video': str})
        child_of = dict(zip(frames['frame_id'], frames['source_video']))
        predictions = pd.DataFrame(probs.numpy().astype(np.float64),
                                   columns=list(facegraph.EMOTIONS))
        predictions.insert(0, 'child_id', [child_of[f] for f in frame_ids])
        predictions.insert(0, 'frame_id', frame_ids)

        out_dir = self._stage_dir('eval')
        predictions_path = os.path.join(out_dir, 'predictions.csv')
        predictions.to_csv(predictions_path, index=False)
        paths = write_metrics_report(report, out_dir)
        self._record_stage('eval',
                           {'predictions': predictions_path,
                            'metrics': paths['summary'],
                            'per_class': paths['per_class']},
                           schemas={'predictions': PREDICTION_COLUMNS})
        logging.info('affectlib: accuracy %.4f, macro-F1 %.4f on %d frames'
                     % (report.accuracy, report.macro_f1, report.n))
        self.eval_metrics = report
        return self
