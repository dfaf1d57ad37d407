"""Mixin for run_analyze(): statistics over the model's per-frame scores.

The input is eval/predictions.csv: one softmax distribution per frame,
tagged with the child it came from.  We report per-emotion descriptive
statistics (pooled over frames and per child), the argmax label
histogram, each child's dominant affect polarity, and a one-way ANOVA,
a Kruskal-Wallis test and Tukey HSD across the seven score columns.

A child's dominant emotion is the argmax of their summed non-neutral
probability mass; neutral is left out because it dominates frame
counts.  Positive is {happy, surprise}, negative is {sad, angry,
disgust, fear}.
"""

from __future__ import absolute_import
import collections
import itertools
import json
import logging
import os

import numpy as np
import pandas as pd
import scipy.special
import scipy.stats

from . import base
from . import facegraph


POSITIVE = frozenset(('happy', 'surprise'))
NEGATIVE = frozenset(('sad', 'angry', 'disgust', 'fear'))
NON_NEUTRAL = tuple(e for e in facegraph.EMOTIONS if e != 'neutral')

SERIES_COLUMNS = ['frame_id', 'child_id'] + list(facegraph.EMOTIONS)

# statistic and p_value are None when a flag says they are undefined.
StatTestResult = collections.namedtuple(
    'StatTestResult',
    ('test_name', 'statistic', 'dof', 'p_value', 'flags', 'pairwise'))

DescriptiveStats = collections.namedtuple(
    'DescriptiveStats', ('table', 'n', 'empty', 'single_row'))

PolaritySummary = collections.namedtuple(
    'PolaritySummary',
    ('positive_fraction', 'negative_fraction', 'per_child', 'excluded'))

AnalysisResults = collections.namedtuple(
    'AnalysisResults',
    ('series', 'descriptive', 'per_child', 'histogram', 'polarity', 'anova',
     'kruskal', 'tukey'))


def read_series(path):
    frame = pd.read_csv(path, dtype={'frame_id': str, 'child_id': str})
    if list(frame.columns) != SERIES_COLUMNS:
        raise base.IntegrityError('%s: expected columns %s, found %s'
                                  % (path, ','.join(SERIES_COLUMNS),
                                     ','.join(frame.columns)))
    return frame


def _scores(series):
    if isinstance(series, pd.DataFrame):
        return series[list(facegraph.EMOTIONS)].to_numpy(dtype=np.float64)
    scores = np.asarray(series, dtype=np.float64)
    return scores.reshape(-1, facegraph.NUM_CLASSES)


def descriptive_stats(series):
    """Per-emotion mean, sample std, min, quartiles and max over frames."""
    scores = pd.DataFrame(_scores(series), columns=list(facegraph.EMOTIONS))
    n = len(scores)
    stats = pd.DataFrame(index=list(facegraph.EMOTIONS))
    stats.index.name = 'emotion'
    if n == 0:
        for column in ('mean', 'std', 'min', 'q1', 'median', 'q3', 'max'):
            stats[column] = 0.0
        stats['n'] = 0
        return DescriptiveStats(stats, 0, True, False)
    stats['mean'] = scores.mean()
    # n=1 has no sample deviation; we report 0 and flag it.
    stats['std'] = scores.std(ddof=1) if n > 1 else 0.0
    stats['min'] = scores.min()
    stats['q1'] = scores.quantile(0.25)
    stats['median'] = scores.quantile(0.5)
    stats['q3'] = scores.quantile(0.75)
    stats['max'] = scores.max()
    stats['n'] = n
    return DescriptiveStats(stats, n, False, n == 1)


def per_child_stats(series):
    """Mean and sample std of every emotion score, per child."""
    grouped = series.groupby('child_id', sort=True)[list(facegraph.EMOTIONS)]
    means = grouped.mean().add_suffix('_mean')
    stds = grouped.std(ddof=1).fillna(0.0).add_suffix('_std')
    table = pd.concat([means, stds], axis=1)
    columns = []
    for emotion in facegraph.EMOTIONS:
        columns.extend(['%s_mean' % emotion, '%s_std' % emotion])
    table = table[columns]
    table.insert(0, 'frames', grouped.size())
    return table


def label_histogram(series):
    """How many frames each class wins, ties going to the lowest index."""
    scores = _scores(series)
    if len(scores):
        counts = np.bincount(np.argmax(scores, axis=1),
                             minlength=facegraph.NUM_CLASSES)
    else:
        counts = np.zeros(facegraph.NUM_CLASSES, dtype=np.int64)
    return pd.Series(counts, index=list(facegraph.EMOTIONS), name='count')


def polarity_of(emotion):
    if emotion in POSITIVE:
        return 'positive'
    if emotion in NEGATIVE:
        return 'negative'
    return None


def polarity_summary(series):
    """Fraction of children whose dominant emotion is positive or negative.

    Children with no non-neutral mass at all are excluded and listed.
    """
    mass = series.groupby('child_id', sort=True)[list(NON_NEUTRAL)].sum()
    rows = []
    excluded = []
    for (child_id, row) in mass.iterrows():
        values = row.to_numpy(dtype=np.float64)
        total = values.sum()
        if total <= 0:
            excluded.append(child_id)
            rows.append([child_id, None, None, 0.0, True])
            continue
        dominant = NON_NEUTRAL[int(np.argmax(values))]
        rows.append([child_id, dominant, polarity_of(dominant), total, False])
    table = pd.DataFrame(rows, columns=['child_id', 'dominant', 'polarity',
                                        'non_neutral_mass', 'excluded'])
    included = table[~table['excluded']]
    if len(included):
        positive = float((included['polarity'] == 'positive').mean())
        negative = float((included['polarity'] == 'negative').mean())
    else:
        positive = negative = 0.0
    if excluded:
        logging.warning('affectlib: %d children have no non-neutral mass and '
                        'are left out of the polarity summary' % len(excluded))
    return PolaritySummary(positive, negative, table, excluded)


def emotion_groups(series):
    """The seven per-emotion score columns, pooled over all frames."""
    scores = _scores(series)
    return [scores[:, k] for k in range(facegraph.NUM_CLASSES)]


def _check_groups(groups, test_name):
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise base.ShapeError('%s needs at least 2 groups' % test_name)
    if any(len(g) == 0 for g in groups):
        raise base.ShapeError('%s got an empty group' % test_name)
    if sum(len(g) for g in groups) <= len(groups):
        raise base.ShapeError('%s needs more observations than groups'
                              % test_name)
    return groups


def _anova_terms(groups):
    """(between SS, within SS, k, N) for a list of groups."""
    everything = np.concatenate(groups)
    grand = everything.mean()
    ss_between = sum(len(g) * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    return (ss_between, ss_within, len(groups), len(everything))


def anova_oneway(groups):
    """Classic one-way ANOVA.  p is the F survival function."""
    groups = _check_groups(groups, 'ANOVA')
    (ss_between, ss_within, k, n) = _anova_terms(groups)
    (df_between, df_within) = (k - 1, n - k)
    ms_between = ss_between / df_between
    ms_within = ss_within / df_within
    if ms_within == 0:
        if ms_between == 0:
            return StatTestResult('anova', None, (df_between, df_within),
                                  None, ('undefined_f',), None)
        return StatTestResult('anova', float('inf'), (df_between, df_within),
                              0.0, ('infinite_f',), None)
    f = ms_between / ms_within
    # P(F > f) = I_x(d2/2, d1/2) with x = d2 / (d2 + d1 f).
    p = scipy.special.betainc(df_within / 2.0, df_between / 2.0,
                              df_within / (df_within + df_between * f))
    return StatTestResult('anova', float(f), (df_between, df_within),
                          float(np.clip(p, 0.0, 1.0)), (), None)


def kruskal_wallis(groups):
    """Kruskal-Wallis H with mid-ranks and the tie correction."""
    groups = _check_groups(groups, 'Kruskal-Wallis')
    everything = np.concatenate(groups)
    n = len(everything)
    dof = len(groups) - 1
    ranks = scipy.stats.rankdata(everything)
    (_, ties) = np.unique(everything, return_counts=True)
    correction = 1.0 - (ties ** 3 - ties).sum() / float(n ** 3 - n)
    if correction <= 0:
        return StatTestResult('kruskal', 0.0, dof, 1.0, ('all_ties',), None)

    h = 0.0
    start = 0
    for g in groups:
        rank_sum = ranks[start:start + len(g)].sum()
        h += rank_sum ** 2 / len(g)
        start += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    h = max(h / correction, 0.0)
    p = scipy.special.gammaincc(dof / 2.0, h / 2.0)
    return StatTestResult('kruskal', float(h), dof,
                          float(np.clip(p, 0.0, 1.0)), (), None)


def tukey_hsd(groups, alpha=0.05, names=None):
    """All pairwise mean comparisons with the Tukey-Kramer adjustment.

    For groups i < j, mean_diff is mean_i - mean_j with standard error
    sqrt(MSE / 2 * (1/n_i + 1/n_j)), q = |mean_diff| / se, and the
    adjusted p-value and confidence interval come from the studentized
    range distribution with k groups and N - k degrees of freedom.
    """
    groups = _check_groups(groups, 'Tukey HSD')
    if names is None:
        names = list(facegraph.EMOTIONS[:len(groups)]) \
            if len(groups) <= facegraph.NUM_CLASSES \
            else [str(i) for i in range(len(groups))]
    (_, ss_within, k, n) = _anova_terms(groups)
    dof = n - k
    mse = ss_within / dof
    critical = float(scipy.stats.studentized_range.ppf(1 - alpha, k, dof))

    rows = []
    for (i, j) in itertools.combinations(range(k), 2):
        diff = groups[i].mean() - groups[j].mean()
        se = np.sqrt(mse / 2.0 * (1.0 / len(groups[i]) + 1.0 / len(groups[j])))
        if se == 0:
            q = 0.0 if diff == 0 else float('inf')
            p = 1.0 if diff == 0 else 0.0
        else:
            q = abs(diff) / se
            p = float(scipy.stats.studentized_range.sf(q, k, dof))
        p = float(np.clip(p, 0.0, 1.0))
        rows.append([names[i], names[j], float(diff), float(q), p,
                     float(diff - critical * se), float(diff + critical * se),
                     bool(p < alpha)])
    pairwise = pd.DataFrame(rows, columns=['group_a', 'group_b', 'mean_diff',
                                           'q', 'p_adj', 'ci_low', 'ci_high',
                                           'significant'])
    return StatTestResult('tukey_hsd', critical, dof, None, (), pairwise)


def analyze_series(series, alpha=0.05):
    """Every statistic we report, as an AnalysisResults."""
    groups = emotion_groups(series)
    if len(series) >= 2:
        anova = anova_oneway(groups)
        kruskal = kruskal_wallis(groups)
        tukey = tukey_hsd(groups, alpha)
    else:
        logging.warning('affectlib: %d frames is too few for significance '
                        'tests' % len(series))
        anova = StatTestResult('anova', None, None, None, ('too_few',), None)
        kruskal = StatTestResult('kruskal', None, None, None, ('too_few',),
                                 None)
        tukey = StatTestResult('tukey_hsd', None, None, None, ('too_few',),
                               None)
    return AnalysisResults(
        series=series,
        descriptive=descriptive_stats(series),
        per_child=per_child_stats(series),
        histogram=label_histogram(series),
        polarity=polarity_summary(series),
        anova=anova, kruskal=kruskal, tukey=tukey)


class Mixin(base.BaseMixin):
    """A mixin for run_analyze()."""
    def run_analyze(self, predictions=None):
        """Write the analyze/ bundle: statistics CSVs, test results, figures.

        Arguments:
            predictions: a CSV of frame_id, child_id and the seven
                scores.  Defaults to the eval stage's predictions.
        """
        from . import reports

        predictions = predictions or self._require_artifact(
            'eval', 'predictions', SERIES_COLUMNS)
        series = read_series(predictions)
        results = analyze_series(series, self.config['analysis']['alpha'])
        out_dir = self._stage_dir('analyze')
        outputs = reports.render_reports(results, out_dir)

        summary = reports.run_summary(self.run_dir, self._load_ledger(),
                                      results)
        summary_path = os.path.join(out_dir, 'run_summary.json')
        with open(summary_path, 'w') as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        outputs['run_summary'] = summary_path

        self._record_stage('analyze', outputs)
        logging.info('affectlib: analyzed %d frames from %d children'
                     % (len(series), series['child_id'].nunique()))
        self.analysis = results
        return self
