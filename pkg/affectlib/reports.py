"""Figures and their data files for the analyze stage.

Every figure is written twice: as a PNG and as a CSV of exactly the
numbers plotted, so the figures can be checked without looking at
pixels.  KDE curves use a Gaussian kernel with Silverman's bandwidth,
evaluated on 512 points from min - 4 bw to max + 4 bw.  Box whiskers
reach the most extreme observation within 1.5 IQR of the quartiles.
"""

from __future__ import absolute_import
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import scipy.stats  # noqa: E402

from . import base  # noqa: E402
from . import facegraph  # noqa: E402
from . import preprocess  # noqa: E402


KDE_POINTS = 512
KDE_REACH = 4.0
WHISKER_IQR = 1.5

POLARITY_COLORS = {'positive': 'teal', 'negative': 'coral'}


def kde_curve(values, points=KDE_POINTS):
    """(grid, density, degenerate) for one score column.

    With fewer than two distinct values there is no density; we return
    the single value as the grid, a NaN density, and degenerate=True.
    """
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2 or np.ptp(values) == 0:
        center = values[0] if len(values) else 0.0
        return (np.array([center]), np.array([np.nan]), True)
    kde = scipy.stats.gaussian_kde(values, bw_method='silverman')
    bandwidth = float(np.sqrt(kde.covariance[0, 0]))
    grid = np.linspace(values.min() - KDE_REACH * bandwidth,
                       values.max() + KDE_REACH * bandwidth, points)
    return (grid, kde(grid), False)


def box_summary(values):
    """(whisker_low, q1, median, q3, whisker_high, outliers)."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    (q1, median, q3) = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    low_fence = q1 - WHISKER_IQR * iqr
    high_fence = q3 + WHISKER_IQR * iqr
    inside = values[(values >= low_fence) & (values <= high_fence)]
    outliers = values[(values < low_fence) | (values > high_fence)]
    return (float(inside.min()), float(q1), float(median), float(q3),
            float(inside.max()), outliers)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def render_histogram(histogram, out_dir):
    csv_path = os.path.join(out_dir, 'label_histogram.csv')
    histogram.rename_axis('emotion').reset_index().to_csv(csv_path,
                                                          index=False)
    (fig, ax) = plt.subplots(figsize=(7, 4))
    ax.bar(histogram.index, histogram.values, color='steelblue')
    for (x, count) in enumerate(histogram.values):
        ax.text(x, count, str(count), ha='center', va='bottom', fontsize=8)
    ax.set_ylabel('frames')
    ax.set_title('Predicted emotion per frame')
    _save(fig, os.path.join(out_dir, 'label_histogram.png'))
    return csv_path


def render_kde(series, out_dir):
    rows = []
    (fig, ax) = plt.subplots(figsize=(7, 4))
    for emotion in facegraph.EMOTIONS:
        (grid, density, degenerate) = kde_curve(series[emotion])
        for (x, y) in zip(grid, density):
            rows.append([emotion, x, y, degenerate])
        if degenerate:
            ax.axvline(grid[0], linestyle='--', label='%s (constant)'
                       % emotion)
        else:
            ax.plot(grid, density, label=emotion)
    ax.set_xlabel('softmax score')
    ax.set_ylabel('density')
    ax.legend(fontsize=7)
    _save(fig, os.path.join(out_dir, 'kde.png'))
    csv_path = os.path.join(out_dir, 'kde.csv')
    pd.DataFrame(rows, columns=['emotion', 'x', 'density',
                                'degenerate']).to_csv(csv_path, index=False)
    return csv_path


def render_boxplot(series, out_dir):
    rows = []
    for emotion in facegraph.EMOTIONS:
        (lo, q1, median, q3, hi, outliers) = box_summary(series[emotion])
        rows.append([emotion, lo, q1, median, q3, hi, len(outliers)])
    (fig, ax) = plt.subplots(figsize=(7, 4))
    ax.boxplot([series[e].to_numpy() for e in facegraph.EMOTIONS],
               whis=WHISKER_IQR)
    ax.set_xticks(range(1, facegraph.NUM_CLASSES + 1))
    ax.set_xticklabels(facegraph.EMOTIONS)
    ax.set_ylabel('softmax score')
    _save(fig, os.path.join(out_dir, 'boxplot.png'))
    csv_path = os.path.join(out_dir, 'boxplot.csv')
    pd.DataFrame(rows, columns=['emotion', 'whisker_low', 'q1', 'median',
                                'q3', 'whisker_high', 'outliers']).to_csv(
        csv_path, index=False)
    return csv_path


def render_polarity(polarity, out_dir):
    table_path = os.path.join(out_dir, 'polarity.csv')
    polarity.per_child.to_csv(table_path, index=False)

    included = polarity.per_child[~polarity.per_child['excluded']]
    counts = [int((included['polarity'] == p).sum())
              for p in ('positive', 'negative')]
    pie_path = os.path.join(out_dir, 'polarity_pie.csv')
    pd.DataFrame({'polarity': ['positive', 'negative'],
                  'children': counts,
                  'fraction': [polarity.positive_fraction,
                               polarity.negative_fraction]}).to_csv(
        pie_path, index=False)

    (fig, ax) = plt.subplots(figsize=(4, 4))
    if sum(counts):
        ax.pie(counts, labels=['positive', 'negative'], autopct='%.1f%%',
               colors=[POLARITY_COLORS['positive'],
                       POLARITY_COLORS['negative']])
    ax.set_title('Dominant affect per child')
    _save(fig, os.path.join(out_dir, 'polarity.png'))
    return (table_path, pie_path)


def _write_test(result, path):
    with open(path, 'w') as f:
        f.write('test: %s\n' % result.test_name)
        f.write('statistic: %s\n' % result.statistic)
        f.write('dof: %s\n' % (result.dof,))
        f.write('p_value: %s\n' % result.p_value)
        f.write('flags: %s\n' % ','.join(result.flags))


def render_reports(results, out_dir):
    """Write every table and figure; return {artifact name: path}."""
    outputs = {}
    outputs['descriptive'] = os.path.join(out_dir,
                                          'emotion_descriptive_stats.csv')
    results.descriptive.table.to_csv(outputs['descriptive'])
    outputs['per_child'] = os.path.join(out_dir, 'per_child_stats.csv')
    results.per_child.to_csv(outputs['per_child'])

    outputs['histogram'] = render_histogram(results.histogram, out_dir)
    if len(results.series):
        outputs['kde'] = render_kde(results.series, out_dir)
        outputs['boxplot'] = render_boxplot(results.series, out_dir)
    (outputs['polarity'], outputs['polarity_pie']) = render_polarity(
        results.polarity, out_dir)

    outputs['anova'] = os.path.join(out_dir, 'anova.txt')
    _write_test(results.anova, outputs['anova'])
    outputs['kruskal'] = os.path.join(out_dir, 'kruskal.txt')
    _write_test(results.kruskal, outputs['kruskal'])
    outputs['tukey'] = os.path.join(out_dir, 'tukey.csv')
    if results.tukey.pairwise is not None:
        results.tukey.pairwise.to_csv(outputs['tukey'], index=False)
    else:
        pd.DataFrame(columns=['group_a', 'group_b']).to_csv(outputs['tukey'],
                                                          index=False)
    return outputs


def _test_summary(result):
    return {'statistic': result.statistic, 'dof': result.dof,
            'p_value': result.p_value, 'flags': list(result.flags)}


def run_summary(run_dir, ledger, results):
    """The consolidated, JSON-ready summary of a run."""
    summary = {
        'stages': {name: {'version': entry['version'],
                          'seed': entry['seed'],
                          'config_hash': entry['config_hash']}
                   for (name, entry) in ledger.items()},
        'frames': int(len(results.series)),
        'children': int(results.series['child_id'].nunique()),
        'label_histogram': {k: int(v) for (k, v)
                            in results.histogram.items()},
        'polarity': {'positive_fraction': results.polarity.positive_fraction,
                     'negative_fraction': results.polarity.negative_fraction,
                     'excluded_children': list(results.polarity.excluded)},
        'anova': _test_summary(results.anova),
        'kruskal': _test_summary(results.kruskal),
    }
    if results.tukey.pairwise is not None:
        summary['tukey_significant_pairs'] = int(
            results.tukey.pairwise['significant'].sum())

    report_path = os.path.join(run_dir, 'preprocess', 'quality_report.txt')
    if os.path.exists(report_path):
        summary['quality_report'] = dict(
            preprocess.read_quality_report(report_path))
    metrics_path = os.path.join(run_dir, 'eval', 'metrics.txt')
    if os.path.exists(metrics_path):
        summary['eval_metrics'] = dict(
            base.read_key_values(metrics_path))
    return summary
