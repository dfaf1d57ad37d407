#!/usr/bin/env python

"""Tests for affectlib/analysis.py."""
import itertools
import sys
import unittest

import numpy as np
import pandas as pd
import scipy.stats

# This makes it so we can find affectlib when running from repo-root.
sys.path.insert(0, '.')
import affectlib.analysis as analysis
import affectlib.base
import affectlib.facegraph as facegraph


EMOTIONS = list(facegraph.EMOTIONS)

# Frames per predicted class in the dataset we were built for.
STUDY_HISTOGRAM = {'neutral': 8969, 'happy': 5309, 'angry': 1822,
                   'surprise': 1605, 'sad': 1386, 'disgust': 152, 'fear': 79}


def _series(scores, children=None):
    scores = np.asarray(scores, dtype=np.float64)
    frame = pd.DataFrame(scores, columns=EMOTIONS)
    if children is None:
        children = ['c0'] * len(scores)
    frame.insert(0, 'child_id', children)
    frame.insert(0, 'frame_id', ['f%05d' % i for i in range(len(scores))])
    return frame


def _peaked(emotion, peak=0.4):
    """A distribution whose argmax is `emotion`."""
    p = np.full(7, (1.0 - peak) / 6)
    p[EMOTIONS.index(emotion)] = peak
    return p


def _random_groups(rng, ties=False):
    groups = []
    for k in range(7):
        g = rng.normal(loc=0.1 * k, scale=1.0, size=rng.randint(4, 15))
        if ties:
            g = np.round(g, 1)
        groups.append(g)
    return groups


class DescriptiveStatsTest(unittest.TestCase):
    def test_single_row(self):
        p = _peaked('happy')
        stats = analysis.descriptive_stats(_series([p]))
        self.assertTrue(stats.single_row)
        self.assertEqual(1, stats.n)
        np.testing.assert_allclose(p, stats.table['mean'].to_numpy())
        np.testing.assert_array_equal(np.zeros(7),
                                      stats.table['std'].to_numpy())

    def test_two_rows(self):
        rows = [_peaked('angry', 0.2), _peaked('angry', 0.4)]
        stats = analysis.descriptive_stats(_series(rows))
        self.assertAlmostEqual(0.3, stats.table.loc['angry', 'mean'])
        self.assertAlmostEqual(np.sqrt(0.02), stats.table.loc['angry', 'std'])
        self.assertFalse(stats.single_row)

    def test_two_pass_oracle(self):
        scores = np.random.RandomState(0).dirichlet(np.ones(7), size=100)
        stats = analysis.descriptive_stats(_series(scores))
        for (k, emotion) in enumerate(EMOTIONS):
            column = scores[:, k]
            mean = sum(column) / len(column)
            var = sum((x - mean) ** 2 for x in column) / (len(column) - 1)
            self.assertAlmostEqual(mean, stats.table.loc[emotion, 'mean'],
                                   delta=1e-9)
            self.assertAlmostEqual(np.sqrt(var),
                                   stats.table.loc[emotion, 'std'],
                                   delta=1e-9)
            self.assertEqual(column.min(), stats.table.loc[emotion, 'min'])
            self.assertEqual(column.max(), stats.table.loc[emotion, 'max'])
            self.assertAlmostEqual(np.median(column),
                                   stats.table.loc[emotion, 'median'])

    def test_empty(self):
        stats = analysis.descriptive_stats(_series(np.zeros((0, 7))))
        self.assertTrue(stats.empty)
        self.assertEqual(0, stats.n)

    def test_per_child(self):
        rows = [_peaked('happy', 0.4), _peaked('happy', 0.6),
                _peaked('sad', 0.5)]
        table = analysis.per_child_stats(_series(rows, ['b', 'b', 'a']))
        self.assertEqual(['a', 'b'], list(table.index))
        self.assertEqual([1, 2], list(table['frames']))
        self.assertAlmostEqual(0.5, table.loc['b', 'happy_mean'])
        self.assertAlmostEqual(0.0, table.loc['a', 'sad_std'])


class HistogramTest(unittest.TestCase):
    def test_study_histogram(self):
        rows = []
        for (emotion, count) in sorted(STUDY_HISTOGRAM.items()):
            rows.extend([_peaked(emotion)] * count)
        rows = np.array(rows)
        np.random.RandomState(0).shuffle(rows)
        histogram = analysis.label_histogram(rows)
        self.assertEqual(STUDY_HISTOGRAM, dict(histogram))
        self.assertEqual(19322, histogram.sum())
        self.assertEqual(EMOTIONS, list(histogram.index))

    def test_uniform_rows_go_to_angry(self):
        histogram = analysis.label_histogram(np.full((5, 7), 1 / 7.0))
        self.assertEqual(5, histogram['angry'])
        self.assertEqual(5, histogram.sum())

    def test_empty(self):
        histogram = analysis.label_histogram(np.zeros((0, 7)))
        self.assertEqual([0] * 7, list(histogram))


class PolarityTest(unittest.TestCase):
    def test_eleven_of_fifteen(self):
        rows = []
        children = []
        for child in range(15):
            emotion = ('happy', 'surprise')[child % 2] if child < 11 \
                else ('sad', 'angry', 'disgust', 'fear')[child - 11]
            for _ in range(3):
                # Neutral dominates every frame but is ignored.
                p = np.full(7, 0.05)
                p[EMOTIONS.index(emotion)] = 0.2
                p[6] = 0.5
                rows.append(p)
                children.append('c%02d' % child)
        summary = analysis.polarity_summary(_series(rows, children))
        self.assertAlmostEqual(0.733, summary.positive_fraction, delta=0.0005)
        self.assertAlmostEqual(0.267, summary.negative_fraction, delta=0.0005)
        self.assertAlmostEqual(1.0, summary.positive_fraction +
                               summary.negative_fraction)
        self.assertEqual([], summary.excluded)

    def test_single_happy_child(self):
        summary = analysis.polarity_summary(
            _series([[0, 0, 0, 1, 0, 0, 0]], ['solo']))
        self.assertEqual(1.0, summary.positive_fraction)
        self.assertEqual(0.0, summary.negative_fraction)

    def test_hand_enumerated(self):
        rows = [
            # a: happy 0.3 + 0.1 vs fear 0.35 -> happy
            [0, 0, 0.05, 0.3, 0, 0, 0.65],
            [0, 0, 0.30, 0.1, 0, 0, 0.60],
            # b: sad everywhere
            [0.1, 0, 0, 0, 0.6, 0, 0.3],
            # c: nothing but neutral -> excluded
            [0, 0, 0, 0, 0, 0, 1.0],
            # d: disgust and surprise tie -> lowest index (disgust)
            [0, 0.2, 0, 0, 0, 0.2, 0.6],
            # e: surprise
            [0, 0, 0, 0, 0, 0.9, 0.1],
        ]
        children = ['a', 'a', 'b', 'c', 'd', 'e']
        summary = analysis.polarity_summary(_series(rows, children))
        table = summary.per_child.set_index('child_id')
        self.assertEqual('happy', table.loc['a', 'dominant'])
        self.assertEqual('sad', table.loc['b', 'dominant'])
        self.assertTrue(table.loc['c', 'excluded'])
        self.assertEqual('disgust', table.loc['d', 'dominant'])
        self.assertEqual('surprise', table.loc['e', 'dominant'])
        self.assertEqual(['c'], summary.excluded)
        self.assertEqual(0.5, summary.positive_fraction)
        self.assertEqual(0.5, summary.negative_fraction)

    def test_polarity_sets(self):
        self.assertEqual(set(), analysis.POSITIVE & analysis.NEGATIVE)
        self.assertEqual(6, len(analysis.POSITIVE | analysis.NEGATIVE))
        self.assertIsNone(analysis.polarity_of('neutral'))


class AnovaTest(unittest.TestCase):
    def test_identical_groups(self):
        result = analysis.anova_oneway([[1, 2, 3], [1, 2, 3]])
        self.assertEqual(0.0, result.statistic)
        self.assertAlmostEqual(1.0, result.p_value)
        self.assertEqual((1, 4), result.dof)

    def test_matches_scipy(self):
        rng = np.random.RandomState(1)
        for ties in (False, True):
            for _ in range(10):
                groups = _random_groups(rng, ties)
                result = analysis.anova_oneway(groups)
                expected = scipy.stats.f_oneway(*groups)
                self.assertAlmostEqual(expected.statistic, result.statistic,
                                       delta=1e-6)
                self.assertAlmostEqual(expected.pvalue, result.p_value,
                                       delta=1e-6)
                self.assertGreaterEqual(result.p_value, 0.0)
                self.assertLessEqual(result.p_value, 1.0)

    def test_invariances(self):
        groups = _random_groups(np.random.RandomState(2))
        f = analysis.anova_oneway(groups).statistic
        shifted = analysis.anova_oneway([g + 17.0 for g in groups]).statistic
        scaled = analysis.anova_oneway([g * 3.5 for g in groups]).statistic
        self.assertAlmostEqual(f, shifted, delta=1e-9)
        self.assertAlmostEqual(f, scaled, delta=1e-9)

    def test_undefined(self):
        result = analysis.anova_oneway([[5, 5], [5, 5]])
        self.assertIsNone(result.statistic)
        self.assertEqual(('undefined_f',), result.flags)

    def test_infinite(self):
        result = analysis.anova_oneway([[1, 1], [2, 2]])
        self.assertEqual(float('inf'), result.statistic)
        self.assertEqual(0.0, result.p_value)
        self.assertEqual(('infinite_f',), result.flags)

    def test_bad_groups(self):
        with self.assertRaises(affectlib.base.ShapeError):
            analysis.anova_oneway([[1, 2, 3]])
        with self.assertRaises(affectlib.base.ShapeError):
            analysis.anova_oneway([[1, 2], []])
        with self.assertRaises(affectlib.base.ShapeError):
            analysis.anova_oneway([[1], [2]])


class KruskalTest(unittest.TestCase):
    def test_identical_groups(self):
        result = analysis.kruskal_wallis([[1, 2, 3], [1, 2, 3]])
        self.assertAlmostEqual(0.0, result.statistic, delta=1e-12)
        self.assertAlmostEqual(1.0, result.p_value, delta=1e-9)

    def test_hand_ranks(self):
        result = analysis.kruskal_wallis([[1, 2], [3, 4]])
        # Rank sums 3 and 7: 12 / 20 * (9 / 2 + 49 / 2) - 3 * 5.
        self.assertAlmostEqual(2.4, result.statistic, delta=1e-12)
        self.assertEqual(1, result.dof)

    def test_matches_scipy(self):
        rng = np.random.RandomState(3)
        for ties in (False, True):
            for _ in range(10):
                groups = _random_groups(rng, ties)
                result = analysis.kruskal_wallis(groups)
                expected = scipy.stats.kruskal(*groups)
                self.assertAlmostEqual(expected.statistic, result.statistic,
                                       delta=1e-6)
                self.assertAlmostEqual(expected.pvalue, result.p_value,
                                       delta=1e-6)
                self.assertEqual(6, result.dof)

    def test_shift_invariant(self):
        groups = _random_groups(np.random.RandomState(4), ties=True)
        h = analysis.kruskal_wallis(groups).statistic
        shifted = analysis.kruskal_wallis([g + 2.0 for g in groups])
        self.assertAlmostEqual(h, shifted.statistic, delta=1e-9)

    def test_all_ties(self):
        result = analysis.kruskal_wallis([[5, 5], [5, 5]])
        self.assertEqual(0.0, result.statistic)
        self.assertEqual(1.0, result.p_value)
        self.assertEqual(('all_ties',), result.flags)


class TukeyTest(unittest.TestCase):
    def test_identical_groups(self):
        result = analysis.tukey_hsd([[1, 2, 3], [1, 2, 3]], names=['a', 'b'])
        (row,) = result.pairwise.itertuples(index=False)
        self.assertEqual(0.0, row.mean_diff)
        self.assertFalse(row.significant)

    def test_one_shifted_group(self):
        rng = np.random.RandomState(5)
        groups = [rng.normal(0, 1, 20), rng.normal(0, 1, 20),
                  rng.normal(10, 1, 20)]
        result = analysis.tukey_hsd(groups, names=['a', 'b', 'c'])
        flagged = {(r.group_a, r.group_b)
                   for r in result.pairwise.itertuples(index=False)
                   if r.significant}
        self.assertEqual({('a', 'c'), ('b', 'c')}, flagged)

    def test_seven_groups_have_21_pairs(self):
        groups = _random_groups(np.random.RandomState(6))
        result = analysis.tukey_hsd(groups)
        self.assertEqual(21, len(result.pairwise))
        self.assertEqual(('angry', 'disgust'),
                         tuple(result.pairwise.iloc[0][['group_a',
                                                        'group_b']]))

    def test_matches_scipy(self):
        rng = np.random.RandomState(7)
        for ties in (False, True):
            for _ in range(10):
                groups = _random_groups(rng, ties)
                result = analysis.tukey_hsd(groups, alpha=0.05)
                expected = scipy.stats.tukey_hsd(*groups)
                ci = expected.confidence_interval(confidence_level=0.95)
                rows = result.pairwise.itertuples(index=False)
                for ((i, j), row) in zip(
                        itertools.combinations(range(7), 2), rows):
                    self.assertAlmostEqual(expected.statistic[i, j],
                                           row.mean_diff, delta=1e-6)
                    self.assertAlmostEqual(expected.pvalue[i, j], row.p_adj,
                                           delta=1e-6)
                    self.assertAlmostEqual(ci.low[i, j], row.ci_low,
                                           delta=1e-6)
                    self.assertAlmostEqual(ci.high[i, j], row.ci_high,
                                           delta=1e-6)
                    self.assertEqual(expected.pvalue[i, j] < 0.05,
                                     row.significant)


class AnalyzeSeriesTest(unittest.TestCase):
    def test_full_battery(self):
        scores = np.random.RandomState(8).dirichlet(np.ones(7), size=60)
        children = ['c%d' % (i % 4) for i in range(60)]
        results = analysis.analyze_series(_series(scores, children))
        self.assertEqual(60, results.histogram.sum())
        self.assertEqual((6, 413), results.anova.dof)
        self.assertEqual(6, results.kruskal.dof)
        self.assertEqual(21, len(results.tukey.pairwise))
        self.assertEqual(4, len(results.per_child))

    def test_too_few_rows(self):
        results = analysis.analyze_series(_series([_peaked('sad')]))
        self.assertEqual(('too_few',), results.anova.flags)
        self.assertIsNone(results.tukey.pairwise)
        self.assertTrue(results.descriptive.single_row)

    def test_read_series_checks_columns(self):
        import os
        import shutil
        import tempfile
        tmpdir = tempfile.mkdtemp()
        try:
            path = os.path.join(tmpdir, 'predictions.csv')
            pd.DataFrame({'frame_id': ['a'], 'happy': [1.0]}).to_csv(
                path, index=False)
            with self.assertRaises(affectlib.base.IntegrityError):
                analysis.read_series(path)
            _series([_peaked('sad')], ['007']).to_csv(path, index=False)
            series = analysis.read_series(path)
            self.assertEqual('007', series['child_id'][0])
        finally:
            shutil.rmtree(tmpdir)


if __name__ == '__main__':
    unittest.main()
