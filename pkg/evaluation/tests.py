import json
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from PIL import Image

from core.exceptions import InvalidArgumentError
from corpus.imageio import read_mask, write_mask_png

from .figures import ComparisonRow, comparison_figure
from .harness import evaluate_model
from .metrics import MetricReport, dice, iou
from .staple import PROB_EPS, RaterStack, staple_fuse

ORACLE_DECISIONS = np.array([[1, 1, 0, 0], [1, 0, 0, 0], [1, 1, 1, 0]], dtype=np.uint8)


def reference_em(decisions, prior, init=0.99, iterations=500, eps=PROB_EPS):
    """EM binário direto, em escala linear e com laços explícitos."""
    raters, voxels = decisions.shape
    p = [init] * raters
    q = [init] * raters
    weights = [0.0] * voxels
    for _ in range(iterations):
        for i in range(voxels):
            a, b = prior, 1.0 - prior
            for j in range(raters):
                a *= p[j] if decisions[j, i] else 1.0 - p[j]
                b *= 1.0 - q[j] if decisions[j, i] else q[j]
            weights[i] = min(max(a / (a + b), eps), 1.0 - eps)
        for j in range(raters):
            hits = sum(weights[i] for i in range(voxels) if decisions[j, i])
            rejections = sum(1.0 - weights[i] for i in range(voxels) if not decisions[j, i])
            p[j] = min(max(hits / sum(weights), eps), 1.0 - eps)
            q[j] = min(max(rejections / sum(1.0 - w for w in weights), eps), 1.0 - eps)
    for i in range(voxels):
        a, b = prior, 1.0 - prior
        for j in range(raters):
            a *= p[j] if decisions[j, i] else 1.0 - p[j]
            b *= 1.0 - q[j] if decisions[j, i] else q[j]
        weights[i] = a / (a + b)
    return np.array(weights) >= 0.5, np.array(p), np.array(q)


class StapleTests(SimpleTestCase):
    def test_matches_reference_em(self):
        mask, p, q = reference_em(ORACLE_DECISIONS, 0.5)
        estimate = staple_fuse(RaterStack(ORACLE_DECISIONS, 0.5), tol=1e-12, max_iters=500)
        np.testing.assert_array_equal(estimate.mask, mask.astype(np.uint8))
        np.testing.assert_allclose(estimate.sensitivities, p, atol=1e-6)
        np.testing.assert_allclose(estimate.specificities, q, atol=1e-6)
        self.assertEqual(estimate.mask[0], 1)
        self.assertEqual(estimate.mask[3], 0)

    def test_unanimous_raters(self):
        mask = np.array([1, 0, 1, 1, 0], dtype=np.uint8)
        estimate = staple_fuse(RaterStack(np.stack([mask] * 4), 0.3))
        np.testing.assert_array_equal(estimate.mask, mask)
        self.assertTrue(estimate.converged)
        self.assertLessEqual(estimate.iterations, 2)

    def test_single_rater_for_any_prior(self):
        mask = np.array([0, 1, 1, 0, 0, 0, 1, 0], dtype=np.uint8)
        for prior in (0.01, 0.2, 0.5, 0.9, 0.999):
            estimate = staple_fuse(RaterStack(mask[None], prior))
            np.testing.assert_array_equal(estimate.mask, mask, err_msg=str(prior))

    def test_rater_permutation(self):
        generator = np.random.default_rng(0)
        decisions = (generator.random((5, 40)) > 0.5).astype(np.uint8)
        order = [3, 0, 4, 1, 2]
        base = staple_fuse(RaterStack(decisions, 0.4))
        permuted = staple_fuse(RaterStack(decisions[order], 0.4))
        np.testing.assert_allclose(permuted.sensitivities, base.sensitivities[order], atol=1e-10)
        np.testing.assert_allclose(permuted.specificities, base.specificities[order], atol=1e-10)
        np.testing.assert_allclose(permuted.weights, base.weights, atol=1e-10)

    def test_voxel_permutation(self):
        generator = np.random.default_rng(1)
        decisions = (generator.random((4, 30)) > 0.6).astype(np.uint8)
        order = generator.permutation(30)
        base = staple_fuse(RaterStack(decisions, 0.3))
        permuted = staple_fuse(RaterStack(decisions[:, order], 0.3))
        np.testing.assert_allclose(permuted.weights, base.weights[order], atol=1e-10)

    def test_estimates_stay_in_the_clamped_interval(self):
        generator = np.random.default_rng(2)
        decisions = (generator.random((6, 100)) > 0.3).astype(np.uint8)
        decisions[0] = 1
        for max_iters in (1, 2, 5, 50):
            estimate = staple_fuse(RaterStack(decisions, 0.5), max_iters=max_iters)
            self.assertTrue(np.all((estimate.weights >= 0) & (estimate.weights <= 1)))
            for values in (estimate.sensitivities, estimate.specificities):
                self.assertTrue(np.all((values >= PROB_EPS) & (values <= 1 - PROB_EPS)))

    def test_log_likelihood_never_decreases(self):
        generator = np.random.default_rng(5)
        for _ in range(50):
            raters, voxels = generator.integers(2, 6), generator.integers(5, 25)
            decisions = (generator.random((raters, voxels)) > generator.random()).astype(np.uint8)
            history = staple_fuse(RaterStack(decisions, 0.5), tol=1e-10, max_iters=200).log_likelihoods
            steps = np.diff(history)
            self.assertTrue(np.all(steps >= -1e-9 * np.abs(history[:-1]).clip(min=1.0)), history)

    def test_many_raters_do_not_underflow(self):
        generator = np.random.default_rng(3)
        truth = generator.random(200) > 0.7
        flips = generator.random((80, 200)) < 0.1
        decisions = np.logical_xor(truth, flips).astype(np.uint8)
        estimate = staple_fuse(RaterStack.from_masks(decisions))
        self.assertTrue(np.all(np.isfinite(estimate.weights)))
        self.assertGreater((estimate.mask == truth).mean(), 0.99)

    def test_prior_from_masks(self):
        stack = RaterStack.from_masks(np.zeros((2, 3, 3), dtype=np.uint8))
        self.assertAlmostEqual(stack.prior, 1e-3)
        self.assertEqual(stack.decisions.shape, (2, 9))

    def test_invalid_stacks(self):
        with self.assertRaises(InvalidArgumentError):
            RaterStack(np.array([[0, 2]]), 0.5)
        with self.assertRaises(InvalidArgumentError):
            RaterStack(np.array([[0, 1]]), 1.0)
        with self.assertRaises(InvalidArgumentError):
            RaterStack(np.zeros((0, 4)), 0.5)


class MetricTests(SimpleTestCase):
    def setUp(self):
        self.gt = np.zeros((20, 20), dtype=np.uint8)
        self.gt[:10, :10] = 1

    def test_identical_and_disjoint(self):
        self.assertEqual(dice(self.gt, self.gt), 1.0)
        self.assertEqual(iou(self.gt, self.gt), 1.0)
        self.assertEqual(dice(1 - self.gt, self.gt), 0.0)
        self.assertEqual(iou(1 - self.gt, self.gt), 0.0)

    def test_counting_case(self):
        pred = np.zeros_like(self.gt)
        pred[:5, :10] = 1
        pred[15:20, :10] = 1
        self.assertEqual(int(pred.sum()), 100)
        self.assertAlmostEqual(dice(pred, self.gt), 0.5)
        self.assertAlmostEqual(iou(pred, self.gt), 50 / 150)

    def test_empty_masks(self):
        empty = np.zeros((4, 4), dtype=np.uint8)
        self.assertEqual(dice(empty, empty), 1.0)
        self.assertEqual(iou(empty, empty), 1.0)
        self.assertEqual(dice(empty, empty, empty_score=0.0), 0.0)
        self.assertEqual(dice(empty, self.gt[:4, :4]), 0.0)

    def test_dice_iou_identity_and_symmetry(self):
        generator = np.random.default_rng(4)
        for _ in range(1000):
            a = generator.random((16, 16)) > generator.random()
            b = generator.random((16, 16)) > generator.random()
            if not a.any() and not b.any():
                continue
            j = iou(a, b)
            self.assertAlmostEqual(dice(a, b), 2 * j / (1 + j), delta=1e-12)
            self.assertEqual(dice(a, b), dice(b, a))
            self.assertEqual(iou(a, b), iou(b, a))

    def test_invalid_masks(self):
        with self.assertRaises(InvalidArgumentError):
            dice(np.full((2, 2), 0.5), np.zeros((2, 2)))
        with self.assertRaises(InvalidArgumentError):
            iou(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_report(self):
        report = MetricReport()
        report.add('a', self.gt, self.gt)
        report.add('b', 1 - self.gt, self.gt)
        self.assertEqual(report.count, 2)
        self.assertAlmostEqual(report.mean_dice, 0.5)
        with tempfile.TemporaryDirectory() as tmp:
            report.write(tmp)
            frame = pd.read_csv(Path(tmp) / 'metrics.csv')
            summary = json.loads((Path(tmp) / 'metrics.json').read_text())
        self.assertEqual(list(frame.columns), ['id', 'dice', 'iou'])
        self.assertEqual(summary['count'], 2)
        self.assertEqual([row['id'] for row in summary['per_sample']], ['a', 'b'])


class FakeDataset:
    def __init__(self, masks):
        self.ids = [f'case_{i}' for i in range(len(masks))]
        self.gt_masks = masks
        self.images = [None] * len(masks)

    def __len__(self):
        return len(self.ids)


class HarnessTests(SimpleTestCase):
    def test_oracle_predictions_score_one(self):
        masks = [np.eye(4, dtype=np.uint8), np.zeros((4, 4), dtype=np.uint8)]
        report = evaluate_model(None, FakeDataset(masks), None, None, oracle=True)
        self.assertEqual(report.mean_dice, 1.0)
        self.assertEqual(report.mean_iou, 1.0)
        self.assertEqual(evaluate_model(None, FakeDataset(masks), None, None, limit=1, oracle=True).count, 1)


class FuseCommandTests(SimpleTestCase):
    def test_fuses_the_oracle_fixture(self):
        expected = staple_fuse(RaterStack.from_masks(ORACLE_DECISIONS)).mask.reshape(2, 2)
        with tempfile.TemporaryDirectory() as tmp:
            masks = Path(tmp) / 'masks'
            masks.mkdir()
            for index, decisions in enumerate(ORACLE_DECISIONS):
                write_mask_png(masks / f'rater_{index}.png', decisions.reshape(2, 2))
            out = Path(tmp) / 'out'
            call_command('fuse', masks=str(masks), out=str(out))
            np.testing.assert_array_equal(read_mask(out / 'fused.png'), expected)
            record = json.loads((out / 'fusion.json').read_text())
            self.assertEqual(record['raters'], ['rater_0.png', 'rater_1.png', 'rater_2.png'])
            self.assertTrue((out / 'run.json').exists())

            with self.assertRaises(CommandError) as caught:
                call_command('fuse', masks=str(masks), out=str(out))
            self.assertEqual(caught.exception.returncode, 1)
            call_command('fuse', masks=str(masks), out=str(out), force=True, method='mean-vote')

    def test_non_binary_mask_is_a_data_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            Image.fromarray(np.array([[0, 128], [255, 0]], dtype=np.uint8)).save(Path(tmp) / 'bad.png')
            with self.assertRaises(CommandError) as caught:
                call_command('fuse', masks=tmp, out=str(Path(tmp) / 'out'))
            self.assertEqual(caught.exception.returncode, 2)
            self.assertIn('bad.png', str(caught.exception))


class ComparisonFigureTests(SimpleTestCase):
    def test_grid_has_one_panel_per_column(self):
        generator = np.random.default_rng(6)
        masks = [(generator.random((8, 8)) > 0.5).astype(np.uint8) for _ in range(7)]
        rows = [
            ComparisonRow('a', generator.random((8, 8, 1)), masks[0], samples=masks[:7], gt=masks[1]),
            ComparisonRow('b', torch.rand(3, 8, 8), masks[2], samples=masks[:2]),
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'comparison.png'
            # imagem, gabarito, 5 amostras, fundida
            self.assertEqual(comparison_figure(path, rows), (2, 8))
            self.assertEqual(Image.open(path).size, (8 * 200, 2 * 200))
            self.assertEqual(comparison_figure(path, rows[1:]), (1, 4))
        with self.assertRaises(InvalidArgumentError):
            comparison_figure('unused.png', [])

    def test_harness_keeps_the_first_cases(self):
        masks = [np.eye(4, dtype=np.uint8)] * 3
        dataset = FakeDataset(masks)
        report = evaluate_model(None, dataset, None, None, oracle=True, figure_cases=2)
        self.assertEqual([row.case for row in report.figure_rows], ['case_0', 'case_1'])
        np.testing.assert_array_equal(report.figure_rows[0].samples[0], masks[0])
