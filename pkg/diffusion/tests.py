import math

import numpy as np
import torch
from django.test import SimpleTestCase
from torch import nn

from core.exceptions import InvalidArgumentError
from core.testing import assert_gradients_match
from network.models import ModelConfig, SegDiffusionNet

from .forms import SamplerConfigForm
from .sampler import SamplerConfig, chain_seed, fuse_masks, run_chains, sample_ensemble, sample_one
from .schedule import (
    build_schedule, decode_mask, encode_mask, forward_noise, loss, make_batch, predict_x0, respace, reverse_step,
)


def tiny_config(**changes):
    values = dict(
        image_size=16, base_channels=4, stage_block_counts=(1, 1, 1), channel_multipliers=(1, 2, 4),
        time_embed_dim=8, T=20,
    )
    values.update(changes)
    return ModelConfig(**values)


def tiny_model(seed=0, **changes):
    torch.manual_seed(seed)
    model = SegDiffusionNet(tiny_config(**changes))
    # a cabeça de saída nasce zerada; perturba para as cadeias dependerem da rede
    with torch.no_grad():
        for parameter in model.decoder.out[-1].parameters():
            parameter.normal_(0.0, 0.1)
    return model.eval()


class ScheduleTests(SimpleTestCase):
    def test_two_step_linear_schedule(self):
        schedule = build_schedule(2, 'linear')
        np.testing.assert_allclose(schedule.betas, [1e-4, 0.02])
        np.testing.assert_allclose(schedule.alpha_bars, [0.9999, 0.9999 * 0.98])
        np.testing.assert_allclose(schedule.posterior_vars, schedule.betas)

    def test_alpha_bars_match_product_loop(self):
        schedule = build_schedule(1000)
        product = 1.0
        for beta in np.linspace(1e-4, 0.02, 1000):
            product *= 1.0 - beta
        self.assertAlmostEqual(schedule.alpha_bars[999], product, delta=1e-8)

    def test_single_step_schedule_is_rejected(self):
        for kind in ('linear', 'cosine'):
            with self.assertRaises(InvalidArgumentError):
                build_schedule(1, kind)

    def test_signal_coefficient_strictly_decreases(self):
        for kind in ('linear', 'cosine'):
            signal = np.sqrt(build_schedule(200, kind).alpha_bars)
            self.assertTrue(np.all(np.diff(signal) < 0), kind)

    def test_arrays_are_read_only(self):
        schedule = build_schedule(10)
        with self.assertRaises(ValueError):
            schedule.betas[0] = 0.5

    def test_respace_full_length_is_the_schedule(self):
        schedule = build_schedule(50)
        self.assertIs(respace(schedule, 50), schedule)

    def test_respace_keeps_trained_alpha_bars(self):
        schedule = build_schedule(1000)
        spaced = respace(schedule, 100)
        self.assertEqual(spaced.T, 100)
        self.assertEqual(spaced.timesteps[0], 0)
        self.assertEqual(spaced.timesteps[-1], 999)
        np.testing.assert_allclose(spaced.alpha_bars, schedule.alpha_bars[spaced.timesteps], rtol=1e-12)
        with self.assertRaises(InvalidArgumentError):
            respace(schedule, 1001)


class ForwardNoiseTests(SimpleTestCase):
    def setUp(self):
        self.schedule = build_schedule(1000)
        self.generator = torch.Generator().manual_seed(0)

    def test_zero_signal_leaves_scaled_noise(self):
        noise = torch.randn(2, 1, 4, 4, generator=self.generator, dtype=torch.float64)
        xt = forward_noise(self.schedule, torch.zeros_like(noise), 300, noise)
        torch.testing.assert_close(xt, math.sqrt(1 - self.schedule.alpha_bars[300]) * noise)

    def test_unit_signal_case_returns_x0(self):
        # agenda hipotética com coeficiente de ruído zero
        schedule = build_schedule(2)
        schedule = type(schedule)(
            T=2, betas=np.zeros(2), alphas=np.ones(2), alpha_bars=np.ones(2),
            posterior_vars=np.zeros(2), timesteps=np.arange(2),
        )
        x0 = torch.rand(1, 1, 3, 3, generator=self.generator) * 2 - 1
        noise = torch.randn(1, 1, 3, 3, generator=self.generator)
        torch.testing.assert_close(forward_noise(schedule, x0, 1, noise), x0)

    def test_monte_carlo_moments(self):
        n = 100_000
        x0 = torch.full((n,), 0.5, dtype=torch.float64)
        for t in (1, self.schedule.T // 2, self.schedule.T - 1):
            with self.subTest(t=t):
                noise = torch.randn(n, generator=self.generator, dtype=torch.float64)
                xt = forward_noise(self.schedule, x0, t, noise)
                alpha_bar = self.schedule.alpha_bars[t]
                variance = 1 - alpha_bar
                self.assertLess(abs(xt.mean().item() - math.sqrt(alpha_bar) * 0.5), 3 * math.sqrt(variance / n))
                self.assertLess(abs(xt.var().item() - variance), 3 * variance * math.sqrt(2 / (n - 1)))

    def test_per_sample_steps(self):
        x0 = torch.ones(3, 1, 2, 2)
        noise = torch.zeros_like(x0)
        xt = forward_noise(self.schedule, x0, torch.tensor([0, 10, 999]), noise)
        expected = np.sqrt(self.schedule.alpha_bars[[0, 10, 999]])
        np.testing.assert_allclose(xt[:, 0, 0, 0].numpy(), expected, rtol=1e-6)

    def test_predict_x0_inverts_forward_noise(self):
        x0 = torch.rand(4, 1, 8, 8, generator=self.generator, dtype=torch.float64) * 2 - 1
        noise = torch.randn(4, 1, 8, 8, generator=self.generator, dtype=torch.float64)
        for t in (0, 1, 500, 999):
            xt = forward_noise(self.schedule, x0, t, noise)
            torch.testing.assert_close(predict_x0(self.schedule, xt, noise, t), x0, rtol=1e-6, atol=1e-9)

    def test_invalid_step_and_shape(self):
        x0 = torch.zeros(1, 1, 2, 2)
        with self.assertRaises(InvalidArgumentError):
            forward_noise(self.schedule, x0, 1000, torch.zeros_like(x0))
        with self.assertRaises(InvalidArgumentError):
            forward_noise(self.schedule, x0, -1, torch.zeros_like(x0))
        with self.assertRaises(InvalidArgumentError):
            forward_noise(self.schedule, x0, 3, torch.zeros(1, 1, 3, 3))

    def test_make_batch_is_seeded(self):
        x0 = encode_mask(torch.ones(4, 1, 4, 4))
        first = make_batch(self.schedule, x0, torch.Generator().manual_seed(5))
        second = make_batch(self.schedule, x0, torch.Generator().manual_seed(5))
        torch.testing.assert_close(first.xt, second.xt, rtol=0, atol=0)
        torch.testing.assert_close(first.xt, forward_noise(self.schedule, x0, first.t, first.noise))


class LossTests(SimpleTestCase):
    def setUp(self):
        self.schedule = build_schedule(100)
        generator = torch.Generator().manual_seed(1)
        self.x0 = encode_mask((torch.rand(2, 1, 8, 8, generator=generator) > 0.5).to(torch.uint8))
        self.image = torch.rand(2, 1, 8, 8, generator=generator)
        self.noise = torch.randn(2, 1, 8, 8, generator=generator)
        self.t = torch.tensor([3, 70])

    def test_perfect_predictor_has_zero_loss(self):
        value = loss(self.schedule, lambda xt, image, t: self.noise, self.x0, self.image, self.t, self.noise)
        self.assertEqual(value.item(), 0.0)

    def test_zero_predictor_gives_noise_power(self):
        value = loss(self.schedule, lambda xt, image, t: torch.zeros_like(xt), self.x0, self.image, self.t, self.noise)
        self.assertAlmostEqual(value.item(), self.noise.pow(2).mean().item(), places=6)

    def test_hand_computed_mse(self):
        noise = torch.tensor([[[[0.5, -1.0], [2.0, 0.0]]]])
        predicted = torch.tensor([[[[0.25, 1.0], [1.0, -0.5]]]])
        expected = ((0.25 ** 2) + (2.0 ** 2) + (1.0 ** 2) + (0.5 ** 2)) / 4
        value = loss(self.schedule, lambda xt, image, t: predicted, torch.ones(1, 1, 2, 2), None, 5, noise)
        self.assertAlmostEqual(value.item(), expected, delta=1e-6)

    def test_gradients_of_small_model_match_finite_differences(self):
        stub = nn.Conv2d(2, 1, 3, padding=1).double()
        self.assertLessEqual(sum(p.numel() for p in stub.parameters()), 50)

        def model(xt, image, t):
            return stub(torch.cat([xt, image], dim=1))

        x0, image, noise = self.x0.double(), self.image.double(), self.noise.double()
        params = list(stub.parameters())
        indices = [
            (position, index)
            for position, parameter in enumerate(params)
            for index in np.ndindex(*parameter.shape)
        ]
        assert_gradients_match(
            self, lambda: loss(self.schedule, model, x0, image, self.t, noise), params, indices,
            eps=1e-4, rtol=1e-3,
        )


class ReverseStepTests(SimpleTestCase):
    def test_zero_noise_prediction_rescales(self):
        schedule = build_schedule(10)
        xt = torch.tensor([[[[0.3, -0.7]]]], dtype=torch.float64)
        result = reverse_step(schedule, xt, torch.zeros_like(xt), 4, torch.zeros_like(xt))
        torch.testing.assert_close(result, xt / math.sqrt(schedule.alphas[4]))

    def test_two_step_scalar_update(self):
        schedule = build_schedule(2)
        xt = torch.tensor([0.8], dtype=torch.float64)
        eps = torch.tensor([-0.4], dtype=torch.float64)
        z = torch.tensor([1.5], dtype=torch.float64)
        beta, alpha_bar = 0.02, 0.9999 * 0.98
        expected = (0.8 - beta / math.sqrt(1 - alpha_bar) * -0.4) / math.sqrt(0.98) + math.sqrt(beta) * 1.5
        self.assertAlmostEqual(reverse_step(schedule, xt, eps, 1, z).item(), expected, delta=1e-10)

    def test_last_step_rejects_nonzero_z(self):
        schedule = build_schedule(5)
        xt = torch.zeros(1, 1, 2, 2)
        with self.assertRaises(InvalidArgumentError):
            reverse_step(schedule, xt, xt, 0, torch.ones_like(xt))
        reverse_step(schedule, xt, xt, 0, torch.zeros_like(xt))

    def test_true_noise_chain_recovers_x0(self):
        schedule = build_schedule(50)
        x0 = torch.tensor([[[[0.35]]]], dtype=torch.float64)
        x = forward_noise(schedule, x0, 49, torch.tensor([[[[1.3]]]], dtype=torch.float64))
        for t in reversed(range(50)):
            alpha_bar = schedule.alpha_bars[t]
            eps = (x - math.sqrt(alpha_bar) * x0) / math.sqrt(1 - alpha_bar)
            x = reverse_step(schedule, x, eps, t, torch.zeros_like(x))
        self.assertAlmostEqual(x.item(), 0.35, delta=1e-5)

    def test_clipped_step_is_the_posterior_mean_of_the_clamped_x0(self):
        schedule = build_schedule(10)
        t = 4
        alpha_bar, previous = schedule.alpha_bars[t], schedule.alpha_bars[t - 1]
        beta, alpha = schedule.betas[t], schedule.alphas[t]
        xt = torch.tensor([0.5, -0.2, 0.1], dtype=torch.float64)
        x0 = torch.tensor([3.0, -2.0, 0.4], dtype=torch.float64)
        eps = (xt - math.sqrt(alpha_bar) * x0) / math.sqrt(1 - alpha_bar)
        expected = (math.sqrt(previous) * beta / (1 - alpha_bar) * x0.clamp(-1, 1)
                    + math.sqrt(alpha) * (1 - previous) / (1 - alpha_bar) * xt)
        torch.testing.assert_close(reverse_step(schedule, xt, eps, t, clip_x0=True), expected, atol=1e-10, rtol=0)
        # x0 dentro de [-1, 1]: nada muda
        self.assertAlmostEqual(reverse_step(schedule, xt, eps, t, clip_x0=True)[2].item(),
                               reverse_step(schedule, xt, eps, t)[2].item(), delta=1e-10)

    def test_clipping_keeps_a_steep_respaced_chain_bounded(self):
        schedule = build_schedule(1000, 'cosine')
        seeds = [chain_seed(0, chain) for chain in range(200)]
        predictor = PerfectPredictor(schedule, 0.6, scale=1.05)
        clipped = run_chains(torch.zeros(1, 1, 1), predictor, schedule, SamplerConfig(steps=100), seeds)
        self.assertLessEqual(clipped.abs().max().item(), 1.0 + 1e-5)
        loose = run_chains(torch.zeros(1, 1, 1), predictor, schedule,
                           SamplerConfig(steps=100, clip_x0=False), seeds)
        self.assertGreater(loose.abs().max().item(), 1.5)


class MaskCodecTests(SimpleTestCase):
    def test_encode_and_threshold(self):
        mask = torch.tensor([[0, 1], [1, 0]], dtype=torch.uint8)
        encoded = encode_mask(mask)
        self.assertEqual(encoded.tolist(), [[-1.0, 1.0], [1.0, -1.0]])
        self.assertTrue(torch.equal(decode_mask(encoded), mask))
        self.assertEqual(decode_mask(torch.tensor([0.0, 1e-6])).tolist(), [0, 1])


class PerfectPredictor:
    """Ruído exato para um alvo constante ``x0`` (problema de 1 pixel)."""

    def __init__(self, schedule, x0, scale=1.0):
        self.schedule = schedule
        self.x0 = x0
        # scale != 1 erra o ruído por um fator fixo
        self.scale = scale
        self.calls = 0

    def __call__(self, xt, image, t):
        self.calls += 1
        alpha_bar = float(self.schedule.alpha_bars[t])
        return self.scale * (xt - math.sqrt(alpha_bar) * self.x0) / math.sqrt(1 - alpha_bar)


class SamplerTests(SimpleTestCase):
    def setUp(self):
        self.model = tiny_model()
        self.schedule = build_schedule(20)
        self.image = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(3))

    def test_seeded_sample_is_bit_identical(self):
        config = SamplerConfig(steps=10, ensemble_size=1, seed=11)
        first = sample_one(self.image, self.model, self.schedule, config)
        second = sample_one(self.image, self.model, self.schedule, config)
        self.assertEqual(first.dtype, np.uint8)
        self.assertEqual(first.shape, (16, 16))
        np.testing.assert_array_equal(first, second)

    def test_full_length_runs_every_step(self):
        predictor = PerfectPredictor(self.schedule, 0.2)
        run_chains(torch.zeros(1, 1, 1), predictor, self.schedule, SamplerConfig(steps=20), [0])
        self.assertEqual(predictor.calls, 20)

    def test_perfect_predictor_mean_matches_target(self):
        schedule = build_schedule(50)
        predictor = PerfectPredictor(schedule, 0.4)
        seeds = [chain_seed(0, chain) for chain in range(1000)]
        x0 = run_chains(torch.zeros(1, 1, 1), predictor, schedule, SamplerConfig(steps=50), seeds).flatten()
        standard_error = x0.std().item() / math.sqrt(len(seeds))
        self.assertLessEqual(abs(x0.mean().item() - 0.4), 3 * standard_error + 1e-5)

    def test_chain_seeds_are_distinct_and_stable(self):
        seeds = [chain_seed(7, chain) for chain in range(25)]
        self.assertEqual(len(set(seeds)), 25)
        self.assertEqual(seeds, [chain_seed(7, chain) for chain in range(25)])

    def test_single_chain_ensemble_fuses_to_the_sample(self):
        result = sample_ensemble(self.image, self.model, self.schedule, SamplerConfig(steps=5, ensemble_size=1))
        np.testing.assert_array_equal(result.fused, result.samples[0])
        self.assertEqual(len(result.per_sample_seeds), 1)

    def test_identical_chains_fuse_to_that_mask(self):
        config = SamplerConfig(steps=5, ensemble_size=3, chain_batch=1)
        result = sample_ensemble(self.image, self.model, self.schedule, config, seeds=[42, 42, 42])
        for sample in result.samples:
            np.testing.assert_array_equal(sample, result.samples[0])
        np.testing.assert_array_equal(result.fused, result.samples[0])

    def test_chain_order_does_not_change_fusion(self):
        config = SamplerConfig(steps=5, ensemble_size=4, chain_batch=1)
        seeds = [chain_seed(1, chain) for chain in range(4)]
        forward = sample_ensemble(self.image, self.model, self.schedule, config, seeds=seeds)
        backward = sample_ensemble(self.image, self.model, self.schedule, config, seeds=seeds[::-1])
        np.testing.assert_array_equal(forward.fused, backward.fused)

    def test_chain_batch_does_not_change_samples(self):
        seeds = [chain_seed(2, chain) for chain in range(4)]
        one = sample_ensemble(self.image, self.model, self.schedule,
                              SamplerConfig(steps=5, ensemble_size=4, chain_batch=1), seeds=seeds)
        many = sample_ensemble(self.image, self.model, self.schedule,
                               SamplerConfig(steps=5, ensemble_size=4, chain_batch=4), seeds=seeds)
        for a, b in zip(one.samples, many.samples):
            self.assertLessEqual(int((a != b).sum()), 2)

    def test_provenance_record(self):
        config = SamplerConfig(steps=5, ensemble_size=2)
        record = sample_ensemble(self.image, self.model, self.schedule, config).provenance()
        self.assertEqual(record['ensemble_size'], 2)
        self.assertEqual(record['fusion_method'], 'staple')
        self.assertEqual(record['steps'], 5)
        self.assertIn('sensitivities', record['staple'])

    def test_image_must_match_model(self):
        with self.assertRaises(InvalidArgumentError):
            sample_one(torch.zeros(1, 8, 8), self.model, self.schedule, SamplerConfig(steps=2))

    def test_mean_vote_ties_to_foreground(self):
        masks = np.array([[[1, 0]], [[0, 0]], [[1, 1]], [[0, 1]]], dtype=np.uint8)
        fused, estimate = fuse_masks(masks, 'mean-vote')
        self.assertIsNone(estimate)
        self.assertEqual(fused.tolist(), [[1, 1]])


class SamplerConfigFormTests(SimpleTestCase):
    def test_defaults(self):
        config = SamplerConfigForm.from_values({})
        self.assertEqual((config.steps, config.ensemble_size, config.fusion), (100, 25, 'staple'))

    def test_invalid_values_are_reported(self):
        from core.exceptions import ConfigError

        with self.assertRaises(ConfigError) as caught:
            SamplerConfigForm.from_values({'steps': 0, 'fusion': 'median'})
        self.assertIn('steps', caught.exception.errors)
        self.assertIn('fusion', caught.exception.errors)
