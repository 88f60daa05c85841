import math

import numpy as np
import torch
from django.test import SimpleTestCase

from core.exceptions import ConfigError, InvalidArgumentError
from core.testing import assert_gradients_match, random_indices

from .ffparser import SpectralFilter, ffparser_apply, fft2, ifft2, modulate
from .forms import ModelConfigForm
from .models import (
    ModelConfig, SegDiffusionNet, channel_layer_norm, count_parameters, dynamic_condition, parameter_manifest,
)


def small_config(**changes):
    values = dict(
        image_size=16, base_channels=4, stage_block_counts=(1, 1, 1), channel_multipliers=(1, 2, 4),
        time_embed_dim=8, T=20,
    )
    values.update(changes)
    return ModelConfig(**values)


def build(config, seed=0):
    torch.manual_seed(seed)
    return SegDiffusionNet(config)


def randomize_head(model, seed=0):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for parameter in model.decoder.out[-1].parameters():
            parameter.copy_(torch.randn(parameter.shape, generator=generator, dtype=parameter.dtype) * 0.1)
    return model


class FFTTests(SimpleTestCase):
    def setUp(self):
        self.generator = torch.Generator().manual_seed(0)

    def test_zero_map(self):
        self.assertTrue(torch.equal(fft2(torch.zeros(2, 4, 4)), torch.zeros(2, 4, 4, dtype=torch.complex64)))

    def test_constant_map_has_only_dc(self):
        m = torch.stack([torch.full((4, 6), 2.0), torch.full((4, 6), -0.5)]).double()
        spectrum = fft2(m)
        self.assertAlmostEqual(spectrum[0, 0, 0].real.item(), 2.0 * 24)
        self.assertAlmostEqual(spectrum[1, 0, 0].real.item(), -0.5 * 24)
        spectrum[:, 0, 0] = 0
        self.assertLess(spectrum.abs().max().item(), 1e-12)

    def test_matches_naive_dft(self):
        m = torch.rand(1, 4, 4, generator=self.generator, dtype=torch.float64)
        naive = np.zeros((4, 4), dtype=np.complex128)
        values = m[0].numpy()
        for u in range(4):
            for v in range(4):
                for x in range(4):
                    for y in range(4):
                        naive[u, v] += values[x, y] * np.exp(-2j * np.pi * (u * x / 4 + v * y / 4))
        np.testing.assert_allclose(fft2(m)[0].numpy(), naive, atol=1e-6)

    def test_rejects_bad_input(self):
        with self.assertRaises(InvalidArgumentError):
            fft2(torch.zeros(4, 4))
        with self.assertRaises(InvalidArgumentError):
            fft2(torch.tensor([[[float('nan')]]]))

    def test_modulate(self):
        spectrum = torch.randn(1, 2, 2, dtype=torch.complex128, generator=self.generator)
        self.assertTrue(torch.equal(modulate(spectrum, torch.ones(1, 2, 2, dtype=torch.complex128)), spectrum))
        self.assertTrue(torch.equal(
            modulate(spectrum, torch.zeros(1, 2, 2, dtype=torch.complex128)),
            torch.zeros(1, 2, 2, dtype=torch.complex128),
        ))
        attn = torch.tensor([[[1 + 2j, -0.5j], [3.0, 0.25 - 1j]]], dtype=torch.complex128)
        spec = torch.tensor([[[2 - 1j, 4 + 4j], [-1j, 2 + 2j]]], dtype=torch.complex128)
        expected = [[(1 + 2j) * (2 - 1j), -0.5j * (4 + 4j)], [3.0 * -1j, (0.25 - 1j) * (2 + 2j)]]
        np.testing.assert_allclose(modulate(spec, attn)[0].numpy(), np.array(expected), atol=1e-10)
        with self.assertRaises(InvalidArgumentError):
            modulate(spec, torch.ones(1, 3, 3, dtype=torch.complex128))

    def test_inverse(self):
        for _ in range(100):
            channels, height, width = torch.randint(1, 33, (3,), generator=self.generator).tolist()
            m = torch.rand(min(channels, 8), height, width, generator=self.generator) * 2 - 1
            torch.testing.assert_close(ifft2(fft2(m)), m, atol=1e-5, rtol=0)
        self.assertTrue(torch.equal(ifft2(torch.zeros(1, 4, 4, dtype=torch.complex64)), torch.zeros(1, 4, 4)))

    def test_dc_only_gives_channel_mean(self):
        m = torch.randn(2, 8, 8, generator=self.generator, dtype=torch.float64)
        spectrum = fft2(m)
        low = torch.zeros_like(spectrum)
        low[:, 0, 0] = spectrum[:, 0, 0]
        out = ifft2(low)
        for c in range(2):
            torch.testing.assert_close(out[c], torch.full((8, 8), m[c].mean().item(), dtype=torch.float64),
                                       atol=1e-6, rtol=0)


class FFParserTests(SimpleTestCase):
    def setUp(self):
        self.generator = torch.Generator().manual_seed(1)

    def test_identity_filter_is_a_no_op(self):
        m = torch.randn(2, 4, 8, 8, generator=self.generator)
        torch.testing.assert_close(SpectralFilter(4, 8, 8)(m), m, atol=1e-5, rtol=0)

    def test_zero_filter_gives_zero(self):
        filt = SpectralFilter(2, 4, 4)
        with torch.no_grad():
            filt.weight_real.zero_()
        self.assertLess(filt(torch.randn(2, 4, 4, generator=self.generator)).abs().max().item(), 1e-7)

    def test_shape_mismatch(self):
        with self.assertRaises(InvalidArgumentError):
            ffparser_apply(torch.zeros(2, 4, 4), SpectralFilter(2, 8, 8))

    def test_gradients_match_finite_differences(self):
        filt = SpectralFilter(2, 4, 4).double()
        with torch.no_grad():
            filt.weight_real.copy_(torch.rand(2, 4, 4, generator=self.generator, dtype=torch.float64))
            filt.weight_imag.copy_(torch.rand(2, 4, 4, generator=self.generator, dtype=torch.float64) - 0.5)
        m = torch.randn(2, 4, 4, generator=self.generator, dtype=torch.float64, requires_grad=True)
        weights = torch.randn(2, 4, 4, generator=self.generator, dtype=torch.float64)
        tensors = [filt.weight_real, filt.weight_imag, m]
        indices = [(position, index) for position in range(3) for index in np.ndindex(2, 4, 4)]
        assert_gradients_match(
            self, lambda: (ffparser_apply(m, filt) * weights).sum(), tensors, indices, eps=1e-4, rtol=1e-3,
        )

    def test_linearity(self):
        filt = SpectralFilter(3, 8, 8)
        with torch.no_grad():
            filt.weight_real.normal_(generator=self.generator)
            filt.weight_imag.normal_(generator=self.generator)
        m1 = torch.randn(3, 8, 8, generator=self.generator)
        m2 = torch.randn(3, 8, 8, generator=self.generator)
        torch.testing.assert_close(
            ffparser_apply(2.5 * m1 - 0.7 * m2, filt),
            2.5 * ffparser_apply(m1, filt) - 0.7 * ffparser_apply(m2, filt), atol=1e-5, rtol=0,
        )

    def test_bounded_filter_does_not_add_energy(self):
        for seed in range(5):
            generator = torch.Generator().manual_seed(seed)
            magnitude = torch.rand(2, 8, 8, generator=generator)
            phase = torch.rand(2, 8, 8, generator=generator) * 2 * math.pi
            attn = torch.polar(magnitude, phase)
            m = torch.randn(2, 8, 8, generator=generator)
            self.assertLessEqual(ffparser_apply(m, attn).norm().item(), m.norm().item() + 1e-5)

    def test_reset_identity(self):
        filt = SpectralFilter(1, 4, 4)
        with torch.no_grad():
            filt.weight_imag.fill_(0.3)
        filt.reset_identity()
        self.assertTrue(torch.equal(filt.attn_map, torch.ones(1, 4, 4, dtype=torch.complex64)))


class DynamicConditionTests(SimpleTestCase):
    def test_zero_image_features_give_zero(self):
        m_mask = torch.randn(1, 4, 2, 2)
        self.assertTrue(torch.equal(dynamic_condition(torch.zeros(1, 4, 2, 2), m_mask), torch.zeros(1, 4, 2, 2)))

    def test_hand_evaluated_two_by_two(self):
        image = np.array([[[1.0, 0.0], [2.0, -1.0]], [[3.0, 4.0], [2.0, 1.0]]])
        mask = np.array([[[0.0, 1.0], [5.0, 0.5]], [[4.0, -1.0], [1.0, 0.5]]])
        expected = np.zeros_like(image)
        for y in range(2):
            for x in range(2):
                a, b = image[:, y, x], mask[:, y, x]
                norm_a = (a - a.mean()) / math.sqrt(a.var() + 1e-5)
                norm_b = (b - b.mean()) / math.sqrt(b.var() + 1e-5)
                expected[:, y, x] = norm_a * norm_b * a
        result = dynamic_condition(torch.tensor(image)[None], torch.tensor(mask)[None])[0]
        np.testing.assert_allclose(result.numpy(), expected, atol=1e-6)

    def test_mask_scale_is_removed(self):
        generator = torch.Generator().manual_seed(2)
        image = torch.randn(2, 8, 4, 4, generator=generator)
        mask = torch.randn(2, 8, 4, 4, generator=generator)
        torch.testing.assert_close(
            dynamic_condition(image, 7.5 * mask), dynamic_condition(image, mask), atol=1e-5, rtol=0,
        )

    def test_layer_norm_is_per_position(self):
        x = torch.randn(1, 6, 3, 3, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
        normalized = channel_layer_norm(x)
        torch.testing.assert_close(normalized.mean(dim=1), torch.zeros(1, 3, 3, dtype=torch.float64))


class EncoderTests(SimpleTestCase):
    def setUp(self):
        generator = torch.Generator().manual_seed(4)
        self.xt = torch.randn(2, 1, 16, 16, generator=generator)
        self.image = torch.rand(2, 1, 16, 16, generator=generator)

    def test_default_shape_trace(self):
        model = build(ModelConfig()).eval()
        image = torch.rand(1, 1, 64, 64)
        with torch.no_grad():
            temb = model.embed_time(0, 1, image.device)
            _, features = model.encode_mask(torch.randn(1, 1, 64, 64), temb)
            _, skips = model.encode_image(image, features, temb)
        self.assertEqual([tuple(s.shape[1:]) for s in skips], [(32, 64, 64), (64, 32, 32), (128, 16, 16)])
        self.assertEqual([f.shape for f in features], [s.shape for s in skips])

    def test_image_path_ignores_mask_without_dycond(self):
        model = build(small_config(use_dycond=False, use_ffparser=False)).eval()
        temb = model.embed_time(3, 2, self.image.device)
        _, features = model.encode_mask(self.xt, temb)
        other = [torch.randn_like(feature) for feature in features]
        with torch.no_grad():
            first, _ = model.encode_image(self.image, features, temb)
            second, _ = model.encode_image(self.image, other, temb)
        self.assertTrue(torch.equal(first, second))

    def test_image_path_uses_mask_with_dycond(self):
        model = build(small_config()).eval()
        temb = model.embed_time(3, 2, self.image.device)
        with torch.no_grad():
            _, features = model.encode_mask(self.xt, temb)
            other = [feature + torch.randn_like(feature) for feature in features]
            first, _ = model.encode_image(self.image, features, temb)
            second, _ = model.encode_image(self.image, other, temb)
        self.assertFalse(torch.equal(first, second))

    def test_missing_mask_features(self):
        model = build(small_config())
        temb = model.embed_time(0, 2, self.image.device)
        with self.assertRaises(InvalidArgumentError):
            model.encode_image(self.image, None, temb)

    def test_identity_ffparser_changes_nothing_at_init(self):
        plain = randomize_head(build(small_config(use_ffparser=False))).eval()
        with_parser = build(small_config(use_ffparser=True)).eval()
        missing = with_parser.load_state_dict(plain.state_dict(), strict=False)
        self.assertTrue(all(name.startswith('ffparser.') for name in missing.missing_keys))
        generator = torch.Generator().manual_seed(9)
        for _ in range(10):
            xt = torch.randn(2, 1, 16, 16, generator=generator)
            image = torch.rand(2, 1, 16, 16, generator=generator)
            t = torch.randint(0, 20, (2,), generator=generator)
            with torch.no_grad():
                torch.testing.assert_close(with_parser(xt, image, t), plain(xt, image, t), atol=1e-5, rtol=0)

    def test_mask_encoder_is_deterministic_and_time_aware(self):
        model = build(small_config()).eval()
        with torch.no_grad():
            first, _ = model.encode_mask(self.xt, model.embed_time(0, 2, self.xt.device))
            again, _ = model.encode_mask(self.xt, model.embed_time(0, 2, self.xt.device))
            late, _ = model.encode_mask(self.xt, model.embed_time(19, 2, self.xt.device))
        self.assertTrue(torch.equal(first, again))
        self.assertGreater((first - late).abs().max().item(), 0.0)


class PredictNoiseTests(SimpleTestCase):
    def test_output_shape_matches_mask(self):
        model = build(ModelConfig(base_channels=8, stage_block_counts=(1, 1, 1), T=10)).eval()
        xt = torch.randn(2, 1, 64, 64)
        with torch.no_grad():
            self.assertEqual(model(xt, torch.rand(2, 1, 64, 64), torch.tensor([1, 9])).shape, xt.shape)

    def test_shape_contract_for_other_configs(self):
        for config in (small_config(in_channels_image=3), small_config(stage_block_counts=(1, 1, 1, 1),
                                                                        channel_multipliers=(1, 2, 2, 4)),
                       small_config(time_embedding='table', fusion_stages=(0, 1, 2))):
            model = build(config).eval()
            xt = torch.randn(1, 1, 16, 16)
            with torch.no_grad():
                out = model(xt, torch.rand(1, config.in_channels_image, 16, 16), 5)
            self.assertEqual(out.shape, xt.shape)

    def test_initial_prediction_is_zero(self):
        model = build(small_config()).eval()
        with torch.no_grad():
            out = model(torch.randn(2, 1, 16, 16), torch.rand(2, 1, 16, 16), 4)
        self.assertEqual(out.abs().max().item(), 0.0)

    def test_extreme_inputs_stay_finite(self):
        model = randomize_head(build(small_config())).eval()
        with torch.no_grad():
            for value in (10.0, -10.0):
                out = model(torch.full((1, 1, 16, 16), value), torch.rand(1, 1, 16, 16), 19)
                self.assertTrue(bool(torch.isfinite(out).all()))

    def test_single_image_is_broadcast_over_chains(self):
        model = randomize_head(build(small_config())).eval()
        xt = torch.randn(3, 1, 16, 16)
        image = torch.rand(1, 1, 16, 16)
        with torch.no_grad():
            torch.testing.assert_close(model(xt, image, 2), model(xt, image.expand(3, -1, -1, -1), 2))

    def test_invalid_steps(self):
        model = build(small_config())
        with self.assertRaises(InvalidArgumentError):
            model(torch.zeros(1, 1, 16, 16), torch.zeros(1, 1, 16, 16), 20)
        with self.assertRaises(InvalidArgumentError):
            model(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8), 0)

    def test_full_model_gradients_match_finite_differences(self):
        config = ModelConfig(image_size=8, base_channels=4, stage_block_counts=(1, 1, 1),
                             channel_multipliers=(1, 2, 4), time_embed_dim=8, T=10)
        model = randomize_head(build(config).double())
        generator = torch.Generator().manual_seed(5)
        xt = torch.randn(2, 1, 8, 8, generator=generator, dtype=torch.float64)
        image = torch.rand(2, 1, 8, 8, generator=generator, dtype=torch.float64)
        target = torch.randn(2, 1, 8, 8, generator=generator, dtype=torch.float64)
        t = torch.tensor([2, 7])
        params = [parameter for parameter in model.parameters() if parameter.requires_grad]
        indices = random_indices(params, 20, generator)
        assert_gradients_match(
            self, lambda: ((model(xt, image, t) - target) ** 2).mean(), params, indices,
            eps=1e-3, rtol=5e-2, atol=1e-6,
        )


class IntrospectionTests(SimpleTestCase):
    def test_count_parameters_matches_built_model(self):
        config = small_config()
        self.assertEqual(count_parameters(config), sum(p.numel() for p in build(config).parameters()))

    def test_ffparser_parameters_only_when_enabled(self):
        names = [entry['name'] for entry in parameter_manifest(build(small_config()))]
        self.assertIn('ffparser.stage1.weight_real', names)
        self.assertIn('ffparser.stage2.weight_imag', names)
        self.assertIn('encoder_image.stage1.block0.conv1.weight', names)
        self.assertIn('decoder.out.2.weight', names)
        plain = [entry['name'] for entry in parameter_manifest(build(small_config(use_ffparser=False)))]
        self.assertFalse(any(name.startswith('ffparser.') for name in plain))

    def test_variants_share_image_encoder_init(self):
        full = build(small_config(), seed=3)
        vanilla = build(small_config(use_dycond=False, use_ffparser=False), seed=3)
        for name, tensor in full.encoder_image.state_dict().items():
            self.assertTrue(torch.equal(tensor, vanilla.encoder_image.state_dict()[name]), name)


class ModelConfigTests(SimpleTestCase):
    def test_invalid_configs(self):
        for changes in (
            {'stage_block_counts': (1, 1)},
            {'stage_block_counts': (1, 1, 1), 'channel_multipliers': (1, 2)},
            {'image_size': 20},
            {'fusion_stages': (3,)},
            {'time_embedding': 'learned'},
        ):
            with self.assertRaises(InvalidArgumentError, msg=str(changes)):
                small_config(**changes)

    def test_preset_and_overrides(self):
        config = ModelConfigForm.from_values({'preset': 'B-toy', 'image_size': 32})
        self.assertEqual(config.num_stages, 4)
        self.assertEqual(config.base_channels, 16)
        self.assertEqual(config.image_size, 32)

    def test_list_values_from_command_line(self):
        config = ModelConfigForm.from_values({'stage_block_counts': '2,2,2', 'use_ffparser': False})
        self.assertEqual(config.stage_block_counts, (2, 2, 2))
        self.assertFalse(config.use_ffparser)

    def test_form_errors(self):
        with self.assertRaises(ConfigError):
            ModelConfigForm.from_values({'preset': 'XL'})
        with self.assertRaises(ConfigError):
            ModelConfigForm.from_values({'image_size': 20})
        with self.assertRaises(ConfigError) as caught:
            ModelConfigForm.from_values({'channel_multipliers': '1,2'})
        self.assertIn('channel_multipliers', str(caught.exception))
