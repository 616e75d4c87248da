import math

import numpy as np
import pytest

from noisecine import (
    ImageField,
    KurtosisSpec,
    LatentField,
    LatticeShift,
    MotionPrimitive,
    FlowField,
    VarianceReductionSpec,
    adjust_kurtosis,
    displacement_at,
    inject_noise,
    match_stats,
    measure_stats,
    parse_flow_map,
    reduce_variance,
    render_flow_map,
    roll,
    warp_image,
)
from noisecine.liquid import downscale_displacement, warp_latent
from noisecine.errors import DegenerateChannelError, InvalidShapeError
from conftest import random_image, random_latent


def solid(rgb, hw=(8, 8)):
    img = np.zeros((*hw, 3), np.float32)
    img[:] = rgb
    return ImageField(img)


class TestParseFlowMap:
    PARAMS = dict(max_velocity=8.0, max_amplitude=16.0, period_range=(8.0, 64.0))

    def test_white_and_gray_pixels_do_not_move(self):
        for rgb in ((255, 255, 255), (128, 128, 128)):
            flow = parse_flow_map(solid(rgb), **self.PARAMS)
            for t in (0, 1, 7, 30):
                assert np.all(displacement_at(flow, t) == 0.0)

    def test_pure_cyan_is_constant_leftward(self):
        flow = parse_flow_map(solid((0, 255, 255)), **self.PARAMS)
        assert np.all(np.isinf(flow.period))
        assert np.allclose(flow.direction, math.pi)
        disp = displacement_at(flow, 3)
        assert np.allclose(disp[..., 0], -3 * 8.0)  # full saturation, max velocity
        assert np.allclose(disp[..., 1], 0.0, atol=1e-9)

    def test_grey_cyan_sways_horizontally(self):
        flow = parse_flow_map(solid((0, 128, 128)), **self.PARAMS)
        assert np.all(np.isfinite(flow.period))
        # value 128/255 ~ 0.502 -> period near the middle of the range
        assert np.allclose(flow.period, 8.0 + (128 / 255) * 56.0)
        assert np.allclose(flow.direction, math.pi)
        t = float(flow.period[0, 0]) / 4.0  # quarter period: peak sway
        disp = displacement_at(flow, t)
        assert np.allclose(disp[..., 0], -16.0, atol=1e-9)  # full saturation
        assert np.allclose(disp[..., 1], 0.0, atol=1e-9)
        # periodicity: one full period later the displacement repeats
        disp2 = displacement_at(flow, t + float(flow.period[0, 0]))
        assert np.allclose(disp, disp2, atol=1e-9)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            parse_flow_map(solid((0, 0, 0)), max_velocity=0, max_amplitude=1, period_range=(1, 2))
        with pytest.raises(ValueError):
            parse_flow_map(solid((0, 0, 0)), max_velocity=1, max_amplitude=1, period_range=(0, 2))

    def test_round_trip_within_quantization(self):
        rng = np.random.Generator(np.random.PCG64(5))
        H = W = 16
        direction = rng.uniform(0, 2 * math.pi, (H, W))
        constant = rng.random((H, W)) < 0.5
        amplitude = np.where(constant, rng.uniform(1, 8, (H, W)), rng.uniform(1, 16, (H, W)))
        period = np.where(constant, math.inf, rng.uniform(8.0, 8.0 + 0.9 * 56.0, (H, W)))
        flow = FlowField(direction=direction, amplitude=amplitude, period=period,
                         phase=np.zeros((H, W)))
        img = render_flow_map(flow, 8.0, 16.0, (8.0, 64.0))
        back = parse_flow_map(img, 8.0, 16.0, (8.0, 64.0))
        assert np.array_equal(np.isinf(back.period), constant)
        # Direction resolves a 60-degree hue segment over the middle channel's
        # sat*value*255 counts, so one count is (pi/3)/(s*v*255) radians; allow
        # two counts for the independent rounding of both active channels.
        sat = amplitude / np.where(constant, 8.0, 16.0)
        val = np.where(constant, 1.0, (period - 8.0) / 56.0)
        derr = np.abs((back.direction - direction + math.pi) % (2 * math.pi) - math.pi)
        assert np.all(derr <= 2.0 * (math.pi / 3) / (sat * val * 255.0) + 1e-6)
        # magnitude within one quantization step of the relevant scale
        scale = np.where(constant, 8.0, 16.0)
        aerr = np.abs(back.amplitude - amplitude)
        assert np.all(aerr <= scale / 255.0 * (1.0 / np.maximum(val, 1e-6)) + 1e-9)
        # period within one value-channel step
        perr = np.abs(back.period[~constant] - period[~constant])
        assert np.all(perr <= 56.0 / 255.0 + 1e-9)


class TestDisplacementAt:
    def test_zero_at_t0_with_zero_phase(self):
        flow = FlowField.uniform((4, 4), MotionPrimitive(direction=1.0, amplitude=5.0, period=10.0))
        assert np.all(displacement_at(flow, 0) == 0.0)

    def test_periodicity_exact(self):
        flow = FlowField.uniform((4, 4), MotionPrimitive(direction=0.3, amplitude=2.0,
                                                         period=8.0, phase=0.5))
        a = displacement_at(flow, 3.0)
        b = displacement_at(flow, 11.0)
        assert np.allclose(a, b, atol=1e-12)

    def test_constant_velocity_linear(self):
        flow = FlowField.uniform((2, 2), MotionPrimitive(direction=0.0, amplitude=2.0))
        disp = displacement_at(flow, 3)
        assert np.allclose(disp[..., 0], 6.0)
        assert np.allclose(disp[..., 1], 0.0)
        # exactly linear: t scaling
        assert np.allclose(displacement_at(flow, 6), 2 * disp)

    def test_negative_time_rejected(self):
        flow = FlowField.zero((2, 2))
        with pytest.raises(ValueError):
            displacement_at(flow, -1)

    def test_phase_offset_at_t0(self):
        flow = FlowField.uniform((2, 2), MotionPrimitive(direction=0.0, amplitude=2.0,
                                                         period=8.0, phase=math.pi / 2))
        disp = displacement_at(flow, 0)
        assert np.allclose(disp[..., 0], 2.0)


class TestWarpImage:
    def test_zero_displacement_identity(self):
        img = random_image(1, (16, 16))
        out = warp_image(img, np.zeros((16, 16, 2)))
        assert np.array_equal(out.data, img.data)

    def test_uniform_integer_displacement_is_roll(self):
        img = random_image(2, (16, 16))
        disp = np.zeros((16, 16, 2))
        disp[..., 0] = 8.0
        out = warp_image(img, disp)
        assert np.array_equal(out.data, np.roll(img.data, 8, axis=1))

    def test_matches_latent_roll_at_scale(self):
        # Consistency with the lattice roll at 8x scale.
        latent = random_latent(3, (4, 4, 4))
        rolled = roll(latent, LatticeShift(dx=1))
        img = ImageField(np.repeat(np.repeat(np.moveaxis(latent.data[:3], 0, 2), 8, 0), 8, 1))
        disp = np.zeros((32, 32, 2))
        disp[..., 0] = 8.0
        warped = warp_image(img, disp)
        expected = ImageField(np.repeat(np.repeat(np.moveaxis(rolled.data[:3], 0, 2), 8, 0), 8, 1))
        assert np.array_equal(warped.data, expected.data)

    def test_region_constant_displacement_duplicates_trailing_band(self):
        # The blocky-motion regime: a moved region leaves a copy of its
        # trailing edge when wrap is off.
        img = random_image(4, (8, 16))
        disp = np.zeros((8, 16, 2))
        disp[:, 8:, 0] = 4.0  # right half moves right by 4
        out = warp_image(img, disp, wrap_x=False, wrap_y=False)
        assert np.array_equal(out.data[:, 12:, :], img.data[:, 8:12, :])
        # band out of reach samples out of the moved region: trailing copy
        assert np.array_equal(out.data[:, 8:12, :], img.data[:, 4:8, :])
        assert np.array_equal(out.data[:, :8, :], img.data[:, :8, :])

    def test_wrap_off_out_of_bounds_keeps_source(self):
        img = random_image(5, (4, 4))
        disp = np.full((4, 4, 2), 10.0)
        out = warp_image(img, disp, wrap_x=False, wrap_y=False)
        assert np.array_equal(out.data, img.data)

    def test_value_conserving(self):
        rng = np.random.Generator(np.random.PCG64(6))
        img = ImageField(rng.integers(0, 255, (8, 8, 3)).astype(np.float32))
        disp = rng.uniform(-6, 6, (8, 8, 2))
        out = warp_image(img, disp)
        assert set(out.data.ravel().tolist()) <= set(img.data.ravel().tolist())

    def test_shape_mismatch(self):
        img = random_image(7, (8, 8))
        with pytest.raises(InvalidShapeError):
            warp_image(img, np.zeros((4, 4, 2)))


class TestWarpLatent:
    def test_integer_latent_displacement_is_roll(self):
        x = random_latent(8, (4, 8, 8))
        disp = np.zeros((8, 8, 2))
        disp[..., 0] = 2.0
        out = warp_latent(x, disp)
        assert np.array_equal(out.data, np.roll(x.data, 2, axis=2))

    def test_downscale_displacement_box_means(self):
        disp = np.zeros((16, 16, 2))
        disp[..., 0] = 8.0
        disp[..., 1] = -16.0
        lat = downscale_displacement(disp, 8)
        assert lat.shape == (2, 2, 2)
        assert np.allclose(lat[..., 0], 1.0)
        assert np.allclose(lat[..., 1], -2.0)


class TestReduceVariance:
    def test_switch_one_is_identity(self):
        x = random_latent(9)
        out, stats = reduce_variance(x, VarianceReductionSpec(switch_fraction=1.0))
        assert np.array_equal(out.data, x.data)

    def test_beta_zero_is_identity(self):
        x = random_latent(10)
        out, _ = reduce_variance(x, VarianceReductionSpec(switch_fraction=0.2, beta=0.0))
        assert np.array_equal(out.data, x.data)

    def test_scale_and_std_ratio(self):
        spec = VarianceReductionSpec(switch_fraction=0.7, beta=0.5, floor=0.7)
        assert spec.scale == pytest.approx(0.85)
        x = random_latent(11, (4, 32, 32))
        out, stats = reduce_variance(x, spec)
        after = measure_stats(out)
        assert np.allclose(after.std, 0.85 * stats.std, atol=1e-6)
        assert np.allclose(after.mean, stats.mean, atol=1e-6)

    def test_floor_clamps_scale(self):
        spec = VarianceReductionSpec(switch_fraction=0.0, beta=1.0, floor=0.7)
        assert spec.scale == pytest.approx(0.7)


class TestMatchStats:
    def test_fixed_point(self):
        x = random_latent(12)
        out = match_stats(x, measure_stats(x))
        assert np.allclose(out.data, x.data, atol=1e-9)

    def test_reaches_target(self):
        rng = np.random.Generator(np.random.PCG64(13))
        x = LatentField((rng.standard_normal((4, 32, 32)) * 2.0 + 0.5).astype(np.float32))
        target = measure_stats(random_latent(14, (4, 32, 32)))
        out = match_stats(x, target)
        got = measure_stats(out)
        assert np.allclose(got.mean, target.mean, atol=1e-6)
        assert np.allclose(got.std, target.std, atol=1e-6)

    def test_idempotent(self):
        x = random_latent(15)
        target = measure_stats(random_latent(16))
        once = match_stats(x, target)
        twice = match_stats(once, target)
        assert np.allclose(twice.data, once.data, atol=1e-9)

    def test_degenerate_channel_error(self):
        x = LatentField(np.zeros((4, 8, 8), np.float32))
        target = measure_stats(random_latent(17))
        with pytest.warns(RuntimeWarning):
            with pytest.raises(DegenerateChannelError):
                match_stats(x, target)

    def test_reduce_then_match_round_trips(self):
        for seed in range(5):
            x = random_latent(100 + seed, (4, 16, 16))
            reduced, stats = reduce_variance(x, VarianceReductionSpec(0.6, beta=0.5, floor=0.5))
            restored = match_stats(reduced, stats)
            assert np.allclose(restored.data, x.data, atol=1e-5)


class TestAdjustKurtosis:
    def test_delta_one_identity(self):
        x = random_latent(18)
        out = adjust_kurtosis(x, KurtosisSpec(delta=1.0, enabled=True))
        assert np.allclose(out.data, x.data, atol=1e-9)

    def test_delta_above_one_increases_excess_kurtosis(self):
        # Monte-Carlo moment comparison on 10^6 standard normal samples.
        rng = np.random.Generator(np.random.PCG64(19))
        samples = rng.standard_normal(1_000_000)

        def excess_kurtosis(v):
            c = v - v.mean()
            return float((c**4).mean() / (c**2).mean() ** 2 - 3.0)

        transformed = np.sinh(1.5 * np.arcsinh(samples))
        assert excess_kurtosis(transformed) > excess_kurtosis(samples)
        # and the engine implements that same transform
        x = LatentField(samples[: 4 * 64 * 64].reshape(4, 64, 64).astype(np.float32))
        out = adjust_kurtosis(x, KurtosisSpec(delta=1.5, enabled=True))
        assert np.allclose(
            out.data, np.sinh(1.5 * np.arcsinh(x.data.astype(np.float64))), atol=1e-6
        )

    def test_odd_function(self):
        x = random_latent(20)
        neg = LatentField(-x.data)
        out_pos = adjust_kurtosis(x, KurtosisSpec(delta=1.7, enabled=True))
        out_neg = adjust_kurtosis(neg, KurtosisSpec(delta=1.7, enabled=True))
        assert np.allclose(out_neg.data, -out_pos.data, atol=1e-9)

    def test_invalid_delta(self):
        with pytest.raises(ValueError):
            KurtosisSpec(delta=0.0)


class TestInjectNoise:
    def test_zero_strength_identity(self):
        x = random_latent(21)
        assert inject_noise(x, seed=1, strength=0.0) is x

    def test_variance_additivity(self):
        x = LatentField(np.zeros((4, 64, 64), np.float32))
        out = inject_noise(x, seed=22, strength=0.5)
        var = out.data.var(axis=(1, 2))
        assert np.allclose(var, 0.25, atol=0.02)

    def test_deterministic(self):
        x = random_image(23, (16, 16))
        a = inject_noise(x, seed=3, strength=0.1)
        b = inject_noise(x, seed=3, strength=0.1)
        assert np.array_equal(a.data, b.data)
        c = inject_noise(x, seed=4, strength=0.1)
        assert not np.array_equal(a.data, c.data)

    def test_works_on_images_and_latents(self):
        assert isinstance(inject_noise(random_image(24, (8, 8)), 1, 0.1), ImageField)
        assert isinstance(inject_noise(random_latent(25), 1, 0.1), LatentField)
