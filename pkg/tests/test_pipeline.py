import numpy as np
import pytest

from noisecine import (
    CrystalFrameTransform,
    DenoiseSchedule,
    FlowField,
    ImageField,
    LatentField,
    LatticeShift,
    LiquidOptions,
    MotionPrimitive,
    SceneSpec,
    SeededNoiseSpec,
    animate_layers,
    composite_seeds,
    generate_crystal,
    generate_liquid,
    image_to_video,
    sample_noise,
    seamless_upscale,
    vid2vid_tracked,
)
from noisecine.backends import MockBackend, MockConfig
from noisecine.errors import AlignmentError, DeterminismError, InvalidShapeError, TransportError
from noisecine.pipeline import LayerItem, strength_to_step
from conftest import block_image, make_mock


def uniform_flow(hw, dx_per_frame, dy_per_frame=0.0):
    import math

    amp = math.hypot(dx_per_frame, dy_per_frame)
    direction = math.atan2(dy_per_frame, dx_per_frame)
    return FlowField.uniform(hw, MotionPrimitive(direction=direction, amplitude=amp))


def roll_image(img: ImageField, dx: int, dy: int = 0) -> np.ndarray:
    return np.roll(img.data, (dy, dx), axis=(0, 1))


class _StochasticBackend(MockBackend):
    """Lies about determinism: adds fresh randomness inside denoise."""

    def __init__(self, config=MockConfig()):
        super().__init__(config)
        self._rng = np.random.Generator(np.random.PCG64(0))

    def _denoise(self, latent, step_from, step_to, conditioning):
        out = super()._denoise(latent, step_from, step_to, conditioning)
        jitter = self._rng.standard_normal(out.data.shape).astype(np.float32)
        return LatentField(out.data + 1e-3 * jitter)


class _DeclaredStochasticBackend(MockBackend):
    def capabilities(self):
        caps = super().capabilities()
        return type(caps)(
            deterministic=False,
            concurrency_safe=caps.concurrency_safe,
            latent_shape=caps.latent_shape,
            scale_factor=caps.scale_factor,
            total_steps=caps.total_steps,
        )


class TestGenerateCrystal:
    def test_single_identity_frame_matches_plain_generation(self):
        backend = make_mock((8, 8), steps=10)
        scene = SceneSpec(prompt="hills", seed=5)
        schedule = DenoiseSchedule(total_steps=10, switch_fraction=0.7)
        frames = generate_crystal(backend, scene, schedule, [CrystalFrameTransform.identity()])
        noise = sample_noise(SeededNoiseSpec(5, (4, 8, 8)))
        cond = backend.prepare_conditioning("hills", None)
        plain = backend.decode(backend.denoise(noise, 10, 0, cond))
        assert np.array_equal(frames[0].data, plain.data)

    def test_roll_equivariance(self):
        backend = make_mock((8, 8), steps=10)
        scene = SceneSpec(prompt="dunes", seed=6)
        schedule = DenoiseSchedule(total_steps=10, switch_fraction=0.7)
        transforms = [
            CrystalFrameTransform.identity(),
            CrystalFrameTransform(shift=LatticeShift(dx=2)),
            CrystalFrameTransform(shift=LatticeShift(dx=4)),
        ]
        frames = generate_crystal(backend, scene, schedule, transforms)
        for f in (1, 2):
            assert np.allclose(frames[f].data, roll_image(frames[0], 16 * f), atol=1e-6)

    def test_switch_at_one_transforms_pure_noise(self):
        backend = make_mock((8, 8), steps=10)
        scene = SceneSpec(seed=7)
        schedule = DenoiseSchedule(total_steps=10, switch_fraction=1.0)
        transforms = [CrystalFrameTransform.identity(),
                      CrystalFrameTransform(shift=LatticeShift(dy=3))]
        frames = generate_crystal(backend, scene, schedule, transforms)
        assert np.allclose(frames[1].data, roll_image(frames[0], 0, 24), atol=1e-6)

    def test_prefix_runs_once(self):
        for count in (1, 4, 16):
            backend = make_mock((8, 8), steps=10)
            schedule = DenoiseSchedule(total_steps=10, switch_fraction=0.7)
            transforms = [CrystalFrameTransform.identity()] + [
                CrystalFrameTransform(shift=LatticeShift(dx=f)) for f in range(1, count)
            ]
            generate_crystal(backend, SceneSpec(seed=1), schedule, transforms)
            prefix = (10, schedule.switch_step)
            suffix = (schedule.switch_step, 0)
            assert backend.denoise_segments.count(prefix) == 1
            assert backend.denoise_segments.count(suffix) == count

    def test_stochastic_backend_detected(self):
        backend = _StochasticBackend(MockConfig(latent_shape=(4, 8, 8), total_steps=10))
        with pytest.raises(DeterminismError):
            generate_crystal(backend, SceneSpec(), DenoiseSchedule(10, 0.7),
                             [CrystalFrameTransform.identity()])

    def test_declared_stochastic_backend_rejected(self):
        backend = _DeclaredStochasticBackend(MockConfig(latent_shape=(4, 8, 8), total_steps=10))
        with pytest.raises(DeterminismError):
            generate_crystal(backend, SceneSpec(), DenoiseSchedule(10, 0.7),
                             [CrystalFrameTransform.identity()])

    def test_frame0_must_be_identity(self):
        backend = make_mock((8, 8), steps=10)
        with pytest.raises(ValueError):
            generate_crystal(backend, SceneSpec(), DenoiseSchedule(10, 0.7),
                             [CrystalFrameTransform(shift=LatticeShift(dx=1))])

    def test_segmap_moves_in_lockstep(self):
        backend = make_mock((8, 8), steps=10)
        segmap = block_image(1, (8, 8))
        scene = SceneSpec(prompt="seg", seed=2, segmap=segmap)
        schedule = DenoiseSchedule(total_steps=10, switch_fraction=0.7)
        transforms = [CrystalFrameTransform.identity(),
                      CrystalFrameTransform(shift=LatticeShift(dx=1))]
        generate_crystal(backend, scene, schedule, transforms)
        # two base conditioning preparations (scene + frame 0 reuses) plus one
        # for the transformed segmap
        assert backend.call_counts["prepare_conditioning"] == 2


class TestGenerateLiquid:
    def _setup(self, steps=10, switch=0.7, hw=(8, 8)):
        backend = make_mock(hw, steps=steps)
        scene = SceneSpec(prompt="pond", seed=9)
        schedule = DenoiseSchedule(total_steps=steps, switch_fraction=switch)
        return backend, scene, schedule

    def test_zero_flow_frames_identical(self):
        backend, scene, schedule = self._setup()
        flow = FlowField.zero((64, 64))
        frames = generate_liquid(backend, scene, schedule, flow, frames=3)
        for f in (1, 2):
            assert np.allclose(frames[f].data, frames[0].data, atol=1e-5)

    def test_uniform_flow_equivariance(self):
        backend, scene, schedule = self._setup()
        flow = uniform_flow((64, 64), 8.0)
        frames = generate_liquid(backend, scene, schedule, flow, frames=3)
        for f in (1, 2):
            assert np.allclose(frames[f].data, roll_image(frames[0], 8 * f), atol=1e-4)

    def test_stats_closure_every_frame(self):
        backend, scene, schedule = self._setup()
        flow = uniform_flow((64, 64), 3.5, -1.25)
        closures = []

        def on_stats(f, recorded, matched):
            closures.append((recorded, matched))

        generate_liquid(backend, scene, schedule, flow, frames=4,
                        options=LiquidOptions(inject_strength=0.05), on_stats=on_stats)
        assert len(closures) == 4
        for recorded, matched in closures:
            assert np.allclose(matched.mean, recorded.mean, atol=1e-6)
            assert np.allclose(matched.std, recorded.std, atol=1e-6)

    def test_low_switch_warns(self):
        backend, scene, schedule = self._setup(switch=0.3)
        with pytest.warns(RuntimeWarning, match="switch"):
            generate_liquid(backend, scene, schedule, FlowField.zero((64, 64)), frames=1)

    def test_prefix_cached_once(self):
        backend, scene, schedule = self._setup()
        generate_liquid(backend, scene, schedule, FlowField.zero((64, 64)), frames=5)
        assert backend.denoise_segments.count((10, schedule.switch_step)) == 1

    def test_image_side_injection_changes_output_deterministically(self):
        backend, scene, schedule = self._setup()
        flow = FlowField.zero((64, 64))
        plain = generate_liquid(backend, scene, schedule, flow, frames=1)
        opts = LiquidOptions(inject_strength=0.2, inject_site="image")
        a = generate_liquid(backend, scene, schedule, flow, frames=1, options=opts)
        b = generate_liquid(backend, scene, schedule, flow, frames=1, options=opts)
        assert np.array_equal(a[0].data, b[0].data)
        assert not np.array_equal(a[0].data, plain[0].data)

    def test_kurtosis_stage_runs_after_matching(self):
        backend, scene, schedule = self._setup()
        opts = LiquidOptions(kurtosis_enabled=True, kurtosis_delta=1.0)
        plain = generate_liquid(backend, scene, schedule, FlowField.zero((64, 64)), frames=1)
        with_k = generate_liquid(backend, scene, schedule, FlowField.zero((64, 64)),
                                 frames=1, options=opts)
        # delta=1 kurtosis stage is the identity
        assert np.allclose(with_k[0].data, plain[0].data, atol=1e-5)


def motion_compensated_residual(frames, dx_per_frame):
    comp = [np.roll(f.data, -dx_per_frame * i, axis=1) for i, f in enumerate(frames)]
    return float(np.mean([np.abs(comp[i] - comp[i - 1]).mean() for i in range(1, len(comp))]))


class TestImageToVideo:
    def test_low_strength_zero_flow_returns_source(self):
        backend = make_mock((8, 8), steps=10)
        src = block_image(3, (8, 8))
        flow = FlowField.zero((64, 64))
        frames = image_to_video(backend, src, flow, DenoiseSchedule(10, 0.7),
                                strength=0.01, frames=2, seed=4)
        assert np.allclose(frames[0].data, src.data, atol=1e-4)

    def test_zero_flow_nonzero_strength_frames_bit_identical(self):
        backend = make_mock((8, 8), steps=10)
        src = block_image(4, (8, 8))
        frames = image_to_video(backend, src, FlowField.zero((64, 64)),
                                DenoiseSchedule(10, 0.7), strength=0.5, frames=3, seed=4)
        assert np.array_equal(frames[1].data, frames[0].data)
        assert np.array_equal(frames[2].data, frames[0].data)

    def test_tracked_noise_beats_frozen(self):
        backend = make_mock((8, 8), steps=10)
        src = block_image(5, (8, 8))
        flow = uniform_flow((64, 64), 8.0)
        schedule = DenoiseSchedule(10, 0.7)
        tracked = image_to_video(backend, src, flow, schedule, strength=0.6,
                                 frames=3, seed=6, track_noise=True)
        frozen = image_to_video(backend, src, flow, schedule, strength=0.6,
                                frames=3, seed=6, track_noise=False)
        r_tracked = motion_compensated_residual(tracked, 8)
        r_frozen = motion_compensated_residual(frozen, 8)
        assert r_tracked < r_frozen

    def test_strength_step_mapping(self):
        sched = DenoiseSchedule(30, 0.7)
        assert strength_to_step(1.0, sched) == 30
        assert strength_to_step(0.5, sched) == 15
        assert strength_to_step(0.01, sched) == 0
        with pytest.raises(ValueError):
            strength_to_step(0.0, sched)
        with pytest.raises(ValueError):
            strength_to_step(1.5, sched)


class TestAnimateLayers:
    def test_single_opaque_layer_equals_image_to_video(self):
        backend_a = make_mock((8, 8), steps=10)
        backend_b = make_mock((8, 8), steps=10)
        src = block_image(7, (8, 8))
        flow = uniform_flow((64, 64), 8.0)
        schedule = DenoiseSchedule(10, 0.7)
        layer = LayerItem(image=src, alpha=np.ones((64, 64), np.float32), flow=flow, seed=3)
        via_layers = animate_layers(backend_a, [layer], schedule, strength=0.5, frames=3)
        via_i2v = image_to_video(backend_b, src, flow, schedule, strength=0.5,
                                 frames=3, seed=3)
        for a, b in zip(via_layers, via_i2v):
            assert np.array_equal(a.data, b.data)

    def test_transparent_top_layer_equals_bottom_only(self):
        backend_a = make_mock((8, 8), steps=10)
        backend_b = make_mock((8, 8), steps=10)
        bottom = LayerItem(image=block_image(8, (8, 8)), alpha=np.ones((64, 64), np.float32),
                           flow=FlowField.zero((64, 64)), seed=1)
        top = LayerItem(image=block_image(9, (8, 8)), alpha=np.zeros((64, 64), np.float32),
                        flow=uniform_flow((64, 64), 8.0), seed=2)
        schedule = DenoiseSchedule(10, 0.7)
        both = animate_layers(backend_a, [bottom, top], schedule, strength=0.5, frames=2)
        only = animate_layers(backend_b, [bottom], schedule, strength=0.5, frames=2)
        for a, b in zip(both, only):
            assert np.array_equal(a.data, b.data)

    def test_occluded_pixels_reemerge(self):
        # A full-height opaque strip sweeps over the probe region and moves on;
        # compare pre/post-occlusion frames in the probe region.
        backend = make_mock((8, 24), steps=3)
        schedule = DenoiseSchedule(3, 0.7)
        bg = LayerItem(image=block_image(10, (8, 24)),
                       alpha=np.ones((64, 192), np.float32),
                       flow=FlowField.zero((64, 192)), seed=4)
        strip_alpha = np.zeros((64, 192), np.float32)
        strip_alpha[:, :24] = 1.0
        strip = LayerItem(image=block_image(11, (8, 24)), alpha=strip_alpha,
                          flow=uniform_flow((64, 192), 16.0), seed=5)
        frames = animate_layers(backend, [bg, strip], schedule, strength=0.7, frames=8)
        probe = (slice(None), slice(64, 72))
        # strip covers the probe columns around frames 3-4, is away at 0 and 7
        mid = np.abs(frames[4].data[probe] - frames[0].data[probe]).max()
        assert mid > 1.0
        assert np.allclose(frames[7].data[probe], frames[0].data[probe], atol=1e-6)

    def test_alpha_shape_mismatch(self):
        backend = make_mock((8, 8), steps=10)
        layer = LayerItem(image=block_image(12, (8, 8)), alpha=np.ones((32, 32), np.float32),
                          flow=FlowField.zero((64, 64)), seed=0)
        with pytest.raises(InvalidShapeError):
            animate_layers(backend, [layer], DenoiseSchedule(10, 0.7), 0.5, 1)


class TestCompositeSeeds:
    def test_full_mask_p0_is_pure_fg(self):
        backend = make_mock((8, 8), steps=10)
        schedule = DenoiseSchedule(10, 0.7)
        scene = SceneSpec(prompt="obj", seed=0)
        out = composite_seeds(backend, fg_seed=11, bg_seed=22,
                              mask=np.ones((8, 8), bool), combine_fraction=0.0,
                              scene=scene, schedule=schedule)
        cond = backend.prepare_conditioning("obj", None)
        fg = sample_noise(SeededNoiseSpec(11, (4, 8, 8)))
        pure = backend.decode(backend.denoise(fg, 10, 0, cond))
        assert np.array_equal(out.data, pure.data)

    def test_empty_mask_p0_is_pure_bg(self):
        backend = make_mock((8, 8), steps=10)
        schedule = DenoiseSchedule(10, 0.7)
        scene = SceneSpec(prompt="obj", seed=0)
        out = composite_seeds(backend, fg_seed=11, bg_seed=22,
                              mask=np.zeros((8, 8), bool), combine_fraction=0.0,
                              scene=scene, schedule=schedule)
        cond = backend.prepare_conditioning("obj", None)
        bg = sample_noise(SeededNoiseSpec(22, (4, 8, 8)))
        pure = backend.decode(backend.denoise(bg, 10, 0, cond))
        assert np.array_equal(out.data, pure.data)

    def test_mask_interior_matches_fg_beyond_kernel_radius(self):
        backend = make_mock((32, 32), steps=10)
        schedule = DenoiseSchedule(10, 0.7)
        scene = SceneSpec(prompt="x", seed=0)
        mask = np.zeros((32, 32), bool)
        mask[4:28, 4:28] = True
        p = 0.4  # combine at step 6 -> 6 suffix steps -> radius 6 latent px
        out = composite_seeds(backend, 5, 6, mask, p, scene, schedule)
        cond = backend.prepare_conditioning("x", None)
        fg = sample_noise(SeededNoiseSpec(5, (4, 32, 32)))
        pure_fg = backend.decode(backend.denoise(fg, 10, 0, cond))
        interior = (slice(11 * 8, 21 * 8), slice(11 * 8, 21 * 8))
        assert np.allclose(out.data[interior], pure_fg.data[interior], atol=1e-6)
        # and the composite is not just fg everywhere
        assert np.abs(out.data - pure_fg.data).max() > 1.0

    def test_mask_shape_mismatch(self):
        backend = make_mock((8, 8), steps=10)
        with pytest.raises(InvalidShapeError):
            composite_seeds(backend, 1, 2, np.ones((4, 4), bool), 0.5,
                            SceneSpec(), DenoiseSchedule(10, 0.7))


class TestVid2Vid:
    def _static_frames(self, n=3, seed=13, hw=(8, 8)):
        return [block_image(seed, hw)] * n

    def test_zero_flows_identical_outputs(self):
        backend = make_mock((8, 8), steps=10)
        frames = self._static_frames()
        flows = [np.zeros((64, 64, 2))] * 2
        out = vid2vid_tracked(backend, frames, flows, strength=0.5, seed=1,
                              schedule=DenoiseSchedule(10, 0.7))
        assert np.array_equal(out[1].data, out[0].data)
        assert np.array_equal(out[2].data, out[0].data)

    def test_strength_step_zero_returns_inputs(self):
        backend = make_mock((8, 8), steps=10)
        frames = self._static_frames()
        flows = [np.zeros((64, 64, 2))] * 2
        out = vid2vid_tracked(backend, frames, flows, strength=0.01, seed=1,
                              schedule=DenoiseSchedule(10, 0.7))
        for got, src in zip(out, frames):
            assert np.allclose(got.data, src.data, atol=1e-4)

    def test_tracked_beats_frozen_under_uniform_motion(self):
        backend = make_mock((8, 8), steps=10)
        frames = self._static_frames(4)
        disp = np.zeros((64, 64, 2))
        disp[..., 0] = 8.0
        flows = [disp] * 3
        schedule = DenoiseSchedule(10, 0.7)
        tracked = vid2vid_tracked(backend, frames, flows, 0.8, 7, schedule,
                                  track_noise=True)
        frozen = vid2vid_tracked(backend, frames, flows, 0.8, 7, schedule,
                                 track_noise=False)
        assert motion_compensated_residual(tracked, 8) < motion_compensated_residual(frozen, 8)

    def test_flow_count_mismatch(self):
        backend = make_mock((8, 8), steps=10)
        with pytest.raises(InvalidShapeError):
            vid2vid_tracked(backend, self._static_frames(3), [np.zeros((64, 64, 2))],
                            0.5, 0, DenoiseSchedule(10, 0.7))


class TestSeamlessUpscale:
    def _canvas(self, seed=21, hw=(16, 32)):
        return sample_noise(SeededNoiseSpec(seed, (4, *hw)))

    def test_identical_windows_identical_outputs(self):
        backend = make_mock((16, 16), steps=4)
        outs = seamless_upscale(backend, self._canvas(), [(64, 0), (64, 0)],
                                SceneSpec(prompt="xray"), DenoiseSchedule(4, 0.5))
        assert np.array_equal(outs[0].data, outs[1].data)

    def test_half_overlap_agrees_in_interior(self):
        backend = make_mock((16, 32), steps=4)
        canvas = self._canvas(22, (32, 64))
        schedule = DenoiseSchedule(4, 0.5)
        scene = SceneSpec(prompt="xray")
        a, b = seamless_upscale(backend, canvas, [(0, 0), (128, 0)], scene, schedule)
        # overlap: canvas latent cols 16..31; safe interior needs > 4 latent
        # px from every window border in both windows
        ca = slice((16 + 5) * 8, (32 - 5) * 8)
        cb = slice(5 * 8, (16 - 5) * 8)
        rows = slice(5 * 8, (16 - 5) * 8)
        assert np.allclose(a.data[rows, ca], b.data[rows, cb], atol=1e-6)
        stamped_a, stamped_b = seamless_upscale(backend, canvas, [(0, 0), (128, 0)],
                                                scene, schedule, mode="stamped")
        diff = np.abs(stamped_a.data[rows, ca] - stamped_b.data[rows, cb]).mean()
        assert diff > 0.1

    def test_window_wraps_into_tiled_canvas(self):
        backend = make_mock((16, 16), steps=3)
        canvas = self._canvas(23, (16, 16))
        schedule = DenoiseSchedule(3, 0.5)
        edge, start = seamless_upscale(backend, canvas, [(128, 0), (0, 0)],
                                       SceneSpec(), schedule)
        # offset of one full tile wraps to the same crop
        assert np.array_equal(edge.data, start.data)

    def test_misaligned_offset_rejected(self):
        backend = make_mock((16, 16), steps=3)
        with pytest.raises(AlignmentError):
            seamless_upscale(backend, self._canvas(), [(3, 0)], SceneSpec(),
                             DenoiseSchedule(3, 0.5))


class _FlakyTransportBackend(MockBackend):
    """Raises a transport error on the nth decode call."""

    def __init__(self, config, fail_on_decode):
        super().__init__(config)
        self._fail_on = fail_on_decode
        self._decodes = 0

    def _decode(self, latent):
        self._decodes += 1
        if self._decodes == self._fail_on:
            raise TransportError("connection reset")
        return super()._decode(latent)


def test_transport_failures_carry_frame_index():
    backend = _FlakyTransportBackend(
        MockConfig(latent_shape=(4, 8, 8), total_steps=10), fail_on_decode=3
    )
    transforms = [CrystalFrameTransform.identity()] + [
        CrystalFrameTransform(shift=LatticeShift(dx=f)) for f in range(1, 4)
    ]
    with pytest.raises(TransportError, match="frame 2"):
        generate_crystal(backend, SceneSpec(seed=1), DenoiseSchedule(10, 0.7), transforms)


class TestPipelineDeterminism:
    def test_identical_runs_bit_identical(self):
        def run():
            backend = make_mock((8, 8), steps=10)
            return generate_crystal(
                backend, SceneSpec(prompt="p", seed=3), DenoiseSchedule(10, 0.7),
                [CrystalFrameTransform.identity(),
                 CrystalFrameTransform(shift=LatticeShift(dx=1, dy=1))],
            )

        first = run()
        second = run()
        for a, b in zip(first, second):
            assert np.array_equal(a.data, b.data)
