"""The generation loops: crystal pan/dolly with recrystallization, liquid
noise, image-to-video, layered animation, seed compositing, video-to-video
noise tracking, and seamless tiled upscaling.

All loops share one structural idea: run the early denoising steps once with
the base noise and conditioning (that pass fixes the large-scale layout),
then branch per frame at the switch step with transformed noise/conditioning
to regenerate fine detail in the new position.  The early segment is cached
and reused, which is both the speed win and an accounting invariant the
tests assert.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .backends import Backend, ConditioningHandle
from .core import (
    ImageField,
    LatentField,
    SeededNoiseSpec,
    measure_stats,
    mix_seed,
    round_half_away,
    sample_noise,
)
from .crystal import (
    LatticeShift,
    MosaicPiece,
    RegionMosaic,
    RowShiftProfile,
    glide,
    mosaic,
    roll,
    transform_conditioning,
)
from .errors import AlignmentError, DeterminismError, InvalidShapeError, TransportError
from .liquid import (
    FlowField,
    KurtosisSpec,
    VarianceReductionSpec,
    adjust_kurtosis,
    displacement_at,
    downscale_displacement,
    inject_noise,
    match_stats,
    reduce_variance,
    warp_array,
    warp_image,
    warp_latent,
)

# Salt for deriving per-frame injection sub-seeds from the scene seed.
_INJECT_SALT = 7001


class _frame_scope:
    """Annotate backend transport failures with the frame they hit."""

    def __init__(self, index: int, label: str = "frame"):
        self.index = index
        self.label = label

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, TransportError):
            raise type(exc)(f"{self.label} {self.index}: {exc}") from exc
        return False


@dataclass(frozen=True)
class DenoiseSchedule:
    """Total denoising steps plus the switch fraction.

    Steps count down from ``total_steps`` to 0; the switch step is
    ``round(switch_fraction * total_steps)`` (halves away from zero).
    """

    total_steps: int = 30
    switch_fraction: float = 0.7

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.switch_fraction <= 1.0:
            raise ValueError(
                f"switch_fraction must be in [0, 1], got {self.switch_fraction}"
            )

    @property
    def switch_step(self) -> int:
        return int(round_half_away(self.switch_fraction * self.total_steps))

    @property
    def timesteps(self) -> tuple[int, ...]:
        return tuple(range(self.total_steps, -1, -1))


@dataclass(frozen=True)
class SceneSpec:
    """Prompt, seed, and optional conditioning map shared by a generation."""

    prompt: str = ""
    seed: int = 0
    segmap: ImageField | None = None


@dataclass(frozen=True)
class CrystalFrameTransform:
    """Per-frame crystal transform bundle, applied as shift, then glide, then
    mosaic (mosaic pieces copy from the *untransformed* latent so occluders
    keep their original noise).

    ``reservoir``/``segmap_reservoir`` supply fill values for non-wrapping
    shifts; without them a non-wrapping transform raises.
    """

    shift: LatticeShift | None = None
    profile: RowShiftProfile | None = None
    pieces: RegionMosaic | None = None
    reservoir: LatentField | None = None
    segmap_reservoir: ImageField | None = None

    @classmethod
    def identity(cls) -> "CrystalFrameTransform":
        return cls()

    @property
    def is_identity(self) -> bool:
        return self.shift is None and self.profile is None and self.pieces is None

    def apply_to_latent(self, x: LatentField) -> LatentField:
        out = x
        if self.shift is not None:
            out = roll(out, self.shift, reservoir=self.reservoir)
        if self.profile is not None:
            out = glide(out, self.profile, reservoir=self.reservoir)
        if self.pieces is not None:
            out = mosaic(out, x, self.pieces)
        return out

    def apply_to_segmap(self, segmap: ImageField, scale: int) -> ImageField:
        out = segmap
        if self.shift is not None:
            out = transform_conditioning(out, self.shift, scale, self.segmap_reservoir)
        if self.profile is not None:
            out = transform_conditioning(out, self.profile, scale, self.segmap_reservoir)
        if self.pieces is not None:
            out = transform_conditioning(out, self.pieces, scale, self.segmap_reservoir)
        return out


@dataclass(frozen=True)
class LayerItem:
    """One animation layer: image, alpha mask, its own flow and noise seed."""

    image: ImageField
    alpha: np.ndarray
    flow: FlowField
    seed: int = 0


@dataclass(frozen=True)
class LiquidOptions:
    """Artifact-treatment knobs for :func:`generate_liquid`."""

    beta: float = 0.5
    floor: float = 0.7
    kurtosis_delta: float = 1.0
    kurtosis_enabled: bool = False
    inject_strength: float = 0.0
    inject_site: str = "latent"  # "latent" or "image"

    def __post_init__(self) -> None:
        if self.inject_site not in ("latent", "image"):
            raise ValueError(f"inject_site must be 'latent' or 'image', got {self.inject_site!r}")


def _require_deterministic(backend: Backend, schedule: DenoiseSchedule,
                           cond: ConditioningHandle, probe: LatentField) -> None:
    """Refuse stochastic backends: check the capability flag, then run one
    single-step denoise twice and demand bit equality.  (A full double prefix
    would defeat the prefix-once accounting, so the probe is one step.)"""
    caps = backend.capabilities()
    if not caps.deterministic:
        raise DeterminismError("backend declares itself non-deterministic")
    n = schedule.total_steps
    first = backend.denoise(probe, n, n - 1, cond)
    second = backend.denoise(probe, n, n - 1, cond)
    if not np.array_equal(first.data, second.data):
        raise DeterminismError("two identical denoise calls disagreed")


def strength_to_step(strength: float, schedule: DenoiseSchedule) -> int:
    """Map an img2img-style strength in (0, 1] to a start step."""
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength must be in (0, 1], got {strength}")
    return int(round_half_away(strength * schedule.total_steps))


def _latent_grid(backend: Backend, image: ImageField) -> tuple[int, int, int]:
    caps = backend.capabilities()
    s = caps.scale_factor
    if image.height % s or image.width % s:
        raise InvalidShapeError(
            f"image {image.height}x{image.width} is not a multiple of scale {s}"
        )
    return (caps.latent_shape[0], image.height // s, image.width // s)


def generate_crystal(backend: Backend, scene: SceneSpec, schedule: DenoiseSchedule,
                     transforms, latent_sink=None) -> list[ImageField]:
    """Crystal generation with recrystallization.

    The base noise is denoised once from the top of the schedule down to the
    switch step; each frame then applies its transform to that cached,
    partially denoised latent (and to the conditioning map), finishes
    denoising, and decodes.  Frame 0's transform must be the identity.
    """
    transforms = list(transforms)
    if not transforms:
        raise ValueError("need at least one frame transform")
    if not transforms[0].is_identity:
        raise ValueError("frame 0 transform must be the identity")
    caps = backend.capabilities()
    noise = sample_noise(SeededNoiseSpec(scene.seed, caps.latent_shape))
    cond0 = backend.prepare_conditioning(scene.prompt, scene.segmap)
    _require_deterministic(backend, schedule, cond0, noise)

    switch = schedule.switch_step
    cached = backend.denoise(noise, schedule.total_steps, switch, cond0)

    frames: list[ImageField] = []
    for f, transform in enumerate(transforms):
        backend.note(f"frame:{f}")
        with _frame_scope(f):
            latent = transform.apply_to_latent(cached)
            if transform.is_identity or scene.segmap is None:
                cond = cond0
            else:
                moved = transform.apply_to_segmap(scene.segmap, caps.scale_factor)
                cond = backend.prepare_conditioning(scene.prompt, moved)
            final = backend.denoise(latent, switch, 0, cond)
            if latent_sink is not None:
                latent_sink(f, final)
            frames.append(backend.decode(final))
    return frames


def generate_liquid(backend: Backend, scene: SceneSpec, schedule: DenoiseSchedule,
                    flow: FlowField, frames: int, options: LiquidOptions = LiquidOptions(),
                    on_stats=None, latent_sink=None) -> list[ImageField]:
    """Liquid-noise generation: decode the cached semi-diffused latent,
    deform it freely in image space, re-encode, and statistically re-match.

    Per frame: reduce variance (recording the original channel stats),
    decode, warp by the flow at this frame, optionally inject noise
    (image- or latent-side), encode, match the recorded stats (std before
    mean), optionally adjust kurtosis, finish denoising, decode.
    """
    if frames < 1:
        raise ValueError(f"need at least one frame, got {frames}")
    if schedule.switch_fraction < 0.5:
        warnings.warn(
            f"liquid noise works best with high switch fractions; got "
            f"{schedule.switch_fraction}",
            RuntimeWarning,
            stacklevel=2,
        )
    caps = backend.capabilities()
    noise = sample_noise(SeededNoiseSpec(scene.seed, caps.latent_shape))
    cond = backend.prepare_conditioning(scene.prompt, scene.segmap)
    _require_deterministic(backend, schedule, cond, noise)

    switch = schedule.switch_step
    cached = backend.denoise(noise, schedule.total_steps, switch, cond)
    vr = VarianceReductionSpec(
        switch_fraction=schedule.switch_fraction, beta=options.beta, floor=options.floor
    )

    out: list[ImageField] = []
    for f in range(frames):
        backend.note(f"frame:{f}")
        with _frame_scope(f):
            reduced, stats = reduce_variance(cached, vr)
            img = backend.decode(reduced)
            disp = displacement_at(flow, f)
            img = warp_image(img, disp, flow.wrap_x, flow.wrap_y)
            sub_seed = mix_seed(scene.seed, _INJECT_SALT, f)
            if options.inject_strength > 0 and options.inject_site == "image":
                img = inject_noise(img, sub_seed, options.inject_strength)
            latent = backend.encode(img)
            if options.inject_strength > 0 and options.inject_site == "latent":
                latent = inject_noise(latent, sub_seed, options.inject_strength)
            latent = match_stats(latent, stats)
            if on_stats is not None:
                on_stats(f, stats, measure_stats(latent))
            if options.kurtosis_enabled:
                latent = adjust_kurtosis(latent, KurtosisSpec(options.kurtosis_delta, True))
            final = backend.denoise(latent, switch, 0, cond)
            if latent_sink is not None:
                latent_sink(f, final)
            out.append(backend.decode(final))
    return out


def image_to_video(backend: Backend, src: ImageField, flow: FlowField,
                   schedule: DenoiseSchedule, strength: float, frames: int,
                   seed: int = 0, prompt: str = "", track_noise: bool = True,
                   latent_sink=None) -> list[ImageField]:
    """Animate a still image: warp the source and a persistent noise field by
    the same flow, noise the encoded frame at the strength step, denoise.

    The noise field is warped (tracked) along with the image, never
    resampled, which keeps generated detail attached to the moving content.
    ``track_noise=False`` freezes the noise in place for comparison.
    """
    if frames < 1:
        raise ValueError(f"need at least one frame, got {frames}")
    step = strength_to_step(strength, schedule)
    noise0 = sample_noise(SeededNoiseSpec(seed, _latent_grid(backend, src)))
    cond = backend.prepare_conditioning(prompt, None)
    _require_deterministic(backend, schedule, cond, noise0)
    scale = backend.capabilities().scale_factor

    out: list[ImageField] = []
    for f in range(frames):
        backend.note(f"frame:{f}")
        with _frame_scope(f):
            disp = displacement_at(flow, f)
            img = warp_image(src, disp, flow.wrap_x, flow.wrap_y)
            if track_noise:
                noise = warp_latent(noise0, downscale_displacement(disp, scale),
                                    flow.wrap_x, flow.wrap_y)
            else:
                noise = noise0
            latent = backend.add_noise(backend.encode(img), noise, step)
            final = backend.denoise(latent, step, 0, cond)
            if latent_sink is not None:
                latent_sink(f, final)
            out.append(backend.decode(final))
    return out


def _box_mean_2d(a: np.ndarray, scale: int) -> np.ndarray:
    h, w = a.shape
    return a.reshape(h // scale, scale, w // scale, scale).mean(axis=(1, 3))


def animate_layers(backend: Backend, layers, schedule: DenoiseSchedule,
                   strength: float, frames: int, prompt: str = "",
                   latent_sink=None) -> list[ImageField]:
    """Layered animation: per frame, warp each layer's image, alpha, and
    noise by its own flow, alpha-composite back-to-front (images and noise
    alike), then proceed as image-to-video on the composite."""
    layers = list(layers)
    if not layers:
        raise ValueError("need at least one layer")
    base_shape = layers[0].image.shape
    scale = backend.capabilities().scale_factor
    channels = backend.capabilities().latent_shape[0]
    alphas = []
    for i, layer in enumerate(layers):
        if layer.image.shape != base_shape:
            raise InvalidShapeError(f"layer {i} image shape {layer.image.shape} != {base_shape}")
        a = np.asarray(layer.alpha, dtype=np.float32)
        if a.shape != base_shape[:2]:
            raise InvalidShapeError(
                f"layer {i} alpha shape {a.shape} != image plane {base_shape[:2]}"
            )
        if a.min() < 0 or a.max() > 1:
            raise ValueError(f"layer {i} alpha values outside [0, 1]")
        alphas.append(a)
    step = strength_to_step(strength, schedule)
    grid = _latent_grid(backend, layers[0].image)
    noises = [sample_noise(SeededNoiseSpec(layer.seed, grid)) for layer in layers]
    cond = backend.prepare_conditioning(prompt, None)
    _require_deterministic(backend, schedule, cond, noises[0])

    out: list[ImageField] = []
    for f in range(frames):
        backend.note(f"frame:{f}")
        with _frame_scope(f):
            canvas = np.zeros(base_shape, dtype=np.float32)
            canvas_noise = np.zeros((channels,) + (grid[1], grid[2]), dtype=np.float32)
            for layer, alpha, noise in zip(layers, alphas, noises):
                disp = displacement_at(layer.flow, f)
                img_w = warp_image(layer.image, disp, layer.flow.wrap_x, layer.flow.wrap_y)
                alpha_w = warp_array(alpha, disp, layer.flow.wrap_x, layer.flow.wrap_y)
                noise_w = warp_latent(noise, downscale_displacement(disp, scale),
                                      layer.flow.wrap_x, layer.flow.wrap_y)
                canvas = alpha_w[:, :, None] * img_w.data + (1.0 - alpha_w[:, :, None]) * canvas
                alpha_lat = _box_mean_2d(alpha_w, scale).astype(np.float32)
                canvas_noise = alpha_lat * noise_w.data + (1.0 - alpha_lat) * canvas_noise
            latent = backend.add_noise(backend.encode(ImageField(canvas)),
                                       LatentField(canvas_noise), step)
            final = backend.denoise(latent, step, 0, cond)
            if latent_sink is not None:
                latent_sink(f, final)
            out.append(backend.decode(final))
    return out


def composite_seeds(backend: Backend, fg_seed: int, bg_seed: int, mask: np.ndarray,
                    combine_fraction: float, scene: SceneSpec,
                    schedule: DenoiseSchedule, latent_sink=None) -> ImageField:
    """Copy masked noise (or partially denoised latent) from one seed onto
    another and finish denoising the composite.

    ``combine_fraction`` is how far both latents are diffused before they are
    combined: 0 composites raw noise (object permanence with relit subject);
    higher fractions preserve more of the foreground's own lighting.
    """
    if not 0.0 <= combine_fraction <= 1.0:
        raise ValueError(f"combine_fraction must be in [0, 1], got {combine_fraction}")
    caps = backend.capabilities()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != caps.latent_shape[1:]:
        raise InvalidShapeError(
            f"mask shape {mask.shape} != latent grid {caps.latent_shape[1:]}"
        )
    n = schedule.total_steps
    combine_step = int(round_half_away((1.0 - combine_fraction) * n))
    cond = backend.prepare_conditioning(scene.prompt, scene.segmap)
    fg = sample_noise(SeededNoiseSpec(fg_seed, caps.latent_shape))
    bg = sample_noise(SeededNoiseSpec(bg_seed, caps.latent_shape))
    _require_deterministic(backend, schedule, cond, fg)
    fg_mid = backend.denoise(fg, n, combine_step, cond)
    bg_mid = backend.denoise(bg, n, combine_step, cond)
    merged = LatentField(np.where(mask[None, :, :], fg_mid.data, bg_mid.data))
    final = backend.denoise(merged, combine_step, 0, cond)
    if latent_sink is not None:
        latent_sink(0, final)
    return backend.decode(final)


def vid2vid_tracked(backend: Backend, frames, flows, strength: float, seed: int,
                    schedule: DenoiseSchedule, prompt: str = "",
                    track_noise: bool = True, latent_sink=None) -> list[ImageField]:
    """Video restyling with tracked noise.

    One persistent noise field is warped by each frame's dense displacement
    (cumulative tracking) so the added noise stays attached to moving
    objects; each input frame is encoded, noised at the strength step with
    the tracked field, denoised, and decoded.  Flows arrive as dense
    image-space displacement arrays, one per frame transition.
    """
    frames = list(frames)
    flows = list(flows)
    if not frames:
        raise ValueError("no input frames")
    if len(flows) != len(frames) - 1:
        raise InvalidShapeError(
            f"need {len(frames) - 1} flows for {len(frames)} frames, got {len(flows)}"
        )
    step = strength_to_step(strength, schedule)
    scale = backend.capabilities().scale_factor
    noise = sample_noise(SeededNoiseSpec(seed, _latent_grid(backend, frames[0])))
    cond = backend.prepare_conditioning(prompt, None)
    _require_deterministic(backend, schedule, cond, noise)

    out: list[ImageField] = []
    for f, frame in enumerate(frames):
        backend.note(f"frame:{f}")
        with _frame_scope(f):
            if f > 0 and track_noise:
                disp = np.asarray(flows[f - 1], dtype=np.float64)
                noise = warp_latent(noise, downscale_displacement(disp, scale))
            latent = backend.add_noise(backend.encode(frame), noise, step)
            final = backend.denoise(latent, step, 0, cond)
            if latent_sink is not None:
                latent_sink(f, final)
            out.append(backend.decode(final))
    return out


def seamless_upscale(backend: Backend, canvas_noise: LatentField, windows,
                     scene: SceneSpec, schedule: DenoiseSchedule,
                     mode: str = "tiled", latent_sink=None) -> list[ImageField]:
    """Generate overlapping windows from one tiled background noise so the
    overlaps agree.

    Each window (image-px offset, must sit on the latent grid) crops its
    noise from the tiled canvas, so overlapping windows see identical noise
    where they overlap.  ``mode="stamped"`` reproduces the standard approach
    instead (every window reuses the canvas-origin crop), which is the
    configuration whose overlaps disagree.
    """
    if mode not in ("tiled", "stamped"):
        raise ValueError(f"mode must be 'tiled' or 'stamped', got {mode!r}")
    caps = backend.capabilities()
    c, h, w = caps.latent_shape
    scale = caps.scale_factor
    if canvas_noise.channels != c:
        raise InvalidShapeError(
            f"canvas has {canvas_noise.channels} channels, backend wants {c}"
        )
    cond = backend.prepare_conditioning(scene.prompt, scene.segmap)
    _require_deterministic(backend, schedule, cond,
                           LatentField(canvas_noise.data[:, :h, :w]))
    n = schedule.total_steps
    out: list[ImageField] = []
    for i, (off_x, off_y) in enumerate(windows):
        backend.note(f"window:{i}")
        if off_x % scale or off_y % scale:
            raise AlignmentError(
                f"window {i} offset ({off_x}, {off_y}) is not a multiple of "
                f"the latent scale {scale}"
            )
        with _frame_scope(i, "window"):
            if mode == "stamped":
                ly = lx = 0
            else:
                lx, ly = off_x // scale, off_y // scale
            rows = (np.arange(h) + ly) % canvas_noise.height
            cols = (np.arange(w) + lx) % canvas_noise.width
            crop = LatentField(canvas_noise.data[:, rows[:, None], cols[None, :]])
            final = backend.denoise(crop, n, 0, cond)
            if latent_sink is not None:
                latent_sink(i, final)
            out.append(backend.decode(final))
    return out
