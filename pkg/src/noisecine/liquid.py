"""Image-space noise manipulation: flow-map parsing, per-frame warping of
decoded semi-diffused images, variance reduction before decoding, and
statistical re-matching after re-encoding.

Flow encoding (fixed): hue = motion direction (0 = rightward, angle grows
toward +y which is downward in image coordinates), saturation = magnitude
fraction, value = period selector.  Pixels at or above the white threshold
move at constant velocity (infinite period); darker pixels sway sinusoidally
with a period interpolated across the configured range.  Fully desaturated
pixels do not move.

Warping is backward nearest-neighbor: the pixels carry noise, and any
blending would smear it into colored (non-white) noise, which is exactly
what these pipelines must avoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    ChannelStats,
    ImageField,
    LatentField,
    STD_EPSILON,
    VAE_SCALE,
    measure_stats,
    round_half_away,
)
from .errors import DegenerateChannelError, InvalidShapeError

DEFAULT_WHITE_THRESHOLD = 0.95


@dataclass(frozen=True)
class MotionPrimitive:
    """Motion of a single pixel: direction (radians), amplitude (image px),
    period (frames, ``math.inf`` = constant velocity), phase (radians)."""

    direction: float
    amplitude: float
    period: float = math.inf
    phase: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.amplitude) or self.amplitude < 0:
            raise ValueError(f"amplitude must be finite and >= 0, got {self.amplitude}")
        if not (self.period > 0):
            raise ValueError(f"period must be > 0 or inf, got {self.period}")


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel motion primitives stored as parallel (H, W) arrays.

    Constant-velocity pixels (period == inf) displace by
    ``t * amplitude * (cos d, sin d)``; periodic pixels by
    ``amplitude * sin(2*pi*t/period + phase) * (cos d, sin d)``.
    """

    direction: np.ndarray
    amplitude: np.ndarray
    period: np.ndarray
    phase: np.ndarray
    wrap_x: bool = True
    wrap_y: bool = True

    def __post_init__(self) -> None:
        arrays = {}
        shape = None
        for name in ("direction", "amplitude", "period", "phase"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 2:
                raise InvalidShapeError(f"FlowField.{name} must be 2-D, got {a.shape}")
            if shape is None:
                shape = a.shape
            elif a.shape != shape:
                raise InvalidShapeError("FlowField arrays must share one shape")
            a = np.ascontiguousarray(a)
            a.setflags(write=False)
            arrays[name] = a
        if not np.all(np.isfinite(arrays["amplitude"])) or np.any(arrays["amplitude"] < 0):
            raise ValueError("FlowField amplitudes must be finite and >= 0")
        if np.any(arrays["period"] <= 0):
            raise ValueError("FlowField periods must be > 0 (inf allowed)")
        for name, a in arrays.items():
            object.__setattr__(self, name, a)

    @property
    def shape(self) -> tuple[int, int]:
        return self.direction.shape

    @classmethod
    def uniform(cls, shape: tuple[int, int], primitive: MotionPrimitive,
                wrap_x: bool = True, wrap_y: bool = True) -> "FlowField":
        full = lambda v: np.full(shape, v, dtype=np.float64)
        return cls(
            direction=full(primitive.direction),
            amplitude=full(primitive.amplitude),
            period=full(primitive.period),
            phase=full(primitive.phase),
            wrap_x=wrap_x,
            wrap_y=wrap_y,
        )

    @classmethod
    def zero(cls, shape: tuple[int, int]) -> "FlowField":
        return cls.uniform(shape, MotionPrimitive(direction=0.0, amplitude=0.0))


@dataclass(frozen=True)
class VarianceReductionSpec:
    """Pre-decode contrast reduction; scale = max(floor, 1 - beta*(1 - s))."""

    switch_fraction: float
    beta: float = 0.5
    floor: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 <= self.switch_fraction <= 1.0:
            raise ValueError(f"switch_fraction must be in [0, 1], got {self.switch_fraction}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 < self.floor <= 1.0:
            raise ValueError(f"floor must be in (0, 1], got {self.floor}")

    @property
    def scale(self) -> float:
        return max(self.floor, 1.0 - self.beta * (1.0 - self.switch_fraction))


@dataclass(frozen=True)
class KurtosisSpec:
    """Tail-weight correction x -> sinh(delta * arcsinh(x)); delta=1 is the
    identity.  Off by default: the effect is small and delta is hard to pick,
    so pipelines skip it unless asked."""

    delta: float = 1.0
    enabled: bool = False

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")


# --- flow-map parsing -------------------------------------------------------


def _rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized RGB [0,1] -> (hue [0,1), saturation [0,1], value [0,1])."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.max(rgb, axis=-1)
    minc = np.min(rgb, axis=-1)
    delta = maxc - minc
    sat = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    # Hue by dominant channel; gray pixels (delta == 0) get hue 0.
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.zeros_like(maxc)
    rmax = (maxc == r) & (delta > 0)
    gmax = (maxc == g) & (delta > 0) & ~rmax
    bmax = (delta > 0) & ~rmax & ~gmax
    hue = np.where(rmax, ((g - b) / safe) % 6.0, hue)
    hue = np.where(gmax, (b - r) / safe + 2.0, hue)
    hue = np.where(bmax, (r - g) / safe + 4.0, hue)
    return hue / 6.0, sat, maxc


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def parse_flow_map(img: ImageField, max_velocity: float, max_amplitude: float,
                   period_range: tuple[float, float],
                   white_threshold: float = DEFAULT_WHITE_THRESHOLD,
                   wrap_x: bool = True, wrap_y: bool = True) -> FlowField:
    """Decode an RGB flow map into a :class:`FlowField`.

    Hue picks the direction, saturation the magnitude fraction, and value the
    period: bright pixels (value >= ``white_threshold``) move at constant
    velocity up to ``max_velocity`` px/frame, darker pixels sway with
    amplitude up to ``max_amplitude`` px and a period interpolated from
    ``period_range`` by the value channel.
    """
    if max_velocity <= 0 or max_amplitude <= 0:
        raise ValueError("max_velocity and max_amplitude must be positive")
    pmin, pmax = float(period_range[0]), float(period_range[1])
    if pmin <= 0 or pmax < pmin:
        raise ValueError(f"invalid period range ({pmin}, {pmax})")
    if not 0.0 < white_threshold <= 1.0:
        raise ValueError(f"white_threshold must be in (0, 1], got {white_threshold}")

    rgb = np.clip(img.data.astype(np.float64) / 255.0, 0.0, 1.0)
    hue, sat, val = _rgb_to_hsv(rgb)
    constant = val >= white_threshold
    direction = hue * (2.0 * math.pi)
    amplitude = np.where(constant, sat * max_velocity, sat * max_amplitude)
    period = np.where(constant, math.inf, pmin + val * (pmax - pmin))
    return FlowField(
        direction=direction,
        amplitude=amplitude,
        period=period,
        phase=np.zeros_like(direction),
        wrap_x=wrap_x,
        wrap_y=wrap_y,
    )


def render_flow_map(flow: FlowField, max_velocity: float, max_amplitude: float,
                    period_range: tuple[float, float]) -> ImageField:
    """Encode a :class:`FlowField` back into an 8-bit RGB flow map (the
    inverse of :func:`parse_flow_map`, up to 8-bit quantization).

    Finite-period pixels must map to a value below the white threshold, so
    their period fraction should stay under it; constant-velocity pixels
    render at full value.
    """
    pmin, pmax = float(period_range[0]), float(period_range[1])
    constant = np.isinf(flow.period)
    sat = np.where(constant, flow.amplitude / max_velocity, flow.amplitude / max_amplitude)
    if np.any(sat > 1.0 + 1e-9):
        raise ValueError("flow amplitudes exceed the encodable maxima")
    span = pmax - pmin
    frac = np.where(constant, 1.0, (flow.period - pmin) / span if span > 0 else 0.0)
    hue = (flow.direction / (2.0 * math.pi)) % 1.0
    rgb = _hsv_to_rgb(hue, np.clip(sat, 0.0, 1.0), np.clip(frac, 0.0, 1.0))
    return ImageField(np.rint(rgb * 255.0).astype(np.float32))


def displacement_at(flow: FlowField, t: float) -> np.ndarray:
    """Per-pixel (dx, dy) displacement at frame index ``t``, shape (H, W, 2).

    Exactly linear in ``t`` for constant-velocity pixels and exactly periodic
    for finite periods.
    """
    if t < 0:
        raise ValueError(f"frame index must be >= 0, got {t}")
    constant = np.isinf(flow.period)
    mag = np.where(
        constant,
        t * flow.amplitude,
        flow.amplitude * np.sin(2.0 * math.pi * t / flow.period + flow.phase),
    )
    dx = mag * np.cos(flow.direction)
    dy = mag * np.sin(flow.direction)
    return np.stack([dx, dy], axis=-1)


# --- warping ----------------------------------------------------------------


def _source_indices(shape_hw: tuple[int, int], disp: np.ndarray,
                    wrap_x: bool, wrap_y: bool):
    """Backward-warp gather indices plus the in-bounds mask (nearest sample,
    halves away from zero)."""
    H, W = shape_hw
    if disp.shape != (H, W, 2):
        raise InvalidShapeError(
            f"displacement shape {disp.shape} != expected {(H, W, 2)}"
        )
    ys, xs = np.mgrid[0:H, 0:W]
    sx = round_half_away(xs - disp[..., 0]).astype(np.int64)
    sy = round_half_away(ys - disp[..., 1]).astype(np.int64)
    valid = np.ones((H, W), dtype=bool)
    if wrap_x:
        sx %= W
    else:
        valid &= (sx >= 0) & (sx < W)
        sx = np.clip(sx, 0, W - 1)
    if wrap_y:
        sy %= H
    else:
        valid &= (sy >= 0) & (sy < H)
        sy = np.clip(sy, 0, H - 1)
    return sy, sx, valid


def warp_array(data: np.ndarray, disp: np.ndarray, wrap_x: bool = True,
               wrap_y: bool = True, channel_axis: int | None = None) -> np.ndarray:
    """Backward nearest-neighbor warp of an array whose spatial axes are
    (H, W) after removing ``channel_axis``.  Out-of-bounds samples (wrap off)
    keep the original value at that position."""
    if channel_axis is None:
        hw = data.shape
    elif channel_axis == 0:
        hw = data.shape[1:]
    else:
        hw = data.shape[:2]
    sy, sx, valid = _source_indices(hw, disp, wrap_x, wrap_y)
    if channel_axis is None:
        out = data[sy, sx]
        return np.where(valid, out, data)
    if channel_axis == 0:
        out = data[:, sy, sx]
        return np.where(valid[None, :, :], out, data)
    out = data[sy, sx, :]
    return np.where(valid[:, :, None], out, data)


def warp_image(img: ImageField, disp: np.ndarray, wrap_x: bool = True,
               wrap_y: bool = True) -> ImageField:
    """Warp an RGB image by a per-pixel displacement field (backward,
    nearest-neighbor; pixels carry noise, so no blending)."""
    return ImageField(warp_array(img.data, disp, wrap_x, wrap_y, channel_axis=2))


def warp_latent(x: LatentField, disp: np.ndarray, wrap_x: bool = True,
                wrap_y: bool = True) -> LatentField:
    """Warp a latent field by a latent-resolution displacement field; all
    channels move together."""
    return LatentField(warp_array(x.data, disp, wrap_x, wrap_y, channel_axis=0))


def downscale_displacement(disp: np.ndarray, scale: int = VAE_SCALE) -> np.ndarray:
    """Box-average an image-space displacement to the latent grid and convert
    px units by the same factor."""
    H, W, _ = disp.shape
    if H % scale or W % scale:
        raise InvalidShapeError(
            f"displacement {H}x{W} is not a multiple of scale {scale}"
        )
    blocks = disp.reshape(H // scale, scale, W // scale, scale, 2)
    return blocks.mean(axis=(1, 3)) / scale


# --- statistical corrections --------------------------------------------------


def reduce_variance(x: LatentField, spec: VarianceReductionSpec) -> tuple[LatentField, ChannelStats]:
    """Shrink each channel about its mean by ``spec.scale`` and return the
    pre-reduction stats so they can be re-imposed after re-encoding."""
    stats = measure_stats(x)
    scale = spec.scale
    mean = stats.mean[:, None, None]
    data = mean + scale * (x.data.astype(np.float64) - mean)
    return LatentField(data.astype(np.float32)), stats


def match_stats(x: LatentField, target: ChannelStats) -> LatentField:
    """Rescale each channel about its current mean so the std matches the
    target, then shift the mean. Std strictly before mean, or the pipeline's
    fixed-distribution assumption breaks downstream."""
    if target.channels != x.channels:
        raise InvalidShapeError(
            f"target has {target.channels} channels, field has {x.channels}"
        )
    cur = measure_stats(x)
    if np.any(cur.clamped) or np.any(cur.std <= STD_EPSILON):
        bad = np.nonzero(cur.clamped | (cur.std <= STD_EPSILON))[0].tolist()
        raise DegenerateChannelError(
            f"channel(s) {bad} have ~zero spread and cannot be rescaled"
        )
    data = x.data.astype(np.float64)
    cm = cur.mean[:, None, None]
    data = (data - cm) * (target.std / cur.std)[:, None, None] + cm
    data = data + (target.mean - cur.mean)[:, None, None]
    return LatentField(data.astype(np.float32))


def adjust_kurtosis(x: LatentField, spec: KurtosisSpec) -> LatentField:
    """Apply x -> sinh(delta * arcsinh(x)) elementwise.

    delta > 1 fattens the tails (raises excess kurtosis), delta < 1 thins
    them, delta = 1 is exactly the identity.
    """
    data = np.sinh(spec.delta * np.arcsinh(x.data.astype(np.float64)))
    return LatentField(data.astype(np.float32))


def inject_noise(field, seed: int, strength: float):
    """Add ``strength`` x fresh seeded standard-normal noise of matching shape.

    Accepts either a latent or an image field and returns the same kind.
    Deterministic in (seed, strength); strength 0 returns the input unchanged.
    """
    if strength < 0:
        raise ValueError(f"strength must be >= 0, got {strength}")
    if strength == 0:
        return field
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.standard_normal(field.data.shape, dtype=np.float32)
    out = field.data + np.float32(strength) * noise
    return type(field)(out)
