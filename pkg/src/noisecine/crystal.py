"""Lattice-confined noise transforms: integer translation with wrap,
discretized shear gliding, and masked mosaic pasting.

Every operation here moves existing values between lattice cells and never
interpolates; with wrap enabled each transform is an exact per-channel
permutation.  When wrap is disabled, vacated cells are filled from an
explicit caller-supplied reservoir field (fresh seeded noise); reflecting or
clamping would correlate neighbouring cells and break the i.i.d. structure
the transforms exist to preserve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ImageField, LatentField, VAE_SCALE, round_half_away
from .errors import BoundsError, InvalidShapeError, MissingReservoirError


@dataclass(frozen=True)
class LatticeShift:
    """Integer lattice translation; dx is +right, dy is +down (latent px)."""

    dx: int = 0
    dy: int = 0
    wrap_x: bool = True
    wrap_y: bool = True


@dataclass(frozen=True, eq=False)
class RowShiftProfile:
    """Per-row horizontal shift in latent pixels; one entry per latent row."""

    shifts: tuple[int, ...]
    wrap: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "shifts", tuple(int(s) for s in self.shifts))


@dataclass(frozen=True, eq=False)
class MosaicPiece:
    """Binary mask plus integer displacement; values under the mask are
    copied to the displaced positions."""

    mask: np.ndarray
    dx: int = 0
    dy: int = 0
    wrap: bool = True

    def __post_init__(self) -> None:
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise InvalidShapeError(f"mosaic mask must be 2-D, got shape {m.shape}")
        m = m.astype(bool)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)


@dataclass(frozen=True)
class RegionMosaic:
    """Ordered mosaic pieces; later pieces overwrite earlier ones, so
    occluders must come last."""

    pieces: tuple[MosaicPiece, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "pieces", tuple(self.pieces))


def _shift_axis(data: np.ndarray, shift: int, axis: int, wrap: bool,
                reservoir: np.ndarray | None, what: str) -> np.ndarray:
    if shift == 0:
        return data
    if wrap:
        return np.roll(data, shift, axis=axis)
    if reservoir is None:
        raise MissingReservoirError(
            f"{what}: wrap is off on axis {axis} but no reservoir field was supplied"
        )
    n = data.shape[axis]
    out = reservoir.copy()
    if abs(shift) >= n:
        return out
    src = [slice(None)] * data.ndim
    dst = [slice(None)] * data.ndim
    if shift > 0:
        src[axis] = slice(0, n - shift)
        dst[axis] = slice(shift, n)
    else:
        src[axis] = slice(-shift, n)
        dst[axis] = slice(0, n + shift)
    out[tuple(dst)] = data[tuple(src)]
    return out


def roll(x: LatentField, s: LatticeShift, reservoir: LatentField | None = None) -> LatentField:
    """Shift the whole lattice by integer amounts.

    With wrap on, the shift is cyclic and the output is an exact permutation
    of the input values.  With wrap off on an axis, cells shifted off the
    edge are discarded and vacated cells take the reservoir's values.
    """
    res = None
    if reservoir is not None:
        if reservoir.shape != x.shape:
            raise InvalidShapeError(
                f"reservoir shape {reservoir.shape} != field shape {x.shape}"
            )
        res = reservoir.data
    data = _shift_axis(x.data, s.dx, 2, s.wrap_x, res, "roll")
    data = _shift_axis(data, s.dy, 1, s.wrap_y, res, "roll")
    return LatentField(data)


def discretize_shear(horizon_row: int, near_shift: int, far_shift: int, H: int) -> RowShiftProfile:
    """Per-row shifts for a parallax shear: the bottom (near) rows glide fast,
    the horizon glides slow.

    Rows above ``horizon_row`` get ``far_shift``; rows from ``horizon_row``
    down to ``H-1`` interpolate linearly from ``far_shift`` to ``near_shift``
    and are rounded half-away-from-zero, so mirrored shears stay symmetric.
    """
    if H < 1:
        raise InvalidShapeError(f"H must be >= 1, got {H}")
    if not 0 <= horizon_row < H:
        raise IndexError(f"horizon_row {horizon_row} out of range [0, {H})")
    rows = np.arange(H, dtype=np.float64)
    span = (H - 1) - horizon_row
    if span == 0:
        ramp = np.full(H, float(near_shift))
    else:
        ramp = far_shift + (near_shift - far_shift) * (rows - horizon_row) / span
    shifts = round_half_away(ramp).astype(int)
    shifts[:horizon_row] = far_shift
    return RowShiftProfile(shifts=tuple(shifts.tolist()))


def _glide_rows(data: np.ndarray, shifts: np.ndarray, wrap: bool,
                reservoir: np.ndarray | None, row_axis: int, col_axis: int) -> np.ndarray:
    """Shift each row along col_axis by its own amount (vectorized gather)."""
    H = data.shape[row_axis]
    W = data.shape[col_axis]
    if wrap:
        cols = (np.arange(W)[None, :] - shifts[:, None]) % W
        idx = [slice(None)] * data.ndim
        take = np.moveaxis(data, (row_axis, col_axis), (0, 1))
        out = take[np.arange(H)[:, None], cols]
        return np.moveaxis(out, (0, 1), (row_axis, col_axis))
    if reservoir is None:
        raise MissingReservoirError("glide: wrap is off but no reservoir field was supplied")
    out = np.moveaxis(reservoir.copy(), (row_axis, col_axis), (0, 1))
    src = np.moveaxis(data, (row_axis, col_axis), (0, 1))
    for r, sh in enumerate(shifts):
        sh = int(sh)
        if abs(sh) >= W:
            continue
        if sh >= 0:
            out[r, sh:W] = src[r, 0 : W - sh]
        else:
            out[r, 0 : W + sh] = src[r, -sh:W]
    return np.moveaxis(out, (0, 1), (row_axis, col_axis))


def glide(x: LatentField, p: RowShiftProfile, reservoir: LatentField | None = None) -> LatentField:
    """Shift each latent row horizontally by its own integer amount.

    All channels move together; with wrap on each row is a permutation of
    the original row.
    """
    if len(p.shifts) != x.height:
        raise InvalidShapeError(
            f"profile has {len(p.shifts)} rows, field has {x.height}"
        )
    res = None
    if reservoir is not None:
        if reservoir.shape != x.shape:
            raise InvalidShapeError(
                f"reservoir shape {reservoir.shape} != field shape {x.shape}"
            )
        res = reservoir.data
    shifts = np.asarray(p.shifts, dtype=int)
    return LatentField(_glide_rows(x.data, shifts, p.wrap, res, 1, 2))


def _paste_piece(out: np.ndarray, src: np.ndarray, piece: MosaicPiece, index: int,
                 grid_hw: tuple[int, int], channel_axis: int) -> None:
    H, W = grid_hw
    if piece.mask.shape != (H, W):
        raise InvalidShapeError(
            f"mosaic piece {index}: mask shape {piece.mask.shape} != grid {(H, W)}"
        )
    ys, xs = np.nonzero(piece.mask)
    if ys.size == 0:
        return
    dy_, dx_ = int(piece.dy), int(piece.dx)
    dst_y = ys + dy_
    dst_x = xs + dx_
    if piece.wrap:
        dst_y %= H
        dst_x %= W
    elif dst_y.min() < 0 or dst_y.max() >= H or dst_x.min() < 0 or dst_x.max() >= W:
        raise BoundsError(
            f"mosaic piece {index}: displaced mask leaves the grid "
            f"(displacement ({dx_}, {dy_}), wrap off)"
        )
    if channel_axis == 0:
        out[:, dst_y, dst_x] = src[:, ys, xs]
    else:
        out[dst_y, dst_x, :] = src[ys, xs, :]


def mosaic(x_base: LatentField, x_source: LatentField, m: RegionMosaic) -> LatentField:
    """Paste source values under each piece's mask onto the base at the
    displaced positions, in piece order.  Untouched cells keep the base's
    values bit-exactly."""
    if x_base.shape != x_source.shape:
        raise InvalidShapeError(
            f"base shape {x_base.shape} != source shape {x_source.shape}"
        )
    out = x_base.data.copy()
    hw = (x_base.height, x_base.width)
    for i, piece in enumerate(m.pieces):
        _paste_piece(out, x_source.data, piece, i, hw, channel_axis=0)
    return LatentField(out)


def _upscale_mask(mask: np.ndarray, scale: int) -> np.ndarray:
    return np.kron(mask, np.ones((scale, scale), dtype=bool))


def transform_conditioning(segmap: ImageField, transform, scale: int = VAE_SCALE,
                           reservoir: ImageField | None = None) -> ImageField:
    """Apply the identical roll/glide/mosaic to a conditioning image at
    ``scale``x the latent grid (integer shifts multiplied by ``scale``,
    nearest-neighbor semantics, no interpolation).

    The conditioning map must move in lockstep with the noise or the
    animation falls apart, so this mirrors the latent ops exactly.
    """
    h, w = segmap.height, segmap.width
    if h % scale or w % scale:
        raise InvalidShapeError(
            f"segmap {h}x{w} is not a multiple of the latent scale {scale}"
        )
    res = None
    if reservoir is not None:
        if reservoir.shape != segmap.shape:
            raise InvalidShapeError("reservoir shape differs from segmap shape")
        res = reservoir.data

    if isinstance(transform, LatticeShift):
        data = _shift_axis(segmap.data, transform.dx * scale, 1, transform.wrap_x, res,
                           "transform_conditioning")
        data = _shift_axis(data, transform.dy * scale, 0, transform.wrap_y, res,
                           "transform_conditioning")
        return ImageField(data)

    if isinstance(transform, RowShiftProfile):
        if len(transform.shifts) * scale != h:
            raise InvalidShapeError(
                f"profile covers {len(transform.shifts)} latent rows, "
                f"segmap has {h} image rows at scale {scale}"
            )
        shifts = np.repeat(np.asarray(transform.shifts, dtype=int), scale) * scale
        return ImageField(_glide_rows(segmap.data, shifts, transform.wrap, res, 0, 1))

    if isinstance(transform, RegionMosaic):
        out = segmap.data.copy()
        for i, piece in enumerate(transform.pieces):
            big = MosaicPiece(
                mask=_upscale_mask(piece.mask, scale),
                dx=piece.dx * scale,
                dy=piece.dy * scale,
                wrap=piece.wrap,
            )
            _paste_piece(out, segmap.data, big, i, (h, w), channel_axis=2)
        return ImageField(out)

    raise TypeError(f"unsupported transform type {type(transform).__name__}")
