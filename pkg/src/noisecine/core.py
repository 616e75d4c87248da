"""Field containers, deterministic noise sampling, channel statistics, and the
on-disk latent dump format shared by every other module.

Reproducibility contract
------------------------
All randomness in the engine flows through :func:`sample_noise` (and the
seed-mixing helper :func:`mix_seed`).  The generator is pinned explicitly:

* bit generator: PCG64 (``numpy.random.PCG64``), seeded directly with the
  spec's integer seed; never the interpreter's or numpy's global default
  state;
* normal sampling: numpy's single-precision ziggurat
  (``Generator.standard_normal(dtype=float32)``).

A given ``SeededNoiseSpec`` therefore yields bit-identical float32 samples on
every run and platform; a golden-value test guards against drift.

All fields store little-endian-compatible float32 and are marked read-only,
so they are safe to share across threads and to round-trip bit-exactly
through the dump format below.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidShapeError,
    LatentFormatError,
    MagicError,
    TruncatedError,
    VersionError,
)

LATENT_CHANNELS = 4
DEFAULT_LATENT_SHAPE = (4, 64, 64)

# Spatial ratio between image pixels and latent pixels for the default
# autoencoder; conditioning transforms and flow downscaling rely on it.
VAE_SCALE = 8

# Channels with spread below this are reported as clamped by measure_stats
# and rejected by rescaling operations.
STD_EPSILON = 1e-12

_MAGIC = b"NCLF"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")  # magic, version, C, H, W


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.setflags(write=False)
    return arr


def _validate_field(arr: np.ndarray, ndim: int, what: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim != ndim:
        raise InvalidShapeError(f"{what} must have {ndim} axes, got shape {a.shape}")
    if a.size == 0 or min(a.shape) < 1:
        raise InvalidShapeError(f"{what} must be non-empty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidShapeError(f"{what} contains non-finite values")
    return _freeze(a)


@dataclass(frozen=True, eq=False)
class LatentField:
    """Channel-major ``(C, H, W)`` float32 field on the latent grid.

    The central object all noise transforms act on.  Immutable: the backing
    array is read-only, so instances are plain values.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _validate_field(self.data, 3, "LatentField"))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class ImageField:
    """``(H, W, 3)`` float32 RGB field in image space.

    Values are nominally in [0, 255] for emitted frames but may exceed that
    range mid-pipeline; clamping happens only at emission (:func:`to_uint8`).
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _validate_field(self.data, 3, "ImageField"))
        if self.data.shape[2] != 3:
            raise InvalidShapeError(
                f"ImageField must have 3 color channels, got shape {self.data.shape}"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class ChannelStats:
    """Per-channel mean and population standard deviation snapshot.

    ``clamped`` flags channels whose measured std fell below
    :data:`STD_EPSILON` and was clamped up to it.
    """

    mean: np.ndarray
    std: np.ndarray
    clamped: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        clamped = np.asarray(self.clamped, dtype=bool)
        if not (mean.shape == std.shape == clamped.shape) or mean.ndim != 1:
            raise InvalidShapeError("ChannelStats arrays must share one 1-D shape")
        if np.any(std <= 0):
            raise InvalidShapeError("ChannelStats std must be positive")
        for name, a in (("mean", mean), ("std", std), ("clamped", clamped)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class SeededNoiseSpec:
    """Seed plus shape; the complete recipe for a reproducible noise field."""

    seed: int
    shape: tuple[int, int, int] = DEFAULT_LATENT_SHAPE

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if len(self.shape) != 3 or any(int(s) < 1 for s in self.shape):
            raise InvalidShapeError(f"invalid noise shape {self.shape}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))


def sample_noise(spec: SeededNoiseSpec) -> LatentField:
    """Draw i.i.d. standard-normal noise for ``spec``.

    Pure function of the spec (see the module docstring for the pinned
    generator); calling it twice with the same spec yields bit-identical
    fields.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    return LatentField(rng.standard_normal(spec.shape, dtype=np.float32))


def mix_seed(seed: int, *parts: int) -> int:
    """Derive a sub-seed from a base seed and integer salts.

    Uses ``numpy.random.SeedSequence([seed, *parts])``, so derived streams are
    deterministic and well separated (e.g. per-frame injection noise).
    """
    ss = np.random.SeedSequence([int(seed), *[int(p) for p in parts]])
    return int(ss.generate_state(1, np.uint64)[0])


def round_half_away(x):
    """Round to nearest integer with halves away from zero (sign-symmetric)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def measure_stats(x: LatentField) -> ChannelStats:
    """Per-channel arithmetic mean and population std (ddof=0) of ``x``.

    Accumulates in float64.  A channel with (near-)zero variance gets its std
    clamped to :data:`STD_EPSILON`, a warning is emitted, and the channel is
    flagged in the result.
    """
    data = x.data.astype(np.float64, copy=False)
    mean = data.mean(axis=(1, 2))
    std = data.std(axis=(1, 2), ddof=0)
    clamped = std < STD_EPSILON
    if np.any(clamped):
        warnings.warn(
            f"channel(s) {np.nonzero(clamped)[0].tolist()} have ~zero variance; "
            f"std clamped to {STD_EPSILON}",
            RuntimeWarning,
            stacklevel=2,
        )
        std = np.where(clamped, STD_EPSILON, std)
    return ChannelStats(mean=mean, std=std, clamped=clamped)


def write_latent(path, x: LatentField) -> None:
    """Write ``x`` to ``path`` in the latent dump format.

    Layout: magic ``NCLF``, u32 version=1, u32 C, u32 H, u32 W (all
    little-endian), then C*H*W little-endian float32 in channel-major,
    row-major order.  The round trip through :func:`read_latent` is bit-exact.
    """
    c, h, w = x.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, c, h, w))
        f.write(x.data.astype("<f4", copy=False).tobytes(order="C"))


def read_latent(path) -> LatentField:
    """Read a latent dump written by :func:`write_latent`."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        if raw[: len(_MAGIC)] != _MAGIC[: len(raw)]:
            raise MagicError(f"{path}: not a latent dump (bad magic)")
        raise TruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, c, h, w = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise MagicError(f"{path}: not a latent dump (bad magic {magic!r})")
    if version != _VERSION:
        raise VersionError(f"{path}: unsupported dump version {version}")
    if min(c, h, w) < 1:
        raise LatentFormatError(f"{path}: header declares empty shape ({c},{h},{w})")
    expected = 4 * c * h * w
    payload = raw[_HEADER.size :]
    if len(payload) < expected:
        raise TruncatedError(
            f"{path}: payload has {len(payload)} bytes, header claims {expected}"
        )
    if len(payload) > expected:
        raise LatentFormatError(f"{path}: {len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w)
    return LatentField(data.astype(np.float32, copy=True))


def to_uint8(img: ImageField) -> np.ndarray:
    """Clamp to [0, 255], round to nearest, return uint8 pixels for emission."""
    return np.clip(np.rint(img.data), 0, 255).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> ImageField:
    """Wrap uint8 RGB pixels as a float32 image field."""
    return ImageField(np.asarray(pixels, dtype=np.float32))


def save_image_png(path, img: ImageField) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_image_png(path) -> ImageField:
    from PIL import Image

    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))
