"""Linear latent-to-RGB color mapping (fit and apply) and qualitative
autoencoder probes.

The bundled default map (``data/default_colormap.json``) makes the 4-channel
latent directly viewable as a color-correct RGB image at latent resolution;
applying it to the zero latent yields exactly the bias vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .core import ImageField, LatentField
from .errors import InvalidShapeError, SingularityError


@dataclass(frozen=True, eq=False)
class ColorMap34:
    """Affine latent->RGB map: 3x4 weights (RGB x latent channels) plus
    3 biases on the 0-255 scale."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.shape != (3, 4):
            raise InvalidShapeError(f"weights must be 3x4, got {w.shape}")
        if b.shape != (3,):
            raise InvalidShapeError(f"biases must have 3 entries, got {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise InvalidShapeError("color map contains non-finite values")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    def to_json(self) -> str:
        return json.dumps(
            {"weights": self.weights.tolist(), "biases": self.biases.tolist()},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "ColorMap34":
        obj = json.loads(text)
        return cls(weights=np.asarray(obj["weights"]), biases=np.asarray(obj["biases"]))


def load_default_colormap() -> ColorMap34:
    """The bundled 4-channel color basis (luminosity / yellow / cyan /
    inverted magenta roles)."""
    text = resources.files("noisecine").joinpath("data/default_colormap.json").read_text()
    return ColorMap34.from_json(text)


def apply_colormap(x: LatentField, m: ColorMap34) -> ImageField:
    """Map a 4-channel latent to RGB at latent resolution (no upscaling).

    Returns unclamped values; clamping to [0, 255] happens only at emission
    so affine identities hold internally.
    """
    if x.channels != 4:
        raise InvalidShapeError(f"color map needs 4 channels, field has {x.channels}")
    rgb = np.einsum("kc,chw->hwk", m.weights, x.data.astype(np.float64)) + m.biases
    return ImageField(rgb.astype(np.float32))


def fit_colormap(pairs) -> ColorMap34:
    """Least-squares fit of the affine latent->RGB map from (latent, image)
    pairs, the image already box-averaged to latent resolution.

    Solved in closed form over all pixels of all pairs; gradient descent
    would land on the same optimum with extra steps.  A rank-deficient
    design (e.g. a constant latent) raises :class:`SingularityError` with
    per-channel diagnostics.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one (latent, image) pair")
    xs, ys = [], []
    for latent, image in pairs:
        if latent.channels != 4:
            raise InvalidShapeError(f"latent has {latent.channels} channels, need 4")
        if (latent.height, latent.width) != (image.height, image.width):
            raise InvalidShapeError(
                f"image {image.height}x{image.width} is not at latent "
                f"resolution {latent.height}x{latent.width}"
            )
        xs.append(latent.data.reshape(4, -1).T)
        ys.append(image.data.reshape(-1, 3))
    X = np.concatenate(xs).astype(np.float64)
    Y = np.concatenate(ys).astype(np.float64)
    design = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(design, Y, rcond=None)
    if rank < 5:
        spreads = X.std(axis=0)
        flat = [f"channel {c} (std {s:.3g})" for c, s in enumerate(spreads) if s < 1e-9]
        detail = "; ".join(flat) if flat else "collinear design columns"
        raise SingularityError(
            f"design matrix rank {rank} < 5; degenerate inputs: {detail}"
        )
    return ColorMap34(weights=coef[:4].T, biases=coef[4])


def box_downscale(img: ImageField, scale: int) -> ImageField:
    """Box-average an image down by an integer factor (the image-side
    preparation for :func:`fit_colormap`)."""
    h, w = img.height, img.width
    if h % scale or w % scale:
        raise InvalidShapeError(f"image {h}x{w} is not a multiple of scale {scale}")
    blocks = img.data.reshape(h // scale, scale, w // scale, scale, 3)
    return ImageField(blocks.mean(axis=(1, 3), dtype=np.float64).astype(np.float32))


def probe_roll(backend, img: ImageField, dx: int, dy: int) -> ImageField:
    """Encode, roll the latent by (dx, dy) latent px with wrap, decode.

    Output is for human inspection; the only hard contract is shape
    preservation and backend determinism.
    """
    from .crystal import LatticeShift, roll

    latent = backend.encode(img)
    rolled = roll(latent, LatticeShift(dx=dx, dy=dy))
    return backend.decode(rolled)


def probe_idempotency(backend, img: ImageField, k: int) -> list[ImageField]:
    """Run ``k`` encode/decode round trips, returning every stage (the
    original first, so the result has k+1 images)."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    stages = [img]
    cur = img
    for _ in range(k):
        cur = backend.decode(backend.encode(cur))
        stages.append(cur)
    return stages
