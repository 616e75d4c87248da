"""Backend contract (denoiser + autoencoder) and the deterministic mock.

All generation pipelines are written against :class:`Backend`, so the whole
property suite runs without any diffusion model.  The mock is an exactly
translation-equivariant stand-in: every operation commutes with cyclic
shifts (at matching latent/image scales) bit-for-bit, which is what makes
the equivariance and seamless-stitching tests decisive rather than fuzzy.
"""

from __future__ import annotations

import abc
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .core import ImageField, LatentField, VAE_SCALE
from .errors import InvalidShapeError
from .latentvis import ColorMap34, load_default_colormap


@dataclass(frozen=True)
class BackendCapabilities:
    deterministic: bool
    concurrency_safe: bool
    latent_shape: tuple[int, int, int]
    scale_factor: int
    total_steps: int


@dataclass(frozen=True)
class ConditioningHandle:
    """Opaque token minted by a backend; pipelines never look inside."""

    backend_id: int
    token: str


class Backend(abc.ABC):
    """Deterministic denoiser + autoencoder contract.

    Public methods validate and tally every call (``call_counts``,
    ``denoise_segments``, ``events``) so pipelines and the CLI manifest can
    account for backend work; subclasses implement the underscored hooks.
    """

    def __init__(self) -> None:
        self.call_counts: Counter[str] = Counter()
        self.denoise_segments: list[tuple[int, int]] = []
        self.events: list[tuple] = []

    # -- bookkeeping --------------------------------------------------------

    def note(self, tag: str) -> None:
        """Drop a marker into the event log (e.g. frame boundaries)."""
        self.events.append(("note", tag))

    def _record(self, op: str, *detail) -> None:
        self.call_counts[op] += 1
        self.events.append((op, *detail))

    def reset_accounting(self) -> None:
        self.call_counts.clear()
        self.denoise_segments.clear()
        self.events.clear()

    # -- contract -----------------------------------------------------------

    @abc.abstractmethod
    def capabilities(self) -> BackendCapabilities: ...

    def encode(self, image: ImageField) -> LatentField:
        self._record("encode")
        return self._encode(image)

    def decode(self, latent: LatentField) -> ImageField:
        self._record("decode")
        return self._decode(latent)

    def add_noise(self, latent0: LatentField, noise: LatentField, step: int) -> LatentField:
        if latent0.shape != noise.shape:
            raise InvalidShapeError(
                f"latent shape {latent0.shape} != noise shape {noise.shape}"
            )
        self._record("add_noise", step)
        return self._add_noise(latent0, noise, int(step))

    def denoise(self, latent: LatentField, step_from: int, step_to: int,
                conditioning: ConditioningHandle) -> LatentField:
        step_from, step_to = int(step_from), int(step_to)
        if step_from < step_to:
            raise ValueError(
                f"denoise runs from high to low steps, got {step_from} -> {step_to}"
            )
        self._record("denoise", step_from, step_to)
        self.denoise_segments.append((step_from, step_to))
        return self._denoise(latent, step_from, step_to, conditioning)

    def prepare_conditioning(self, prompt: str, segmap: ImageField | None = None) -> ConditioningHandle:
        self._record("prepare_conditioning")
        return self._prepare_conditioning(prompt, segmap)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    # -- hooks ----------------------------------------------------------------

    @abc.abstractmethod
    def _encode(self, image: ImageField) -> LatentField: ...

    @abc.abstractmethod
    def _decode(self, latent: LatentField) -> ImageField: ...

    @abc.abstractmethod
    def _add_noise(self, latent0: LatentField, noise: LatentField, step: int) -> LatentField: ...

    @abc.abstractmethod
    def _denoise(self, latent: LatentField, step_from: int, step_to: int,
                 conditioning: ConditioningHandle) -> LatentField: ...

    @abc.abstractmethod
    def _prepare_conditioning(self, prompt: str, segmap: ImageField | None) -> ConditioningHandle: ...


@dataclass(frozen=True)
class MockConfig:
    """Mock backend knobs.

    ``mix`` is the per-step pull toward the blurred field; smaller keeps more
    texture.  ``total_steps`` bounds the step indices and sizes the forward
    noising table.
    """

    latent_shape: tuple[int, int, int] = (4, 64, 64)
    scale_factor: int = VAE_SCALE
    total_steps: int = 30
    mix: float = 0.12
    colormap: ColorMap34 | None = None


# 3x3 binomial smoothing taps used by the mock denoiser, applied cyclically.
_BLUR_TAPS = [
    ((-1, -1), 1 / 16), ((-1, 0), 2 / 16), ((-1, 1), 1 / 16),
    ((0, -1), 2 / 16), ((0, 0), 4 / 16), ((0, 1), 2 / 16),
    ((1, -1), 1 / 16), ((1, 0), 2 / 16), ((1, 1), 1 / 16),
]


class MockBackend(Backend):
    """Fully deterministic, exactly translation-equivariant backend.

    * encode: 8x box-downsample then the pseudo-inverse of the default
      latent->RGB color map;
    * decode: the color map then 8x nearest upsample;
    * denoise(x, a, b): (a - b) applications of ``x <- (1-mix)*x +
      mix*blur(x)`` with a cyclic 3x3 binomial blur (conditioning is
      validated but does not steer the dynamics: the mock takes the
      prompt/noise split to its extreme: content lives entirely in the
      noise);
    * add_noise(x0, n, t): sqrt(abar_t)*x0 + sqrt(1-abar_t)*n with the
      published table abar_t = (1 - t/N)^2, so step 0 is exactly x0 and
      step N is exactly n.
    """

    def __init__(self, config: MockConfig = MockConfig()) -> None:
        super().__init__()
        self.config = config
        cmap = config.colormap or load_default_colormap()
        self._weights = cmap.weights  # (3, 4)
        self._biases = cmap.biases  # (3,)
        self._pinv = np.linalg.pinv(cmap.weights)  # (4, 3)
        n = config.total_steps
        self.alpha_bar = tuple((1.0 - t / n) ** 2 for t in range(n + 1))

    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(
            deterministic=True,
            concurrency_safe=True,
            latent_shape=self.config.latent_shape,
            scale_factor=self.config.scale_factor,
            total_steps=self.config.total_steps,
        )

    def _check_step(self, step: int) -> None:
        if not 0 <= step <= self.config.total_steps:
            raise ValueError(
                f"step {step} outside schedule [0, {self.config.total_steps}]"
            )

    def _encode(self, image: ImageField) -> LatentField:
        s = self.config.scale_factor
        h, w = image.height, image.width
        if h % s or w % s:
            raise InvalidShapeError(f"image {h}x{w} is not a multiple of scale {s}")
        blocks = image.data.astype(np.float64).reshape(h // s, s, w // s, s, 3)
        means = blocks.mean(axis=(1, 3))
        z = (means - self._biases) @ self._pinv.T  # (h/s, w/s, 4)
        return LatentField(np.moveaxis(z, 2, 0).astype(np.float32))

    def _decode(self, latent: LatentField) -> ImageField:
        s = self.config.scale_factor
        z = np.moveaxis(latent.data.astype(np.float64), 0, 2)
        rgb = z @ self._weights.T + self._biases
        up = np.repeat(np.repeat(rgb, s, axis=0), s, axis=1)
        return ImageField(up.astype(np.float32))

    def _add_noise(self, latent0: LatentField, noise: LatentField, step: int) -> LatentField:
        self._check_step(step)
        ab = self.alpha_bar[step]
        data = np.float32(np.sqrt(ab)) * latent0.data + np.float32(np.sqrt(1.0 - ab)) * noise.data
        return LatentField(data)

    def _blur(self, data: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(data)
        for (dy, dx), weight in _BLUR_TAPS:
            acc += np.float32(weight) * np.roll(data, (dy, dx), axis=(1, 2))
        return acc

    def _denoise(self, latent: LatentField, step_from: int, step_to: int,
                 conditioning: ConditioningHandle) -> LatentField:
        self._check_step(step_from)
        self._check_step(step_to)
        if not isinstance(conditioning, ConditioningHandle) or conditioning.backend_id != id(self):
            raise ValueError("conditioning handle was not minted by this backend")
        mix = np.float32(self.config.mix)
        keep = np.float32(1.0 - self.config.mix)
        data = latent.data
        for _ in range(step_from - step_to):
            data = keep * data + mix * self._blur(data)
        return LatentField(data)

    def _prepare_conditioning(self, prompt: str, segmap: ImageField | None) -> ConditioningHandle:
        token = f"prompt={prompt!r}"
        if segmap is not None:
            token += f"|segmap={hash(segmap.data.tobytes())}"
        return ConditioningHandle(backend_id=id(self), token=token)
