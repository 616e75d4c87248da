"""Model stacks the server can be backed by.

A stack provides the five tensor operations behind the wire protocol.  The
synthetic stack is a self-contained deterministic stand-in (pure numpy) used
for protocol testing and CI: its denoiser is a cyclic blur-mixing iteration,
exactly translation-equivariant and bit-reproducible, not a trained model.
"""

from __future__ import annotations

import numpy as np

# Published 4-channel latent color basis (luminosity / yellow / cyan /
# inverted magenta) used for the synthetic encode/decode.
COLOR_WEIGHTS = np.array(
    [
        [43.89, 16.35, -35.44, -21.61],
        [29.65, 44.57, 32.10, -29.15],
        [36.27, 5.53, 28.26, -82.53],
    ]
)
COLOR_BIASES = np.array([123.54, 111.48, 98.52])


class SyntheticStack:
    """Deterministic numpy latent-diffusion stand-in.

    encode: 8x box-downsample + pseudo-inverse color basis; decode: color
    basis + nearest upsample; denoise: per step pull toward a plus-shaped
    cyclic blur; add_noise: sqrt(abar)*x0 + sqrt(1-abar)*n with
    abar_t = (1 - t/N)^2.  Conditioning handles are cached tokens; the
    dynamics do not depend on the prompt.
    """

    name = "synthetic"
    deterministic = True

    def __init__(self, latent_shape=(4, 64, 64), scale_factor: int = 8,
                 total_steps: int = 30, mix: float = 0.1) -> None:
        self.latent_shape = tuple(int(v) for v in latent_shape)
        self.scale_factor = int(scale_factor)
        self.total_steps = int(total_steps)
        self.mix = float(mix)
        self._pinv = np.linalg.pinv(COLOR_WEIGHTS)
        self._handles: dict[str, dict] = {}

    # -- helpers ---------------------------------------------------------

    def _check_step(self, step: int) -> None:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")

    def _blur(self, data: np.ndarray) -> np.ndarray:
        out = 0.5 * data
        for axis, shift in ((1, 1), (1, -1), (2, 1), (2, -1)):
            out = out + 0.125 * np.roll(data, shift, axis=axis)
        return out.astype(np.float32)

    # -- operations ------------------------------------------------------

    def encode(self, image: np.ndarray) -> np.ndarray:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"encode expects (H, W, 3), got {image.shape}")
        s = self.scale_factor
        h, w, _ = image.shape
        if h % s or w % s:
            raise ValueError(f"image {h}x{w} is not a multiple of {s}")
        means = image.astype(np.float64).reshape(h // s, s, w // s, s, 3).mean(axis=(1, 3))
        z = (means - COLOR_BIASES) @ self._pinv.T
        return np.moveaxis(z, 2, 0).astype(np.float32)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        if latent.ndim != 3 or latent.shape[0] != 4:
            raise ValueError(f"decode expects (4, h, w), got {latent.shape}")
        s = self.scale_factor
        rgb = np.moveaxis(latent.astype(np.float64), 0, 2) @ COLOR_WEIGHTS.T + COLOR_BIASES
        return np.repeat(np.repeat(rgb, s, axis=0), s, axis=1).astype(np.float32)

    def add_noise(self, latent0: np.ndarray, noise: np.ndarray, step: int) -> np.ndarray:
        self._check_step(step)
        if latent0.shape != noise.shape:
            raise ValueError("latent/noise shape mismatch")
        abar = (1.0 - step / self.total_steps) ** 2
        out = np.sqrt(abar) * latent0.astype(np.float64) + np.sqrt(1.0 - abar) * noise.astype(np.float64)
        return out.astype(np.float32)

    def prepare_conditioning(self, prompt: str, segmap: np.ndarray | None) -> str:
        token = f"c{len(self._handles)}"
        self._handles[token] = {"prompt": prompt, "segmap": segmap}
        return token

    def denoise(self, latent: np.ndarray, step_from: int, step_to: int, handle: str) -> np.ndarray:
        self._check_step(step_from)
        self._check_step(step_to)
        if step_from < step_to:
            raise ValueError(f"denoise runs high to low, got {step_from} -> {step_to}")
        if handle not in self._handles:
            raise ValueError(f"unknown conditioning handle {handle!r}")
        mix = np.float32(self.mix)
        keep = np.float32(1.0 - self.mix)
        data = latent.astype(np.float32)
        for _ in range(step_from - step_to):
            data = keep * data + mix * self._blur(data)
        return data


def build_stack(args):
    """Stack factory for the CLI; the sd15 stack imports its heavyweight
    dependencies only when selected."""
    latent_shape = tuple(int(v) for v in args.latent_shape.split(","))
    if args.stack == "synthetic":
        return SyntheticStack(
            latent_shape=latent_shape,
            scale_factor=args.scale_factor,
            total_steps=args.steps,
            mix=args.mix,
        )
    from .sd15 import StableDiffusionStack

    return StableDiffusionStack(
        model=args.model,
        total_steps=args.steps,
        guidance_scale=args.guidance,
        controlnet=args.controlnet,
        device=args.device,
    )
