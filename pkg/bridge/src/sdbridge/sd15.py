"""Stable Diffusion v1.5 stack: VAE + UNet + deterministic DDIM stepping,
with optional segmentation-map conditioning via a ControlNet.

Heavyweight dependencies (torch, diffusers, transformers) are imported on
construction only; the model id/path must resolve locally or via the hub.
Engine step k means "k denoise iterations remaining out of total_steps", so
denoise(x, a, b) runs the DDIM updates for schedule indices N-a .. N-b-1 and
denoise(x, a, a) is the identity.
"""

from __future__ import annotations

import os


class StableDiffusionStack:
    name = "sd15"
    deterministic = True

    LATENT_SCALING = 0.18215

    def __init__(self, model: str | None = None, total_steps: int = 30,
                 guidance_scale: float = 7.5, controlnet: str | None = None,
                 device: str | None = None) -> None:
        try:
            import torch
            from diffusers import (
                AutoencoderKL,
                DDIMScheduler,
                UNet2DConditionModel,
            )
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover - env without the extra
            raise RuntimeError(
                "the sd15 stack needs the 'sd' extra (torch, diffusers, transformers)"
            ) from exc

        self._torch = torch
        model = model or os.environ.get("SDBRIDGE_MODEL")
        if not model:
            raise RuntimeError("no model path/id given (--model or SDBRIDGE_MODEL)")
        self.device = torch.device(device or ("cuda" if torch.cuda.is_available() else "cpu"))
        self.total_steps = int(total_steps)
        self.guidance_scale = float(guidance_scale)

        self.vae = AutoencoderKL.from_pretrained(model, subfolder="vae").to(self.device).eval()
        self.unet = UNet2DConditionModel.from_pretrained(model, subfolder="unet").to(self.device).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(model, subfolder="tokenizer")
        self.text_encoder = CLIPTextModel.from_pretrained(model, subfolder="text_encoder").to(self.device).eval()
        self.scheduler = DDIMScheduler.from_pretrained(model, subfolder="scheduler")
        self.scheduler.set_timesteps(self.total_steps, device=self.device)

        self.controlnet = None
        if controlnet:
            from diffusers import ControlNetModel

            self.controlnet = ControlNetModel.from_pretrained(controlnet).to(self.device).eval()

        self.latent_shape = (4, 64, 64)
        self.scale_factor = 8
        self._handles: dict[str, dict] = {}

    # -- helpers ---------------------------------------------------------

    def _to_torch(self, arr):
        return self._torch.from_numpy(arr.copy()).to(self.device, self._torch.float32)

    def _embed(self, prompt: str):
        tok = self.tokenizer(
            [prompt], padding="max_length", max_length=self.tokenizer.model_max_length,
            truncation=True, return_tensors="pt",
        )
        with self._torch.no_grad():
            return self.text_encoder(tok.input_ids.to(self.device))[0]

    # -- operations ------------------------------------------------------

    def encode(self, image):
        torch = self._torch
        # HxWx3 in [0, 255] -> 1x3xHxW in [-1, 1]; posterior mode, not a
        # sample, so repeated requests are bit-identical
        x = self._to_torch(image).permute(2, 0, 1)[None] / 127.5 - 1.0
        with torch.no_grad():
            posterior = self.vae.encode(x).latent_dist
            z = posterior.mode() * self.LATENT_SCALING
        return z[0].cpu().numpy()

    def decode(self, latent):
        torch = self._torch
        z = self._to_torch(latent)[None] / self.LATENT_SCALING
        with torch.no_grad():
            img = self.vae.decode(z).sample
        out = ((img[0].permute(1, 2, 0) + 1.0) * 127.5).clamp(0, 255)
        return out.cpu().numpy()

    def add_noise(self, latent0, noise, step: int):
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        if step == 0:
            return latent0
        t = self.scheduler.timesteps[self.total_steps - step]
        abar = self.scheduler.alphas_cumprod.to(self.device)[t]
        x0 = self._to_torch(latent0)
        n = self._to_torch(noise)
        out = abar.sqrt() * x0 + (1.0 - abar).sqrt() * n
        return out.cpu().numpy()

    def prepare_conditioning(self, prompt: str, segmap):
        token = f"c{len(self._handles)}"
        entry = {"cond": self._embed(prompt), "uncond": self._embed("")}
        if segmap is not None:
            torch = self._torch
            ctrl = self._to_torch(segmap).permute(2, 0, 1)[None] / 255.0
            entry["control"] = ctrl
        self._handles[token] = entry
        return token

    def denoise(self, latent, step_from: int, step_to: int, handle: str):
        torch = self._torch
        if step_from < step_to:
            raise ValueError(f"denoise runs high to low, got {step_from} -> {step_to}")
        if handle not in self._handles:
            raise ValueError(f"unknown conditioning handle {handle!r}")
        entry = self._handles[handle]
        x = self._to_torch(latent)[None]
        embeddings = torch.cat([entry["uncond"], entry["cond"]])
        with torch.no_grad():
            for idx in range(self.total_steps - step_from, self.total_steps - step_to):
                t = self.scheduler.timesteps[idx]
                model_in = torch.cat([x, x])
                down, mid = None, None
                if self.controlnet is not None and "control" in entry:
                    control = torch.cat([entry["control"]] * 2)
                    down, mid = self.controlnet(
                        model_in, t, encoder_hidden_states=embeddings,
                        controlnet_cond=control, return_dict=False,
                    )
                eps_uncond, eps_cond = self.unet(
                    model_in, t, encoder_hidden_states=embeddings,
                    down_block_additional_residuals=down,
                    mid_block_additional_residual=mid,
                ).sample.chunk(2)
                eps = eps_uncond + self.guidance_scale * (eps_cond - eps_uncond)
                # eta=0: fully deterministic DDIM update
                x = self.scheduler.step(eps, t, x, eta=0.0).prev_sample
        return x[0].cpu().numpy()
