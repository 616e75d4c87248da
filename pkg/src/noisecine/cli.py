"""Command-line surface: scene configs in, numbered PNG frames and a JSON
manifest out, plus metric/report, latent preview, color-map fitting, and
autoencoder probe subcommands.

Exit codes: 0 success; 2 config validation; 3 bad input data or files;
4 backend/transport/determinism failures; 5 degenerate numerics
(rank-deficient fits, flat slices, flat channels); 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import metric as metric_mod
from .backends import Backend, MockBackend, MockConfig
from .bridge_client import BridgeBackend
from .core import (
    ImageField,
    LatentField,
    SeededNoiseSpec,
    load_image_png,
    read_latent,
    sample_noise,
    save_image_png,
    to_uint8,
    write_latent,
)
from .crystal import LatticeShift, MosaicPiece, RegionMosaic, discretize_shear
from .errors import (
    ConfigError,
    DegenerateChannelError,
    DegenerateSliceError,
    DeterminismError,
    LatentFormatError,
    NoiseCineError,
    InvalidShapeError,
    SingularityError,
    TransportError,
)
from .latentvis import (
    ColorMap34,
    apply_colormap,
    box_downscale,
    fit_colormap,
    load_default_colormap,
    probe_idempotency,
    probe_roll,
)
from .liquid import FlowField, parse_flow_map
from .pipeline import (
    CrystalFrameTransform,
    DenoiseSchedule,
    LayerItem,
    LiquidOptions,
    SceneSpec,
    animate_layers,
    composite_seeds,
    generate_crystal,
    generate_liquid,
    image_to_video,
    seamless_upscale,
    vid2vid_tracked,
)

SEED_ENV = "NOISECINE_SEED"

_METHODS = ("crystal", "liquid", "img2vid", "layers", "vid2vid", "upscale", "composite")

_COMMON_KEYS = {"method", "prompt", "seed", "frames", "schedule", "backend", "paths"}
_SECTION_FOR_METHOD = {
    "crystal": {"crystal"},
    "liquid": {"liquid"},
    "img2vid": {"img2vid", "liquid"},
    "layers": {"layers", "liquid"},
    "vid2vid": {"vid2vid"},
    "upscale": {"upscale"},
    "composite": {"composite"},
}
_PATH_KEYS = {
    "crystal": {"segmap"},
    "liquid": {"flow_map", "segmap"},
    "img2vid": {"source", "flow_map"},
    "layers": set(),
    "vid2vid": {"frames_dir", "flows_dir"},
    "upscale": set(),
    "composite": {"mask", "segmap"},
}
_REQUIRED_PATHS = {
    "liquid": {"flow_map"},
    "img2vid": {"source", "flow_map"},
    "vid2vid": {"frames_dir", "flows_dir"},
    "composite": {"mask"},
}

_LIQUID_DEFAULTS = {
    "beta": 0.5,
    "floor": 0.7,
    "kurtosis_delta": 1.0,
    "kurtosis_enabled": False,
    "inject_strength": 0.0,
    "inject_site": "latent",
    "wrap_x": True,
    "wrap_y": True,
    "max_velocity": 8.0,
    "max_amplitude": 16.0,
    "period_min": 8.0,
    "period_max": 64.0,
    "white_threshold": 0.95,
}


def _check_keys(obj: dict, allowed: set, context: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context} must be an object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key \"{key}\" in {context}")


def _require(obj: dict, key: str, context: str):
    if key not in obj:
        raise ConfigError(f"missing required key \"{key}\" in {context}")
    return obj[key]


def load_scene_config(path) -> dict:
    """Load and strictly validate a scene config; unknown keys are rejected
    and missing required keys are named."""
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    method = _require(cfg, "method", "config")
    if method not in _METHODS:
        raise ConfigError(f"unknown method \"{method}\" (choose from {', '.join(_METHODS)})")
    allowed = _COMMON_KEYS | _SECTION_FOR_METHOD[method]
    _check_keys(cfg, allowed, "config")

    schedule = cfg.get("schedule", {})
    _check_keys(schedule, {"steps", "switch"}, "schedule")
    backend = cfg.get("backend", {})
    _check_keys(backend, {"type", "cmd"}, "backend")
    if backend.get("type", "mock") not in ("mock", "bridge"):
        raise ConfigError(f"backend.type must be \"mock\" or \"bridge\"")
    if backend.get("type") == "bridge" and not backend.get("cmd"):
        raise ConfigError("missing required key \"cmd\" in backend (bridge type)")

    paths = cfg.get("paths", {})
    _check_keys(paths, _PATH_KEYS[method], "paths")
    for key in _REQUIRED_PATHS.get(method, ()):
        if key not in paths:
            raise ConfigError(f"missing required key \"{key}\" in paths for method {method}")

    if method == "crystal":
        section = cfg.get("crystal", {})
        _check_keys(section, {"pan", "shear", "mosaic"}, "crystal")
        if not section:
            raise ConfigError("crystal section must define pan, shear, or mosaic motion")
        if "pan" in section:
            _check_keys(section["pan"],
                        {"dx_per_frame", "dy_per_frame", "wrap_x", "wrap_y"}, "crystal.pan")
        if "shear" in section:
            _check_keys(section["shear"],
                        {"horizon_row", "near_per_frame", "far_per_frame", "wrap"},
                        "crystal.shear")
        if "mosaic" in section:
            for i, piece in enumerate(section["mosaic"]):
                _check_keys(piece, {"mask", "dx_per_frame", "dy_per_frame", "wrap"},
                            f"crystal.mosaic[{i}]")
                _require(piece, "mask", f"crystal.mosaic[{i}]")
    elif method == "liquid":
        _check_keys(cfg.get("liquid", {}), set(_LIQUID_DEFAULTS), "liquid")
    elif method == "img2vid":
        _check_keys(cfg.get("img2vid", {}),
                    {"strength", "track_noise", "noise_seed"}, "img2vid")
        _check_keys(cfg.get("liquid", {}), set(_LIQUID_DEFAULTS), "liquid")
    elif method == "layers":
        section = _require(cfg, "layers", "config")
        _check_keys(section, {"strength", "items"}, "layers")
        items = _require(section, "items", "layers")
        if not items:
            raise ConfigError("layers.items must list at least one layer")
        for i, item in enumerate(items):
            _check_keys(item, {"image", "alpha", "flow_map", "seed"}, f"layers.items[{i}]")
            _require(item, "image", f"layers.items[{i}]")
            _require(item, "flow_map", f"layers.items[{i}]")
        _check_keys(cfg.get("liquid", {}), set(_LIQUID_DEFAULTS), "liquid")
    elif method == "vid2vid":
        _check_keys(cfg.get("vid2vid", {}), {"strength", "track_noise", "noise_seed"}, "vid2vid")
    elif method == "upscale":
        section = _require(cfg, "upscale", "config")
        _check_keys(section, {"canvas", "windows", "mode"}, "upscale")
        canvas = _require(section, "canvas", "upscale")
        _check_keys(canvas, {"height", "width", "seed"}, "upscale.canvas")
        if not _require(section, "windows", "upscale"):
            raise ConfigError("upscale.windows must list at least one window")
    elif method == "composite":
        section = _require(cfg, "composite", "config")
        _check_keys(section, {"fg_seed", "bg_seed", "combine_fraction"}, "composite")
        _require(section, "fg_seed", "composite")
        _require(section, "bg_seed", "composite")
    return cfg


def _resolve_seed(cfg: dict) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return int(cfg.get("seed", 0))


def _make_backend(cfg: dict, args, schedule: DenoiseSchedule,
                  latent_hw: tuple[int, int]) -> Backend:
    section = cfg.get("backend", {})
    btype = args.backend or section.get("type", "mock")
    if btype == "bridge":
        cmd = args.bridge_cmd or section.get("cmd")
        if not cmd:
            raise ConfigError("bridge backend selected but no bridge command given")
        backend = BridgeBackend(cmd)
        caps = backend.capabilities()
        if caps.total_steps != schedule.total_steps:
            backend.close()
            raise ConfigError(
                f"schedule.steps {schedule.total_steps} != bridge steps {caps.total_steps}"
            )
        return backend
    return MockBackend(MockConfig(latent_shape=(4, latent_hw[0], latent_hw[1]),
                                  total_steps=schedule.total_steps))


def _load_mask_png(path, expect_hw=None) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    mask = arr >= 128
    if expect_hw is not None and mask.shape != tuple(expect_hw):
        raise InvalidShapeError(f"mask {path}: shape {mask.shape} != expected {tuple(expect_hw)}")
    return mask


def _liquid_params(cfg: dict) -> dict:
    params = dict(_LIQUID_DEFAULTS)
    params.update(cfg.get("liquid", {}))
    return params


def _parse_flow_from_cfg(path, params: dict) -> FlowField:
    img = load_image_png(path)
    return parse_flow_map(
        img,
        max_velocity=float(params["max_velocity"]),
        max_amplitude=float(params["max_amplitude"]),
        period_range=(float(params["period_min"]), float(params["period_max"])),
        white_threshold=float(params["white_threshold"]),
        wrap_x=bool(params["wrap_x"]),
        wrap_y=bool(params["wrap_y"]),
    )


def _crystal_transforms(cfg: dict, frames: int, grid_h: int, base_dir: Path,
                        latent_hw: tuple[int, int]):
    section = cfg.get("crystal", {})
    pan = section.get("pan")
    shear = section.get("shear")
    pieces_cfg = section.get("mosaic")
    transforms = [CrystalFrameTransform.identity()]
    masks = None
    if pieces_cfg:
        masks = [_load_mask_png(base_dir / p["mask"], latent_hw) for p in pieces_cfg]
    for f in range(1, frames):
        shift = None
        profile = None
        pieces = None
        if pan:
            shift = LatticeShift(
                dx=int(pan.get("dx_per_frame", 0)) * f,
                dy=int(pan.get("dy_per_frame", 0)) * f,
                wrap_x=bool(pan.get("wrap_x", True)),
                wrap_y=bool(pan.get("wrap_y", True)),
            )
        if shear:
            profile = discretize_shear(
                horizon_row=int(shear["horizon_row"]),
                near_shift=int(shear.get("near_per_frame", 0)) * f,
                far_shift=int(shear.get("far_per_frame", 0)) * f,
                H=grid_h,
            )
            if not bool(shear.get("wrap", True)):
                profile = type(profile)(shifts=profile.shifts, wrap=False)
        if pieces_cfg:
            pieces = RegionMosaic(tuple(
                MosaicPiece(
                    mask=mask,
                    dx=int(p.get("dx_per_frame", 0)) * f,
                    dy=int(p.get("dy_per_frame", 0)) * f,
                    wrap=bool(p.get("wrap", True)),
                )
                for p, mask in zip(pieces_cfg, masks)
            ))
        transforms.append(CrystalFrameTransform(shift=shift, profile=profile, pieces=pieces))
    return transforms


def _per_frame_calls(events) -> list[dict]:
    frames: list[dict] = []
    current: dict | None = None
    for ev in events:
        if ev[0] == "note" and str(ev[1]).startswith(("frame:", "window:")):
            current = {}
            frames.append(current)
        elif current is not None:
            current[ev[0]] = current.get(ev[0], 0) + 1
    return frames


def cmd_run(args) -> int:
    cfg = load_scene_config(args.config)
    base_dir = Path(args.config).parent
    method = cfg["method"]
    seed = _resolve_seed(cfg)
    frames_n = int(args.frames or cfg.get("frames", 16))
    if frames_n < 1:
        raise ConfigError("frames must be >= 1")
    sched_cfg = cfg.get("schedule", {})
    schedule = DenoiseSchedule(
        total_steps=int(sched_cfg.get("steps", 30)),
        switch_fraction=float(sched_cfg.get("switch", 0.7)),
    )
    prompt = str(cfg.get("prompt", ""))
    paths = cfg.get("paths", {})

    segmap = None
    if paths.get("segmap"):
        segmap = load_image_png(base_dir / paths["segmap"])

    # Pick the latent grid from whatever input sets the resolution.
    latent_hw = (64, 64)
    if method == "crystal" and segmap is not None:
        latent_hw = (segmap.height // 8, segmap.width // 8)
    elif method in ("liquid", "img2vid"):
        probe_path = paths.get("flow_map") if method == "liquid" else paths.get("source")
        probe_img = load_image_png(base_dir / probe_path)
        latent_hw = (probe_img.height // 8, probe_img.width // 8)
    elif method == "layers":
        first = load_image_png(base_dir / cfg["layers"]["items"][0]["image"])
        latent_hw = (first.height // 8, first.width // 8)
    elif method == "vid2vid":
        frame_files = sorted(Path(base_dir / paths["frames_dir"]).glob("*.png"))
        if not frame_files:
            raise ConfigError(f"no PNG frames in \"{paths['frames_dir']}\"")
        latent_hw0 = load_image_png(frame_files[0])
        latent_hw = (latent_hw0.height // 8, latent_hw0.width // 8)
    elif method == "composite":
        mask = _load_mask_png(base_dir / paths["mask"])
        latent_hw = mask.shape

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    echo = copy.deepcopy(cfg)
    echo["seed"] = seed
    echo["frames"] = frames_n
    manifest = {
        "config": echo,
        "seed": seed,
        "frames": [],
        "prefix_calls": 0,
        "call_counts": {},
        "per_frame_calls": [],
        "timings": {"total_s": None, "per_frame_s": []},
        "error": None,
    }

    backend = _make_backend(cfg, args, schedule, latent_hw)
    latents_dir = out_dir / "latents"
    sink = None
    if args.dump_latents:
        latents_dir.mkdir(exist_ok=True)
        sink = lambda i, lat: write_latent(latents_dir / f"frame_{i:04d}.nclf", lat)

    t0 = time.perf_counter()
    try:
        scene = SceneSpec(prompt=prompt, seed=seed, segmap=segmap)
        if method == "crystal":
            transforms = _crystal_transforms(cfg, frames_n, latent_hw[0], base_dir, latent_hw)
            images = generate_crystal(backend, scene, schedule, transforms, latent_sink=sink)
        elif method == "liquid":
            params = _liquid_params(cfg)
            flow = _parse_flow_from_cfg(base_dir / paths["flow_map"], params)
            options = LiquidOptions(
                beta=float(params["beta"]),
                floor=float(params["floor"]),
                kurtosis_delta=float(params["kurtosis_delta"]),
                kurtosis_enabled=bool(params["kurtosis_enabled"]),
                inject_strength=float(params["inject_strength"]),
                inject_site=str(params["inject_site"]),
            )
            images = generate_liquid(backend, scene, schedule, flow, frames_n,
                                     options, latent_sink=sink)
        elif method == "img2vid":
            params = _liquid_params(cfg)
            section = cfg.get("img2vid", {})
            src = load_image_png(base_dir / paths["source"])
            flow = _parse_flow_from_cfg(base_dir / paths["flow_map"], params)
            images = image_to_video(
                backend, src, flow, schedule,
                strength=float(section.get("strength", 0.5)),
                frames=frames_n,
                seed=int(section.get("noise_seed", seed)),
                prompt=prompt,
                track_noise=bool(section.get("track_noise", True)),
                latent_sink=sink,
            )
        elif method == "layers":
            params = _liquid_params(cfg)
            section = cfg["layers"]
            items = []
            for item in section["items"]:
                image = load_image_png(base_dir / item["image"])
                if item.get("alpha"):
                    from PIL import Image

                    with Image.open(base_dir / item["alpha"]) as im:
                        alpha = np.asarray(im.convert("L")).astype(np.float32) / 255.0
                else:
                    alpha = np.ones((image.height, image.width), dtype=np.float32)
                flow = _parse_flow_from_cfg(base_dir / item["flow_map"], params)
                items.append(LayerItem(image=image, alpha=alpha, flow=flow,
                                       seed=int(item.get("seed", seed))))
            images = animate_layers(backend, items, schedule,
                                    strength=float(section.get("strength", 0.5)),
                                    frames=frames_n, prompt=prompt, latent_sink=sink)
        elif method == "vid2vid":
            section = cfg.get("vid2vid", {})
            frame_files = sorted(Path(base_dir / paths["frames_dir"]).glob("*.png"))
            in_frames = [load_image_png(p) for p in frame_files]
            flow_files = sorted(Path(base_dir / paths["flows_dir"]).glob("*.npy"))
            flows = [np.load(p) for p in flow_files]
            images = vid2vid_tracked(
                backend, in_frames, flows,
                strength=float(section.get("strength", 0.5)),
                seed=int(section.get("noise_seed", seed)),
                schedule=schedule, prompt=prompt,
                track_noise=bool(section.get("track_noise", True)),
                latent_sink=sink,
            )
        elif method == "upscale":
            section = cfg["upscale"]
            canvas_cfg = section["canvas"]
            canvas = sample_noise(SeededNoiseSpec(
                int(canvas_cfg.get("seed", seed)),
                (4, int(canvas_cfg.get("height", 128)), int(canvas_cfg.get("width", 128))),
            ))
            windows = [(int(x), int(y)) for x, y in section["windows"]]
            images = seamless_upscale(backend, canvas, windows, scene, schedule,
                                      mode=str(section.get("mode", "tiled")),
                                      latent_sink=sink)
        elif method == "composite":
            section = cfg["composite"]
            mask = _load_mask_png(base_dir / paths["mask"], latent_hw)
            images = [composite_seeds(
                backend,
                fg_seed=int(section["fg_seed"]),
                bg_seed=int(section["bg_seed"]),
                mask=mask,
                combine_fraction=float(section.get("combine_fraction", 0.0)),
                scene=scene, schedule=schedule, latent_sink=sink,
            )]
        else:  # pragma: no cover - validated earlier
            raise ConfigError(f"unknown method \"{method}\"")

        marks = [i for i, ev in enumerate(backend.events) if ev[0] == "note"]
        per_frame_t: list[float] = []
        for i, img in enumerate(images):
            t_frame = time.perf_counter()
            name = f"frame_{i:04d}.png"
            save_image_png(out_dir / name, img)
            manifest["frames"].append(name)
            per_frame_t.append(time.perf_counter() - t_frame)
        del marks
        manifest["per_frame_calls"] = _per_frame_calls(backend.events)
        manifest["call_counts"] = dict(backend.call_counts)
        switch = schedule.switch_step
        manifest["prefix_calls"] = backend.denoise_segments.count(
            (schedule.total_steps, switch)
        )
        manifest["timings"]["per_frame_s"] = per_frame_t
        manifest["timings"]["total_s"] = time.perf_counter() - t0
    except Exception as exc:
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
        manifest["timings"]["total_s"] = time.perf_counter() - t0
        with open(out_dir / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2)
        raise
    finally:
        backend.close()

    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    print(f"wrote {len(manifest['frames'])} frame(s) to {out_dir}")
    return 0


def _slice_montage(slices, path) -> None:
    from PIL import Image

    rendered = []
    width = max(s.data.shape[1] for s in slices)
    for s in slices:
        lo, hi = float(s.data.min()), float(s.data.max())
        span = (hi - lo) or 1.0
        img = ((s.data - lo) / span * 255.0).astype(np.uint8)
        if img.shape[1] < width:
            img = np.pad(img, ((0, 0), (0, width - img.shape[1])))
        rendered.append(img)
        rendered.append(np.full((2, width), 255, dtype=np.uint8))
    montage = np.concatenate(rendered[:-1])
    Image.fromarray(montage, mode="L").save(path, format="PNG")


def cmd_metric(args) -> int:
    frame_files = sorted(Path(args.frames).glob("*.png"))
    frames = [load_image_png(p) for p in frame_files]
    rows = [int(r) for r in args.rows.split(",")] if args.rows else None
    report = metric_mod.video_smoothness(frames, rows=rows)
    payload = json.dumps(report.as_dict(), indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload)
    print(payload)
    if args.montage:
        use_rows = rows if rows is not None else metric_mod.default_rows(frames[0].height)
        slices = metric_mod.extract_slices(frames[: metric_mod.MAX_SLICE_FRAMES], use_rows)
        _slice_montage(slices, args.montage)
    return 0


def cmd_latent_preview(args) -> int:
    latent = read_latent(args.latent)
    cmap = ColorMap34.from_json(Path(args.map).read_text()) if args.map else load_default_colormap()
    save_image_png(args.out, apply_colormap(latent, cmap))
    print(f"wrote {args.out}")
    return 0


def cmd_fit_colormap(args) -> int:
    pairs = []
    for latent_path in sorted(Path(args.pairs).glob("*.nclf")):
        image_path = latent_path.with_suffix(".png")
        if not image_path.exists():
            raise ConfigError(f"no matching PNG for \"{latent_path.name}\"")
        latent = read_latent(latent_path)
        image = load_image_png(image_path)
        if (image.height, image.width) != (latent.height, latent.width):
            scale = image.height // latent.height
            if scale < 1 or image.height % latent.height or image.width != latent.width * scale:
                raise InvalidShapeError(
                    f"{image_path.name}: not an integer multiple of the latent grid"
                )
            image = box_downscale(image, scale)
        pairs.append((latent, image))
    if not pairs:
        raise ConfigError(f"no .nclf/.png pairs in \"{args.pairs}\"")
    cmap = fit_colormap(pairs)
    Path(args.out).write_text(cmap.to_json())
    print(f"wrote {args.out}")
    return 0


def cmd_probe_vae(args) -> int:
    img = load_image_png(args.image)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.backend == "bridge":
        if not args.bridge_cmd:
            raise ConfigError("bridge backend selected but no bridge command given")
        backend: Backend = BridgeBackend(args.bridge_cmd)
    else:
        backend = MockBackend(MockConfig(latent_shape=(4, img.height // 8, img.width // 8)))
    try:
        if args.probe == "roll":
            stages = [img, probe_roll(backend, img, dx=args.dx, dy=args.dy)]
            save_image_png(out_dir / "probe_roll.png", stages[1])
        else:
            stages = probe_idempotency(backend, img, k=args.k)
            for i, stage in enumerate(stages):
                save_image_png(out_dir / f"probe_stage_{i:02d}.png", stage)
        strip = np.concatenate(
            [np.pad(to_uint8(s), ((0, 0), (0, 2), (0, 0)), constant_values=255)
             for s in stages], axis=1)[:, :-2]
        from PIL import Image

        Image.fromarray(strip, mode="RGB").save(out_dir / "probe_montage.png")
    finally:
        backend.close()
    print(f"wrote probe output to {out_dir}")
    return 0


_EXIT_CODES = (
    (ConfigError, 2),
    ((TransportError, DeterminismError), 4),
    ((DegenerateSliceError, DegenerateChannelError, SingularityError), 5),
    ((LatentFormatError, InvalidShapeError, NoiseCineError, ValueError, IndexError, OSError), 3),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisecine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="generate frames from a scene config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--backend", choices=["mock", "bridge"], default=None)
    run.add_argument("--bridge-cmd", default=None)
    run.add_argument("--frames", type=int, default=None)
    run.add_argument("--dump-latents", action="store_true")
    run.set_defaults(func=cmd_run)

    met = sub.add_parser("metric", help="temporal smoothness report for a frames dir")
    met.add_argument("--frames", required=True)
    met.add_argument("--out", default=None)
    met.add_argument("--rows", default=None, help="comma-separated row indices")
    met.add_argument("--montage", default=None, help="write an X-T slice montage PNG")
    met.set_defaults(func=cmd_metric)

    prev = sub.add_parser("latent-preview", help="color-map a latent dump to PNG")
    prev.add_argument("--latent", required=True)
    prev.add_argument("--out", required=True)
    prev.add_argument("--map", default=None)
    prev.set_defaults(func=cmd_latent_preview)

    fit = sub.add_parser("fit-colormap", help="fit the latent->RGB map from pairs")
    fit.add_argument("--pairs", required=True, help="dir of matching .nclf/.png pairs")
    fit.add_argument("--out", required=True)
    fit.set_defaults(func=cmd_fit_colormap)

    probe = sub.add_parser("probe-vae", help="roll / idempotency probe montages")
    probe.add_argument("--image", required=True)
    probe.add_argument("--probe", choices=["roll", "idempotency"], required=True)
    probe.add_argument("--out", required=True)
    probe.add_argument("--dx", type=int, default=1)
    probe.add_argument("--dy", type=int, default=0)
    probe.add_argument("--k", type=int, default=3)
    probe.add_argument("--backend", choices=["mock", "bridge"], default="mock")
    probe.add_argument("--bridge-cmd", default=None)
    probe.set_defaults(func=cmd_probe_vae)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        for types, code in _EXIT_CODES:
            if isinstance(exc, types):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
