"""CLI entry: pick a stack, then serve the wire protocol on stdio."""

import argparse
import sys

from .server import serve
from .stacks import build_stack


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sd-bridge", description=__doc__)
    parser.add_argument("--stack", choices=["synthetic", "sd15"], default="synthetic")
    parser.add_argument("--steps", type=int, default=30,
                        help="denoising steps the schedule is built for")
    parser.add_argument("--latent-shape", dest="latent_shape", default="4,64,64")
    parser.add_argument("--scale-factor", dest="scale_factor", type=int, default=8)
    parser.add_argument("--mix", type=float, default=0.1,
                        help="synthetic stack blur mixing rate")
    parser.add_argument("--model", default=None,
                        help="sd15: model path or hub id (or SDBRIDGE_MODEL)")
    parser.add_argument("--guidance", type=float, default=7.5)
    parser.add_argument("--controlnet", default=None,
                        help="sd15: optional ControlNet path/id for segmentation maps")
    parser.add_argument("--device", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        stack = build_stack(args)
    except Exception as exc:
        print(f"fatal: failed to initialize {args.stack} stack: {exc}", file=sys.stderr)
        return 2
    print(f"sd-bridge serving stack={stack.name} steps={stack.total_steps}", file=sys.stderr)
    return serve(stack)


if __name__ == "__main__":
    sys.exit(main())
