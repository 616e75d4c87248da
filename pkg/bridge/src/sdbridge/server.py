"""Serve loop: strictly serialized request handling on stdio.

Guarantees: every request line gets exactly one response; malformed headers
get an error response (and are assumed to carry no payload) instead of
crashing the server; unknown ops get an error response, never silence.
All logging goes to stderr; stdout is the wire.
"""

from __future__ import annotations

import sys

import numpy as np

from .protocol import WireError, encode_response, parse_request, payload_size, split_tensors


class _RequestError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _tensor(tensors, index, what):
    if len(tensors) <= index:
        raise _RequestError("bad_request", f"missing tensor {index} ({what})")
    return tensors[index]


def _meta_int(meta, key):
    value = meta.get(key)
    if not isinstance(value, int):
        raise _RequestError("bad_request", f"meta.{key} must be an integer")
    return value


def handle_request(stack, header, tensors):
    """Dispatch one parsed request; returns (tensors, meta)."""
    op = header["op"]
    meta = header["meta"]
    if op == "capabilities":
        return [], {
            "deterministic": bool(stack.deterministic),
            "concurrency_safe": False,
            "latent_shape": list(stack.latent_shape),
            "scale_factor": stack.scale_factor,
            "total_steps": stack.total_steps,
            "stack": stack.name,
        }
    if op == "prepare_conditioning":
        prompt = meta.get("prompt", "")
        if not isinstance(prompt, str):
            raise _RequestError("bad_request", "meta.prompt must be a string")
        segmap = tensors[0] if tensors else None
        return [], {"handle": stack.prepare_conditioning(prompt, segmap)}
    if op == "encode":
        return [stack.encode(_tensor(tensors, 0, "image"))], {}
    if op == "decode":
        return [stack.decode(_tensor(tensors, 0, "latent"))], {}
    if op == "add_noise":
        out = stack.add_noise(
            _tensor(tensors, 0, "latent0"),
            _tensor(tensors, 1, "noise"),
            _meta_int(meta, "step"),
        )
        return [out], {}
    if op == "denoise":
        handle = meta.get("handle")
        if not isinstance(handle, str):
            raise _RequestError("bad_request", "meta.handle must be a string")
        out = stack.denoise(
            _tensor(tensors, 0, "latent"),
            _meta_int(meta, "step_from"),
            _meta_int(meta, "step_to"),
            handle,
        )
        return [out], {}
    raise _RequestError("unknown_op", f"unknown op {op!r}")


def serve(stack, stdin=None, stdout=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer

    def respond(request_id, tensors=(), meta=None, error=None):
        head, payload = encode_response(request_id, tensors, meta, error)
        stdout.write(head)
        if payload:
            stdout.write(payload)
        stdout.flush()

    while True:
        line = stdin.readline()
        if not line:
            return 0
        if not line.strip():
            continue
        try:
            header = parse_request(line)
        except WireError as exc:
            respond(None, error={"type": exc.kind, "message": str(exc)})
            continue
        expected = payload_size(header["shapes"])
        payload = stdin.read(expected) if expected else b""
        if len(payload) != expected:
            respond(header["request_id"],
                    error={"type": "protocol", "message": "payload truncated"})
            return 0  # the stream cannot be resynchronized after a short read
        try:
            tensors = split_tensors(header["shapes"], payload)
            out_tensors, meta = handle_request(stack, header, tensors)
            for t in out_tensors:
                if not np.all(np.isfinite(t)):
                    raise _RequestError("numeric", "non-finite values in result")
            respond(header["request_id"], out_tensors, meta)
        except _RequestError as exc:
            respond(header["request_id"], error={"type": exc.kind, "message": str(exc)})
        except Exception as exc:  # noqa: BLE001 - every request gets a response
            respond(header["request_id"],
                    error={"type": type(exc).__name__, "message": str(exc)})
