"""Wire protocol framing: one JSON header line, then a raw binary payload.

Request header (client -> server):
    {"version": 1, "request_id": n, "op": str,
     "shapes": [[...], ...], "dtypes": ["f32", ...], "meta": {...}}

Response header (server -> client):
    {"version": 1, "request_id": n, "status": "ok" | "error",
     "shapes": [...], "dtypes": [...], "meta": {...},
     "error": {"type": str, "message": str}}     # only when status == "error"

The payload is the concatenation of the tensors named in shapes/dtypes as
little-endian float32 in C order; its byte length is exactly
sum(4 * prod(shape)).  The version field is mandatory in both directions.
"""

from __future__ import annotations

import json

import numpy as np

PROTOCOL_VERSION = 1

# Refuse absurd payload claims instead of trying to allocate them.
MAX_PAYLOAD_BYTES = 1 << 30


class WireError(Exception):
    """A header failed validation; carries a short machine-readable type."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def payload_size(shapes) -> int:
    total = 0
    for shape in shapes:
        count = 1
        for dim in shape:
            count *= int(dim)
        total += 4 * count
    return total


def parse_request(line: bytes) -> dict:
    """Parse and validate one request header line."""
    try:
        header = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise WireError("protocol", f"unparseable header: {exc}") from None
    if not isinstance(header, dict):
        raise WireError("protocol", "header must be a JSON object")
    if header.get("version") != PROTOCOL_VERSION:
        raise WireError("protocol", f"unsupported protocol version {header.get('version')!r}")
    if not isinstance(header.get("request_id"), int):
        raise WireError("protocol", "request_id must be an integer")
    if not isinstance(header.get("op"), str):
        raise WireError("protocol", "op must be a string")
    shapes = header.get("shapes", [])
    dtypes = header.get("dtypes", [])
    if not isinstance(shapes, list) or not all(
        isinstance(s, list) and all(isinstance(d, int) and d >= 0 for d in s) for s in shapes
    ):
        raise WireError("protocol", "shapes must be a list of integer lists")
    if not isinstance(dtypes, list) or len(dtypes) != len(shapes):
        raise WireError("protocol", "dtypes must parallel shapes")
    if any(dt != "f32" for dt in dtypes):
        raise WireError("protocol", "only f32 tensors are supported")
    if payload_size(shapes) > MAX_PAYLOAD_BYTES:
        raise WireError("protocol", "payload size exceeds the limit")
    if not isinstance(header.get("meta", {}), dict):
        raise WireError("protocol", "meta must be an object")
    header.setdefault("meta", {})
    return header


def split_tensors(shapes, payload: bytes) -> list[np.ndarray]:
    out = []
    offset = 0
    for shape in shapes:
        count = 1
        for dim in shape:
            count *= int(dim)
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        out.append(arr.reshape(shape).astype(np.float32))
        offset += 4 * count
    return out


def encode_response(request_id, tensors=(), meta=None, error=None) -> tuple[bytes, bytes]:
    """Build the response header line and payload bytes."""
    shapes, chunks = [], []
    for t in tensors:
        arr = np.ascontiguousarray(np.asarray(t), dtype="<f4")
        shapes.append(list(arr.shape))
        chunks.append(arr.tobytes(order="C"))
    header = {
        "version": PROTOCOL_VERSION,
        "request_id": request_id,
        "status": "error" if error else "ok",
        "shapes": shapes,
        "dtypes": ["f32"] * len(shapes),
        "meta": meta or {},
    }
    if error:
        header["error"] = error
    return json.dumps(header).encode() + b"\n", b"".join(chunks)
