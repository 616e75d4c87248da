"""Client side of the backend wire protocol: spawns a bridge subprocess and
drives it over stdio.

Wire format (both directions): one JSON header line terminated by ``\\n``,
immediately followed by the raw payload: the concatenation of the tensors
named in ``shapes``/``dtypes`` as little-endian float32 in C order.

Request header:  {"version": 1, "request_id": n, "op": str,
                  "shapes": [[...], ...], "dtypes": ["f32", ...], "meta": {...}}
Response header: {"version": 1, "request_id": n, "status": "ok"|"error",
                  "shapes": [...], "dtypes": [...], "meta": {...},
                  "error": {"type": str, "message": str}}

Ops: capabilities, prepare_conditioning, encode, decode, add_noise, denoise.
"""

from __future__ import annotations

import json
import shlex
import subprocess

import numpy as np

from .backends import Backend, BackendCapabilities, ConditioningHandle
from .core import ImageField, LatentField
from .errors import ProtocolError, TransportError

PROTOCOL_VERSION = 1


def pack_tensors(tensors) -> tuple[list[list[int]], list[str], bytes]:
    """Header shape/dtype lists plus the concatenated payload for tensors."""
    shapes, dtypes, chunks = [], [], []
    for t in tensors:
        arr = np.ascontiguousarray(np.asarray(t), dtype="<f4")
        shapes.append(list(arr.shape))
        dtypes.append("f32")
        chunks.append(arr.tobytes(order="C"))
    return shapes, dtypes, b"".join(chunks)


def unpack_tensors(shapes, dtypes, payload: bytes) -> list[np.ndarray]:
    out = []
    offset = 0
    for shape, dtype in zip(shapes, dtypes):
        if dtype != "f32":
            raise ProtocolError(f"unsupported wire dtype {dtype!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise ProtocolError("payload shorter than header shapes claim")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        out.append(arr.reshape(shape).astype(np.float32))
        offset += nbytes
    if offset != len(payload):
        raise ProtocolError(f"{len(payload) - offset} unexpected payload bytes")
    return out


class BridgeBackend(Backend):
    """Backend implementation backed by a bridge subprocess.

    The command is spawned on construction and a capabilities handshake is
    performed immediately; requests are strictly serialized on the pipe.
    """

    def __init__(self, command) -> None:
        super().__init__()
        if isinstance(command, str):
            command = shlex.split(command)
        try:
            self._proc = subprocess.Popen(
                command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        except OSError as exc:
            raise TransportError(f"failed to spawn bridge {command!r}: {exc}") from exc
        self._next_id = 1
        try:
            meta = self._request("capabilities")[0]
            self._caps = BackendCapabilities(
                deterministic=bool(meta["deterministic"]),
                concurrency_safe=bool(meta["concurrency_safe"]),
                latent_shape=tuple(int(v) for v in meta["latent_shape"]),
                scale_factor=int(meta["scale_factor"]),
                total_steps=int(meta["total_steps"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            self.close()
            raise ProtocolError(f"bad capabilities response from bridge: {exc}") from exc
        except BaseException:
            self.close()
            raise

    # -- transport ------------------------------------------------------------

    def _request(self, op: str, tensors=(), meta=None):
        proc = self._proc
        if proc.poll() is not None:
            raise TransportError(f"bridge exited with code {proc.returncode}")
        shapes, dtypes, payload = pack_tensors(tensors)
        request_id = self._next_id
        self._next_id += 1
        header = {
            "version": PROTOCOL_VERSION,
            "request_id": request_id,
            "op": op,
            "shapes": shapes,
            "dtypes": dtypes,
            "meta": meta or {},
        }
        try:
            proc.stdin.write(json.dumps(header).encode() + b"\n")
            proc.stdin.write(payload)
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"bridge pipe closed while sending {op}") from exc

        line = proc.stdout.readline()
        if not line:
            raise TransportError(f"bridge closed the connection during {op}")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"unparseable response header: {line[:200]!r}") from exc
        if resp.get("request_id") != request_id:
            raise ProtocolError(
                f"response id {resp.get('request_id')} != request id {request_id}"
            )
        if resp.get("status") == "error":
            err = resp.get("error") or {}
            raise TransportError(
                f"bridge error for {op}: {err.get('type', 'unknown')}: "
                f"{err.get('message', '')}"
            )
        if resp.get("status") != "ok":
            raise ProtocolError(f"unexpected response status {resp.get('status')!r}")
        shapes = resp.get("shapes", [])
        dtypes = resp.get("dtypes", [])
        total = sum(4 * int(np.prod(s, dtype=np.int64)) for s in shapes)
        blob = proc.stdout.read(total) if total else b""
        if len(blob) != total:
            raise TransportError("bridge closed mid-payload")
        return resp.get("meta", {}), unpack_tensors(shapes, dtypes, blob)

    def close(self) -> None:
        proc = getattr(self, "_proc", None)
        if proc is None:
            return
        try:
            if proc.stdin:
                proc.stdin.close()
            proc.wait(timeout=5)
        except Exception:
            proc.kill()
            proc.wait()
        finally:
            if proc.stdout:
                proc.stdout.close()

    # -- contract ---------------------------------------------------------------

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    def _encode(self, image: ImageField) -> LatentField:
        _, tensors = self._request("encode", [image.data])
        return LatentField(tensors[0])

    def _decode(self, latent: LatentField) -> ImageField:
        _, tensors = self._request("decode", [latent.data])
        return ImageField(tensors[0])

    def _add_noise(self, latent0: LatentField, noise: LatentField, step: int) -> LatentField:
        _, tensors = self._request(
            "add_noise", [latent0.data, noise.data], {"step": step}
        )
        return LatentField(tensors[0])

    def _denoise(self, latent: LatentField, step_from: int, step_to: int,
                 conditioning: ConditioningHandle) -> LatentField:
        if not isinstance(conditioning, ConditioningHandle) or conditioning.backend_id != id(self):
            raise ValueError("conditioning handle was not minted by this backend")
        meta = {"step_from": step_from, "step_to": step_to, "handle": conditioning.token}
        _, tensors = self._request("denoise", [latent.data], meta)
        return LatentField(tensors[0])

    def _prepare_conditioning(self, prompt: str, segmap: ImageField | None) -> ConditioningHandle:
        tensors = [segmap.data] if segmap is not None else []
        meta, _ = self._request("prepare_conditioning", tensors, {"prompt": prompt})
        token = meta.get("handle")
        if not isinstance(token, str):
            raise ProtocolError(f"bridge returned no conditioning handle: {meta!r}")
        return ConditioningHandle(backend_id=id(self), token=token)
