"""Wire encoding for the backend HTTP protocol (version 1).

Tensors travel as {"dtype": "u8"|"u16"|"f32", "shape": [...], "data": base64}
with raw little-endian C-order bytes; prompts as {"box": [y0,x0,y1,x1],
"pos": [[y,x], ...], "neg": [[y,x], ...]} (z-prefixed for 3D). Box corners are
inclusive. Errors arrive as {"error": {"code": ..., "message": ...}} with a
non-2xx status. Every request carries the header X-LT-Proto: 1.
"""

from __future__ import annotations

import base64
from typing import TYPE_CHECKING, Any

import numpy as np

from . import BackendError

if TYPE_CHECKING:
    from ..linking import PromptSet

PROTO_HEADER = "X-LT-Proto"
PROTO_VERSION = "1"

_DTYPES = {"u8": np.dtype("uint8"), "u16": np.dtype("uint16"), "f32": np.dtype("float32")}
_NAMES = {v: k for k, v in _DTYPES.items()}


def encode_tensor(arr: np.ndarray) -> dict[str, Any]:
    a = np.asarray(arr)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    if a.dtype not in _NAMES:
        raise BackendError("bad_tensor", f"unsupported dtype {a.dtype}")
    raw = np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
    return {
        "dtype": _NAMES[a.dtype],
        "shape": list(a.shape),
        "data": base64.b64encode(raw).decode("ascii"),
    }


def decode_tensor(obj: Any) -> np.ndarray:
    if not isinstance(obj, dict) or not {"dtype", "shape", "data"} <= set(obj):
        raise BackendError("bad_tensor", "tensor must carry dtype, shape, data")
    name = obj["dtype"]
    if name not in _DTYPES:
        raise BackendError("bad_tensor", f"unknown dtype {name!r}")
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except Exception as exc:
        raise BackendError("bad_tensor", f"invalid base64 payload: {exc}") from None
    shape = tuple(int(s) for s in obj["shape"])
    dtype = _DTYPES[name]
    expected = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
    if len(raw) != expected:
        raise BackendError("bad_tensor", f"payload is {len(raw)} bytes, shape needs {expected}")
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype, copy=False)
    return arr.reshape(shape).copy()


def encode_prompts(prompts: "PromptSet") -> dict[str, Any]:
    return {
        "box": [int(v) for v in prompts.box],
        "pos": [[int(c) for c in p] for p in prompts.positive],
        "neg": [[int(c) for c in p] for p in prompts.negative],
    }


def decode_prompts(obj: Any) -> "PromptSet":
    from ..linking import PromptSet

    if not isinstance(obj, dict) or "box" not in obj:
        raise BackendError("bad_prompt", "prompts must carry a box")
    box = tuple(int(v) for v in obj["box"])
    if len(box) not in (4, 6):
        raise BackendError("bad_prompt", f"box must have 4 or 6 entries, got {len(box)}")
    pos = tuple(tuple(int(c) for c in p) for p in obj.get("pos", []))
    neg = tuple(tuple(int(c) for c in p) for p in obj.get("neg", []))
    return PromptSet(box=box, positive=pos, negative=neg)


def error_envelope(code: str, message: str) -> dict[str, Any]:
    return {"error": {"code": code, "message": message}}
