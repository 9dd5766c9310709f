"""HTTP client for model servers speaking the version-1 wire protocol."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

import numpy as np
import requests

from . import BackendError, Capabilities, MemoryFeature
from .wire import (PROTO_HEADER, PROTO_VERSION, decode_tensor, encode_prompts,
                   encode_tensor)

if TYPE_CHECKING:
    from ..linking import PromptSet


class RemoteBackend:
    """Talks to /v1/propagate, /v1/embed, /v1/segment3d on a model server.

    Calls are stateless; the session pools connections. Each request gets one
    retry on transport failure, then the error propagates as BackendError.
    """

    capabilities = Capabilities(propagate=True, embed=True, segment3d=True)

    def __init__(self, base_url: str, timeout: float = 120.0, retries: int = 1):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self._session = requests.Session()
        self._session.headers[PROTO_HEADER] = PROTO_VERSION

    def close(self):
        self._session.close()

    def _post(self, endpoint: str, payload: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.base_url}{endpoint}"
        last_exc: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = self._session.post(url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            return self._handle(resp)
        raise BackendError("transport", f"request to {url} failed: {last_exc}")

    @staticmethod
    def _handle(resp: requests.Response) -> dict[str, Any]:
        proto = resp.headers.get(PROTO_HEADER)
        if proto is not None and proto != PROTO_VERSION:
            raise BackendError("proto_mismatch", f"server speaks protocol {proto}")
        try:
            body = resp.json()
        except ValueError:
            raise BackendError("bad_response", f"non-JSON response (status {resp.status_code})")
        if resp.status_code // 100 != 2:
            err = body.get("error", {}) if isinstance(body, dict) else {}
            raise BackendError(err.get("code", "http_error"),
                               err.get("message", f"status {resp.status_code}"))
        return body

    def propagate(self, patch_ref: np.ndarray, patch_target: np.ndarray,
                  prompts: "PromptSet") -> np.ndarray:
        body = self._post("/v1/propagate", {
            "ref": encode_tensor(patch_ref),
            "target": encode_tensor(patch_target),
            "prompts": encode_prompts(prompts),
        })
        return decode_tensor(body["mask"]).astype(bool)

    def embed(self, patch: np.ndarray, box: tuple[int, int, int, int]
              ) -> tuple[np.ndarray, MemoryFeature]:
        body = self._post("/v1/embed", {
            "patch": encode_tensor(patch),
            "box": [int(v) for v in box],
        })
        mask = decode_tensor(body["mask"]).astype(bool)
        feature = decode_tensor(body["feature"]).astype(np.float64)
        return mask, MemoryFeature(feature)

    def segment3d(self, volume_patch: np.ndarray, click: tuple[int, int, int]
                  ) -> np.ndarray:
        body = self._post("/v1/segment3d", {
            "patch": encode_tensor(volume_patch),
            "click": [int(c) for c in click],
        })
        return decode_tensor(body["mask"]).astype(bool)
