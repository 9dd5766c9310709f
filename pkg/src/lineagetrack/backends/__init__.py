"""Promptable segmentation backends.

A backend is a stateless service with up to three pure operations: propagate a
mask between a patch pair, embed a (patch, box) pair into a memory feature,
and segment a 3D patch from a single click. Engines depend only on this
surface; the deterministic oracle serves tests, the remote client talks to a
model server over HTTP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Protocol, runtime_checkable

import numpy as np

if TYPE_CHECKING:
    from ..linking import PromptSet


class BackendError(RuntimeError):
    """A backend call failed; ``code`` is machine-readable."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Capabilities:
    propagate: bool = True
    embed: bool = True
    segment3d: bool = True


@dataclass(frozen=True)
class MemoryFeature:
    """Fixed-length embedding of a (patch, mask) pair."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size == 0:
            raise ValueError("feature must be non-empty")
        if not np.isfinite(v).all():
            raise ValueError("feature entries must be finite")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.size


@runtime_checkable
class PromptableBackend(Protocol):
    capabilities: Capabilities

    def propagate(self, patch_ref: np.ndarray, patch_target: np.ndarray,
                  prompts: "PromptSet") -> np.ndarray:
        """Predict the prompted object's mask on the target patch.

        Returns a boolean array of the target patch's shape; all-False means
        nothing was found.
        """
        ...

    def embed(self, patch: np.ndarray, box: tuple[int, int, int, int]
              ) -> tuple[np.ndarray, MemoryFeature]:
        """Predict a mask under the box prompt and embed (patch, mask)."""
        ...

    def segment3d(self, volume_patch: np.ndarray, click: tuple[int, int, int]
                  ) -> np.ndarray:
        """Segment the connected 3D object at the click; empty if background."""
        ...


from .oracle import OracleBackend  # noqa: E402
from .remote import RemoteBackend  # noqa: E402

__all__ = [
    "BackendError",
    "Capabilities",
    "MemoryFeature",
    "PromptableBackend",
    "OracleBackend",
    "RemoteBackend",
]
