"""In-memory multi-view datasets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import StructuralError
from .views import ViewKind


@dataclass
class ViewData:
    """One view's matrix plus its optional sample mask (N,) or entry mask (N, D)."""

    name: str
    kind: ViewKind
    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.kind = ViewKind(self.kind)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise StructuralError(f"view {self.name!r}: data must be a matrix")
        if self.mask is not None:
            m = np.asarray(self.mask)
            if m.shape not in ((self.values.shape[0],), self.values.shape):
                raise StructuralError(f"view {self.name!r}: mask shape {m.shape} does not match data "
                                      f"{self.values.shape}")
            if not np.all(np.isin(m, (0, 1))):
                raise StructuralError(f"view {self.name!r}: mask must be binary")
            self.mask = m.astype(bool)

    @property
    def sample_mask(self) -> Optional[np.ndarray]:
        if self.mask is None:
            return None
        return self.mask if self.mask.ndim == 1 else self.mask.any(axis=1)

    @property
    def entry_mask(self) -> Optional[np.ndarray]:
        if self.mask is None or self.mask.ndim == 1:
            return None
        return self.mask.astype(float)


@dataclass
class Dataset:
    views: List[ViewData]

    def __post_init__(self):
        names = [v.name for v in self.views]
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate view names in {names}")
        ns = {v.values.shape[0] for v in self.views}
        if len(ns) > 1:
            raise StructuralError(f"views disagree on the number of samples: {sorted(ns)}")

    @property
    def n(self) -> int:
        return self.views[0].values.shape[0] if self.views else 0

    def __getitem__(self, name: str) -> ViewData:
        for v in self.views:
            if v.name == name:
                return v
        raise StructuralError(f"unknown view {name!r}")

    def content_hash(self) -> str:
        """64-bit hex digest over names, kinds, values and masks."""
        h = hashlib.blake2b(digest_size=8)
        for v in self.views:
            h.update(v.name.encode())
            h.update(v.kind.value.encode())
            h.update(np.asarray(v.values.shape, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(v.values, dtype="<f8").tobytes())
            if v.mask is not None:
                h.update(np.ascontiguousarray(v.mask, dtype=np.uint8).tobytes())
        return h.hexdigest()
