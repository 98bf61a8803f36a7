"""Magnitude-based pruning masks.

The smallest-magnitude fraction of weights is pruned; survivors form a
per-tensor boolean mask (True = survivor). Ties at the threshold are broken
by index order, lower index pruned first, so masks are deterministic.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError, ValidationError
from .model_io import ModelBundle, as_matrix


@dataclass
class PruneMask:
    """Survivor masks for a set of named tensors."""

    masks: dict[str, np.ndarray]   # name -> bool array, True = survivor
    pruning_rate: float            # requested rate
    scope: str

    def survivor_count(self, name: str | None = None) -> int:
        if name is not None:
            return int(self.masks[name].sum())
        return int(sum(m.sum() for m in self.masks.values()))

    def total_count(self, name: str | None = None) -> int:
        if name is not None:
            return int(self.masks[name].size)
        return int(sum(m.size for m in self.masks.values()))

    def achieved_rate(self) -> float:
        total = self.total_count()
        if total == 0:
            return 0.0
        return 1.0 - self.survivor_count() / total

    def get(self, name: str) -> np.ndarray | None:
        return self.masks.get(name)


def _pruned_indices(magnitudes: np.ndarray, rate: float) -> np.ndarray:
    n = magnitudes.size
    n_prune = int(np.ceil(rate * n))
    if n_prune == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(magnitudes, kind="stable")
    return order[:n_prune]


def magnitude_prune(
    bundle: ModelBundle,
    rate: float,
    scope: str = "per-tensor",
    tensor_filter: Callable[[str], bool] | None = None,
) -> PruneMask:
    """Build survivor masks pruning the `rate` fraction of smallest |w|.

    scope "per-tensor" ranks magnitudes within each tensor; "global" pools
    all selected tensors before thresholding.
    """
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"pruning rate must be in [0, 1), got {rate}")
    if scope not in ("per-tensor", "global"):
        raise ValidationError(f"unknown pruning scope {scope!r}")
    selected = [
        (name, as_matrix(m))
        for name, m in bundle.tensors
        if tensor_filter is None or tensor_filter(name)
    ]
    if not selected:
        raise ValidationError("tensor filter selected no tensors")
    masks: dict[str, np.ndarray] = {}
    if scope == "per-tensor":
        for name, m in selected:
            mask = np.ones(m.size, dtype=bool)
            mask[_pruned_indices(np.abs(m).ravel(), rate)] = False
            masks[name] = mask.reshape(m.shape)
    else:
        pooled = np.concatenate([np.abs(m).ravel() for _, m in selected])
        flat = np.ones(pooled.size, dtype=bool)
        flat[_pruned_indices(pooled, rate)] = False
        offset = 0
        for name, m in selected:
            masks[name] = flat[offset : offset + m.size].reshape(m.shape)
            offset += m.size
    return PruneMask(masks=masks, pruning_rate=rate, scope=scope)


def apply_mask(m, mask) -> np.ndarray:
    """Zero the pruned positions of a matrix, survivors unchanged."""
    m = as_matrix(m)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != m.shape:
        raise DimensionError(f"mask shape {mask.shape} != matrix shape {m.shape}")
    out = m.copy()
    out[~mask] = 0.0
    return out


def apply_mask_bundle(bundle: ModelBundle, mask: PruneMask) -> ModelBundle:
    """Bundle copy with every masked tensor zeroed at pruned positions."""
    updates = {
        name: apply_mask(bundle.tensor(name), m) for name, m in mask.masks.items()
    }
    return bundle.replaced(updates)


def mask_to_bundle(mask: PruneMask) -> ModelBundle:
    """Encode a mask as a 0/1-valued IQWT bundle for standalone storage."""
    tensors = [(name, m.astype(np.float64)) for name, m in mask.masks.items()]
    metadata = {
        "kind": "prune_mask",
        "pruning_rate": repr(mask.pruning_rate),
        "scope": mask.scope,
    }
    return ModelBundle(tensors, metadata)


def mask_from_bundle(bundle: ModelBundle) -> PruneMask:
    if bundle.metadata.get("kind") != "prune_mask":
        raise ValidationError("bundle does not hold a prune mask")
    masks = {name: as_matrix(m) > 0.5 for name, m in bundle.tensors}
    return PruneMask(
        masks=masks,
        pruning_rate=float(bundle.metadata.get("pruning_rate", "0.0")),
        scope=bundle.metadata.get("scope", "per-tensor"),
    )
