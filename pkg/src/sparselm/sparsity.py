"""Static unstructured weight masks: build, apply, retire.

Masks are drawn once at initialization by seeded random pruning and never
change during pre-training. The training loop applies them to the weights
up front and filters gradients each step; with zero-initialized optimizer
moments this keeps masked coordinates exactly zero, which is numerically
identical to multiplying mask*weights in every forward pass. Densification
retires the mask, leaving the previously inactive weights at exactly 0.0
and trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import ParamStore, is_sparsifiable
from .tensor import Tensor


@dataclass(frozen=True)
class SparsityPlan:
    """Uniform level for every sparsifiable path, or explicit per-path levels."""

    level: float | None = None
    levels: dict[str, float] | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.level is None) == (self.levels is None):
            raise ContractError("SparsityPlan needs exactly one of `level` or `levels`")
        for s in [self.level] if self.level is not None else self.levels.values():
            if not (0.0 <= s < 1.0):
                raise ContractError(f"sparsity level {s} outside [0, 1)")

    def resolve(self, params: ParamStore) -> dict[str, float]:
        if self.level is not None:
            return {path: self.level for path in params.sparsifiable_paths()}
        for path in self.levels:
            if path not in params:
                raise ContractError(f"plan targets unknown parameter {path!r}")
            if not is_sparsifiable(path):
                raise ContractError(f"plan targets dense-only parameter {path!r}")
        return dict(self.levels)


def zero_count(level: float, size: int) -> int:
    """round(s*N), half away from zero."""
    return int(math.floor(level * size + 0.5))


@dataclass
class MaskSet:
    """Binary masks keyed by parameter path (1 = active, 0 = pruned)."""

    masks: dict[str, np.ndarray]
    plan: SparsityPlan
    levels: dict[str, float] = field(default_factory=dict)

    def __contains__(self, path):
        return path in self.masks

    def __getitem__(self, path):
        return self.masks[path]

    def paths(self):
        return list(self.masks)

    def zeros_in(self, path) -> int:
        return int((self.masks[path] == 0).sum())

    def total_zeros(self) -> int:
        return sum(self.zeros_in(p) for p in self.masks)

    def total_entries(self) -> int:
        return sum(m.size for m in self.masks.values())


def build_masks(params: ParamStore, plan: SparsityPlan) -> MaskSet:
    """Seeded random pruning: per path, exactly round(s*N) zeros at
    uniformly chosen positions. Deterministic per (plan, seed)."""
    levels = plan.resolve(params)
    rng = np.random.default_rng(plan.seed)
    masks = {}
    for path in sorted(levels):
        tensor = params[path]
        n = tensor.data.size
        z = zero_count(levels[path], n)
        flat = np.ones(n, dtype=tensor.data.dtype)
        if z:
            flat[rng.permutation(n)[:z]] = 0.0
        masks[path] = flat.reshape(tensor.data.shape)
    return MaskSet(masks=masks, plan=plan, levels=levels)


def global_sparsity(masks: MaskSet, total_params: int | None = None) -> float:
    """Ratio of inactive entries. Denominator is the sparsifiable-path total
    by default; pass the model's full parameter count to use the all-params
    denominator instead (callers should label which one they report)."""
    denom = total_params if total_params is not None else masks.total_entries()
    if denom == 0:
        return 0.0
    return masks.total_zeros() / denom


def apply_masks(masks: MaskSet, params: ParamStore) -> ParamStore:
    """Materialize mask*weights; unmasked paths pass through as copies."""
    out = ParamStore()
    for path, t in params.items():
        if path in masks:
            if masks[path].shape != t.data.shape:
                raise ContractError(
                    f"mask shape {masks[path].shape} != parameter shape {t.data.shape} at {path!r}"
                )
            data = t.data * masks[path]
        else:
            data = t.data.copy()
        out[path] = Tensor(data, requires_grad=t.requires_grad, dtype=t.dtype)
    return out


def mask_gradients(grads, masks: MaskSet):
    """Zero gradient entries wherever the mask is 0, in place. Run before
    any optimizer-state update so moments of pruned coordinates stay 0."""
    for path, g in grads.items():
        if path in masks:
            g *= masks[path]
    return grads


def densify(params: ParamStore, masks: MaskSet) -> ParamStore:
    """Retire the mask: previously pruned positions come back as exact 0.0
    and every position is trainable afterwards."""
    out = ParamStore()
    for path, t in params.items():
        data = t.data * masks[path] if path in masks else t.data.copy()
        out[path] = Tensor(data, requires_grad=True, dtype=t.dtype)
    return out
