"""SVD-form LoRA: rank identities, masking, allocation, and pruning.

A LoRA module adds x @ P @ diag(lambda) @ Qm to a frozen linear layer. The
unit of scoring and pruning is one rank: the triple (lambda[i], P column i,
Qm row i). Rank identities are assigned at attach time and survive pruning
(a pruned module remembers the original index of each surviving column), so
reports and allocations stay meaningful across structural changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .errors import BudgetError, ContractError, DimensionError, StateError
from .rng import make_rng

if TYPE_CHECKING:
    from .model import Model

KINDS = ("Q", "K", "V", "O", "G", "U", "D")
_KIND_ORDER = {k: i for i, k in enumerate(KINDS)}


@dataclass(frozen=True)
class ModuleId:
    """One linear-module site: (layer, kind) with kind in Q,K,V,O,G,U,D."""

    layer: int
    kind: str

    def key(self) -> tuple[int, int]:
        return (self.layer, _KIND_ORDER[self.kind])

    def __str__(self) -> str:
        return f"{self.layer}.{self.kind}"


@dataclass(frozen=True)
class RankId:
    """Global identity of one LoRA rank; index is the at-attach rank index."""

    module: ModuleId
    index: int

    def key(self) -> tuple[int, int, int]:
        return (*self.module.key(), self.index)

    def __str__(self) -> str:
        return f"{self.module}.{self.index}"


@dataclass(frozen=True)
class Coalition:
    """The set of ranks kept active; everything else gets lambda forced to 0."""

    active_set: frozenset[RankId]


class LoRAModule:
    """(P, lambda, Qm) triple with per-rank active flags.

    P: (d1, r), lambda: (r,), Qm: (r, d2); rank_ids maps each current column
    to its original rank index.
    """

    def __init__(self, P: ad.Tensor, lam: ad.Tensor, Qm: ad.Tensor,
                 active: np.ndarray, rank_ids: np.ndarray):
        self.P = P
        self.lam = lam
        self.Qm = Qm
        self.active = active
        self.rank_ids = rank_ids

    @property
    def r(self) -> int:
        return self.lam.data.shape[0]


def init_lora_module(d1: int, d2: int, r: int, seed: int) -> LoRAModule:
    """Zero singular values, Gaussian(0, 1/sqrt(r)) factors, all ranks active."""
    if min(d1, d2, r) < 1:
        raise ContractError(f"init_lora_module dims must be >= 1, got ({d1}, {d2}, {r})")
    rng = make_rng(seed, "lora-init")
    std = 1.0 / np.sqrt(r)
    P = ad.parameter(rng.normal(0.0, std, size=(d1, r)))
    Qm = ad.parameter(rng.normal(0.0, std, size=(r, d2)))
    lam = ad.parameter(np.zeros(r))
    return LoRAModule(P, lam, Qm, np.ones(r, dtype=bool), np.arange(r))


def lora_forward(x: ad.Tensor, W: ad.Tensor, mod: LoRAModule,
                 overlay: np.ndarray | None = None) -> ad.Tensor:
    """x @ W plus the low-rank increment, with inactive/masked ranks excluded.

    overlay is an optional per-call boolean mask over the module's current
    columns; it composes with the persistent active flags. The increment is
    always added (even when fully masked) so gradients keep flowing to the
    masked parameters as exact zeros rather than disappearing from the graph.
    """
    if x.data.shape[-1] != W.data.shape[0] or mod.P.data.shape[0] != W.data.shape[0] \
            or mod.Qm.data.shape[1] != W.data.shape[1]:
        raise DimensionError(
            f"lora_forward shapes: x {x.data.shape}, W {W.data.shape}, "
            f"P {mod.P.data.shape}, Qm {mod.Qm.data.shape}")
    mask = mod.active if overlay is None else (mod.active & overlay)
    base = ad.matmul(x, W)
    lam_eff = mod.lam if mask.all() else ad.elementwise_mul(mod.lam, ad.constant(mask.astype(np.float64)))
    inc = ad.matmul(ad.elementwise_mul(ad.matmul(x, mod.P), lam_eff), mod.Qm)
    return ad.add(base, inc)


# ---------------------------------------------------------------------------
# rank enumeration and coalition masking
# ---------------------------------------------------------------------------

def sorted_modules(model: "Model") -> list[ModuleId]:
    return sorted(model.loras.keys(), key=ModuleId.key)


def all_rank_ids(model: "Model") -> list[RankId]:
    """Every unpruned rank, in canonical (layer, kind, index) order."""
    out: list[RankId] = []
    for mid in sorted_modules(model):
        out.extend(RankId(mid, int(i)) for i in model.loras[mid].rank_ids)
    return out


def coalition_overlay(model: "Model", c: Coalition) -> dict[ModuleId, np.ndarray]:
    """Per-module boolean masks implementing the coalition, for lora_forward.

    Read-only alternative to apply_coalition: safe for concurrent scoring.
    """
    known = set(all_rank_ids(model))
    for rid in c.active_set:
        if rid not in known:
            raise KeyError(f"unknown rank {rid}")
    overlay = {}
    for mid in sorted_modules(model):
        mod = model.loras[mid]
        keep = np.array([RankId(mid, int(i)) in c.active_set for i in mod.rank_ids], dtype=bool)
        if not keep.all():
            overlay[mid] = keep
    return overlay


class CoalitionMask:
    """Reversible in-place coalition application; restore() is bitwise exact."""

    def __init__(self, model: "Model", saved: dict[ModuleId, np.ndarray]):
        self._model = model
        self._saved = saved
        self._restored = False

    def restore(self) -> None:
        if self._restored:
            raise StateError("coalition mask already restored")
        for mid, lam_copy in self._saved.items():
            self._model.loras[mid].lam.data[...] = lam_copy
        self._restored = True


def apply_coalition(model: "Model", c: Coalition) -> CoalitionMask:
    """Force lambda of every rank outside the coalition to zero, reversibly."""
    overlay = coalition_overlay(model, c)
    saved = {}
    for mid, keep in overlay.items():
        lam = model.loras[mid].lam.data
        saved[mid] = lam.copy()
        lam[~keep] = 0.0
    return CoalitionMask(model, saved)


# ---------------------------------------------------------------------------
# allocation
# ---------------------------------------------------------------------------

@dataclass
class AllocationConfig:
    """Per-module kept-rank counts; the bridge from stage 1 to stage 2.

    kept_ranks carries the exact rank identities when the allocation was
    produced in-process (needed for structural pruning); it is absent on
    allocations loaded from disk, where only counts matter.
    """

    counts: dict[ModuleId, int]
    kept_ranks: frozenset[RankId] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def total_kept(self) -> int:
        return sum(self.counts.values())


def allocation_from_scores(report, R_target: int) -> AllocationConfig:
    """Keep the R_target globally highest-scoring ranks; ties break by RankId.

    report: ImportanceReport (scores keyed by RankId).
    """
    scores = report.scores
    if R_target < 1:
        raise ContractError(f"R_target must be positive, got {R_target}")
    if R_target > len(scores):
        raise BudgetError(f"R_target {R_target} exceeds {len(scores)} scored ranks")
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0].key()))
    kept = frozenset(rid for rid, _ in ranked[:R_target])
    counts: dict[ModuleId, int] = {}
    for rid in scores:
        counts.setdefault(rid.module, 0)
        if rid in kept:
            counts[rid.module] += 1
    meta = {
        "r_init": max((rid.index for rid in scores), default=-1) + 1,
        "R_init": len(scores),
        "R_target": R_target,
        "method": getattr(report, "method", "unknown"),
        "split": getattr(report, "split", "unknown"),
        "seed": getattr(report, "seed", 0),
        "n_coalitions": getattr(report, "n_coalitions", 0),
    }
    return AllocationConfig(counts=counts, kept_ranks=kept, meta=meta)


def uniform_allocation(module_ids: list[ModuleId], R_target: int) -> AllocationConfig:
    """Spread R_target as evenly as possible; remainder to canonical-first modules."""
    if R_target < 1:
        raise ContractError(f"R_target must be positive, got {R_target}")
    mids = sorted(module_ids, key=ModuleId.key)
    base, extra = divmod(R_target, len(mids))
    counts = {mid: base + (1 if i < extra else 0) for i, mid in enumerate(mids)}
    return AllocationConfig(counts=counts, meta={"method": "uniform", "R_target": R_target})


def prune_to_allocation(model: "Model", alloc: AllocationConfig) -> "Model":
    """Physically drop pruned ranks; surviving values are copied untouched."""
    if alloc.kept_ranks is None:
        raise StateError("allocation has no rank identities; it was not derived from this model")
    known = set(all_rank_ids(model))
    stray = [rid for rid in alloc.kept_ranks if rid not in known]
    if stray:
        raise StateError(f"allocation references unknown ranks, e.g. {stray[0]}")
    for mid in sorted_modules(model):
        mod = model.loras[mid]
        keep = [j for j, oi in enumerate(mod.rank_ids) if RankId(mid, int(oi)) in alloc.kept_ranks]
        want = alloc.counts.get(mid, 0)
        if len(keep) != want:
            raise StateError(f"allocation count mismatch at {mid}: {len(keep)} kept vs {want} declared")
        if not keep:
            del model.loras[mid]
            continue
        idx = np.asarray(keep)
        mod.P = ad.parameter(mod.P.data[:, idx])
        mod.lam = ad.parameter(mod.lam.data[idx])
        mod.Qm = ad.parameter(mod.Qm.data[idx, :])
        mod.active = mod.active[idx].copy()
        mod.rank_ids = mod.rank_ids[idx].copy()
    return model
