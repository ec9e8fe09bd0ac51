"""Importance scores for LoRA ranks.

The headline score averages a per-coalition gradient-sensitivity score over a
plan of randomly sampled rank coalitions (each drawn together with its set
complement, so every rank is active in exactly half the plan). Baselines
(single-coalition sensitivity, magnitude) and an exact Shapley-value oracle
over explicit value functions support the ablation and oracle studies.

Per-coalition score of rank i with host dims (d1, d2):

    score(i | S) = |lam_i * g_lam_i|
                 + mean_j |P[j, i] * g_P[j, i]|
                 + mean_j |Qm[i, j] * g_Qm[i, j]|

with gradients of the batch-mean loss averaged over the scoring batches and
the absolute value taken per scalar before any summation. Ranks masked by S
score exactly zero: their lambda is zero during the pass, so no gradient
reaches their P column or Qm row.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.stats

from . import autodiff as ad
from .errors import CapacityError, ContractError, NumericError
from .lora import Coalition, RankId, all_rank_ids, coalition_overlay, sorted_modules
from .model import Model, forward_loss, trainable_parameters
from .rng import derive_seed, make_rng
from .tasks import Dataset, batches


@dataclass
class ImportanceReport:
    """Per-rank scores plus the provenance needed to reproduce them."""

    scores: dict[RankId, float]
    method: str
    split: str
    n_coalitions: int
    seed: int
    batches_used: int

    def ordered_scores(self) -> list[tuple[RankId, float]]:
        return sorted(self.scores.items(), key=lambda kv: kv[0].key())


@dataclass
class CoalitionPlan:
    coalitions: list[Coalition]
    rates: tuple[float, ...]
    repeats: int
    seed: int


def param_sensitivity(w: float, g: float) -> float:
    """|w * g|, the first-order loss change if w were zeroed."""
    w, g = float(w), float(g)
    if not (math.isfinite(w) and math.isfinite(g)):
        raise NumericError(f"param_sensitivity needs finite inputs, got ({w}, {g})")
    return abs(w * g)


def sample_coalitions(ranks: Sequence[RankId], rates: Sequence[float],
                      repeats: int, seed: int) -> CoalitionPlan:
    """Binomial coalition draws, each immediately followed by its complement.

    For every (rate, repeat) each rank is masked independently with
    probability rate; total coalitions = 2 * len(rates) * repeats, and every
    rank is active in exactly half of them.
    """
    ranks = list(ranks)
    if not ranks:
        raise ContractError("sample_coalitions needs a non-empty rank list")
    for rate in rates:
        if not 0.0 < rate < 1.0:
            raise ContractError(f"mask rate must be in (0, 1), got {rate}")
    if repeats < 1:
        raise ContractError(f"repeats must be >= 1, got {repeats}")
    rng = make_rng(seed, "coalition-plan")
    universe = frozenset(ranks)
    coalitions: list[Coalition] = []
    for rate in rates:
        for _ in range(repeats):
            masked = rng.random(len(ranks)) < rate
            kept = frozenset(r for r, m in zip(ranks, masked) if not m)
            coalitions.append(Coalition(kept))
            coalitions.append(Coalition(universe - kept))
    return CoalitionPlan(coalitions, tuple(float(r) for r in rates), int(repeats), int(seed))


def full_coalition_plan(ranks: Sequence[RankId], seed: int) -> CoalitionPlan:
    """Degenerate plan: the single coalition containing every rank."""
    ranks = list(ranks)
    if not ranks:
        raise ContractError("full_coalition_plan needs a non-empty rank list")
    return CoalitionPlan([Coalition(frozenset(ranks))], (), 0, int(seed))


# score-report split names -> Dataset split keys
SPLIT_KEY = {"validation": "dev", "train": "train", "dev": "dev", "test": "test"}


def scoring_batches(dataset: Dataset, split: str, batch_size: int,
                    n_batches: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """First min(n_batches, available) batches of a seeded shuffle of the split."""
    key = SPLIT_KEY.get(split)
    if key is None:
        raise ContractError(f"unknown scoring split {split!r}")
    all_b = batches(dataset, key, batch_size, derive_seed(seed, "scoring-batches"))
    return all_b[: max(1, n_batches)]


def coalition_rank_scores(model: Model, c: Coalition,
                          data: Sequence[tuple[np.ndarray, np.ndarray]]) -> dict[RankId, float]:
    """Per-rank sensitivity under one coalition mask.

    Gradients of the batch-mean loss are averaged across the given batches
    first; the three-term score formula is then applied once.
    """
    data = list(data)
    if not data:
        raise ContractError("coalition_rank_scores needs at least one batch")
    overlay = coalition_overlay(model, c)
    params = trainable_parameters(model)
    accum = {p: np.zeros_like(p.data) for p in params}
    for tokens, targets in data:
        grads = ad.backward(forward_loss(model, tokens, targets, overlay=overlay))
        for p in params:
            g = grads.get(p)
            if g is not None:
                accum[p] = accum[p] + g
    nb = float(len(data))

    scores: dict[RankId, float] = {}
    for mid in sorted_modules(model):
        mod = model.loras[mid]
        keep = overlay.get(mid)
        mask = mod.active if keep is None else (mod.active & keep)
        lam_eff = mod.lam.data * mask
        term_lam = np.abs(lam_eff * (accum[mod.lam] / nb))
        term_p = np.abs(mod.P.data * (accum[mod.P] / nb)).mean(axis=0)
        term_q = np.abs(mod.Qm.data * (accum[mod.Qm] / nb)).mean(axis=1)
        per_rank = term_lam + term_p + term_q
        for j, oi in enumerate(mod.rank_ids):
            scores[RankId(mid, int(oi))] = float(per_rank[j])
    return scores


def shapley_sensitivity(model: Model, plan: CoalitionPlan, dataset: Dataset, split: str,
                        *, batch_size: int = 32, n_batches: int = 8,
                        conditional: bool = False) -> ImportanceReport:
    """Mean of coalition_rank_scores over every coalition of the plan.

    The mean divides by the total coalition count, zero terms from masked
    coalitions included; set conditional=True to divide instead by the number
    of coalitions in which each rank was active (study variant, not default).
    """
    ranks = all_rank_ids(model)
    universe = set(ranks)
    for c in plan.coalitions:
        if not c.active_set <= universe:
            raise ContractError("plan contains ranks unknown to this model")
    data = scoring_batches(dataset, split, batch_size, n_batches, plan.seed)
    totals = {rid: 0.0 for rid in ranks}
    active_counts = {rid: 0 for rid in ranks}
    for c in plan.coalitions:
        per_rank = coalition_rank_scores(model, c, data)
        for rid in ranks:
            totals[rid] = totals[rid] + per_rank[rid]
            if rid in c.active_set:
                active_counts[rid] += 1
    n = len(plan.coalitions)
    if conditional:
        scores = {rid: (totals[rid] / active_counts[rid]) if active_counts[rid] else 0.0
                  for rid in ranks}
    else:
        scores = {rid: totals[rid] / n for rid in ranks}
    return ImportanceReport(scores=scores, method="shapley_sensitivity", split=split,
                            n_coalitions=n, seed=plan.seed, batches_used=len(data))


def plain_sensitivity(model: Model, dataset: Dataset, split: str, seed: int,
                      *, batch_size: int = 32, n_batches: int = 8) -> ImportanceReport:
    """Single full-coalition sensitivity (no masking)."""
    plan = full_coalition_plan(all_rank_ids(model), seed)
    report = shapley_sensitivity(model, plan, dataset, split,
                                 batch_size=batch_size, n_batches=n_batches)
    report.method = "plain_sensitivity"
    return report


def magnitude_score(model: Model) -> ImportanceReport:
    """Gradient-free analogue: |lam_i| + mean|P column| + mean|Qm row|."""
    if not model.loras:
        raise ContractError("magnitude_score needs LoRA attached")
    scores: dict[RankId, float] = {}
    for mid in sorted_modules(model):
        mod = model.loras[mid]
        per_rank = (np.abs(mod.lam.data * mod.active)
                    + np.abs(mod.P.data).mean(axis=0)
                    + np.abs(mod.Qm.data).mean(axis=1))
        for j, oi in enumerate(mod.rank_ids):
            scores[RankId(mid, int(oi))] = float(per_rank[j])
    return ImportanceReport(scores=scores, method="magnitude", split="none",
                            n_coalitions=0, seed=0, batches_used=0)


# ---------------------------------------------------------------------------
# exact Shapley oracle and rank correlation
# ---------------------------------------------------------------------------

def exact_shapley(value_fn: Callable[[frozenset[int]], float], n_players: int) -> list[float]:
    """Exact Shapley values by subset enumeration.

    Phi_k = sum over A not containing k of |A|! (n-1-|A|)! / n! times the
    marginal V(A + {k}) - V(A); equals the average marginal contribution over
    all n! player orderings.
    """
    if n_players < 1:
        raise ContractError(f"n_players must be >= 1, got {n_players}")
    if n_players > 10:
        raise CapacityError(f"exact_shapley enumerates 2^n subsets; n={n_players} > 10")
    n = n_players
    values = np.empty(1 << n)
    for mask in range(1 << n):
        values[mask] = float(value_fn(frozenset(k for k in range(n) if mask >> k & 1)))
    fact = math.factorial
    weight = [fact(a) * fact(n - 1 - a) / fact(n) for a in range(n)]
    phi = [0.0] * n
    for k in range(n):
        bit = 1 << k
        total = 0.0
        for mask in range(1 << n):
            if mask & bit:
                continue
            a = int(mask).bit_count()
            total += weight[a] * (values[mask | bit] - values[mask])
        phi[k] = total
    return phi


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation; NaN marks the undefined constant-input case."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ContractError(f"spearman needs two equal-length 1-D lists of >= 2 scores, got {a.shape} and {b.shape}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = scipy.stats.spearmanr(a, b).statistic
    return float(rho)


def seed_stability(model: Model, dataset: Dataset, split: str, plan_seeds: Sequence[int],
                   rates: Sequence[float], repeats: int, *, batch_size: int = 32,
                   n_batches: int = 8) -> tuple[list[ImportanceReport], np.ndarray]:
    """Score the same checkpoint under several plan seeds; pairwise Spearman matrix."""
    ranks = all_rank_ids(model)
    reports = []
    for s in plan_seeds:
        plan = sample_coalitions(ranks, rates, repeats, s)
        reports.append(shapley_sensitivity(model, plan, dataset, split,
                                           batch_size=batch_size, n_batches=n_batches))
    lists = [[r.scores[rid] for rid in ranks] for r in reports]
    k = len(reports)
    matrix = np.ones((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            matrix[i, j] = matrix[j, i] = spearman(lists[i], lists[j])
    return reports, matrix
