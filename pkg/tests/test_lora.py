"""LoRA module math, coalition masking, and allocation/pruning invariants."""

from __future__ import annotations

import numpy as np
import pytest

from lorashap import autodiff as ad
from lorashap.errors import BudgetError, ContractError, StateError
from lorashap.lora import (KINDS, AllocationConfig, Coalition, ModuleId, RankId,
                           all_rank_ids, allocation_from_scores, apply_coalition,
                           coalition_overlay, init_lora_module, lora_forward,
                           prune_to_allocation, uniform_allocation)
from lorashap.model import (ModelConfig, attach_lora, build_model,
                            forward_logits)
from lorashap.scoring import magnitude_score

MICRO = ModelConfig(n_layers=1, d_model=8, d_ffn=16, n_heads=2,
                    vocab_size=16, max_seq_len=16)


def micro_model(r: int = 2, seed: int = 0):
    model = build_model(MICRO, seed)
    attach_lora(model, r, seed + 1)
    rng = np.random.default_rng(seed + 2)
    for mid in sorted(model.loras, key=ModuleId.key):
        mod = model.loras[mid]
        mod.lam.data[:] = rng.normal(size=mod.r)
    return model


# ---------------------------------------------------------------------------
# forward math
# ---------------------------------------------------------------------------

def test_forward_hand_case() -> None:
    # x=2, W=3, P=1, lam=0.5, Q=4: 2*3 + 2*1*0.5*4 = 10
    mod = init_lora_module(1, 1, 1, seed=0)
    mod.P.data[:] = 1.0
    mod.lam.data[:] = 0.5
    mod.Qm.data[:] = 4.0
    out = lora_forward(ad.constant([[2.0]]), ad.constant([[3.0]]), mod)
    assert out.data[0, 0] == pytest.approx(10.0, abs=0)


def test_zero_lambda_matches_plain_matmul_bitwise() -> None:
    rng = np.random.default_rng(3)
    x = ad.constant(rng.normal(size=(5, 4)))
    W = ad.constant(rng.normal(size=(4, 6)))
    mod = init_lora_module(4, 6, 3, seed=1)  # lam starts at zero
    assert np.array_equal(lora_forward(x, W, mod).data, ad.matmul(x, W).data)


def test_overlay_composes_with_active_flags() -> None:
    rng = np.random.default_rng(4)
    x = ad.constant(rng.normal(size=(2, 3)))
    W = ad.constant(rng.normal(size=(3, 3)))
    mod = init_lora_module(3, 3, 2, seed=2)
    mod.lam.data[:] = [1.0, 2.0]
    mod.active[1] = False
    full = lora_forward(x, W, mod).data
    also_masked = lora_forward(x, W, mod, overlay=np.array([False, True])).data
    # active [T, F] & overlay [F, T] leaves nothing
    assert np.array_equal(also_masked, ad.matmul(x, W).data)
    assert not np.array_equal(full, also_masked)


def test_init_contract() -> None:
    mod = init_lora_module(4, 6, 3, seed=5)
    assert mod.P.data.shape == (4, 3) and mod.Qm.data.shape == (3, 6)
    assert np.array_equal(mod.lam.data, np.zeros(3))
    assert mod.active.all() and np.array_equal(mod.rank_ids, [0, 1, 2])
    with pytest.raises(ContractError):
        init_lora_module(4, 6, 0, seed=5)


def test_gradients_reach_fully_masked_params() -> None:
    # the increment stays in the graph even when every rank is masked
    rng = np.random.default_rng(6)
    x = ad.constant(rng.normal(size=(2, 3)))
    W = ad.constant(rng.normal(size=(3, 3)))
    mod = init_lora_module(3, 3, 2, seed=3)
    mod.lam.data[:] = [1.0, 2.0]
    out = lora_forward(x, W, mod, overlay=np.zeros(2, dtype=bool))
    grads = ad.backward(ad.sum_all(out))
    assert np.array_equal(grads[mod.P], np.zeros_like(mod.P.data))
    assert np.array_equal(grads[mod.Qm], np.zeros_like(mod.Qm.data))
    assert mod.lam in grads  # lam grad is nonzero: it gates the increment


# ---------------------------------------------------------------------------
# coalitions
# ---------------------------------------------------------------------------

def test_masked_forward_equals_pruned_forward() -> None:
    tokens = np.random.default_rng(7).integers(0, MICRO.vocab_size, size=(4, 10))
    rng = np.random.default_rng(8)
    for trial in range(5):
        model = micro_model(r=2, seed=10 + trial)
        ranks = all_rank_ids(model)
        keep = frozenset(rid for rid in ranks if rng.random() < 0.5)
        masked = forward_logits(model, tokens,
                                overlay=coalition_overlay(model, Coalition(keep))).data
        counts = {mid: 0 for mid in model.loras}
        for rid in keep:
            counts[rid.module] += 1
        prune_to_allocation(model, AllocationConfig(counts=counts, kept_ranks=keep))
        pruned = forward_logits(model, tokens).data
        assert np.max(np.abs(masked - pruned)) < 1e-12


def test_apply_coalition_restore_is_bitwise() -> None:
    model = micro_model(r=3, seed=20)
    before = {mid: mod.lam.data.copy() for mid, mod in model.loras.items()}
    ranks = all_rank_ids(model)
    mask = apply_coalition(model, Coalition(frozenset(ranks[::2])))
    changed = any(not np.array_equal(model.loras[mid].lam.data, before[mid])
                  for mid in model.loras)
    assert changed
    mask.restore()
    for mid, mod in model.loras.items():
        assert np.array_equal(mod.lam.data, before[mid])
    with pytest.raises(StateError):
        mask.restore()


def test_overlay_rejects_unknown_rank() -> None:
    model = micro_model(r=1, seed=21)
    bogus = RankId(ModuleId(5, "Q"), 0)
    with pytest.raises(KeyError):
        coalition_overlay(model, Coalition(frozenset([bogus])))


def test_empty_coalition_zeroes_every_module() -> None:
    model = micro_model(r=2, seed=22)
    overlay = coalition_overlay(model, Coalition(frozenset()))
    assert set(overlay) == set(model.loras)
    assert all(not keep.any() for keep in overlay.values())


# ---------------------------------------------------------------------------
# allocation and pruning
# ---------------------------------------------------------------------------

def _report_from(scores: dict) -> object:
    class R:
        pass
    r = R()
    r.scores = scores
    r.method = "test"
    r.split = "validation"
    r.seed = 0
    r.n_coalitions = 0
    return r


def test_allocation_keeps_top_scores_with_canonical_tie_break() -> None:
    m0, m1 = ModuleId(0, "Q"), ModuleId(0, "V")
    scores = {RankId(m0, 0): 1.0, RankId(m0, 1): 3.0,
              RankId(m1, 0): 3.0, RankId(m1, 1): 2.0}
    alloc = allocation_from_scores(_report_from(scores), 2)
    # ties at 3.0 are both kept; 0.Q.1 sorts before 0.V.0 but both fit
    assert alloc.kept_ranks == frozenset({RankId(m0, 1), RankId(m1, 0)})
    assert alloc.counts == {m0: 1, m1: 1}
    assert alloc.total_kept == 2

    tied = {RankId(m0, 0): 1.0, RankId(m0, 1): 1.0, RankId(m1, 0): 1.0}
    alloc = allocation_from_scores(_report_from(tied), 2)
    assert alloc.kept_ranks == frozenset({RankId(m0, 0), RankId(m0, 1)})


def test_allocation_budget_errors() -> None:
    scores = {RankId(ModuleId(0, "Q"), 0): 1.0}
    with pytest.raises(ContractError):
        allocation_from_scores(_report_from(scores), 0)
    with pytest.raises(BudgetError):
        allocation_from_scores(_report_from(scores), 2)


def test_uniform_allocation_spreads_remainder_canonically() -> None:
    mids = [ModuleId(0, k) for k in KINDS]
    alloc = uniform_allocation(mids, 10)
    assert alloc.total_kept == 10
    assert sorted(alloc.counts.values(), reverse=True) == [2, 2, 2, 1, 1, 1, 1]
    # remainder goes to the canonically first modules: Q, K, V
    assert alloc.counts[ModuleId(0, "Q")] == 2
    assert alloc.counts[ModuleId(0, "K")] == 2
    assert alloc.counts[ModuleId(0, "V")] == 2


def test_prune_preserves_surviving_values_and_ids() -> None:
    model = micro_model(r=3, seed=30)
    mid = ModuleId(0, "V")
    mod = model.loras[mid]
    keep_rank = RankId(mid, 2)
    kept = frozenset({keep_rank})
    counts = {m: (1 if m == mid else 0) for m in model.loras}
    p_col = mod.P.data[:, 2].copy()
    lam_val = float(mod.lam.data[2])
    q_row = mod.Qm.data[2, :].copy()
    prune_to_allocation(model, AllocationConfig(counts=counts, kept_ranks=kept))
    assert set(model.loras) == {mid}  # zero-count modules are gone
    mod = model.loras[mid]
    assert mod.r == 1
    assert np.array_equal(mod.rank_ids, [2])  # original identity survives
    assert np.array_equal(mod.P.data[:, 0], p_col)
    assert mod.lam.data[0] == lam_val
    assert np.array_equal(mod.Qm.data[0, :], q_row)
    assert all_rank_ids(model) == [keep_rank]


def test_prune_rejects_bad_allocations() -> None:
    model = micro_model(r=2, seed=31)
    counts = {mid: 1 for mid in model.loras}
    with pytest.raises(StateError):  # counts without identities
        prune_to_allocation(model, AllocationConfig(counts=counts, kept_ranks=None))
    stray = frozenset({RankId(ModuleId(9, "Q"), 0)})
    with pytest.raises(StateError):
        prune_to_allocation(model, AllocationConfig(counts={ModuleId(9, "Q"): 1},
                                                    kept_ranks=stray))
    model2 = micro_model(r=2, seed=31)
    some = frozenset(all_rank_ids(model2)[:3])
    bad_counts = {mid: 2 for mid in model2.loras}  # counts disagree with identities
    with pytest.raises(StateError):
        prune_to_allocation(model2, AllocationConfig(counts=bad_counts, kept_ranks=some))


def test_double_prune_is_stable() -> None:
    # prune once, then prune again with the surviving ids: a no-op
    model = micro_model(r=2, seed=32)
    ranks = all_rank_ids(model)
    keep = frozenset(ranks[::2])
    counts = {mid: 0 for mid in model.loras}
    for rid in keep:
        counts[rid.module] += 1
    alloc = AllocationConfig(counts={m: c for m, c in counts.items()}, kept_ranks=keep)
    prune_to_allocation(model, alloc)
    survivors = all_rank_ids(model)
    again = AllocationConfig(counts={m: c for m, c in counts.items() if c > 0},
                             kept_ranks=keep)
    prune_to_allocation(model, again)
    assert all_rank_ids(model) == survivors


def test_magnitude_hand_case() -> None:
    # |lam| + mean|P col| + mean|Q row| = 0.5 + 2 + 3 = 5.5
    model = build_model(MICRO, 40)
    attach_lora(model, 1, 41)
    for mod in model.loras.values():
        mod.lam.data[:] = 0.5
        mod.P.data[:] = 2.0
        mod.Qm.data[:] = -3.0
    report = magnitude_score(model)
    for score in report.scores.values():
        assert score == pytest.approx(5.5, abs=0)
