"""Synthetic task generators: copy task and the planted-module teacher task."""

from __future__ import annotations

import numpy as np
import pytest

from lorashap.errors import ContractError, DataError
from lorashap.model import ModelConfig, build_model
from lorashap.tasks import (SPLITS, batches, eval_batches, gen_copy_task,
                            gen_planted_task, make_teacher)

MICRO = ModelConfig(n_layers=1, d_model=8, d_ffn=16, n_heads=2,
                    vocab_size=16, max_seq_len=16)


def test_copy_task_structure() -> None:
    data = gen_copy_task(32, 8, 8, seq_len=8, vocab=16, seed=0)
    tokens, targets = data.splits["train"]
    k = 4
    assert tokens.shape == (32, 8) and targets.shape == (32, 8)
    assert (tokens[:, k] == 15).all()              # delimiter = vocab - 1
    assert (tokens[:, :k] < 15).all()              # prefixes avoid the delimiter
    assert (targets[:, :k] == -1).all()            # prefix half is unsupervised
    assert np.array_equal(targets[:, k:], tokens[:, :k])  # second half copies


def test_copy_task_splits_are_disjoint() -> None:
    data = gen_copy_task(64, 16, 16, seq_len=8, vocab=16, seed=1)
    seen: set[bytes] = set()
    for split in SPLITS:
        for row in data.splits[split][0]:
            key = row.tobytes()
            assert key not in seen
            seen.add(key)


def test_copy_task_determinism() -> None:
    a = gen_copy_task(16, 4, 4, seq_len=8, vocab=16, seed=7)
    b = gen_copy_task(16, 4, 4, seq_len=8, vocab=16, seed=7)
    c = gen_copy_task(16, 4, 4, seq_len=8, vocab=16, seed=8)
    assert np.array_equal(a.splits["train"][0], b.splits["train"][0])
    assert not np.array_equal(a.splits["train"][0], c.splits["train"][0])


def test_copy_task_contract() -> None:
    with pytest.raises(ContractError):
        gen_copy_task(8, 2, 2, seq_len=7, vocab=16, seed=0)   # odd length
    with pytest.raises(ContractError):
        gen_copy_task(8, 2, 2, seq_len=8, vocab=3, seed=0)    # vocab too small
    with pytest.raises(ContractError):
        gen_copy_task(0, 2, 2, seq_len=8, vocab=16, seed=0)
    with pytest.raises(ContractError):
        gen_copy_task(10**9, 2, 2, seq_len=2, vocab=4, seed=0)  # cannot dedupe


def test_batches_cover_split_once() -> None:
    data = gen_copy_task(20, 4, 4, seq_len=8, vocab=16, seed=2)
    got = batches(data, "train", 8, seed=3)
    assert [len(t) for t, _ in got] == [8, 8, 4]  # last partial batch kept
    stacked = np.concatenate([t for t, _ in got])
    original = data.splits["train"][0]
    assert sorted(r.tobytes() for r in stacked) == sorted(r.tobytes() for r in original)
    again = batches(data, "train", 8, seed=3)
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(got, again))
    shuffled = batches(data, "train", 8, seed=4)
    assert not all(np.array_equal(a[0], b[0]) for a, b in zip(got, shuffled))


def test_eval_batches_are_contiguous() -> None:
    data = gen_copy_task(10, 4, 4, seq_len=8, vocab=16, seed=5)
    got = eval_batches(data, "train", 4)
    stacked = np.concatenate([t for t, _ in got])
    assert np.array_equal(stacked, data.splits["train"][0])


def test_teacher_perturbs_only_planted_kinds() -> None:
    base = build_model(MICRO, 11)
    teacher = make_teacher(MICRO, 11, frozenset({"V", "U"}), 0.5, seed=12)
    for mid in base.module_ids():
        same = np.array_equal(base.weights[mid].data, teacher.weights[mid].data)
        assert same == (mid.kind not in {"V", "U"})
    assert np.array_equal(base.embed.data, teacher.embed.data)


def test_planted_task_labels_come_from_teacher() -> None:
    data = gen_planted_task(MICRO, 11, ("V", "U"), 0.5, 32, 8, 8, seq_len=8, seed=13)
    assert data.planted_modules == frozenset({"V", "U"})
    assert data.perturb_scale == 0.5
    tokens, targets = data.splits["train"]
    assert tokens.shape == targets.shape == (32, 8)
    assert (targets >= 0).all() and (targets < 16).all()  # fully supervised


def test_planted_task_zero_scale_is_degenerate_self_labeling() -> None:
    data = gen_planted_task(MICRO, 11, ("V",), 0.0, 16, 4, 4, seq_len=8, seed=14)
    base = build_model(MICRO, 11)
    from lorashap.tasks import _greedy_labels
    tokens, targets = data.splits["train"]
    assert np.array_equal(targets, _greedy_labels(base, tokens))


def test_planted_task_contract() -> None:
    with pytest.raises(ContractError):
        gen_planted_task(MICRO, 0, ("X",), 0.5, 8, 2, 2, seq_len=8, seed=0)
    with pytest.raises(ContractError):
        gen_planted_task(MICRO, 0, (), 0.5, 8, 2, 2, seq_len=8, seed=0)
    with pytest.raises(ContractError):
        gen_planted_task(MICRO, 0, ("V",), -0.1, 8, 2, 2, seq_len=8, seed=0)
    with pytest.raises(ContractError):
        gen_planted_task(MICRO, 0, ("V",), 0.5, 8, 2, 2, seq_len=99, seed=0)


def test_planted_task_requires_teacher_disagreement() -> None:
    # a vanishing perturbation cannot change any greedy label
    with pytest.raises(DataError):
        gen_planted_task(MICRO, 11, ("V",), 1e-12, 16, 4, 4, seq_len=8, seed=15)


def test_batches_contract() -> None:
    data = gen_copy_task(8, 2, 2, seq_len=8, vocab=16, seed=6)
    with pytest.raises(ContractError):
        batches(data, "train", 0, seed=0)
    with pytest.raises(KeyError):
        batches(data, "nope", 4, seed=0)
