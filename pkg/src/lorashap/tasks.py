"""Synthetic sequence tasks with disjoint train/dev/test splits.

Two kinds:
  copy    — memorize-free algorithmic task: repeat the prefix after a
            delimiter; only the repeated half is supervised.
  planted — teacher-student task where the teacher is the student's own base
            model with ONLY the chosen module kinds' weights perturbed, so
            ground truth about which modules need adapting is known.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DataError
from .lora import KINDS
from .model import Model, ModelConfig, build_model, forward_logits
from .rng import derive_seed, make_rng

SPLITS = ("train", "dev", "test")


@dataclass
class Dataset:
    """Immutable token data; each split is a (tokens, targets) int array pair.

    Target value -1 marks positions excluded from the loss.
    """

    task_kind: str
    vocab_size: int
    seq_len: int
    seed: int
    splits: dict[str, tuple[np.ndarray, np.ndarray]]
    planted_modules: frozenset[str] | None = None
    base_model_seed: int | None = None
    perturb_scale: float | None = None
    model_config: ModelConfig | None = None

    def size(self, split: str) -> int:
        return len(self.splits[split][0])


def batches(dataset: Dataset, split: str, batch_size: int, seed: int
            ) -> list[tuple[np.ndarray, np.ndarray]]:
    """One seeded-shuffle pass over the split; the last partial batch is kept."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    tokens, targets = dataset.splits[split]
    order = np.random.default_rng(seed).permutation(len(tokens))
    return [(tokens[order[i:i + batch_size]], targets[order[i:i + batch_size]])
            for i in range(0, len(tokens), batch_size)]


def eval_batches(dataset: Dataset, split: str, batch_size: int
                 ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Unshuffled contiguous batches, for deterministic evaluation."""
    tokens, targets = dataset.splits[split]
    return [(tokens[i:i + batch_size], targets[i:i + batch_size])
            for i in range(0, len(tokens), batch_size)]


def _unique_rows(rng: np.random.Generator, n: int, length: int, high: int) -> np.ndarray:
    """n distinct random rows over [0, high); rejection-sampled."""
    if high ** length < 2 * n:
        raise ContractError(f"cannot draw {n} distinct length-{length} rows over {high} symbols")
    seen: set[bytes] = set()
    rows: list[np.ndarray] = []
    while len(rows) < n:
        for row in rng.integers(0, high, size=(n - len(rows) + 16, length)):
            key = row.tobytes()
            if key not in seen:
                seen.add(key)
                rows.append(row)
                if len(rows) == n:
                    break
    return np.array(rows, dtype=np.int64)


def _split(inputs: np.ndarray, targets: np.ndarray, n_train: int, n_dev: int,
           n_test: int) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    edges = np.cumsum([0, n_train, n_dev, n_test])
    return {name: (inputs[a:b], targets[a:b])
            for name, a, b in zip(SPLITS, edges[:-1], edges[1:])}


def gen_copy_task(n_train: int = 2048, n_dev: int = 256, n_test: int = 256,
                  seq_len: int = 16, vocab: int = 64, seed: int = 0) -> Dataset:
    """Prefix + delimiter + prefix; supervision only on the repeated half.

    The delimiter is the reserved id vocab-1; prefixes never contain it, and
    prefixes are globally unique so the splits are disjoint.
    """
    if seq_len % 2 != 0:
        raise ContractError(f"seq_len must be even, got {seq_len}")
    if vocab < 4:
        raise ContractError(f"vocab must be >= 4, got {vocab}")
    for name, n in (("n_train", n_train), ("n_dev", n_dev), ("n_test", n_test)):
        if n < 1:
            raise ContractError(f"{name} must be >= 1, got {n}")
    k = seq_len // 2
    delim = vocab - 1
    n_total = n_train + n_dev + n_test
    prefixes = _unique_rows(make_rng(seed, "copy-prefixes"), n_total, k, vocab - 1)
    stream = np.concatenate(
        [prefixes, np.full((n_total, 1), delim, dtype=np.int64), prefixes], axis=1)
    inputs = stream[:, :-1]
    targets = stream[:, 1:].copy()
    targets[:, :k] = -1  # the random prefix itself is unlearnable
    return Dataset(task_kind="copy", vocab_size=vocab, seq_len=seq_len, seed=seed,
                   splits=_split(inputs, targets, n_train, n_dev, n_test))


def make_teacher(config: ModelConfig, base_model_seed: int, planted_kinds: frozenset[str],
                 perturb_scale: float, seed: int) -> Model:
    """The student's base model with only the planted kinds' weights perturbed."""
    teacher = build_model(config, base_model_seed)
    for mid in teacher.module_ids():
        if mid.kind in planted_kinds:
            w = teacher.weights[mid].data
            noise = make_rng(seed, "perturb", mid.layer, mid.kind).normal(0.0, perturb_scale, w.shape)
            teacher.weights[mid] = ad.constant(w + noise)
    return teacher


def _greedy_labels(model: Model, inputs: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty_like(inputs)
    with ad.no_grad():
        for i in range(0, len(inputs), chunk):
            logits = forward_logits(model, inputs[i:i + chunk])
            out[i:i + chunk] = logits.data.argmax(axis=-1)
    return out


def gen_planted_task(config: ModelConfig, base_model_seed: int, planted_kinds,
                     perturb_scale: float, n_train: int = 2048, n_dev: int = 256,
                     n_test: int = 256, seq_len: int = 16, seed: int = 0) -> Dataset:
    """Labels are the perturbed teacher's greedy next tokens on random inputs.

    perturb_scale 0 is allowed (degenerate teacher == student case); for any
    positive scale the generator asserts the teacher actually disagrees with
    the unperturbed base model somewhere.
    """
    kinds = frozenset(planted_kinds)
    if not kinds or not kinds <= set(KINDS):
        raise ContractError(f"planted_kinds must be a nonempty subset of {KINDS}, got {sorted(kinds)}")
    if perturb_scale < 0:
        raise ContractError(f"perturb_scale must be >= 0, got {perturb_scale}")
    if seq_len > config.max_seq_len:
        raise ContractError(f"seq_len {seq_len} exceeds model max_seq_len {config.max_seq_len}")
    n_total = n_train + n_dev + n_test
    inputs = _unique_rows(make_rng(seed, "planted-inputs"), n_total, seq_len, config.vocab_size)
    teacher = make_teacher(config, base_model_seed, kinds, perturb_scale, seed)
    labels = _greedy_labels(teacher, inputs)
    if perturb_scale > 0:
        base_labels = _greedy_labels(build_model(config, base_model_seed), inputs)
        if np.array_equal(labels, base_labels):
            raise DataError("perturbed teacher never disagrees with the base model; "
                            "increase perturb_scale")
    return Dataset(task_kind="planted", vocab_size=config.vocab_size, seq_len=seq_len,
                   seed=seed, splits=_split(inputs, labels, n_train, n_dev, n_test),
                   planted_modules=kinds, base_model_seed=base_model_seed,
                   perturb_scale=float(perturb_scale), model_config=config)
