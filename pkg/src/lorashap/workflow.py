"""Training loop and the two-stage allocate-then-retrain pipeline.

Stage 1 trains uniform-rank LoRA to convergence, scores every rank on the
validation split, and prunes globally to the rank budget. Stage 2 rebuilds
the same base model, attaches freshly initialized LoRA sized by the
allocation, and retrains. A gradual schedule variant interleaves pruning
events with training instead of pruning once; a leave-one-out evaluation
provides the ground-truth importance oracle for tests.
"""

from __future__ import annotations

import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import (BudgetError, ConfigError, ContractError, NumericError,
                     ScheduleError, StateError, TrainingError)
from .lora import (AllocationConfig, Coalition, ModuleId, RankId, all_rank_ids,
                   allocation_from_scores, coalition_overlay, sorted_modules,
                   uniform_allocation)
from .model import (DESK_CONFIG, Model, ModelConfig, attach_lora,
                    attach_lora_allocation, build_model, forward_loss,
                    trainable_parameters)
from .rng import derive_seed
from .scoring import (ImportanceReport, exact_shapley, magnitude_score,
                      plain_sensitivity, sample_coalitions, shapley_sensitivity,
                      spearman)
from .tasks import Dataset, batches, eval_batches, gen_copy_task, gen_planted_task

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01

DEFAULT_MASK_RATES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
GRADUAL_EVENT_RATES = (0.3, 0.5, 0.7)

# ImportanceReport.split name -> Dataset split key
_SPLIT_KEY = {"validation": "dev", "train": "train"}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 25
    eval_every_steps: int = 50
    patience: int = 10
    warmup_fraction: float = 0.06
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("batch_size", "max_epochs", "eval_every_steps", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")


@dataclass
class Schedule:
    kind: str = "one_shot"  # or "gradual"
    k_per_event: int = 4
    every_m_steps: int = 25

    def validate(self) -> None:
        if self.kind not in ("one_shot", "gradual"):
            raise ConfigError(f"schedule.kind must be one_shot or gradual, got {self.kind!r}")
        if self.k_per_event < 1 or self.every_m_steps < 1:
            raise ConfigError("gradual schedule parameters must be positive")


@dataclass
class TaskSpec:
    kind: str = "planted"  # or "copy"
    n_train: int = 2048
    n_dev: int = 256
    n_test: int = 256
    seq_len: int = 16
    planted_kinds: tuple[str, ...] = ("V", "U")
    perturb_scale: float = 0.5

    def validate(self) -> None:
        if self.kind not in ("planted", "copy"):
            raise ConfigError(f"task.kind must be planted or copy, got {self.kind!r}")
        for name in ("n_train", "n_dev", "n_test", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"task.{name} must be positive")


@dataclass
class PipelineConfig:
    """Everything a full run needs; one master seed derives all sub-seeds."""

    model: ModelConfig = field(default_factory=lambda: DESK_CONFIG)
    r_init: int = 4
    R_target: int | None = None  # None -> R_init_total // 2
    scoring_method: str = "shapley_sensitivity"
    scoring_split: str = "validation"
    mask_rates: tuple[float, ...] = DEFAULT_MASK_RATES
    mask_repeats: int = 5
    scoring_batch_size: int = 32
    scoring_batches: int = 8
    conditional_average: bool = False
    schedule: Schedule = field(default_factory=Schedule)
    stage1: TrainConfig = field(default_factory=TrainConfig)
    stage2: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    seed: int = 0

    @property
    def r_init_total(self) -> int:
        return len(("Q", "K", "V", "O", "G", "U", "D")) * self.model.n_layers * self.r_init

    def resolved_target(self) -> int:
        return self.r_init_total // 2 if self.R_target is None else self.R_target

    def validate(self) -> None:
        self.model.validate()
        if self.r_init < 1:
            raise ConfigError(f"r_init must be positive, got {self.r_init}")
        if self.scoring_method not in ("shapley_sensitivity", "plain_sensitivity", "magnitude"):
            raise ConfigError(f"unknown scoring_method {self.scoring_method!r}")
        if self.scoring_split not in _SPLIT_KEY:
            raise ConfigError(f"scoring_split must be validation or train, got {self.scoring_split!r}")
        if self.mask_repeats < 1:
            raise ConfigError(f"mask_repeats must be >= 1, got {self.mask_repeats}")
        for rate in self.mask_rates:
            if not 0.0 < rate < 1.0:
                raise ConfigError(f"mask rate must be in (0, 1), got {rate}")
        if self.scoring_batch_size < 1 or self.scoring_batches < 1:
            raise ConfigError("scoring batch settings must be positive")
        target = self.resolved_target()
        if not 1 <= target <= self.r_init_total:
            raise ConfigError(f"R_target {target} outside [1, {self.r_init_total}]")
        self.schedule.validate()
        self.stage1.validate()
        self.stage2.validate()
        self.task.validate()

    def seed_for(self, purpose: str) -> int:
        return derive_seed(self.seed, purpose)


@dataclass
class LossCurves:
    train: list[tuple[int, float]] = field(default_factory=list)
    dev: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class Stage1Result:
    report: ImportanceReport
    allocation: AllocationConfig
    model: Model
    curves: LossCurves


@dataclass
class RunReport:
    stage1_curves: LossCurves
    importance: ImportanceReport
    allocation: AllocationConfig
    stage2_curves: LossCurves
    metrics: dict[str, float]
    wall_clock: dict[str, float]


# ---------------------------------------------------------------------------
# evaluation and training
# ---------------------------------------------------------------------------

def eval_loss(model: Model, dataset: Dataset, split: str, batch_size: int = 64,
              overlay: dict | None = None) -> float:
    """Token-weighted mean loss over the whole split, no shuffling, no grads."""
    total, weight = 0.0, 0
    with ad.no_grad():
        for tokens, targets in eval_batches(dataset, split, batch_size):
            n_tok = int((targets >= 0).sum())
            loss = forward_loss(model, tokens, targets, overlay=overlay)
            total += float(loss.data) * n_tok
            weight += n_tok
    return total / weight


def _lr_at(step: int, total_steps: int, warmup_steps: int, base: float) -> float:
    """Linear warmup then linear decay to zero; step is 1-indexed."""
    if warmup_steps > 0 and step <= warmup_steps:
        return base * step / warmup_steps
    denom = max(1, total_steps - warmup_steps)
    return base * max(0, total_steps - step) / denom


class _AdamW:
    def __init__(self, params: list[ad.Tensor]):
        self.params = params
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: dict[ad.Tensor, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * (g * g)
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + ADAM_EPS)
            p.data -= lr * (update + WEIGHT_DECAY * p.data)


class _EarlyStopper:
    """Best-dev tracking with patience counted in evaluations."""

    def __init__(self, params: list[ad.Tensor], patience: int):
        self.params = params
        self.patience = patience
        self.best = math.inf
        self.best_snapshot: list[np.ndarray] | None = None
        self.bad = 0

    def observe(self, dev: float) -> bool:
        """Record one evaluation; returns True when training should stop."""
        if dev < self.best:
            self.best = dev
            self.best_snapshot = [p.data.copy() for p in self.params]
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience

    def restore_best(self) -> None:
        if self.best_snapshot is not None:
            for p, snap in zip(self.params, self.best_snapshot):
                p.data[...] = snap


def train(model: Model, dataset: Dataset, cfg: TrainConfig) -> tuple[Model, LossCurves]:
    """AdamW on the LoRA parameters with periodic dev evaluation.

    Linear-decay learning rate with warmup; stops after `patience`
    non-improving dev evaluations; the best-dev parameters are restored
    before returning. Train loss is recorded every step, dev loss at step 0,
    at every evaluation, and once more at the end if steps remain unevaluated.
    """
    cfg.validate()
    for split in ("train", "dev"):
        if split not in dataset.splits:
            raise ContractError(f"dataset lacks a {split!r} split")
    params = trainable_parameters(model)
    if not params:
        raise StateError("model has no trainable parameters; attach LoRA first")

    steps_per_epoch = math.ceil(dataset.size("train") / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    warmup_steps = int(total_steps * cfg.warmup_fraction)
    opt = _AdamW(params)
    stopper = _EarlyStopper(params, cfg.patience)
    curves = LossCurves()

    dev0 = eval_loss(model, dataset, "dev", cfg.batch_size)
    curves.dev.append((0, dev0))
    stopper.observe(dev0)

    step = 0
    stop = False
    for epoch in range(cfg.max_epochs):
        for tokens, targets in batches(dataset, "train", cfg.batch_size,
                                       derive_seed(cfg.seed, "epoch", epoch)):
            step += 1
            try:
                loss = forward_loss(model, tokens, targets)
                grads = ad.backward(loss)
            except NumericError as exc:
                raise TrainingError(f"divergence at step {step}: {exc}", step=step) from exc
            train_loss = float(loss.data)
            if not math.isfinite(train_loss):
                raise TrainingError(f"divergence at step {step}: loss={train_loss}", step=step)
            curves.train.append((step, train_loss))
            opt.step(grads, _lr_at(step, total_steps, warmup_steps, cfg.learning_rate))
            if step % cfg.eval_every_steps == 0:
                dev = eval_loss(model, dataset, "dev", cfg.batch_size)
                curves.dev.append((step, dev))
                if stopper.observe(dev):
                    stop = True
                    break
        if stop:
            break
    if not stop and step % cfg.eval_every_steps != 0:
        dev = eval_loss(model, dataset, "dev", cfg.batch_size)
        curves.dev.append((step, dev))
        stopper.observe(dev)
    stopper.restore_best()
    return model, curves


# ---------------------------------------------------------------------------
# scoring dispatch and the two stages
# ---------------------------------------------------------------------------

def score_model(model: Model, cfg: PipelineConfig, data: Dataset) -> ImportanceReport:
    split = cfg.scoring_split
    if cfg.scoring_method == "shapley_sensitivity":
        plan = sample_coalitions(all_rank_ids(model), cfg.mask_rates, cfg.mask_repeats,
                                 cfg.seed_for("coalition-plan"))
        return shapley_sensitivity(model, plan, data, split,
                                   batch_size=cfg.scoring_batch_size,
                                   n_batches=cfg.scoring_batches,
                                   conditional=cfg.conditional_average)
    if cfg.scoring_method == "plain_sensitivity":
        return plain_sensitivity(model, data, split, cfg.seed_for("coalition-plan"),
                                 batch_size=cfg.scoring_batch_size,
                                 n_batches=cfg.scoring_batches)
    if cfg.scoring_method == "magnitude":
        return magnitude_score(model)
    raise ConfigError(f"unknown scoring_method {cfg.scoring_method!r}")


def stage1_allocate(cfg: PipelineConfig, data: Dataset) -> Stage1Result:
    """Train uniform-rank LoRA, score, and allocate the rank budget."""
    cfg.validate()
    model = build_model(cfg.model, cfg.seed_for("model"))
    attach_lora(model, cfg.r_init, cfg.seed_for("lora-stage1"))
    stage1_cfg = replace(cfg.stage1, seed=derive_seed(cfg.seed, "train-stage1", cfg.stage1.seed))
    if cfg.schedule.kind == "gradual":
        alloc, curves, report = gradual_prune(
            model, data, cfg.schedule.k_per_event, cfg.schedule.every_m_steps,
            cfg.resolved_target(), cfg.scoring_method, stage1_cfg,
            scoring_split=cfg.scoring_split, scoring_batch_size=cfg.scoring_batch_size,
            scoring_batches=cfg.scoring_batches)
        return Stage1Result(report, alloc, model, curves)
    model, curves = train(model, data, stage1_cfg)
    report = score_model(model, cfg, data)
    alloc = allocation_from_scores(report, cfg.resolved_target())
    return Stage1Result(report, alloc, model, curves)


def stage2_retrain(alloc: AllocationConfig, cfg: PipelineConfig, data: Dataset
                   ) -> tuple[Model, dict[str, float], LossCurves]:
    """Fresh model, fresh LoRA init sized by the allocation, full retrain."""
    if alloc.total_kept < 1:
        raise ContractError("allocation keeps zero ranks; nothing to train")
    model = build_model(cfg.model, cfg.seed_for("model"))
    attach_lora_allocation(model, alloc.counts, cfg.seed_for("lora-stage2"))
    stage2_cfg = replace(cfg.stage2, seed=derive_seed(cfg.seed, "train-stage2", cfg.stage2.seed))
    model, curves = train(model, data, stage2_cfg)
    metrics = {
        "dev_loss": eval_loss(model, data, "dev"),
        "test_loss": eval_loss(model, data, "test"),
    }
    return model, metrics, curves


def generate_task(cfg: PipelineConfig) -> Dataset:
    t = cfg.task
    seed = cfg.seed_for("task-data")
    if t.kind == "copy":
        return gen_copy_task(t.n_train, t.n_dev, t.n_test, t.seq_len,
                             cfg.model.vocab_size, seed)
    return gen_planted_task(cfg.model, cfg.seed_for("model"), t.planted_kinds,
                            t.perturb_scale, t.n_train, t.n_dev, t.n_test,
                            t.seq_len, seed)


def run_pipeline(cfg: PipelineConfig, data: Dataset | None = None,
                 out_dir: str | None = None) -> RunReport:
    """stage1_allocate then stage2_retrain; optionally persist all artifacts."""
    cfg.validate()
    if data is None:
        data = generate_task(cfg)
    t0 = time.perf_counter()
    stage1 = stage1_allocate(cfg, data)
    t1 = time.perf_counter()
    stage2_model, metrics, stage2_curves = stage2_retrain(stage1.allocation, cfg, data)
    t2 = time.perf_counter()
    report = RunReport(
        stage1_curves=stage1.curves,
        importance=stage1.report,
        allocation=stage1.allocation,
        stage2_curves=stage2_curves,
        metrics=metrics,
        wall_clock={"stage1_seconds": t1 - t0, "stage2_seconds": t2 - t1},
    )
    if out_dir is not None:
        from . import io as artifact_io
        artifact_io.write_run_dir(out_dir, cfg, report, stage1.model, stage2_model)
    return report


# ---------------------------------------------------------------------------
# gradual pruning schedule
# ---------------------------------------------------------------------------

def _deactivate(model: Model, prune_set: set[RankId]) -> None:
    for mid in sorted_modules(model):
        mod = model.loras[mid]
        for j, oi in enumerate(mod.rank_ids):
            if RankId(mid, int(oi)) in prune_set:
                mod.active[j] = False
                mod.lam.data[j] = 0.0


def _event_scores(model: Model, data: Dataset, surviving: list[RankId], method: str,
                  split: str, batch_size: int, n_batches: int, seed: int) -> ImportanceReport:
    if method == "magnitude":
        return magnitude_score(model)
    if method == "plain_sensitivity":
        return plain_sensitivity(model, data, split, seed,
                                 batch_size=batch_size, n_batches=n_batches)
    plan = sample_coalitions(surviving, GRADUAL_EVENT_RATES, 1, seed)
    return shapley_sensitivity(model, plan, data, split,
                               batch_size=batch_size, n_batches=n_batches)


def gradual_prune(model: Model, data: Dataset, k_per_event: int, every_m_steps: int,
                  R_target: int, scoring_method: str, train_cfg: TrainConfig,
                  *, scoring_split: str = "validation", scoring_batch_size: int = 32,
                  scoring_batches: int = 8
                  ) -> tuple[AllocationConfig, LossCurves, ImportanceReport]:
    """Interleave training with score-and-prune events until R_target survives.

    Each event rescores the surviving ranks on a fresh reduced coalition plan
    and deactivates the min(k_per_event, surplus) lowest-scored survivors.
    Early stopping is armed only once the budget is reached; training then
    continues to convergence on the pruned structure.
    """
    train_cfg.validate()
    if k_per_event < 1 or every_m_steps < 1:
        raise ContractError("k_per_event and every_m_steps must be positive")
    surviving = set(all_rank_ids(model))
    R_init = len(surviving)
    if not 1 <= R_target <= R_init:
        raise BudgetError(f"R_target {R_target} outside [1, {R_init}]")

    steps_per_epoch = math.ceil(data.size("train") / train_cfg.batch_size)
    total_steps = train_cfg.max_epochs * steps_per_epoch
    warmup_steps = int(total_steps * train_cfg.warmup_fraction)
    events_needed = math.ceil((R_init - R_target) / k_per_event)
    if events_needed * every_m_steps > total_steps:
        raise ScheduleError(
            f"{events_needed} prune events every {every_m_steps} steps do not fit "
            f"in {total_steps} training steps")

    params = trainable_parameters(model)
    opt = _AdamW(params)
    stopper = _EarlyStopper(params, train_cfg.patience)
    curves = LossCurves()
    curves.dev.append((0, eval_loss(model, data, "dev", train_cfg.batch_size)))
    report: ImportanceReport | None = None

    step = 0
    event = 0
    stop = False
    for epoch in range(train_cfg.max_epochs):
        for tokens, targets in batches(data, "train", train_cfg.batch_size,
                                       derive_seed(train_cfg.seed, "epoch", epoch)):
            step += 1
            try:
                loss = forward_loss(model, tokens, targets)
                grads = ad.backward(loss)
            except NumericError as exc:
                raise TrainingError(f"divergence at step {step}: {exc}", step=step) from exc
            train_loss = float(loss.data)
            if not math.isfinite(train_loss):
                raise TrainingError(f"divergence at step {step}: loss={train_loss}", step=step)
            curves.train.append((step, train_loss))
            opt.step(grads, _lr_at(step, total_steps, warmup_steps, train_cfg.learning_rate))

            if step % every_m_steps == 0 and len(surviving) > R_target:
                event += 1
                ordered = sorted(surviving, key=RankId.key)
                report = _event_scores(model, data, ordered, scoring_method,
                                       scoring_split, scoring_batch_size, scoring_batches,
                                       derive_seed(train_cfg.seed, "prune-event", event))
                surplus = len(surviving) - R_target
                victims = sorted(
                    surviving,
                    key=lambda rid: (report.scores[rid], tuple(-x for x in rid.key())),
                )[: min(k_per_event, surplus)]
                _deactivate(model, set(victims))
                surviving.difference_update(victims)

            if len(surviving) == R_target and step % train_cfg.eval_every_steps == 0:
                dev = eval_loss(model, data, "dev", train_cfg.batch_size)
                curves.dev.append((step, dev))
                if stopper.observe(dev):
                    stop = True
                    break
        if stop:
            break
    if len(surviving) > R_target:
        raise ScheduleError(f"data exhausted with {len(surviving)} ranks alive, target {R_target}")
    if not stop:
        dev = eval_loss(model, data, "dev", train_cfg.batch_size)
        curves.dev.append((step, dev))
        stopper.observe(dev)
    stopper.restore_best()

    if report is None:  # degenerate schedule: target was already met
        ordered = sorted(surviving, key=RankId.key)
        report = _event_scores(model, data, ordered, scoring_method, scoring_split,
                               scoring_batch_size, scoring_batches,
                               derive_seed(train_cfg.seed, "prune-event", 0))
    counts: dict[ModuleId, int] = {mid: 0 for mid in sorted_modules(model)}
    for rid in surviving:
        counts[rid.module] += 1
    alloc = AllocationConfig(
        counts=counts, kept_ranks=frozenset(surviving),
        meta={"R_init": R_init, "R_target": R_target, "method": scoring_method,
              "schedule": f"gradual({k_per_event},{every_m_steps})",
              "split": report.split, "seed": train_cfg.seed,
              "n_coalitions": report.n_coalitions},
    )
    return alloc, curves, report


# ---------------------------------------------------------------------------
# leave-one-out oracle
# ---------------------------------------------------------------------------

def leave_one_out_importance(model: Model, data: Dataset, split: str = "validation",
                             batch_size: int = 64) -> dict[RankId, float]:
    """Validation-loss increase from masking each rank alone; the ground truth.

    A rank whose lambda is exactly zero scores exactly 0 (masking it is a
    no-op).
    """
    split_key = _SPLIT_KEY.get(split, split)
    ranks = all_rank_ids(model)
    base = eval_loss(model, data, split_key, batch_size)
    universe = frozenset(ranks)
    out: dict[RankId, float] = {}
    for rid in ranks:
        overlay = coalition_overlay(model, Coalition(universe - {rid}))
        out[rid] = eval_loss(model, data, split_key, batch_size, overlay=overlay) - base
    return out


def uniform_baseline_allocation(cfg: PipelineConfig) -> AllocationConfig:
    mids = [ModuleId(l, k) for l in range(cfg.model.n_layers)
            for k in ("Q", "K", "V", "O", "G", "U", "D")]
    return uniform_allocation(mids, cfg.resolved_target())


# ---------------------------------------------------------------------------
# exact-Shapley oracle study
# ---------------------------------------------------------------------------

MICRO_CONFIG = ModelConfig(n_layers=1, d_model=8, d_ffn=16, n_heads=2,
                           vocab_size=16, max_seq_len=16)


def exact_shapley_study(seed: int = 0, rates: Sequence[float] = (0.3, 0.5, 0.7),
                        repeats: int = 3) -> dict:
    """Brute-force game-theoretic check at the smallest useful scale.

    One layer at rank 1 gives 7 ranks, so all 2^7 coalitions can be evaluated
    directly. The characteristic value of a coalition is the dev-loss
    reduction it achieves relative to masking every rank. Returns the exact
    Shapley values, the sampled sensitivity scores, and their rank agreement.
    """
    data = gen_copy_task(512, 128, 128, 8, MICRO_CONFIG.vocab_size,
                         derive_seed(seed, "oracle-data"))
    model = build_model(MICRO_CONFIG, derive_seed(seed, "oracle-model"))
    attach_lora(model, r_init=1, seed=derive_seed(seed, "oracle-lora"))
    cfg = TrainConfig(learning_rate=5e-3, batch_size=32, max_epochs=4,
                      eval_every_steps=16, patience=10,
                      seed=derive_seed(seed, "oracle-train"))
    model, _ = train(model, data, cfg)

    ranks = all_rank_ids(model)
    universe = frozenset(ranks)
    cache: dict[frozenset[int], float] = {}

    def value(members: frozenset[int]) -> float:
        if members not in cache:
            keep = Coalition(frozenset(ranks[i] for i in members))
            overlay = coalition_overlay(model, keep)
            cache[members] = eval_loss(model, data, "dev", overlay=overlay)
        return cache[frozenset()] - cache[members] if members else 0.0

    value(frozenset())  # prime the all-masked baseline
    exact = exact_shapley(value, len(ranks))
    plan = sample_coalitions(ranks, rates, repeats, derive_seed(seed, "oracle-plan"))
    report = shapley_sensitivity(model, plan, data, "validation")
    sens = [report.scores[rid] for rid in ranks]
    return {
        "ranks": ranks,
        "exact": exact,
        "sensitivity": sens,
        "spearman": spearman(exact, sens),
    }
