"""Artifact persistence: config, checkpoints, CSV reports, allocation docs.

Everything is human-readable text. Floats serialize through repr (shortest
round-trip form, at most 17 significant digits) so every artifact reloads
bitwise-identically. Writes go to a temp file in the target directory and
are renamed into place.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, IntegrityError
from .lora import AllocationConfig, LoRAModule, ModuleId, RankId
from .model import Model, ModelConfig
from .scoring import ImportanceReport
from .workflow import (LossCurves, PipelineConfig, RunReport, Schedule,
                       TaskSpec, TrainConfig)

CHECKPOINT_FORMAT = "lorashap-checkpoint"
CHECKPOINT_VERSION = 1


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def config_to_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    d["mask_rates"] = list(cfg.mask_rates)
    d["task"]["planted_kinds"] = list(cfg.task.planted_kinds)
    return d


def _build_section(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be a mapping, got {type(data).__name__}")
    allowed = set(cls.__dataclass_fields__)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {section}.{unknown[0]!r}")
    return cls(**data)


def config_from_dict(data: dict) -> PipelineConfig:
    """Strict parse: unknown keys rejected, absent keys defaulted."""
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    allowed = set(PipelineConfig.__dataclass_fields__)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}")
    kwargs = dict(data)
    if "model" in kwargs:
        kwargs["model"] = _build_section(ModelConfig, kwargs["model"], "model")
    if "schedule" in kwargs:
        kwargs["schedule"] = _build_section(Schedule, kwargs["schedule"], "schedule")
    for stage in ("stage1", "stage2"):
        if stage in kwargs:
            kwargs[stage] = _build_section(TrainConfig, kwargs[stage], stage)
    if "task" in kwargs:
        task = dict(kwargs["task"]) if isinstance(kwargs["task"], dict) else kwargs["task"]
        if isinstance(task, dict) and "planted_kinds" in task:
            task["planted_kinds"] = tuple(task["planted_kinds"])
        kwargs["task"] = _build_section(TaskSpec, task, "task")
    if "mask_rates" in kwargs:
        kwargs["mask_rates"] = tuple(float(r) for r in kwargs["mask_rates"])
    try:
        cfg = PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(data)


def save_config(cfg: PipelineConfig, path: str) -> None:
    _atomic_write(path, json.dumps(config_to_dict(cfg), indent=2) + "\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _tensor_doc(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}


def _tensor_from_doc(doc: dict, name: str) -> np.ndarray:
    try:
        return np.array(doc["values"], dtype=np.float64).reshape(doc["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"malformed tensor {name!r} in checkpoint") from exc


def _checkpoint_payload(model: Model) -> dict:
    base = {
        "embed": _tensor_doc(model.embed.data),
        "pos": _tensor_doc(model.pos.data),
        "head": _tensor_doc(model.head.data),
    }
    for mid, w in model.weights.items():
        base[str(mid)] = _tensor_doc(w.data)
    lora = {}
    for mid, mod in model.loras.items():
        lora[str(mid)] = {
            "rank_ids": [int(i) for i in mod.rank_ids],
            "active": [bool(a) for a in mod.active],
            "P": _tensor_doc(mod.P.data),
            "lam": _tensor_doc(mod.lam.data),
            "Qm": _tensor_doc(mod.Qm.data),
        }
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
        "base": base,
        "lora": lora,
    }


def save_checkpoint(model: Model, path: str) -> None:
    payload = _checkpoint_payload(model)
    payload["checksum"] = hashlib.sha256(_canonical_json(payload).encode()).hexdigest()
    _atomic_write(path, json.dumps(payload) + "\n")


def _parse_module_id(text: str) -> ModuleId:
    layer, kind = text.split(".")
    return ModuleId(int(layer), kind)


def load_checkpoint(path: str, expected_config: ModelConfig | None = None) -> Model:
    """Rebuild a model (pruned shapes included) from its checkpoint document."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: not valid checkpoint JSON ({exc.msg})") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    stored_sum = doc.pop("checksum", None)
    actual = hashlib.sha256(_canonical_json(doc).encode()).hexdigest()
    if stored_sum != actual:
        raise IntegrityError(f"{path}: checksum mismatch; file is corrupt")
    try:
        config = ModelConfig(**doc["config"])
    except TypeError as exc:
        raise IntegrityError(f"{path}: malformed model config") from exc
    if expected_config is not None and config != expected_config:
        raise ConfigError(f"checkpoint model config {config} does not match expected {expected_config}")
    base = doc["base"]
    weights = {}
    for mid_text, tdoc in base.items():
        if mid_text in ("embed", "pos", "head"):
            continue
        mid = _parse_module_id(mid_text)
        weights[mid] = ad.constant(_tensor_from_doc(tdoc, mid_text))
    model = Model(config, int(doc.get("seed", 0)),
                  embed=ad.constant(_tensor_from_doc(base["embed"], "embed")),
                  pos=ad.constant(_tensor_from_doc(base["pos"], "pos")),
                  head=ad.constant(_tensor_from_doc(base["head"], "head")),
                  weights=weights)
    for mid_text, mdoc in doc.get("lora", {}).items():
        mid = _parse_module_id(mid_text)
        model.loras[mid] = LoRAModule(
            P=ad.parameter(_tensor_from_doc(mdoc["P"], f"{mid_text}.P")),
            lam=ad.parameter(_tensor_from_doc(mdoc["lam"], f"{mid_text}.lam")),
            Qm=ad.parameter(_tensor_from_doc(mdoc["Qm"], f"{mid_text}.Qm")),
            active=np.array(mdoc["active"], dtype=bool),
            rank_ids=np.array(mdoc["rank_ids"], dtype=np.int64),
        )
    return model


# ---------------------------------------------------------------------------
# importance CSV (+ metadata sidecar)
# ---------------------------------------------------------------------------

def write_importance_csv(report: ImportanceReport, path: str) -> None:
    rows = ["layer,kind,rank_index,score"]
    for rid, score in report.ordered_scores():
        rows.append(f"{rid.module.layer},{rid.module.kind},{rid.index},{score!r}")
    _atomic_write(path, "\n".join(rows) + "\n")
    meta = {"method": report.method, "split": report.split, "seed": report.seed,
            "n_coalitions": report.n_coalitions, "batches_used": report.batches_used}
    _atomic_write(path + ".meta.json", json.dumps(meta, indent=2) + "\n")


def read_importance_csv(path: str) -> ImportanceReport:
    scores: dict[RankId, float] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["layer", "kind", "rank_index", "score"]:
            raise IntegrityError(f"{path}: bad importance CSV header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                layer, kind, index, score = int(row[0]), row[1], int(row[2]), float(row[3])
            except (IndexError, ValueError) as exc:
                raise IntegrityError(f"{path}: line {lineno}: bad row {row}") from exc
            scores[RankId(ModuleId(layer, kind), index)] = score
    meta_path = path + ".meta.json"
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    return ImportanceReport(scores=scores,
                            method=meta.get("method", "unknown"),
                            split=meta.get("split", "unknown"),
                            n_coalitions=int(meta.get("n_coalitions", 0)),
                            seed=int(meta.get("seed", 0)),
                            batches_used=int(meta.get("batches_used", 0)))


# ---------------------------------------------------------------------------
# loss curves CSV
# ---------------------------------------------------------------------------

def write_curves_csv(curves: LossCurves, path: str) -> None:
    """Columns step,train_loss,dev_loss; a blank cell means not recorded there."""
    train = dict(curves.train)
    dev = dict(curves.dev)
    rows = ["step,train_loss,dev_loss"]
    for step in sorted(set(train) | set(dev)):
        t = repr(train[step]) if step in train else ""
        d = repr(dev[step]) if step in dev else ""
        rows.append(f"{step},{t},{d}")
    _atomic_write(path, "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# allocation document
# ---------------------------------------------------------------------------

def allocation_to_text(alloc: AllocationConfig) -> str:
    lines = [f"# meta: {key} = {alloc.meta[key]}" for key in sorted(alloc.meta)]
    for mid in sorted(alloc.counts, key=ModuleId.key):
        lines.append(f"{mid} = {alloc.counts[mid]}")
    return "\n".join(lines) + "\n"


def write_allocation(alloc: AllocationConfig, path: str) -> None:
    _atomic_write(path, allocation_to_text(alloc))


def read_allocation(path: str) -> AllocationConfig:
    counts: dict[ModuleId, int] = {}
    meta: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("meta:"):
                    key, _, value = body[len("meta:"):].partition("=")
                    meta[key.strip()] = _parse_meta_value(value.strip())
                continue
            name, eq, count = line.partition("=")
            if not eq:
                raise IntegrityError(f"{path}: line {lineno}: expected 'layer.kind = count'")
            try:
                mid = _parse_module_id(name.strip())
                counts[mid] = int(count.strip())
            except (ValueError, IndexError) as exc:
                raise IntegrityError(f"{path}: line {lineno}: bad entry {line!r}") from exc
            if counts[mid] < 0:
                raise IntegrityError(f"{path}: line {lineno}: negative count")
    return AllocationConfig(counts=counts, kept_ranks=None, meta=meta)


def _parse_meta_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


# ---------------------------------------------------------------------------
# run summaries, sweeps, dataset export
# ---------------------------------------------------------------------------

def write_json(payload: dict, path: str) -> None:
    _atomic_write(path, json.dumps(payload, indent=2) + "\n")


def write_text(text: str, path: str) -> None:
    _atomic_write(path, text)


def write_summary(report: RunReport, path: str) -> None:
    payload = {
        "metrics": report.metrics,
        "wall_clock": report.wall_clock,
        "allocation_total": report.allocation.total_kept,
        "allocation_meta": report.allocation.meta,
        "scoring": {"method": report.importance.method, "split": report.importance.split,
                    "n_coalitions": report.importance.n_coalitions,
                    "batches_used": report.importance.batches_used},
    }
    _atomic_write(path, json.dumps(payload, indent=2) + "\n")


def write_sweep_summary(rows: list[dict], path: str) -> None:
    """Budget-sweep results: method,total_ranks,dev_loss,test_loss."""
    lines = ["method,total_ranks,dev_loss,test_loss"]
    for row in rows:
        lines.append(f"{row['method']},{row['total_ranks']},"
                     f"{row['dev_loss']!r},{row['test_loss']!r}")
    _atomic_write(path, "\n".join(lines) + "\n")


def export_dataset_split(dataset, split: str, path: str) -> None:
    """One sample per line: input ids, a tab, then target ids (-1 = unsupervised)."""
    tokens, targets = dataset.splits[split]
    header = (f"# lorashap-dataset task={dataset.task_kind} split={split} "
              f"n={len(tokens)} seq_len={dataset.seq_len} vocab={dataset.vocab_size} "
              f"seed={dataset.seed}")
    lines = [header]
    for tok, tgt in zip(tokens, targets):
        lines.append(" ".join(map(str, tok)) + "\t" + " ".join(map(str, tgt)))
    _atomic_write(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# whole run directories
# ---------------------------------------------------------------------------

def write_run_dir(out_dir: str, cfg: PipelineConfig, report: RunReport,
                  stage1_model: Model | None = None,
                  stage2_model: Model | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.json"))
    write_curves_csv(report.stage1_curves, os.path.join(out_dir, "stage1_curves.csv"))
    write_importance_csv(report.importance, os.path.join(out_dir, "importance.csv"))
    write_allocation(report.allocation, os.path.join(out_dir, "allocation.txt"))
    write_curves_csv(report.stage2_curves, os.path.join(out_dir, "stage2_curves.csv"))
    write_summary(report, os.path.join(out_dir, "summary.json"))
    if stage1_model is not None:
        save_checkpoint(stage1_model, os.path.join(out_dir, "stage1_checkpoint.json"))
    if stage2_model is not None:
        save_checkpoint(stage2_model, os.path.join(out_dir, "stage2_checkpoint.json"))
