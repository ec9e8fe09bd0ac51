"""Tiny decoder-only transformer with seven LoRA attach sites per layer.

Per layer: RMS pre-norm, causal multi-head attention through Q/K/V/O linear
modules, then RMS pre-norm and a gated FFN silu(x G) * (x U) @ D. Token and
(frozen, learned) positional embeddings feed layer 0; an untied frozen head
produces logits. Only LoRA parameters ever train.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, StateError
from .lora import KINDS, LoRAModule, ModuleId, RankId, init_lora_module, lora_forward
from .rng import derive_seed, make_rng

INIT_STD = 0.02
NEG_INF = -1e30  # additive mask value; keeps every tensor finite


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    d_ffn: int
    n_heads: int
    vocab_size: int
    max_seq_len: int

    def validate(self) -> None:
        for name, value in self.__dict__.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"ModelConfig.{name} must be a positive int, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


DESK_CONFIG = ModelConfig(n_layers=2, d_model=32, d_ffn=64, n_heads=4,
                          vocab_size=64, max_seq_len=32)


def module_shape(config: ModelConfig, kind: str) -> tuple[int, int]:
    """(input dim, output dim) of one linear-module kind."""
    d, f = config.d_model, config.d_ffn
    return {"Q": (d, d), "K": (d, d), "V": (d, d), "O": (d, d),
            "G": (d, f), "U": (d, f), "D": (f, d)}[kind]


class Model:
    def __init__(self, config: ModelConfig, seed: int, embed: ad.Tensor,
                 pos: ad.Tensor, head: ad.Tensor, weights: dict[ModuleId, ad.Tensor]):
        self.config = config
        self.seed = seed
        self.embed = embed
        self.pos = pos
        self.head = head
        self.weights = weights
        self.loras: dict[ModuleId, LoRAModule] = {}
        self._mask_cache: dict[int, np.ndarray] = {}

    def module_ids(self) -> list[ModuleId]:
        return [ModuleId(l, k) for l in range(self.config.n_layers) for k in KINDS]

    def causal_mask(self, T: int) -> np.ndarray:
        if T not in self._mask_cache:
            m = np.zeros((T, T))
            m[np.triu_indices(T, k=1)] = NEG_INF
            self._mask_cache[T] = m
        return self._mask_cache[T]


def build_model(config: ModelConfig, seed: int) -> Model:
    """Deterministic Gaussian(0, 0.02) init of all (frozen) base weights."""
    config.validate()
    d, V, S = config.d_model, config.vocab_size, config.max_seq_len

    def init(shape, *salt):
        return ad.constant(make_rng(seed, *salt).normal(0.0, INIT_STD, size=shape))

    weights = {}
    for l in range(config.n_layers):
        for k in KINDS:
            weights[ModuleId(l, k)] = init(module_shape(config, k), l, k)
    return Model(config, seed,
                 embed=init((V, d), "embed"),
                 pos=init((S, d), "pos"),
                 head=init((d, V), "head"),
                 weights=weights)


def attach_lora(model: Model, r_init: int, seed: int) -> Model:
    """Give every module a rank-r_init LoRA; total ranks = 7 * L * r_init."""
    if model.loras:
        raise StateError("LoRA already attached")
    if r_init < 1:
        raise ConfigError(f"r_init must be positive, got {r_init}")
    for mid in model.module_ids():
        d1, d2 = module_shape(model.config, mid.kind)
        model.loras[mid] = init_lora_module(d1, d2, r_init, derive_seed(seed, mid.layer, mid.kind))
    return model


def attach_lora_allocation(model: Model, counts: dict[ModuleId, int], seed: int) -> Model:
    """Fresh per-module LoRAs sized by an allocation; zero-count modules stay bare."""
    if model.loras:
        raise StateError("LoRA already attached")
    for mid, count in counts.items():
        if mid not in model.weights:
            raise ConfigError(f"allocation names unknown module {mid}")
        if count < 0:
            raise ConfigError(f"negative rank count at {mid}")
        if count == 0:
            continue
        d1, d2 = module_shape(model.config, mid.kind)
        model.loras[mid] = init_lora_module(d1, d2, count, derive_seed(seed, mid.layer, mid.kind))
    return model


def trainable_parameters(model: Model) -> list[ad.Tensor]:
    """All LoRA tensors in canonical module order (P, lambda, Qm per module)."""
    params = []
    for mid in sorted(model.loras, key=ModuleId.key):
        mod = model.loras[mid]
        params.extend((mod.P, mod.lam, mod.Qm))
    return params


def lora_parameters(model: Model) -> list[tuple[RankId, float, np.ndarray, np.ndarray]]:
    """One (RankId, lambda, P column, Q row) entry per unpruned rank, canonical order."""
    if not model.loras:
        raise StateError("no LoRA attached")
    out = []
    for mid in sorted(model.loras, key=ModuleId.key):
        mod = model.loras[mid]
        for j, oi in enumerate(mod.rank_ids):
            out.append((RankId(mid, int(oi)), float(mod.lam.data[j]),
                        mod.P.data[:, j].copy(), mod.Qm.data[j, :].copy()))
    return out


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _module_forward(model: Model, mid: ModuleId, x: ad.Tensor,
                    overlay: dict[ModuleId, np.ndarray] | None) -> ad.Tensor:
    W = model.weights[mid]
    mod = model.loras.get(mid)
    if mod is None:
        return ad.matmul(x, W)
    return lora_forward(x, W, mod, None if overlay is None else overlay.get(mid))


def forward_logits(model: Model, tokens, overlay: dict[ModuleId, np.ndarray] | None = None,
                   trace: dict[str, np.ndarray] | None = None) -> ad.Tensor:
    tok = np.asarray(tokens)
    if tok.ndim != 2 or not np.issubdtype(tok.dtype, np.integer):
        raise DataError(f"tokens must be a 2-D integer array, got shape {tok.shape} dtype {tok.dtype}")
    B, T = tok.shape
    cfg = model.config
    if T > cfg.max_seq_len:
        raise DataError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if tok.size and (tok.min() < 0 or tok.max() >= cfg.vocab_size):
        raise DataError(f"token id out of range [0, {cfg.vocab_size})")
    H = cfg.n_heads
    hd = cfg.d_model // H

    def note(name: str, t: ad.Tensor) -> None:
        if trace is not None:
            trace[name] = t.data.copy()

    x = ad.add(ad.embedding_lookup(model.embed, tok),
               ad.constant(np.broadcast_to(model.pos.data[:T], (B, T, cfg.d_model))))
    mask = ad.constant(np.broadcast_to(model.causal_mask(T), (B, H, T, T)))
    for l in range(cfg.n_layers):
        h = ad.rms_normalize(x)
        note(f"L{l}.attn_in", h)
        q = _module_forward(model, ModuleId(l, "Q"), h, overlay)
        k = _module_forward(model, ModuleId(l, "K"), h, overlay)
        v = _module_forward(model, ModuleId(l, "V"), h, overlay)
        # (B, T, d) -> (B, H, T, hd)
        q = ad.transpose(ad.reshape(q, (B, T, H, hd)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (B, T, H, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (B, T, H, hd)), (0, 2, 1, 3))
        scores = ad.add(ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), hd ** -0.5), mask)
        probs = ad.softmax_lastdim(scores)
        note(f"L{l}.attn_probs", probs)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
        note(f"L{l}.attn_ctx", ctx)
        x = ad.add(x, _module_forward(model, ModuleId(l, "O"), ctx, overlay))
        h2 = ad.rms_normalize(x)
        note(f"L{l}.ffn_in", h2)
        g = _module_forward(model, ModuleId(l, "G"), h2, overlay)
        u = _module_forward(model, ModuleId(l, "U"), h2, overlay)
        f = ad.elementwise_mul(ad.silu(g), u)
        note(f"L{l}.ffn_gated", f)
        x = ad.add(x, _module_forward(model, ModuleId(l, "D"), f, overlay))
    final = ad.rms_normalize(x)
    note("final_norm", final)
    return ad.matmul(final, model.head)


def forward_loss(model: Model, tokens, targets,
                 overlay: dict[ModuleId, np.ndarray] | None = None,
                 trace: dict[str, np.ndarray] | None = None) -> ad.Tensor:
    """Mean next-token cross entropy; target -1 marks unsupervised positions."""
    logits = forward_logits(model, tokens, overlay=overlay, trace=trace)
    return ad.cross_entropy_mean(logits, targets)
