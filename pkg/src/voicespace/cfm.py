"""Optimal-transport conditional flow matching.

The path between a prior draw ``x0`` and a data point ``x1`` is the straight
line ``(1 - t) x0 + t x1`` whose velocity is the constant ``x1 - x0``. A
pointwise network ``field`` is regressed onto that velocity with an L1
penalty, conditioned on a speaker vector, pooled content tokens and (in
pretraining only) a randomly masked copy of ``x1`` standing in for the mel
prompt. Generation integrates the learned field with explicit Euler steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

MODES = ("pretrain", "mva", "self_distill")


@dataclass(frozen=True)
class FieldConfig:
    data_dim: int = 8
    time_dim: int = 8
    cond_dim: int = 32
    token_dim: int = 8
    prompt: bool = True
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "silu"

    @property
    def in_width(self) -> int:
        return self.data_dim + self.time_dim + self.cond_dim + self.token_dim + (self.data_dim if self.prompt else 0)


class FieldParams:
    def __init__(self, config: FieldConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        n = len(config.hidden) + 1
        if tensors[f"layers.{n - 1}.w"].shape[1] != config.data_dim:
            raise DimensionError("field output width must equal data_dim")
        if tensors["layers.0.w"].shape[0] != config.in_width:
            raise DimensionError(
                f"field input width {tensors['layers.0.w'].shape[0]} != expected {config.in_width}")

    @classmethod
    def init(cls, config: FieldConfig, rng: np.random.Generator) -> FieldParams:
        widths = [config.in_width, *config.hidden, config.data_dim]
        t = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            t[f"layers.{i}.w"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b)), requires_grad=True)
            t[f"layers.{i}.b"] = Tensor(np.zeros(b), requires_grad=True)
        return cls(config, t)

    @property
    def num_layers(self) -> int:
        return len(self.config.hidden) + 1

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def frozen(self) -> FieldParams:
        """Copy whose tensors do not require gradients (gradients still pass through)."""
        return FieldParams(self.config, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()})


def time_embedding(t, width: int = 8) -> np.ndarray:
    """Sinusoidal features of t in [0, 1]; returns (n x width)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if width == 0:
        return np.zeros((len(t), 0))
    half = width // 2
    freqs = math.pi * 2.0 ** np.arange(half)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if width % 2:
        emb = np.concatenate([emb, t[:, None]], axis=1)
    return emb


def ot_path(x0, x1, t):
    x0, x1 = np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"ot_path shape mismatch: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ContractError(f"t must lie in [0, 1], got {t}")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1


def ot_target(x0, x1):
    x0, x1 = np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"ot_target shape mismatch: {x0.shape} vs {x1.shape}")
    return x1 - x0


def pool_tokens(tokens) -> np.ndarray | None:
    if tokens is None:
        return None
    tokens = np.asarray(tokens, dtype=np.float64)
    return tokens.mean(axis=-2) if tokens.ndim == 3 else tokens


def field_forward(x_t, t, cond, tokens, params: FieldParams, prompt=None) -> Tensor:
    """Evaluate the field on a batch (or a single sample if ``x_t`` is 1-d).

    ``tokens`` may be (n x T x d_c) token sequences, already pooled (n x d_c),
    or None when ``token_dim`` is 0. ``prompt`` defaults to zeros when the
    field has a prompt slot.
    """
    cfg = params.config
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t = T.reshape(x_t, (1, -1))
    n = x_t.shape[0]
    if x_t.shape[1] != cfg.data_dim:
        raise DimensionError(f"x_t width {x_t.shape[1]} != data_dim {cfg.data_dim}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    parts = [x_t, Tensor(time_embedding(t_arr, cfg.time_dim))]
    if cfg.cond_dim:
        if cond is None:
            raise DimensionError(f"field expects a width-{cfg.cond_dim} condition")
        cond = cond if isinstance(cond, Tensor) else Tensor(cond)
        if cond.ndim == 1:
            cond = T.reshape(cond, (1, -1))
        if cond.shape != (n, cfg.cond_dim):
            raise DimensionError(f"condition shape {cond.shape} != ({n}, {cfg.cond_dim})")
        parts.append(cond)
    if cfg.token_dim:
        pooled = pool_tokens(tokens)
        if pooled is None:
            raise DimensionError(f"field expects width-{cfg.token_dim} tokens")
        pooled = pooled.reshape(n, -1)
        if pooled.shape[1] != cfg.token_dim:
            raise DimensionError(f"token width {pooled.shape[1]} != token_dim {cfg.token_dim}")
        parts.append(Tensor(pooled))
    if cfg.prompt:
        p = np.zeros((n, cfg.data_dim)) if prompt is None else np.asarray(prompt, dtype=np.float64).reshape(n, -1)
        parts.append(Tensor(p))
    h = T.concat(parts, axis=1)
    act = T.activation(cfg.activation)
    last = params.num_layers - 1
    for i in range(params.num_layers):
        h = h @ params.tensors[f"layers.{i}.w"] + params.tensors[f"layers.{i}.b"]
        if i < last:
            h = act(h)
    return T.reshape(h, (-1,)) if squeeze else h


@dataclass
class FlowBatch:
    x0: np.ndarray               # n x D prior draws
    x1: np.ndarray               # n x D data points
    t: np.ndarray                # n
    tokens: np.ndarray | None    # n x T x d_c (or pooled n x d_c)
    prompt_mask: np.ndarray | None = None  # n x D, 1 keeps a coordinate of x1

    def __len__(self) -> int:
        return len(self.x1)

    @classmethod
    def draw(cls, x1: np.ndarray, tokens, rng: np.random.Generator, mask_prob: float = 0.5) -> FlowBatch:
        n, dim = x1.shape
        x0 = rng.standard_normal((n, dim))
        t = rng.random(n)
        keep = (rng.random((n, dim)) >= mask_prob).astype(np.float64)
        return cls(x0=x0, x1=x1, t=t, tokens=tokens, prompt_mask=keep)


FieldFn = Callable[..., Tensor]


def _evaluate(field, x_t, t, cond, tokens, prompt) -> Tensor:
    if isinstance(field, FieldParams):
        return field_forward(x_t, t, cond, tokens, field, prompt)
    out = field(x_t, t, cond, tokens, prompt)
    return out if isinstance(out, Tensor) else Tensor(out)


def cfm_loss(batch: FlowBatch, field, mode: str, cond=None, norm: str = "l1") -> Tensor:
    """Mean over the batch of |(x1 - x0) - field(x_t, t | ...)|.

    ``mode`` decides the prompt: "pretrain" feeds ``x1 * prompt_mask``;
    "mva" and "self_distill" feed no prompt.
    """
    if len(batch) == 0:
        raise ContractError("cfm_loss needs a nonempty batch")
    if mode not in MODES:
        raise ContractError(f"unknown cfm mode {mode!r}; expected one of {MODES}")
    x_t = ot_path(batch.x0, batch.x1, batch.t)
    target = Tensor(ot_target(batch.x0, batch.x1))
    prompt = None
    if mode == "pretrain":
        mask = batch.prompt_mask if batch.prompt_mask is not None else np.ones_like(batch.x1)
        prompt = batch.x1 * mask
    pred = _evaluate(field, x_t, batch.t, cond, batch.tokens, prompt)
    diff = target - pred
    if norm == "l1":
        per = T.tsum(T.tabs(diff), axis=1)
    elif norm == "l2":
        per = T.tsum(T.square(diff), axis=1)
    else:
        raise ContractError(f"unknown loss norm {norm!r}")
    return T.mean(per)


def sample_ode(field, x0, steps: int = 10, cond=None, tokens=None, prompt=None) -> np.ndarray:
    """Integrate dx/dt = field(x, t) from t=0 to t=1 with ``steps`` Euler steps."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    with T.no_grad():
        for i in range(steps):
            t = i * dt
            v = _evaluate(field, x, t, cond, tokens, prompt)
            x = x + dt * v.data
    return x


@dataclass
class DistillTriple:
    tokens: np.ndarray       # re-encoded tokens of the converted samples
    speaker: np.ndarray      # source speaker embeddings s
    x1: np.ndarray           # source data points (regression targets)
    converted: np.ndarray    # voice-converted samples
    target_ids: np.ndarray   # randomly chosen conversion speakers


def choose_other_speakers(source_ids, pool, rng: np.random.Generator) -> np.ndarray:
    """Uniformly pick, for each source id, a speaker from ``pool`` other than itself."""
    pool = np.asarray(pool)
    if len(np.unique(pool)) < 2:
        raise ContractError("speaker swap needs at least two speakers")
    out = np.empty(len(source_ids), dtype=np.int64)
    for i, s in enumerate(source_ids):
        others = pool[pool != s]
        out[i] = others[rng.integers(len(others))]
    return out


def self_distill_pair(world, batch, field: FieldParams, rng: np.random.Generator, steps: int = 10,
                      mask_prob: float = 0.5) -> DistillTriple:
    """Voice-convert ``batch`` to random other speakers and re-tokenize the result.

    The conversion conditions the (pretrained) field on the chosen speaker's
    embedding and a masked prompt drawn from that speaker, while keeping the
    source utterance's tokens.
    """
    targets = choose_other_speakers(batch.speaker_ids, world.train_ids, rng)
    s_tgt = world.observe("speech", targets, rng)
    n, dim = batch.x1.shape
    prompt_src = world.data_points(targets, world.sample_content(n, rng), rng)
    keep = (rng.random((n, dim)) >= mask_prob).astype(np.float64)
    x0 = rng.standard_normal((n, dim))
    converted = sample_ode(field, x0, steps, cond=s_tgt, tokens=batch.tokens, prompt=prompt_src * keep)
    tokens = world.tokenize(converted, batch.content, rng)
    return DistillTriple(tokens=tokens, speaker=batch.s_r, x1=batch.x1, converted=converted, target_ids=targets)
