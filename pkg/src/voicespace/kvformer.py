"""Multimodal voice aggregator: modality projectors and the KV-Former block.

Each modality embedding is first mapped to a width-``d`` state vector by a
:class:`ModalityProjector`. The KV-Former then lets that state query a
learnable bank of key-value vectors through multi-head cross-attention,

    q = Wq s,   k = Wk f,   v = Wv f,   a = softmax(q k^T / sqrt(d)) v,

wrapped in a pre-norm residual block with an optional feed-forward layer.
All batch computations use row vectors, so ``Wq s`` becomes ``S @ Wq.T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

MODALITIES = ("face", "text", "speech")


@dataclass(frozen=True)
class MvaConfig:
    dim: int = 32
    kv_size: int = 64
    heads: int = 2
    depth: int = 2
    ffn: bool = True
    ffn_mult: int = 4
    residual: bool = True
    norm: bool = True
    out_proj: bool = True
    per_head_scale: bool = False
    activation: str = "silu"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ContractError("depth must be at least 1")
        if self.kv_size < 1:
            raise ContractError("kv_size must be positive")

    @classmethod
    def isolated(cls, dim: int, kv_size: int, heads: int = 1) -> MvaConfig:
        """Bare cross-attention: one block, no norm, no residual, no feed-forward."""
        return cls(dim=dim, kv_size=kv_size, heads=heads, depth=1, ffn=False, residual=False, norm=False)


def _normal(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


class MvaParams:
    """Learnable key-value bank plus per-block projection weights."""

    def __init__(self, config: MvaConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        bank = tensors["kv_bank"]
        if bank.shape[1] != config.dim or bank.shape[0] != config.kv_size:
            raise DimensionError(f"kv_bank shape {bank.shape} does not match config ({config.kv_size}, {config.dim})")

    @classmethod
    def init(cls, config: MvaConfig, rng: np.random.Generator) -> MvaParams:
        d = config.dim
        s = 1.0 / math.sqrt(d)
        # residual branches start small so a fresh block is close to the identity
        branch = 1.0 / math.sqrt(d) if config.residual else 1.0
        # bank rows start at unit norm, the scale of a speaker embedding
        t = {"kv_bank": _normal(rng, (config.kv_size, d), s)}
        for b in range(config.depth):
            p = f"blocks.{b}."
            for name in ("wq", "wk", "wv"):
                t[p + name] = _normal(rng, (d, d), s)
            if config.out_proj:
                t[p + "wo"] = _normal(rng, (d, d), s * branch)
            if config.norm:
                t[p + "ln1.gain"] = Tensor(np.ones(d), requires_grad=True)
                t[p + "ln1.bias"] = Tensor(np.zeros(d), requires_grad=True)
            if config.ffn:
                h = config.ffn_mult * d
                if config.norm:
                    t[p + "ln2.gain"] = Tensor(np.ones(d), requires_grad=True)
                    t[p + "ln2.bias"] = Tensor(np.zeros(d), requires_grad=True)
                t[p + "ffn.w1"] = _normal(rng, (d, h), s)
                t[p + "ffn.b1"] = Tensor(np.zeros(h), requires_grad=True)
                t[p + "ffn.w2"] = _normal(rng, (h, d), branch / math.sqrt(h))
                t[p + "ffn.b2"] = Tensor(np.zeros(d), requires_grad=True)
        return cls(config, t)

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def attention_weights(state: Tensor, params: MvaParams, block: int = 0) -> list[Tensor]:
    """Per-head attention rows of ``block`` for the given (already normed) state."""
    return _attend(state, params, block)[1]


def _attend(x: Tensor, params: MvaParams, block: int):
    cfg = params.config
    p = f"blocks.{block}."
    f = params["kv_bank"]
    q = x @ params[p + "wq"].T
    k = f @ params[p + "wk"].T
    v = f @ params[p + "wv"].T
    dh = cfg.dim // cfg.heads
    scale = 1.0 / math.sqrt(dh if cfg.per_head_scale else cfg.dim)
    heads, weights = [], []
    for h in range(cfg.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = q if cfg.heads == 1 else T.slice_cols(q, lo, hi)
        kh = k if cfg.heads == 1 else T.slice_cols(k, lo, hi)
        vh = v if cfg.heads == 1 else T.slice_cols(v, lo, hi)
        w = T.softmax_rows((qh @ kh.T) * scale)
        weights.append(w)
        heads.append(w @ vh)
    a = heads[0] if cfg.heads == 1 else T.concat(heads, axis=1)
    if cfg.out_proj:
        a = a @ params[p + "wo"].T
    return a, weights


def mva_forward(s_m: Tensor, params: MvaParams) -> Tensor:
    """Map a batch of state vectors (N x d) into the shared voice space."""
    cfg = params.config
    squeeze = s_m.ndim == 1
    x = T.reshape(s_m, (1, -1)) if squeeze else s_m
    if x.shape[1] != cfg.dim:
        raise DimensionError(f"MVA input width {x.shape[1]} does not match dim {cfg.dim}")
    act = T.activation(cfg.activation)
    for b in range(cfg.depth):
        p = f"blocks.{b}."
        h = T.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"]) if cfg.norm else x
        a, _ = _attend(h, params, b)
        x = x + a if cfg.residual else a
        if cfg.ffn:
            h = T.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"]) if cfg.norm else x
            h = act(h @ params[p + "ffn.w1"] + params[p + "ffn.b1"])
            h = h @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
            x = x + h if cfg.residual else h
    return T.reshape(x, (-1,)) if squeeze else x


# ---------------------------------------------------------------------------
# Modality projection


def adaptive_pool_matrix(width: int, bins: int) -> np.ndarray:
    """Matrix P (width x bins) so that ``raw @ P`` is adaptive average pooling."""
    P = np.zeros((width, bins))
    for i in range(bins):
        lo = (i * width) // bins
        hi = -((-(i + 1) * width) // bins)
        P[lo:hi, i] = 1.0 / (hi - lo)
    return P


@dataclass
class ModalityProjector:
    """Maps a raw encoder embedding to a width-``dim`` state vector.

    ``mode="mlp"``: two affine layers with ``activation`` between them.
    ``mode="linear"``: one affine layer.
    ``mode="pool"``: adaptive average pooling to ``bins`` values, then one affine layer.
    """

    modality: str
    mode: str
    in_width: int
    dim: int
    tensors: dict[str, Tensor]
    activation: str = "none"
    bins: int = 0

    @classmethod
    def init(cls, modality: str, mode: str, in_width: int, dim: int, rng: np.random.Generator,
             hidden: int = 64, activation: str = "none", bins: int | None = None) -> ModalityProjector:
        if modality not in MODALITIES:
            raise ContractError(f"unknown modality {modality!r}")
        t: dict[str, Tensor] = {}
        if mode == "mlp":
            t["w1"] = _normal(rng, (in_width, hidden), 1.0 / math.sqrt(in_width))
            t["b1"] = Tensor(np.zeros(hidden), requires_grad=True)
            t["w2"] = _normal(rng, (hidden, dim), 1.0 / math.sqrt(hidden))
            t["b2"] = Tensor(np.zeros(dim), requires_grad=True)
            bins = 0
        elif mode == "linear":
            t["w"] = _normal(rng, (in_width, dim), 1.0 / math.sqrt(in_width))
            t["b"] = Tensor(np.zeros(dim), requires_grad=True)
            bins = 0
        elif mode == "pool":
            bins = bins or dim
            t["w"] = _normal(rng, (bins, dim), 1.0 / math.sqrt(bins))
            t["b"] = Tensor(np.zeros(dim), requires_grad=True)
        else:
            raise ContractError(f"unknown projector mode {mode!r}")
        return cls(modality, mode, in_width, dim, t, activation, bins)

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def __call__(self, raw) -> Tensor:
        return project_modality(raw, self)


def project_modality(raw, proj: ModalityProjector) -> Tensor:
    raw = raw if isinstance(raw, Tensor) else Tensor(raw)
    squeeze = raw.ndim == 1
    x = T.reshape(raw, (1, -1)) if squeeze else raw
    t = proj.tensors
    if proj.mode == "pool":
        x = x @ Tensor(adaptive_pool_matrix(x.shape[1], proj.bins))
        out = x @ t["w"] + t["b"]
    else:
        if x.shape[1] != proj.in_width:
            raise DimensionError(
                f"{proj.modality} projector expects width {proj.in_width}, got {x.shape[1]}")
        if proj.mode == "mlp":
            h = T.activation(proj.activation)(x @ t["w1"] + t["b1"])
            out = h @ t["w2"] + t["b2"]
        else:
            out = x @ t["w"] + t["b"]
    return T.reshape(out, (-1,)) if squeeze else out


# ---------------------------------------------------------------------------
# Speech anchoring


def speech_anchor_select(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask: True where an entry's MVA input is its reference speech."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"anchor probability must lie in [0, 1], got {p}")
    draws = rng.random(n)
    return draws < p
