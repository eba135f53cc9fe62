"""Staged training: field pretraining, self-distillation, and voice alignment.

Stages and what they optimize:

* ``pretrain`` -- the flow field on (speaker embedding, tokens, masked prompt).
* ``self_distill`` -- the same field, fine-tuned without a prompt on
  speaker-swapped conversions of its own output (needs a pretrain checkpoint).
* ``align`` -- projectors, the KV-Former (or a linear stand-in) and the
  temperature, with the field frozen (needs the field checkpoint).

All state needed to continue a run -- parameters, AdamW moments, the step
counter and the training generator -- lives in :class:`Checkpoint`, so a
resumed run replays the uninterrupted one bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import softcl
from . import tensor as T
from .cfm import FieldParams, FlowBatch, cfm_loss, self_distill_pair
from .config import STAGES, RunConfig, rng_for
from .errors import (ContractError, DimensionError, FormatError, IntegrityError, StagePipelineError,
                     UnsupportedVersionError)
from .kvformer import ModalityProjector, MvaParams, mva_forward, speech_anchor_select
from .synthdata import ModalityBatch, World, _build_batch, concat_batches, gen_batch, gen_world
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VSCK"
CHECKPOINT_VERSION = 1
TRACE_HEADER = ["step", "stage", "loss_total", "loss_cfm", "loss_intra", "loss_inter", "lr", "tau"]


# ---------------------------------------------------------------------------
# Schedule and optimizer


def stage_steps(config: RunConfig, stage: str | None = None) -> int:
    stage = stage or config.stage
    return {"pretrain": config.pretrain_steps, "self_distill": config.distill_steps, "align": config.steps}[stage]


def lr_at(step: int, config: RunConfig, stage: str | None = None) -> float:
    """Linear warmup from 0 to the peak rate, then constant (or cosine)."""
    if step < 0:
        raise ContractError("step must be >= 0")
    stage = stage or config.stage
    if stage == "pretrain":
        peak, warm = config.pretrain_lr, config.pretrain_warmup
    else:
        peak, warm = config.lr, config.warmup
    if warm > 0 and step < warm:
        return peak * step / warm
    if config.schedule == "cosine":
        total = stage_steps(config, stage)
        span = max(total - warm, 1)
        frac = min(max(step - warm, 0) / span, 1.0)
        return peak * 0.5 * (1.0 + math.cos(math.pi * frac))
    return peak


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               moments: dict[str, tuple[np.ndarray, np.ndarray]], step: int, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01,
               decay_mask: dict[str, bool] | None = None):
    """One AdamW update; ``step`` is the 1-based update count used for bias correction.

    Returns new (params, moments) dicts; inputs are not modified.
    """
    new_p, new_m = {}, {}
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name, p in params.items():
        g = grads[name]
        m, v = moments[name]
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"{name}: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        wd = weight_decay if decay_mask is None or decay_mask.get(name, True) else 0.0
        new_p[name] = p - lr * (update + wd * p)
        new_m[name] = (m, v)
    return new_p, new_m


# ---------------------------------------------------------------------------
# Model container


@dataclass
class Model:
    field: FieldParams | None = None
    base_field: FieldParams | None = None
    mva: MvaParams | None = None
    linear: dict[str, Tensor] | None = None
    projectors: dict[str, ModalityProjector] = dc_field(default_factory=dict)
    tau: Tensor | None = None
    tau_inter: Tensor | None = None

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.field is not None:
            out.update({f"field.{k}": v for k, v in self.field.named().items()})
        if self.base_field is not None:
            out.update({f"base_field.{k}": v for k, v in self.base_field.named().items()})
        if self.mva is not None:
            out.update({f"mva.{k}": v for k, v in self.mva.named().items()})
        if self.linear is not None:
            out.update({f"linear.{k}": v for k, v in self.linear.items()})
        for m, p in self.projectors.items():
            out.update({f"proj.{m}.{k}": v for k, v in p.named().items()})
        if self.tau is not None:
            out["tau"] = self.tau
        if self.tau_inter is not None:
            out["tau_inter"] = self.tau_inter
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named().items() if v.requires_grad}

    def inter_tau(self) -> Tensor:
        return self.tau if self.tau_inter is None else self.tau_inter


def init_voice_modules(model: Model, config: RunConfig, world: World, rng: np.random.Generator) -> None:
    wc = world.config
    d = config.speaker_dim
    widths = {"face": wc.face_dim, "text": wc.text_dim, "speech": wc.speaker_dim}
    modes = {"face": config.face_projector, "text": config.text_projector, "speech": config.speech_projector}
    for m in ("face", "text", "speech"):
        model.projectors[m] = ModalityProjector.init(m, modes[m], widths[m], d, rng,
                                                     hidden=config.projector_hidden,
                                                     activation=config.projector_activation)
    if config.mva_enabled:
        model.mva = MvaParams.init(config.mva_config(), rng)
    else:
        model.linear = {
            "w": Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)), requires_grad=True),
            "b": Tensor(np.zeros(d), requires_grad=True),
        }
    model.tau = Tensor(config.tau_init, requires_grad=config.train_tau)
    if not config.shared_tau:
        model.tau_inter = Tensor(config.tau_init, requires_grad=config.train_tau)


def voice_embed(model: Model, batch: ModalityBatch, anchor: np.ndarray | None = None) -> Tensor:
    """Project each entry (its own modality, or its reference speech where
    ``anchor`` is set) and map the result through the aggregator."""
    n = len(batch)
    use_speech = np.array([m == "speech" for m in batch.modalities])
    if anchor is not None:
        use_speech = use_speech | anchor
    parts, order = [], []
    for m in ("face", "text", "speech"):
        if m == "speech":
            rows = np.flatnonzero(use_speech)
            raw = batch.s_r[rows]
        else:
            rows = np.array([i for i in range(n) if not use_speech[i] and batch.modalities[i] == m], dtype=np.int64)
            raw = np.stack([batch.embeddings[i] for i in rows]) if len(rows) else None
        if len(rows):
            parts.append(model.projectors[m](raw))
            order.append(rows)
    s_m = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    perm = np.concatenate(order)
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    if not np.array_equal(perm, np.arange(n)):
        s_m = T.take_rows(s_m, inv)
    if model.mva is not None:
        return mva_forward(s_m, model.mva)
    return s_m @ model.linear["w"] + model.linear["b"]


# ---------------------------------------------------------------------------
# Alignment data pool


def pool_speakers(world: World, config: RunConfig, extra_data: float | None = None) -> np.ndarray:
    extra = config.extra_data if extra_data is None else extra_data
    if not 0.0 <= extra <= 1.0:
        raise ContractError(f"extra_data must lie in [0, 1], got {extra}")
    train = world.train_ids
    base = min(config.base_speakers, len(train))
    n_extra = int(round(extra * (len(train) - base)))
    return train[: base + n_extra]


def alignment_pool(world: World, config: RunConfig, extra_data: float | None = None) -> ModalityBatch:
    """Fixed multimodal training set; extra speakers are appended, never reshuffled."""
    speakers = pool_speakers(world, config, extra_data)
    mix = np.asarray(config.modality_mix, dtype=np.float64)
    if mix.shape != (3,) or np.any(mix < 0) or mix.sum() == 0:
        raise ContractError(f"modality_mix must be three nonnegative weights, got {config.modality_mix}")
    parts = []
    for s in speakers:
        # one generator per speaker keeps the base pool identical as extra data grows
        rng = rng_for(world.seed, f"data.pool.{int(s)}")
        tags = rng.choice(3, size=config.descs_per_speaker, p=mix / mix.sum())
        mods = [("face", "text", "speech")[t] for t in tags]
        parts.append(_build_batch(world, np.full(config.descs_per_speaker, s), mods, rng))
    return concat_batches(parts)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    config: RunConfig
    stage: str
    step: int
    total_steps: int
    completed: list[str]
    tensors: dict[str, np.ndarray]
    rng_state: dict | None = None
    meta: dict = dc_field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def finished(self) -> bool:
        return self.step >= self.total_steps

    def field_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            if k.startswith("field."):
                h.update(k.encode())
                h.update(self.tensors[k].tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.config == other.config and self.stage == other.stage and self.step == other.step
                and self.total_steps == other.total_steps and self.completed == other.completed
                and self.rng_state == other.rng_state and self.meta == other.meta
                and self.version == other.version and self.tensors.keys() == other.tensors.keys()
                and all(self.tensors[k].shape == other.tensors[k].shape
                        and self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors))


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o)}")


def checkpoint_bytes(c: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(c.tensors):
        arr = np.asarray(c.tensors[name], dtype="<f8")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": c.config.to_dict(),
        "stage": c.stage,
        "step": c.step,
        "total_steps": c.total_steps,
        "completed": c.completed,
        "rng_state": c.rng_state,
        "meta": c.meta,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True, default=_json_default).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", c.version, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(c: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(c))


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < 16 + 32 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{source}: checkpoint version {version} is not supported (this build reads version {CHECKPOINT_VERSION})")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{source}: checksum mismatch, checkpoint is corrupt")
    try:
        header = json.loads(body[16:16 + hlen])
    except ValueError as exc:
        raise IntegrityError(f"{source}: unreadable header: {exc}") from None
    payload = body[16 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f8", count=entry["nbytes"] // 8, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(tuple(entry["shape"])).astype(np.float64)
    return Checkpoint(
        config=RunConfig.from_dict(header["config"]),
        stage=header["stage"],
        step=header["step"],
        total_steps=header["total_steps"],
        completed=header["completed"],
        tensors=tensors,
        rng_state=header["rng_state"],
        meta=header["meta"],
        version=version,
    )


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


def _snapshot(model: Model, moments: dict[str, tuple[np.ndarray, np.ndarray]]) -> dict[str, np.ndarray]:
    out = {k: v.data.copy() for k, v in model.named().items()}
    for k, (m, v) in moments.items():
        out[f"opt.m.{k}"] = m.copy()
        out[f"opt.v.{k}"] = v.copy()
    return out


def model_from_checkpoint(c: Checkpoint, world: World | None = None, stage: str | None = None) -> Model:
    """Rebuild parameter objects; ``stage`` decides which tensors are trainable."""
    config = c.config
    stage = stage or c.stage
    t = c.tensors
    model = Model()

    def field_from(prefix: str, trainable: bool) -> FieldParams | None:
        names = {k[len(prefix):]: v for k, v in t.items() if k.startswith(prefix)}
        if not names:
            return None
        return FieldParams(config.field_config(), {k: Tensor(v.copy(), requires_grad=trainable) for k, v in names.items()})

    model.field = field_from("field.", stage in ("pretrain", "self_distill"))
    model.base_field = field_from("base_field.", False)
    if any(k.startswith("proj.") for k in t):
        world = world or gen_world(config.world_config(), config.resolved_world_seed)
        init_voice_modules(model, config, world, np.random.default_rng(0))
        for name, tensor in model.named().items():
            if name in t and not name.startswith(("field.", "base_field.")):
                tensor.data = t[name].copy()
                tensor.requires_grad = stage == "align" and (name not in ("tau", "tau_inter") or config.train_tau)
    return model


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TraceRow:
    step: int
    stage: str
    loss_total: float
    loss_cfm: float
    loss_intra: float
    loss_inter: float
    lr: float
    tau: float

    def cells(self) -> list[str]:
        return [str(self.step), self.stage] + [format(x, ".17g") for x in
                                               (self.loss_total, self.loss_cfm, self.loss_intra,
                                                self.loss_inter, self.lr, self.tau)]


def trace_csv(rows: list[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[TraceRow]
    model: Model
    world: World


def _prerequisite(config: RunConfig) -> str | None:
    if config.stage == "pretrain":
        return None
    if config.stage == "self_distill":
        return "pretrain"
    return "self_distill" if config.self_distill_enabled else "pretrain"


def _stage_losses(stage: str, model: Model, config: RunConfig, world: World, rng: np.random.Generator,
                  pool: ModalityBatch | None):
    zero = Tensor(0.0)
    if stage == "pretrain":
        batch = gen_batch(world, config.batch_size, mix=(0.0, 0.0, 1.0), seed=rng)
        fb = FlowBatch.draw(batch.x1, batch.tokens, rng, config.prompt_mask_prob)
        l_cfm = cfm_loss(fb, model.field, "pretrain", cond=batch.s_r, norm=config.loss_norm)
        return l_cfm, l_cfm, zero, zero
    if stage == "self_distill":
        batch = gen_batch(world, config.batch_size, mix=(0.0, 0.0, 1.0), seed=rng)
        triple = self_distill_pair(world, batch, model.base_field, rng, steps=config.ode_steps,
                                   mask_prob=config.prompt_mask_prob)
        fb = FlowBatch.draw(triple.x1, triple.tokens, rng, config.prompt_mask_prob)
        l_cfm = cfm_loss(fb, model.field, "self_distill", cond=triple.speaker, norm=config.loss_norm)
        return l_cfm, l_cfm, zero, zero
    idx = rng.integers(len(pool), size=config.batch_size)
    batch = pool.select(idx)
    anchor = speech_anchor_select(len(batch), config.anchor_prob, rng)
    v = voice_embed(model, batch, anchor)
    fb = FlowBatch.draw(batch.x1, batch.tokens, rng, config.prompt_mask_prob)
    l_cfm = cfm_loss(fb, model.field, "mva", cond=v, norm=config.loss_norm)
    lam1, lam2 = (config.lambda1, config.lambda2) if config.softcl_enabled else (0.0, 0.0)
    if lam1 == 0.0 and lam2 == 0.0:
        return l_cfm, l_cfm, zero, zero
    s_r = Tensor(batch.s_r)
    l_intra = softcl.intra_loss(s_r, v, model.tau, config.similarity)
    l_inter = softcl.infonce_loss(v, s_r, model.inter_tau(), config.similarity, config.symmetric_infonce)
    return softcl.total_loss(l_cfm, l_intra, l_inter, lam1, lam2), l_cfm, l_intra, l_inter


def train(config: RunConfig, world: World | None = None, init: Checkpoint | None = None,
          until: int | None = None) -> TrainResult:
    """Run ``config.stage``.

    ``init`` is either the prerequisite stage's checkpoint, or an unfinished
    checkpoint of the same stage to resume. ``until`` stops early after that
    many total steps (for mid-run checkpoints).
    """
    stage = config.stage
    world = world or gen_world(config.world_config(), config.resolved_world_seed)
    total = stage_steps(config)
    resume = init is not None and init.stage == stage and not init.finished
    need = _prerequisite(config)
    if resume:
        model = model_from_checkpoint(init, world, stage)
        rng = np.random.default_rng()
        rng.bit_generator.state = init.rng_state
        step = init.step
        completed = list(init.completed)
        trainable = model.trainable()
        moments = {k: (init.tensors[f"opt.m.{k}"].copy(), init.tensors[f"opt.v.{k}"].copy()) for k in trainable}
    else:
        if need is not None and (init is None or need not in init.completed):
            raise StagePipelineError(
                f"stage {stage!r} requires a finished {need!r} checkpoint, none was provided")
        init_rng = rng_for(config.seed, f"init.{stage}")
        if stage == "pretrain":
            model = Model(field=FieldParams.init(config.field_config(), init_rng))
            completed = []
        else:
            prev = model_from_checkpoint(init, world, "frozen")
            completed = list(init.completed)
            if stage == "self_distill":
                base = prev.field
                model = Model(field=FieldParams(base.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                                              for k, v in base.named().items()}),
                              base_field=base.frozen())
            else:
                model = Model(field=prev.field.frozen())
                init_voice_modules(model, config, world, init_rng)
        rng = rng_for(config.seed, f"train.{stage}")
        step = 0
        trainable = model.trainable()
        moments = {k: (np.zeros_like(v.data), np.zeros_like(v.data)) for k, v in trainable.items()}

    pool = alignment_pool(world, config) if stage == "align" else None
    decay_mask = {k: v.data.ndim >= 2 for k, v in trainable.items()}
    trace: list[TraceRow] = []
    stop = total if until is None else min(until, total)
    while step < stop:
        loss, l_cfm, l_intra, l_inter = _stage_losses(stage, model, config, world, rng, pool)
        T.zero_grad(trainable.values())
        T.backward(loss)
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in trainable.items()}
        if config.grad_clip > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > config.grad_clip:
                grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}
        step += 1
        lr = lr_at(step, config)
        new_p, moments = adamw_step({k: v.data for k, v in trainable.items()}, grads, moments, step, lr,
                                    config.beta1, config.beta2, config.adam_eps, config.weight_decay, decay_mask)
        for k, v in trainable.items():
            v.data = new_p[k]
        for tau in (model.tau, model.tau_inter):
            if tau is not None and tau.data < config.tau_floor:
                tau.data = np.asarray(config.tau_floor)
        if step % config.trace_every == 0 or step == total:
            tau_val = float(model.tau.data) if model.tau is not None else 0.0
            trace.append(TraceRow(step, stage, loss.item(), l_cfm.item(), l_intra.item(), l_inter.item(), lr, tau_val))
            log.debug("%s step %d loss %.5f", stage, step, loss.item())
    if step >= total and stage not in completed:
        completed.append(stage)
    meta = {"world_seed": world.seed}
    if stage == "align":
        meta["train_speakers"] = [int(s) for s in np.unique(pool.speaker_ids)]
    elif init is not None and "train_speakers" in init.meta:
        meta["train_speakers"] = init.meta["train_speakers"]
    ckpt = Checkpoint(config=config, stage=stage, step=step, total_steps=total, completed=completed,
                      tensors=_snapshot(model, moments), rng_state=rng.bit_generator.state, meta=meta)
    return TrainResult(ckpt, trace, model, world)


def run_pipeline(config: RunConfig, world: World | None = None, field_checkpoint: Checkpoint | None = None):
    """Run every stage the config needs up to and including align.

    ``field_checkpoint`` (a finished pretrain or self_distill checkpoint) skips
    the stages it already covers. Returns the align :class:`TrainResult`.
    """
    world = world or gen_world(config.world_config(), config.resolved_world_seed)
    ckpt = field_checkpoint
    stages = ["pretrain"] + (["self_distill"] if config.self_distill_enabled else [])
    for stage in stages:
        if ckpt is not None and stage in ckpt.completed:
            continue
        ckpt = train(config.with_(stage=stage), world, ckpt).checkpoint
    return train(config.with_(stage="align"), world, ckpt)


__all__ = ["STAGES", "Checkpoint", "Model", "TraceRow", "TrainResult", "adamw_step", "alignment_pool",
           "load_checkpoint", "lr_at", "model_from_checkpoint", "run_pipeline", "save_checkpoint",
           "stage_steps", "train", "trace_csv", "voice_embed"]
