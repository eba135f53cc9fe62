"""Run configuration: one flat namespace of keys, grouped into INI sections.

Resolution order is built-in defaults, then a config file, then explicit
overrides (``key=value`` strings from the command line), then the
``VOICESPACE_SEED`` environment variable for ``seed``. Unknown keys and
unparsable values raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import dataclasses
import difflib
import hashlib
import os
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .cfm import FieldConfig
from .errors import ConfigError
from .kvformer import MvaConfig
from .synthdata import WorldConfig

SEED_ENV = "VOICESPACE_SEED"
STAGES = ("pretrain", "self_distill", "align")
TASKS = ("face_tts", "face_vc", "text_tts", "text_vc")


def _f(default, section: str, doc: str = ""):
    return field(default=default, metadata={"section": section, "doc": doc})


@dataclass(frozen=True)
class RunConfig:
    # run
    seed: int = _f(0, "run", "master seed; every random substream derives from it")
    world_seed: int = _f(-1, "run", "seed of the synthetic world; -1 means use seed")
    stage: str = _f("pretrain", "run", "pretrain | self_distill | align")
    # world
    num_speakers: int = _f(64, "world")
    eval_speakers: int = _f(16, "world", "speakers held out of every training stage")
    latent_dim: int = _f(16, "world")
    speaker_dim: int = _f(32, "world", "speaker embedding width d (also the MVA width)")
    face_dim: int = _f(48, "world")
    text_dim: int = _f(24, "world")
    token_dim: int = _f(8, "world")
    content_dim: int = _f(4, "world")
    num_tokens: int = _f(4, "world")
    data_dim: int = _f(8, "world")
    noise_face: float = _f(0.3, "world")
    noise_text: float = _f(0.3, "world")
    noise_speech: float = _f(0.1, "world")
    noise_data: float = _f(0.05, "world")
    noise_token: float = _f(0.05, "world")
    content_scale: float = _f(0.5, "world")
    token_leak: float = _f(0.1, "world")
    latent_clusters: int = _f(0, "world", "0 draws latents from an isotropic Gaussian")
    cluster_spread: float = _f(0.5, "world")
    # kvformer
    mva_enabled: bool = _f(True, "kvformer", "false replaces the KV-Former with one linear map")
    kv_size: int = _f(64, "kvformer")
    heads: int = _f(2, "kvformer")
    depth: int = _f(2, "kvformer")
    ffn: bool = _f(True, "kvformer")
    ffn_mult: int = _f(4, "kvformer")
    residual: bool = _f(True, "kvformer")
    norm: bool = _f(True, "kvformer")
    out_proj: bool = _f(True, "kvformer")
    per_head_scale: bool = _f(False, "kvformer")
    mva_activation: str = _f("silu", "kvformer")
    face_projector: str = _f("mlp", "kvformer")
    text_projector: str = _f("mlp", "kvformer")
    speech_projector: str = _f("linear", "kvformer")
    projector_hidden: int = _f(64, "kvformer")
    projector_activation: str = _f("none", "kvformer")
    anchor_prob: float = _f(0.5, "kvformer")
    # softcl
    softcl_enabled: bool = _f(True, "softcl", "false zeroes both contrastive weights")
    lambda1: float = _f(0.05, "softcl")
    lambda2: float = _f(0.05, "softcl")
    tau_init: float = _f(0.07, "softcl")
    tau_floor: float = _f(0.01, "softcl")
    shared_tau: bool = _f(True, "softcl")
    train_tau: bool = _f(True, "softcl")
    symmetric_infonce: bool = _f(True, "softcl")
    similarity: str = _f("dot", "softcl", "dot | cosine")
    # cfm
    time_dim: int = _f(8, "cfm")
    field_hidden: tuple = _f((64, 64), "cfm")
    field_activation: str = _f("silu", "cfm")
    ode_steps: int = _f(10, "cfm")
    prompt_mask_prob: float = _f(0.5, "cfm")
    loss_norm: str = _f("l1", "cfm", "l1 | l2")
    # trainer
    steps: int = _f(3000, "trainer", "alignment steps")
    pretrain_steps: int = _f(3000, "trainer")
    distill_steps: int = _f(1000, "trainer")
    batch_size: int = _f(64, "trainer")
    lr: float = _f(1e-5, "trainer", "peak learning rate of self_distill and align")
    warmup_steps: int = _f(10000, "trainer", "warmup before desk_factor scaling")
    desk_factor: float = _f(0.1, "trainer", "multiplies warmup_steps")
    pretrain_lr: float = _f(1e-3, "trainer", "peak learning rate of the pretrain stage")
    pretrain_warmup: int = _f(100, "trainer")
    schedule: str = _f("constant", "trainer", "constant | cosine after warmup")
    beta1: float = _f(0.9, "trainer")
    beta2: float = _f(0.999, "trainer")
    adam_eps: float = _f(1e-8, "trainer")
    weight_decay: float = _f(0.01, "trainer")
    grad_clip: float = _f(0.0, "trainer", "global-norm clip; 0 disables")
    trace_every: int = _f(50, "trainer")
    self_distill_enabled: bool = _f(True, "trainer")
    # data
    modality_mix: tuple = _f((1.0, 1.0, 0.0), "data", "face, text, speech weights")
    base_speakers: int = _f(16, "data", "training speakers always in the alignment pool")
    descs_per_speaker: int = _f(16, "data")
    extra_data: float = _f(1.0, "data", "fraction of the remaining training speakers added")
    # bench
    eval_descs: int = _f(8, "bench")
    tasks: str = _f("face_tts,face_vc,text_tts,text_vc", "bench")
    probe_samples: int = _f(4096, "bench")
    probe_ridge: float = _f(1e-3, "bench")

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        for name in ("lambda1", "lambda2", "lr", "pretrain_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.tau_init <= 0 or self.tau_floor <= 0:
            raise ConfigError("temperatures must be positive")

    # -- derived views ------------------------------------------------------
    def with_(self, **kw) -> RunConfig:
        return dataclasses.replace(self, **kw)

    @property
    def resolved_world_seed(self) -> int:
        return self.seed if self.world_seed < 0 else self.world_seed

    @property
    def warmup(self) -> int:
        return int(round(self.warmup_steps * self.desk_factor))

    def world_config(self) -> WorldConfig:
        names = {f.name for f in fields(WorldConfig)}
        return WorldConfig(**{k: getattr(self, k) for k in names})

    def mva_config(self) -> MvaConfig:
        return MvaConfig(dim=self.speaker_dim, kv_size=self.kv_size, heads=self.heads, depth=self.depth,
                         ffn=self.ffn, ffn_mult=self.ffn_mult, residual=self.residual, norm=self.norm,
                         out_proj=self.out_proj, per_head_scale=self.per_head_scale,
                         activation=self.mva_activation)

    def field_config(self) -> FieldConfig:
        return FieldConfig(data_dim=self.data_dim, time_dim=self.time_dim, cond_dim=self.speaker_dim,
                           token_dim=self.token_dim, prompt=True, hidden=tuple(self.field_hidden),
                           activation=self.field_activation)

    def task_list(self) -> list[str]:
        tasks = [t.strip() for t in self.tasks.split(",") if t.strip()]
        for t in tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}; expected a subset of {TASKS}")
        return tasks

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunConfig:
        return resolve(overrides={k: _format(v) for k, v in d.items()}, env={})

    def to_ini(self) -> str:
        lines: list[str] = []
        section = None
        for f in fields(self):
            sec = f.metadata["section"]
            if sec != section:
                if section is not None:
                    lines.append("")
                lines.append(f"[{sec}]")
                section = sec
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:12]


FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_BOOLS = {"true": True, "yes": True, "on": True, "1": True,
          "false": False, "no": False, "off": False, "0": False}


def _parse(name: str, text: str):
    f = FIELDS[name]
    default = f.default
    text = text.strip().strip('"').strip("'")
    try:
        if isinstance(default, bool):
            return _BOOLS[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(x) for x in text.split(",") if x.strip())
        return text
    except (KeyError, ValueError):
        kind = "boolean" if isinstance(default, bool) else type(default).__name__
        if isinstance(default, tuple):
            kind = f"comma-separated {type(default[0]).__name__} list"
        raise ConfigError(f"config key {name!r}: expected {kind}, got {text!r}") from None


def _check_key(name: str) -> None:
    if name not in FIELDS:
        near = difflib.get_close_matches(name, FIELDS, n=1)
        hint = f"; did you mean {near[0]!r}?" if near else ""
        raise ConfigError(f"unknown config key {name!r}{hint}")


def read_config_file(path) -> dict[str, str]:
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep key case
    try:
        parser.read_string("[__top__]\n" + text)  # bare keys before any section
    except configparser.Error as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    values: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            _check_key(key)
            values[key] = value
    return values


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(path=None, overrides: dict[str, str] | None = None, env=None) -> RunConfig:
    values: dict[str, Any] = {}
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(read_config_file(path))
    raw.update(overrides or {})
    for k, v in raw.items():
        _check_key(k)
        values[k] = _parse(k, v)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = _parse("seed", env[SEED_ENV])
    return RunConfig(**values)


def parse_config(path, overrides=None) -> RunConfig:
    return resolve(path, parse_overrides(overrides or []))


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for a named substream (data, init, train, eval, ...)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(stream.encode())]))
