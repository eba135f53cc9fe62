"""Synthetic multimodal speaker world and the binary embedding-file format.

Every speaker is a unit-norm latent identity ``z``. Face, text and speech
embeddings are linear observations of ``z`` plus isotropic noise (the noise
levels are noise-to-signal ratios: each map is scaled so ``|A z| ~ 1``).
A data point ("mel frame summary") is ``x = M z + c_scale * G c + noise``
for a per-utterance content vector ``c``. Content tokens carry ``U c`` plus
``token_leak`` times a linear readout of the speaker latent the tokenizer
perceives in ``x``; that leak is what makes speaker-swapped voice conversion
imperfect before self-distillation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, FormatError, LengthError

EMB_MAGIC = b"UEMB"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sBII")


@dataclass(frozen=True)
class WorldConfig:
    num_speakers: int = 64
    eval_speakers: int = 16
    latent_dim: int = 16
    speaker_dim: int = 32
    face_dim: int = 48
    text_dim: int = 24
    token_dim: int = 8
    content_dim: int = 4
    num_tokens: int = 4
    data_dim: int = 8
    noise_face: float = 0.3
    noise_text: float = 0.3
    noise_speech: float = 0.1
    noise_data: float = 0.05
    noise_token: float = 0.05
    content_scale: float = 0.5
    token_leak: float = 0.1
    latent_clusters: int = 0
    cluster_spread: float = 0.5


@dataclass
class World:
    config: WorldConfig
    latents: np.ndarray          # S x d_z, unit rows
    face_map: np.ndarray         # d_face x d_z
    text_map: np.ndarray         # d_text x d_z
    speech_map: np.ndarray       # d x d_z
    data_map: np.ndarray         # D x d_z
    data_content_map: np.ndarray  # D x d_content
    token_content_map: np.ndarray  # d_c x d_content
    token_leak_map: np.ndarray   # d_c x d_z
    seed: int = 0
    _latent_readout: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._latent_readout is None:
            # ridge readout of the latent from the speaker part of a data point
            M = self.data_map
            self._latent_readout = M.T @ np.linalg.inv(M @ M.T + 1e-3 * np.eye(M.shape[0]))

    @property
    def num_speakers(self) -> int:
        return self.latents.shape[0]

    @property
    def eval_ids(self) -> np.ndarray:
        return np.arange(self.num_speakers - self.config.eval_speakers, self.num_speakers)

    @property
    def train_ids(self) -> np.ndarray:
        return np.arange(self.num_speakers - self.config.eval_speakers)

    def speaker_embedding(self, ids) -> np.ndarray:
        """Noiseless speech-space embedding of the given speakers."""
        return self.latents[np.asarray(ids)] @ self.speech_map.T

    def observe(self, modality: str, ids, rng: np.random.Generator | None = None) -> np.ndarray:
        ids = np.asarray(ids)
        cfg = self.config
        maps = {
            "face": (self.face_map, cfg.noise_face),
            "text": (self.text_map, cfg.noise_text),
            "speech": (self.speech_map, cfg.noise_speech),
        }
        if modality not in maps:
            raise ContractError(f"unknown modality {modality!r}")
        A, sigma = maps[modality]
        clean = self.latents[ids] @ A.T
        if sigma == 0 or rng is None:
            return clean
        return clean + rng.normal(0.0, sigma / np.sqrt(A.shape[0]), size=clean.shape)

    def data_points(self, ids, content: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        cfg = self.config
        x = self.latents[np.asarray(ids)] @ self.data_map.T + cfg.content_scale * content @ self.data_content_map.T
        if cfg.noise_data and rng is not None:
            x = x + rng.normal(0.0, cfg.noise_data / np.sqrt(cfg.data_dim), size=x.shape)
        return x

    def perceived_latent(self, x: np.ndarray, content: np.ndarray) -> np.ndarray:
        speaker_part = x - self.config.content_scale * content @ self.data_content_map.T
        return speaker_part @ self._latent_readout.T

    def tokenize(self, x: np.ndarray, content: np.ndarray, rng: np.random.Generator | None = None,
                 leak: float | None = None) -> np.ndarray:
        """Content tokens (n x num_tokens x d_c) for data points ``x`` with known content."""
        cfg = self.config
        leak = cfg.token_leak if leak is None else leak
        base = content @ self.token_content_map.T
        if leak:
            base = base + leak * (self.perceived_latent(x, content) @ self.token_leak_map.T)
        tokens = np.repeat(base[:, None, :], cfg.num_tokens, axis=1)
        if cfg.noise_token and rng is not None:
            tokens = tokens + rng.normal(0.0, cfg.noise_token, size=tokens.shape)
        return tokens

    def sample_content(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, 1.0, size=(n, self.config.content_dim))


def gen_world(config: WorldConfig = WorldConfig(), seed: int = 0) -> World:
    cfg = config
    if cfg.num_speakers < 2:
        raise ContractError(f"a world needs at least 2 speakers, got {cfg.num_speakers}")
    for name in ("latent_dim", "speaker_dim", "face_dim", "text_dim", "token_dim", "content_dim",
                 "num_tokens", "data_dim"):
        if getattr(cfg, name) < 1:
            raise ContractError(f"{name} must be >= 1")
    if cfg.latent_clusters < 0 or cfg.cluster_spread < 0:
        raise ContractError("latent_clusters and cluster_spread must be >= 0")
    for name in ("noise_face", "noise_text", "noise_speech", "noise_data", "noise_token"):
        if getattr(cfg, name) < 0:
            raise ContractError(f"{name} must be >= 0")
    if not 0 <= cfg.eval_speakers <= cfg.num_speakers - 2:
        raise ContractError("eval_speakers must leave at least two training speakers")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5EED,)))
    dz = cfg.latent_dim
    if cfg.latent_clusters > 0:
        # voices group around a few prototypes (think coarse age/gender classes)
        centers = rng.normal(size=(cfg.latent_clusters, dz))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        member = rng.integers(cfg.latent_clusters, size=cfg.num_speakers)
        z = centers[member] + cfg.cluster_spread / np.sqrt(dz) * rng.normal(size=(cfg.num_speakers, dz))
    else:
        z = rng.normal(size=(cfg.num_speakers, dz))
    z /= np.linalg.norm(z, axis=1, keepdims=True)

    def gmap(rows, cols, fan):
        return rng.normal(0.0, 1.0 / np.sqrt(fan), size=(rows, cols))

    def isometry(rows):
        # orthonormal columns keep latent geometry: cos(Az_i, Az_j) == cos(z_i, z_j)
        if rows < dz:
            return gmap(rows, dz, rows)
        q, r = np.linalg.qr(rng.normal(size=(rows, dz)))
        return q * np.sign(np.diag(r))

    return World(
        config=cfg,
        latents=z,
        face_map=isometry(cfg.face_dim),
        text_map=isometry(cfg.text_dim),
        speech_map=isometry(cfg.speaker_dim),
        data_map=gmap(cfg.data_dim, dz, cfg.data_dim),
        data_content_map=gmap(cfg.data_dim, cfg.content_dim, cfg.data_dim * cfg.content_dim),
        token_content_map=gmap(cfg.token_dim, cfg.content_dim, cfg.content_dim),
        token_leak_map=gmap(cfg.token_dim, dz, cfg.token_dim),
        seed=seed,
    )


@dataclass
class ModalityBatch:
    """Column-wise batch; ``embeddings[i]`` has the width of ``modalities[i]``."""

    speaker_ids: np.ndarray
    modalities: list[str]
    embeddings: list[np.ndarray]
    s_r: np.ndarray              # N x d reference speaker embeddings
    content: np.ndarray          # N x d_content
    tokens: np.ndarray           # N x num_tokens x d_c
    x1: np.ndarray               # N x D

    def __len__(self) -> int:
        return len(self.speaker_ids)

    def select(self, idx) -> ModalityBatch:
        idx = np.asarray(idx)
        return ModalityBatch(
            speaker_ids=self.speaker_ids[idx],
            modalities=[self.modalities[i] for i in idx],
            embeddings=[self.embeddings[i] for i in idx],
            s_r=self.s_r[idx],
            content=self.content[idx],
            tokens=self.tokens[idx],
            x1=self.x1[idx],
        )

    def stacked(self, modality: str) -> tuple[np.ndarray, np.ndarray]:
        """(row indices, stacked embeddings) of all entries with ``modality``."""
        idx = np.array([i for i, m in enumerate(self.modalities) if m == modality], dtype=np.int64)
        if len(idx) == 0:
            return idx, np.zeros((0, 0))
        return idx, np.stack([self.embeddings[i] for i in idx])


def gen_batch(world: World, n: int, mix=(1.0, 1.0, 0.0), seed=0, speakers=None) -> ModalityBatch:
    """Draw ``n`` fresh entries; modality tags follow the (face, text, speech) mix."""
    if n < 1:
        raise ContractError("batch size must be >= 1")
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != (3,) or np.any(mix < 0) or mix.sum() == 0:
        raise ContractError(f"modality mix must be three nonnegative weights, not all zero; got {mix}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pool = world.train_ids if speakers is None else np.asarray(speakers)
    ids = rng.choice(pool, size=n)
    tags = rng.choice(3, size=n, p=mix / mix.sum())
    return _build_batch(world, ids, [("face", "text", "speech")[t] for t in tags], rng)


def _build_batch(world: World, ids: np.ndarray, modalities: list[str], rng: np.random.Generator) -> ModalityBatch:
    n = len(ids)
    embs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for m in ("face", "text", "speech"):
        idx = [i for i in range(n) if modalities[i] == m]
        if idx:
            obs = world.observe(m, ids[idx], rng)
            for j, i in enumerate(idx):
                embs[i] = obs[j]
    s_r = world.observe("speech", ids, rng)
    content = world.sample_content(n, rng)
    x1 = world.data_points(ids, content, rng)
    tokens = world.tokenize(x1, content, rng)
    return ModalityBatch(ids, list(modalities), embs, s_r, content, tokens, x1)


def concat_batches(batches: list[ModalityBatch]) -> ModalityBatch:
    return ModalityBatch(
        speaker_ids=np.concatenate([b.speaker_ids for b in batches]),
        modalities=[m for b in batches for m in b.modalities],
        embeddings=[e for b in batches for e in b.embeddings],
        s_r=np.concatenate([b.s_r for b in batches]),
        content=np.concatenate([b.content for b in batches]),
        tokens=np.concatenate([b.tokens for b in batches]),
        x1=np.concatenate([b.x1 for b in batches]),
    )


def gen_descriptions(world: World, speaker_ids, per_speaker: int, modality: str,
                     rng: np.random.Generator) -> ModalityBatch:
    """``per_speaker`` entries of one modality for each listed speaker, grouped by speaker."""
    ids = np.repeat(np.asarray(speaker_ids), per_speaker)
    return _build_batch(world, ids, [modality] * len(ids), rng)


# ---------------------------------------------------------------------------
# Embedding files


@dataclass
class EmbeddingTable:
    rows: np.ndarray
    labels: np.ndarray


def labels_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".labels")


def save_embeddings(path, rows: np.ndarray, labels) -> None:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got shape {rows.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != rows.shape[0]:
        raise DimensionError(f"{len(labels)} labels for {rows.shape[0]} rows")
    n, w = rows.shape
    payload = rows.astype("<f4").tobytes()
    Path(path).write_bytes(_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, n, w) + payload)
    labels_path(path).write_text("".join(f"{int(x)}\n" for x in labels))


def load_embeddings(path, expected_width: int | None = None) -> EmbeddingTable:
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise LengthError(f"{path}: file shorter than the {_EMB_HEADER.size}-byte header")
    magic, version, n, w = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {EMB_MAGIC!r}")
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported embedding file version {version}, expected {EMB_VERSION}")
    if expected_width is not None and w != expected_width:
        raise FormatError(f"{path}: width {w} does not match expected width {expected_width}")
    expected = n * w * 4
    actual = len(raw) - _EMB_HEADER.size
    if actual != expected:
        raise LengthError(f"{path}: payload length mismatch, expected {expected} bytes, got {actual}")
    rows = np.frombuffer(raw, dtype="<f4", count=n * w, offset=_EMB_HEADER.size).reshape(n, w)
    lp = labels_path(path)
    if lp.exists():
        labels = np.array([int(x) for x in lp.read_text().split()], dtype=np.int64)
        if len(labels) != n:
            raise LengthError(f"{lp}: {len(labels)} labels for {n} rows")
    else:
        labels = np.full(n, -1, dtype=np.int64)
    return EmbeddingTable(rows.astype(np.float64), labels)
