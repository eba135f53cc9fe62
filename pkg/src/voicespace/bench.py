"""Objective speaker-generation metrics and the benchmark harness.

Generated data points are mapped to speaker-embedding space by a fixed
ridge-regression probe fitted on world samples (the stand-in for an external
speaker-verification model). On those embeddings:

* SST -- mean 100*cos(generated, target speaker embedding);
* SSC -- per speaker, mean pairwise 100*cos among generations from distinct
  descriptions, averaged over speakers;
* SSD -- mean 100*cos between different speakers' mean generations
  (lower means more diverse voices).
"""

from __future__ import annotations

import csv
import io
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cfm import FieldParams, sample_ode
from .config import TASKS, RunConfig, rng_for
from .errors import ContractError, ValidationError
from .synthdata import ModalityBatch, World, gen_descriptions, gen_world, save_embeddings
from .trainer import Checkpoint, model_from_checkpoint, run_pipeline, voice_embed

REPORT_HEADER = ["task", "n_speakers", "n_desc", "sst", "ssc", "ssd", "seed", "config_hash"]


def _rows(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if np.any(~np.any(x != 0, axis=1)):
        raise ContractError("cosine similarity of a zero-norm embedding is undefined")
    return x


def _cos_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # dot / sqrt(|a|^2 |b|^2) with one summation order, so identical rows give exactly 1
    dots = np.einsum("ij,ij->i", a, b)
    return np.clip(dots / np.sqrt(np.einsum("ij,ij->i", a, a) * np.einsum("ij,ij->i", b, b)), -1.0, 1.0)


def _cos_gram(a: np.ndarray) -> np.ndarray:
    g = np.einsum("ik,jk->ij", a, a)
    sq = np.diag(g)
    return np.clip(g / np.sqrt(np.outer(sq, sq)), -1.0, 1.0)


def sst(generated, targets) -> float:
    if np.size(generated) == 0:
        raise ContractError("sst needs at least one generated embedding")
    g, t = _rows(generated), _rows(targets)
    if g.shape != t.shape:
        raise ContractError(f"sst pairs mismatch: {g.shape} vs {t.shape}")
    return float(100.0 * np.mean(_cos_pairs(g, t)))


def ssc(groups) -> float:
    per_speaker = []
    for grp in groups:
        grp = np.asarray(grp, dtype=np.float64)
        if len(grp) < 2:
            continue
        sims = _cos_gram(_rows(grp))
        iu = np.triu_indices(len(grp), k=1)
        per_speaker.append(sims[iu].mean())
    if not per_speaker:
        raise ContractError("ssc needs at least one speaker with two or more generations")
    return float(100.0 * np.mean(per_speaker))


def ssd(groups) -> float:
    if len(groups) < 2:
        raise ContractError("ssd needs at least two speakers")
    means = _rows(np.stack([np.asarray(g, dtype=np.float64).mean(axis=0) for g in groups]))
    sims = _cos_gram(means)
    iu = np.triu_indices(len(means), k=1)
    return float(100.0 * sims[iu].mean())


# ---------------------------------------------------------------------------
# Probe and evaluation set


@dataclass
class Probe:
    weights: np.ndarray  # D x d
    x_mean: np.ndarray
    y_mean: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.x_mean) @ self.weights + self.y_mean


def fit_probe(world: World, n: int = 4096, ridge: float = 1e-3, seed: int = 0) -> Probe:
    rng = rng_for(world.seed + seed, "eval.probe")
    ids = rng.integers(world.num_speakers, size=n)
    x = world.data_points(ids, world.sample_content(n, rng), rng)
    y = world.speaker_embedding(ids)
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - xm, y - ym
    w = np.linalg.solve(xc.T @ xc + ridge * n * np.eye(x.shape[1]), xc.T @ yc)
    return Probe(w, xm, ym)


@dataclass
class EvalSet:
    speakers: np.ndarray
    descriptions: dict[str, ModalityBatch]  # modality -> entries grouped by speaker
    per_speaker: int
    targets: np.ndarray                      # clean embedding of each description's speaker

    @classmethod
    def build(cls, world: World, per_speaker: int = 8, speakers=None) -> EvalSet:
        speakers = world.eval_ids if speakers is None else np.asarray(speakers)
        rng = rng_for(world.seed, "eval.descriptions")
        desc = {m: gen_descriptions(world, speakers, per_speaker, m, rng) for m in ("face", "text")}
        ids = desc["face"].speaker_ids
        return cls(speakers, desc, per_speaker, world.speaker_embedding(ids))


def task_tokens(world: World, task: str, speaker_ids: np.ndarray, pool: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    """TTS tasks get content-only tokens; VC tasks get tokens of another speaker's utterance."""
    n = len(speaker_ids)
    content = world.sample_content(n, rng)
    if task.endswith("_tts"):
        return world.tokenize(None, content, rng, leak=0.0)
    from .cfm import choose_other_speakers

    sources = choose_other_speakers(speaker_ids, pool, rng)
    x_src = world.data_points(sources, content, rng)
    return world.tokenize(x_src, content, rng)


@dataclass
class BenchRow:
    task: str
    n_speakers: int
    n_desc: int
    sst: float
    ssc: float
    ssd: float
    seed: int
    config_hash: str

    def cells(self) -> list[str]:
        return [self.task, str(self.n_speakers), str(self.n_desc), f"{self.sst:.6f}", f"{self.ssc:.6f}",
                f"{self.ssd:.6f}", str(self.seed), self.config_hash]


@dataclass
class BenchReport:
    rows: list[BenchRow]
    generated: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def row(self, task: str) -> BenchRow:
        for r in self.rows:
            if r.task == task:
                return r
        raise KeyError(task)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()

    def write(self, out_dir, prefix: str = "bench") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / f"{prefix}.csv"]
        written[0].write_text(self.to_csv())
        for task, (emb, labels) in self.generated.items():
            p = out / f"{prefix}.{task}.uemb"
            save_embeddings(p, emb, labels)
            written += [p, p.with_name(p.name + ".labels")]
        return written


def generate(model, field: FieldParams, descriptions: ModalityBatch, tokens: np.ndarray, x0: np.ndarray,
             steps: int) -> np.ndarray:
    with T.no_grad():
        v = voice_embed(model, descriptions).data
    return sample_ode(field, x0, steps, cond=v, tokens=tokens)


def run_benchmark(checkpoint: Checkpoint, eval_set: EvalSet | None = None, tasks=None, seed: int = 0,
                  world: World | None = None, probe: Probe | None = None, workers: int = 1) -> BenchReport:
    config = checkpoint.config
    if checkpoint.stage != "align":
        raise ContractError(f"benchmark needs an align checkpoint, got stage {checkpoint.stage!r}")
    world = world or gen_world(config.world_config(), config.resolved_world_seed)
    eval_set = eval_set or EvalSet.build(world, config.eval_descs)
    tasks = config.task_list() if tasks is None else list(tasks)
    for t in tasks:
        if t not in TASKS:
            raise ContractError(f"unknown task {t!r}")
    overlap = set(checkpoint.meta.get("train_speakers", [])) & {int(s) for s in eval_set.speakers}
    if overlap:
        raise ValidationError(f"eval speakers overlap alignment training speakers: {sorted(overlap)}")
    probe = probe or fit_probe(world, config.probe_samples, config.probe_ridge)
    model = model_from_checkpoint(checkpoint, world, "eval")
    chash = config.hash()

    def one(task: str):
        desc = eval_set.descriptions[task.split("_")[0]]
        rng = rng_for(seed, f"eval.{task}")  # per-task stream: order and worker count do not matter
        tokens = task_tokens(world, task, desc.speaker_ids, eval_set.speakers, rng)
        x0 = rng.standard_normal((len(desc), config.data_dim))
        g = probe(generate(model, model.field, desc, tokens, x0, config.ode_steps))
        groups = [g[desc.speaker_ids == s] for s in eval_set.speakers]
        row = BenchRow(task, len(eval_set.speakers), eval_set.per_speaker, sst(g, eval_set.targets),
                       ssc(groups), ssd(groups), seed, chash)
        return row, (g, desc.speaker_ids.copy())

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    return BenchReport([r for r, _ in results], {t: g for t, (_, g) in zip(tasks, results)})


def swap_sst(field: FieldParams, world: World, per_speaker: int = 8, steps: int = 10, seed: int = 0,
             probe: Probe | None = None) -> float:
    """SST when the field is conditioned on one speaker but fed another speaker's tokens.

    Conditioning uses each eval speaker's reference speech embedding; no prompt.
    """
    probe = probe or fit_probe(world)
    rng = rng_for(seed, "eval.swap")
    ids = np.repeat(world.eval_ids, per_speaker)
    cond = world.observe("speech", ids, rng)
    tokens = task_tokens(world, "face_vc", ids, world.eval_ids, rng)
    x0 = rng.standard_normal((len(ids), world.config.data_dim))
    x = sample_ode(field, x0, steps, cond=cond, tokens=tokens)
    return sst(probe(x), world.speaker_embedding(ids))


# ---------------------------------------------------------------------------
# Grids and sweeps

ABLATIONS = {"mva": "mva_enabled", "softcl": "softcl_enabled", "self_distill": "self_distill_enabled"}


def ablation_grid(config: RunConfig, grid=("mva", "softcl"), world: World | None = None,
                  field_checkpoints: dict | None = None, seed: int | None = None):
    """Train and benchmark every on/off combination of the named toggles.

    Returns a list of (settings dict, BenchReport). ``field_checkpoints`` maps
    ``self_distill_enabled`` to a reusable field checkpoint and is filled in.
    """
    for g in grid:
        if g not in ABLATIONS:
            raise ContractError(f"unknown ablation {g!r}; choose from {sorted(ABLATIONS)}")
    world = world or gen_world(config.world_config(), config.resolved_world_seed)
    cache = {} if field_checkpoints is None else field_checkpoints
    seed = config.seed if seed is None else seed
    out = []
    for values in itertools.product((True, False), repeat=len(grid)):
        settings = {ABLATIONS[g]: v for g, v in zip(grid, values)}
        cfg = config.with_(**settings)
        result = run_pipeline(cfg, world, cache.get(cfg.self_distill_enabled))
        cache.setdefault(cfg.self_distill_enabled, _field_checkpoint_of(cfg, world, result))
        out.append((settings, run_benchmark(result.checkpoint, seed=seed, world=world)))
    return out


def _field_checkpoint_of(cfg: RunConfig, world: World, result):
    # the align checkpoint still carries the frozen field, and its lineage lists the field stages
    c = result.checkpoint
    tensors = {k: v for k, v in c.tensors.items() if k.startswith("field.")}
    stage = "self_distill" if cfg.self_distill_enabled else "pretrain"
    return Checkpoint(config=cfg.with_(stage=stage), stage=stage, step=0, total_steps=0,
                      completed=[s for s in c.completed if s != "align"], tensors=tensors, meta=dict(c.meta))


def data_scale_sweep(config: RunConfig, scales, world: World | None = None, field_checkpoint=None,
                     seed: int | None = None):
    """One alignment run per extra-data fraction on a shared field; returns [(scale, BenchReport)]."""
    scales = [float(s) for s in scales]
    if not scales:
        raise ContractError("data_scale_sweep needs at least one scale")
    if any(b < a for a, b in zip(scales, scales[1:])):
        raise ContractError(f"scales must be nondecreasing, got {scales}")
    world = world or gen_world(config.world_config(), config.resolved_world_seed)
    seed = config.seed if seed is None else seed
    series = []
    for s in scales:
        result = run_pipeline(config.with_(extra_data=s), world, field_checkpoint)
        if field_checkpoint is None:
            field_checkpoint = _field_checkpoint_of(config, world, result)
        series.append((s, run_benchmark(result.checkpoint, seed=seed, world=world)))
    return series


def sweep_csv(series) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scale"] + REPORT_HEADER)
    for scale, report in series:
        for r in report.rows:
            w.writerow([repr(scale)] + r.cells())
    return buf.getvalue()
