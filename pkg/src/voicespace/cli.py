"""``voicespace`` command line: data generation, staged training, evaluation and sweeps.

Every verb writes into ``--out``: the resolved config (``config.ini``), its
artifacts, and ``manifest.json`` listing each written file with its SHA-256.
Exit codes: 0 success, 1 contract/config/validation errors, 2 IO or format errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, gradcheck
from .config import STAGES, RunConfig, parse_overrides, resolve, rng_for
from .errors import ContractError, FormatError, VoiceSpaceError
from .synthdata import gen_descriptions, gen_world, save_embeddings
from .trainer import alignment_pool, load_checkpoint, model_from_checkpoint, save_checkpoint, train, trace_csv

log = logging.getLogger("voicespace")


class Run:
    """Output directory bookkeeping for one invocation."""

    def __init__(self, out: str, config: RunConfig):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.files: list[Path] = []
        self.write_text("config.ini", config.to_ini())

    def path(self, name: str) -> Path:
        return self.out / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return self.add(p)

    def add(self, *paths: Path) -> Path:
        for p in paths:
            if p not in self.files:
                self.files.append(p)
        return paths[-1]

    def finish(self) -> None:
        entries = []
        for p in self.files:
            raw = p.read_bytes()
            entries.append({"path": p.relative_to(self.out).as_posix(), "bytes": len(raw),
                            "sha256": hashlib.sha256(raw).hexdigest()})
        manifest = {"config_hash": self.config.hash(), "files": entries}
        self.path("manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _config(args) -> RunConfig:
    return resolve(args.config, parse_overrides(args.set or []))


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    run = Run(args.out, cfg)
    world = gen_world(cfg.world_config(), cfg.resolved_world_seed)
    ids = np.arange(world.num_speakers)
    run.add(*_dump(run, "speakers.uemb", world.speaker_embedding(ids), ids))
    pool = alignment_pool(world, cfg)
    for m in ("face", "text", "speech"):
        idx, rows = pool.stacked(m)
        if len(idx):
            run.add(*_dump(run, f"train.{m}.uemb", rows, pool.speaker_ids[idx]))
    run.add(*_dump(run, "train.reference.uemb", pool.s_r, pool.speaker_ids))
    rng = rng_for(cfg.seed, "data.eval")
    for m in ("face", "text"):
        b = gen_descriptions(world, world.eval_ids, cfg.eval_descs, m, rng)
        run.add(*_dump(run, f"eval.{m}.uemb", np.stack(b.embeddings), b.speaker_ids))
    run.finish()
    print(f"wrote {len(run.files)} files to {run.out}")
    return 0


def _dump(run: Run, name: str, rows, labels) -> tuple[Path, Path]:
    p = run.path(name)
    save_embeddings(p, rows, labels)
    return p, p.with_name(p.name + ".labels")


def cmd_train(args) -> int:
    init = None
    if args.resume:
        # a resumed run continues under the checkpoint's own config
        init = load_checkpoint(args.resume)
        if args.stage and args.stage != init.stage:
            raise ContractError(f"--resume checkpoint is stage {init.stage!r}, not {args.stage!r}")
        cfg = init.config
    else:
        cfg = _config(args)
        if args.stage:
            cfg = cfg.with_(stage=args.stage)
        if args.steps is not None:
            cfg = cfg.with_(**{{"pretrain": "pretrain_steps", "self_distill": "distill_steps",
                                 "align": "steps"}[cfg.stage]: args.steps})
        if args.from_:
            init = load_checkpoint(args.from_)
    run = Run(args.out, cfg)
    result = train(cfg, init=init, until=args.until)
    ckpt = run.path(f"{cfg.stage}.ckpt")
    save_checkpoint(result.checkpoint, ckpt)
    run.add(ckpt)
    run.write_text(f"{cfg.stage}.trace.csv", trace_csv(result.trace))
    run.finish()
    state = "finished" if result.checkpoint.finished else "paused"
    print(f"{cfg.stage}: {state} at step {result.checkpoint.step}/{result.checkpoint.total_steps} -> {ckpt}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if args.tasks:
        cfg = cfg.with_(tasks=args.tasks)
    run = Run(args.out, cfg)
    report = bench.run_benchmark(ckpt, tasks=cfg.task_list(), seed=cfg.seed if args.seed is None else args.seed,
                                 workers=args.workers)
    run.add(*report.write(run.out))
    run.finish()
    sys.stdout.write(report.to_csv())
    return 0


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    run = Run(args.out, cfg)
    world = gen_world(cfg.world_config(), cfg.resolved_world_seed)
    rng = rng_for(cfg.seed if args.seed is None else args.seed, "sample")
    ids = np.repeat(world.eval_ids, args.n)
    steps = args.steps or cfg.ode_steps
    x0 = rng.standard_normal((len(ids), cfg.data_dim))
    tokens = bench.task_tokens(world, "face_tts", ids, world.eval_ids, rng)
    if ckpt.stage == "align":
        model = model_from_checkpoint(ckpt, world, "eval")
        desc = gen_descriptions(world, world.eval_ids, args.n, args.modality, rng)
        x = bench.generate(model, model.field, desc, tokens, x0, steps)
    else:
        # a bare field is conditioned on reference speech directly
        if args.modality != "speech":
            raise ContractError(f"a {ckpt.stage!r} checkpoint has no aggregator; use --modality speech")
        model = model_from_checkpoint(ckpt, world, "eval")
        from .cfm import sample_ode

        x = sample_ode(model.field, x0, steps, cond=world.observe("speech", ids, rng), tokens=tokens)
    probe = bench.fit_probe(world, cfg.probe_samples, cfg.probe_ridge)
    run.add(*_dump(run, "samples.uemb", x, ids))
    run.add(*_dump(run, "samples.speaker.uemb", probe(x), ids))
    run.finish()
    print(f"sampled {len(ids)} points for {len(world.eval_ids)} speakers in {steps} steps")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _config(args)
    run = Run(args.out, cfg)
    report = gradcheck.grad_report(seed=cfg.seed, trials=args.trials)
    text = gradcheck.report_csv(report, args.threshold)
    run.write_text("grad_check.csv", text)
    run.finish()
    sys.stdout.write(text)
    bad = [k for k, v in report.items() if not v < args.threshold]
    if bad:
        raise ContractError(f"gradient check failed for {', '.join(bad)}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    grid = tuple(g.strip() for g in args.grid.split(",") if g.strip())
    run = Run(args.out, cfg)
    results = bench.ablation_grid(cfg, grid)
    keys = [bench.ABLATIONS[g] for g in grid]
    lines = [",".join(keys + bench.REPORT_HEADER)]
    for settings, report in results:
        flags = ["true" if settings[k] else "false" for k in keys]
        lines += [",".join(flags + r.cells()) for r in report.rows]
    text = "\n".join(lines) + "\n"
    run.write_text("ablation.csv", text)
    run.finish()
    sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    try:
        scales = [float(s) for s in args.scales.split(",") if s.strip()]
    except ValueError:
        raise ContractError(f"--scales must be a comma-separated list of numbers, got {args.scales!r}") from None
    run = Run(args.out, cfg)
    series = bench.data_scale_sweep(cfg, scales)
    text = bench.sweep_csv(series)
    run.write_text("sweep.csv", text)
    run.finish()
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out: str, config: bool = True) -> None:
    if config:
        p.add_argument("--config", default=None, help="INI config file layered over the defaults")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None,
                       help="override one config key (repeatable)")
    p.add_argument("--out", default=out, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="cap on parallel evaluation workers")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="voicespace", formatter_class=fmt,
                                     description="Multimodal voice-space alignment on a synthetic speaker world.")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("gen-data", formatter_class=fmt, help="write world embeddings as UEMB files")
    _common(p, "runs/data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", formatter_class=fmt, help="run one training stage")
    _common(p, "runs/train")
    p.add_argument("--stage", choices=STAGES, default=None, help="stage to run; None means the config's stage")
    p.add_argument("--from", dest="from_", metavar="CKPT", default=None,
                   help="finished prerequisite checkpoint (pretrain for self_distill, field for align)")
    p.add_argument("--resume", metavar="CKPT", default=None, help="unfinished checkpoint of the same stage")
    p.add_argument("--steps", type=int, default=None, help="override the stage's step count")
    p.add_argument("--until", type=int, default=None, help="stop after this many total steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", formatter_class=fmt, help="benchmark an align checkpoint")
    _common(p, "runs/eval", config=False)
    p.add_argument("--checkpoint", required=True, help="align checkpoint")
    p.add_argument("--tasks", default=None, help="comma-separated subset of face_tts,face_vc,text_tts,text_vc")
    p.add_argument("--seed", type=int, default=None, help="evaluation seed (default: checkpoint seed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", formatter_class=fmt, help="generate data points for held-out speakers")
    _common(p, "runs/sample", config=False)
    p.add_argument("--checkpoint", required=True, help="align checkpoint (or a field checkpoint with speech)")
    p.add_argument("--modality", choices=("face", "text", "speech"), default="face", help="description modality")
    p.add_argument("--steps", type=int, default=None, help="Euler steps (default: config ode_steps)")
    p.add_argument("--n", type=int, default=8, help="samples per speaker")
    p.add_argument("--seed", type=int, default=None, help="sampling seed (default: checkpoint seed)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("grad-check", formatter_class=fmt, help="finite-difference audit of every loss")
    _common(p, "runs/grad-check")
    p.add_argument("--trials", type=int, default=3, help="random problems per loss")
    p.add_argument("--threshold", type=float, default=1e-3, help="largest acceptable relative error")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", formatter_class=fmt, help="train and benchmark an on/off grid")
    _common(p, "runs/ablate")
    p.add_argument("--grid", default="mva,softcl", help="comma-separated toggles from mva,softcl,self_distill")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", formatter_class=fmt, help="alignment runs across extra-data scales")
    _common(p, "runs/sweep")
    p.add_argument("--scales", default="0,0.25,0.5,1", help="nondecreasing extra-data fractions")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except VoiceSpaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
