# %% [markdown]
# # Alignment ablation
#
# One shared flow field, then alignment runs with the multi-view aggregator and
# the soft contrastive losses switched on and off. Scores average the four
# benchmark tasks on held-out speakers.

# %%
from pathlib import Path

import numpy as np

from voicespace.bench import fit_probe, run_benchmark
from voicespace.config import resolve
from voicespace.synthdata import gen_world
from voicespace.trainer import train

DESK = resolve(Path(__file__).resolve().parents[1] / "configs" / "desk.ini", env={})
SEEDS = range(3)
TASKS = ("face_tts", "face_vc", "text_tts", "text_vc")

world = gen_world(DESK.world_config(), 0)
cfg = DESK.with_(seed=0, world_seed=0)
field = train(cfg.with_(stage="pretrain"), world).checkpoint
field = train(cfg.with_(stage="self_distill"), world, field).checkpoint
probe = fit_probe(world, DESK.probe_samples, DESK.probe_ridge)

# %%
variants = {"full": {}, "mva off": {"mva_enabled": False}, "softcl off": {"softcl_enabled": False}}
scores = {k: [] for k in variants}
for seed in SEEDS:
    for name, flags in variants.items():
        ck = train(cfg.with_(stage="align", seed=seed, **flags), world, field).checkpoint
        rep = run_benchmark(ck, seed=seed, world=world, probe=probe)
        scores[name].append([np.mean([getattr(rep.row(t), m) for t in TASKS]) for m in ("sst", "ssd")])

# %%
for name, rows in scores.items():
    a = np.array(rows)
    print(f"{name:10s} SST {a[:, 0].mean():6.2f} ± {a[:, 0].std(ddof=1):.2f}   "
          f"SSD {a[:, 1].mean():6.2f} ± {a[:, 1].std(ddof=1):.2f}")
