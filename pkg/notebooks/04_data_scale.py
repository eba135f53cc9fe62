# %% [markdown]
# # Extra alignment data
#
# Alignment runs on a shared field with a growing fraction of extra speakers
# added to the description pool. Held-out SST should not fall as data grows.

# %%
from pathlib import Path

import numpy as np

from voicespace.bench import data_scale_sweep
from voicespace.config import resolve
from voicespace.synthdata import gen_world

DESK = resolve(Path(__file__).resolve().parents[1] / "configs" / "desk.ini", env={})
SCALES = [0.0, 0.25, 0.5, 1.0]
TASKS = ("face_tts", "face_vc", "text_tts", "text_vc")

world = gen_world(DESK.world_config(), 0)
series = data_scale_sweep(DESK.with_(seed=0, world_seed=0), SCALES, world)

# %%
for scale, rep in series:
    print(f"extra data {scale:4.2f}: mean SST {np.mean([rep.row(t).sst for t in TASKS]):6.2f}")
