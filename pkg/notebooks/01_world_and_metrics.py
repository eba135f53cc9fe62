# %% [markdown]
# # The synthetic world and the three metrics
#
# A speaker is a unit latent. Face, text and speech views are noisy linear
# images of it, and a data point mixes the speaker with per-utterance content.
# The benchmark never sees the latent: a ridge probe maps data points back to
# speaker embeddings, and SST/SSC/SSD are cosine scores in that space.

# %%
from pathlib import Path

import numpy as np

from voicespace.bench import fit_probe, sst, ssc, ssd
from voicespace.config import resolve
from voicespace.synthdata import gen_world

DESK = resolve(Path(__file__).resolve().parents[1] / "configs" / "desk.ini", env={})

world = gen_world(DESK.world_config(), 0)
print(f"{world.num_speakers} speakers, {len(world.eval_ids)} held out for evaluation")

# %% views of the same speaker agree more than views of different speakers
rng = np.random.default_rng(0)
ids = np.repeat(world.eval_ids[:4], 8)
for modality in ("face", "text", "speech"):
    obs = world.observe(modality, ids, rng)
    groups = [obs[ids == s] for s in world.eval_ids[:4]]
    print(f"{modality:6s} consistency {ssc(groups):6.2f}  diversity {ssd(groups):6.2f}")

# %% the probe recovers speaker embeddings from clean data points
probe = fit_probe(world, DESK.probe_samples, DESK.probe_ridge)
ids = world.eval_ids
x = world.data_points(ids, world.sample_content(len(ids), rng))
print(f"probe SST on true data points: {sst(probe(x), world.speaker_embedding(ids)):.2f}")

# %% metric sanity: identical rows score 100, orthogonal rows score 0
v = rng.normal(size=(3, 5))
print(sst(v, v), sst([[1.0, 0.0]], [[0.0, 1.0]]))
