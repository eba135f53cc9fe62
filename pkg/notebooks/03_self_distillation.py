# %% [markdown]
# # Self-distillation against token leakage
#
# The tokenizer leaks a little of the speaker into the content tokens. A field
# trained only on real pairs learns to lean on that leak, so when it is asked
# to voice one speaker with another speaker's tokens it drifts toward the token
# source. Self-distillation retrains on swapped pairs and should resist this.

# %%
from pathlib import Path

from voicespace.bench import fit_probe, swap_sst
from voicespace.config import resolve
from voicespace.synthdata import gen_world
from voicespace.trainer import model_from_checkpoint, train

DESK = resolve(Path(__file__).resolve().parents[1] / "configs" / "desk.ini", env={})

# %%
for leak in (0.0, 0.5, 1.0):
    cfg = DESK.with_(seed=0, world_seed=0, token_leak=leak)
    world = gen_world(cfg.world_config(), 0)
    probe = fit_probe(world, cfg.probe_samples, cfg.probe_ridge)
    pre = train(cfg.with_(stage="pretrain"), world).checkpoint
    sd = train(cfg.with_(stage="self_distill"), world, pre).checkpoint
    base = swap_sst(model_from_checkpoint(pre).field, world, probe=probe)
    dist = swap_sst(model_from_checkpoint(sd).field, world, probe=probe)
    print(f"leak {leak:.1f}: swap SST pretrain {base:6.2f}  distilled {dist:6.2f}  gain {dist - base:+.2f}")
