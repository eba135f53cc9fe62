"""Finite-difference audit of every training loss on small random problems."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import softcl
from . import tensor as T
from .cfm import FieldConfig, FieldParams, FlowBatch, cfm_loss
from .kvformer import ModalityProjector, MvaConfig, MvaParams, mva_forward
from .tensor import Tensor

LOSSES = ("cfm_pretrain", "cfm_mva", "cfm_self_distill", "infonce", "intra", "total")


@dataclass
class Problem:
    loss: Callable[[], Tensor]
    leaves: dict[str, Tensor]


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def build_problem(name: str, rng: np.random.Generator) -> Problem:
    """A random small instance of loss ``name`` with every differentiable input as a leaf."""
    n = int(rng.integers(3, 6))
    d = int(rng.integers(2, 5))
    data_dim, token_dim = int(rng.integers(2, 4)), int(rng.integers(1, 3))
    tau = Tensor(rng.uniform(0.3, 1.0), requires_grad=True)
    if name.startswith("cfm_") or name == "total":
        fcfg = FieldConfig(data_dim=data_dim, time_dim=4, cond_dim=d, token_dim=token_dim, prompt=True,
                           hidden=(int(rng.integers(3, 7)),), activation=str(rng.choice(["silu", "tanh"])))
        field = FieldParams.init(fcfg, rng)
        x1 = rng.normal(size=(n, data_dim))
        tokens = rng.normal(size=(n, 2, token_dim))
        fb = FlowBatch.draw(x1, tokens, rng)
        norm = str(rng.choice(["l1", "l2"]))
    if name.startswith("cfm_"):
        mode = name[len("cfm_"):]
        cond = _leaf(rng, (n, d))
        leaves = {**{f"field.{k}": v for k, v in field.named().items()}, "cond": cond}
        return Problem(lambda: cfm_loss(fb, field, mode, cond=cond, norm=norm), leaves)
    v_m = _leaf(rng, (n, d))
    s_r = _leaf(rng, (n, d))
    metric = str(rng.choice(["dot", "cosine"]))
    if name == "infonce":
        symmetric = bool(rng.integers(2))
        return Problem(lambda: softcl.infonce_loss(v_m, s_r, tau, metric, symmetric),
                       {"v_m": v_m, "s_r": s_r, "tau": tau})
    if name == "intra":
        # the reference side is a fixed teacher (no gradient by design), so it is not a leaf
        return Problem(lambda: softcl.intra_loss(s_r, v_m, tau, metric), {"v_m": v_m, "tau": tau})
    if name != "total":
        raise KeyError(name)
    # composite: raw face embeddings -> projector -> KV-Former -> field + both contrastive terms
    mcfg = MvaConfig(dim=d * 2, kv_size=int(rng.integers(3, 6)), heads=2, depth=1, ffn=True, ffn_mult=2)
    mva = MvaParams.init(mcfg, rng)
    proj = ModalityProjector.init("face", "mlp", 5, mcfg.dim, rng, hidden=4, activation="tanh")
    raw = rng.normal(size=(n, 5))
    ref = Tensor(rng.normal(size=(n, mcfg.dim)))
    fcfg = FieldConfig(data_dim=data_dim, time_dim=4, cond_dim=mcfg.dim, token_dim=token_dim, hidden=(5,))
    field = FieldParams.init(fcfg, rng).frozen()

    def total() -> Tensor:
        v = mva_forward(proj(raw), mva)
        l_cfm = cfm_loss(fb, field, "mva", cond=v, norm=norm)
        return softcl.total_loss(l_cfm, softcl.intra_loss(ref, v, tau, metric),
                                 softcl.infonce_loss(v, ref, tau, metric), 0.05, 0.05)

    leaves = {**{f"mva.{k}": v for k, v in mva.named().items()},
              **{f"proj.{k}": v for k, v in proj.named().items()}, "tau": tau}
    return Problem(total, leaves)


def check_problem(p: Problem, h: float = 1e-5, max_coords: int | None = None,
                  rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backprop and central differences over all leaves."""
    T.zero_grad(p.leaves.values())
    T.backward(p.loss())
    worst = 0.0
    for leaf in p.leaves.values():
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        coords = None
        if max_coords is not None and leaf.data.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(leaf.data.size, size=max_coords, replace=False)
        numeric = finite = T.finite_diff_grad(lambda _t: p.loss(), leaf, h=h, coords=coords)
        err, _ = T.grad_error(analytic, finite)
        worst = max(worst, err)
        del numeric
    return worst


def grad_report(seed: int = 0, trials: int = 3, max_coords: int | None = 24) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}
    for name in LOSSES:
        out[name] = max(check_problem(build_problem(name, rng), max_coords=max_coords, rng=rng)
                        for _ in range(trials))
    return out


def report_csv(report: dict[str, float], threshold: float = 1e-3) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["loss", "max_rel_error", "pass"])
    for name, err in report.items():
        w.writerow([name, f"{err:.3e}", "true" if err < threshold else "false"])
    return buf.getvalue()
