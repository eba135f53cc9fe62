import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from voicespace import tensor as T
from voicespace.cfm import (FieldConfig, FieldParams, FlowBatch, cfm_loss, choose_other_speakers, field_forward,
                            ot_path, ot_target, sample_ode, self_distill_pair, time_embedding)
from voicespace.errors import ContractError, DimensionError
from voicespace.synthdata import WorldConfig, gen_batch, gen_world
from voicespace.tensor import Tensor


def small_field(seed=0, **kw):
    cfg = FieldConfig(**{"data_dim": 3, "time_dim": 4, "cond_dim": 2, "token_dim": 2, "hidden": (5,), **kw})
    return FieldParams.init(cfg, np.random.default_rng(seed))


def test_ot_path_examples():
    x0, x1 = np.array([0.0, 0.0]), np.array([2.0, 4.0])
    assert ot_path(x0, x1, 0.0).tolist() == [0.0, 0.0]
    assert ot_path(x0, x1, 1.0).tolist() == [2.0, 4.0]
    assert ot_path(x0, x1, 0.5).tolist() == [1.0, 2.0]
    with pytest.raises(ContractError):
        ot_path(x0, x1, 1.5)


def test_ot_target_examples():
    assert ot_target([1.0, 1.0], [1.0, 1.0]).tolist() == [0.0, 0.0]
    assert ot_target([1.0, 1.0], [3.0, 0.0]).tolist() == [2.0, -1.0]
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=5), rng.normal(size=5)
    assert ot_target(a, b).tolist() == oracles.ot_target(a, b)
    with pytest.raises(DimensionError):
        ot_target(a, b[:3])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.floats(0, 1))
def test_path_identity(x0, x1, t):
    x0, x1 = np.array(x0), np.array(x1)
    np.testing.assert_allclose(ot_path(x0, x1, t) + (1 - t) * ot_target(x0, x1), x1, atol=1e-12, rtol=0)


def test_time_embedding_oracle():
    for t in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(time_embedding(t, 8)[0], oracles.time_embedding(t, 8), atol=1e-15)
    assert time_embedding([0.1, 0.2], 5).shape == (2, 5)


def test_field_zero_weights_give_zero():
    f = small_field()
    for t in f.tensors.values():
        t.data[:] = 0.0
    out = field_forward(np.ones((2, 3)), 0.4, np.ones((2, 2)), np.ones((2, 2)), f)
    assert not np.any(out.data)


def test_field_affine_case():
    cfg = FieldConfig(data_dim=2, time_dim=0, cond_dim=0, token_dim=0, prompt=False, hidden=())
    b = np.array([0.5, -1.0])
    f = FieldParams(cfg, {"layers.0.w": Tensor(np.eye(2)), "layers.0.b": Tensor(b)})
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(field_forward(x, 0.7, None, None, f).data, x + b)


def test_field_matches_affine_chain_oracle():
    f = small_field(1, hidden=(5, 4), activation="tanh")
    rng = np.random.default_rng(2)
    x, cond, tok, prompt = rng.normal(size=3), rng.normal(size=2), rng.normal(size=(3, 2)), rng.normal(size=3)
    got = field_forward(x[None], 0.35, cond[None], tok[None], f, prompt[None]).data[0]
    ws = [f.tensors[f"layers.{i}.w"].data for i in range(3)]
    bs = [f.tensors[f"layers.{i}.b"].data for i in range(3)]
    expect = oracles.field(x, 0.35, cond, tok.mean(axis=0), prompt, ws, bs, "tanh", 4)
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_field_width_errors():
    f = small_field()
    with pytest.raises(DimensionError):
        field_forward(np.ones((2, 4)), 0.1, np.ones((2, 2)), np.ones((2, 2)), f)
    with pytest.raises(DimensionError):
        field_forward(np.ones((2, 3)), 0.1, np.ones((2, 3)), np.ones((2, 2)), f)


def test_cfm_loss_perfect_and_zero_fields():
    rng = np.random.default_rng(3)
    x1 = rng.normal(size=(4, 3))
    fb = FlowBatch.draw(x1, None, rng)

    def perfect(x, t, cond, tokens, prompt):
        return Tensor(fb.x1 - fb.x0)

    assert cfm_loss(fb, perfect, "mva").item() == 0.0
    one = FlowBatch(x0=np.zeros((1, 2)), x1=np.ones((1, 2)), t=np.array([0.3]), tokens=None)
    assert cfm_loss(one, lambda *a: Tensor(np.zeros((1, 2))), "mva").item() == 2.0


def test_cfm_loss_empty_and_bad_mode():
    empty = FlowBatch(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), None)
    with pytest.raises(ContractError):
        cfm_loss(empty, lambda *a: None, "mva")
    one = FlowBatch(np.zeros((1, 2)), np.ones((1, 2)), np.array([0.5]), None)
    with pytest.raises(ContractError):
        cfm_loss(one, lambda *a: Tensor(np.zeros((1, 2))), "nope")


@pytest.mark.parametrize("mode", ["pretrain", "mva", "self_distill"])
@pytest.mark.parametrize("norm", ["l1", "l2"])
def test_cfm_loss_matches_oracle(mode, norm):
    f = small_field(4)
    rng = np.random.default_rng(5)
    x1 = rng.normal(size=(3, 3))
    tokens = rng.normal(size=(3, 2, 2))
    fb = FlowBatch.draw(x1, tokens, rng)
    cond = rng.normal(size=(3, 2))
    got = cfm_loss(fb, f, mode, cond=cond, norm=norm).item()
    ws = [f.tensors[f"layers.{i}.w"].data for i in range(2)]
    bs = [f.tensors[f"layers.{i}.b"].data for i in range(2)]
    expect = oracles.cfm_loss(fb.x0, x1, fb.t, cond, tokens, fb.prompt_mask, mode, ws, bs, "silu", 4, norm=norm)
    assert math.isclose(got, expect, rel_tol=0, abs_tol=1e-10)


def test_prompt_only_in_pretrain():
    seen = {}

    def spy(mode):
        def field(x, t, cond, tokens, prompt):
            seen[mode] = prompt
            return Tensor(np.zeros_like(x))
        return field

    x1 = np.ones((2, 3))
    fb = FlowBatch.draw(x1, None, np.random.default_rng(0))
    for mode in ("pretrain", "mva", "self_distill"):
        cfm_loss(fb, spy(mode), mode)
    np.testing.assert_array_equal(seen["pretrain"], x1 * fb.prompt_mask)
    assert seen["mva"] is None and seen["self_distill"] is None


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000))
def test_cfm_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    f = small_field(seed)
    fb = FlowBatch.draw(rng.normal(size=(3, 3)), rng.normal(size=(3, 2, 2)), rng)
    assert cfm_loss(fb, f, "mva", cond=rng.normal(size=(3, 2))).item() >= 0


@pytest.mark.parametrize("mode", ["pretrain", "mva", "self_distill"])
def test_cfm_gradients(mode):
    f = small_field(6)
    rng = np.random.default_rng(7)
    fb = FlowBatch.draw(rng.normal(size=(3, 3)), rng.normal(size=(3, 2, 2)), rng)
    cond = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

    def loss(_):
        return cfm_loss(fb, f, mode, cond=cond)

    T.backward(loss(None))
    for leaf in [cond, *f.tensors.values()]:
        assert T.grad_error(leaf.grad, T.finite_diff_grad(loss, leaf))[1]


# -- sampler ----------------------------------------------------------------


def test_sampler_constant_and_zero_fields():
    x0 = np.array([[0.5, -1.0]])
    c = np.array([2.0, 3.0])
    for steps in (1, 7):
        np.testing.assert_allclose(sample_ode(lambda x, *a: Tensor(np.tile(c, (len(x), 1))), x0, steps), x0 + c,
                                   atol=1e-12)
    np.testing.assert_array_equal(sample_ode(lambda x, *a: Tensor(np.zeros_like(x)), x0, 5), x0)
    with pytest.raises(ContractError):
        sample_ode(lambda x, *a: x, x0, 0)


def test_sampler_compound_growth():
    out = sample_ode(lambda x, *a: Tensor(x), np.array([[1.0]]), 100)[0, 0]
    assert math.isclose(out, (1 + 1 / 100) ** 100, rel_tol=1e-12)
    assert math.isclose(out, 2.7048138, abs_tol=1e-7)


def test_sampler_translates_prior_with_mean_field():
    rng = np.random.default_rng(8)
    x0 = rng.normal(size=(5, 3))
    shift = rng.normal(size=3)
    out = sample_ode(lambda x, *a: Tensor(np.tile(shift, (len(x), 1))), x0, 13)
    np.testing.assert_allclose(out, x0 + shift, atol=1e-9)


def test_sampler_error_halves():
    errs = [abs(sample_ode(lambda x, *a: Tensor(x), np.array([[1.0]]), n)[0, 0] - math.e) for n in (10, 20, 40, 80)]
    for a, b in zip(errs, errs[1:]):
        assert 0.4 <= b / a <= 0.6


# -- self-distillation pairs ------------------------------------------------


def _world(**kw):
    return gen_world(WorldConfig(num_speakers=6, eval_speakers=2, **kw), seed=1)


def test_other_speaker_never_source():
    rng = np.random.default_rng(0)
    src = rng.integers(4, size=200)
    other = choose_other_speakers(src, np.arange(4), rng)
    assert np.all(other != src)
    with pytest.raises(ContractError):
        choose_other_speakers(np.zeros(3, dtype=int), np.array([0]), rng)


def test_distill_pair_deterministic():
    w = _world()
    f = FieldParams.init(FieldConfig(data_dim=w.config.data_dim, cond_dim=w.config.speaker_dim), np.random.default_rng(0))
    batch = gen_batch(w, 8, mix=(0, 0, 1), seed=3)
    a = self_distill_pair(w, batch, f, np.random.default_rng(4))
    b = self_distill_pair(w, batch, f, np.random.default_rng(4))
    assert a.tokens.tobytes() == b.tokens.tobytes() and np.array_equal(a.target_ids, b.target_ids)
    assert np.all(a.target_ids != batch.speaker_ids)
    np.testing.assert_array_equal(a.x1, batch.x1)
    np.testing.assert_array_equal(a.speaker, batch.s_r)


def test_distill_pair_degenerate_world():
    """With identical speakers the conversion has nothing to change."""
    w = _world(noise_data=0.0, noise_token=0.0, noise_speech=0.0)
    w.latents[:] = w.latents[0]
    f = FieldParams.init(FieldConfig(data_dim=w.config.data_dim, cond_dim=w.config.speaker_dim), np.random.default_rng(0))
    batch = gen_batch(w, 16, mix=(0, 0, 1), seed=5)
    pair = self_distill_pair(w, batch, f, np.random.default_rng(6))
    fb = FlowBatch.draw(batch.x1, batch.tokens, np.random.default_rng(7))
    base = cfm_loss(fb, f, "self_distill", cond=batch.s_r).item()
    fb2 = FlowBatch(fb.x0, fb.x1, fb.t, pair.tokens)
    distilled = cfm_loss(fb2, f, "self_distill", cond=pair.speaker).item()
    assert math.isclose(distilled, base, rel_tol=0.1)
