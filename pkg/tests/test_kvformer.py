import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from voicespace import tensor as T
from voicespace.errors import ContractError, DimensionError
from voicespace.kvformer import (ModalityProjector, MvaConfig, MvaParams, adaptive_pool_matrix, attention_weights,
                                 mva_forward, project_modality, speech_anchor_select)
from voicespace.tensor import Tensor


def params(cfg, seed=0):
    return MvaParams.init(cfg, np.random.default_rng(seed))


def test_config_invariants():
    with pytest.raises(ContractError):
        MvaConfig(dim=6, heads=4)
    with pytest.raises(ContractError):
        MvaConfig(depth=0)


def test_single_key_gives_out_proj_of_value():
    cfg = MvaConfig.isolated(dim=4, kv_size=1)
    p = params(cfg)
    s = np.random.default_rng(1).normal(size=4)
    out = mva_forward(Tensor(s), p).data
    f = p["kv_bank"].data[0]
    expect = p["blocks.0.wo"].data @ (p["blocks.0.wv"].data @ f)
    np.testing.assert_allclose(out, expect, atol=1e-12)
    w = attention_weights(Tensor(s[None, :]), p)[0].data
    assert w.tolist() == [[1.0]]


def test_zero_query_gives_uniform_attention():
    cfg = MvaConfig.isolated(dim=4, kv_size=5)
    p = params(cfg)
    p["blocks.0.wq"].data[:] = 0.0
    s = np.random.default_rng(2).normal(size=(3, 4))
    w = attention_weights(Tensor(s), p)[0].data
    np.testing.assert_allclose(w, np.full((3, 5), 0.2), atol=1e-15)
    vals = p["kv_bank"].data @ p["blocks.0.wv"].data.T
    expect = vals.mean(axis=0) @ p["blocks.0.wo"].data.T
    np.testing.assert_allclose(mva_forward(Tensor(s), p).data, np.tile(expect, (3, 1)), atol=1e-12)


@pytest.mark.parametrize("per_head", [False, True])
def test_full_block_matches_straight_line_oracle(per_head):
    cfg = MvaConfig(dim=4, kv_size=4, heads=2, depth=2, per_head_scale=per_head)
    p = params(cfg, 3)
    rng = np.random.default_rng(4)
    for name, t in p.named().items():  # move off the init so every path matters
        t.data = t.data + 0.3 * rng.normal(size=t.shape)
    s = rng.normal(size=(3, 4))
    out = mva_forward(Tensor(s), p).data
    tensors = {k: v.data for k, v in p.named().items()}
    for i in range(3):
        np.testing.assert_allclose(out[i], oracles.mva(s[i], tensors, cfg), atol=1e-10)


def test_attention_rows_sum_to_one():
    cfg = MvaConfig(dim=8, kv_size=6, heads=4, depth=1)
    p = params(cfg)
    x = Tensor(np.random.default_rng(5).normal(size=(7, 8)))
    for w in attention_weights(x, p):
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_bank_permutation_invariance(seed):
    cfg = MvaConfig(dim=4, kv_size=5, heads=2, depth=2)
    p = params(cfg, seed)
    x = Tensor(np.random.default_rng(seed + 1).normal(size=(3, 4)))
    before = mva_forward(x, p).data
    perm = np.random.default_rng(seed + 2).permutation(5)
    p["kv_bank"].data = p["kv_bank"].data[perm]
    np.testing.assert_allclose(mva_forward(x, p).data, before, atol=1e-12)


def test_forward_is_bit_reproducible():
    cfg = MvaConfig()
    x = Tensor(np.random.default_rng(6).normal(size=(4, 32)))
    assert mva_forward(x, params(cfg, 9)).data.tobytes() == mva_forward(x, params(cfg, 9)).data.tobytes()


def test_width_mismatch():
    with pytest.raises(DimensionError):
        mva_forward(Tensor(np.ones((2, 5))), params(MvaConfig(dim=4, kv_size=3, heads=1)))


@pytest.mark.parametrize("name", ["kv_bank", "blocks.0.wq", "blocks.0.wk", "blocks.0.wv", "blocks.1.wo",
                                  "blocks.1.ffn.w1", "blocks.0.ln1.gain"])
def test_gradients_match_finite_differences(name):
    cfg = MvaConfig(dim=4, kv_size=3, heads=2, depth=2, ffn_mult=2)
    p = params(cfg, 7)
    x = Tensor(np.random.default_rng(8).normal(size=(3, 4)))
    w = Tensor(np.random.default_rng(9).normal(size=(3, 4)))

    def f(_):
        return T.tsum(mva_forward(x, p) * w)

    T.backward(f(None))
    num = T.finite_diff_grad(f, p[name])
    err, ok = T.grad_error(p[name].grad, num)
    assert ok, err


# -- projectors -------------------------------------------------------------


def test_pool_mode_constant_vector():
    proj = ModalityProjector.init("face", "pool", 3, 2, np.random.default_rng(0), bins=1)
    out = project_modality(np.array([[2.0, 2.0, 2.0]]), proj).data
    expect = 2.0 * proj.tensors["w"].data[0] + proj.tensors["b"].data
    np.testing.assert_allclose(out[0], expect, atol=1e-12)


def test_adaptive_pool_matrix_averages():
    P = adaptive_pool_matrix(5, 2)
    np.testing.assert_allclose(P.sum(axis=0), 1.0)
    np.testing.assert_allclose(np.arange(5.0) @ P, [1.0, 3.0])


def test_mlp_identity_weights():
    d = 4
    proj = ModalityProjector.init("text", "mlp", d, d, np.random.default_rng(0), hidden=d)
    for k in ("w1", "w2"):
        proj.tensors[k].data = np.eye(d)
    raw = np.random.default_rng(1).normal(size=(3, d))
    np.testing.assert_allclose(project_modality(raw, proj).data, raw, atol=1e-15)


def test_mlp_matches_affine_chain():
    rng = np.random.default_rng(2)
    proj = ModalityProjector.init("face", "mlp", 6, 4, rng, hidden=5)
    raw = rng.normal(size=(3, 6))
    t = {k: v.data for k, v in proj.tensors.items()}
    h = oracles.matmul(raw, t["w1"]) + t["b1"]
    np.testing.assert_allclose(project_modality(raw, proj).data, oracles.matmul(h, t["w2"]) + t["b2"], atol=1e-12)


def test_mlp_width_mismatch():
    proj = ModalityProjector.init("face", "mlp", 6, 4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        project_modality(np.ones((2, 5)), proj)


@pytest.mark.parametrize("mode", ["mlp", "linear", "pool"])
def test_projector_output_width(mode):
    proj = ModalityProjector.init("speech", mode, 10, 7, np.random.default_rng(0))
    assert project_modality(np.ones((3, 10)), proj).shape == (3, 7)


# -- speech anchoring -------------------------------------------------------


def test_anchor_degenerate_probabilities():
    rng = np.random.default_rng(0)
    assert not speech_anchor_select(50, 0.0, rng).any()
    assert speech_anchor_select(50, 1.0, rng).all()


def test_anchor_fraction_concentrates():
    frac = speech_anchor_select(10_000, 0.5, np.random.default_rng(123)).mean()
    assert 0.48 <= frac <= 0.52


def test_anchor_is_seeded_and_checked():
    a = speech_anchor_select(100, 0.5, np.random.default_rng(4))
    b = speech_anchor_select(100, 0.5, np.random.default_rng(4))
    assert np.array_equal(a, b)
    with pytest.raises(ContractError):
        speech_anchor_select(3, 1.5, np.random.default_rng(0))
