import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from voicespace.bench import (BenchReport, EvalSet, data_scale_sweep, fit_probe, run_benchmark, sst, ssc, ssd,
                              sweep_csv)
from voicespace.cfm import sample_ode
from voicespace.config import RunConfig
from voicespace.errors import ContractError, ValidationError
from voicespace.synthdata import WorldConfig, gen_world, load_embeddings
from voicespace.trainer import checkpoint_bytes, model_from_checkpoint, run_pipeline, train

TINY = RunConfig(num_speakers=12, eval_speakers=4, kv_size=8, field_hidden=(16,), projector_hidden=16,
                 batch_size=8, pretrain_steps=30, distill_steps=10, steps=20, lr=1e-3, warmup_steps=50,
                 eval_descs=3, probe_samples=512)


def random_orthogonal(d, seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    return q * np.sign(np.diag(r))


# -- metric laws ------------------------------------------------------------


def test_metric_examples():
    v = np.array([[1.0, 2.0, 3.0]])
    assert sst(v, v) == 100.0
    assert sst([[1.0, 0.0]], [[0.0, 1.0]]) == 0.0
    assert ssc([np.tile([1.0, 2.0], (3, 1)), np.tile([0.5, -1.0], (2, 1))]) == 100.0
    assert ssc([np.array([[1.0, 0.0], [0.0, 1.0]])]) == 0.0
    assert ssd([np.tile([3.0, 1.0], (2, 1))] * 3) == 100.0
    assert ssd([np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]])]) == 0.0


def test_metric_errors():
    with pytest.raises(ContractError):
        sst(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ContractError):
        ssc([np.ones((1, 2)), np.ones((1, 2))])
    with pytest.raises(ContractError):
        ssd([np.ones((3, 2))])


groups4 = arrays(np.float64, (4, 3, 5), elements=st.floats(-3, 3)).filter(
    lambda a: np.all(np.linalg.norm(a, axis=2) > 1e-3) and np.all(np.linalg.norm(a.mean(axis=1), axis=1) > 1e-3))


@settings(max_examples=60, deadline=None)
@given(groups4, st.integers(0, 1000))
def test_rotation_invariance_and_range(g, seed):
    Q = random_orthogonal(5, seed)
    targets = g[:, 0, :]
    flat = g.reshape(-1, 5)
    tgt = np.repeat(targets, 3, axis=0)
    for metric, args, rot in (
        (sst, (flat, tgt), (flat @ Q, tgt @ Q)),
        (ssc, (list(g),), ([x @ Q for x in g],)),
        (ssd, (list(g),), ([x @ Q for x in g],)),
    ):
        a, b = metric(*args), metric(*rot)
        assert abs(a - b) <= 1e-9
        assert -100.0 - 1e-9 <= a <= 100.0 + 1e-9


@settings(max_examples=60, deadline=None)
@given(groups4)
def test_metrics_match_brute_force(g):
    assert abs(ssd(list(g)) - oracles.ssd(list(g))) <= 1e-9
    assert abs(ssc(list(g)) - oracles.ssc(list(g))) <= 1e-9
    flat, tgt = g.reshape(-1, 5), np.repeat(g[:, 0, :], 3, axis=0)
    assert abs(sst(flat, tgt) - oracles.sst(flat, tgt)) <= 1e-9


# -- harness ----------------------------------------------------------------


@pytest.fixture(scope="module")
def aligned():
    world = gen_world(TINY.world_config(), TINY.resolved_world_seed)
    return run_pipeline(TINY, world)


def test_cardinality_and_csv(aligned):
    rep = run_benchmark(aligned.checkpoint, tasks=["face_tts", "text_vc"], world=aligned.world)
    assert [r.task for r in rep.rows] == ["face_tts", "text_vc"]
    lines = rep.to_csv().splitlines()
    assert lines[0] == "task,n_speakers,n_desc,sst,ssc,ssd,seed,config_hash" and len(lines) == 3


def test_benchmark_deterministic_and_worker_independent(aligned):
    a = run_benchmark(aligned.checkpoint, seed=3, world=aligned.world)
    b = run_benchmark(aligned.checkpoint, seed=3, world=aligned.world, workers=3)
    assert a.to_csv() == b.to_csv()
    c = run_benchmark(aligned.checkpoint, seed=4, world=aligned.world)
    assert c.to_csv() != a.to_csv()


def test_benchmark_never_mutates_checkpoint(aligned):
    before = checkpoint_bytes(aligned.checkpoint)
    run_benchmark(aligned.checkpoint, world=aligned.world)
    assert checkpoint_bytes(aligned.checkpoint) == before


def test_overlap_rejected_before_sampling(aligned):
    leaked = EvalSet.build(aligned.world, 2, speakers=aligned.world.train_ids[:3])
    with pytest.raises(ValidationError, match="overlap"):
        run_benchmark(aligned.checkpoint, leaked, world=aligned.world)


def test_needs_align_stage(aligned):
    pre = train(TINY.with_(stage="pretrain"), aligned.world).checkpoint
    with pytest.raises(ContractError):
        run_benchmark(pre, world=aligned.world)


def test_report_dump_round_trip(aligned, tmp_path):
    rep = run_benchmark(aligned.checkpoint, tasks=["face_tts"], world=aligned.world)
    files = rep.write(tmp_path)
    assert {p.name for p in files} == {"bench.csv", "bench.face_tts.uemb", "bench.face_tts.uemb.labels"}
    t = load_embeddings(tmp_path / "bench.face_tts.uemb")
    g, labels = rep.generated["face_tts"]
    np.testing.assert_allclose(t.rows, g, rtol=1e-6, atol=1e-6)
    assert t.labels.tolist() == labels.tolist()


def test_probe_recovers_speaker_embeddings():
    w = gen_world(WorldConfig(noise_data=0.0), 0)
    probe = fit_probe(w)
    rng = np.random.default_rng(0)
    ids = np.arange(w.num_speakers)
    x = w.data_points(ids, w.sample_content(len(ids), rng))
    assert sst(probe(x), w.speaker_embedding(ids)) > 60


# -- directional examples ---------------------------------------------------


@pytest.fixture(scope="module")
def quiet_field():
    cfg = RunConfig(num_speakers=16, eval_speakers=4, noise_face=0.0, noise_text=0.0, noise_speech=0.0,
                    noise_data=0.0, noise_token=0.0, pretrain_steps=600, stage="pretrain")
    world = gen_world(cfg.world_config(), 0)
    return cfg, world, model_from_checkpoint(train(cfg, world).checkpoint).field


def test_conditioned_beats_unconditioned(quiet_field):
    cfg, world, field = quiet_field
    probe = fit_probe(world)
    ids = np.repeat(world.eval_ids, 8)
    rng = np.random.default_rng(1)
    tokens = world.tokenize(None, world.sample_content(len(ids), rng), leak=0.0)
    x0 = rng.standard_normal((len(ids), cfg.data_dim))
    target = world.speaker_embedding(ids)
    cond = sst(probe(sample_ode(field, x0, 10, cond=target, tokens=tokens)), target)
    blank = sst(probe(sample_ode(field, x0, 10, cond=np.zeros_like(target), tokens=tokens)), target)
    assert cond > blank


def test_perfect_alignment_consistency_bounds_target(quiet_field):
    cfg, world, field = quiet_field
    probe = fit_probe(world)
    speakers = world.eval_ids
    ids = np.repeat(speakers, 6)
    rng = np.random.default_rng(2)
    tokens = world.tokenize(None, world.sample_content(len(ids), rng), leak=0.0)
    target = world.speaker_embedding(ids)
    g = probe(sample_ode(field, rng.standard_normal((len(ids), cfg.data_dim)), 10, cond=target, tokens=tokens))
    assert ssc([g[ids == s] for s in speakers]) >= sst(g, target)


def test_sweep_validation_and_shape(aligned):
    with pytest.raises(ContractError):
        data_scale_sweep(TINY, [], aligned.world)
    with pytest.raises(ContractError):
        data_scale_sweep(TINY, [0.5, 0.25], aligned.world)
    series = data_scale_sweep(TINY, [0.5], aligned.world)
    assert len(series) == 1 and isinstance(series[0][1], BenchReport)
    again = data_scale_sweep(TINY, [0.5], aligned.world)
    assert sweep_csv(series) == sweep_csv(again)
