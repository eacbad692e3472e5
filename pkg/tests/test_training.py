import math
import warnings

import numpy as np
import pytest
import torch

from deformcorr import datagen, nets
from deformcorr import training as T
from deformcorr.losses import LossWeights

TINY = nets.ArchConfig(latent_dim=8, hyper_hidden=16, hidden=16, part_hidden=8)
CFG = T.TrainConfig(steps=6, warmup_steps=2, batch_poses=2, points_per_category=16, template_points=16, lr=1e-4)


@pytest.fixture(scope="module")
def sets():
    spec = datagen.default_spec(n_poses=3)
    return [datagen.sample_pose(spec, k, 300, 100, 100) for k in range(3)]


def fresh(config=CFG, weights=None):
    return T.ModelState.create(TINY, [0, 1, 2], config, weights)


def params(state):
    return {k: v.detach().clone() for k, v in state.model.named_parameters()}


def test_config_validation_and_overrides():
    with pytest.raises(ValueError):
        T.TrainConfig(steps=10, warmup_steps=11)
    with pytest.raises(ValueError):
        T.TrainConfig(batch_poses=0)
    with pytest.raises(ValueError):
        T.TrainConfig(svd3_grad_mode="bogus")
    with pytest.raises(ValueError):
        T.TrainConfig(lr_variant="bogus")
    c = T.TrainConfig().with_overrides(steps="100", warmup_steps="10", detach_sdf_input="true")
    assert c.steps == 100 and c.detach_sdf_input is True
    with pytest.raises(KeyError):
        c.with_overrides(nope=1)
    assert T.TrainConfig.from_dict(c.to_dict()) == c


def test_default_config_values():
    c = T.TrainConfig()
    assert (c.lr, c.lr_min, c.steps, c.batch_poses, c.points_per_category, c.warmup_steps) == (1e-4, 1e-5, 20000, 4, 512, 1000)
    assert c.svd3_grad_mode == "stop_gradient_rotation" and c.grad_clip == 10.0
    assert c.detach_sdf_input is False


def test_ramp_and_schedule():
    assert T.rigid_ramp(0, 1000) == 0.0
    assert T.rigid_ramp(500, 1000) == 0.5
    assert T.rigid_ramp(1000, 1000) == 1.0
    assert T.rigid_ramp(5, 0) == 1.0
    c = T.TrainConfig(steps=100, warmup_steps=0, lr=1e-4, lr_min=1e-5)
    assert T.learning_rate(0, c) == pytest.approx(1e-4)
    assert T.learning_rate(100, c) == pytest.approx(1e-5)
    assert T.learning_rate(50, c) == pytest.approx(5.5e-5)


def test_batch_is_a_function_of_seed_and_step(sets):
    a, b = T.make_batch(sets, CFG, 3), T.make_batch(sets, CFG, 3)
    assert torch.equal(a.points, b.points) and torch.equal(a.nbr_offsets, b.nbr_offsets)
    c = T.make_batch(sets, CFG, 4)
    assert not torch.equal(a.points, c.points)
    assert a.points.shape == (2, 48, 3) and a.nbr_offsets.shape == (2, 16, 8, 3)


def test_breakdown_has_every_term_and_bookkeeping(sets):
    st = fresh()
    batch = T.make_batch(sets, CFG, 0)
    raw, _ = T.compute_losses(st.model, batch, CFG)
    assert set(raw) == set(T.TERMS)
    r = T.train_step(st, batch)
    assert set(r.raw) == set(T.TERMS)
    assert abs(r.total - sum(r.weighted.values())) < 1e-9
    w = st.weights.to_dict()
    for term, (wname, ramped) in T.WEIGHTED_TERMS.items():
        expect = r.raw[term] * w[wname] * (r.ramp if ramped else 1.0)
        assert r.weighted[term] == pytest.approx(expect, rel=1e-12, abs=1e-300)


def test_rigid_terms_zero_at_step_zero_full_at_warmup_end(sets):
    st = fresh()
    r0 = T.train_step(st, T.make_batch(sets, CFG, 0))
    assert r0.ramp == 0.0
    assert r0.weighted["lr"] == 0.0 and r0.weighted["nbr"] == 0.0 and r0.weighted["pr"] == 0.0
    st.step = CFG.warmup_steps
    r = T.train_step(st, T.make_batch(sets, CFG, st.step))
    assert r.ramp == 1.0
    assert r.weighted["pr"] == pytest.approx(r.raw["pr"] * st.weights.w_pr)


def test_zero_learning_rate_leaves_parameters(sets):
    st = fresh(CFG.with_overrides(lr=0.0, lr_min=0.0))
    before = params(st)
    T.train(st, sets, steps=2)
    for k, v in params(st).items():
        assert torch.equal(v, before[k]), k


def test_all_parameters_receive_gradients(sets):
    st = fresh()
    st.step = CFG.warmup_steps
    raw, _ = T.compute_losses(st.model, T.make_batch(sets, CFG, 0), CFG)
    T.total_loss(raw, st.weights, 1.0).backward()
    for k, p in st.model.named_parameters():
        if k == "template_sdf":
            continue
        assert p.grad is not None and float(p.grad.abs().max()) > 0, k


def test_identical_seeds_identical_traces(sets):
    runs = []
    for _ in range(2):
        st = fresh()
        runs.append([(r.total, tuple(r.raw.values())) for r in T.train(st, sets, steps=3)])
    assert runs[0] == runs[1]


def test_non_finite_loss_aborts_without_changing_state(sets):
    s0 = datagen.ShapeSampleSet(**{**sets[0].__dict__})
    s0.free_sdf = np.full_like(s0.free_sdf, np.nan)
    bad = [s0, s0, s0]
    st = fresh()
    before = st.checksum()
    with pytest.raises(T.NonFiniteLossError) as err:
        T.train_step(st, T.make_batch(bad, CFG, 0))
    assert err.value.term in T.TERMS and err.value.step == 0
    assert st.checksum() == before and st.step == 0


def test_checkpoint_roundtrip_and_bit_exact_resume(sets, tmp_path):
    st = fresh()
    T.train(st, sets, steps=2)
    path = T.save_checkpoint(st, tmp_path / "ck.bin")
    loaded = T.load_checkpoint(path)
    assert loaded.step == 2 and loaded.checksum() == st.checksum()
    assert loaded.config == st.config and loaded.weights == st.weights and loaded.pose_ids == st.pose_ids
    a = T.train(st, sets, steps=4)
    b = T.train(loaded, sets, steps=4)
    assert [r.total for r in a] == [r.total for r in b]
    assert loaded.checksum() == st.checksum()


def test_resume_matches_uninterrupted_run(sets, tmp_path):
    full = fresh()
    T.train(full, sets, steps=4)
    part = fresh()
    T.train(part, sets, steps=2, checkpoint_path=tmp_path / "c.bin")
    resumed = T.load_checkpoint(tmp_path / "c.bin")
    T.train(resumed, sets, steps=4)
    assert resumed.checksum() == full.checksum()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        T.load_checkpoint(tmp_path / "missing.bin")
    (tmp_path / "bad.bin").write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(T.CheckpointFormatError):
        T.load_checkpoint(tmp_path / "bad.bin")
    st = fresh()
    data = T.save_checkpoint(st, tmp_path / "ok.bin").read_bytes()
    (tmp_path / "trunc.bin").write_bytes(data[:-100])
    with pytest.raises(T.CheckpointFormatError):
        T.load_checkpoint(tmp_path / "trunc.bin")


def test_loss_log_csv(sets, tmp_path):
    log = T.LossLog(tmp_path / "log.csv")
    T.train(fresh(), sets, steps=2, log=log)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].split(",") == T.LossLog.header and len(lines) == 3
    assert all(math.isfinite(float(x)) for x in lines[1].split(","))


def test_sample_set_count_must_match_latents(sets):
    with pytest.raises(ValueError):
        T.train(fresh(), sets[:2], steps=1)


def test_untrained_template_extraction_is_tiny_or_empty():
    st = fresh()
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        mesh = T.extract_template(st, resolution=16)
    if mesh.n_vertices:
        assert np.abs(mesh.vertices).max() < 0.5


def test_empty_template_warns():
    st = fresh()
    with torch.no_grad():
        st.model.sdf_hyper.net[-1].weight.zero_()
        st.model.sdf_hyper.net[-1].bias.zero_()
        st.model.sdf_hyper.net[-1].bias[-1] = 5.0  # final bias of the SDF net: field = |p| + 5
    with pytest.warns(UserWarning, match="empty"):
        mesh = T.extract_template(st, resolution=16)
    assert mesh.n_vertices == 0


def test_weights_roundtrip_into_state():
    w = LossWeights().with_overrides(w_pr=0.0)
    st = fresh(weights=w)
    assert st.weights.w_pr == 0.0
