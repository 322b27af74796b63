import dataclasses
from dataclasses import replace

import numpy as np
import pytest

from bcmda import losses, protohead, trainer
from bcmda.rng import Rng
from bcmda.synthdata import default_domains, gen_dataset, load_dataset
from bcmda.tensor import Tensor
from bcmda.tensorio import load_archive
from bcmda.trainer import ConfigError, TrainConfig

SMALL = dict(levels=2, base_channels=4, feat_channels=8, t_max=40)


@pytest.fixture(scope="module")
def data32(tmp_path_factory):
    root = tmp_path_factory.mktemp("d32")
    return gen_dataset(default_domains(), (6, 2), root, seed=5, n_labeled=4, h=32, w=32)


def _splits(manifest):
    return trainer.training_splits(load_dataset(manifest))


def _run(manifest, cfg, steps):
    lab, unl = _splits(manifest)
    state = trainer.init_state(cfg)
    for t in range(steps):
        a, b = trainer.fetch_batch(lab, unl, cfg, t)
        trainer.train_step(state, a, b, cfg)
    return state


# -- schedule and config -----------------------------------------------------


def test_lr_schedule_values():
    assert trainer.lr_at(0, 2000, 0.03) == 0.03
    assert trainer.lr_at(1000, 2000, 0.03) == pytest.approx(0.01608, abs=1e-5)
    assert trainer.lr_at(1000, 2000, 0.03) == pytest.approx(0.03 * 0.5**0.9, rel=1e-12)
    assert trainer.lr_at(2000, 2000, 0.03) == 0.0
    assert trainer.lr_at(1000, 2000, 0.03, "constant") == 0.03


def test_lr_warmup_ramp():
    assert trainer.lr_at(0, 100, 1.0, "constant", warmup=10) == pytest.approx(0.1)
    assert trainer.lr_at(9, 100, 1.0, "constant", warmup=10) == 1.0
    assert trainer.lr_at(50, 100, 1.0, "constant", warmup=10) == 1.0


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lambda_fix, cfg.alpha, cfg.tau_temp, cfg.tau) == (0.75, 0.7, 0.05, 0.95)
    assert (cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.w_prime_ratio) == (0.03, 0.9, 1e-4, 0.25)
    assert all((cfg.fixmix, cfg.pdmix, cfg.avg, cfg.pa, cfg.bpa, cfg.pplc))


@pytest.mark.parametrize(
    "kw",
    [dict(batch_size=3), dict(tau=1.5), dict(t_max=0), dict(pa=False, bpa=False), dict(mode="other"), dict(alpha=0)],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(lambda_fix=0.65, alpha=1.0, pplc=False, dice_mode="per_class", seed=9)
    path = tmp_path / "a.cfg"
    path.write_text("# comment\n" + trainer.dump_config(cfg))
    assert trainer.load_config(path) == cfg


def test_config_errors(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("lr0 = 0.1\nlearning_rate = 0.2\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        trainer.load_config(path)
    path.write_text("pplc = maybe\n")
    with pytest.raises(ConfigError):
        trainer.load_config(path)
    with pytest.raises(FileNotFoundError):
        trainer.load_config(tmp_path / "missing.cfg")


# -- heads -------------------------------------------------------------------


def test_single_prototype_set_gives_equal_blends():
    cfg = TrainConfig(bpa=False, **SMALL)
    state = trainer.init_state(cfg)
    for t in (0, 10, 40):
        w_v, w_r, w_avg = trainer.prototype_sets(state.student, cfg, t)
        np.testing.assert_array_equal(w_v.data, w_r.data)
        np.testing.assert_array_equal(w_avg.data, w_v.data)


def test_bpa_blends_differ_before_horizon():
    cfg = TrainConfig(**SMALL)
    state = trainer.init_state(cfg)
    w_v, w_r, _ = trainer.prototype_sets(state.student, cfg, 0)
    assert not np.allclose(w_v.data, w_r.data)
    assert trainer.prototype_sets(state.student, TrainConfig.baseline(**SMALL), 0) is None


def test_pplc_off_is_linear_head(rng):
    cfg = TrainConfig(pplc=False, **SMALL)
    state = trainer.init_state(cfg)
    ft = Tensor(rng.normal(size=(2, 8, 8, 8)).astype(np.float32))
    p = trainer.teacher_probs(state.teacher, ft, cfg, 5)
    ref = protohead.linear_forward(ft, state.teacher["linear_w"], state.teacher["linear_b"]).data
    np.testing.assert_array_equal(p, ref)


# -- a step --------------------------------------------------------------------


def _views(manifest, cfg, t=0):
    lab, unl = _splits(manifest)
    state = trainer.init_state(cfg)
    (x, y), (u, ud) = trainer.fetch_batch(lab, unl, cfg, t)
    views = trainer.build_views(state.teacher, x, y, u, ud, cfg, t, Rng(cfg.seed).split(1, t))
    return state, views


def test_views_shapes_and_packs(data32):
    cfg = TrainConfig(**SMALL)
    _, views = _views(data32, cfg)
    assert len(views.mixed) == 4 and len(views.packs) == 4
    for img, pack in zip(views.mixed, views.packs):
        assert img.shape == (2, 1, 32, 32)
        assert pack.target.shape == (2, 2, 32, 32)
        np.testing.assert_array_equal(pack.target.sum(axis=1), 1.0)
        assert set(np.unique(pack.filter)) <= {0.0, 1.0}
    assert views.corr.c_xu.shape == (2, 64, 64)


def test_every_parameter_receives_gradient(data32):
    cfg = TrainConfig(**SMALL)
    state, views = _views(data32, cfg, t=3)
    total, _ = trainer.student_loss(state.student, views, cfg, 3)
    total.backward()
    assert trainer.parameter_audit(state.student) == []
    assert all(p.grad is None for p in state.teacher.values())


def test_zero_filters_leave_only_weight_decay(data32):
    cfg = TrainConfig(**SMALL)
    state, views = _views(data32, cfg)
    for pack in views.packs:
        pack.filter[...] = 0.0
    total, parts = trainer.student_loss(state.student, views, cfg, 0)
    assert total.item() == 0.0 and all(v == 0.0 for v in parts.values())
    total.backward()
    before = {k: v.data.copy() for k, v in state.student.items()}
    lr = 0.03
    trainer.sgd_step(state.student, state.velocity, lr, cfg.momentum, cfg.weight_decay)
    for k, p in state.student.items():
        expected = before[k] - lr * (cfg.weight_decay * before[k])
        np.testing.assert_allclose(p.data, expected, rtol=1e-6, atol=1e-12)


def test_teacher_follows_ema_and_history_row(data32):
    cfg = TrainConfig(**SMALL)
    state = _run(data32, cfg, 1)
    assert state.t == 1 and len(state.history) == 1
    assert set(state.history[0]) == set(trainer.HISTORY_FIELDS)
    assert all(p.grad is None for p in state.teacher.values())
    fresh = trainer.init_state(cfg)
    k = "enc0.w"
    expected = fresh.teacher[k].data + (1 - cfg.ema_decay) * (state.student[k].data - fresh.teacher[k].data)
    np.testing.assert_allclose(state.teacher[k].data, expected, rtol=1e-6)


def test_bit_identical_histories(data32):
    cfg = TrainConfig(**SMALL)
    a = _run(data32, cfg, 4).history
    b = _run(data32, cfg, 4).history
    assert a == b


def test_baseline_and_supervised_modes_run(data32):
    for cfg in (TrainConfig.baseline(**SMALL), TrainConfig(mode="supervised", **SMALL)):
        state = _run(data32, cfg, 2)
        assert np.isfinite(state.history[-1]["total"])


def test_divergence_names_branch(data32):
    cfg = TrainConfig(**SMALL)
    lab, unl = _splits(data32)
    state = trainer.init_state(cfg)
    state.student["head.b"].data[:] = np.nan
    with pytest.raises(trainer.TrainingDivergedError, match="in1"):
        trainer.train_step(state, *trainer.fetch_batch(lab, unl, cfg, 0), cfg)


def test_loss_decreases_on_same_domain_data(tmp_path):
    d0 = default_domains()[0]
    manifest = gen_dataset([d0, replace(d0, id=1)], (8, 1), tmp_path, seed=2, n_labeled=8, h=32, w=32)
    cfg = TrainConfig(t_max=50, warmup_steps=10, **{k: v for k, v in SMALL.items() if k != "t_max"})
    hist = [r["total"] for r in _run(manifest, cfg, 50).history]
    assert all(np.isfinite(hist))
    assert np.mean(hist[-10:]) < np.mean(hist[:10])


# -- run loop, checkpoints, inference ---------------------------------------


def test_single_step_run(data32, tmp_path):
    cfg = TrainConfig(**{**SMALL, "t_max": 1})
    trainer.run_training(cfg, data32, tmp_path)
    assert len(trainer.read_history(tmp_path / "history.csv")) == 1
    assert (tmp_path / "final.bin").exists() and (tmp_path / "final.idx").exists()


def test_history_rows_match_t_max(data32, tmp_path):
    cfg = TrainConfig(**{**SMALL, "t_max": 5})
    trainer.run_training(cfg, data32, tmp_path)
    rows = trainer.read_history(tmp_path / "history.csv")
    assert [r["t"] for r in rows] == list(range(5))
    header = (tmp_path / "history.csv").read_text().splitlines()[0]
    assert header == "t,L_in1,L_out1,L_in2,L_out2,total,lr,lambda_sim,gamma"


def test_resume_reproduces_trajectory(data32, tmp_path):
    cfg = TrainConfig(**{**SMALL, "t_max": 6})
    straight = trainer.run_training(cfg, data32, tmp_path / "a")
    trainer.run_training(cfg, data32, tmp_path / "b", stop_at=3)
    resumed = trainer.run_training(cfg, data32, tmp_path / "b", resume=tmp_path / "b" / "final")
    assert resumed.history == straight.history
    for k in straight.student:
        np.testing.assert_array_equal(resumed.student[k].data, straight.student[k].data)
        np.testing.assert_array_equal(resumed.teacher[k].data, straight.teacher[k].data)


def test_resume_rejects_other_config(data32, tmp_path):
    cfg = TrainConfig(**{**SMALL, "t_max": 2})
    trainer.run_training(cfg, data32, tmp_path, stop_at=1)
    with pytest.raises(ConfigError):
        trainer.run_training(replace(cfg, seed=1), data32, tmp_path, resume=tmp_path / "final")


def test_checkpoint_contents(data32, tmp_path):
    cfg = TrainConfig(**{**SMALL, "t_max": 1})
    state = trainer.run_training(cfg, data32, tmp_path)
    tensors, meta = load_archive(tmp_path / "final")
    assert {"proto_w1", "proto_w2", "linear_w", "teacher/proto_w1", "momentum/enc0.w"} <= set(tensors)
    assert meta["t"] == 1 and meta["config"] == dataclasses.asdict(cfg)
    loaded, loaded_cfg = trainer.load_checkpoint(tmp_path / "final")
    assert loaded_cfg == cfg
    for k in state.student:
        np.testing.assert_array_equal(loaded.student[k].data, state.student[k].data)


def test_missing_dataset_fails_before_training(tmp_path):
    with pytest.raises(FileNotFoundError):
        trainer.run_training(TrainConfig(**SMALL), tmp_path / "none.tsv", tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_infer_zero_head_and_range(rng):
    cfg = TrainConfig(**SMALL)
    state = trainer.init_state(cfg)
    img = rng.uniform(-1, 1, (3, 1, 32, 32)).astype(np.float32)
    labels = trainer.infer(state.student, img, cfg)
    assert labels.shape == (3, 32, 32) and set(np.unique(labels)) <= {0, 1}
    state.student["linear_w"].data[:] = 0
    np.testing.assert_array_equal(trainer.infer(state.student, img, cfg), 0)


def test_supervision_pack_from_ground_truth_has_full_confidence(data32):
    cfg = TrainConfig(**SMALL)
    _, views = _views(data32, cfg)
    y = losses.one_hot(np.zeros((2, 32, 32), int), 2)
    pack_in, _ = trainer._mix_pack(y, y, y, np.ones((32, 32)), cfg.tau)
    np.testing.assert_array_equal(pack_in.confidence, 1.0)
    np.testing.assert_array_equal(pack_in.filter, 1.0)
