from dataclasses import replace

import numpy as np
import pytest

from rotssl import config, engine, fisher, net, so3, synth
from rotssl.augment import AugConfig
from rotssl.config import ExperimentConfig, FilterPolicy, TrainConfig

PLAIN_AUG = AugConfig(flip_prob=0.0, blur_prob=0.0, weak_scale=(1.0, 1.0), strong_scale=(1.0, 1.0),
                      cutout_holes=0, cutmix_holes=0, rot_range_deg=(0.0, 0.0))


@pytest.fixture(scope="module")
def tiny():
    return synth.gen_dataset(64, 200, 0.25, seed=9, n_val=50, n_test=50)


def tiny_cfg(**train):
    base = dict(seed=1, phase1_iters=20, phase2_iters=20, eval_every=10)
    base.update(train)
    return ExperimentConfig(train=TrainConfig(**base))


def state_for(params, teacher=None, decay=0.999):
    return engine.TrainState(student=params, teacher=(teacher or params).copy(), ema_decay=decay)


class TestEma:
    def test_decay_one(self, rng_params):
        s, t = rng_params
        out = engine.ema_update(engine.TrainState(s, t.copy(), ema_decay=1.0))
        np.testing.assert_array_equal(out.teacher.flat(), t.flat())

    def test_decay_zero(self, rng_params):
        s, t = rng_params
        out = engine.ema_update(engine.TrainState(s, t.copy(), ema_decay=0.0))
        np.testing.assert_array_equal(out.teacher.flat(), s.flat())

    def test_geometric(self, rng_params):
        s, t = rng_params
        st = engine.TrainState(s, t.copy(), ema_decay=0.9)
        gap0 = t.flat() - s.flat()
        for _ in range(25):
            st = engine.ema_update(st)
        np.testing.assert_allclose(st.teacher.flat() - s.flat(), 0.9 ** 25 * gap0, atol=1e-12)


@pytest.fixture
def rng_params():
    rng = np.random.default_rng(0)
    return net.init_params(rng), net.init_params(rng)


class TestSweepAndThreshold:
    def test_zero_teacher(self, tiny):
        ent = engine.entropy_sweep(net.zero_params(), tiny["unlabeled"].images)
        assert ent.shape == (200,) and np.all(ent == 0)

    def test_finite_and_order_stable(self, tiny):
        p = net.init_params(np.random.default_rng(1))
        imgs = tiny["unlabeled"].images
        ent = engine.entropy_sweep(p, imgs)
        assert np.all(np.isfinite(ent))
        np.testing.assert_array_equal(engine.entropy_sweep(p, imgs), ent)
        np.testing.assert_allclose(engine.entropy_sweep(p, imgs[::-1]), ent[::-1], rtol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            engine.entropy_sweep(net.zero_params(), np.zeros((0, 32, 32)))
        with pytest.raises(ValueError):
            engine.update_threshold([], 0.75)

    def test_percentile_values(self):
        assert engine.update_threshold(np.arange(1, 101), 0.75) == pytest.approx(75.25)
        x = np.random.default_rng(0).standard_normal(50)
        assert engine.update_threshold(x, 1.0) == x.max()

    def test_bad_delta(self):
        with pytest.raises(ValueError):
            engine.update_threshold([1.0, 2.0], 0.0)

    def test_keep_fraction(self):
        ent = np.random.default_rng(2).normal(-4, 1, 4000)
        for delta in (0.5, 0.75, 0.95):
            tau = engine.update_threshold(ent, delta)
            assert abs(np.mean(ent <= tau) - delta) <= 1 / 4000


class TestGeodesicFilter:
    def test_examples(self):
        r = so3.sample_uniform_rotation(np.random.default_rng(0))
        assert engine.geodesic_filter(r, r, 1e-3)
        assert not engine.geodesic_filter(np.eye(3), so3.axis_angle_to_matrix([0, 0, 1], 90), 30)

    def test_monotone(self):
        rng = np.random.default_rng(1)
        a, b = so3.sample_uniform_rotation(rng, 500), so3.sample_uniform_rotation(rng, 500)
        rates = [engine.geodesic_filter(a, b, t).mean() for t in (180, 120, 90, 60, 30, 10)]
        assert np.all(np.diff(rates) <= 0)


class TestLosses:
    def test_total_linear(self):
        for lam in (0.0, 0.5, 1.0, 2.0):
            assert engine.total_loss(1.5, -2.0, lam) == 1.5 - 2.0 * lam

    def test_sup_zero_net(self, tiny):
        lab = tiny["labeled"]
        loss, g = engine.sup_loss_batch(net.zero_params(), lab.images[:8], lab.labels[:8], AugConfig(),
                                        np.random.default_rng(0))
        assert loss == 0.0

    def test_sup_batch_mean(self, tiny):
        p = net.init_params(np.random.default_rng(3))
        lab = tiny["labeled"]
        rng = np.random.default_rng(0)
        batch, _ = engine.sup_loss_batch(p, lab.images[:6], lab.labels[:6], AugConfig(), rng, "none")
        singles = [engine.sup_loss_batch(p, lab.images[i:i + 1], lab.labels[i:i + 1], AugConfig(), rng,
                                         "none")[0] for i in range(6)]
        assert batch == pytest.approx(np.mean(singles), rel=1e-12)

    def test_unsup_all_filtered(self, tiny):
        p = net.init_params(np.random.default_rng(4))
        imgs = tiny["unlabeled"].images[:16]
        res = engine.unsup_loss_batch(state_for(p), imgs, FilterPolicy(), -1e9, AugConfig(),
                                      np.random.default_rng(0))
        assert res.loss == 0.0 and res.keep_rate == 0.0
        assert np.all(res.grads.flat() == 0)

    def test_unsup_self_identity(self, tiny):
        p = net.init_params(np.random.default_rng(5))
        imgs = tiny["unlabeled"].images[:16]
        res = engine.unsup_loss_batch(state_for(p), imgs, FilterPolicy(kind="none"), 0.0, PLAIN_AUG,
                                      np.random.default_rng(0))
        expected = np.mean(fisher.entropy(net.forward(p, imgs)))
        assert res.loss == pytest.approx(expected, abs=1e-8)
        assert res.keep_rate == 1.0
        np.testing.assert_allclose(res.grads.flat(), 0.0, atol=1e-12)

    def test_unsup_gate_matches_tau(self, tiny):
        p = net.init_params(np.random.default_rng(6))
        imgs = tiny["unlabeled"].images[:32]
        ent = fisher.entropy(net.forward(p, imgs))
        tau = float(np.median(ent))
        res = engine.unsup_loss_batch(state_for(p), imgs, FilterPolicy(), tau, PLAIN_AUG,
                                      np.random.default_rng(0))
        np.testing.assert_array_equal(res.kept, ent <= tau)

    def test_teacher_untouched(self, tiny):
        s, t = net.init_params(np.random.default_rng(7)), net.init_params(np.random.default_rng(8))
        before = t.flat().copy()
        engine.unsup_loss_batch(state_for(s, t), tiny["unlabeled"].images[:8], FilterPolicy(kind="none"),
                                0.0, AugConfig(), np.random.default_rng(0))
        np.testing.assert_array_equal(t.flat(), before)

    def test_geodesic_policy(self, tiny):
        p = net.init_params(np.random.default_rng(9))
        imgs = tiny["unlabeled"].images[:16]
        # Teacher == student and identical weak views: every mode agrees.
        res = engine.unsup_loss_batch(state_for(p), imgs, FilterPolicy(kind="geodesic", geo_thresh=1.0),
                                      0.0, PLAIN_AUG, np.random.default_rng(0))
        assert res.keep_rate == 1.0


class TestAlignment:
    @pytest.mark.parametrize("theta", [-30.0, -15.0, 15.0, 30.0])
    def test_oracle_predictor(self, theta):
        rng = np.random.default_rng(10)
        for r in so3.sample_uniform_rotation(rng, 10):
            a_t = 4.0 * r
            # Oracle student sees the rotated view, so it predicts s * M_theta R.
            a_s = 4.0 * so3.inplane_rotation(theta) @ r
            target = engine.aligned_teacher_expectation(a_t, theta)
            ce, _ = fisher.cross_entropy(None, a_s, teacher_expected=target)
            self_ce, _ = fisher.cross_entropy(a_t, a_t)
            assert abs(ce - self_ce) < 1e-6

    def test_general_parameter(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((3, 3)) * 3
        m = so3.inplane_rotation(20.0)
        np.testing.assert_allclose(engine.aligned_teacher_expectation(a, 20.0),
                                   fisher.expected_rotation(m @ a), atol=1e-12)


class TestPhase1:
    def test_zero_iterations(self, tiny):
        st = engine.run_phase1(tiny_cfg(phase1_iters=0), tiny)
        init = net.init_params(engine._phase_rngs(1, 0))
        np.testing.assert_array_equal(st.student.flat(), init.flat())
        np.testing.assert_array_equal(st.teacher.flat(), init.flat())

    def test_loss_decreases(self, tiny):
        log = engine.CsvLog()
        engine.run_phase1(tiny_cfg(phase1_iters=200, eval_every=50), tiny, log_to=log)
        losses = [r["sup_loss"] for r in log.rows]
        assert float(losses[-1]) < float(losses[0])

    def test_teacher_is_clone(self, tiny):
        st = engine.run_phase1(tiny_cfg(), tiny)
        np.testing.assert_array_equal(st.student.flat(), st.teacher.flat())

    def test_checkpoint_reproduces_val(self, tiny, tmp_path):
        st = engine.run_phase1(tiny_cfg(), tiny)
        net.save_checkpoint(tmp_path / "p.bin", st.student)
        back = net.load_checkpoint(tmp_path / "p.bin")
        assert engine.evaluate_params(back, tiny["val"]) == engine.evaluate_params(st.student, tiny["val"])

    def test_needs_labels(self, tiny):
        data = dict(tiny)
        data["labeled"] = tiny["labeled"].subset([])
        with pytest.raises(ValueError):
            engine.run_phase1(tiny_cfg(), data)

    def test_divergence(self, tiny):
        p = net.init_params(np.random.default_rng(0))
        p.weights[-1][:] = np.nan
        with pytest.raises(FloatingPointError):
            engine.run_phase1(tiny_cfg(), tiny, init=p)


class TestPhase2:
    def test_stage_boundaries(self):
        assert engine.stage_boundaries(40_000, 4) == [0, 10_000, 20_000, 30_000]
        assert engine.stage_boundaries(10, 3) == [0, 3, 6]

    def test_stages_and_tau_logged(self, tiny):
        cfg = tiny_cfg(phase2_iters=20, eval_every=5)
        st = engine.run_phase1(tiny_cfg(), tiny)
        log = engine.CsvLog()
        out = engine.run_phase2(cfg, tiny, st, log_to=log)
        assert out.stage_k == 4 and len(out.tau_history) == 4
        assert [int(r["stage"]) for r in log.rows] == [1, 2, 3, 4]
        assert out.iter == 20

    def test_delta_one_keeps_all(self, tiny):
        cfg = replace(tiny_cfg(phase2_iters=8, eval_every=8), aug=PLAIN_AUG,
                      filter=FilterPolicy(delta=1.0, K=1))
        st = engine.run_phase1(tiny_cfg(), tiny)
        log = engine.CsvLog()
        engine.run_phase2(cfg, tiny, st, log_to=log)
        # The threshold is the sweep maximum and views are un-augmented crops.
        assert float(log.rows[-1]["keep_rate"]) == 1.0

    def test_fixed_threshold_frozen(self, tiny):
        cfg = replace(tiny_cfg(phase2_iters=8), filter=FilterPolicy(kind="fixed_entropy"))
        out = engine.run_phase2(cfg, tiny, engine.run_phase1(tiny_cfg(), tiny))
        assert len(set(out.tau_history)) == 1
        cfg = replace(cfg, filter=FilterPolicy(kind="fixed_entropy", fixed_tau=-2.5))
        out = engine.run_phase2(cfg, tiny, engine.run_phase1(tiny_cfg(), tiny))
        assert out.tau_history == [-2.5] * 4

    def test_lambda_zero_degenerates(self, tiny):
        st = engine.run_phase1(tiny_cfg(), tiny)
        cfg = replace(tiny_cfg(phase2_iters=12, eval_every=1), filter=FilterPolicy(lam=0.0))
        log2 = engine.CsvLog()
        out = engine.run_phase2(cfg, tiny, st, log_to=log2)
        # Phase1-style run from the same start, same lr and the Phase2 stream.
        cfg1 = replace(cfg, train=replace(cfg.train, lr_phase1=cfg.train.lr_phase2))
        log1 = engine.CsvLog()
        engine.run_phase1(cfg1, tiny, init=st.student, iters=12, log_to=log1, stream=2)
        assert [r["sup_loss"] for r in log2.rows] == [r["sup_loss"] for r in log1.rows]
        assert out.iter == 12

    def test_teacher_follows_ema(self, tiny):
        st = engine.run_phase1(tiny_cfg(), tiny)
        st = replace(st, teacher=net.init_params(np.random.default_rng(0)))
        cfg = tiny_cfg(phase2_iters=1, ema_decay=0.9)
        out = engine.run_phase2(cfg, tiny, st)
        np.testing.assert_allclose(out.teacher.flat(),
                                   0.9 * st.teacher.flat() + 0.1 * out.student.flat(), atol=1e-15)

    def test_deterministic(self, tiny):
        st = engine.run_phase1(tiny_cfg(), tiny)
        a = engine.run_phase2(tiny_cfg(phase2_iters=6), tiny, st)
        b = engine.run_phase2(tiny_cfg(phase2_iters=6), tiny, st)
        np.testing.assert_array_equal(a.student.flat(), b.student.flat())
        np.testing.assert_array_equal(a.teacher.flat(), b.teacher.flat())

    def test_input_state_untouched(self, tiny):
        st = engine.run_phase1(tiny_cfg(), tiny)
        before = st.student.flat().copy()
        engine.run_phase2(tiny_cfg(phase2_iters=3), tiny, st)
        np.testing.assert_array_equal(st.student.flat(), before)


class TestMetricsAndStats:
    def test_pose_metrics_perfect(self, tiny):
        m = engine.pose_metrics(tiny["test"].labels, tiny["test"].labels)
        assert m["count"] == 50
        for k in ("mean_geodesic_deg", "median_geodesic_deg", "mae_mean_deg", "mean_frobenius"):
            assert m[k] < 1e-4

    def test_pose_metrics_haar_identity(self):
        rng = np.random.default_rng(0)
        labels = so3.sample_uniform_rotation(rng, 20_000)
        m = engine.pose_metrics(np.broadcast_to(np.eye(3), labels.shape), labels)
        # Haar mean angle: int t (1 - cos t)/pi dt over [0, pi] = pi/2 + 2/pi rad.
        assert m["mean_geodesic_deg"] == pytest.approx(np.rad2deg(np.pi / 2 + 2 / np.pi), abs=2.0)

    def test_shuffle_invariant(self, tiny):
        p = net.init_params(np.random.default_rng(0))
        test = tiny["test"]
        perm = np.random.default_rng(1).permutation(len(test))
        a = engine.evaluate_params(p, test)
        b = engine.evaluate_params(p, test.subset(perm))
        for k in a:
            assert a[k] == pytest.approx(b[k], rel=1e-12)

    def test_filter_stats(self, tiny):
        p = net.init_params(np.random.default_rng(0))
        fs = engine.filter_stats(p, tiny["unlabeled"], 1.0)
        assert fs["histogram_counts"].sum() == 200
        assert fs["rejected_ood"] + fs["rejected_id"] == 0
        assert fs["kept_ood"] == tiny["unlabeled"].is_ood.sum()

    def test_csv_log(self, tmp_path):
        path = tmp_path / "log.csv"
        log = engine.CsvLog(path)
        log.write(iter=1, stage=0, sup_loss=0.5)
        log.write(iter=2, stage=1, tau=-3.0)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(engine.LOG_COLUMNS)
        assert len(lines) == 3


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.filter.lam == 1.0 and cfg.filter.delta == 0.75 and cfg.filter.K == 4
        assert cfg.train.batch_labeled == 8 and cfg.train.batch_unlabeled == 32
        assert cfg.aug.cutout_holes == 3 and cfg.aug.rot_range_deg == (-30.0, 30.0)

    def test_roundtrip(self, tmp_path):
        cfg = ExperimentConfig()
        config.dump_config(cfg, tmp_path / "c.json")
        assert config.load_config(tmp_path / "c.json") == cfg

    @pytest.mark.parametrize("raw, msg", [
        ({"filter": {"delta": 1.5}}, "delta"),
        ({"filter": {"delta": 0.0}}, "delta"),
        ({"filter": {"K": 0}}, "K"),
        ({"train": {"phase1_iters": -1}}, "iteration"),
        ({"train": {"bogus": 1}}, "unknown"),
        ({"nope": {}}, "unknown"),
        ({"aug": {"flip_prob": 2}}, "flip_prob"),
    ])
    def test_validation(self, raw, msg):
        with pytest.raises(config.ConfigError, match=msg):
            config.from_dict(raw)

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(config.ConfigError):
            config.load_config(p)
