import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpm_covlab.gmm import GmmSpec, eps_moments, sample_xt, unit_gaussian
from dpm_covlab.nets import (CheckpointError, PredictorBundle, TrainConfig, TrainingDiverged, grad_check,
                             load_checkpoint, save_checkpoint, time_embedding, train_eps, train_npr,
                             train_sn)
from dpm_covlab.schedule import build_discrete

SCH = build_discrete(linear=50)


def small_bundle(seed=0, d=2, zero_heads=False, activation="silu", head_hidden=6, feature="index"):
    meta = {"N": 50, "time_feature": feature}
    if feature == "logsnr":
        ls = np.log(SCH.alpha_bars / (1 - SCH.alpha_bars))
        meta.update(logsnr=ls.tolist(), logsnr_range=[float(ls.min()), float(ls.max())])
    return PredictorBundle.init(d, np.random.default_rng(seed), e=8, h=12, head_hidden=head_hidden,
                                activation=activation, zero_heads=zero_heads, meta=meta)


def batch(b, rng, B=16):
    return (rng.normal(size=(B, b.d)), b.time_input(rng.integers(1, 51, size=B)),
            rng.normal(size=(B, b.d)))


class TestForward:
    def test_zero_heads_constant_in_x(self):
        b = small_bundle(zero_heads=True)
        b.params["Heb"] = np.array([0.3, -0.1])
        e, _ = b.forward(np.random.default_rng(0).normal(size=(5, 2)), 7)
        np.testing.assert_array_equal(e, np.tile([0.3, -0.1], (5, 1)))

    def test_softplus_at_zero(self):
        b = small_bundle(zero_heads=True)
        _, aux = b.forward(np.zeros((3, 2)), 10)
        np.testing.assert_allclose(aux, math.log(2.0), rtol=1e-15)

    def test_aux_nonnegative(self):
        b = small_bundle(seed=3)
        for k in b.group("aux"):
            b.params[k] *= 40.0
        _, aux = b.forward(np.random.default_rng(1).normal(size=(200, 2)) * 5, 20)
        assert np.all(aux >= 0)

    def test_embedding_distinct(self):
        for feature in ("index", "logsnr"):
            b = small_bundle(feature=feature)
            emb = time_embedding(b.time_input(np.array([1, 50])), 16)
            assert np.max(np.abs(emb[0] - emb[1])) > 0.1

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            small_bundle().forward(np.zeros((2, 3)), 5)

    def test_timestep_out_of_range(self):
        with pytest.raises(ValueError):
            small_bundle().forward(np.zeros((2, 2)), 51)

    def test_continuous_logsnr_matches_table(self):
        b = small_bundle(feature="logsnr")
        x = np.ones((2, 2))
        np.testing.assert_allclose(b.forward(x, 9)[0],
                                   b.forward(x, 9.0, SCH.alpha_bar(9), SCH.beta_bar(9))[0], atol=1e-12)


class TestGradCheck:
    def test_linear_network_exact(self):
        b = small_bundle(activation="identity", head_hidden=0)
        g = grad_check(b, "eps", batch(b, np.random.default_rng(0)), np.random.default_rng(1))
        assert g.max_rel_error < 1e-7

    @pytest.mark.parametrize("kind", ["eps", "sn", "npr"])
    def test_mlp(self, kind):
        b = small_bundle(seed=2)
        g = grad_check(b, kind, batch(b, np.random.default_rng(0)), np.random.default_rng(1))
        assert g.max_rel_error < 1e-4

    def test_npr_frozen_exact_zero(self):
        b = small_bundle(seed=4)
        x, t_in, eps = batch(b, np.random.default_rng(0))
        _, grads = b.loss_and_grad("npr", x, t_in, eps)
        for k in b.group("trunk") + b.group("eps"):
            assert np.all(grads[k] == 0.0)
        g = grad_check(b, "npr", (x, t_in, eps), np.random.default_rng(1))
        assert g.frozen_max_abs == 0.0

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10 ** 6), kind=st.sampled_from(["eps", "sn", "npr"]),
           hidden=st.sampled_from([0, 5]))
    def test_random_bundles(self, seed, kind, hidden):
        b = small_bundle(seed=seed, head_hidden=hidden)
        rng = np.random.default_rng(seed + 1)
        assert grad_check(b, kind, batch(b, rng, 8), rng, n_params=40).max_rel_error < 1e-4


def test_error_amplification_identity():
    spec = GmmSpec(np.array([0.3, 0.7]), np.array([[-1.0], [2.0]]), 0.2)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 1)) * 3
    e, _, _ = eps_moments(spec, 0.5, 0.5, x)
    e_hat = e + rng.normal(size=e.shape)
    lhs = np.abs(e_hat ** 2 - e ** 2)
    rhs = np.abs(e_hat + e) * np.abs(e_hat - e)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


class TestTraining:
    cfg = TrainConfig(iterations=60, batch=32, lr=1e-3, seed=5)

    def test_deterministic(self):
        a = train_eps(unit_gaussian(2), SCH, self.cfg, e=8, h=12, head_hidden=4).bundle
        b = train_eps(unit_gaussian(2), SCH, self.cfg, e=8, h=12, head_hidden=4).bundle
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    @pytest.mark.parametrize("trainer", [train_sn, train_npr])
    def test_stage2_freezes_stage1(self, trainer):
        s1 = train_eps(unit_gaussian(1), SCH, self.cfg, e=8, h=12, head_hidden=4).bundle
        before = {k: s1.params[k].copy() for k in s1.params}
        s2 = trainer(s1, unit_gaussian(1), SCH, self.cfg).bundle
        for k in s1.group("trunk") + s1.group("eps"):
            np.testing.assert_array_equal(s2.params[k], before[k])
            np.testing.assert_array_equal(s1.params[k], before[k])
        assert any(not np.array_equal(s2.params[k], before[k]) for k in s1.group("aux"))

    def test_stage2_rejects_other_schedule(self):
        s1 = train_eps(unit_gaussian(1), SCH, self.cfg, e=8, h=12).bundle
        with pytest.raises(ValueError):
            train_sn(s1, unit_gaussian(1), build_discrete(linear=60), self.cfg)

    def test_divergence_detected(self):
        s1 = train_eps(unit_gaussian(1), SCH, self.cfg, e=8, h=12).bundle
        with pytest.raises(TrainingDiverged):
            train_npr(s1, unit_gaussian(1), SCH, self.cfg, eps_fn=lambda x, n: np.full_like(x, np.nan))

    def test_float32_option_keeps_float64_storage(self):
        cfg = TrainConfig(iterations=20, batch=16, seed=1, dtype="float32")
        b = train_eps(unit_gaussian(1), SCH, cfg, e=8, h=12).bundle
        assert all(v.dtype == np.float64 for v in b.params.values())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(iterations=0)
        with pytest.raises(ValueError):
            TrainConfig(dtype="float16")


@pytest.fixture(scope="module")
def trained_pair():
    """Stage 1 and both stage-2 heads on a small two-component problem."""
    spec = GmmSpec(np.array([0.5, 0.5]), np.array([[-1.0, 0.5], [1.0, -0.5]]), 0.3)
    sch = build_discrete(linear=30)
    cfg = TrainConfig(iterations=4000, batch=256, lr=2e-3, seed=11, dtype="float32")
    res = train_eps(spec, sch, cfg, e=16, h=64, head_hidden=32)
    return spec, sch, res


class TestFit:
    def test_loss_near_floor(self, trained_pair):
        spec, sch, res = trained_pair
        rng = np.random.default_rng(0)
        floor = 0.0
        for n in range(1, sch.N + 1):
            _, _, x = sample_xt(spec, sch.alpha_bar(n), sch.beta_bar(n), rng, 20000)
            _, _, cov = eps_moments(spec, sch.alpha_bar(n), sch.beta_bar(n), x)
            floor += np.trace(cov, axis1=1, axis2=2).mean() / sch.N
        tail = res.losses[-500:].mean()
        assert floor <= tail * 1.02
        assert tail < 1.10 * floor

    def test_npr_with_exact_mean_learns_variance(self, trained_pair):
        spec, sch, res = trained_pair

        def exact(x, n):
            out = np.empty_like(x)
            for m in np.unique(n):
                idx = n == m
                out[idx] = eps_moments(spec, sch.alpha_bar(m), sch.beta_bar(m), x[idx])[0]
            return out

        cfg = TrainConfig(iterations=3000, batch=256, lr=2e-3, seed=12, dtype="float32")
        g = train_npr(res.bundle, spec, sch, cfg, eps_fn=exact).bundle
        grid = np.stack(np.meshgrid(np.linspace(-1.5, 1.5, 7), np.linspace(-1.5, 1.5, 7)), -1).reshape(-1, 2)
        for n in (3, 10, 20, 30):
            _, _, cov = eps_moments(spec, sch.alpha_bar(n), sch.beta_bar(n), grid)
            err = np.abs(g.forward(grid, n)[1] - np.diagonal(cov, axis1=1, axis2=2))
            assert err.mean() < 0.06
            assert err.max() < 0.3


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        b = small_bundle(seed=7)
        save_checkpoint(b, tmp_path / "b.json")
        c = load_checkpoint(tmp_path / "b.json")
        for k in b.params:
            np.testing.assert_array_equal(b.params[k], c.params[k])
        x = np.random.default_rng(0).normal(size=(4, 2))
        np.testing.assert_array_equal(b.forward(x, 3)[0], c.forward(x, 3)[0])

    def test_wrong_dimension(self, tmp_path):
        save_checkpoint(small_bundle(), tmp_path / "b.json")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "b.json", d=3)

    def test_schedule_mismatch_warns(self, tmp_path):
        b = small_bundle()
        b.meta["schedule"] = SCH.digest()
        save_checkpoint(b, tmp_path / "b.json")
        with pytest.warns(UserWarning):
            load_checkpoint(tmp_path / "b.json", schedule=build_discrete(linear=40))

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(small_bundle(), tmp_path / "b.json")
        doc = json.loads((tmp_path / "b.json").read_text())
        doc["version"] = 99
        (tmp_path / "b.json").write_text(json.dumps(doc))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "b.json")

    def test_corrupt_file(self, tmp_path):
        (tmp_path / "b.json").write_text("{not json")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "b.json")
