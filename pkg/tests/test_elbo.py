import csv
import math

import numpy as np
import pytest

from dpm_covlab.elbo import (CSV_COLUMNS, compare, elbo_direct, elbo_direct_paths, kl_continuous,
                             kl_reduced_jump_states, kl_reduced_step, paired_difference, reduced_kl_states,
                             reduced_report, reduced_states_table, schedule_jumps, target_moments, write_rows)
from dpm_covlab.estimators import Model, OracleProvider, ReverseKernel
from dpm_covlab.gmm import GmmSpec, sample_x0, sample_xt, unit_gaussian
from dpm_covlab.schedule import DDIM, DDPM, VPSDE, build_discrete, step_jump

SCH = build_discrete(linear=25)
BIMODAL = GmmSpec(np.array([0.5, 0.5]), np.array([[-2.0], [2.0]]), 0.1)


class ScaledModel(Model):
    """Wraps a model and multiplies its kernel variance by ``factor``."""

    def __init__(self, base: Model, factor: float):
        super().__init__(base.provider, base.cov, f"{base.name}x{factor}", base.spec)
        self.factor = factor

    def kernel(self, jump, x, m=None):
        k = super().kernel(jump, x, m)
        return ReverseKernel(k.mean, k.cov * self.factor, k.kind)


class ConstModel(Model):
    """Oracle mean with a fixed isotropic variance."""

    def __init__(self, spec, var):
        super().__init__(OracleProvider(spec), "sn", f"const{var}")
        self.var = var

    def kernel(self, jump, x, m=None):
        k = super().kernel(jump, x, m)
        return ReverseKernel(k.mean, np.float64(self.var), "iso")


class TestDirect:
    def test_perfect_model_unit_gaussian(self):
        d = 2
        spec = unit_gaussian(d)
        rep = elbo_direct(Model(OracleProvider(spec), "sn"), schedule_jumps(SCH, DDPM), spec, 20000,
                          np.random.default_rng(0))
        want = -0.5 * d * math.log(2 * math.pi * math.e)
        assert abs(rep.elbo - want) < 3 * rep.stderr
        assert rep.per_step.sum() == pytest.approx(rep.total, rel=1e-12)

    def test_wider_variance_is_worse(self):
        spec = unit_gaussian(1)
        good = Model(OracleProvider(spec), "sn")
        rows = compare([good, ScaledModel(good, 4.0)], schedule_jumps(SCH, DDPM), spec, 100_000, 1, mode="direct")
        gap = rows[1]["value"] - rows[0]["value"]
        assert gap > 3 * max(rows[0]["stderr"], rows[1]["stderr"])

    def test_single_step_telescopes(self):
        sch = build_discrete(beta=[0.3])
        spec = BIMODAL
        model = Model(OracleProvider(spec), "sn")
        M = 50
        paths = elbo_direct_paths([model], schedule_jumps(sch, DDPM), spec, M, np.random.default_rng(4))[0]
        rng = np.random.default_rng(4)
        x0 = sample_x0(spec, rng, M)
        x1 = math.sqrt(0.7) * x0 + math.sqrt(0.3) * rng.standard_normal(x0.shape)
        log_p1 = -0.5 * (x1[:, 0] ** 2 + math.log(2 * math.pi))
        log_q1 = -0.5 * ((x1[:, 0] - math.sqrt(0.7) * x0[:, 0]) ** 2 / 0.3 + math.log(2 * math.pi * 0.3))
        log_p0 = model.kernel(step_jump(sch, DDPM, 1), x1).logpdf(x0)
        np.testing.assert_allclose(paths.sum(axis=0), log_p0 + log_p1 - log_q1, rtol=1e-12)

    def test_ddim_rejected(self):
        spec = unit_gaussian(1)
        with pytest.raises(ValueError):
            elbo_direct(Model(OracleProvider(spec), "sn"), schedule_jumps(SCH, DDIM), spec, 10,
                        np.random.default_rng(0))

    def test_zero_budget(self):
        spec = unit_gaussian(1)
        with pytest.raises(ValueError):
            elbo_direct(Model(OracleProvider(spec), "sn"), schedule_jumps(SCH, DDPM), spec, 0,
                        np.random.default_rng(0))


class TestReduced:
    def test_oracle_kernel_hits_minimum(self):
        jump = step_jump(SCH, DDPM, 6)
        x = np.linspace(-3, 3, 11)[:, None]
        vals = kl_reduced_jump_states(jump, Model(OracleProvider(BIMODAL), "sn"), BIMODAL, x)
        _, cov_q = target_moments(BIMODAL, jump, x)
        np.testing.assert_allclose(vals, 0.5 * (1.0 + np.log(cov_q[:, 0, 0])), rtol=1e-12)
        for factor in (0.9, 1.1):
            other = kl_reduced_jump_states(jump, ScaledModel(Model(OracleProvider(BIMODAL), "sn"), factor),
                                           BIMODAL, x)
            assert np.all(other > vals)

    def test_mean_offset_is_quadratic(self):
        rng = np.random.default_rng(3)
        mean_q = rng.normal(size=(20, 2))
        cov_q = np.broadcast_to(np.diag([0.3, 0.5]), (20, 2, 2))
        var = np.array([0.4, 0.7])
        delta = np.array([0.2, -0.1])
        base = reduced_kl_states(ReverseKernel(mean_q, np.tile(var, (20, 1)), "diag"), mean_q, cov_q)
        shifted = reduced_kl_states(ReverseKernel(mean_q + delta, np.tile(var, (20, 1)), "diag"), mean_q, cov_q)
        np.testing.assert_allclose(shifted - base, 0.5 * np.sum(delta ** 2 / var), rtol=1e-12)

    def test_full_form_reduces_to_diag(self):
        rng = np.random.default_rng(5)
        mean_q = rng.normal(size=(6, 3))
        a = rng.normal(size=(6, 3, 3))
        cov_q = a @ a.transpose(0, 2, 1) + np.eye(3)
        var = rng.uniform(0.2, 2.0, size=(6, 3))
        mean = rng.normal(size=(6, 3))
        diag = reduced_kl_states(ReverseKernel(mean, var, "diag"), mean_q, cov_q)
        full = reduced_kl_states(ReverseKernel(mean, var[:, :, None] * np.eye(3), "full"), mean_q, cov_q)
        np.testing.assert_allclose(full, diag, rtol=1e-12)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            reduced_kl_states(ReverseKernel(np.zeros((1, 1)), np.zeros((1, 1)), "diag"), np.zeros((1, 1)),
                              np.ones((1, 1, 1)))

    def test_continuous_matches_discrete(self):
        sde = VPSDE()
        sch = sde.to_schedule(100)
        ts = sde.grid(100)
        model = Model(OracleProvider(BIMODAL, bias=0.2), "npr")
        for n in (2, 40, 100):
            a, sa = kl_continuous(ts[n - 1], ts[n], model, BIMODAL, sde, 4000, np.random.default_rng(n))
            b, sb = kl_reduced_step(n, model, BIMODAL, sch, DDPM, 4000, np.random.default_rng(n))
            assert abs(a - b) < 2 * math.hypot(sa, sb) + 1e-9

    def test_continuous_rejects_empty_interval(self):
        with pytest.raises(ValueError):
            kl_continuous(0.5, 0.5, Model(OracleProvider(BIMODAL), "sn"), BIMODAL, VPSDE(), 10,
                          np.random.default_rng(0))


class TestCompare:
    def test_duplicate_rows_identical(self):
        m = Model(OracleProvider(BIMODAL), "sn")
        rows = compare([m, m], schedule_jumps(SCH, DDPM), BIMODAL, 500, 3)
        assert rows[0]["value"] == rows[1]["value"]
        assert rows[0]["stderr"] == rows[1]["stderr"]

    def test_ordering_with_biased_mean(self):
        spec = BIMODAL
        biased = OracleProvider(spec, bias=0.05)
        models = [Model(biased, "npr"), Model(biased, "sn"), Model(biased, "iso", spec=spec)]
        v = [r["value"] for r in compare(models, schedule_jumps(SCH, DDPM), spec, 5000, 0)]
        assert v[0] <= v[1] <= v[2]

    def test_stderr_scaling(self):
        m = Model(OracleProvider(BIMODAL, bias=0.2), "sn")
        jumps = schedule_jumps(SCH, DDPM)
        a = compare([m], jumps, BIMODAL, 20000, 0)[0]["stderr"]
        b = compare([m], jumps, BIMODAL, 40000, 0)[0]["stderr"]
        assert b / a == pytest.approx(1 / math.sqrt(2), rel=0.2)

    def test_thread_count_invariant(self):
        m = Model(OracleProvider(BIMODAL), "npr")
        jumps = schedule_jumps(SCH, DDPM)
        assert compare([m], jumps, BIMODAL, 300, 2)[0]["value"] == compare([m], jumps, BIMODAL, 300, 2,
                                                                          threads=3)[0]["value"]

    def test_empty_and_bad_mode(self):
        with pytest.raises(ValueError):
            compare([], schedule_jumps(SCH, DDPM), BIMODAL, 10, 0)
        with pytest.raises(ValueError):
            compare([Model(OracleProvider(BIMODAL), "sn")], schedule_jumps(SCH, DDPM), BIMODAL, 10, 0, mode="x")

    def test_csv_columns(self, tmp_path):
        rows = compare([Model(OracleProvider(BIMODAL), "sn")], schedule_jumps(SCH, DDPM), BIMODAL, 50, 0)
        write_rows(rows, tmp_path / "e.csv")
        with open(tmp_path / "e.csv") as fh:
            back = list(csv.DictReader(fh))
        assert list(back[0]) == CSV_COLUMNS
        assert float(back[0]["value"]) == rows[0]["value"]


class TestInvariants:
    @pytest.mark.parametrize("delta", [0.1, 0.5])
    def test_corrected_beats_uncorrected_per_state(self, delta):
        p = OracleProvider(BIMODAL, bias=delta)
        jumps = schedule_jumps(SCH, DDPM)
        npr, sn = reduced_states_table([Model(p, "npr"), Model(p, "sn")], jumps, BIMODAL, 2000, 0)
        diffs = np.concatenate([b - a for a, b in zip(npr, sn)])
        assert np.all(diffs >= -1e-12)
        assert np.mean(diffs > 0) >= 0.99

    def test_state_dependent_beats_best_constant(self):
        sch = build_discrete(linear=100)
        jump = step_jump(sch, DDPM, 30)
        x = sample_xt(BIMODAL, jump.abar_t, jump.bbar_t, np.random.default_rng(0), 4000)[2]
        best_diag = kl_reduced_jump_states(jump, Model(OracleProvider(BIMODAL), "sn"), BIMODAL, x).mean()
        _, cov_q = target_moments(BIMODAL, jump, x)
        grid = np.linspace(0.5, 1.5, 101) * cov_q[:, 0, 0].mean()
        best_iso = min(kl_reduced_jump_states(jump, ConstModel(BIMODAL, v), BIMODAL, x).mean() for v in grid)
        assert best_diag < best_iso

    def test_direct_and_reduced_differences_agree(self):
        spec = BIMODAL
        p = OracleProvider(spec, bias=0.3)
        a, b = Model(p, "npr"), Model(p, "sn")
        jumps = schedule_jumps(SCH, DDPM)
        direct = compare([a, b], jumps, spec, 40000, 0, mode="direct")
        d_direct = direct[0]["value"] - direct[1]["value"]
        se_direct = math.hypot(direct[0]["stderr"], direct[1]["stderr"])
        red = reduced_states_table([a, b], jumps, spec, 40000, 1)
        d_red, se_red = paired_difference(red[0], red[1])
        assert abs(d_direct - d_red) < 4 * math.hypot(se_direct, se_red)

    def test_report_sums(self):
        rep = reduced_report([np.array([1.0, 2.0]), np.array([3.0, 5.0])])
        assert rep.total == pytest.approx(5.5)
        assert rep.stderr >= 0
