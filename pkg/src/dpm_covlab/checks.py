"""Invariant checks behind ``dpm-covlab verify``.

Each check returns a :class:`Check` with a measured margin: positive means the
invariant holds with that much room. The suite is sized to finish in well under
a minute on one core.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate

from . import schedule as sched_mod
from .elbo import elbo_direct_paths, reduced_states_table, target_moments, reduced_kl_states
from .estimators import Model, OracleProvider, ReverseKernel, continuous_diag_var, npr_var, sn_var
from .gmm import GmmSpec, eps_moments, sample_xt, unit_gaussian, x0_moments
from .nets import PredictorBundle, grad_check
from .sampler import ancestral_sample
from .schedule import DDIM, DDPM, VPSDE, build_discrete, step_jump
from .trajectory import CostMatrix, brute_force_trajectory, even_trajectory, optimal_trajectory_dp, restrict


@dataclass
class Check:
    name: str
    module: str
    passed: bool
    margin: float
    detail: str = ""
    seconds: float = 0.0

    def to_json(self) -> dict:
        out = asdict(self)
        out["passed"] = bool(self.passed)
        out["margin"] = float(self.margin) if math.isfinite(self.margin) else str(self.margin)
        return out


def random_spec(rng: np.random.Generator, d: int = 1, J: int | None = None) -> GmmSpec:
    J = int(rng.integers(1, 4)) if J is None else J
    w = rng.dirichlet(np.ones(J))
    return GmmSpec(w, rng.uniform(-3, 3, size=(J, d)), float(rng.uniform(0.05, 1.5)))


def quadrature_moments(spec: GmmSpec, abar: float, bbar: float, x: float) -> np.ndarray:
    """[E x0, Var x0, E eps, E eps^2] given x (1-d) by adaptive quadrature over x0."""
    lo = float(spec.means.min()) - 12 * math.sqrt(spec.var)
    hi = float(spec.means.max()) + 12 * math.sqrt(spec.var)
    c = spec.var
    mu = spec.means[:, 0]

    def joint(x0):
        prior = np.sum(spec.weights * np.exp(-0.5 * (x0 - mu) ** 2 / c)) / math.sqrt(2 * math.pi * c)
        lik = math.exp(-0.5 * (x - math.sqrt(abar) * x0) ** 2 / bbar)
        return prior * lik

    pts = sorted(set(mu.tolist() + [x / math.sqrt(abar)]))
    pts = [p for p in pts if lo < p < hi]

    def moment(f):
        return integrate.quad(lambda z: f(z) * joint(z), lo, hi, points=pts, limit=400,
                              epsabs=0, epsrel=1e-13)[0]

    Z = moment(lambda z: 1.0)
    m1 = moment(lambda z: z) / Z
    m2 = moment(lambda z: (z - m1) ** 2) / Z
    eps = lambda z: (x - math.sqrt(abar) * z) / math.sqrt(bbar)  # noqa: E731
    e1 = moment(eps) / Z
    e2 = moment(lambda z: eps(z) ** 2) / Z
    return np.array([m1, m2, e1, e2])


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        chk = fn(*args, **kwargs)
        chk.seconds = round(time.perf_counter() - t0, 3)
        return chk
    wrapper.__name__ = fn.__name__
    return wrapper


@_timed
def check_schedule(rng) -> Check:
    sch = build_discrete(linear=1000)
    ab = np.array([sch.alpha_bar(n) for n in range(0, sch.N + 1)])
    mono = float(np.min(-np.diff(ab)))
    worst = 0.0
    for kind in (DDPM, DDIM):
        for n in rng.integers(2, sch.N + 1, size=20):
            j = step_jump(sch, kind, int(n))
            # the x0 coefficient of tilde_mu, read off at x_t = 0, x0 = 1
            coef = float(j.tilde_mu(np.zeros((1, 1)), np.ones((1, 1)))[0, 0])
            worst = max(worst, abs(coef - j.gamma))
    ok = ab[0] == 1.0 and mono > 0 and worst < 1e-12
    return Check("schedule: boundary, monotone alpha_bar, gamma is the x0 coefficient",
                 "noise_schedule", ok, 1e-12 - worst, f"max |gamma - coef| = {worst:.3e}")


@_timed
def check_continuous(rng) -> Check:
    sde = VPSDE()
    semi = 0.0
    for _ in range(20):
        s, u, t = np.sort(rng.uniform(0, 1, 3))
        semi = max(semi, abs(sde.alpha(t, s) * sde.alpha(s) - sde.alpha(t)),
                   abs(sde.alpha(t, u) * sde.alpha(u, s) - sde.alpha(t, s)))
    N = 200
    sch = sde.to_schedule(N)
    ts = sde.grid(N)
    spec = random_spec(rng)
    prov = OracleProvider(spec, bias=0.2)
    adj = 0.0
    for n in rng.integers(2, N + 1, size=10):
        n = int(n)
        cj, dj = sde.jump(ts[n - 1], ts[n]), step_jump(sch, DDPM, n)
        x = rng.normal(size=(16, 1))
        for corrected in (False, True):
            vc = continuous_diag_var(prov, sde, ts[n - 1], ts[n], x, corrected)
            m = prov.predict(x, n, dj.abar_t, dj.bbar_t)
            vd = npr_var(dj, m) if corrected else sn_var(dj, m)
            adj = max(adj, float(np.max(np.abs(vc - vd))))
        adj = max(adj, abs(cj.lam2 - dj.lam2), abs(cj.gamma - dj.gamma))
    ok = semi < 1e-10 and adj < 1e-8
    return Check("continuous vs discrete: semigroup and grid-adjacent agreement", "noise_schedule",
                 ok, min(1e-10 - semi, 1e-8 - adj), f"semigroup {semi:.2e}, adjacent {adj:.2e}")


@_timed
def check_oracle_quadrature(rng, n_specs: int = 5, n_points: int = 4) -> Check:
    sch = build_discrete(linear=1000)
    worst = 0.0
    for _ in range(n_specs):
        spec = random_spec(rng)
        for _ in range(n_points):
            n = int(rng.integers(1, sch.N + 1))
            ab, bb = sch.alpha_bar(n), sch.beta_bar(n)
            x = float(rng.normal() * math.sqrt(ab * (spec.var + 9) + bb))
            ref = quadrature_moments(spec, ab, bb, x)
            m, v, _ = x0_moments(spec, ab, bb, np.array([[x]]))
            e, e2, _ = eps_moments(spec, ab, bb, np.array([[x]]))
            got = np.array([m[0, 0], v[0, 0], e[0, 0], e2[0, 0]])
            worst = max(worst, float(np.max(np.abs(got - ref))))
    return Check("oracle moments match quadrature", "gmm_oracle", worst < 1e-7, 1e-7 - worst,
                 f"max abs error {worst:.3e}")


def _instance(rng, d=1):
    spec = random_spec(rng, d)
    sch = build_discrete(linear=int(rng.integers(50, 300)))
    n = int(rng.integers(2, sch.N + 1))
    jump = step_jump(sch, DDPM, n)
    x = sample_xt(spec, jump.abar_t, jump.bbar_t, rng, 64)[2]
    return spec, jump, x


@_timed
def check_optimal_mean(rng, n_instances: int = 20) -> Check:
    worst = 0.0
    for _ in range(n_instances):
        spec, jump, x = _instance(rng, d=2)
        kern = Model(OracleProvider(spec), "sn").kernel(jump, x)
        mean_q, _ = target_moments(spec, jump, x)
        worst = max(worst, float(np.max(np.abs(kern.mean - mean_q))))
    return Check("optimal mean equals E[x_{n-1} | x_n]", "cov_estimators", worst < 1e-10,
                 1e-10 - worst, f"max deviation {worst:.3e}")


@_timed
def check_optimal_variance(rng, n_instances: int = 30) -> Check:
    """Scaling the oracle diagonal variance by 1 +- 5% must raise the reduced KL."""
    least = math.inf
    for _ in range(n_instances):
        spec, jump, x = _instance(rng)
        kern = Model(OracleProvider(spec), "sn").kernel(jump, x)
        mean_q, cov_q = target_moments(spec, jump, x)
        base = reduced_kl_states(kern, mean_q, cov_q).mean()
        for f in (0.95, 1.05):
            pert = ReverseKernel(kern.mean, kern.cov * f, "diag")
            least = min(least, reduced_kl_states(pert, mean_q, cov_q).mean() - base)
    return Check("oracle variance is KL-optimal under +-5% perturbation", "cov_estimators",
                 least > 1e-6, least - 1e-6, f"smallest increase {least:.3e}")


@_timed
def check_correction(rng) -> Check:
    spec, jump, x = _instance(rng)
    prev_gap, mono, exact = -math.inf, True, 0.0
    mean_q, cov_q = target_moments(spec, jump, x)
    _, _, cov_eps = eps_moments(spec, jump.abar_t, jump.bbar_t, x)
    sigma_star = jump.lam2 + jump.cov_coef * np.diagonal(cov_eps, axis1=1, axis2=2)
    for delta in (0.1, 0.5, 1.0):
        model = Model(OracleProvider(spec, bias=delta), "npr")
        m = model.moments(jump, x)
        kern = model.kernel(jump, x, m)
        exact = max(exact, float(np.max(np.abs(kern.cov - (sigma_star + jump.cov_coef * delta ** 2)))))
        plain = ReverseKernel(kern.mean, sigma_star, "diag")
        gap = float(np.mean(reduced_kl_states(plain, mean_q, cov_q)
                            - reduced_kl_states(kern, mean_q, cov_q)))
        mono = mono and gap > prev_gap and gap > 0
        prev_gap = gap
    ok = mono and exact < 1e-10
    return Check("corrected variance beats the uncorrected one, monotone in the bias",
                 "cov_estimators", ok, min(prev_gap, 1e-10 - exact),
                 f"largest gap {prev_gap:.3e}, closed-form error {exact:.2e}")


@_timed
def check_full_dominance(rng, n_instances: int = 20) -> Check:
    least = math.inf
    for _ in range(n_instances):
        spec, jump, x = _instance(rng, d=2)
        prov = OracleProvider(spec)
        mean_q, cov_q = target_moments(spec, jump, x)
        kd = reduced_kl_states(Model(prov, "sn").kernel(jump, x), mean_q, cov_q).mean()
        kf = reduced_kl_states(Model(prov, "full").kernel(jump, x), mean_q, cov_q).mean()
        least = min(least, kd - kf)
    return Check("full covariance KL <= diagonal KL", "cov_estimators", least >= -1e-10, least + 1e-10,
                 f"smallest diag - full {least:.3e}")


@_timed
def check_dp(rng, max_n: int = 7) -> Check:
    bad = 0
    cases = 0
    for N in range(1, max_n + 1):
        L = np.full((N + 1, N + 1), np.inf)
        iu = np.triu_indices(N + 1, 1)
        L[iu] = rng.uniform(0, 1, size=len(iu[0]))
        for K in range(1, N + 1):
            tau = optimal_trajectory_dp(L, K)
            ref, _ = brute_force_trajectory(L, K)
            bad += tau != ref
            cases += 1
    return Check("dynamic program matches exhaustive search", "trajectory", bad == 0, float(-bad),
                 f"{cases - bad}/{cases} cases agree")


@_timed
def check_gradients(rng) -> Check:
    b = PredictorBundle.init(2, rng, e=8, h=12, head_hidden=6, zero_heads=False,
                             meta={"N": 100})
    x = rng.normal(size=(16, 2))
    t_in = b.time_input(rng.integers(1, 101, size=16))
    eps = rng.normal(size=(16, 2))
    worst, frozen = 0.0, 0.0
    for kind in ("eps", "sn", "npr"):
        g = grad_check(b, kind, (x, t_in, eps), rng, n_params=60)
        worst = max(worst, g.max_rel_error)
        frozen = max(frozen, g.frozen_max_abs)
    ok = worst < 1e-4 and frozen == 0.0
    return Check("reverse-mode gradients match finite differences", "predictor_net", ok,
                 1e-4 - worst, f"max relative error {worst:.2e}, frozen grad {frozen:.1e}")


@_timed
def check_sampler_exact(rng, batch: int = 20000) -> Check:
    spec = GmmSpec(np.ones(1), np.array([[0.7]]), 0.5)
    sch = build_discrete(linear=100)
    model = Model(OracleProvider(spec), "sn")
    worst = -math.inf
    for K in (2, 10):
        run = ancestral_sample(model, restrict(sch, DDPM, even_trajectory(sch.N, K)), batch,
                               int(rng.integers(2 ** 31)), final_noise=True)
        x = run.x0[:, 0]
        z_mean = abs(x.mean() - 0.7) / (x.std(ddof=1) / math.sqrt(batch))
        v = x.var(ddof=1)
        se_var = math.sqrt(np.var((x - x.mean()) ** 2, ddof=1) / batch)
        worst = max(worst, z_mean, abs(v - 0.5) / se_var)
    return Check("oracle chain on Gaussian data is exact", "sampler", worst < 4.0, 4.0 - worst,
                 f"largest |z| {worst:.2f}")


@_timed
def check_direct_vs_reduced(rng, M: int = 6000) -> Check:
    spec = GmmSpec(np.array([0.5, 0.5]), np.array([[-1.5], [1.5]]), 0.2)
    sch = build_discrete(linear=100)
    jumps = list(restrict(sch, DDPM, even_trajectory(sch.N, 5)).jumps)
    prov = OracleProvider(spec)
    models = [Model(prov, "sn"), Model(prov, "beta")]
    seed = int(rng.integers(2 ** 31))
    a, b = elbo_direct_paths(models, jumps, spec, M, np.random.default_rng(seed))
    d_direct = (b.sum(0) - a.sum(0))   # -logratio difference: nelbo(a) - nelbo(b) per path
    red = reduced_states_table(models, jumps, spec, M, seed + 1)
    d_red = sum(x - y for x, y in zip(red[0], red[1]))
    diff = d_direct.mean() - d_red.mean()
    se = math.sqrt(d_direct.var(ddof=1) / M + d_red.var(ddof=1) / M)
    z = abs(diff) / se
    return Check("direct and reduced ELBO differences agree", "elbo_eval", z < 4.0, 4.0 - z,
                 f"difference {diff:.4f} with combined SE {se:.4f}")


@_timed
def check_ddim_rejected(rng) -> Check:
    sch = build_discrete(linear=50)
    model = Model(OracleProvider(unit_gaussian(1)), "sn")
    raised = 0
    try:
        CostMatrix(model, sch, DDIM, unit_gaussian(1))
    except ValueError:
        raised += 1
    try:
        elbo_direct_paths([model], list(restrict(sch, DDIM, [25, 50]).jumps), unit_gaussian(1), 4, rng)
    except ValueError:
        raised += 1
    return Check("likelihood evaluation rejects the deterministic forward process", "elbo_eval",
                 raised == 2, float(raised - 2), f"{raised}/2 entry points raised")


ALL_CHECKS = (check_schedule, check_continuous, check_oracle_quadrature, check_optimal_mean,
              check_optimal_variance, check_correction, check_full_dominance, check_dp,
              check_gradients, check_sampler_exact, check_direct_vs_reduced, check_ddim_rejected)


def run_checks(seed: int, faults: tuple[str, ...] = ()) -> list[Check]:
    """Run every check with its own generator keyed by (seed, index); ``faults``
    are switched on for the duration of the run only."""
    before = set(sched_mod.FAULTS)
    sched_mod.FAULTS.update(faults)
    try:
        out = []
        for i, fn in enumerate(ALL_CHECKS):
            rng = np.random.default_rng([seed, i])
            try:
                out.append(fn(rng))
            except Exception as exc:  # a crash is a failed check, not a crashed report
                out.append(Check(fn.__name__, "?", False, -math.inf, f"raised {exc!r}"))
        return out
    finally:
        sched_mod.FAULTS.clear()
        sched_mod.FAULTS.update(before)
