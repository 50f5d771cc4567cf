"""Reverse kernels p(x_s | x_t): optimal mean plus isotropic, diagonal and full covariances.

Every estimator is written against a :class:`~dpm_covlab.schedule.Jump`, so the
same code serves adjacent steps, trajectory jumps and continuous-time jumps.
Moment providers supply the per-state predictions

* ``e``: the noise prediction (or the exact E[eps | x]),
* ``s``: an estimate of E[eps^2 | x],
* ``r``: an estimate of E[(eps - e)^2 | x].
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gmm import GmmSpec, eps_moments, sample_xt
from .nets import PredictorBundle
from .schedule import Jump, ProcessKind, Schedule, VPSDE, step_jump

VAR_FLOOR = 1e-12
COV_KINDS = ("sn", "npr", "iso", "full", "tilde", "beta")


@dataclass
class Moments:
    e: np.ndarray
    s: np.ndarray | None = None
    r: np.ndarray | None = None


class OracleProvider:
    """Exact moments of the mixture data, optionally with a corrupted mean.

    ``bias`` is added to E[eps | x]; ``mean_fn(x, t, abar, bbar)`` replaces the
    mean outright. ``s`` stays exact and ``r`` is the exact residual second
    moment of whatever mean is returned.
    """

    exact = True

    def __init__(self, spec: GmmSpec, bias: float | np.ndarray = 0.0,
                 mean_fn: Callable | None = None, name: str = "oracle"):
        self.spec = spec
        self.bias = bias
        self.mean_fn = mean_fn
        self.name = name

    def predict(self, x, t, abar: float, bbar: float) -> Moments:
        e, e2, cov = eps_moments(self.spec, abar, bbar, x)
        e_hat = e + self.bias if self.mean_fn is None else self.mean_fn(x, t, abar, bbar)
        r = np.diagonal(cov, axis1=1, axis2=2) + (e - e_hat) ** 2
        return Moments(e_hat, e2, r)

    def exact_eps(self, x, abar: float, bbar: float):
        e, _, cov = eps_moments(self.spec, abar, bbar, x)
        return e, cov


class NetworkProvider:
    """Moments from trained bundles; stage-2 bundles supply ``s`` and ``r``."""

    exact = False

    def __init__(self, eps_bundle: PredictorBundle, sn_bundle: PredictorBundle | None = None,
                 npr_bundle: PredictorBundle | None = None, name: str = "net"):
        self.eps_bundle = eps_bundle
        self.sn_bundle = sn_bundle
        self.npr_bundle = npr_bundle
        self.name = name

    def predict(self, x, t, abar: float, bbar: float) -> Moments:
        e, _ = self.eps_bundle.forward(x, t, abar, bbar)
        s = None if self.sn_bundle is None else self.sn_bundle.forward(x, t, abar, bbar)[1]
        r = None if self.npr_bundle is None else self.npr_bundle.forward(x, t, abar, bbar)[1]
        return Moments(e, s, r)


def network_mean(bundle: PredictorBundle) -> Callable:
    """Adapter giving a trained noise head the ``mean_fn`` signature."""
    return lambda x, t, abar, bbar: bundle.forward(x, t, abar, bbar)[0]


@dataclass
class ReverseKernel:
    """Gaussian N(mean, cov) with cov stored as a scalar, a (B, d) diagonal or (B, d, d)."""

    mean: np.ndarray
    cov: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in ("iso", "diag", "full"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.kind == "full":
            np.linalg.cholesky(self.cov)  # raises on non-PSD

    def variances(self) -> np.ndarray:
        if self.kind == "full":
            return np.diagonal(self.cov, axis1=1, axis2=2)
        return np.broadcast_to(self.cov, self.mean.shape)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.mean.shape)
        if self.kind == "full":
            return self.mean + np.einsum("bij,bj->bi", np.linalg.cholesky(self.cov), z)
        return self.mean + np.sqrt(self.variances()) * z

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        diff = x - self.mean
        d = self.mean.shape[1]
        if self.kind == "full":
            chol = np.linalg.cholesky(self.cov)
            sol = np.linalg.solve(chol, diff[..., None])[..., 0]
            logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
            return -0.5 * (np.sum(sol ** 2, axis=1) + logdet + d * math.log(2 * math.pi))
        v = self.variances()
        return -0.5 * np.sum(diff ** 2 / v + np.log(2 * math.pi * v), axis=1)

    def to_json(self) -> dict:
        return {"kind": self.kind, "mean": self.mean.tolist(), "cov": np.asarray(self.cov).tolist()}


# ---------------------------------------------------------------------------
# mean

def jump_mean(jump: Jump, x: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Optimal mean given a noise prediction ``e``.

    Written as the e-free part minus gamma * sqrt(bbar/abar) * e; algebraically
    the same as plugging x0 = (x - sqrt(bbar) e) / sqrt(abar) into tilde_mu.
    """
    base = jump.tilde_mu(x, x / math.sqrt(jump.abar_t))
    return base - jump.gamma * math.sqrt(jump.bbar_t / jump.abar_t) * e


def optimal_mean(provider, schedule: Schedule, kind: ProcessKind, n: int, x: np.ndarray):
    jump = step_jump(schedule, kind, n)
    x = np.atleast_2d(x)
    return jump_mean(jump, x, provider.predict(x, n, jump.abar_t, jump.bbar_t).e)


# ---------------------------------------------------------------------------
# covariance

def _floor(v):
    return np.maximum(v, VAR_FLOOR)


def sn_var(jump: Jump, m: Moments) -> np.ndarray:
    if m.s is None:
        raise ValueError("provider does not supply E[eps^2 | x]")
    return _floor(jump.lam2 + jump.cov_coef * np.maximum(m.s - m.e ** 2, 0.0))


def npr_var(jump: Jump, m: Moments) -> np.ndarray:
    if m.r is None:
        raise ValueError("provider does not supply E[(eps - e)^2 | x]")
    return _floor(jump.lam2 + jump.cov_coef * m.r)


def iso_var_from_norm(jump: Jump, mean_sq_norm: float) -> float:
    """Isotropic variance from the dataset average of ||e||^2 / d.

    The exact value lies in [lam2, lam2 + coef] because 0 <= E||E[eps|x]||^2 / d <= 1;
    Monte Carlo error can push the estimate outside, so it is clamped back.
    """
    upper = jump.lam2 + jump.cov_coef
    return float(min(max(jump.lam2 + jump.cov_coef * (1.0 - mean_sq_norm), jump.lam2, VAR_FLOOR),
                     upper))


def mean_sq_norm(provider, spec: GmmSpec, t, abar: float, bbar: float, M: int,
                 rng: np.random.Generator) -> float:
    if M < 1:
        raise ValueError("Monte Carlo budget must be >= 1")
    _, _, x = sample_xt(spec, abar, bbar, rng, M)
    e = provider.predict(x, t, abar, bbar).e
    return float(np.mean(np.sum(e ** 2, axis=1)) / spec.d)


def full_cov(provider, jump: Jump, x: np.ndarray, e: np.ndarray | None = None) -> np.ndarray:
    """lam2 I + coef (Cov[eps|x] + (e - E[eps|x])(e - E[eps|x])^T); oracle providers only."""
    if not getattr(provider, "exact", False):
        raise TypeError("full covariance needs an oracle provider")
    true_e, cov_eps = provider.exact_eps(x, jump.abar_t, jump.bbar_t)
    if e is None:
        e = provider.predict(x, jump.t, jump.abar_t, jump.bbar_t).e
    dev = e - true_e
    d = x.shape[1]
    return (jump.lam2 * np.eye(d)[None]
            + jump.cov_coef * (cov_eps + dev[:, :, None] * dev[:, None, :]))


def sn_diag_var(provider, schedule: Schedule, kind: ProcessKind, n: int, x: np.ndarray):
    jump = step_jump(schedule, kind, n)
    return sn_var(jump, provider.predict(np.atleast_2d(x), n, jump.abar_t, jump.bbar_t))


def npr_diag_var(provider, schedule: Schedule, kind: ProcessKind, n: int, x: np.ndarray):
    jump = step_jump(schedule, kind, n)
    return npr_var(jump, provider.predict(np.atleast_2d(x), n, jump.abar_t, jump.bbar_t))


def iso_var_analytic(provider, spec: GmmSpec, schedule: Schedule, kind: ProcessKind, n: int,
                     M: int, rng: np.random.Generator) -> float:
    jump = step_jump(schedule, kind, n)
    return iso_var_from_norm(jump, mean_sq_norm(provider, spec, n, jump.abar_t, jump.bbar_t, M, rng))


def continuous_diag_var(provider, sde: VPSDE, s: float, t: float, x: np.ndarray,
                        corrected: bool) -> np.ndarray:
    """Diagonal variance of p(x_s | x_t) for the VP SDE, from its own closed form."""
    a_ts, b_ts, bt = sde.coeffs(s, t)
    coef = b_ts ** 2 / (sde.beta(t) * a_ts)
    m = provider.predict(np.atleast_2d(x), t, sde.alpha(t), sde.beta(t))
    if corrected:
        if m.r is None:
            raise ValueError("provider does not supply E[(eps - e)^2 | x]")
        extra = m.r
    else:
        if m.s is None:
            raise ValueError("provider does not supply E[eps^2 | x]")
        extra = np.maximum(m.s - m.e ** 2, 0.0)
    return _floor(bt + coef * extra)


def clip_variance(kernel: ReverseKernel, y: float, data_scale: float = 1.0) -> ReverseKernel:
    """Shrink sigma so that ||sigma||_inf * E|eps| <= (2/255) * y * data_scale, per state."""
    if y <= 0:
        raise ValueError("y must be positive")
    bound = 2.0 / 255.0 * y * data_scale / math.sqrt(2.0 / math.pi)
    if kernel.kind == "full":
        sd_inf = np.sqrt(np.max(np.diagonal(kernel.cov, axis1=1, axis2=2), axis=1))
        scale = np.minimum(1.0, bound / sd_inf)
        return ReverseKernel(kernel.mean, kernel.cov * (scale ** 2)[:, None, None], "full")
    var = np.asarray(kernel.cov)
    if kernel.kind == "iso":
        scale = min(1.0, bound / math.sqrt(float(var)))
        return ReverseKernel(kernel.mean, var * scale ** 2, "iso")
    scale = np.minimum(1.0, bound / np.sqrt(np.max(var, axis=1)))
    return ReverseKernel(kernel.mean, var * (scale ** 2)[:, None], "diag")


# ---------------------------------------------------------------------------
# models

def _time_key(t) -> int:
    if isinstance(t, (int, np.integer)):
        return int(t)
    return 10 ** 12 + int(round(float(t) * 1e9))


class Model:
    """A named reverse model: a moment provider plus a covariance rule.

    ``cov`` is one of ``sn``, ``npr``, ``iso`` (dataset-averaged, needs ``spec``
    for the Monte Carlo states), ``full`` (oracle only), ``tilde`` (the jump's
    forward posterior variance lam2) or ``beta`` (1 - abar_t / abar_s).
    """

    def __init__(self, provider, cov: str, name: str | None = None, spec: GmmSpec | None = None,
                 iso_budget: int = 10_000, seed: int = 0):
        if cov not in COV_KINDS:
            raise ValueError(f"unknown covariance rule {cov!r}; choose from {COV_KINDS}")
        if cov == "iso" and spec is None:
            raise ValueError("isotropic variance needs the data spec for its Monte Carlo average")
        if cov == "full" and not getattr(provider, "exact", False):
            raise TypeError("full covariance needs an oracle provider")
        self.provider = provider
        self.cov = cov
        self.name = name or f"{getattr(provider, 'name', 'model')}:{cov}"
        self.spec = spec
        self.iso_budget = iso_budget
        self.seed = seed
        self._iso_cache: dict[int, float] = {}
        self._lock = threading.Lock()

    def iso_norm(self, jump: Jump) -> float:
        key = _time_key(jump.t)
        with self._lock:
            if key not in self._iso_cache:
                rng = np.random.default_rng([self.seed, 7, key])
                self._iso_cache[key] = mean_sq_norm(self.provider, self.spec, jump.t, jump.abar_t,
                                                    jump.bbar_t, self.iso_budget, rng)
            return self._iso_cache[key]

    def moments(self, jump: Jump, x: np.ndarray) -> Moments:
        return self.provider.predict(x, jump.t, jump.abar_t, jump.bbar_t)

    def kernel(self, jump: Jump, x: np.ndarray, m: Moments | None = None) -> ReverseKernel:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if m is None:
            m = self.moments(jump, x)
        mean = jump_mean(jump, x, m.e)
        if self.cov == "sn":
            return ReverseKernel(mean, sn_var(jump, m), "diag")
        if self.cov == "npr":
            return ReverseKernel(mean, npr_var(jump, m), "diag")
        if self.cov == "full":
            return ReverseKernel(mean, full_cov(self.provider, jump, x, m.e), "full")
        if self.cov == "iso":
            var = iso_var_from_norm(jump, self.iso_norm(jump))
        elif self.cov == "tilde":
            var = max(jump.lam2, VAR_FLOOR)
        else:
            var = max(1.0 - jump.abar_t / jump.abar_s, VAR_FLOOR)
        return ReverseKernel(mean, np.float64(var), "iso")
