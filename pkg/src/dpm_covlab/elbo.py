"""Likelihood-bound evaluation: direct Monte Carlo ELBO and reduced per-jump KL.

Reduced values keep only the model-dependent part of
E_{q(x_t)} KL(q(x_s | x_t) || p(x_s | x_t)), namely

    1/2 E[ tr(Sigma^-1 (C + delta delta^T)) + log|Sigma| ]

with C = Cov[x_s | x_t] and delta = mean - E[x_s | x_t]. Differences between
models are exact; absolute numbers are only meaningful in direct mode.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimators import Model, ReverseKernel
from .gmm import GmmSpec, sample_x0, sample_xt, x0_moments
from .schedule import Jump, ProcessKind, Schedule, VPSDE, step_jump

CSV_COLUMNS = ["model", "mode", "K", "value", "stderr", "seed", "M", "trajectory"]


@dataclass
class ElboReport:
    """``total`` is -L_elbo in nats (direct) or the summed reduced KL (reduced)."""

    total: float
    stderr: float
    per_step: np.ndarray
    mode: str
    samples: np.ndarray = field(default=None, repr=False)

    @property
    def elbo(self) -> float:
        return -self.total


def target_moments(spec: GmmSpec, jump: Jump, x: np.ndarray):
    """E[x_s | x_t] and Cov[x_s | x_t] (full, batched) under the data spec."""
    m0, _, c0 = x0_moments(spec, jump.abar_t, jump.bbar_t, x)
    coef = math.sqrt(jump.abar_s) - math.sqrt(max(jump.bbar_s - jump.lam2, 0.0)) * math.sqrt(
        jump.abar_t / jump.bbar_t)
    mean = jump.tilde_mu(x, m0)
    cov = jump.lam2 * np.eye(x.shape[1])[None] + coef ** 2 * c0
    return mean, cov


def reduced_kl_states(kernel: ReverseKernel, mean_q: np.ndarray, cov_q: np.ndarray) -> np.ndarray:
    """Per-state reduced KL of ``kernel`` against target moments."""
    delta = kernel.mean - mean_q
    if kernel.kind == "full":
        second = cov_q + delta[:, :, None] * delta[:, None, :]
        chol = np.linalg.cholesky(kernel.cov)
        inv = np.linalg.inv(kernel.cov)
        tr = np.einsum("bij,bji->b", inv, second)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        return 0.5 * (tr + logdet)
    var = kernel.variances()
    if np.any(var <= 0):
        raise ValueError("non-positive variance in kernel")
    diag_c = np.diagonal(cov_q, axis1=1, axis2=2)
    return 0.5 * np.sum((diag_c + delta ** 2) / var + np.log(var), axis=1)


def _states(spec: GmmSpec, jump: Jump, M: int, rng: np.random.Generator) -> np.ndarray:
    if M < 1:
        raise ValueError("Monte Carlo budget must be >= 1")
    return sample_xt(spec, jump.abar_t, jump.bbar_t, rng, M)[2]


def kl_reduced_jump_states(jump: Jump, model: Model, spec: GmmSpec, x: np.ndarray) -> np.ndarray:
    mean_q, cov_q = target_moments(spec, jump, x)
    return reduced_kl_states(model.kernel(jump, x), mean_q, cov_q)


def kl_reduced_jump(jump: Jump, model: Model, spec: GmmSpec, M: int, rng: np.random.Generator):
    vals = kl_reduced_jump_states(jump, model, spec, _states(spec, jump, M, rng))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0


def kl_reduced_step(n: int, model: Model, spec: GmmSpec, schedule: Schedule, kind: ProcessKind,
                    M: int, rng: np.random.Generator):
    return kl_reduced_jump(step_jump(schedule, kind, n), model, spec, M, rng)


def kl_continuous(s: float, t: float, model: Model, spec: GmmSpec, sde: VPSDE, M: int,
                  rng: np.random.Generator):
    return kl_reduced_jump(sde.jump(s, t), model, spec, M, rng)


# ---------------------------------------------------------------------------
# paired comparisons

def _jump_key(jump: Jump) -> list[int]:
    def k(v):
        return int(v) if isinstance(v, (int, np.integer)) else 10 ** 12 + int(round(float(v) * 1e9))
    return [k(jump.s), k(jump.t)]


def reduced_states_table(models: list[Model], jumps: list[Jump], spec: GmmSpec, M: int, seed: int,
                         threads: int = 0) -> list[list[np.ndarray]]:
    """Per-model, per-jump arrays of reduced KL on states shared by all models.

    States for a jump are drawn from a generator keyed by (seed, s, t), so the
    result does not depend on ``threads``.
    """
    if not models:
        raise ValueError("no models to compare")

    def one(jump):
        x = _states(spec, jump, M, np.random.default_rng([seed, *_jump_key(jump)]))
        mean_q, cov_q = target_moments(spec, jump, x)
        return [reduced_kl_states(m.kernel(jump, x), mean_q, cov_q) for m in models]

    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_jump = list(pool.map(one, jumps))
    else:
        per_jump = [one(j) for j in jumps]
    return [[per_jump[k][i] for k in range(len(jumps))] for i in range(len(models))]


def reduced_report(per_jump: list[np.ndarray]) -> ElboReport:
    means = np.array([v.mean() for v in per_jump])
    var = sum(v.var(ddof=1) / v.size for v in per_jump)
    return ElboReport(float(means.sum()), math.sqrt(var), means, "reduced")


def paired_difference(a: list[np.ndarray], b: list[np.ndarray]) -> tuple[float, float]:
    """Mean and standard error of total(a) - total(b) on shared states."""
    diffs = [x - y for x, y in zip(a, b)]
    return (float(sum(d.mean() for d in diffs)),
            math.sqrt(sum(d.var(ddof=1) / d.size for d in diffs)))


# ---------------------------------------------------------------------------
# direct ELBO

def _gauss_logpdf(x, mean, var):
    return -0.5 * np.sum((x - mean) ** 2 / var + np.log(2 * math.pi * var), axis=1)


def elbo_direct_paths(models: list[Model], jumps: list[Jump], spec: GmmSpec, M: int,
                      rng: np.random.Generator) -> list[np.ndarray]:
    """Per-path log-ratio terms, shape (steps + 1, M) per model, on shared forward paths.

    Row 0 is the prior term log p(x_T) - log q(x_T | x_0); each following row
    is one jump in the order given (top down), the last one being log p(x_0 | x_tau1).
    """
    if M < 1:
        raise ValueError("Monte Carlo budget must be >= 1")
    if not models:
        raise ValueError("no models to evaluate")
    jumps = sorted(jumps, key=lambda j: j.t, reverse=True)
    if not jumps[-1].is_final:
        raise ValueError("the last jump must land on x_0")
    for j in jumps[:-1]:
        if j.lam2 <= 0.0:
            raise ValueError(f"jump {j.t}->{j.s} has lambda^2 = 0; the ELBO is -inf for "
                             "deterministic forward processes")
    x0 = sample_x0(spec, rng, M)
    top = jumps[0]
    x = math.sqrt(top.abar_t) * x0 + math.sqrt(top.bbar_t) * rng.standard_normal(x0.shape)
    prior_q = _gauss_logpdf(x, math.sqrt(top.abar_t) * x0, top.bbar_t)
    prior_p = _gauss_logpdf(x, 0.0, 1.0)
    out = [np.empty((len(jumps) + 1, M)) for _ in models]
    for o in out:
        o[0] = prior_p - prior_q
    for k, jump in enumerate(jumps, start=1):
        if jump.is_final:
            for o, m in zip(out, models):
                o[k] = m.kernel(jump, x).logpdf(x0)
            break
        mu = jump.tilde_mu(x, x0)
        x_new = mu + math.sqrt(jump.lam2) * rng.standard_normal(x.shape)
        lq = _gauss_logpdf(x_new, mu, jump.lam2)
        for o, m in zip(out, models):
            o[k] = m.kernel(jump, x).logpdf(x_new) - lq
        x = x_new
    return out


def direct_report(paths: np.ndarray) -> ElboReport:
    neg = -paths
    per_path = neg.sum(axis=0)
    M = per_path.size
    return ElboReport(float(per_path.mean()), float(per_path.std(ddof=1) / math.sqrt(M)),
                      neg.mean(axis=1), "direct", per_path)


def elbo_direct(model: Model, jumps: list[Jump], spec: GmmSpec, M: int,
                rng: np.random.Generator) -> ElboReport:
    return direct_report(elbo_direct_paths([model], jumps, spec, M, rng)[0])


def schedule_jumps(schedule: Schedule, kind: ProcessKind) -> list[Jump]:
    return [step_jump(schedule, kind, n) for n in range(schedule.N, 0, -1)]


# ---------------------------------------------------------------------------
# tables

def compare(models: list[Model], jumps: list[Jump], spec: GmmSpec, M: int, seed: int,
            mode: str = "reduced", threads: int = 0, trajectory: str = "") -> list[dict]:
    """One row per model, evaluated on common random numbers."""
    if not models:
        raise ValueError("no models to compare")
    if mode == "reduced":
        reports = [reduced_report(v) for v in
                   reduced_states_table(models, jumps, spec, M, seed, threads)]
    elif mode == "direct":
        paths = elbo_direct_paths(models, jumps, spec, M, np.random.default_rng(seed))
        reports = [direct_report(p) for p in paths]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return [{"model": m.name, "mode": mode, "K": len(jumps), "value": r.total,
             "stderr": r.stderr, "seed": seed, "M": M, "trajectory": trajectory}
            for m, r in zip(models, reports)]


def write_rows(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
