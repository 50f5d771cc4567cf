"""Ancestral sampling along trajectories, continuous-grid sampling and an Euler-Maruyama baseline."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimators import Model, clip_variance, continuous_diag_var, jump_mean
from .gmm import GmmSpec, marginal_logpdf, responsibilities, sample_x0
from .schedule import VPSDE

SHARD = 4096  # chains per rng stream; fixed so results do not depend on thread count


class SamplingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class SampleRun:
    x0: np.ndarray
    seed: int
    trajectory: list
    model: str
    states: list | None = None
    meta: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.x0.shape[1])])
            for row in self.x0:
                w.writerow([repr(float(v)) for v in row])

    def sidecar(self) -> dict:
        return {"seed": self.seed, "trajectory": [float(t) if isinstance(t, float) else int(t)
                                                  for t in self.trajectory],
                "model": self.model, "batch": int(self.x0.shape[0]), **self.meta}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({**self.sidecar(), "samples": self.x0.tolist()}, fh)


def _provider_dim(model) -> int:
    prov = getattr(model, "provider", model)
    if hasattr(prov, "spec"):
        return prov.spec.d
    return prov.eps_bundle.d


def _shards(batch: int, seed: int):
    return [(i, min(SHARD, batch - lo)) for i, lo in enumerate(range(0, batch, SHARD))]


def _run_sharded(fn, batch: int, seed: int, threads: int, record: bool):
    shards = _shards(batch, seed)
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda s: fn(*s), shards))
    else:
        parts = [fn(*s) for s in shards]
    x = np.concatenate([p[0] for p in parts], axis=0)
    states = None
    if record:
        states = [np.concatenate([p[1][k] for p in parts], axis=0) for k in range(len(parts[0][1]))]
    return x, states


def _check(x, step):
    if not np.all(np.isfinite(x)):
        raise SamplingError(step, "non-finite state")


def ancestral_sample(model: Model, trajectory, batch: int, seed: int, clip_y: float | None = None,
                     data_scale: float = 1.0, final_noise: bool = False, threads: int = 0,
                     record: bool = False) -> SampleRun:
    """Reverse a trajectory from x_T ~ N(0, I).

    ``trajectory`` is a TrajectorySpec or a list of jumps. The jump landing on
    x_0 emits its mean unless ``final_noise`` is set. ``clip_y`` clips the
    kernel of the jump landing on the first retained timestep.
    """
    jumps = trajectory.top_down() if hasattr(trajectory, "top_down") else sorted(
        trajectory, key=lambda j: j.t, reverse=True)
    if batch < 1:
        raise ValueError("batch must be positive")
    d = _provider_dim(model)

    def shard(idx, size):
        rng = np.random.default_rng([seed, idx])
        x = rng.standard_normal((size, d))
        states = [x] if record else []
        for k, jump in enumerate(jumps):
            step = int(jump.t) if isinstance(jump.t, (int, np.integer)) else jump.t
            kern = model.kernel(jump, x)
            if clip_y is not None and k == len(jumps) - 2:
                kern = clip_variance(kern, clip_y, data_scale)
            if jump.is_final and not final_noise:
                x = kern.mean
            else:
                x = kern.sample(rng)
            _check(x, step)
            if record:
                states.append(x)
        return x, states

    x, states = _run_sharded(shard, batch, seed, threads, record)
    traj = list(getattr(trajectory, "tau", [j.t for j in jumps][::-1]))
    return SampleRun(x, seed, traj, model.name, states,
                     {"final_noise": final_noise, "clip_y": clip_y})


def continuous_sample(provider, sde: VPSDE, grid, batch: int, seed: int, corrected: bool,
                      final_noise: bool = False, threads: int = 0) -> SampleRun:
    """Reverse the VP SDE along ``grid`` (decreasing from T) with Gaussian kernels.

    Variances use the continuous-time closed form: corrected (residual moment)
    or uncorrected (second moment minus squared mean).
    """
    grid = [float(t) for t in grid]
    if len(grid) < 2 or any(b >= a for a, b in zip(grid, grid[1:])) or grid[-1] < 0:
        raise ValueError("grid must decrease strictly from T to a time >= 0")
    if abs(grid[0] - sde.T) > 1e-12:
        raise ValueError("grid must start at T")
    d = provider.spec.d if hasattr(provider, "spec") else provider.eps_bundle.d
    pairs = list(zip(grid[1:], grid[:-1]))

    def shard(idx, size):
        rng = np.random.default_rng([seed, idx])
        x = rng.standard_normal((size, d))
        for k, (s, t) in enumerate(pairs):
            jump = sde.jump(s, t)
            m = provider.predict(x, t, jump.abar_t, jump.bbar_t)
            mean = jump_mean(jump, x, m.e)
            if k == len(pairs) - 1 and not final_noise:
                x = mean
            else:
                var = continuous_diag_var(provider, sde, s, t, x, corrected)
                x = mean + np.sqrt(var) * rng.standard_normal(x.shape)
            _check(x, k)
        return x, []

    x, _ = _run_sharded(shard, batch, seed, threads, False)
    return SampleRun(x, seed, grid, f"{getattr(provider, 'name', 'model')}:"
                     f"{'npr' if corrected else 'sn'}:continuous", None,
                     {"final_noise": final_noise})


def euler_maruyama(provider, sde: VPSDE, K: int, batch: int, seed: int, t_end: float = 1e-3,
                   noise_scale: float = 1.0, x_init: np.ndarray | None = None) -> SampleRun:
    """Reverse-time EM: x <- x - [f x - g^2 score] dt + noise_scale * g sqrt(dt) z.

    ``noise_scale=0`` drops the Brownian term, leaving a deterministic map of ``x_init``.
    """
    if K < 1:
        raise ValueError("need at least one step")
    rng = np.random.default_rng(seed)
    d = provider.spec.d if hasattr(provider, "spec") else provider.eps_bundle.d
    x = rng.standard_normal((batch, d)) if x_init is None else np.array(x_init, dtype=np.float64)
    ts = np.linspace(sde.T, t_end, K + 1)
    for k in range(K):
        t, dt = ts[k], ts[k] - ts[k + 1]
        e = provider.predict(x, float(t), sde.alpha(t), sde.beta(t)).e
        score = -e / math.sqrt(sde.beta(t))
        drift = float(sde.f(t)) * x - float(sde.g2(t)) * score
        x = x - drift * dt
        if noise_scale:
            x = x + noise_scale * math.sqrt(float(sde.g2(t)) * dt) * rng.standard_normal(x.shape)
        _check(x, k)
    return SampleRun(x, seed, ts.tolist(), f"{getattr(provider, 'name', 'model')}:em", None,
                     {"noise_scale": noise_scale})


def sample_metrics(x: np.ndarray, spec: GmmSpec) -> dict:
    """Moment, component-weight and log-likelihood discrepancies with standard errors."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    if B < 2:
        raise ValueError("need at least two samples")
    mean = x.mean(0)
    centred = x - mean
    cov = centred.T @ centred / (B - 1)
    true_cov = spec.cov()
    quad = centred[:, :, None] * centred[:, None, :]
    cov_se = quad.std(axis=0, ddof=1) / math.sqrt(B)
    resp = responsibilities(spec, x)
    ll = marginal_logpdf(spec, 1.0, 0.0, x)
    return {
        "mean_error": np.abs(mean - spec.mean()).tolist(),
        "mean_se": np.sqrt(np.diag(cov) / B).tolist(),
        "cov_error": np.abs(cov - true_cov).tolist(),
        "cov_se": cov_se.tolist(),
        "weight_error": np.abs(resp.mean(0) - spec.weights).tolist(),
        "weight_se": (resp.std(axis=0, ddof=1) / math.sqrt(B)).tolist(),
        "loglik": float(ll.mean()),
        "loglik_se": float(ll.std(ddof=1) / math.sqrt(B)),
        "batch": B,
    }


def reference_loglik(spec: GmmSpec, M: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo E_q[log q(x0)] with its standard error."""
    ll = marginal_logpdf(spec, 1.0, 0.0, sample_x0(spec, rng, M))
    return float(ll.mean()), float(ll.std(ddof=1) / math.sqrt(M))
