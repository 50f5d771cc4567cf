"""Closed-form oracle for mixture-of-Gaussian data.

Data: q(x0) = sum_j w_j N(mu_j, c I). Under q(x | x0) = N(sqrt(abar) x0, bbar I)
the posterior q(x0 | x) is again a mixture with shared variance
c bbar / (c abar + bbar), which gives every conditional noise moment exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax


@dataclass(frozen=True)
class GmmSpec:
    weights: np.ndarray
    means: np.ndarray
    var: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if mu.shape[0] != w.size:
            raise ValueError(f"{w.size} weights but {mu.shape[0]} means")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1 (sum={w.sum()!r})")
        if not (self.var > 0 and math.isfinite(self.var)):
            raise ValueError("component variance must be positive")
        w.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "var", float(self.var))

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def J(self) -> int:
        return self.means.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        m = self.mean()
        centred = self.means - m
        return self.var * np.eye(self.d) + (self.weights[:, None] * centred).T @ centred

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "var": self.var}

    @classmethod
    def from_json(cls, obj: dict) -> "GmmSpec":
        return cls(np.asarray(obj["weights"]), np.asarray(obj["means"]), float(obj["var"]))


def unit_gaussian(d: int = 1) -> GmmSpec:
    return GmmSpec(np.ones(1), np.zeros((1, d)), 1.0)


@dataclass
class GmmPosterior:
    eta: np.ndarray     # (B, J) component responsibilities
    nu: np.ndarray      # (B, J, d) component posterior means
    pvar: float         # shared component posterior variance


def _as_batch(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != d:
        raise ValueError(f"state has dimension {x.shape[-1]}, spec has {d}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state")
    return x


def posterior(spec: GmmSpec, abar: float, bbar: float, x: np.ndarray) -> GmmPosterior:
    if not (math.isfinite(abar) and math.isfinite(bbar)) or abar <= 0 or bbar < 0:
        raise ValueError(f"invalid noise level abar={abar}, bbar={bbar}")
    x = _as_batch(x, spec.d)
    c = spec.var
    denom = c * abar + bbar
    with np.errstate(divide="ignore"):
        logw = np.log(spec.weights)
    xi = logw - abar / denom * 0.5 * np.sum(spec.means ** 2, axis=1)
    phi = xi[None, :] + math.sqrt(abar) / denom * (x @ spec.means.T)
    eta = softmax(phi, axis=1)
    nu = (bbar * spec.means[None, :, :] + c * math.sqrt(abar) * x[:, None, :]) / denom
    return GmmPosterior(eta, nu, c * bbar / denom)


def x0_moments(spec: GmmSpec, abar: float, bbar: float, x: np.ndarray):
    """E[x0|x], diag Cov[x0|x] and the full Cov[x0|x], batched over rows of x."""
    post = posterior(spec, abar, bbar, x)
    mean = np.einsum("bj,bjd->bd", post.eta, post.nu)
    dev = post.nu - mean[:, None, :]
    between = np.einsum("bj,bjd,bje->bde", post.eta, dev, dev)
    cov = between + post.pvar * np.eye(spec.d)[None]
    return mean, np.diagonal(cov, axis1=1, axis2=2).copy(), cov


def eps_moments(spec: GmmSpec, abar: float, bbar: float, x: np.ndarray):
    """E[eps|x], E[eps^2|x] (elementwise) and Cov[eps|x]."""
    x = _as_batch(x, spec.d)
    m, _, cov = x0_moments(spec, abar, bbar, x)
    e = (x - math.sqrt(abar) * m) / math.sqrt(bbar)
    cov_eps = abar / bbar * cov
    e2 = np.diagonal(cov_eps, axis1=1, axis2=2) + e ** 2
    return e, e2, cov_eps


def marginal_logpdf(spec: GmmSpec, abar: float, bbar: float, x: np.ndarray) -> np.ndarray:
    x = _as_batch(x, spec.d)
    v = spec.var * abar + bbar
    diff = x[:, None, :] - math.sqrt(abar) * spec.means[None, :, :]
    comp = -0.5 * np.sum(diff ** 2, axis=2) / v - 0.5 * spec.d * math.log(2 * math.pi * v)
    with np.errstate(divide="ignore"):
        logw = np.log(spec.weights)
    return logsumexp(comp + logw[None, :], axis=1)


def responsibilities(spec: GmmSpec, x0: np.ndarray) -> np.ndarray:
    """Component posterior of clean data points."""
    return posterior(spec, 1.0, 0.0, x0).eta


def sample_x0(spec: GmmSpec, rng: np.random.Generator, batch: int) -> np.ndarray:
    comp = rng.choice(spec.J, size=batch, p=spec.weights)
    return spec.means[comp] + math.sqrt(spec.var) * rng.standard_normal((batch, spec.d))


def sample_xt(spec: GmmSpec, abar: float, bbar: float, rng: np.random.Generator, batch: int):
    """Draw (x0, eps, x) from the joint q(x0, x) at noise level (abar, bbar)."""
    x0 = sample_x0(spec, rng, batch)
    eps = rng.standard_normal(x0.shape)
    return x0, eps, math.sqrt(abar) * x0 + math.sqrt(bbar) * eps
