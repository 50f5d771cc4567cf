"""Forward-process quantities for discrete schedules and the VP SDE.

Timesteps are 1-indexed: ``alpha_bar(n)`` for ``n`` in ``1..N`` with the
boundary convention ``alpha_bar(0) = 1`` and ``beta_bar(0) = 0``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Test hook for mutation checks (see ``dpm-covlab verify``); never set in normal use.
FAULTS: set[str] = set()


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    beta: np.ndarray
    kind: str = "explicit"
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise ScheduleError("schedule needs at least one timestep")
        if not np.all(np.isfinite(beta)) or np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ScheduleError("every beta_n must lie in (0, 1)")
        if np.any(np.diff(beta) < 0.0):
            raise ScheduleError("beta_n must be non-decreasing in n")
        beta.setflags(write=False)
        abar = np.cumprod(1.0 - beta)
        abar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bars", abar)

    @property
    def N(self) -> int:
        return int(self.beta.size)

    def alpha_bar(self, n: int) -> float:
        self._check(n, allow_zero=True)
        return 1.0 if n == 0 else float(self.alpha_bars[n - 1])

    def beta_bar(self, n: int) -> float:
        self._check(n, allow_zero=True)
        return 0.0 if n == 0 else float(1.0 - self.alpha_bars[n - 1])

    def alpha(self, n: int) -> float:
        self._check(n)
        return 1.0 - float(self.beta[n - 1])

    def beta_tilde(self, n: int) -> float:
        self._check(n)
        return self.beta_bar(n - 1) / self.beta_bar(n) * float(self.beta[n - 1])

    def _check(self, n: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= n <= self.N:
            raise ScheduleError(f"timestep {n} outside [{lo}, {self.N}]")

    def to_json(self) -> dict:
        return {"kind": self.kind, "beta": [float(b) for b in self.beta]}

    @classmethod
    def from_json(cls, obj: dict) -> "Schedule":
        kind = obj.get("kind", "explicit")
        if kind == "linear" and "beta" not in obj:
            return build_discrete(linear=int(obj["N"]))
        return cls(np.asarray(obj["beta"], dtype=np.float64), kind=kind)

    def digest(self) -> str:
        payload = json.dumps([float(b) for b in self.beta]).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def build_discrete(linear: int | None = None, beta: Sequence[float] | None = None) -> Schedule:
    """Build a linear schedule of ``linear`` steps or an explicit one from ``beta``.

    The linear endpoints ``1e-4`` and ``0.02`` are multiplied by ``1000 / N``
    so that the total injected noise does not depend on ``N``. That rule needs
    ``N > 20``; smaller ``N`` must be given as an explicit list.
    """
    if (linear is None) == (beta is None):
        raise ScheduleError("give exactly one of linear=N or beta=[...]")
    if linear is not None:
        if linear < 1:
            raise ScheduleError("N must be >= 1")
        scale = 1000.0 / linear
        return Schedule(np.linspace(1e-4 * scale, 0.02 * scale, linear), kind="linear")
    return Schedule(np.asarray(beta, dtype=np.float64), kind="explicit")


@dataclass(frozen=True)
class ProcessKind:
    """Which member of the lambda-indexed forward family is used."""

    tag: str = "ddpm"
    lam2: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.tag not in ("ddpm", "ddim", "custom"):
            raise ValueError(f"unknown process kind {self.tag!r}")
        if (self.tag == "custom") != (self.lam2 is not None):
            raise ValueError("custom kinds (and only those) carry a lambda^2 vector")

    def validate(self, schedule: Schedule) -> None:
        if self.tag != "custom":
            return
        if len(self.lam2) != schedule.N:
            raise ValueError("custom lambda^2 vector must have length N")
        for n, l2 in enumerate(self.lam2, start=1):
            bt = schedule.beta_tilde(n)
            if not 0.0 <= l2 <= bt * (1 + 1e-12):
                raise ValueError(f"lambda_{n}^2={l2} outside [0, beta_tilde_n={bt}]")


DDPM = ProcessKind("ddpm")
DDIM = ProcessKind("ddim")


def lambda_sq(schedule: Schedule, kind: ProcessKind, n: int) -> float:
    schedule._check(n)
    if kind.tag == "ddpm":
        return schedule.beta_tilde(n)
    if kind.tag == "ddim":
        return 0.0
    return float(kind.lam2[n - 1])


def gamma_coef(abar_prev: float, bbar_prev: float, abar: float, bbar: float, lam2: float) -> float:
    """Coefficient of x0 in the forward posterior mean."""
    rad = bbar_prev - lam2
    if rad < 0.0:
        if rad > -1e-15:
            rad = 0.0
        else:
            raise ValueError(f"lambda^2={lam2} exceeds beta_bar_prev={bbar_prev}")
    g = math.sqrt(abar_prev) - math.sqrt(rad) * math.sqrt(abar / bbar)
    if "gamma_sign" in FAULTS:
        g = -g
    return g


def gamma(schedule: Schedule, n: int, lam2: float) -> float:
    return gamma_coef(schedule.alpha_bar(n - 1), schedule.beta_bar(n - 1),
                      schedule.alpha_bar(n), schedule.beta_bar(n), lam2)


@dataclass(frozen=True)
class Jump:
    """One reverse transition from time ``t`` down to time ``s < t``.

    Carries the marginal coefficients at both ends and the forward-posterior
    variance ``lam2``; adjacent discrete steps, trajectory jumps and
    continuous-time jumps are all expressed this way.
    """

    s: float
    t: float
    abar_s: float
    bbar_s: float
    abar_t: float
    bbar_t: float
    lam2: float

    @property
    def gamma(self) -> float:
        return gamma_coef(self.abar_s, self.bbar_s, self.abar_t, self.bbar_t, self.lam2)

    @property
    def cov_coef(self) -> float:
        """Scale mapping Cov[eps | x_t] to the x0-driven part of Cov[x_s | x_t]."""
        return self.gamma ** 2 * self.bbar_t / self.abar_t

    @property
    def is_final(self) -> bool:
        return self.bbar_s == 0.0

    def tilde_mu(self, x_t: np.ndarray, x0: np.ndarray) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        x0 = np.asarray(x0, dtype=np.float64)
        if x_t.shape != x0.shape:
            raise ValueError(f"shape mismatch: x_t {x_t.shape} vs x0 {x0.shape}")
        rad = max(self.bbar_s - self.lam2, 0.0)
        return (math.sqrt(self.abar_s) * x0
                + math.sqrt(rad) * (x_t - math.sqrt(self.abar_t) * x0) / math.sqrt(self.bbar_t))


def make_jump(schedule: Schedule, s: int, t: int, lam2: float) -> Jump:
    if not 0 <= s < t <= schedule.N:
        raise ScheduleError(f"invalid jump {t} -> {s}")
    return Jump(s, t, schedule.alpha_bar(s), schedule.beta_bar(s),
                schedule.alpha_bar(t), schedule.beta_bar(t), float(lam2))


def step_jump(schedule: Schedule, kind: ProcessKind, n: int) -> Jump:
    """The adjacent transition n -> n-1."""
    return make_jump(schedule, n - 1, n, lambda_sq(schedule, kind, n))


def tilde_mu(schedule: Schedule, n: int, lam2: float, x_n, x0) -> np.ndarray:
    return make_jump(schedule, n - 1, n, lam2).tilde_mu(x_n, x0)


def forward_sample(schedule: Schedule, n: int, x0: np.ndarray, rng: np.random.Generator):
    schedule._check(n)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    x_n = math.sqrt(schedule.alpha_bar(n)) * x0 + math.sqrt(schedule.beta_bar(n)) * eps
    return x_n, eps


@dataclass(frozen=True)
class VPSDE:
    """dx = -beta(t)/2 x dt + sqrt(beta(t)) dw with beta linear on [0, T]."""

    beta0: float = 0.1
    beta1: float = 20.0
    T: float = 1.0

    def beta_fn(self, t):
        return self.beta0 + (self.beta1 - self.beta0) * np.asarray(t) / self.T

    def f(self, t):
        return -0.5 * self.beta_fn(t)

    def g2(self, t):
        return self.beta_fn(t)

    def _integral(self, s: float, t: float) -> float:
        k = (self.beta1 - self.beta0) / self.T
        return self.beta0 * (t - s) + 0.5 * k * (t * t - s * s)

    def alpha(self, t: float, s: float = 0.0) -> float:
        """alpha_{t|s}."""
        return math.exp(-self._integral(s, t))

    def beta(self, t: float, s: float = 0.0) -> float:
        """beta_{t|s}; the VP choice makes it 1 - alpha_{t|s}."""
        return -math.expm1(-self._integral(s, t))

    def coeffs(self, s: float, t: float) -> tuple[float, float, float]:
        """(alpha_{t|s}, beta_{t|s}, beta_tilde_{s|t})."""
        if not 0.0 <= s < t <= self.T:
            raise ValueError(f"need 0 <= s < t <= T, got s={s}, t={t}")
        a_ts = self.alpha(t, s)
        b_ts = self.beta(t, s)
        bt = self.beta(s) / self.beta(t) * b_ts
        return a_ts, b_ts, bt

    def jump(self, s: float, t: float) -> Jump:
        _, _, bt = self.coeffs(s, t)
        return Jump(s, t, self.alpha(s), self.beta(s), self.alpha(t), self.beta(t), bt)

    def to_schedule(self, N: int) -> Schedule:
        """Discrete schedule with beta_n = 1 - alpha_{t_n | t_{n-1}} on a uniform grid."""
        ts = np.linspace(0.0, self.T, N + 1)
        beta = np.array([self.beta(ts[i + 1], ts[i]) for i in range(N)])
        return Schedule(beta, kind="explicit")

    def grid(self, N: int) -> np.ndarray:
        return np.linspace(0.0, self.T, N + 1)


def sde_coeffs(sde: VPSDE, s: float, t: float) -> tuple[float, float, float]:
    return sde.coeffs(s, t)
