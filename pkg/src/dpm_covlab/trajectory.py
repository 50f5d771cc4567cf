"""Timestep subsets: even spacing, restriction of the forward family, DP-optimal choice."""

from __future__ import annotations

import csv
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .elbo import reduced_kl_states, target_moments
from .estimators import Model
from .gmm import GmmSpec, sample_xt
from .schedule import Jump, ProcessKind, Schedule, make_jump


@dataclass(frozen=True)
class TrajectorySpec:
    tau: tuple[int, ...]
    jumps: tuple[Jump, ...] = ()

    def __post_init__(self):
        tau = tuple(int(t) for t in self.tau)
        if not tau or tau[0] < 1 or any(b <= a for a, b in zip(tau, tau[1:])):
            raise ValueError(f"trajectory must be strictly increasing and start >= 1: {tau}")
        object.__setattr__(self, "tau", tau)

    @property
    def K(self) -> int:
        return len(self.tau)

    @property
    def lambda_sq(self) -> list[float]:
        return [j.lam2 for j in self.jumps]

    @property
    def gammas(self) -> list[float]:
        return [j.gamma for j in self.jumps]

    def top_down(self) -> list[Jump]:
        return sorted(self.jumps, key=lambda j: j.t, reverse=True)

    def to_json(self) -> list[int]:
        return list(self.tau)


def even_trajectory(N: int, K: int) -> list[int]:
    """tau_k = floor(k N / K); any repeat is pushed one step past its predecessor."""
    if not 1 <= K <= N:
        raise ValueError(f"need 1 <= K <= N, got K={K}, N={N}")
    tau = []
    for k in range(1, K + 1):
        t = (k * N) // K
        if tau and t <= tau[-1]:
            t = tau[-1] + 1
        tau.append(t)
    if tau[-1] != N:
        raise ValueError("even trajectory failed to end at N")
    return tau


def restricted_lambda_sq(schedule: Schedule, kind: ProcessKind, s: int, t: int) -> float:
    if kind.tag == "ddim" or s == 0:
        return 0.0
    if kind.tag == "ddpm":
        return schedule.beta_bar(s) / schedule.beta_bar(t) * (
            1.0 - schedule.alpha_bar(t) / schedule.alpha_bar(s))
    if t == s + 1:
        return float(kind.lam2[t - 1])
    raise ValueError("custom lambda^2 vectors are only defined on adjacent steps")


def restrict(schedule: Schedule, kind: ProcessKind, tau) -> TrajectorySpec:
    tau = tuple(int(t) for t in tau)
    if tau[-1] != schedule.N:
        raise ValueError(f"trajectory must end at N={schedule.N}")
    prev = (0,) + tau[:-1]
    jumps = tuple(make_jump(schedule, s, t, restricted_lambda_sq(schedule, kind, s, t))
                  for s, t in zip(prev, tau))
    return TrajectorySpec(tau, jumps)


# ---------------------------------------------------------------------------
# cost matrix

def prior_term(schedule: Schedule, spec: GmmSpec) -> float:
    """E_{x0} KL(q(x_N | x0) || N(0, I)), identical for every trajectory."""
    ab, bb = schedule.alpha_bar(schedule.N), schedule.beta_bar(schedule.N)
    second = spec.var + float(np.sum(spec.weights[:, None] * spec.means ** 2) / spec.d)
    return 0.5 * spec.d * (bb + ab * second - 1.0 - math.log(bb))


class CostMatrix:
    """Lazily evaluated per-jump negative-ELBO terms L[s][t] for t -> s.

    Entries are E_{x_t}[ E_{x0|x_t} KL(q(x_s|x_t,x0) || p(x_s|x_t)) ] for s >= 1
    and E_{x_t}[ E_{x0|x_t} -log p(x0|x_t) ] for s = 0, with the inner
    expectations taken in closed form from the oracle. Column t shares one
    draw of x_t across all s < t; the draw is keyed by (seed, t), so entries do
    not depend on evaluation order or thread count.
    """

    def __init__(self, model: Model, schedule: Schedule, kind: ProcessKind, spec: GmmSpec,
                 M: int = 2000, seed: int = 0):
        if M < 1:
            raise ValueError("Monte Carlo budget must be >= 1")
        if kind.tag == "ddim":
            raise ValueError("costs are infinite for the deterministic forward process")
        self.model, self.schedule, self.kind, self.spec = model, schedule, kind, spec
        self.M, self.seed = M, seed
        N = schedule.N
        self.value = np.full((N + 1, N + 1), np.inf)
        self.stderr = np.full((N + 1, N + 1), np.nan)
        self._done = np.zeros(N + 1, dtype=bool)
        self.prior = prior_term(schedule, spec)

    @property
    def N(self) -> int:
        return self.schedule.N

    def _column(self, t: int):
        sch = self.schedule
        rng = np.random.default_rng([self.seed, t])
        x = sample_xt(self.spec, sch.alpha_bar(t), sch.beta_bar(t), rng, self.M)[2]
        m = self.model.moments(make_jump(sch, t - 1, t, 0.0), x)
        d = self.spec.d
        vals, ses = np.full(t, np.inf), np.full(t, np.nan)
        for s in range(t):
            jump = make_jump(sch, s, t, restricted_lambda_sq(sch, self.kind, s, t))
            mean_q, cov_q = target_moments(self.spec, jump, x)
            per = reduced_kl_states(self.model.kernel(jump, x, m), mean_q, cov_q)
            if s == 0:
                per = per + 0.5 * d * math.log(2 * math.pi)
            else:
                per = per - 0.5 * d * (1.0 + math.log(jump.lam2))
            vals[s] = per.mean()
            ses[s] = per.std(ddof=1) / math.sqrt(self.M) if self.M > 1 else 0.0
        return t, vals, ses

    def _store(self, res):
        t, vals, ses = res
        self.value[:t, t] = vals
        self.stderr[:t, t] = ses
        self._done[t] = True

    def get(self, s: int, t: int) -> float:
        if not 0 <= s < t <= self.N:
            return math.inf
        if not self._done[t]:
            self._store(self._column(t))
        return float(self.value[s, t])

    def fill(self, threads: int = 0) -> np.ndarray:
        todo = [t for t in range(1, self.N + 1) if not self._done[t]]
        if threads and threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                for res in pool.map(self._column, todo):
                    self._store(res)
        else:
            for t in todo:
                self._store(self._column(t))
        return self.value

    def nelbo(self, tau) -> tuple[float, float]:
        """-L_elbo of a trajectory with its standard error (columns are independent)."""
        prev = [0] + list(tau[:-1])
        total = self.prior + sum(self.get(s, t) for s, t in zip(prev, tau))
        se = math.sqrt(sum(self.stderr[s, t] ** 2 for s, t in zip(prev, tau)))
        return total, se

    def dump_csv(self, path) -> None:
        self.fill()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "t", "value", "stderr"])
            for t in range(1, self.N + 1):
                for s in range(t):
                    w.writerow([s, t, repr(float(self.value[s, t])), repr(float(self.stderr[s, t]))])


def cost_matrix(model: Model, schedule: Schedule, kind: ProcessKind, spec: GmmSpec, M: int = 2000,
                seed: int = 0, threads: int = 0) -> CostMatrix:
    cm = CostMatrix(model, schedule, kind, spec, M, seed)
    if threads:
        cm.fill(threads)
    return cm


# ---------------------------------------------------------------------------
# dynamic programming

def _cost_fn(L):
    if isinstance(L, CostMatrix):
        return L.get, L.N
    arr = np.asarray(L, dtype=np.float64)
    return (lambda s, t: float(arr[s, t])), arr.shape[0] - 1


def optimal_trajectory_dp(L, K: int) -> list[int]:
    """Minimise sum_k L[tau_{k-1}][tau_k] over trajectories 0 = tau_0 < ... < tau_K = N.

    Ties go to the smaller predecessor timestep.
    """
    cost, N = _cost_fn(L)
    if not 1 <= K <= N:
        raise ValueError(f"infeasible number of jumps K={K} for N={N}")
    D = np.full((K + 1, N + 1), np.inf)
    arg = np.full((K + 1, N + 1), -1, dtype=np.int64)
    D[0, 0] = 0.0
    for k in range(1, K + 1):
        # the k-th jump ends at t; at least K - k steps must remain above it
        lo_t, hi_t = k, N - (K - k)
        for t in range(lo_t, hi_t + 1):
            if k == K and t != N:
                continue
            best, best_s = math.inf, -1
            for s in range(k - 1, t):
                if not math.isfinite(D[k - 1, s]):
                    continue
                c = D[k - 1, s] + cost(s, t)
                if c < best:
                    best, best_s = c, s
            D[k, t], arg[k, t] = best, best_s
    if not math.isfinite(D[K, N]):
        raise ValueError("no finite-cost trajectory")
    tau, t = [], N
    for k in range(K, 0, -1):
        tau.append(t)
        t = int(arg[k, t])
    return tau[::-1]


def trajectory_cost(L, tau) -> float:
    cost, _ = _cost_fn(L)
    prev = [0] + list(tau[:-1])
    return sum(cost(s, t) for s, t in zip(prev, tau))


def brute_force_trajectory(L, K: int) -> tuple[list[int], float]:
    """Exhaustive search; ties resolved like the DP (lexicographically smallest)."""
    cost, N = _cost_fn(L)
    best, best_tau = math.inf, None
    for head in itertools.combinations(range(1, N), K - 1):
        tau = list(head) + [N]
        c = trajectory_cost(L, tau)
        if c < best:
            best, best_tau = c, tau
    return best_tau, best


def dump_trajectory(tau, path) -> None:
    with open(path, "w") as fh:
        json.dump([int(t) for t in tau], fh)
