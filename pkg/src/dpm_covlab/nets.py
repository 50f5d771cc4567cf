"""Shared-trunk MLP with a noise head and a nonnegative auxiliary head.

Everything is plain numpy with hand-written backprop. The auxiliary head
predicts either E[eps^2 | x] ("sn") or E[(eps - eps_hat)^2 | x] ("npr") and is
trained in a second stage with the trunk and noise head frozen.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gmm import GmmSpec, sample_x0
from .schedule import Schedule

CHECKPOINT_VERSION = 1
AUX_KINDS = ("none", "sn", "npr")


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def time_embedding(t_in: np.ndarray, dim: int, max_freq: float = 50.0) -> np.ndarray:
    """Sinusoidal features of a (B,) vector of times already scaled to [0, 1000].

    Angular frequencies are geometric between 1 and ``max_freq`` per unit of
    t_in / 1000, so neighbouring steps get nearby features and a small MLP can
    share what it learns across steps.
    """
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    half = dim // 2
    freqs = np.geomspace(1.0, max_freq, half)
    arg = np.asarray(t_in, dtype=np.float64)[:, None] / 1000.0 * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _silu(z):
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return z * sig, sig


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _layer_stack(prefix: str, n_hidden: int, activated_last: bool):
    """Names of (weight, bias, activated) triples for a stack of dense layers."""
    layers = [(f"{prefix}{i}W", f"{prefix}{i}b", True) for i in range(n_hidden)]
    if not activated_last:
        layers.append((f"{prefix}W", f"{prefix}b", False))
    return layers


@dataclass
class PredictorBundle:
    """Trunk of three activated layers plus two heads.

    The noise head reads the trunk features; the aux head reads the features
    concatenated with the trunk input (state and time embedding). ``head_hidden
    = 0`` makes both heads affine; a positive value inserts one activated
    hidden layer of that width into each head.
    """

    params: dict
    d: int
    e: int = 32
    h: int = 128
    head_hidden: int = 0
    aux_kind: str = "none"
    activation: str = "silu"
    meta: dict = field(default_factory=dict)

    @property
    def trunk_layers(self):
        return [(f"W{i}", f"b{i}", True) for i in range(3)]

    @property
    def eps_layers(self):
        return _layer_stack("He", 1 if self.head_hidden else 0, False)

    @property
    def aux_layers(self):
        return _layer_stack("Ha", 1 if self.head_hidden else 0, False)

    def group(self, which: str) -> tuple[str, ...]:
        layers = {"trunk": self.trunk_layers, "eps": self.eps_layers, "aux": self.aux_layers}[which]
        return tuple(n for w, b, _ in layers for n in (w, b))

    @property
    def param_order(self) -> tuple[str, ...]:
        return self.group("trunk") + self.group("eps") + self.group("aux")

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, e: int = 32, h: int = 128,
             head_hidden: int = 0, activation: str = "silu", zero_heads: bool = True,
             meta: dict | None = None):
        if activation not in ("silu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        b = cls({}, d, e, h, head_hidden, "none", activation, dict(meta or {}))
        dims = [d + e, h, h, h]
        for i, (w, bias, _) in enumerate(b.trunk_layers):
            b.params[w] = rng.standard_normal((dims[i], dims[i + 1])) / math.sqrt(dims[i])
            b.params[bias] = np.zeros(dims[i + 1])
        for layers, first_in in ((b.eps_layers, h), (b.aux_layers, h + d + e)):
            fan_in = first_in
            for w, bias, hidden in layers:
                fan_out = head_hidden if hidden else d
                if hidden or not zero_heads:
                    b.params[w] = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
                else:
                    b.params[w] = np.zeros((fan_in, fan_out))
                b.params[bias] = np.zeros(fan_out)
                fan_in = fan_out
        return b

    def copy(self) -> "PredictorBundle":
        return PredictorBundle({k: v.copy() for k, v in self.params.items()}, self.d, self.e,
                               self.h, self.head_hidden, self.aux_kind, self.activation,
                               dict(self.meta))

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # time handling -------------------------------------------------------
    def time_input(self, t, abar=None, bbar=None) -> np.ndarray:
        """Scalar fed to the time embedding, in [0, 1000].

        With ``time_feature == "logsnr"`` (default) the input is the log
        signal-to-noise ratio log(abar / bbar), rescaled so the training
        schedule spans [0, 1000]; discrete steps look it up in a stored table
        and continuous callers pass the noise level. ``"index"`` uses
        1000 * n / N or 1000 * t / T directly.
        """
        meta = self.meta
        t = np.asarray(t)
        if meta.get("time_feature", "index") == "logsnr":
            if abar is None:
                if np.issubdtype(t.dtype, np.floating):
                    raise ValueError("continuous times need the noise level for log-SNR input")
                table = np.asarray(meta["logsnr"])
                if np.any(t < 1) or np.any(t > table.size):
                    raise ValueError(f"timestep outside [1, {table.size}]")
                ls = table[t.astype(np.int64) - 1]
            else:
                ls = np.log(np.asarray(abar, dtype=np.float64) / np.asarray(bbar, dtype=np.float64))
            lo, hi = meta["logsnr_range"]
            return np.broadcast_to(1000.0 * (hi - ls) / (hi - lo), t.shape).astype(np.float64)
        if meta.get("domain", "discrete") == "continuous" or np.issubdtype(t.dtype, np.floating):
            return 1000.0 * t.astype(np.float64) / float(meta.get("T", 1.0))
        N = meta.get("N")
        if N is None:
            raise ValueError("discrete bundle has no N in its metadata")
        if np.any(t < 1) or np.any(t > N):
            raise ValueError(f"timestep outside [1, {N}]")
        return 1000.0 * t.astype(np.float64) / N

    # forward / backward ---------------------------------------------------
    def _stack_forward(self, layers, a):
        cache = []
        for w, b, activated in layers:
            z = a @ self.params[w] + self.params[b]
            if activated and self.activation == "silu":
                out, sig = _silu(z)
            else:
                out, sig = z, None
            cache.append((a, z, sig))
            a = out
        return a, cache

    def _stack_backward(self, layers, cache, g, grads, need_input_grad=True):
        for (w, b, _), (a_in, z, sig) in zip(reversed(layers), reversed(cache)):
            if sig is not None:
                g = g * (sig * (1.0 + z * (1.0 - sig)))
            grads[w] = a_in.T @ g
            grads[b] = g.sum(0)
            g = g @ self.params[w].T
        return g

    def _forward(self, x: np.ndarray, t_in: np.ndarray):
        a = np.concatenate([x, time_embedding(t_in, self.e).astype(x.dtype, copy=False)], axis=1)
        feat, c_trunk = self._stack_forward(self.trunk_layers, a)
        eps_hat, c_eps = self._stack_forward(self.eps_layers, feat)
        # the aux head also sees the trunk input, so it does not depend only on
        # features shaped by the noise loss
        pre_aux, c_aux = self._stack_forward(self.aux_layers, np.concatenate([feat, a], axis=1))
        return eps_hat, pre_aux, (c_trunk, c_eps, c_aux)

    def forward(self, x: np.ndarray, t, abar=None, bbar=None) -> tuple[np.ndarray, np.ndarray]:
        """(eps_hat, aux) at step or time ``t``; aux is softplus-activated."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.d:
            raise ValueError(f"input has dimension {x.shape[1]}, bundle expects {self.d}")
        t_in = self.time_input(np.broadcast_to(np.asarray(t), (x.shape[0],)), abar, bbar)
        eps_hat, pre_aux, _ = self._forward(x, t_in)
        return eps_hat, _softplus(pre_aux)

    def loss_and_grad(self, kind: str, x, t_in, eps, eps_ref=None):
        """Batch loss (mean over rows, summed over coordinates) and its gradient.

        ``kind="eps"`` trains the trunk and noise head. ``"sn"`` and ``"npr"``
        only produce gradients for the aux head; every other entry is an exact
        zero. ``eps_ref`` overrides the frozen noise head in the NPR target.
        """
        B = x.shape[0]
        eps_hat, pre_aux, (c_trunk, c_eps, c_aux) = self._forward(x, t_in)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        if kind == "eps":
            resid = eps_hat - eps
            loss = float(np.sum(resid ** 2) / B)
            g_feat = self._stack_backward(self.eps_layers, c_eps, 2.0 * resid / B, grads)
            self._stack_backward(self.trunk_layers, c_trunk, g_feat, grads)
            return loss, grads
        if kind not in ("sn", "npr"):
            raise ValueError(f"unknown loss kind {kind!r}")
        if kind == "sn":
            target = eps ** 2
        else:
            ref = eps_hat if eps_ref is None else eps_ref
            target = (eps - ref) ** 2
        resid = _softplus(pre_aux) - target
        loss = float(np.sum(resid ** 2) / B)
        self._stack_backward(self.aux_layers, c_aux, 2.0 * resid / B * _sigmoid(pre_aux), grads)
        return loss, grads


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    cosine: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.iterations < 1 or self.batch < 1 or not self.lr > 0:
            raise ValueError("iterations, batch and lr must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


class Adam:
    def __init__(self, names, params, cfg: TrainConfig):
        self.names = list(names)
        self.cfg = cfg
        self.m = {k: np.zeros_like(params[k]) for k in self.names}
        self.v = {k: np.zeros_like(params[k]) for k in self.names}
        self.k = 0

    def step(self, params, grads, lr):
        c = self.cfg
        self.k += 1
        b1c = 1.0 - c.beta1 ** self.k
        b2c = 1.0 - c.beta2 ** self.k
        for name in self.names:
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            params[name] -= lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + c.adam_eps)


@dataclass
class TrainResult:
    bundle: PredictorBundle
    losses: np.ndarray


def _draw_batch(spec: GmmSpec, schedule: Schedule, rng: np.random.Generator, batch: int):
    n = rng.integers(1, schedule.N + 1, size=batch)
    x0 = sample_x0(spec, rng, batch)
    eps = rng.standard_normal(x0.shape)
    abar = schedule.alpha_bars[n - 1][:, None]
    x = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    return n, x, eps


def _run(bundle: PredictorBundle, kind: str, names, spec, schedule, cfg: TrainConfig,
         eps_fn=None) -> TrainResult:
    """Optimise ``names`` in place; the arithmetic runs in ``cfg.dtype`` and the
    stored parameters stay float64 (frozen ones are never rewritten)."""
    rng = np.random.default_rng(cfg.seed)
    dt = np.dtype(cfg.dtype)
    work = bundle.copy()
    work.params = {k: v.astype(dt) for k, v in bundle.params.items()}
    opt = Adam(names, work.params, cfg)
    losses = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        n, x, eps = _draw_batch(spec, schedule, rng, cfg.batch)
        t_in = bundle.time_input(n)
        ref = None if eps_fn is None else eps_fn(x, n).astype(dt)
        loss, grads = work.loss_and_grad(kind, x.astype(dt), t_in, eps.astype(dt), ref)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite {kind} loss at iteration {it}")
        if not all(np.isfinite(grads[k]).all() for k in names):
            raise TrainingDiverged(f"non-finite {kind} gradient at iteration {it}")
        lr = cfg.lr
        if cfg.cosine:
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * it / cfg.iterations))
        opt.step(work.params, grads, lr)
        losses[it] = loss
    for k in names:
        bundle.params[k] = work.params[k].astype(np.float64)
    return TrainResult(bundle, losses)


def _meta_for(schedule: Schedule, time_feature: str) -> dict:
    meta = {"domain": "discrete", "N": schedule.N, "schedule": schedule.digest(),
            "time_feature": time_feature}
    if time_feature == "logsnr":
        ab = schedule.alpha_bars
        ls = np.log(ab / (1.0 - ab))
        meta["logsnr"] = ls.tolist()
        meta["logsnr_range"] = [float(ls.min()), float(ls.max())] if ls.size > 1 else [
            float(ls[0]) - 1.0, float(ls[0]) + 1.0]
    elif time_feature != "index":
        raise ValueError(f"unknown time feature {time_feature!r}")
    return meta


def train_eps(spec: GmmSpec, schedule: Schedule, cfg: TrainConfig, e: int = 32, h: int = 128,
              head_hidden: int = 0, activation: str = "silu",
              time_feature: str = "logsnr") -> TrainResult:
    init_rng = np.random.default_rng([cfg.seed, 1])
    bundle = PredictorBundle.init(spec.d, init_rng, e=e, h=h, head_hidden=head_hidden,
                                  activation=activation, meta=_meta_for(schedule, time_feature))
    return _run(bundle, "eps", bundle.group("trunk") + bundle.group("eps"), spec, schedule, cfg)


def _train_aux(kind, stage1: PredictorBundle, spec, schedule, cfg, eps_fn=None) -> TrainResult:
    if stage1.d != spec.d:
        raise ValueError("bundle and data dimension differ")
    if stage1.meta.get("N") != schedule.N:
        raise ValueError("bundle was trained on a different number of steps")
    bundle = stage1.copy()
    bundle.aux_kind = kind
    fresh = PredictorBundle.init(stage1.d, np.random.default_rng([cfg.seed, 2]), e=stage1.e,
                                 h=stage1.h, head_hidden=stage1.head_hidden)
    for k in bundle.group("aux"):
        bundle.params[k] = fresh.params[k]
    frozen_names = bundle.group("trunk") + bundle.group("eps")
    frozen = {k: bundle.params[k].copy() for k in frozen_names}
    res = _run(bundle, kind, bundle.group("aux"), spec, schedule, cfg, eps_fn)
    for k, v in frozen.items():
        if not np.array_equal(bundle.params[k], v):
            raise AssertionError(f"frozen parameter {k} changed in stage 2")
    return res


def train_sn(stage1: PredictorBundle, spec, schedule, cfg) -> TrainResult:
    return _train_aux("sn", stage1, spec, schedule, cfg)


def train_npr(stage1: PredictorBundle, spec, schedule, cfg, eps_fn=None) -> TrainResult:
    """``eps_fn(x, n)`` replaces the frozen noise head inside the residual target."""
    return _train_aux("npr", stage1, spec, schedule, cfg, eps_fn)


@dataclass
class GradCheck:
    max_rel_error: float
    frozen_max_abs: float
    n_checked: int


def grad_check(bundle: PredictorBundle, loss_kind: str, batch, rng: np.random.Generator,
               n_params: int = 200, step: float = 1e-5) -> GradCheck:
    """Compare reverse-mode gradients with central differences.

    ``batch`` is ``(x, t_in, eps)``. Only trainable coordinates of the given
    loss are perturbed; frozen ones are checked to carry an exact zero.
    """
    x, t_in, eps = batch
    work = bundle.copy()
    _, grads = work.loss_and_grad(loss_kind, x, t_in, eps)
    if loss_kind == "eps":
        trainable = work.group("trunk") + work.group("eps")
    else:
        trainable = work.group("aux")
    frozen = [k for k in work.param_order if k not in trainable]
    frozen_max = max(float(np.max(np.abs(grads[k]))) for k in frozen)
    sizes = np.array([work.params[k].size for k in trainable])
    flat_ids = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for fid in np.sort(flat_ids):
        which = int(np.searchsorted(offsets, fid, side="right") - 1)
        name = trainable[which]
        idx = np.unravel_index(fid - offsets[which], work.params[name].shape)
        orig = work.params[name][idx]
        work.params[name][idx] = orig + step
        lp, _ = work.loss_and_grad(loss_kind, x, t_in, eps)
        work.params[name][idx] = orig - step
        lm, _ = work.loss_and_grad(loss_kind, x, t_in, eps)
        work.params[name][idx] = orig
        num = (lp - lm) / (2 * step)
        ana = grads[name][idx]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-3))
    return GradCheck(worst, frozen_max, len(flat_ids))


# checkpoints ---------------------------------------------------------------

def save_checkpoint(bundle: PredictorBundle, path) -> None:
    meta = dict(bundle.meta)
    meta.update(d=bundle.d, e=bundle.e, h=bundle.h, head_hidden=bundle.head_hidden,
                aux_kind=bundle.aux_kind, activation=bundle.activation)
    doc = {
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in bundle.params.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path, d: int | None = None, schedule: Schedule | None = None) -> PredictorBundle:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}"
                              if isinstance(doc, dict) else f"{path}: not a checkpoint object")
    try:
        meta = dict(doc["meta"])
        params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
        core = {k: meta.pop(k) for k in ("d", "e", "h", "head_hidden", "aux_kind", "activation")}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    bundle = PredictorBundle(params, meta=meta, **core)
    if set(params) != set(bundle.param_order):
        raise CheckpointError(f"{path}: parameter set {sorted(params)} is incomplete")
    if d is not None and core["d"] != d:
        raise CheckpointError(f"{path}: checkpoint dimension {core['d']} but data has d={d}")
    if params["W0"].shape != (core["d"] + core["e"], core["h"]):
        raise CheckpointError(f"{path}: W0 shape disagrees with (d, e, h)")
    if schedule is not None and meta.get("schedule") != schedule.digest():
        warnings.warn(f"{path}: checkpoint was trained on a different schedule "
                      f"({meta.get('schedule')} vs {schedule.digest()})", stacklevel=2)
    return bundle
