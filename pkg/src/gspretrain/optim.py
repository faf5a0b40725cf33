"""AdamW over named parameter groups, gradient clipping and a finite-difference checker."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NonFiniteGradientError


@dataclass
class OptimConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float = 35.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("betas must lie in [0, 1)")


@dataclass
class ParamStore:
    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))

    def names(self):
        return sorted(self.params)


def adamw_step(store: ParamStore, grads, cfg: OptimConfig):
    """One in-place AdamW update; decay is applied as p <- p * (1 - lr*wd) before the moment step.

    Every gradient is checked for finiteness before anything is touched.
    """
    names = store.names()
    for name in names:
        g = grads[name]
        if g.shape != store.params[name].shape:
            raise ConfigurationError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)

    store.step += 1
    t = store.step
    lr = cfg.learning_rate
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name in names:
        p = store.params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        m, v = store.m[name], store.v[name]
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return store


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in sorted(grads))))


def grad_clip(grads, max_norm=35.0):
    """Scale all gradients by a common factor so their global L2 norm is <= max_norm."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class FDReport:
    max_rel_error: float
    worst_index: int | None
    non_finite: list
    numeric: np.ndarray

    @property
    def ok(self):
        return not self.non_finite


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(f, x, analytic, eps=1e-5, indices=None):
    """Central-difference check of a scalar function ``f`` at ``x``.

    ``analytic`` has the shape of ``x``; ``indices`` optionally restricts the
    check to a subset of flat coordinates. ``f`` must not keep a reference to
    its argument (``x`` is perturbed in place and restored).
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.flat  # writes through even when x is not contiguous
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    coords = np.arange(x.size) if indices is None else np.asarray(indices)
    numeric = np.zeros(len(coords))
    bad = []
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad.append(int(i))
            numeric[n] = np.nan
            continue
        numeric[n] = (fp - fm) / (2.0 * eps)
    err = relative_error(analytic[coords], numeric)
    err = np.where(np.isnan(err), np.inf, err)
    worst = int(np.argmax(err)) if len(err) else None
    return FDReport(float(err.max()) if len(err) else 0.0,
                    None if worst is None else int(coords[worst]), bad, numeric)
