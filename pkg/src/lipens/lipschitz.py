"""Lipschitz constants: spectral-norm upper bounds and empirical local estimates.

The empirical estimator follows the usual local formulation: for every
anchor ``x`` it searches the radius-``eps`` ball for the ``x'`` maximising
``||f(x) - f(x')||_1 / ||x - x'||_inf`` and averages the best ratios. The
search is signed-gradient ascent on the numerator with ``x'`` pinned to a
sphere around the anchor, so the denominator stays fixed during ascent.
Restarts cycle through the concentric spheres of radius ``eps * 2^-j`` and
each restart finishes with a probe along the segment towards its best
point, because the ratio of a piecewise-linear map often peaks inside the
ball. Every reported ratio comes from a concrete, stored witness, hence the
estimate is a lower bound on the true local constant.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from ._kernels import kernels
from .autodiff import Tensor

ANALYTIC = "analytic_upper"
EMPIRICAL = "empirical_local"

# numerator / denominator norm pairs understood by empirical_llc
NORMS = ("l1-linf", "l2-l2")


@dataclass
class LipschitzReport:
    kind: str
    value: float
    radius: float | None = None
    n_samples: int | None = None
    config: dict = field(default_factory=dict)
    per_anchor: np.ndarray | None = None
    witnesses: np.ndarray | None = None

    def to_dict(self, include_witnesses: bool = False) -> dict:
        out = {
            "kind": self.kind,
            "value": float(self.value),
            "radius": self.radius,
            "n_samples": self.n_samples,
            "config": self.config,
        }
        if self.per_anchor is not None:
            out["per_anchor"] = [float(v) for v in self.per_anchor]
        if include_witnesses and self.witnesses is not None:
            out["witnesses"] = self.witnesses.tolist()
        return out

    def to_json(self, include_witnesses: bool = False) -> str:
        return json.dumps(self.to_dict(include_witnesses), sort_keys=True)


def write_reports_jsonl(reports: Iterable[LipschitzReport], path, include_witnesses: bool = False) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json(include_witnesses) + "\n")


# ---------------------------------------------------------------------------
# analytic bounds
# ---------------------------------------------------------------------------


def spectral_norm(w, tol: float = 1e-12, seed: int = 0, max_iter: int = 200_000) -> float:
    """Largest singular value of ``w`` by power iteration on W^T W.

    Stops once the eigen-residual ``||W^T W v - rho v||`` drops below
    ``tol * rho``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ValueError(f"spectral_norm needs a non-empty matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("matrix has non-finite entries")
    if not np.any(w):
        return 0.0
    v0 = np.random.default_rng(seed).standard_normal(w.shape[1])
    sigma, _, iters = kernels.power_iteration(w, v0, tol, max_iter)
    if iters >= max_iter:
        warnings.warn(f"power iteration hit max_iter={max_iter}", RuntimeWarning, stacklevel=2)
    return float(sigma)


def analytic_bound(net, tol: float = 1e-12) -> LipschitzReport:
    """Product of layer spectral norms: an L2 upper bound (ReLU is 1-Lipschitz)."""
    norms = [spectral_norm(w, tol) for w in net.weight_matrices()]
    return LipschitzReport(
        kind=ANALYTIC,
        value=float(np.prod(norms)),
        config={"norm": "l2", "layer_norms": norms, "tol": tol},
    )


# ---------------------------------------------------------------------------
# empirical local estimate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AscentConfig:
    steps: int = 50
    step_fraction: float = 0.1  # step size as a fraction of eps
    restarts: int = 10
    seed: int = 0
    norm: str = "l1-linf"
    chunk_rows: int = 1024
    ray_points: int = 10  # interior points t = 2^-1 .. 2^-ray_points along each best ray
    shells: int = 3  # restart r ascends on the sphere of radius eps * 2^-(r mod shells)

    def __post_init__(self):
        if self.steps < 0 or self.restarts < 1:
            raise ValueError("need steps >= 0 and restarts >= 1")
        if self.step_fraction <= 0:
            raise ValueError("step_fraction must be positive")
        if self.shells < 1:
            raise ValueError("shells must be >= 1")
        if self.ray_points < 0:
            raise ValueError("ray_points must be nonnegative")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")

    def to_dict(self) -> dict:
        return asdict(self)


def _starts(n: int, d: int, eps: float, cfg: AscentConfig) -> np.ndarray:
    """Initial offsets for every (restart, anchor) pair, restart-major."""
    rng = np.random.Generator(np.random.Philox(key=np.array([cfg.seed, 0x11C], dtype=np.uint64)))
    radius = eps * np.repeat(2.0 ** -(np.arange(cfg.restarts) % cfg.shells), n)[:, None]
    if cfg.norm == "l1-linf":
        return radius * np.where(rng.random((cfg.restarts * n, d)) < 0.5, -1.0, 1.0)
    u = rng.standard_normal((cfg.restarts * n, d))
    return radius * u / np.linalg.norm(u, axis=1, keepdims=True)


def _numerator(diff: np.ndarray, norm: str) -> np.ndarray:
    if norm == "l1-linf":
        return kernels.row_l1_distance(diff, np.zeros_like(diff))
    return np.sqrt((diff * diff).sum(axis=1))


def _denominator(delta: np.ndarray, norm: str) -> np.ndarray:
    if norm == "l1-linf":
        return np.abs(delta).max(axis=1)
    return np.sqrt((delta * delta).sum(axis=1))


def pair_ratios(f, x: np.ndarray, x_prime: np.ndarray, norm: str = "l1-linf") -> np.ndarray:
    """Row-wise ``||f(x) - f(x')|| / ||x - x'||`` for the chosen norm pair."""
    x = np.atleast_2d(x)
    x_prime = np.atleast_2d(x_prime)
    num = _numerator(f.forward(x) - f.forward(x_prime), norm)
    den = _denominator(x - x_prime, norm)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _to_surface(delta: np.ndarray, radius: np.ndarray, norm: str, fallback: np.ndarray) -> np.ndarray:
    if norm == "l1-linf":
        np.clip(delta, -radius[:, None], radius[:, None], out=delta)
        size = np.abs(delta).max(axis=1)
    else:
        size = np.sqrt((delta * delta).sum(axis=1))
    dead = size == 0.0
    if np.any(dead):
        delta[dead] = fallback[dead]
        size = np.where(dead, radius, size)
    return delta * (radius / size)[:, None]


def _ascend(f, anchors: np.ndarray, f_anchor: np.ndarray, start: np.ndarray, cfg: AscentConfig):
    """Ascent on the sphere through ``start``; best ratio and point per row."""
    radius = _denominator(start, cfg.norm)
    step = cfg.step_fraction * radius[:, None]
    delta = start.copy()
    best = np.full(anchors.shape[0], -np.inf)
    best_x = np.empty_like(anchors)
    fa = Tensor(f_anchor)
    for it in range(cfg.steps + 1):
        xp = anchors + delta
        leaf = Tensor(xp, requires_grad=it < cfg.steps)
        diff = ad.add(f.trace(leaf), ad.scale(fa, -1.0))
        num_vals = _numerator(diff.data, cfg.norm)
        den = _denominator(xp - anchors, cfg.norm)
        ratio = np.divide(num_vals, den, out=np.zeros_like(num_vals), where=den > 0)
        better = ratio > best
        best[better] = ratio[better]
        best_x[better] = xp[better]
        if it == cfg.steps:
            break
        if cfg.norm == "l1-linf":
            ad.sum_(ad.abs_(diff)).backward()
            delta = delta + step * np.sign(leaf.grad)
        else:
            ad.sum_(ad.row_l2_norm(diff)).backward()
            g = leaf.grad
            gn = np.linalg.norm(g, axis=1, keepdims=True)
            delta = delta + step * np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
        delta = _to_surface(delta, radius, cfg.norm, start)
    # the ball is solid: probe the segment towards the best surface point,
    # piecewise-linear maps often peak closer to the anchor
    ray = best_x - anchors
    for j in range(1, cfg.ray_points + 1):
        cand = anchors + ray * 2.0**-j
        ratio = pair_ratios(f, anchors, cand, cfg.norm)
        better = ratio > best
        best[better] = ratio[better]
        best_x[better] = cand[better]
    return best, best_x


def empirical_llc(
    f,
    anchors,
    eps: float,
    cfg: AscentConfig | None = None,
    extra_witnesses: Iterable[np.ndarray] = (),
) -> LipschitzReport:
    """Mean over anchors of the best ratio found inside the eps-ball.

    ``f`` is anything with ``forward(batch)`` and ``trace(Tensor)`` (a
    network or an ensemble). ``extra_witnesses`` are additional candidate
    ``x'`` arrays (one row per anchor) that are scored alongside the ascent
    iterates; candidates outside the ball are ignored.
    """
    cfg = cfg or AscentConfig()
    if not eps > 0:
        raise ValueError("eps must be positive")
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    if anchors.shape[0] == 0:
        raise ValueError("need at least one anchor")
    n, d = anchors.shape
    f_anchor = f.forward(anchors)
    starts = _starts(n, d, eps, cfg)
    rows = cfg.restarts * n
    best_all = np.empty(rows)
    x_all = np.empty((rows, d))
    for lo in range(0, rows, max(1, cfg.chunk_rows)):
        idx = np.arange(lo, min(rows, lo + cfg.chunk_rows)) % n
        sl = slice(lo, lo + len(idx))
        best_all[sl], x_all[sl] = _ascend(f, anchors[idx], f_anchor[idx], starts[sl], cfg)
    # reduce over restarts; the earliest restart wins ties
    by_restart = best_all.reshape(cfg.restarts, n)
    pick = np.argmax(by_restart, axis=0)
    best = by_restart[pick, np.arange(n)]
    best_x = x_all.reshape(cfg.restarts, n, d)[pick, np.arange(n)]
    for cand in extra_witnesses:
        cand = np.atleast_2d(np.asarray(cand, dtype=np.float64))
        if cand.shape != anchors.shape:
            raise ValueError(f"witness candidates must have shape {anchors.shape}")
        inside = _denominator(cand - anchors, cfg.norm) <= eps * (1 + 1e-12)
        ratios = pair_ratios(f, anchors, cand, cfg.norm)
        sel = inside & (ratios > best)
        best[sel] = ratios[sel]
        best_x[sel] = cand[sel]
    best = np.maximum(best, 0.0)
    if not np.all(np.isfinite(best)):
        raise FloatingPointError("non-finite local Lipschitz ratio")
    # fixed-order reduction keeps the mean reproducible
    value = math.fsum(best.tolist()) / n
    config = cfg.to_dict()
    config["step_size"] = cfg.step_fraction * eps
    return LipschitzReport(
        kind=EMPIRICAL,
        value=value,
        radius=float(eps),
        n_samples=n,
        config=config,
        per_anchor=best,
        witnesses=best_x,
    )


# the same estimator applies to any end-to-end evaluable model
empirical_llc_ensemble = empirical_llc


def norm_ceiling(analytic: float, in_dim: int, out_dim: int) -> float:
    """Largest L1/Linf ratio an L2-Lipschitz(analytic) map can show."""
    return math.sqrt(out_dim) * math.sqrt(in_dim) * analytic
