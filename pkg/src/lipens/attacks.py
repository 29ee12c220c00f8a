"""White-box FGSM and PGD under an L-infinity budget."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from ._kernels import kernels
from .autodiff import Tensor
from .data import LabeledDataset
from .training import predict

FGSM = "fgsm"
PGD = "pgd"


@dataclass(frozen=True)
class AttackConfig:
    kind: str = FGSM
    eps: float = 0.1
    step_size: float | None = None  # PGD eta; None means eps / 10
    steps: int = 40
    clamp: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in (FGSM, PGD):
            raise ValueError(f"unknown attack {self.kind!r}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.kind == PGD:
            if self.steps < 1:
                raise ValueError("PGD needs at least one step")
            if self.step_size is not None and not self.step_size > 0:
                raise ValueError("PGD step size must be positive")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not lo < hi:
                raise ValueError("clamp must be an interval lo < hi")
            object.__setattr__(self, "clamp", (float(lo), float(hi)))

    @property
    def eta(self) -> float:
        return self.step_size if self.step_size is not None else self.eps / 10.0

    @classmethod
    def fgsm(cls, eps: float = 0.1, clamp=(0.0, 1.0)) -> "AttackConfig":
        return cls(FGSM, eps, clamp=clamp)

    @classmethod
    def pgd(cls, eps: float = 0.01, steps: int = 40, step_size: float | None = None, clamp=(0.0, 1.0)) -> "AttackConfig":
        return cls(PGD, eps, step_size, steps, clamp)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["eta"] = self.eta if self.kind == PGD else None
        if self.kind == FGSM:
            out["steps"] = 1
            out["step_size"] = None
        out["clamp"] = list(self.clamp) if self.clamp else None
        return out


def loss_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample gradient of the cross-entropy loss w.r.t. the inputs."""
    leaf = Tensor(np.array(np.atleast_2d(x), dtype=np.float64), requires_grad=True)
    loss = ad.softmax_cross_entropy(model.trace(leaf), np.atleast_1d(y), reduction="sum")
    loss.backward()
    g = leaf.grad
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return g.reshape(np.shape(x))


def _bounds(cfg: AttackConfig) -> tuple[float, float]:
    # lo == hi disables clamping inside the projection kernel
    return cfg.clamp if cfg.clamp is not None else (0.0, 0.0)


def fgsm(model, x, y, cfg: AttackConfig | None = None) -> np.ndarray:
    """x + eps * sign(grad_x J(f(x), y)), then clamped to the input box."""
    cfg = cfg or AttackConfig.fgsm()
    x = np.asarray(x, dtype=np.float64)
    g = loss_gradient(model, x, y)
    adv = x + cfg.eps * np.sign(g)
    if cfg.clamp is not None:
        adv = np.clip(adv, *cfg.clamp)
    return adv


def pgd(model, x, y, cfg: AttackConfig | None = None) -> np.ndarray:
    """Iterated signed-gradient steps, each projected back onto the eps-box
    around ``x`` and clamped. Starts from the clean input."""
    cfg = cfg or AttackConfig.pgd()
    x = np.ascontiguousarray(x, dtype=np.float64)
    lo, hi = _bounds(cfg)
    adv = x.copy()
    for _ in range(cfg.steps):
        g = loss_gradient(model, adv, y)
        adv = kernels.linf_project(adv + cfg.eta * np.sign(g), x, cfg.eps, lo, hi)
    return adv


def attack(model, x, y, cfg: AttackConfig) -> np.ndarray:
    return fgsm(model, x, y, cfg) if cfg.kind == FGSM else pgd(model, x, y, cfg)


@dataclass
class AttackResult:
    accuracy: float
    clean_accuracy: float
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    linf: np.ndarray
    config: dict

    def records(self):
        for i, (c, a, d) in enumerate(zip(self.clean_pred, self.adv_pred, self.linf)):
            yield {"index": i, "clean_pred": int(c), "adv_pred": int(a), "linf_perturbation": float(d)}

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")


def run_attack(model, data: LabeledDataset, cfg: AttackConfig, batch_size: int = 500) -> AttackResult:
    """Attack every sample against ``model`` itself and collect predictions."""
    if len(data) == 0:
        raise ValueError("cannot attack an empty dataset")
    advs = []
    for lo in range(0, len(data), batch_size):
        sl = slice(lo, lo + batch_size)
        advs.append(attack(model, data.inputs[sl], data.labels[sl], cfg))
    adv = np.concatenate(advs)
    clean_pred = predict(model, data.inputs)
    adv_pred = predict(model, adv)
    linf = np.abs(adv - data.inputs).max(axis=1)
    return AttackResult(
        accuracy=float(np.mean(adv_pred == data.labels)),
        clean_accuracy=float(np.mean(clean_pred == data.labels)),
        clean_pred=clean_pred,
        adv_pred=adv_pred,
        linf=linf,
        config=cfg.to_dict(),
    )


def adversarial_accuracy(model, data: LabeledDataset, cfg: AttackConfig) -> float:
    return run_attack(model, data, cfg).accuracy
