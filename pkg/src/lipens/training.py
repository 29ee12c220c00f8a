"""Mini-batch Adam training and accuracy evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from ._kernels import kernels
from .autodiff import DimensionError, Tensor
from .data import LabeledDataset
from .nn import Network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 128
    epochs: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.eps_adam <= 0:
            raise ValueError("learning rate and Adam epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam over a list of numpy parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c = self.cfg
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            kernels.adam_step(p, np.ascontiguousarray(g), m, v, c.learning_rate, c.beta1, c.beta2, c.eps_adam, self.t)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one epoch from a counter-based (Philox) generator."""
    bitgen = np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF, epoch], dtype=np.uint64))
    return np.random.Generator(bitgen).permutation(n)


def train(net: Network, data: LabeledDataset, cfg: TrainConfig) -> tuple[Network, list[float]]:
    """Train a copy of ``net``; returns it with the per-batch loss history."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.dim != net.input_dim:
        raise DimensionError(f"network expects {net.input_dim} features, data has {data.dim}")
    if data.class_count > net.output_dim:
        raise DimensionError(f"{data.class_count} classes but only {net.output_dim} logits")
    model = net.copy()
    params = model.parameters()
    opt = Adam(params, cfg)
    history: list[float] = []
    n = len(data)
    for epoch in range(cfg.epochs):
        order = epoch_permutation(cfg.rng_seed, epoch, n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            leaves = [Tensor(p, requires_grad=True) for p in params]
            logits = model.trace(Tensor(data.inputs[idx]), leaves)
            loss = ad.softmax_cross_entropy(logits, data.labels[idx])
            loss.backward()
            grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
            opt.step(grads)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            # dead units can keep the loss finite while weights blow up
            if not all(np.isfinite(p).all() for p in params):
                raise FloatingPointError(f"non-finite parameters at epoch {epoch}")
            history.append(value)
        log.debug("epoch %d mean loss %.5f", epoch, np.mean(history[-math.ceil(n / cfg.batch_size):]))
    return model, history


def predict(model, inputs: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    preds = []
    for start in range(0, inputs.shape[0], batch_size):
        preds.append(np.argmax(model.forward(inputs[start : start + batch_size]), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model, data: LabeledDataset) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if data.dim != model.input_dim:
        raise DimensionError(f"model expects {model.input_dim} features, data has {data.dim}")
    return float(np.mean(predict(model, data.inputs) == data.labels))
