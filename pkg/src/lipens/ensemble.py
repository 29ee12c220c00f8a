"""Bagged and stacked ensembles with Lipschitz-driven parameter choices.

Bagging averages member logits with weights ``w``; its Lipschitz constant
is at most ``sum(w_i * l_i)``. Stacking feeds the concatenated member
logits to a meta-learner ``g``; the composite constant is at most
``L_g * sqrt(sum(l_i ** 2))``, so choosing ``L_g <= min(l) / sqrt(sum(l**2))``
makes the ensemble no less robust than its best member.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .data import LabeledDataset
from .lipschitz import AscentConfig, LipschitzReport, analytic_bound, empirical_llc
from .nn import IDENTITY, RELU, DenseLayer, Network, init_network, load_network, save_network
from .training import TrainConfig, train

PROPOSED = "proposed"
EQUAL = "equal"
REVERSE = "reverse"
BAG_MODES = (PROPOSED, EQUAL, REVERSE)
STACK_MODES = (PROPOSED, REVERSE)

# fraction of the stacking budget min(l)/sqrt(sum l^2) used by each mode
STACK_TARGET_FACTOR = {PROPOSED: 0.95, REVERSE: 2.0}
META_HIDDEN = 64
WEIGHT_TOL = 1e-12


class EnsembleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaggingWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise EnsembleError("weights must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise EnsembleError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise EnsembleError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "w", w)

    def __len__(self) -> int:
        return self.w.size

    def tolist(self) -> list[float]:
        return [float(v) for v in self.w]


def _as_weights(w) -> BaggingWeights:
    return w if isinstance(w, BaggingWeights) else BaggingWeights(np.asarray(w, dtype=np.float64))


def bagged_lc(ells, weights) -> float:
    """Certified constant of a weighted average: sum(w_i * l_i)."""
    w = _as_weights(weights).w
    ells = np.asarray(ells, dtype=np.float64)
    if ells.shape != w.shape:
        raise EnsembleError(f"{ells.size} constants but {w.size} weights")
    if np.any(ells < 0):
        raise EnsembleError("Lipschitz constants must be nonnegative")
    return math.fsum((w * ells).tolist())


def stacked_lc(ells, meta_constant: float) -> float:
    """Certified constant of a stack: L_g * sqrt(sum(l_i ** 2))."""
    ells = np.asarray(ells, dtype=np.float64)
    if meta_constant < 0 or np.any(ells < 0):
        raise EnsembleError("constants must be nonnegative")
    return float(meta_constant) * math.sqrt(math.fsum((ells * ells).tolist()))


def stacking_budget(ells) -> float:
    """Largest meta-learner constant keeping the stack at or below min(l)."""
    ells = np.asarray(ells, dtype=np.float64)
    if ells.size == 0 or np.any(ells <= 0):
        raise EnsembleError("stacking budget needs positive constants")
    return float(ells.min()) / math.sqrt(math.fsum((ells * ells).tolist()))


def choose_bagging_weights(ells, mode: str = PROPOSED) -> BaggingWeights:
    """Inverse-constant weights (proposed), uniform weights, or the proposed
    weights handed out in reverse rank order (largest weight to largest l)."""
    ells = np.asarray(ells, dtype=np.float64)
    if ells.ndim != 1 or ells.size == 0:
        raise EnsembleError("need a non-empty vector of constants")
    if np.any(ells <= 0) or not np.all(np.isfinite(ells)):
        raise EnsembleError("constants must be positive and finite")
    n = ells.size
    if mode == EQUAL:
        return BaggingWeights(np.full(n, 1.0 / n))
    inv = 1.0 / ells
    proposed = inv / inv.sum()
    if mode == PROPOSED:
        return BaggingWeights(_renormalise(proposed))
    if mode == REVERSE:
        out = np.empty(n)
        # rank of each member by l, ascending; stable so ties keep member order
        order = np.argsort(ells, kind="stable")
        out[order] = np.sort(proposed, kind="stable")
        return BaggingWeights(_renormalise(out))
    raise EnsembleError(f"unknown bagging mode {mode!r}")


def _renormalise(w: np.ndarray) -> np.ndarray:
    w = w / math.fsum(w.tolist())
    # push any residual rounding onto the largest entry
    w[np.argmax(w)] += 1.0 - math.fsum(w.tolist())
    return w


@dataclass(frozen=True)
class MajorizationVerdict:
    majorizes: bool
    lhs: float  # l . w
    rhs: float  # l . w'

    @property
    def holds(self) -> bool:
        return (not self.majorizes) or self.lhs >= self.rhs - 1e-12


class LemmaViolation(AssertionError):
    pass


def check_majorization(ells, w, w_prime, tol: float = 1e-12) -> MajorizationVerdict:
    """Test whether w majorizes w' and, if so, that l.w >= l.w'.

    All three vectors must already be sorted in descending order; the
    constants are aligned with the weights position by position.
    """
    ells, w, w_prime = (np.asarray(v, dtype=np.float64) for v in (ells, w, w_prime))
    if not (ells.shape == w.shape == w_prime.shape) or ells.ndim != 1:
        raise EnsembleError("vectors must be 1-D and of equal length")
    for name, v in (("l", ells), ("w", w), ("w'", w_prime)):
        if np.any(np.diff(v) > 0):
            raise EnsembleError(f"{name} must be sorted in descending order")
    if abs(w.sum() - w_prime.sum()) > tol:
        raise EnsembleError("w and w' must have equal sums")
    majorizes = bool(np.all(np.cumsum(w) >= np.cumsum(w_prime) - tol))
    verdict = MajorizationVerdict(majorizes, float(ells @ w), float(ells @ w_prime))
    if not verdict.holds:
        raise LemmaViolation(f"w majorizes w' but l.w={verdict.lhs} < l.w'={verdict.rhs}")
    return verdict


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def _check_members(members: Sequence[Network]) -> tuple[int, int]:
    if not members:
        raise EnsembleError("an ensemble needs at least one member")
    d, k = members[0].input_dim, members[0].output_dim
    for m in members[1:]:
        if m.input_dim != d or m.output_dim != k:
            raise DimensionError("ensemble members must share input and output dimensions")
    return d, k


@dataclass
class BaggedEnsemble:
    members: list[Network]
    weights: BaggingWeights
    member_llc: list[float] = field(default_factory=list)
    mode: str = PROPOSED
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = _as_weights(self.weights)
        _check_members(self.members)
        if len(self.weights) != len(self.members):
            raise EnsembleError("one weight per member required")

    kind = "bag"

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.members[0].output_dim

    @property
    def certificate(self) -> float:
        return bagged_lc(self.member_llc, self.weights)

    def forward(self, x) -> np.ndarray:
        out = None
        for w, m in zip(self.weights.w, self.members):
            y = w * m.forward(x)
            out = y if out is None else out + y
        return out

    __call__ = forward

    def trace(self, x: Tensor) -> Tensor:
        out = None
        for w, m in zip(self.weights.w, self.members):
            y = ad.scale(m.trace(x), float(w))
            out = y if out is None else ad.add(out, y)
        return out


@dataclass
class StackedEnsemble:
    members: list[Network]
    meta: Network
    certified_lg: float
    member_llc: list[float] = field(default_factory=list)
    mode: str = PROPOSED
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        d, k = _check_members(self.members)
        if self.meta.input_dim != k * len(self.members):
            raise DimensionError(
                f"meta-learner takes {self.meta.input_dim} inputs, members emit {k * len(self.members)}"
            )

    kind = "stack"

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.meta.output_dim

    @property
    def certificate(self) -> float:
        return stacked_lc(self.member_llc, self.certified_lg)

    def satisfies_stacking_condition(self) -> bool:
        return self.certificate <= min(self.member_llc)

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        outs = [m.forward(x) for m in self.members]
        return self.meta.forward(np.concatenate(outs, axis=-1))

    __call__ = forward

    def trace(self, x: Tensor) -> Tensor:
        return self.meta.trace(ad.concat([m.trace(x) for m in self.members], axis=1 if x.ndim == 2 else 0))


def ensemble_forward(model, x) -> np.ndarray:
    return model.forward(x)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def measure_member_llc(
    members: Sequence[Network], anchors: np.ndarray, eps: float, cfg: AscentConfig | None = None
) -> list[LipschitzReport]:
    return [empirical_llc(m, anchors, eps, cfg) for m in members]


def build_bagged(
    members: Sequence[Network],
    anchors: np.ndarray,
    eps: float,
    mode: str = PROPOSED,
    cfg: AscentConfig | None = None,
    member_reports: Sequence[LipschitzReport] | None = None,
) -> BaggedEnsemble:
    """Measure member LLCs, pick weights for ``mode`` and wrap them up."""
    _check_members(members)
    reports = list(member_reports) if member_reports is not None else measure_member_llc(members, anchors, eps, cfg)
    ells = [r.value for r in reports]
    weights = choose_bagging_weights(ells, mode)
    return BaggedEnsemble(
        list(members),
        weights,
        ells,
        mode,
        info={"eps": eps, "ascent": (cfg or AscentConfig()).to_dict()},
    )


def rescale_to_bound(net: Network, target: float) -> Network:
    """Scale a network so its spectral-product bound equals ``target``.

    Each of the K weight matrices is multiplied by c = (target/bound)^(1/K).
    Biases of layer j are multiplied by c^j, which keeps the rescaled map a
    positive multiple c^K of the original (ReLU is positively homogeneous),
    so predictions are unchanged.
    """
    if target <= 0:
        raise EnsembleError("target bound must be positive")
    current = analytic_bound(net).value
    if current == 0:
        raise EnsembleError("meta-learner has zero weights and cannot be rescaled")
    K = len(net.layers)
    c = (target / current) ** (1.0 / K)
    out = net.copy()
    for j, layer in enumerate(out.layers, start=1):
        layer.weights = layer.weights * c
        layer.bias = layer.bias * c**j
    return out


def stacked_features(members: Sequence[Network], inputs: np.ndarray) -> np.ndarray:
    return np.concatenate([m.forward(inputs) for m in members], axis=1)


def warm_start_meta(n_members: int, k: int, hidden: int, rng: np.random.Generator) -> Network:
    """Meta-learner initialised to the uniform average of member logits.

    For every stacked logit y_j two hidden units carry relu(a_j y) and
    relu(-a_j y); the output layer recombines them with weight 1/(n a_j).
    Distinct scales a_j keep the singular values apart so power iteration
    converges quickly. Remaining units start small and random. Falls back
    to a random He initialisation when ``hidden < 2*n*k``.
    """
    nk = n_members * k
    if hidden < 2 * nk:
        return init_network([nk, hidden, k], rng)
    a = np.linspace(1.0, 2.0, nk)
    w1 = rng.normal(0.0, 1e-2, size=(hidden, nk))
    w1[:nk] = np.diag(a)
    w1[nk : 2 * nk] = -np.diag(a)
    blocks = np.tile(np.eye(k), (1, n_members)) / (n_members * a)
    w2 = rng.normal(0.0, 1e-2, size=(k, hidden))
    w2[:, :nk] = blocks
    w2[:, nk : 2 * nk] = -blocks
    return Network([DenseLayer(w1, np.zeros(hidden), RELU), DenseLayer(w2, np.zeros(k), IDENTITY)])


def train_meta(
    members: Sequence[Network],
    heldout: LabeledDataset,
    cfg: TrainConfig,
    hidden: int = META_HIDDEN,
    warm_start: bool = True,
) -> Network:
    """Fit the meta-learner on member logits for held-out data."""
    d, k = _check_members(members)
    if len(heldout) < 2:
        raise EnsembleError("not enough held-out data to train a meta-learner")
    feats = stacked_features(members, heldout.inputs)
    meta_data = LabeledDataset(feats, heldout.labels, heldout.class_count, "heldout")
    rng = np.random.Generator(np.random.Philox(key=np.array([cfg.rng_seed, 77], dtype=np.uint64)))
    if warm_start:
        meta = warm_start_meta(len(members), k, hidden, rng)
    else:
        meta = init_network([k * len(members), hidden, k], rng)
    meta, _ = train(meta, meta_data, cfg)
    meta.meta = {"arch": "meta", "hidden": hidden, "warm_start": warm_start}
    return meta


def build_stacked(
    members: Sequence[Network],
    anchors: np.ndarray,
    eps: float,
    mode: str = PROPOSED,
    heldout: LabeledDataset | None = None,
    train_cfg: TrainConfig | None = None,
    cfg: AscentConfig | None = None,
    member_reports: Sequence[LipschitzReport] | None = None,
    meta: Network | None = None,
) -> StackedEnsemble:
    """Train (or reuse) a meta-learner and rescale it to the mode's target bound.

    proposed: L_g = 0.95 * min(l) / sqrt(sum l^2)  (inside the budget)
    reverse:  L_g = 2    * min(l) / sqrt(sum l^2)  (deliberately outside)
    """
    if mode not in STACK_MODES:
        raise EnsembleError(f"unknown stacking mode {mode!r}")
    _check_members(members)
    reports = list(member_reports) if member_reports is not None else measure_member_llc(members, anchors, eps, cfg)
    ells = [r.value for r in reports]
    if meta is None:
        if heldout is None:
            raise EnsembleError("held-out data is required to train the meta-learner")
        meta = train_meta(members, heldout, train_cfg or TrainConfig())
    target = STACK_TARGET_FACTOR[mode] * stacking_budget(ells)
    scaled = rescale_to_bound(meta, target)
    lg = analytic_bound(scaled).value
    model = StackedEnsemble(
        list(members),
        scaled,
        lg,
        ells,
        mode,
        info={"eps": eps, "target_lg": target, "ascent": (cfg or AscentConfig()).to_dict()},
    )
    # postcondition: proposed stays inside the budget, reverse lands outside it
    if model.satisfies_stacking_condition() != (mode == PROPOSED):
        raise EnsembleError(
            f"stack-{mode}: certificate {model.certificate!r} vs min member constant {min(ells)!r}"
        )
    return model


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

MANIFEST_VERSION = 1


def save_manifest(model, path, member_paths: Sequence[str] | None = None, extra: dict | None = None) -> dict:
    """Write member/meta weight files next to ``path`` (unless given) and a JSON manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    if member_paths is None:
        member_paths = []
        for i, m in enumerate(model.members):
            p = Path(f"{stem}.member{i}.lnn")
            save_network(m, p)
            member_paths.append(p.name)
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "kind": model.kind,
        "mode": model.mode,
        "members": [str(p) for p in member_paths],
        "member_llc": [float(v) for v in model.member_llc],
        "certificate": float(model.certificate),
        "info": model.info,
    }
    if isinstance(model, BaggedEnsemble):
        doc["weights"] = model.weights.tolist()
    else:
        meta_path = Path(f"{stem}.meta.lnn")
        save_network(model.meta, meta_path)
        doc["meta"] = meta_path.name
        doc["certified_lg"] = float(model.certified_lg)
        doc["stacking_budget"] = stacking_budget(model.member_llc)
        doc["satisfies_condition"] = bool(model.satisfies_stacking_condition())
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return doc


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_manifest(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("manifest_version") != MANIFEST_VERSION:
        raise EnsembleError(f"unsupported manifest version {doc.get('manifest_version')}")
    members = [load_network(_resolve(path.parent, p)) for p in doc["members"]]
    if doc["kind"] == "bag":
        return BaggedEnsemble(members, BaggingWeights(np.array(doc["weights"])), doc["member_llc"], doc["mode"], doc.get("info", {}))
    if doc["kind"] == "stack":
        meta = load_network(_resolve(path.parent, doc["meta"]))
        return StackedEnsemble(members, meta, doc["certified_lg"], doc["member_llc"], doc["mode"], doc.get("info", {}))
    raise EnsembleError(f"unknown ensemble kind {doc['kind']!r}")


def load_model(path):
    """A single network weight file or an ensemble manifest."""
    path = Path(path)
    if path.suffix == ".json":
        return load_manifest(path)
    return load_network(path)
