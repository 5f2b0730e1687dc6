"""
One-vs-rest sigmoid heads with extreme-value calibration for open-set
recognition.

Pipeline:

1. :func:`train_bank` trains one small ReLU/sigmoid network per known class
   (match -> 1, nonmatch -> 0) over a shared feature space.
2. :func:`partition_scores` / :func:`extract_tails` collect, per class, the
   lowest match scores and the highest nonmatch scores.
3. :func:`calibrate` fits a Weibull to the low match tail and another to
   the negated high nonmatch tail.
4. :func:`membership_probability` multiplies "probability of being a
   positive" by "probability of not being a negative";
   :func:`recognize` accepts the arg-max class if that product reaches
   ``theta`` and rejects the sample as unknown otherwise.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import netcore
from .data import LabeledDataset, open_split
from .distributions import WeibullParams, fit_weibull, weibull_cdf
from .exceptions import (
    ConfigurationError,
    ContractError,
    DataError,
    DegenerateTailError,
    InsufficientTailError,
)
from .netcore import FeedforwardNet, TrainConfig

UNKNOWN = "<unknown>"
BASELINES = ("none", "softmax", "single_sigmoid")
TOPOLOGY = "separate-heads-shared-input"

DEFAULT_THETA_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
DEFAULT_ALPHA_GRID = (0.05, 0.1, 0.2, 0.3, 0.5)
MIN_TAIL = 3


def derive_seed(seed, *keys) -> int:
    """Independent 64-bit seed for a sub-task, stable across runs."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def n_threads():
    """Worker count from ``OSR_THREADS`` (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("OSR_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _parallel_map(fn, items):
    items = list(items)
    workers = min(n_threads(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- model bank --------------------------------------------------------------

@dataclass
class OvrModelBank:
    heads: list
    class_labels: list
    baseline: FeedforwardNet | None = None
    baseline_kind: str = "none"
    arch: list = field(default_factory=list)
    histories: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.heads) != len(self.class_labels):
            raise ContractError("one head per class required")
        if not self.heads:
            raise ContractError("empty model bank")
        dims = {h.input_dim for h in self.heads}
        if len(dims) != 1:
            raise ContractError("all heads must share the input dimension")
        for h in self.heads:
            if h.output_dim != 1 or h.output_activation != "sigmoid":
                raise ContractError("heads must have a single sigmoid output")

    @property
    def input_dim(self):
        return self.heads[0].input_dim

    @property
    def n_classes(self):
        return len(self.heads)

    def logits(self, X):
        return np.column_stack([h.logits(X)[:, 0] for h in self.heads])

    def scores(self, X):
        """Sigmoid score of every head, shape ``(n, n_classes)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.column_stack([h.predict(X)[:, 0] for h in self.heads])

    def representation(self, X):
        """Concatenated last-hidden-layer activations of all heads."""
        return np.hstack([h.hidden_representation(X) for h in self.heads])

    def baseline_representation(self, X):
        if self.baseline is None:
            raise ConfigurationError("model bank has no baseline head")
        return self.baseline.hidden_representation(X)

    def to_dict(self):
        return {
            "classes": list(self.class_labels),
            "heads": [h.to_dict() for h in self.heads],
            "baseline": None if self.baseline is None else self.baseline.to_dict(),
            "baseline_kind": self.baseline_kind,
            "arch": list(self.arch),
            "topology": TOPOLOGY,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            heads=[FeedforwardNet.from_dict(h) for h in d["heads"]],
            class_labels=list(d["classes"]),
            baseline=None if d.get("baseline") is None else FeedforwardNet.from_dict(d["baseline"]),
            baseline_kind=d.get("baseline_kind", "none"),
            arch=list(d.get("arch", [])),
        )


def score(bank: OvrModelBank, x):
    """Per-class sigmoid scores for a single feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != bank.input_dim:
        raise ContractError(f"expected a vector of length {bank.input_dim}")
    return bank.scores(x[None, :])[0]


def train_bank(features: LabeledDataset, arch: Sequence[int] = (10,),
               cfg: TrainConfig | None = None, with_baseline: str = "none") -> OvrModelBank:
    """Train one binary head per class, plus an optional baseline head.

    Head ``i`` is initialised and shuffled from seeds derived from
    ``(cfg.seed, i)``, so heads are independent and may train in parallel.
    """
    cfg = cfg or TrainConfig()
    if with_baseline not in BASELINES:
        raise ConfigurationError(f"with_baseline must be one of {BASELINES}")
    classes = features.classes
    counts = features.class_counts()
    if len(classes) < 2:
        raise ConfigurationError("need at least two classes to train a one-vs-rest bank")
    thin = [c for c, n in counts.items() if n < 2]
    if thin:
        raise ConfigurationError(f"classes with fewer than 2 samples: {thin}")
    if UNKNOWN in classes:
        raise ConfigurationError(f"{UNKNOWN!r} is reserved and cannot be a class label")
    X, y = features.features, features.y_index
    arch = [int(h) for h in arch]

    def fit_head(i):
        net = netcore.init_net(X.shape[1], arch, 1, "sigmoid", seed=derive_seed(cfg.seed, 1, i))
        hcfg = replace(cfg, seed=derive_seed(cfg.seed, 2, i))
        return netcore.train(net, X, (y == i).astype(float)[:, None], "bce", hcfg)

    results = _parallel_map(fit_head, range(len(classes)))
    heads = [r[0] for r in results]
    histories = {c: r[1] for c, r in zip(classes, results)}

    baseline = None
    if with_baseline != "none":
        onehot = np.eye(len(classes))[y]
        bcfg = replace(cfg, seed=derive_seed(cfg.seed, 3))
        if with_baseline == "softmax":
            net = netcore.init_net(X.shape[1], arch, len(classes), "softmax",
                                   seed=derive_seed(cfg.seed, 4))
            baseline, hist = netcore.train(net, X, onehot, "ce", bcfg)
        else:
            net = netcore.init_net(X.shape[1], [], len(classes), "sigmoid",
                                   seed=derive_seed(cfg.seed, 4))
            baseline, hist = netcore.train(net, X, onehot, "bce", bcfg)
        histories["__baseline__"] = hist

    return OvrModelBank(heads, classes, baseline, with_baseline, arch, histories)


# -- score partitions and tails ----------------------------------------------

@dataclass
class ScorePartition:
    cls: str
    match_scores: np.ndarray
    nonmatch_scores: np.ndarray


@dataclass
class TailSample:
    values: np.ndarray
    side: str  # "lower_match" or "upper_nonmatch"


def partition_scores(bank: OvrModelBank, features: LabeledDataset):
    """Split every head's scores on ``features`` into match / nonmatch sets."""
    labels = set(features.labels.tolist())
    bank_classes = set(bank.class_labels)
    if not labels & bank_classes:
        raise DataError("dataset shares no class with the model bank")
    stray = labels - bank_classes
    if stray:
        raise DataError(f"labels not known to the model bank: {sorted(stray)}")
    S = bank.scores(features.features)
    out = []
    for j, c in enumerate(bank.class_labels):
        m = features.labels == c
        out.append(ScorePartition(c, S[m, j].copy(), S[~m, j].copy()))
    return out


def tail_size(n, alpha, min_n=MIN_TAIL):
    return min(n, max(min_n, int(math.ceil(alpha * n - 1e-12))))


def extract_tails(partition: ScorePartition, alpha: float, min_n: int = MIN_TAIL):
    """Lowest match scores and highest nonmatch scores, ``alpha`` of each."""
    if not 0 < alpha <= 1:
        raise ContractError("alpha must be in (0, 1]")
    pos = np.sort(np.asarray(partition.match_scores, dtype=float), kind="stable")
    neg = np.sort(np.asarray(partition.nonmatch_scores, dtype=float), kind="stable")
    if pos.size < min_n:
        raise InsufficientTailError(
            f"class {partition.cls!r}: {pos.size} match scores, need {min_n}"
        )
    if neg.size < min_n:
        raise InsufficientTailError(
            f"class {partition.cls!r}: {neg.size} nonmatch scores, need {min_n}"
        )
    e_pos = pos[:tail_size(pos.size, alpha, min_n)]
    e_neg = neg[neg.size - tail_size(neg.size, alpha, min_n):]
    return TailSample(e_pos, "lower_match"), TailSample(e_neg, "upper_nonmatch")


# -- calibration -------------------------------------------------------------

@dataclass
class ClassEvtParams:
    """Tail models for one class.

    ``pos`` models the lower match tail; ``neg`` the negated upper nonmatch
    tail. A degenerate tail is replaced by a unit step at ``*_step``.
    """

    cls: str
    pos: WeibullParams | None
    neg: WeibullParams | None
    alpha: float
    tail_counts: tuple
    pos_step: float | None = None
    neg_step: float | None = None

    @property
    def fallback(self):
        return self.pos is None or self.neg is None

    def p_positive(self, s):
        s = np.asarray(s, dtype=float)
        if self.pos is None:
            return (s >= self.pos_step).astype(float)
        return np.clip(weibull_cdf(self.pos, s), 0.0, 1.0)

    def p_not_negative(self, s):
        s = np.asarray(s, dtype=float)
        if self.neg is None:
            return (s > self.neg_step).astype(float)
        return np.clip(1.0 - weibull_cdf(self.neg, -s), 0.0, 1.0)

    def to_dict(self):
        d = {
            "class": self.cls,
            "pos": None if self.pos is None else self.pos.to_dict(),
            "neg": None if self.neg is None else self.neg.to_dict(),
            "alpha": self.alpha,
            "tail_counts": list(self.tail_counts),
        }
        if self.fallback:
            d["fallback"] = {"pos_step": self.pos_step, "neg_step": self.neg_step}
        return d

    @classmethod
    def from_dict(cls, d):
        fb = d.get("fallback") or {}
        return cls(
            cls=d["class"],
            pos=None if d["pos"] is None else WeibullParams.from_dict(d["pos"]),
            neg=None if d["neg"] is None else WeibullParams.from_dict(d["neg"]),
            alpha=float(d["alpha"]),
            tail_counts=tuple(d["tail_counts"]),
            pos_step=fb.get("pos_step"),
            neg_step=fb.get("neg_step"),
        )


def _fit_or_step(values, min_n):
    try:
        return fit_weibull(values, min_n).params(), None
    except DegenerateTailError:
        return None, float(values[0])


def calibrate_partition(partition: ScorePartition, alpha: float, min_n: int = MIN_TAIL) -> ClassEvtParams:
    e_pos, e_neg = extract_tails(partition, alpha, min_n)
    pos, pos_step = _fit_or_step(e_pos.values, min_n)
    neg, neg_step = _fit_or_step(-e_neg.values, min_n)
    if neg is None:
        neg_step = -neg_step  # back on the score scale
    return ClassEvtParams(partition.cls, pos, neg, float(alpha),
                          (int(e_pos.values.size), int(e_neg.values.size)),
                          pos_step, neg_step)


def calibrate(bank: OvrModelBank, features: LabeledDataset, alpha: float,
              min_n: int = MIN_TAIL) -> list:
    """Fit tail models for every class of ``bank`` on ``features``."""
    parts = partition_scores(bank, features)
    return _parallel_map(lambda p: calibrate_partition(p, alpha, min_n), parts)


def membership_probability(evt: ClassEvtParams, s):
    """P(positive) * P(not negative) for raw score(s) ``s``."""
    out = evt.p_positive(s) * evt.p_not_negative(s)
    return float(out) if np.ndim(out) == 0 else out


# -- recognizer --------------------------------------------------------------

@dataclass
class Recognition:
    label: str
    probability: float
    per_class: dict

    @property
    def is_unknown(self):
        return self.label == UNKNOWN

    def to_dict(self):
        return {"label": None if self.is_unknown else self.label,
                "unknown": self.is_unknown,
                "probability": self.probability,
                "per_class": self.per_class}


def decide(P, theta, classes):
    """Apply the accept/reject rule row-wise to a probability matrix.

    Returns an object array of labels with :data:`UNKNOWN` for rejections.
    Ties at the maximum go to the lowest class index.
    """
    P = np.atleast_2d(P)
    best = np.argmax(P, axis=1)
    pmax = P[np.arange(P.shape[0]), best]
    labels = np.asarray(classes, dtype=object)[best]
    labels[pmax < theta] = UNKNOWN
    return labels


@dataclass
class CalibratedModel:
    bank: OvrModelBank
    evt: list
    theta: float
    alpha: float
    seed: int = 0

    def __post_init__(self):
        if [e.cls for e in self.evt] != list(self.bank.class_labels):
            raise ContractError("calibration must cover every class of the bank, in order")
        if not 0 < self.theta < 1:
            raise ContractError("theta must be in (0, 1)")
        if not 0 < self.alpha <= 1:
            raise ContractError("alpha must be in (0, 1]")

    @property
    def classes(self):
        return list(self.bank.class_labels)

    def predict_proba(self, X):
        S = self.bank.scores(X)
        return np.column_stack([membership_probability(e, S[:, j]) for j, e in enumerate(self.evt)])

    def predict(self, X):
        return decide(self.predict_proba(X), self.theta, self.classes)

    def recognize(self, x):
        return recognize(self, x)

    def to_dict(self):
        d = self.bank.to_dict()
        d.update({
            "evt": [e.to_dict() for e in self.evt],
            "theta": self.theta,
            "alpha": self.alpha,
            "seed": int(self.seed),
        })
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(OvrModelBank.from_dict(d), [ClassEvtParams.from_dict(e) for e in d["evt"]],
                   float(d["theta"]), float(d["alpha"]), int(d.get("seed", 0)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def recognize(model: CalibratedModel, x) -> Recognition:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ContractError("recognize expects a single feature vector")
    P = model.predict_proba(x[None, :])[0]
    label = decide(P[None, :], model.theta, model.classes)[0]
    return Recognition(str(label), float(P.max()),
                       {c: float(p) for c, p in zip(model.classes, P)})


def raw_threshold_predict(bank: OvrModelBank, X, theta):
    """Uncalibrated ablation: threshold the raw sigmoid scores directly."""
    return decide(bank.scores(X), theta, bank.class_labels)


# -- cross-class validation --------------------------------------------------

@dataclass
class ValidationResult:
    theta: float
    alpha: float
    table: np.ndarray  # F-measure, shape (len(alpha_grid), len(theta_grid))
    theta_grid: list
    alpha_grid: list
    heldout: list
    raw_table: np.ndarray | None = None  # uncalibrated ablation, one row

    def rows(self):
        for i, a in enumerate(self.alpha_grid):
            for j, t in enumerate(self.theta_grid):
                yield {"theta": t, "alpha": a, "f_measure": float(self.table[i, j])}


def select_best(table, theta_grid, alpha_grid):
    """Arg-max of an (alpha x theta) table; ties go to smaller theta, then smaller alpha."""
    best, best_ij = -np.inf, (0, 0)
    for j in np.argsort(theta_grid, kind="stable"):
        for i in np.argsort(alpha_grid, kind="stable"):
            if table[i, j] > best:
                best, best_ij = table[i, j], (i, j)
    i, j = best_ij
    return float(theta_grid[j]), float(alpha_grid[i])


def cross_class_validate(features: LabeledDataset, arch=(10,), cfg: TrainConfig | None = None,
                         theta_grid=DEFAULT_THETA_GRID, alpha_grid=DEFAULT_ALPHA_GRID,
                         holdout_classes: int = 1, seed: int = 0, min_n: int = MIN_TAIL,
                         val_fraction: float = 0.2, with_raw: bool = False) -> ValidationResult:
    """Choose ``(theta, alpha)`` by treating some known classes as unknown.

    ``holdout_classes`` classes are drawn (seeded) as pseudo-unknowns; the
    rest are split per class into training and validation parts. One bank
    is trained, calibrated once per alpha, and scored for every theta with
    the open-set macro F-measure on the validation part plus all
    pseudo-unknown samples.
    """
    from .evaluation import ConfusionTally, open_f_measure

    cfg = cfg or TrainConfig()
    theta_grid = sorted(float(t) for t in theta_grid)
    alpha_grid = sorted(float(a) for a in alpha_grid)
    if not theta_grid or not alpha_grid:
        raise ConfigurationError("theta and alpha grids must be nonempty")
    C = features.n_classes
    if holdout_classes < 1 or C - holdout_classes < 2:
        raise ConfigurationError(
            f"cannot hold out {holdout_classes} of {C} classes and keep two known classes"
        )
    split = open_split(features, holdout_classes, 1.0 - val_fraction, seed)
    bank = train_bank(split.train, arch, cfg)
    val = split.test
    known = split.known_labels

    def f_for(labels_pred):
        return open_f_measure(ConfusionTally.from_predictions(val.labels, labels_pred, known))

    table = np.zeros((len(alpha_grid), len(theta_grid)))
    S = bank.scores(val.features)
    for i, a in enumerate(alpha_grid):
        evt = calibrate(bank, split.train, a, min_n)
        P = np.column_stack([membership_probability(e, S[:, j]) for j, e in enumerate(evt)])
        for j, t in enumerate(theta_grid):
            table[i, j] = f_for(decide(P, t, known))
    raw = None
    if with_raw:
        raw = np.array([[f_for(decide(S, t, known)) for t in theta_grid]])
    theta, alpha = select_best(table, theta_grid, alpha_grid)
    return ValidationResult(theta, alpha, table, theta_grid, alpha_grid,
                            split.unknown_labels, raw)


def fit_recognizer(features: LabeledDataset, arch=(10,), cfg: TrainConfig | None = None,
                   theta=None, alpha=None, min_n=MIN_TAIL, with_baseline="none",
                   **validation_kw):
    """Train, choose (theta, alpha) by cross-class validation if not given, calibrate."""
    cfg = cfg or TrainConfig()
    result = None
    if theta is None or alpha is None:
        kw = dict(validation_kw)
        if theta is not None:
            kw["theta_grid"] = [theta]
        if alpha is not None:
            kw["alpha_grid"] = [alpha]
        result = cross_class_validate(features, arch, cfg, min_n=min_n,
                                      seed=kw.pop("seed", cfg.seed), **kw)
        theta, alpha = result.theta, result.alpha
    bank = train_bank(features, arch, cfg, with_baseline)
    evt = calibrate(bank, features, alpha, min_n)
    return CalibratedModel(bank, evt, theta, alpha, cfg.seed), result
