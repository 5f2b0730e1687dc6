"""
Evaluation tools: openness, open-set F-measure, K-means discretised KL
divergence with a paired t-test, a grid estimator of open space risk, and
an in-region monotonicity check for sigmoid heads.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize

from .distributions import student_t_sf
from .exceptions import ConfigurationError, ContractError, DomainError, UnsupportedError
from .netcore import FeedforwardNet, region_weights
from .openset import UNKNOWN, derive_seed

F_MEASURE_CONVENTION = (
    "macro average of per-class F1 over known classes; a known-class prediction "
    "on an unknown sample is a false positive, a rejected known sample a false "
    "negative; classes with no support and no predictions are excluded"
)
KL_PSEUDO_COUNT = 0.5


# -- openness ----------------------------------------------------------------

@dataclass(frozen=True)
class OpennessSpec:
    n_train: int
    n_eval: int
    n_recognize: int

    def __post_init__(self):
        if min(self.n_train, self.n_eval, self.n_recognize) < 1:
            raise DomainError("class counts must be positive")
        if self.n_eval < self.n_train:
            raise DomainError("evaluation classes must include the training classes")
        if 2 * self.n_train > self.n_eval + self.n_recognize:
            raise DomainError("2*NC_T must not exceed NC_E + NC_R")


def openness(spec: OpennessSpec) -> float:
    return 1.0 - math.sqrt(2.0 * spec.n_train / (spec.n_eval + spec.n_recognize))


# -- F-measure ---------------------------------------------------------------

@dataclass
class ConfusionTally:
    known: list
    tp: dict
    fp: dict
    fn: dict
    unknown_routed: dict = field(default_factory=dict)
    n_known_samples: int = 0
    n_unknown_samples: int = 0
    n_rejected: int = 0
    confusion: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.n_known_samples + self.n_unknown_samples

    @classmethod
    def from_predictions(cls, y_true, y_pred, known):
        known = [str(k) for k in known]
        kset = set(known)
        tp = dict.fromkeys(known, 0)
        fp = dict.fromkeys(known, 0)
        fn = dict.fromkeys(known, 0)
        routed = {}
        confusion = {}
        n_known = n_unknown = n_rej = 0
        for t, p in zip(y_true, y_pred):
            t, p = str(t), str(p)
            true_key = t if t in kset else UNKNOWN
            pred_key = p if p in kset else UNKNOWN
            confusion[(true_key, pred_key)] = confusion.get((true_key, pred_key), 0) + 1
            if pred_key == UNKNOWN:
                n_rej += 1
            if true_key == UNKNOWN:
                n_unknown += 1
                routed[pred_key] = routed.get(pred_key, 0) + 1
                if pred_key != UNKNOWN:
                    fp[pred_key] += 1
                continue
            n_known += 1
            if pred_key == true_key:
                tp[true_key] += 1
            else:
                fn[true_key] += 1
                if pred_key != UNKNOWN:
                    fp[pred_key] += 1
        return cls(known, tp, fp, fn, routed, n_known, n_unknown, n_rej, confusion)

    def per_class_f1(self):
        out = {}
        for c in self.known:
            denom = 2 * self.tp[c] + self.fp[c] + self.fn[c]
            if denom:
                out[c] = 2 * self.tp[c] / denom
        return out

    def to_dict(self):
        return {
            "known": self.known,
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "unknown_routed": self.unknown_routed,
            "n_known_samples": self.n_known_samples,
            "n_unknown_samples": self.n_unknown_samples,
            "n_rejected": self.n_rejected,
            "confusion": [
                {"true": t, "pred": p, "count": n}
                for (t, p), n in sorted(self.confusion.items())
            ],
        }


def open_f_measure(tally: ConfusionTally) -> float:
    """Macro F1 over known classes (see :data:`F_MEASURE_CONVENTION`)."""
    if tally.n_known_samples == 0:
        raise DomainError("no known-class samples were evaluated")
    f1 = tally.per_class_f1()
    return float(np.mean(list(f1.values()))) if f1 else 0.0


# -- K-means -----------------------------------------------------------------

class KMeansResult(NamedTuple):
    centroids: np.ndarray
    labels: np.ndarray
    objective: list  # within-cluster sum of squares after each assignment
    n_iter: int


def _assign(X, C):
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    lab = np.argmin(d2, axis=1)
    return lab, float(d2[np.arange(len(X)), lab].sum())


def farthest_point_init(X, k, rng):
    idx = [int(rng.integers(len(X)))]
    dmin = ((X - X[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dmin))
        idx.append(nxt)
        dmin = np.minimum(dmin, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[idx].copy()


def lloyd(points, k, seed=0, iters=100) -> KMeansResult:
    """Lloyd's algorithm from a seeded farthest-point start.

    An emptied cluster keeps its previous centroid, so the objective never
    increases between iterations.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if k < 1 or k > n:
        raise ConfigurationError(f"k must be in [1, {n}], got {k}")
    C = farthest_point_init(X, k, np.random.default_rng(seed))
    labels, obj = _assign(X, C)
    history = [obj]
    it = 0
    for it in range(1, iters + 1):
        for j in range(k):
            members = labels == j
            if members.any():
                C[j] = X[members].mean(axis=0)
        new_labels, obj = _assign(X, C)
        history.append(obj)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansResult(C, labels, history, it)


def kmeans(points, k, seed=0, iters=100):
    return lloyd(points, k, seed, iters).centroids


# -- KL divergence -----------------------------------------------------------

@dataclass
class DiscretizedDistribution:
    centroids: np.ndarray
    q: np.ndarray


def discretize(points, centroids, pseudo_count=KL_PSEUDO_COUNT):
    X = np.atleast_2d(np.asarray(points, dtype=float))
    lab, _ = _assign(X, np.asarray(centroids, dtype=float))
    counts = np.bincount(lab, minlength=len(centroids)).astype(float) + pseudo_count
    return DiscretizedDistribution(np.asarray(centroids), counts / counts.sum())


def kl_divergence(q_other, q_ref) -> float:
    q_other = np.asarray(q_other, dtype=float)
    q_ref = np.asarray(q_ref, dtype=float)
    m = q_other > 0
    return float(np.sum(q_other[m] * np.log(q_other[m] / q_ref[m])))


def kl_discretized(reference_points, other_points, k, seed=0, iters=100,
                   pseudo_count=KL_PSEUDO_COUNT) -> float:
    """KL(q_other || q_reference) over K-means areas of the reference class."""
    R = np.atleast_2d(np.asarray(reference_points, dtype=float))
    O = np.atleast_2d(np.asarray(other_points, dtype=float))
    if len(R) == 0 or len(O) == 0:
        raise ContractError("both point sets must be nonempty")
    if R.shape[1] != O.shape[1]:
        raise ContractError("dimensionality mismatch")
    C = kmeans(R, k, seed, iters)
    return max(0.0, kl_divergence(discretize(O, C, pseudo_count).q,
                                  discretize(R, C, pseudo_count).q))


def paired_t_test(a, b):
    """One-sided paired t-test of mean(a - b) > 0. Returns ``(t, p)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ContractError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise ContractError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean > 0:
            return math.inf, 0.0
        if mean < 0:
            return -math.inf, 1.0
        return 0.0, 0.5
    t = mean / (sd / math.sqrt(n))
    return t, student_t_sf(t, n - 1)


@dataclass
class KLReport:
    rows: list   # one dict per (known, unknown, k)
    tests: list  # one dict per k

    def to_dict(self):
        return {"rows": self.rows, "tests": self.tests}


def kl_comparison_study(ovr_features_by_class, softmax_features_by_class, known_classes,
                        unknown_classes, k_list, seed=0) -> KLReport:
    """Compare known/unknown KL divergences under two representations."""
    missing = set(ovr_features_by_class) ^ set(softmax_features_by_class)
    if missing:
        raise ContractError(f"feature banks cover different classes: {sorted(missing)}")
    rows, tests = [], []
    for k in k_list:
        a, b = [], []
        for yi, y in enumerate(known_classes):
            s = derive_seed(seed, k, yi)
            for chi in unknown_classes:
                kl_o = kl_discretized(ovr_features_by_class[y], ovr_features_by_class[chi], k, s)
                kl_s = kl_discretized(softmax_features_by_class[y], softmax_features_by_class[chi], k, s)
                rows.append({"known": y, "unknown": chi, "k": int(k),
                             "kl_ovr": kl_o, "kl_softmax": kl_s})
                a.append(kl_o)
                b.append(kl_s)
        t, p = paired_t_test(a, b)
        tests.append({"k": int(k), "n_pairs": len(a), "t": t, "p_one_sided": p,
                      "mean_kl_ovr": float(np.mean(a)), "mean_kl_softmax": float(np.mean(b))})
    return KLReport(rows, tests)


# -- open space risk ---------------------------------------------------------

def enclosing_ball(points):
    """Minimum enclosing ball (numerically) of a small point set."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    c0 = P.mean(axis=0)
    if len(P) == 1:
        return c0, 0.0
    res = minimize(lambda c: np.max(((P - c) ** 2).sum(axis=1)), c0, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000})
    c = res.x if res.fun <= np.max(((P - c0) ** 2).sum(axis=1)) else c0
    return c, float(np.sqrt(np.max(((P - c) ** 2).sum(axis=1))))


@dataclass
class RiskGrid:
    center: np.ndarray
    radius: float
    resolution: int
    coords: np.ndarray
    scores: np.ndarray
    in_sp: np.ndarray
    in_delta: np.ndarray
    positive: np.ndarray
    probability: np.ndarray | None = None

    @property
    def in_open(self):
        return self.in_sp & ~self.in_delta

    def to_csv(self, path):
        d = self.coords.shape[1]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = [f"x{j}" for j in range(d)] + ["score", "in_sp", "in_delta", "in_open", "positive"]
            if self.probability is not None:
                head.append("probability")
            w.writerow(head)
            for i in range(len(self.scores)):
                row = [repr(float(v)) for v in self.coords[i]] + [
                    repr(float(self.scores[i])), int(self.in_sp[i]), int(self.in_delta[i]),
                    int(self.in_open[i]), int(self.positive[i])]
                if self.probability is not None:
                    row.append(repr(float(self.probability[i])))
                w.writerow(row)


class RiskResult(NamedTuple):
    risk: float
    undefined: bool
    grid: RiskGrid


def ball_grid(center, radius, res):
    d = len(center)
    axis = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    mesh = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    inside = (mesh ** 2).sum(axis=1) <= 1.0
    return center + radius * mesh[inside]


def open_space_risk(net: FeedforwardNet, cls, train_points, delta, r, grid_res=128,
                    ball_margin=0.25, cutoff=0.5, prob_fn=None) -> RiskResult:
    """Grid estimate of open space risk for one sigmoid output.

    The bounding ball is the minimum enclosing ball of ``train_points``
    (the class's positive training features) with radius scaled by
    ``1 + ball_margin``. A cell is positively labeled when
    ``prob_fn(score) >= cutoff`` (or ``score >= cutoff`` without
    ``prob_fn``). Risk is the fraction of positively labeled cells of the
    positive space (score > ``delta``) that fall outside every soft
    margin ``score >= score(h_i) - r``. An empty denominator sets
    ``undefined`` and reports risk 0.
    """
    P = np.atleast_2d(np.asarray(train_points, dtype=float))
    d = P.shape[1]
    if d > 3:
        raise UnsupportedError(f"grid risk estimator supports dimension <= 3, got {d}")
    if grid_res < 16:
        raise ContractError("grid_res must be at least 16")
    center, radius = enclosing_ball(P)
    radius = max(radius, 1e-12) * (1.0 + ball_margin)
    cells = ball_grid(center, radius, grid_res)

    scores = net.predict(cells)[:, cls]
    train_scores = net.predict(P)[:, cls]
    in_sp = scores > delta
    in_delta = scores >= train_scores.min() - r
    prob = None
    if prob_fn is None:
        positive = scores >= cutoff
    else:
        prob = np.asarray(prob_fn(scores), dtype=float)
        positive = prob >= cutoff
    grid = RiskGrid(center, radius, grid_res, cells, scores, in_sp, in_delta, positive, prob)
    denom = int(np.sum(positive & in_sp))
    if denom == 0:
        return RiskResult(0.0, True, grid)
    return RiskResult(float(np.sum(positive & grid.in_open)) / denom, False, grid)


# -- abating check -----------------------------------------------------------

class AbatingReport(NamedTuple):
    violations: list   # indices of probes whose score did not decrease
    checked: int
    zero_weight: int
    left_region: int

    @property
    def in_region_fraction(self):
        tried = self.checked + self.left_region
        return self.checked / tried if tried else 1.0

    @property
    def sufficient(self):
        return self.in_region_fraction >= 0.9


def abating_check(net: FeedforwardNet, cls, probe_points, step) -> AbatingReport:
    """Check that a step along ``-W`` lowers the score inside each ReLU region.

    ``W`` is the region-effective weight vector of output ``cls`` at the
    probe. Probes whose step leaves the region, or whose ``W`` is zero, are
    counted but not judged. The comparison uses the logit, which orders
    identically to the sigmoid score without saturating in floating point.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    X = np.atleast_2d(np.asarray(probe_points, dtype=float))
    patterns = net.patterns(X)
    logits = net.logits(X)[:, cls]
    violations, checked, zero_w, left = [], 0, 0, 0
    for i, x in enumerate(X):
        W, _ = region_weights(net, patterns[i], cls)
        norm = np.linalg.norm(W)
        if norm == 0:
            zero_w += 1
            continue
        x2 = x - step * W / norm
        if not np.array_equal(net.patterns(x2)[0], patterns[i]):
            left += 1
            continue
        checked += 1
        if not net.logits(x2)[0, cls] < logits[i]:
            violations.append(i)
    return AbatingReport(violations, checked, zero_w, left)
