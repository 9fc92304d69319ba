"""Logistic classification of graph embeddings under cross-validation.

Class 1 (ASD) is the positive class throughout: sensitivity is the recall of
label 1 and specificity the recall of label 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateFitError, InfeasibleProtocolError, UndefinedMetricError, ValidationError

METRICS = ("accuracy", "sensitivity", "specificity", "auc")
PROTOCOLS = ("stratified-k", "leave-one-site-out")


@dataclass(frozen=True)
class LabeledEmbedding:
    graph_id: str
    vector: np.ndarray
    label: int
    site: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"{self.graph_id}: label must be 0 or 1")
        if not np.all(np.isfinite(self.vector)):
            raise ValidationError(f"{self.graph_id}: embedding contains non-finite values")


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "stratified-k"
    k: int = 10
    seed: int = 0
    reg: float = 1.0
    threshold: float = 0.5
    zscore: bool = True
    tol: float = 1e-6
    max_iter: int = 200_000

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValidationError(f"protocol must be one of {PROTOCOLS}")
        if self.reg < 0:
            raise ValidationError("reg must be non-negative")


# --- folds ---------------------------------------------------------------------

def stratified_kfold(labels, k: int, seed: int = 0) -> list[np.ndarray]:
    """Split indices into ``k`` disjoint folds with near-equal class counts.

    Each class is shuffled and dealt round-robin; the second class continues
    where the first left off so fold sizes differ by at most one overall.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise InfeasibleProtocolError("k must be at least 2")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    cursor = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise InfeasibleProtocolError(f"class {c} has {len(idx)} members, fewer than k={k}")
        idx = idx[rng.permutation(len(idx))]
        for i in idx:
            folds[cursor % k].append(int(i))
            cursor += 1
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def site_folds(sites) -> list[tuple[str, np.ndarray]]:
    sites = np.asarray(sites)
    return [(str(s), np.flatnonzero(sites == s)) for s in sorted(set(sites.tolist()))]


# --- classifier ----------------------------------------------------------------

def _objective(w, b, X, y, reg):
    z = X @ w + b
    # log(1 + e^z) - y z, evaluated stably
    loss = np.logaddexp(0.0, z) - y * z
    n = len(y)
    return loss.sum() / n + 0.5 * reg / n * (w @ w)


def logistic_loss(w, b, X, y, reg) -> float:
    """Mean log-loss plus ``reg / (2 n) * ||w||^2`` (bias unpenalized)."""
    return float(_objective(np.asarray(w), float(b), np.asarray(X, float), np.asarray(y, float), reg))


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def logistic_fit(X, y, reg: float = 1.0, tol: float = 1e-6, max_iter: int = 200_000):
    """L2-regularized logistic regression by gradient descent from zero.

    Uses step ``1/L`` with ``L`` the Lipschitz constant of the gradient and
    stops when the gradient norm drops below ``tol``. Returns ``(w, b, info)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise DegenerateFitError("training set contains a single class")
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    lip = 0.25 * np.linalg.eigvalsh(Xa.T @ Xa / n).max() + reg / n
    step = 1.0 / lip
    theta = np.zeros(d + 1)
    penalty = np.full(d + 1, reg / n)
    penalty[-1] = 0.0
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(Xa @ theta)
        grad = Xa.T @ (p - y) / n + penalty * theta
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            break
        theta -= step * grad
    info = {"iterations": it, "grad_norm": gnorm, "converged": gnorm < tol}
    return theta[:-1].copy(), float(theta[-1]), info


def predict_proba(w, b, X) -> np.ndarray:
    return _sigmoid(np.asarray(X, dtype=np.float64) @ w + b)


# --- metrics -------------------------------------------------------------------

def auc_score(y_true, scores) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(tie)."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    P = int((y_true == 1).sum())
    N = int((y_true == 0).sum())
    if P == 0 or N == 0:
        raise UndefinedMetricError("AUC needs both classes in y_true")
    ranks = rankdata(scores, method="average")
    rank_sum = ranks[y_true == 1].sum()
    return float((rank_sum - P * (P + 1) / 2) / (P * N))


def metrics(y_true, scores, threshold: float = 0.5) -> dict:
    """Accuracy, sensitivity, specificity and AUC; undefined entries are ``None``.

    Raises :class:`UndefinedMetricError` only when ``y_true`` is empty.
    """
    y_true = np.asarray(y_true).astype(np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(y_true) == 0:
        raise UndefinedMetricError("no items to score")
    pred = (scores >= threshold).astype(np.int64)
    tp = int(((pred == 1) & (y_true == 1)).sum())
    fn = int(((pred == 0) & (y_true == 1)).sum())
    tn = int(((pred == 0) & (y_true == 0)).sum())
    fp = int(((pred == 1) & (y_true == 0)).sum())
    both = (tp + fn) > 0 and (tn + fp) > 0
    return {
        "accuracy": (tp + tn) / len(y_true),
        "sensitivity": tp / (tp + fn) if tp + fn else None,
        "specificity": tn / (tn + fp) if tn + fp else None,
        "auc": auc_score(y_true, scores) if both else None,
        "confusion": {"tp": tp, "fn": fn, "tn": tn, "fp": fp},
    }


# --- protocols -----------------------------------------------------------------

@dataclass
class EvalReport:
    folds: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"folds": self.folds, "aggregate": self.aggregate, "config": self.config,
                "warnings": self.warnings, "positive_class": "label 1 (ASD)"}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(doc.get("folds", []), doc.get("aggregate", {}), doc.get("config", {}), doc.get("warnings", []))


def _zscore(train, test):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def fit_and_score(X_train, y_train, X_test, cfg: EvalConfig) -> np.ndarray:
    """Fit on the training partition only and return held-out probabilities."""
    if cfg.zscore:
        X_train, X_test = _zscore(X_train, X_test)
    w, b, _ = logistic_fit(X_train, y_train, cfg.reg, cfg.tol, cfg.max_iter)
    return predict_proba(w, b, X_test)


def aggregate(folds) -> dict:
    out = {}
    for m in METRICS:
        vals = [f["metrics"][m] for f in folds if f["metrics"].get(m) is not None]
        if vals:
            out[m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        else:
            out[m] = {"mean": None, "std": None, "n": 0}
    return out


def run_cv(ids, X, labels, sites=None, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Cross-validated logistic classification of embedding rows ``X``."""
    ids = list(ids)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if len(ids) != len(X) or len(y) != len(X):
        raise ValidationError("ids, embeddings and labels must have equal length")
    if not np.all(np.isfinite(X)):
        raise ValidationError("embeddings contain non-finite values")
    if set(np.unique(y).tolist()) - {0, 1}:
        raise ValidationError("labels must be 0 or 1")
    if cfg.protocol == "stratified-k":
        splits = [(f"fold{i}", idx) for i, idx in enumerate(stratified_kfold(y, cfg.k, cfg.seed))]
    else:
        if sites is None:
            raise InfeasibleProtocolError("leave-one-site-out needs a site per subject")
        splits = site_folds(sites)
        if len(splits) < 2:
            raise InfeasibleProtocolError("leave-one-site-out needs at least two sites")
    report = EvalReport(config=asdict(cfg))
    for name, test in splits:
        train = np.setdiff1d(np.arange(len(y)), test)
        if len(np.unique(y[train])) < 2:
            raise InfeasibleProtocolError(f"{name}: training partition contains a single class")
        scores = fit_and_score(X[train], y[train], X[test], cfg)
        m = metrics(y[test], scores, cfg.threshold)
        undefined = [k for k in METRICS if m[k] is None]
        if undefined:
            report.warnings.append(f"{name}: {', '.join(undefined)} undefined (held-out set has one class)")
        report.folds.append({
            "name": name,
            "n": int(len(test)),
            "n_positive": int(y[test].sum()),
            "members": [ids[i] for i in test],
            "metrics": m,
            "scores": [float(s) for s in scores],
        })
    report.aggregate = aggregate(report.folds)
    return report


def run_cv_items(items, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Same as :func:`run_cv` over :class:`LabeledEmbedding` records."""
    return run_cv([it.graph_id for it in items], np.stack([it.vector for it in items]),
                  [it.label for it in items], [it.site for it in items], cfg)


def accuracy_identity_gap(m: dict) -> float:
    """``|acc - (sens P + spec N) / (P + N)|`` from a metrics dict with a confusion entry."""
    c = m["confusion"]
    P, N = c["tp"] + c["fn"], c["tn"] + c["fp"]
    sens = m["sensitivity"] or 0.0
    spec = m["specificity"] or 0.0
    return abs(m["accuracy"] - (sens * P + spec * N) / (P + N)) if P + N else math.nan
