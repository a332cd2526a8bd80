"""
Downstream evaluation of learned representations.

Clustering: k-means with k equal to the class count, scored by
Hungarian-matched accuracy and NMI. Classification: a linear one-vs-rest
support vector classifier on the manifest's train/test split, scored by
accuracy and macro F-score. Every metric is repeated over seeded runs and
aggregated into a MetricsReport.
"""

import re
import logging
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.metrics import confusion_matrix, normalized_mutual_info_score
from sklearn.metrics.cluster import contingency_matrix
from sklearn.multiclass import OneVsRestClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import LinearSVC

logger = logging.getLogger(__name__)

_SELECTOR = re.compile(r"^(c|s(\d+)|cs(\d+)|concat)$")


def _check_labelings(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true).ravel(), np.asarray(y_pred).ravel()
    if y_true.size == 0:
        raise ValueError("cannot score empty label arrays")
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label arrays differ in length: {y_true.size} vs {y_pred.size}")
    return y_true, y_pred


def hungarian_accuracy(y_true, y_pred) -> float:
    """Accuracy under the best one-to-one mapping of clusters onto classes."""
    y_true, y_pred = _check_labelings(y_true, y_pred)
    counts = contingency_matrix(y_true, y_pred)
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return float(counts[rows, cols].sum()) / y_true.size


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(y_true, y_pred) -> float:
    """I(Y; C) / mean(H(Y), H(C)); 0 when either labeling is constant."""
    y_true, y_pred = _check_labelings(y_true, y_pred)
    counts = contingency_matrix(y_true, y_pred)
    if _entropy(counts.sum(axis=1)) == 0.0 or _entropy(counts.sum(axis=0)) == 0.0:
        return 0.0
    score = normalized_mutual_info_score(y_true, y_pred, average_method="arithmetic")
    return float(min(max(score, 0.0), 1.0))


def f_score(tp: int, fp: int, fn: int) -> float:
    """Binary F1 = 2PR / (P + R); 0 when there are no true positives."""
    if min(tp, fp, fn) < 0:
        raise ValueError(f"counts must be non-negative, got tp={tp} fp={fp} fn={fn}")
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def macro_f_score(y_true, y_pred, labels: Optional[Sequence[int]] = None) -> float:
    """Unweighted mean of per-class F-scores."""
    y_true, y_pred = _check_labelings(y_true, y_pred)
    labels = np.unique(y_true) if labels is None else np.asarray(labels)
    cm = confusion_matrix(y_true, y_pred, labels=labels)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return float(np.mean([f_score(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)]))


class RepresentationSelector(BaseModel):
    """Which code to evaluate: c, one s^i, [c, s^i], or everything concatenated."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["c", "s", "cs", "concat"]
    view: Optional[int] = None

    @model_validator(mode="after")
    def _check_view(self):
        needs_view = self.kind in ("s", "cs")
        if needs_view and (self.view is None or self.view < 1):
            raise ValueError(f"selector '{self.kind}' needs a 1-based view index")
        if not needs_view and self.view is not None:
            raise ValueError(f"selector '{self.kind}' takes no view index")
        return self

    @classmethod
    def parse(cls, text: str) -> "RepresentationSelector":
        match = _SELECTOR.match(text.strip())
        if not match:
            raise ValueError(f"Unknown selector '{text}', expected c, s<i>, cs<i> or concat")
        name = match.group(1)
        if name.startswith("cs"):
            return cls(kind="cs", view=int(match.group(3)))
        if name.startswith("s"):
            return cls(kind="s", view=int(match.group(2)))
        return cls(kind=name)

    @property
    def name(self) -> str:
        return f"{self.kind}{self.view}" if self.view is not None else self.kind

    def dim(self, d_c: int, d_s: int, n_views: int) -> int:
        return {"c": d_c, "s": d_s, "cs": d_c + d_s, "concat": d_c + n_views * d_s}[self.kind]

    def select(self, c: np.ndarray, s: np.ndarray) -> np.ndarray:
        """c is (N, d_c); s is (N, v, d_s)."""
        if self.view is not None and self.view > s.shape[1]:
            raise ValueError(f"selector '{self.name}' refers to view {self.view} of {s.shape[1]}")
        if self.kind == "c":
            return np.asarray(c)
        if self.kind == "s":
            return np.asarray(s[:, self.view - 1])
        if self.kind == "cs":
            return np.concatenate([c, s[:, self.view - 1]], axis=1)
        return np.concatenate([c, s.reshape(s.shape[0], -1)], axis=1)


def all_selectors(n_views: int) -> List[str]:
    return ["c"] + [f"s{i}" for i in range(1, n_views + 1)] + [f"cs{i}" for i in range(1, n_views + 1)] + ["concat"]


class MetricsReport(BaseModel):
    task: Literal["clustering", "classification"]
    metric: str
    selector: str
    values: List[float]
    mean: float
    variance: float
    std: float

    @model_validator(mode="after")
    def _check_aggregates(self):
        if not self.values:
            raise ValueError("a metrics report needs at least one run")
        arr = np.asarray(self.values, dtype=np.float64)
        if abs(arr.mean() - self.mean) > 1e-12 or abs(arr.var() - self.variance) > 1e-12:
            raise ValueError(f"{self.metric}: stored aggregates do not match per-run values")
        return self

    @classmethod
    def from_values(cls, task: str, metric: str, selector: str, values: Sequence[float]) -> "MetricsReport":
        arr = np.asarray(values, dtype=np.float64)
        return cls(task=task, metric=metric, selector=selector, values=arr.tolist(),
                   mean=float(arr.mean()), variance=float(arr.var()), std=float(arr.std()))


def representation_features(latents, selector) -> np.ndarray:
    if isinstance(selector, str):
        selector = RepresentationSelector.parse(selector)
    return selector.select(latents.c, latents.s)


def kmeans_runs(features: np.ndarray, labels: np.ndarray, n_clusters: int, runs: int = 10, seed: int = 0,
                max_iter: int = 300) -> Dict[str, List[float]]:
    distinct = np.unique(features, axis=0).shape[0]
    if n_clusters > distinct:
        raise ValueError(f"k={n_clusters} exceeds the {distinct} distinct samples")
    scores = {"acc": [], "nmi": []}
    for run in range(runs):
        km = KMeans(n_clusters=n_clusters, n_init=1, max_iter=max_iter, random_state=seed + run)
        pred = km.fit_predict(features)
        scores["acc"].append(hungarian_accuracy(labels, pred))
        scores["nmi"].append(nmi(labels, pred))
    return scores


def cluster_eval(latents, selector="c", n_classes: Optional[int] = None, runs: int = 10, seed: int = 0,
                 max_iter: int = 300) -> Dict[str, MetricsReport]:
    """k-means over `runs` fresh initialisations; returns ACC and NMI reports."""
    if latents.labels is None:
        raise ValueError("clustering evaluation needs labels")
    selector = RepresentationSelector.parse(selector) if isinstance(selector, str) else selector
    features = representation_features(latents, selector)
    labels = np.asarray(latents.labels)
    k = n_classes or len(np.unique(labels))
    scores = kmeans_runs(features, labels, k, runs=runs, seed=seed, max_iter=max_iter)
    logger.info(f"Clustering [{selector.name}]: ACC={np.mean(scores['acc']):.4f} NMI={np.mean(scores['nmi']):.4f}")
    return {
        "acc": MetricsReport.from_values("clustering", "acc", selector.name, scores["acc"]),
        "nmi": MetricsReport.from_values("clustering", "nmi", selector.name, scores["nmi"]),
    }


def svc_runs(x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray, y_test: np.ndarray,
             runs: int = 10, seed: int = 0, C: float = 1.0) -> Dict[str, List[float]]:
    missing = sorted(set(np.unique(y_test).tolist()) - set(np.unique(y_train).tolist()))
    if missing:
        raise ValueError(f"classes {missing} are absent from the train split")
    if len(np.unique(y_train)) < 2:
        raise ValueError("classification needs at least two classes in the train split")
    labels = np.unique(np.concatenate([y_train, y_test]))
    scores = {"acc": [], "f_score": []}
    for run in range(runs):
        clf = make_pipeline(
            StandardScaler(),
            OneVsRestClassifier(LinearSVC(C=C, dual="auto", max_iter=5000, random_state=seed + run)),
        )
        clf.fit(x_train, y_train)
        pred = clf.predict(x_test)
        scores["acc"].append(float(np.mean(pred == y_test)))
        scores["f_score"].append(macro_f_score(y_test, pred, labels=labels))
    return scores


def classify_eval(latents, selector="c", runs: int = 10, seed: int = 0, C: float = 1.0) -> Dict[str, MetricsReport]:
    """Linear SVC trained on the train rows, scored on the test rows."""
    if latents.labels is None:
        raise ValueError("classification evaluation needs labels")
    selector = RepresentationSelector.parse(selector) if isinstance(selector, str) else selector
    if len(latents.train_rows) == 0 or len(latents.test_rows) == 0:
        raise ValueError("classification needs a non-empty train/test split")
    features = representation_features(latents, selector)
    labels = np.asarray(latents.labels)
    train, test = np.asarray(latents.train_rows), np.asarray(latents.test_rows)
    scores = svc_runs(features[train], labels[train], features[test], labels[test], runs=runs, seed=seed, C=C)
    logger.info(f"Classification [{selector.name}]: ACC={np.mean(scores['acc']):.4f} "
                f"F={np.mean(scores['f_score']):.4f}")
    return {
        "acc": MetricsReport.from_values("classification", "acc", selector.name, scores["acc"]),
        "f_score": MetricsReport.from_values("classification", "f_score", selector.name, scores["f_score"]),
    }
