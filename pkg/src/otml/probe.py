"""Linear-probe evaluation of pretrained encoders and rank-based AUC."""

import copy
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import tensor as tn
from .exceptions import DegenerateInputError, SubsetError
from .optim import Adam


def compute_auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney statistic.

    Tied scores receive their midrank, so a tie between a positive and a
    negative counts one half.

    Parameters
    ----------
    scores : array_like of float
    labels : array_like of {0, 1}

    Returns
    -------
    float

    Examples
    --------
    >>> compute_auc([1, 2, 3, 4], [0, 1, 0, 1])
    0.75
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be binary 0/1")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def stratified_subset(labels, fraction, seed=0):
    """Indices of a class-balanced subset holding about ``fraction`` of the labels.

    The total ``round(fraction * n)`` is split evenly across classes, so the
    per-class counts differ by at most one (classes too small to meet their
    quota contribute everything they have).
    """
    labels = np.asarray(labels)
    if not 0 < fraction <= 1:
        raise SubsetError(f"label fraction must lie in (0, 1], got {fraction}")
    classes = np.unique(labels)
    total = int(round(fraction * len(labels)))
    base, extra = divmod(total, len(classes))
    if base < 1:
        raise SubsetError(
            f"fraction {fraction} of {len(labels)} labels leaves fewer than one sample for some of {len(classes)} classes"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    bonus = set(rng.permutation(len(classes))[:extra].tolist())
    chosen = []
    for k, cls in enumerate(classes):
        members = np.flatnonzero(labels == cls)
        quota = min(base + (k in bonus), len(members))
        chosen.append(rng.permutation(members)[:quota])
    return np.sort(np.concatenate(chosen))


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by full-batch gradient descent.

    Parameters
    ----------
    n_iter : int, default=500
        Gradient steps.
    lr : float, default=0.1
        Step size.
    standardize : bool, default=True
        Center and scale features with training statistics before fitting.
    """

    def __init__(self, n_iter=500, lr=0.1, standardize=True):
        self.n_iter = n_iter
        self.lr = lr
        self.standardize = standardize

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            scale = X.std(axis=0)
            self.scale_ = np.where(scale > 1e-12, scale, 1.0)
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        Z = (X - self.mean_) / self.scale_
        n, k = len(Z), len(self.classes_)
        onehot = np.eye(k)[encoded]
        self.coef_ = np.zeros((X.shape[1], k))
        self.intercept_ = np.zeros(k)
        for _ in range(self.n_iter):
            residual = (_softmax(Z @ self.coef_ + self.intercept_) - onehot) / n
            self.coef_ -= self.lr * (Z.T @ residual)
            self.intercept_ -= self.lr * residual.sum(axis=0)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


@dataclass
class ProbeResult:
    protocol: str
    label_fraction: float
    accuracy: float
    auc: float
    per_class_auc: tuple

    @staticmethod
    def csv_header(num_classes):
        return "protocol,fraction,accuracy,auc," + ",".join(f"auc_{k}" for k in range(num_classes))

    def to_csv_row(self):
        cells = [self.protocol, repr(float(self.label_fraction)), f"{self.accuracy:.6f}", f"{self.auc:.6f}"]
        cells += [f"{a:.6f}" for a in self.per_class_auc]
        return ",".join(cells)


def evaluate(probabilities, labels, classes):
    """Accuracy plus one-vs-rest AUC per class and their mean."""
    labels = np.asarray(labels)
    predicted = classes[np.argmax(probabilities, axis=1)]
    per_class = tuple(
        compute_auc(probabilities[:, k], (labels == cls).astype(int)) for k, cls in enumerate(classes)
    )
    return float(np.mean(predicted == labels)), float(np.mean(per_class)), per_class


def _finetune(model, probe, images, labels, steps, lr, seed, batch_size=64):
    """Jointly train the encoder and a head initialized from ``probe``."""
    model = copy.deepcopy(model)
    encoder = {k: v for k, v in model.params.items() if k.startswith("encoder.")}
    weight = tn.Tensor(probe.coef_ / probe.scale_[:, None], requires_grad=True, name="head.weight")
    bias = tn.Tensor(probe.intercept_ - (probe.mean_ / probe.scale_) @ probe.coef_, requires_grad=True, name="head.bias")
    optimizer = Adam({**encoder, "head.weight": weight, "head.bias": bias}, lr=lr, weight_decay=0.0)
    onehot = np.eye(len(probe.classes_))[np.searchsorted(probe.classes_, labels)]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    for _ in range(steps):
        index = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        optimizer.zero_grad()
        tn.reset_graph()
        logits = model.pool(model.encode(images[index])) @ weight + bias
        picked = tn.sum_(logits * tn.Tensor(onehot[index]), axis=1)
        loss = tn.mean(tn.logsumexp(logits, axis=1) - picked)
        tn.backward(loss)
        optimizer.step()
    tn.reset_graph()
    return model, weight.data.copy(), bias.data.copy()


def linear_probe(model, train, test, protocol="frozen", label_fraction=1.0, seed=0,
                 iterations=500, lr=0.1, finetune_steps=200, finetune_lr=1e-3):
    """Fit a linear head on (a labeled subset of) ``train`` and score ``test``.

    Parameters
    ----------
    model : OptimlModel
        Pretrained network; it is never modified.
    train, test : tuple of ndarray
        ``(images, labels)`` pairs with images shaped ``(n, 1, h, w)``.
    protocol : {"frozen", "finetune"}
        Frozen trains only the head on pooled encoder features; finetune
        then updates encoder and head together with Adam.
    label_fraction : float
        Fraction of training labels kept by stratified selection.

    Returns
    -------
    ProbeResult
    """
    if protocol not in ("frozen", "finetune"):
        raise ValueError(f"unknown protocol {protocol!r}")
    train_x, train_y = np.asarray(train[0], dtype=float), np.asarray(train[1])
    test_x, test_y = np.asarray(test[0], dtype=float), np.asarray(test[1])
    keep = stratified_subset(train_y, label_fraction, seed)
    train_x, train_y = train_x[keep], train_y[keep]

    probe = LinearProbe(n_iter=iterations, lr=lr).fit(model.features(train_x), train_y)
    if protocol == "frozen":
        probabilities = probe.predict_proba(model.features(test_x))
    else:
        tuned, weight, bias = _finetune(model, probe, train_x, train_y, finetune_steps, finetune_lr, seed)
        probabilities = _softmax(tuned.features(test_x) @ weight + bias)
    accuracy, auc, per_class = evaluate(probabilities, test_y, probe.classes_)
    return ProbeResult(protocol, float(label_fraction), accuracy, auc, per_class)
