"""Prediction heads trained on frozen feature vectors.

Two heads are provided: L2-regularized logistic regression fit by
full-batch gradient descent with backtracking line search, and gradient
boosted regression trees on the logistic loss with exact greedy splits.
Both are deterministic given their inputs, serialize to plain dicts, and
refuse single-class training sets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .evaluation import auroc


class DegenerateTrainingError(Exception):
    """Training set contains a single class; no model can be fit."""


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _standardize_params(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Zero-variance dims keep scale 1 so constant features pass through.
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale == 0.0, 1.0, scale)
    return mean, scale


def armijo_backtracking(
    fg: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    direction: np.ndarray,
    f0: float,
    g0: np.ndarray,
    t0: float = 1.0,
    shrink: float = 0.5,
    c1: float = 1e-4,
    max_halvings: int = 60,
) -> tuple[float, np.ndarray, float]:
    """Shrink the step until the Armijo sufficient-decrease condition holds.

    Returns (step, new_x, new_f); a step of 0 means no acceptable step was
    found at machine precision.
    """
    slope = float(g0 @ direction)
    t = t0
    for _ in range(max_halvings):
        candidate = x + t * direction
        if np.array_equal(candidate, x):
            # the step underflowed: accepting it would report progress
            # while leaving the iterate unchanged
            break
        f_new, _ = fg(candidate)
        if f_new <= f0 + c1 * t * slope:
            return t, candidate, f_new
        t *= shrink
    return 0.0, x, f0


@dataclass
class LRModel:
    weights: np.ndarray
    bias: float
    l2: float
    mean: np.ndarray
    scale: np.ndarray
    n_iter: int = 0
    final_grad_norm: float = float("nan")

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        Z = (np.atleast_2d(X) - self.mean) / self.scale
        return Z @ self.weights + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def to_dict(self) -> dict:
        return {
            "kind": "lr",
            "version": 1,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "l2": self.l2,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "n_iter": self.n_iter,
            "final_grad_norm": self.final_grad_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LRModel":
        if d.get("kind") != "lr" or d.get("version") != 1:
            raise ValueError("not a version-1 lr model")
        return cls(
            weights=np.asarray(d["weights"], dtype=np.float64),
            bias=float(d["bias"]),
            l2=float(d["l2"]),
            mean=np.asarray(d["mean"], dtype=np.float64),
            scale=np.asarray(d["scale"], dtype=np.float64),
            n_iter=int(d["n_iter"]),
            final_grad_norm=float(d["final_grad_norm"]),
        )


def lr_train(
    X: np.ndarray,
    y: np.ndarray,
    l2: float = 1.0,
    tol: float = 1e-6,
    max_iter: int = 10000,
) -> LRModel:
    """Fit logistic regression with an L2 penalty on the weights (bias
    unpenalized) by full-batch gradient descent with backtracking line
    search. Stops when the gradient norm drops to tol or at max_iter; the
    line search makes the loss non-increasing at every step."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X and y shapes disagree")
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateTrainingError("training labels contain a single class")
    if not np.all(np.isin(classes, (0.0, 1.0))):
        raise ValueError("labels must be 0/1")

    mean, scale = _standardize_params(X)
    Z = (X - mean) / scale
    n, d = Z.shape
    sign = 2.0 * y - 1.0

    def fg(params: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = params[:d], params[d]
        margin = Z @ w + b
        loss = float(np.mean(np.logaddexp(0.0, -sign * margin))) + 0.5 * l2 * float(w @ w)
        p = _sigmoid(margin)
        gw = Z.T @ (p - y) / n + l2 * w
        gb = float(np.mean(p - y))
        return loss, np.concatenate([gw, [gb]])

    params = np.zeros(d + 1)
    f0, g0 = fg(params)
    n_iter = 0
    grad_norm = float(np.linalg.norm(g0))
    while grad_norm > tol and n_iter < max_iter:
        step, params, f0 = armijo_backtracking(fg, params, -g0, f0, g0)
        if step == 0.0:
            break
        _, g0 = fg(params)
        grad_norm = float(np.linalg.norm(g0))
        n_iter += 1
    return LRModel(
        weights=params[:d],
        bias=float(params[d]),
        l2=l2,
        mean=mean,
        scale=scale,
        n_iter=n_iter,
        final_grad_norm=grad_norm,
    )


def lr_predict(model: LRModel, X: np.ndarray) -> np.ndarray:
    return model.predict_proba(X)


def lr_gradient(X: np.ndarray, y: np.ndarray, weights: np.ndarray, bias: float, l2: float) -> np.ndarray:
    """Analytic gradient of the regularized mean log-loss at the given
    parameters, on raw (unstandardized) features. Exposed for verification
    against numerical differentiation."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    p = _sigmoid(X @ weights + bias)
    gw = X.T @ (p - y) / n + l2 * weights
    gb = float(np.mean(p - y))
    return np.concatenate([gw, [gb]])


def lr_loss(X: np.ndarray, y: np.ndarray, weights: np.ndarray, bias: float, l2: float) -> float:
    X = np.asarray(X, dtype=np.float64)
    sign = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    margin = X @ weights + bias
    return float(np.mean(np.logaddexp(0.0, -sign * margin))) + 0.5 * l2 * float(weights @ weights)


# ---------------------------------------------------------------------------
# Gradient boosted trees


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"value": self.value}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "value" in d:
            return cls(value=float(d["value"]))
        return cls(
            feature=int(d["feature"]),
            threshold=float(d["threshold"]),
            left=cls.from_dict(d["left"]),
            right=cls.from_dict(d["right"]),
        )


def _best_split(
    X: np.ndarray, residual: np.ndarray, idx: np.ndarray, min_samples_leaf: int
) -> Optional[tuple[int, float]]:
    """Exact greedy split minimizing squared error of the residuals.

    All features are scanned at once on sorted values. Ties in gain resolve
    to the lowest feature index, then the lowest threshold: argmax returns
    the first maximum, and candidates are ordered threshold-ascending per
    feature, feature-ascending across columns.
    """
    n = idx.size
    if n < 2 * min_samples_leaf:
        return None
    A = X[idx]
    r = residual[idx]
    total = r.sum()
    base = total * total / n
    order = np.argsort(A, axis=0, kind="stable")
    xs = np.take_along_axis(A, order, axis=0)
    rs = r[order]
    csum = np.cumsum(rs, axis=0)[:-1]
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    gains = csum**2 / nl + (total - csum) ** 2 / (n - nl) - base
    valid = xs[1:] != xs[:-1]
    if min_samples_leaf > 1:
        counts_ok = (nl >= min_samples_leaf) & ((n - nl) >= min_samples_leaf)
        valid = valid & counts_ok
    gains = np.where(valid, gains, -np.inf)
    per_feature_pos = np.argmax(gains, axis=0)
    per_feature_gain = gains[per_feature_pos, np.arange(gains.shape[1])]
    feature = int(np.argmax(per_feature_gain))
    if not per_feature_gain[feature] > 1e-12:
        return None
    pos = int(per_feature_pos[feature])
    threshold = float((xs[pos, feature] + xs[pos + 1, feature]) / 2.0)
    return feature, threshold


def _build_tree(
    X: np.ndarray,
    residual: np.ndarray,
    hessian: np.ndarray,
    idx: np.ndarray,
    depth: int,
    max_depth: int,
    min_samples_leaf: int,
) -> TreeNode:
    def leaf() -> TreeNode:
        h = hessian[idx].sum()
        value = residual[idx].sum() / max(h, 1e-12)
        return TreeNode(value=float(value))

    if depth >= max_depth or idx.size < 2 * min_samples_leaf:
        return leaf()
    split = _best_split(X, residual, idx, min_samples_leaf)
    if split is None:
        return leaf()
    feature, threshold = split
    mask = X[idx, feature] <= threshold
    left = _build_tree(X, residual, hessian, idx[mask], depth + 1, max_depth, min_samples_leaf)
    right = _build_tree(X, residual, hessian, idx[~mask], depth + 1, max_depth, min_samples_leaf)
    return TreeNode(feature=feature, threshold=threshold, left=left, right=right)


def _tree_apply(node: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        cur, idx = stack.pop()
        if cur.is_leaf:
            out[idx] = cur.value
            continue
        mask = X[idx, cur.feature] <= cur.threshold
        stack.append((cur.left, idx[mask]))
        stack.append((cur.right, idx[~mask]))
    return out


@dataclass
class GBMModel:
    base_score: float
    eta: float
    max_depth: int
    min_samples_leaf: int
    trees: list[TreeNode] = field(default_factory=list)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        score = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            score += self.eta * _tree_apply(tree, X)
        return score

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def to_dict(self) -> dict:
        return {
            "kind": "gbm",
            "version": 1,
            "base_score": self.base_score,
            "eta": self.eta,
            "max_depth": self.max_depth,
            "min_samples_leaf": self.min_samples_leaf,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GBMModel":
        if d.get("kind") != "gbm" or d.get("version") != 1:
            raise ValueError("not a version-1 gbm model")
        return cls(
            base_score=float(d["base_score"]),
            eta=float(d["eta"]),
            max_depth=int(d["max_depth"]),
            min_samples_leaf=int(d["min_samples_leaf"]),
            trees=[TreeNode.from_dict(t) for t in d["trees"]],
        )


def gbm_train(
    X: np.ndarray,
    y: np.ndarray,
    eta: float = 0.1,
    max_depth: int = 3,
    n_trees: int = 100,
    min_samples_leaf: int = 1,
) -> GBMModel:
    """Boost regression trees on the negative gradient of the logistic
    loss. The initial score is the log-odds of the training prevalence;
    n_trees=0 therefore predicts the prevalence for every input."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X and y shapes disagree")
    prevalence = float(y.mean())
    if prevalence in (0.0, 1.0):
        raise DegenerateTrainingError("training labels contain a single class")
    model = GBMModel(
        base_score=float(np.log(prevalence / (1.0 - prevalence))),
        eta=eta,
        max_depth=max_depth,
        min_samples_leaf=min_samples_leaf,
    )
    score = np.full(X.shape[0], model.base_score)
    idx = np.arange(X.shape[0])
    for _ in range(n_trees):
        p = _sigmoid(score)
        residual = y - p
        hessian = p * (1.0 - p)
        tree = _build_tree(X, residual, hessian, idx, 0, max_depth, min_samples_leaf)
        model.trees.append(tree)
        score += eta * _tree_apply(tree, X)
    return model


def gbm_predict(model: GBMModel, X: np.ndarray) -> np.ndarray:
    return model.predict_proba(X)


# ---------------------------------------------------------------------------
# Validation-driven hyperparameter selection

LR_DEFAULT_GRID: tuple[dict, ...] = tuple({"l2": float(v)} for v in np.logspace(-4, 2, 7))
GBM_DEFAULT_GRID: tuple[dict, ...] = tuple(
    {"eta": eta, "max_depth": depth, "n_trees": trees}
    for eta in (0.05, 0.1)
    for depth in (3, 6)
    for trees in (100, 300)
)


@dataclass
class TuneResult:
    best_params: dict
    model: object
    valid_auroc: float
    trials: list[tuple[dict, float]]


def tune(
    kind: str,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_valid: np.ndarray,
    y_valid: np.ndarray,
    grid: Optional[Sequence[dict]] = None,
) -> TuneResult:
    """Fit one model per grid entry and keep the best validation AUROC.

    Ties go to the earliest grid entry (strict improvement required to
    switch), so the declared grid order is part of the contract.
    """
    if kind == "lr":
        fit = lambda params: lr_train(X_train, y_train, **params)
        grid = tuple(grid) if grid is not None else LR_DEFAULT_GRID
    elif kind == "gbm":
        fit = lambda params: gbm_train(X_train, y_train, **params)
        grid = tuple(grid) if grid is not None else GBM_DEFAULT_GRID
    else:
        raise ValueError(f"unknown head kind: {kind!r}")
    if not grid:
        raise ValueError("empty hyperparameter grid")

    best: Optional[TuneResult] = None
    trials: list[tuple[dict, float]] = []
    for params in grid:
        model = fit(params)
        score = auroc(model.predict_proba(X_valid), y_valid)
        trials.append((params, score))
        if best is None or score > best.valid_auroc:
            best = TuneResult(params, model, score, trials)
    best.trials = trials
    return best
