"""scikit-learn style front end: fit on bead positions, transform forces into velocities."""
from __future__ import annotations

import numpy as np
from scipy.sparse.linalg import LinearOperator
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .evaluator import AccuracySetting, EvaluationReport, default_radius, evaluate_prepared
from .rpy import RPYParams, direct_rpy_matvec
from .tree import build_tree, compute_interaction_lists


def check_beads(X, name="positions"):
    """Validate an (N, 3) float array of finite values."""
    return check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True, input_name=name)


def _check_shape(X, n=None, name="positions"):
    X = check_beads(X, name)
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have 3 columns, got {X.shape[1]}")
    if n is not None and X.shape[0] != n:
        raise ValueError(f"{name} has {X.shape[0]} rows, fitted on {n} beads")
    return X


class _RPYBase(BaseEstimator, TransformerMixin):

    def _params(self, n):
        a = self.radius if self.radius is not None else default_radius(n, self._threshold(n))
        return RPYParams(a=a, k_B=self.k_B, T=self.temperature, eta=self.viscosity)

    def _threshold(self, n):
        return 1

    def as_linear_operator(self):
        """Wrap the fitted mobility as a scipy LinearOperator on flattened (3N,) force vectors."""
        check_is_fitted(self, "positions_")
        n = len(self.positions_)

        def mv(v):
            return self.transform(np.asarray(v, dtype=float).reshape(n, 3)).reshape(-1)

        return LinearOperator((3 * n, 3 * n), matvec=mv, rmatvec=mv, dtype=float)


class RPYMobility(_RPYBase):
    """Fast RPY mobility product D F.

    ``fit(positions)`` builds the adaptive octree and interaction lists;
    ``transform(forces)`` returns the (N, 3) velocities in input order.
    ``radius=None`` picks a so that 2a = 0.1 (N/threshold)^(-1/3).
    """

    def __init__(self, radius=None, k_B=1.0, temperature=1.0, viscosity=1.0 / (6.0 * np.pi),
                 accuracy=3, threshold=None, order=None, n_threads=1):
        self.radius = radius
        self.k_B = k_B
        self.temperature = temperature
        self.viscosity = viscosity
        self.accuracy = accuracy
        self.threshold = threshold
        self.order = order
        self.n_threads = n_threads

    def _threshold(self, n):
        return AccuracySetting.from_digits(self.accuracy, self.order, self.threshold).threshold

    def fit(self, X, y=None):
        X = _check_shape(X)
        self.setting_ = AccuracySetting.from_digits(self.accuracy, self.order, self.threshold)
        self.params_ = self._params(len(X))
        self.positions_ = X
        self.tree_ = build_tree(X, self.setting_.threshold)
        self.lists_ = compute_interaction_lists(self.tree_)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "tree_")
        F = _check_shape(X, len(self.positions_), "forces")
        t = self.tree_
        self.report_ = EvaluationReport(n=len(F), order=self.setting_.order, threshold=self.setting_.threshold,
                                        threads=max(1, int(self.n_threads)), n_nodes=t.n_nodes,
                                        n_leaves=len(t.leaves), depth=t.depth, times={})
        return evaluate_prepared(t, self.lists_, F, self.params_, self.setting_.order,
                                 self.n_threads, self.report_)


class DirectRPYMobility(_RPYBase):
    """Exact O(N^2) counterpart of :class:`RPYMobility`, same parameters and interface."""

    def __init__(self, radius=None, k_B=1.0, temperature=1.0, viscosity=1.0 / (6.0 * np.pi),
                 threshold=80, n_threads=1):
        self.radius = radius
        self.k_B = k_B
        self.temperature = temperature
        self.viscosity = viscosity
        self.threshold = threshold
        self.n_threads = n_threads

    def _threshold(self, n):
        return self.threshold

    def fit(self, X, y=None):
        X = _check_shape(X)
        self.params_ = self._params(len(X))
        self.positions_ = X
        self.n_features_in_ = 3
        return self

    def transform(self, X, targets=None):
        check_is_fitted(self, "positions_")
        F = _check_shape(X, len(self.positions_), "forces")
        return direct_rpy_matvec(self.positions_, F, self.params_, targets=targets, n_threads=self.n_threads)
