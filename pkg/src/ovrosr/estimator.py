"""scikit-learn compatible wrapper around the open-set recognizer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import LabeledDataset
from .evaluation import ConfusionTally, open_f_measure
from .netcore import TrainConfig
from .openset import (
    DEFAULT_ALPHA_GRID,
    DEFAULT_THETA_GRID,
    MIN_TAIL,
    UNKNOWN,
    decide,
    fit_recognizer,
)


class OpenSetRecognizer(ClassifierMixin, BaseEstimator):
    """One-vs-rest sigmoid heads with Weibull tail calibration.

    ``predict`` returns the class label, or :data:`UNKNOWN` when no class
    reaches the calibrated probability threshold ``theta``. If ``theta`` or
    ``alpha`` is ``None`` it is chosen by cross-class validation over
    ``theta_grid`` / ``alpha_grid`` during ``fit``.

    Parameters
    ----------
    hidden : tuple of int
        Hidden layer sizes of every per-class head.
    theta, alpha : float or None
        Acceptance threshold on the calibrated probability, and the tail
        fraction used for the Weibull fits.
    holdout_classes : int
        Classes held out as pseudo-unknowns during cross-class validation.
    """

    def __init__(self, hidden=(10,), learning_rate=0.1, epochs=500, batch_size=32,
                 momentum=0.9, target_loss=1e-3, theta=None, alpha=None,
                 theta_grid=DEFAULT_THETA_GRID, alpha_grid=DEFAULT_ALPHA_GRID,
                 holdout_classes=1, min_tail=MIN_TAIL, baseline="none", random_state=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.target_loss = target_loss
        self.theta = theta
        self.alpha = alpha
        self.theta_grid = theta_grid
        self.alpha_grid = alpha_grid
        self.holdout_classes = holdout_classes
        self.min_tail = min_tail
        self.baseline = baseline
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size,
                           self.momentum, int(self.random_state or 0), self.target_loss)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        data = LabeledDataset(X, y)
        self.model_, self.validation_ = fit_recognizer(
            data, list(self.hidden), self._train_config(), theta=self.theta, alpha=self.alpha,
            min_n=self.min_tail, with_baseline=self.baseline,
            theta_grid=self.theta_grid, alpha_grid=self.alpha_grid,
            holdout_classes=self.holdout_classes,
        )
        self.classes_ = np.asarray(self.model_.classes, dtype=object)
        self.theta_ = self.model_.theta
        self.alpha_ = self.model_.alpha
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def decision_function(self, X):
        """Raw per-class sigmoid scores."""
        X = self._check(X)
        return self.model_.bank.scores(X)

    def predict_proba(self, X):
        """Calibrated class-membership probabilities (rows need not sum to 1)."""
        X = self._check(X)
        return self.model_.predict_proba(X)

    def predict(self, X):
        return decide(self.predict_proba(X), self.theta_, self.classes_)

    def score(self, X, y, sample_weight=None):
        """Open-set macro F-measure; labels outside ``classes_`` count as unknown."""
        pred = self.predict(X)
        tally = ConfusionTally.from_predictions(np.asarray(y).astype(str), pred, self.classes_)
        return open_f_measure(tally)


__all__ = ["OpenSetRecognizer", "UNKNOWN"]
