"""Scikit-learn style estimator facade over the stable dynamics model.

``StableDynamicsEstimator`` wraps dataset fitting, scoring, one-step
prediction and rollout sampling behind the familiar fit/predict/score API so
the model slots into sklearn tooling (``get_params``/``set_params``/``clone``
come from ``BaseEstimator``). X is a ``TrajectoryDataset``; scores are mean
log likelihood per transition (higher is better).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .datasets import TrajectoryDataset
from .errors import ValidationError
from .policy import ContextDynamics
from .training import TrainConfig, dataset_nll, evaluate, train
from .validation import check_matrix, check_vector

__all__ = ["StableDynamicsEstimator"]


class StableDynamicsEstimator(BaseEstimator):
    """Globally stable context-conditioned dynamics fitted by exact MLE.

    Parameters mirror ``TrainConfig``; ``latent_kind`` picks the attractor
    family ("attractor" for go-to motions, "limit_cycle" for cyclic ones) and
    ``latent_params`` overrides its coefficients. After ``fit`` the trained
    model is available as ``model_`` and the training history as ``report_``.
    """

    def __init__(self, latent_kind="attractor", latent_params=None, n_layers=6,
                 hidden=(64, 64), clamp=3.0, activation="tanh",
                 learning_rate=1e-3, batch_size=256, epochs=500,
                 test_fraction=0.2, include_initial_term=True, patience=50,
                 seed=0):
        self.latent_kind = latent_kind
        self.latent_params = latent_params
        self.n_layers = n_layers
        self.hidden = hidden
        self.clamp = clamp
        self.activation = activation
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.test_fraction = test_fraction
        self.include_initial_term = include_initial_term
        self.patience = patience
        self.seed = seed

    def _config(self) -> TrainConfig:
        latent = {"kind": self.latent_kind}
        defaults = ({"alpha": 2.0, "sigma": 0.2} if self.latent_kind == "attractor"
                    else {"beta": 2.0, "omega": 1.0, "r_star": 1.0, "sigma": 0.2})
        latent.update(defaults)
        latent.update(self.latent_params or {})
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, seed=self.seed,
            test_fraction=self.test_fraction,
            include_initial_term=self.include_initial_term,
            patience=self.patience, n_layers=self.n_layers,
            hidden=tuple(self.hidden), clamp=self.clamp,
            activation=self.activation, latent=latent)

    def fit(self, X: TrajectoryDataset, y=None):
        if not isinstance(X, TrajectoryDataset):
            raise ValidationError("X must be a TrajectoryDataset")
        self.model_, self.report_ = train(self._config(), X)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise ValidationError("estimator is not fitted; call fit first")

    def predict(self, Y, C=None):
        """Noise-free next state for each (state, context) row."""
        self._require_fitted()
        m = self.model_
        Y = check_matrix(Y, m.dim, "Y")
        if m.context_dim:
            C = check_matrix(C, m.context_dim, "C")
            if len(C) != len(Y):
                raise ValidationError("Y and C must have the same number of rows")
        rng = np.random.default_rng(0)  # unused on the deterministic path
        return m.step(Y, C if m.context_dim else None, rng, deterministic=True)

    def score(self, X: TrajectoryDataset, y=None) -> float:
        """Mean log likelihood per transition (higher is better)."""
        self._require_fitted()
        return -float(ad.value_of(dataset_nll(self.model_, X)))

    def score_trajectories(self, X: TrajectoryDataset) -> dict:
        self._require_fitted()
        return evaluate(self.model_, X)

    def log_density(self, Y_prev, Y_next, C=None):
        self._require_fitted()
        m = self.model_
        Y_prev = check_matrix(Y_prev, m.dim, "Y_prev")
        Y_next = check_matrix(Y_next, m.dim, "Y_next")
        if m.context_dim:
            C = check_matrix(C, m.context_dim, "C")
        return ad.value_of(m.log_cond_density(Y_prev, Y_next, C if m.context_dim else None))

    def sample(self, y0, n_steps: int, context=None, seed: int = 0,
               deterministic: bool = False, perturbations=()):
        """Roll the fitted dynamics out from y0 under a constant context."""
        self._require_fitted()
        m = self.model_
        y0 = check_vector(y0, m.dim, "y0")
        ctx = None
        if m.context_dim:
            ctx = check_vector(context, m.context_dim, "context")
        return m.rollout(y0, ContextDynamics("constant"), n_steps,
                         np.random.default_rng(seed), context0=ctx,
                         perturbations=perturbations, deterministic=deterministic)
