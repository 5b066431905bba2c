"""Scikit-learn style front end for the federated trainer.

FederatedClassifier wraps the round loop in the familiar fit/predict
interface: rows of X are assigned to clients via the ``clients`` argument to
fit (one client id per row; omit it to train as a single client), training
runs the configured number of federated rounds, and predictions come from
the final global model. Per-round losses, weights and validation accuracies
are kept on the fitted estimator for inspection.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .data import DEFAULT_FRACTIONS, Dataset, split_dataset
from .federated import FlConfig, Strategy, parse_strategy, run_in_fl


class FederatedClassifier(BaseEstimator, ClassifierMixin):
    """Multinomial classifier trained by federated averaging with loss-based weights.

    Parameters mirror the trainer configuration: ``strategy`` accepts either
    a Strategy instance or a string such as "fedavg", "fedexp(m=2)",
    "qffl(q=1)" or "fedauto(Q=1.5,M=3)". ``hidden_dims`` selects the network
    shape (empty tuple gives multinomial logistic regression).
    ``split_fractions`` controls how much of each client's data is held out
    for the per-round validation bookkeeping.
    """

    def __init__(
        self,
        rounds=100,
        local_epochs=5,
        batch_size=128,
        base_lr=1e-4,
        client_fraction=1.0,
        strategy="fedauto",
        hidden_dims=(),
        optimizer="adam",
        rebalance=True,
        split_fractions=DEFAULT_FRACTIONS,
        seed=0,
    ):
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.client_fraction = client_fraction
        self.strategy = strategy
        self.hidden_dims = hidden_dims
        self.optimizer = optimizer
        self.rebalance = rebalance
        self.split_fractions = split_fractions
        self.seed = seed

    def _resolved_strategy(self) -> Strategy:
        if isinstance(self.strategy, Strategy):
            return self.strategy
        return parse_strategy(self.strategy)

    def fit(self, X, y, clients=None):
        """Run federated training over the given client assignment.

        clients: array of shape (n_samples,) mapping each row to a client;
        ids may be arbitrary hashables and are relabeled to 0..C-1 in sorted
        order. None puts every row on a single client.
        """
        X, y = check_X_y(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValueError("training data must contain at least two classes")
        if clients is None:
            client_idx = np.zeros(X.shape[0], dtype=np.int64)
        else:
            clients = np.asarray(clients)
            if clients.shape != (X.shape[0],):
                raise ValueError("clients must have one entry per row of X")
            _, client_idx = np.unique(clients, return_inverse=True)
        counts = np.bincount(client_idx)
        if counts.min() < 3:
            raise ValueError("every client needs at least 3 samples to split")

        ds = Dataset(
            features=np.asarray(X, dtype=np.float64),
            labels=y_idx.astype(np.int64),
            client_ids=client_idx.astype(np.int64),
            split=np.full(X.shape[0], "train", dtype="<U5"),
            num_classes=int(self.classes_.shape[0]),
        )
        split_dataset(ds, fractions=tuple(self.split_fractions), seed=self.seed)

        spec = nn.ModelSpec(
            input_dim=X.shape[1],
            hidden_dims=tuple(self.hidden_dims),
            num_classes=int(self.classes_.shape[0]),
        )
        cfg = FlConfig(
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            client_fraction=self.client_fraction,
            strategy=self._resolved_strategy(),
            optimizer=self.optimizer,
            rebalance=self.rebalance,
            seed=self.seed,
        )
        self.global_params_, self.round_records_ = run_in_fl(ds, spec, cfg)
        self.model_spec_ = spec
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "global_params_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return nn.predict_proba(self.global_params_, np.asarray(X, dtype=np.float64))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
