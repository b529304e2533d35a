"""scikit-learn compatible wrapper around a simulated federated training run."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import LabeledDataset, dirichlet_partition
from .fed import SkipThresholds, Strategy, run_experiment
from .nn import Arch, TrainConfig, build_model, forward
from .twin import TwinConfig


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """Train a classifier by simulating federated rounds over a Dirichlet split of ``X``.

    Two-dimensional ``X`` trains the dense network; image input of shape
    ``(n, H, W)`` or ``(n, C, H, W)`` (H, W >= 16) trains the convolutional one.

    Parameters
    ----------
    strategy : {"fedskiptwin", "fedavg"}
    n_clients, alpha : partition size and Dirichlet concentration.
    rounds, local_epochs, batch_size, learning_rate : training schedule.
    tau_mag, tau_unc : skip thresholds, ignored by FedAvg.
    twin_config : TwinConfig or None for the defaults.
    threads : worker threads for client updates; does not change results.
    random_state : int seed for partitioning, initialization and training.

    Attributes
    ----------
    classes_ : original label values, indexed by model output.
    params_ : trained ParameterVector.
    history_ : list of RoundLog, one per round.
    summary_ : dict with final accuracy on the training data and traffic totals.
    """

    def __init__(self, strategy="fedskiptwin", n_clients=10, alpha=0.5, rounds=20,
                 local_epochs=3, batch_size=32, learning_rate=0.01, tau_mag=0.001,
                 tau_unc=0.001, twin_config=None, threads=1, random_state=0):
        self.strategy = strategy
        self.n_clients = n_clients
        self.alpha = alpha
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.tau_mag = tau_mag
        self.tau_unc = tau_unc
        self.twin_config = twin_config
        self.threads = threads
        self.random_state = random_state

    def _strategy(self):
        if self.strategy == Strategy.FEDAVG:
            return Strategy.fedavg()
        if self.strategy == Strategy.FEDSKIPTWIN:
            return Strategy.fedskiptwin(SkipThresholds(self.tau_mag, self.tau_unc))
        raise ValueError(f"unknown strategy {self.strategy!r}")

    def _check_inputs(self, X):
        X = check_array(X, dtype=np.float64, allow_nd=True)
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim not in (2, 4):
            raise ValueError(f"X must be 2-D features or 3/4-D images, got {X.ndim}-D")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, allow_nd=True)
        check_classification_targets(y)
        X = self._check_inputs(X)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        seed = int(self.random_state or 0)
        data = LabeledDataset(X, encoded, num_classes=len(self.classes_))
        partition = dirichlet_partition(data, self.n_clients, self.alpha, seed)
        if X.ndim == 2:
            params = build_model(Arch.HAR_MLP, seed, input_dim=X.shape[1],
                                 num_classes=len(self.classes_))
        else:
            params = build_model(Arch.MNIST_CNN, seed, image_shape=X.shape[1:],
                                 num_classes=len(self.classes_))
        cfg = TrainConfig(self.learning_rate, self.local_epochs, self.batch_size, seed)
        result = run_experiment(self._strategy(), partition, data, cfg, self.rounds, params,
                                self.twin_config or TwinConfig(), threads=self.threads,
                                seed=seed)
        self.params_ = result.state.params
        self.history_ = result.logs
        self.summary_ = result.summary
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = self._check_inputs(X)
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ValueError(f"X has {int(np.prod(X.shape[1:]))} features, "
                             f"expected {self.n_features_in_}")
        return forward(self.params_, X)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
