"""scikit-learn style wrappers around the training pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import (
    HyperParams,
    NetworkConfig,
    attach_self_expressive,
    decode,
    encode,
    finetune,
    pretrain,
)
from .priorgraph import build_prior_graph
from .spectral import spectral_cluster

__all__ = ["ConvAutoencoder", "UDLL", "as_images"]


def as_images(X):
    """Validate ``X`` as a stack of grayscale images ``[n, h, w, 1]``.

    Accepts ``[n, h, w]`` or ``[n, h, w, 1]``.
    """
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_min_samples=2)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[3] != 1:
        raise ValueError(f"expected images of shape [n, h, w] or [n, h, w, 1], got {X.shape}")
    return X


def _hyper(est, **overrides):
    kw = dict(
        alpha=est.alpha, beta=est.beta, gamma=est.gamma, k=est.n_neighbors,
        epochs_pretrain=est.epochs_pretrain, epochs_finetune=getattr(est, "epochs_finetune", 0),
        learning_rate=est.learning_rate, seed=est.random_state,
        zero_diagonal=getattr(est, "zero_diagonal", False),
    )
    kw.update(overrides)
    return HyperParams(**kw)


class ConvAutoencoder(TransformerMixin, BaseEstimator):
    """Stride-2 convolutional autoencoder trained on the reconstruction loss.

    ``transform`` returns the flattened latent codes, one row per image.
    """

    def __init__(self, layers=((15, 3),), epochs_pretrain=200, learning_rate=1e-3, random_state=0):
        self.layers = layers
        self.epochs_pretrain = epochs_pretrain
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y=None):
        X = as_images(X)
        config = NetworkConfig(tuple(self.layers), X.shape[1:])
        hyper = HyperParams(epochs_pretrain=self.epochs_pretrain, learning_rate=self.learning_rate, seed=self.random_state)
        self.state_ = pretrain(X, config, hyper)
        self.loss_history_ = [t.reconstruction for t in self.state_.history]
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        return encode(as_images(X), self.state_).T

    def inverse_transform(self, Z):
        check_is_fitted(self, "state_")
        Z = check_array(Z, dtype=np.float64)
        return decode(Z.T, self.state_)


class UDLL(ClusterMixin, BaseEstimator):
    """Deep subspace clustering with a locality-preserving prior graph.

    Fitting pretrains the autoencoder, builds the kNN prior graph from the
    pretrained codes, fine-tunes with the self-expressive layer, and
    spectral-clusters the learned coefficients. Clustering is transductive,
    so there is ``fit_predict`` but no ``predict`` for unseen samples.

    Parameters
    ----------
    n_clusters : int
    layers : sequence of (channels, kernel_size)
    alpha, beta, gamma : float
        Weights of the self-expression, ``||W||^2`` and locality terms.
    n_neighbors : int
        Neighbours per prior-graph column.
    epochs_pretrain, epochs_finetune : int
    learning_rate : float
    top_q : int
        Strongest coefficients kept per column before symmetrising; 0 keeps all.
    eigen_solver : {"jacobi", "lapack"}
    n_init : int
        k-means restarts.
    zero_diagonal : bool
        Pin ``diag(W)`` to zero during fine-tuning.
    random_state : int

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
    coef_ : ndarray of shape (n_samples, n_samples)
        The self-expressive matrix ``W``.
    prior_graph_ : PriorGraph
    embedding_ : ndarray of shape (n_samples, latent_dim)
        Latent codes after fine-tuning.
    loss_history_ : list of dict
        Weighted fine-tuning loss terms per epoch.
    pretrain_history_ : list of float
    """

    def __init__(
        self, n_clusters=2, layers=((15, 3),), alpha=1.0, beta=1.0, gamma=1.0, n_neighbors=3,
        epochs_pretrain=200, epochs_finetune=100, learning_rate=1e-3, top_q=0,
        eigen_solver="jacobi", n_init=10, zero_diagonal=False, random_state=0,
    ):
        self.n_clusters = n_clusters
        self.layers = layers
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.n_neighbors = n_neighbors
        self.epochs_pretrain = epochs_pretrain
        self.epochs_finetune = epochs_finetune
        self.learning_rate = learning_rate
        self.top_q = top_q
        self.eigen_solver = eigen_solver
        self.n_init = n_init
        self.zero_diagonal = zero_diagonal
        self.random_state = random_state

    def fit(self, X, y=None):
        X = as_images(X)
        n = X.shape[0]
        if not 2 <= self.n_clusters <= n:
            raise ValueError(f"n_clusters must lie in [2, {n}], got {self.n_clusters}")
        hyper = _hyper(self)
        config = NetworkConfig(tuple(self.layers), X.shape[1:])
        state = pretrain(X, config, hyper)
        self.pretrain_history_ = [t.reconstruction for t in state.history]
        self.prior_graph_ = build_prior_graph(encode(X, state), self.n_neighbors)
        state = attach_self_expressive(state, n, seed=self.random_state)
        state = finetune(X, self.prior_graph_, state, hyper)
        self.state_ = state
        self.loss_history_ = [t.as_dict() for t in state.history]
        self.coef_ = state.W.copy()
        self.embedding_ = encode(X, state).T
        self.labels_ = spectral_cluster(
            self.coef_, self.n_clusters, self.top_q, self.random_state, self.n_init, self.eigen_solver
        )
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        """Latent codes of ``X`` under the fine-tuned encoder."""
        check_is_fitted(self, "state_")
        return encode(as_images(X), self.state_).T
