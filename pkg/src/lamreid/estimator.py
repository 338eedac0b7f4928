"""scikit-learn style wrapper: ``fit`` trains the ranking network, ``transform`` embeds."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from . import evaluation, network, trainer
from .sampler import Dataset


def check_images(X, input_shape) -> np.ndarray:
    """Validate an ``(n, C, H, W)`` image stack against the network input shape."""
    X = check_array(X, allow_nd=True, dtype=(np.float32, np.float64), ensure_2d=False)
    if X.ndim != 4 or X.shape[1:] != tuple(input_shape):
        raise ValueError(f"expected images of shape (n, {', '.join(map(str, input_shape))}), got {X.shape}")
    return X


def check_views(y, cameras, n):
    """Person ids and camera labels (0 = probe view, 1 = gallery view), one per image."""
    y = np.asarray(y)
    cameras = np.asarray(cameras)
    check_consistent_length(np.empty(n), y, cameras)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("person ids must be integers")
    if not np.isin(cameras, (0, 1)).all():
        raise ValueError("camera labels must be 0 (probe view) or 1 (gallery view)")
    return y.astype(np.int64), cameras.astype(np.int64)


def _as_dataset(X, y, cameras, split):
    index = np.zeros(len(y), dtype=np.int64)
    for pid in np.unique(y):
        for cam in (0, 1):
            sel = (y == pid) & (cameras == cam)
            index[sel] = np.arange(sel.sum())
    ids = sorted(int(p) for p in np.unique(y))
    return Dataset(X, y, cameras, index, ids if split == "train" else [], ids if split == "test" else [])


class PartRankingEmbedder(BaseEstimator, TransformerMixin):
    """Learns an 800-d embedding where same-person images lie close together.

    Parameters mirror :class:`~lamreid.network.NetConfig` and
    :class:`~lamreid.trainer.TrainConfig`; ``input_shape`` is ``(C, H, W)``.
    """

    def __init__(self, residual_blocks=1, use_batch_norm=False, loss="adaptive", mu=8.0, gamma=2.1,
                 lam=0.01, learning_rate=0.01, epochs=1, anchors=16, positives=2, negatives=6,
                 max_batches_per_epoch=1, seed=0, input_shape=(3, 230, 80)):
        self.residual_blocks = residual_blocks
        self.use_batch_norm = use_batch_norm
        self.loss = loss
        self.mu = mu
        self.gamma = gamma
        self.lam = lam
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.anchors = anchors
        self.positives = positives
        self.negatives = negatives
        self.max_batches_per_epoch = max_batches_per_epoch
        self.seed = seed
        self.input_shape = input_shape

    def _configs(self):
        net = network.NetConfig(residual_blocks=self.residual_blocks, use_batch_norm=self.use_batch_norm,
                                input_shape=tuple(self.input_shape))
        tc = trainer.TrainConfig(learning_rate=self.learning_rate, lam=self.lam, mu=self.mu, gamma=self.gamma,
                                 loss_kind=self.loss, epochs=self.epochs, anchors=self.anchors,
                                 positives=self.positives, negatives=self.negatives,
                                 max_batches_per_epoch=self.max_batches_per_epoch, seed=self.seed,
                                 train_cmc_every=0)
        return net, tc

    def fit(self, X, y, cameras):
        net, tc = self._configs()
        X = check_images(X, net.input_shape).astype(np.float32, copy=False)
        y, cameras = check_views(y, cameras, len(X))
        dataset = _as_dataset(X, y, cameras, "train")
        self.params_, self.metrics_ = trainer.train(dataset, net, tc)
        self.n_features_out_ = net.feature_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.params_.config.input_shape).astype(self.params_.dtype, copy=False)
        return evaluation.extract_features(self.params_, X)

    def score(self, X, y, cameras):
        """Identity-level rank-1 of camera-0 probes against all camera-1 images."""
        check_is_fitted(self, "params_")
        X = check_images(X, self.params_.config.input_shape).astype(self.params_.dtype, copy=False)
        y, cameras = check_views(y, cameras, len(X))
        dataset = _as_dataset(X, y, cameras, "test")
        result = evaluation.repeat_protocol(dataset, self.params_, repeats=1, mode="multi")
        return result.rank(1)
