"""scikit-learn style wrapper: ``fit`` trains the multi-branch model, ``transform`` embeds images."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .data import Dataset, Sample
from .metrics import evaluate, pairwise_dist
from .model import DEFAULT_ATTENTION, ModelConfig
from .tensor import no_grad
from .training import TrainConfig, train


def check_images(X, n_channels: int = 3) -> np.ndarray:
    """Validate an (N, C, H, W) image batch with finite values in [0, 1]."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, ensure_all_finite=True,
                    input_name="X")
    if X.ndim != 4 or X.shape[1] != n_channels:
        raise ValueError(f"X must have shape (N, {n_channels}, H, W), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_labels(y, n: int, name: str = "y") -> np.ndarray:
    y = column_or_1d(y, warn=True)
    if len(y) != n:
        raise ValueError(f"{name} has {len(y)} entries for {n} images")
    return np.asarray(y).astype(np.int64)


class DeepMinerEmbedder(TransformerMixin, BaseEstimator):
    """Re-identification embedder.

    ``fit(X, y, cameras)`` trains on (N, 3, H, W) images in [0, 1] with integer
    identities; ``transform(X)`` returns the concatenated post-BNNeck features
    used for retrieval; ``score`` reports leave-one-out mAP.
    """

    def __init__(self, block_widths=(16, 32, 64, 128), block_strides=(1, 2, 2, 1), ie_positions=(2, 3),
                 tau=0.8, local_branch=True, local_stripes=4, attention_sites=DEFAULT_ATTENTION,
                 epochs=30, P=4, K=4, base_lr=3.5e-4, warmup_epochs=10, warmup_start=3.5e-5,
                 decay_epochs=(40, 70), decay_factor=0.1, center_weight=5e-4, epsilon=0.1, center_lr=0.5,
                 flip_p=0.5, erase_p=0.5, random_state=0):
        self.block_widths = block_widths
        self.block_strides = block_strides
        self.ie_positions = ie_positions
        self.tau = tau
        self.local_branch = local_branch
        self.local_stripes = local_stripes
        self.attention_sites = attention_sites
        self.epochs = epochs
        self.P = P
        self.K = K
        self.base_lr = base_lr
        self.warmup_epochs = warmup_epochs
        self.warmup_start = warmup_start
        self.decay_epochs = decay_epochs
        self.decay_factor = decay_factor
        self.center_weight = center_weight
        self.epsilon = epsilon
        self.center_lr = center_lr
        self.flip_p = flip_p
        self.erase_p = erase_p
        self.random_state = random_state

    def _train_config(self, X: np.ndarray, n_classes: int) -> TrainConfig:
        model = ModelConfig(
            num_identities=n_classes, block_widths=self.block_widths, block_strides=self.block_strides,
            ie_positions=self.ie_positions, tau=self.tau, local_branch=self.local_branch,
            local_stripes=self.local_stripes, attention_sites=self.attention_sites,
            in_channels=X.shape[1], image_height=X.shape[2], image_width=X.shape[3],
        )
        return TrainConfig(
            epochs=self.epochs, base_lr=self.base_lr, warmup_epochs=self.warmup_epochs,
            warmup_start=self.warmup_start, decay_epochs=self.decay_epochs, decay_factor=self.decay_factor,
            P=self.P, K=self.K, center_weight=self.center_weight, epsilon=self.epsilon,
            center_lr=self.center_lr, flip_p=self.flip_p, erase_p=self.erase_p,
            seed=int(self.random_state or 0), model=model,
        )

    def fit(self, X, y, cameras=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        cams = np.ones(len(X), dtype=np.int64) if cameras is None else check_labels(cameras, len(X), "cameras")
        self.classes_ = np.unique(y)
        ds = Dataset([Sample(img, int(i), int(c)) for img, i, c in zip(X, y, cams)])
        self.history_ = train(self._train_config(X, len(self.classes_)), ds)
        self.model_ = self.history_.model
        self.image_shape_ = X.shape[1:]
        self.embedding_dim_ = self.model_.embedding_dim
        return self

    def _check_input(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_shape_[0])
        if X.shape[1:] != self.image_shape_:
            raise ValueError(f"X images have shape {X.shape[1:]}, fitted on {self.image_shape_}")
        return X

    def transform(self, X) -> np.ndarray:
        X = self._check_input(X)
        return self.model_.embed(X)

    def predict(self, X) -> np.ndarray:
        """Identity with the highest summed logit over all branches."""
        X = self._check_input(X)
        self.model_.eval()
        with no_grad():
            outputs = self.model_(X)
        scores = sum(bf.logits.data for bf in outputs)
        return self.classes_[scores.argmax(axis=1)]

    def score(self, X, y, cameras=None) -> float:
        """Leave-one-out mAP of ``X`` retrieving itself (cross-camera when ``cameras`` given)."""
        emb = self.transform(X)
        y = check_labels(y, len(emb))
        cams = np.arange(len(emb)) if cameras is None else check_labels(cameras, len(emb), "cameras")
        result = evaluate(pairwise_dist(emb, emb), y, y, cams, cams, k_max=1,
                          cross_camera=cameras is not None, exclude_self=True)
        return result.map
