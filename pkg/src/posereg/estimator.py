"""scikit-learn style wrappers around the pose regressor and the feature baseline.

``X`` is an image stack ``[N, 3, H, W]`` with values in [0, 1]; ``y`` is an
``[N, 7]`` array of poses ``(x, y, z, w, p, q, r)``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .datagen import PoseSample, desk_crop_spec
from .evaluation import build_feature_index, model_preprocessor, predict_raw_vectors
from .geometry import Pose, position_error_m, quat_normalize
from .model import DESK_TRUNK, ModelConfig, build_model, predict_raw
from .training import TrainConfig, train


def check_images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, ensure_all_finite=True, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape [N, 3, H, W], got {X.shape}")
    return X


def check_poses(y, n: int) -> np.ndarray:
    y = check_array(y, dtype=np.float64)
    if y.shape != (n, 7):
        raise ValueError(f"expected poses of shape ({n}, 7), got {y.shape}")
    return y


def _samples(X: np.ndarray, y: np.ndarray) -> list[PoseSample]:
    return [PoseSample(img, Pose.from_vector(v), f"{i:05d}") for i, (img, v) in enumerate(zip(X, y))]


class PoseRegressor(BaseEstimator):
    """Convolutional pose regressor trained from scratch with SGD and momentum.

    ``predict`` returns unit-quaternion poses; ``transform`` returns the
    localization feature vectors; ``score`` is the negative median position
    error in meters.
    """

    def __init__(
        self,
        input_size: int = 64,
        feature_dim: int = 256,
        beta: float = 10.0,
        epochs: int = 300,
        batch_size: int = 16,
        base_lr: float = 3e-3,
        momentum: float = 0.9,
        decay_period: int = 200,
        mode: str = "center",
        random_state: int = 0,
    ):
        self.input_size = input_size
        self.feature_dim = feature_dim
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.momentum = momentum
        self.decay_period = decay_period
        self.mode = mode
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_poses(y, len(X))
        crop = desk_crop_spec(self.input_size)
        self.model_ = build_model(
            ModelConfig(input_size=self.input_size, trunk=DESK_TRUNK, feature_dim=self.feature_dim, beta=self.beta),
            self.random_state,
        )
        config = TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            base_lr=self.base_lr,
            momentum=self.momentum,
            decay_period=self.decay_period,
            seed=self.random_state,
            rescale_side=crop.rescale_side,
            crop_side=crop.crop_side,
        )
        _, self.log_ = train(self.model_, _samples(X, y), config)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        raw = predict_raw_vectors(self.model_, check_images(X), self.mode)
        return np.concatenate([raw[:, :3], quat_normalize(raw[:, 3:])], axis=1)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        _, feats = predict_raw(self.model_, model_preprocessor(self.model_).transform(check_images(X)))
        return feats

    def score(self, X, y) -> float:
        X = check_images(X)
        y = check_poses(y, len(X))
        return -float(np.median(position_error_m(self.predict(X)[:, :3], y[:, :3])))


class NearestFeaturePose(BaseEstimator):
    """Predict the pose of the training image with the closest feature vector."""

    def __init__(self, regressor: PoseRegressor | None = None):
        self.regressor = regressor

    def fit(self, X, y):
        X = check_images(X)
        y = check_poses(y, len(X))
        if self.regressor is None:
            raise ValueError("a fitted PoseRegressor is required")
        check_is_fitted(self.regressor, "model_")
        self.index_ = build_feature_index(self.regressor.model_, _samples(X, y))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "index_")
        nearest = self.index_.nearest(self.regressor.transform(X))
        return np.array([self.index_.poses[i].as_vector() for i in nearest])
