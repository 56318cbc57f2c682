"""scikit-learn style wrappers around the numpy graphs and imaging steps."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import imaging as I
from . import metrics as M
from . import training as T
from . import zoo
from .optim import AdamState, OptimizerConfig


def _images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim != 3:
        raise ValueError(f"expected a stack of grayscale images (N, H, W), got shape {X.shape}")
    return X


class _GraphEstimator(BaseEstimator):
    """Shared fit loop. Inputs are (N, H, W) images scaled to [0, 1]."""

    _task = "age"

    def _arch_config(self, hw) -> zoo.ArchConfig:
        h, w = hw
        if zoo.input_kind(self.arch) == "single":
            w = 2 * w  # configs are written for pairwise width
        return zoo.ArchConfig(
            input_hw=(h, w), base_filters=self.base_filters, blocks=self.blocks,
            convs_per_block=self.convs_per_block, fc_widths=(self.fc_width,) * 3,
        )

    def _opt(self) -> OptimizerConfig:
        return OptimizerConfig(lr0=self.learning_rate, decay_step=self.decay_step,
                               decay_factor=self.decay_factor, l2_lambda=self.l2_lambda)

    def _fit_graph(self, X, y, loss, X_val=None, y_val=None, clf=None):
        self.graph_ = zoo.build(self.arch, self._arch_config(X.shape[1:3]), seed=self.random_state)
        T.check_loss(self.graph_, loss)
        if loss != "ce":
            T.init_output_bias(self.graph_, y)
        self.optimizer_state_ = AdamState()
        res = T.train(self.graph_, X, y, loss, self._opt(), epochs=self.epochs,
                      batch_size=self.batch_size, seed=self.random_state,
                      X_val=X_val, y_val=y_val, clf=clf, state=self.optimizer_state_)
        self.history_ = res.history
        self.n_features_in_ = int(X.shape[1] * X.shape[2])
        self.image_shape_ = tuple(X.shape[1:3])
        return self

    def _raw(self, X) -> np.ndarray:
        check_is_fitted(self, "graph_")
        X = _images(X)
        if X.shape[1:3] != self.image_shape_:
            raise ValueError(f"images are {X.shape[1:3]}, the model was fitted on {self.image_shape_}")
        return T.predict_raw(self.graph_, X)


class ShoeNetRegressor(RegressorMixin, _GraphEstimator):
    """Age regressor over pairwise (or, for ``arch="lr"``, single) prints."""

    def __init__(self, arch: str = "shoenet", loss: str = "clf", epochs: int = 5,
                 batch_size: int = 32, learning_rate: float = 0.001, decay_step: int = 10000,
                 decay_factor: float = 0.5, l2_lambda: float = 0.001, J: int = 2,
                 epsilon: float = 0.1, base_filters: int = 8, blocks: int = 3,
                 convs_per_block: int = 3, fc_width: int = 64, random_state: int = 0):
        self.arch = arch
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.decay_step = decay_step
        self.decay_factor = decay_factor
        self.l2_lambda = l2_lambda
        self.J = J
        self.epsilon = epsilon
        self.base_filters = base_filters
        self.blocks = blocks
        self.convs_per_block = convs_per_block
        self.fc_width = fc_width
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        if self.arch not in zoo.REGRESSION_ARCHS:
            raise ValueError(f"{self.arch!r} is not an age regression architecture")
        X, y = check_X_y(X, y, allow_nd=True, y_numeric=True, dtype=np.float64)
        X = _images(X)
        clf = M.ClfConfig(J=self.J, epsilon=self.epsilon)
        return self._fit_graph(X, np.asarray(y, dtype=np.float64), self.loss, X_val, y_val, clf)

    def predict(self, X) -> np.ndarray:
        return self._raw(X)[:, 0]

    def evaluate(self, X, y, metrics=("mae", "mcs2", "mcs3"), age_range=(7, 80)) -> dict:
        batch = M.EvaluationBatch(y, self.predict(X))
        return dict(M.compute_metrics(batch, list(metrics), age_range))


class ShoeNetGenderClassifier(ClassifierMixin, _GraphEstimator):
    """Two-way softmax gender head; labels may be strings or integers."""

    def __init__(self, epochs: int = 5, batch_size: int = 32, learning_rate: float = 0.001,
                 decay_step: int = 10000, decay_factor: float = 0.5, l2_lambda: float = 0.001,
                 base_filters: int = 8, blocks: int = 3, convs_per_block: int = 3,
                 fc_width: int = 64, random_state: int = 0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.decay_step = decay_step
        self.decay_factor = decay_factor
        self.l2_lambda = l2_lambda
        self.base_filters = base_filters
        self.blocks = blocks
        self.convs_per_block = convs_per_block
        self.fc_width = fc_width
        self.random_state = random_state

    arch = "gender"

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = _images(X)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) != 2:
            raise ValueError(f"gender labels must have exactly two classes, got {self.classes_}")
        return self._fit_graph(X, codes, "ce")

    def predict_proba(self, X) -> np.ndarray:
        return M.softmax(self._raw(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class ShoeprintSegmenter(TransformerMixin, BaseEstimator):
    """threshold -> contours -> union box -> bicubic resize, per image."""

    def __init__(self, threshold: int = I.DEFAULT_THRESHOLD, target_hw=(64, 32)):
        self.threshold = threshold
        self.target_hw = target_hw

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, dtype=None)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, allow_nd=True, dtype=None)
        return np.stack([I.segment(np.asarray(x, dtype=np.uint8), self.target_hw, self.threshold).pixels
                         for x in X])


class RegionPressureFeatures(TransformerMixin, BaseEstimator):
    """Eight region means per image (16 for pairwise images: left then right)."""

    def __init__(self, side: str = "left", masked: bool = False):
        self.side = side
        self.masked = masked

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _one(self, img) -> list:
        if self.side == "pair":
            half = img.shape[1] // 2
            return ([s.mean_pressure for s in I.region_stats(img[:, :half], "left", self.masked)]
                    + [s.mean_pressure for s in I.region_stats(img[:, half:], "right", self.masked)])
        return [s.mean_pressure for s in I.region_stats(img, self.side, self.masked)]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        return np.array([self._one(x) for x in X])
