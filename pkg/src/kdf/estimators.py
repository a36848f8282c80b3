"""scikit-learn style wrappers around the zoo models and the training loop."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import zoo
from .distill import DistillConfig
from .metrics import predict_logits
from .tensor import Tensor, softmax
from .train import TrainConfig, fit


def check_images(X, channels: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a finite float32 (N, C, H, W) array."""
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    if X.ndim != 4:
        raise ValueError(f"images must have shape (N, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("got an empty image batch")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinity")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be one-dimensional, got shape {y.shape}")
    if len(y) != n:
        raise ValueError(f"{n} images but {len(y)} labels")
    return y


def _resolve_config(architecture, input_shape, num_classes) -> zoo.ModelConfig:
    cfg = zoo.preset(architecture) if isinstance(architecture, str) else architecture
    if not isinstance(cfg, zoo.ModelConfig):
        raise TypeError(f"architecture must be a preset name or ModelConfig, got {type(architecture).__name__}")
    head = cfg.head_widths[:-1] + (num_classes,)
    return dataclasses.replace(cfg, input_shape=tuple(input_shape), head_widths=head,
                               num_classes=num_classes).validate()


class FERClassifier(ClassifierMixin, BaseEstimator):
    """Train one of the zoo architectures on (N, C, H, W) images in [0, 1].

    Defaults follow the published training regimen (SGD momentum 0.9,
    lr 1e-3, batch 16, 80 epochs, plateau decay 0.1 after 5 flat epochs).
    """

    def __init__(self, architecture="student_c", epochs=80, batch_size=16, lr=1e-3, momentum=0.9,
                 flip_prob=0.5, class_weighting="inverse_frequency", validation_fraction=0.0,
                 random_state=0):
        self.architecture = architecture
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.flip_prob = flip_prob
        self.class_weighting = class_weighting
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr, momentum=self.momentum,
                           flip_prob=self.flip_prob, seed=int(self.random_state or 0),
                           class_weighting=self.class_weighting).validate()

    def _prepare(self, X, y, classes=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        if classes is None:
            classes = np.unique(y)
        index = {c: i for i, c in enumerate(classes.tolist())}
        unknown = set(np.unique(y).tolist()) - set(index)
        if unknown:
            raise ValueError(f"labels {sorted(unknown)} not among the known classes {classes.tolist()}")
        yi = np.array([index[v] for v in y.tolist()], dtype=np.int64)
        return X, yi, classes

    def _split(self, X, yi):
        if not self.validation_fraction:
            return X, yi, None, None
        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(len(yi))
        n_val = max(1, int(round(self.validation_fraction * len(yi))))
        val, tr = order[:n_val], order[n_val:]
        return X[tr], yi[tr], X[val], yi[val]

    def _weights(self, yi, n_classes):
        if self.class_weighting == "uniform":
            return None
        counts = np.bincount(yi, minlength=n_classes)
        return len(yi) / (n_classes * np.maximum(counts, 1))

    def _fit(self, X, y, classes=None, teacher=None, distill_cfg=None):
        cfg = self._train_config()
        X, yi, classes = self._prepare(X, y, classes)
        if len(classes) < 2:
            raise ValueError("need at least two classes to fit a classifier")
        self.classes_ = classes
        self.input_shape_ = X.shape[1:]
        self.model_ = zoo.build(_resolve_config(self.architecture, X.shape[1:], len(classes)), seed=cfg.seed)
        Xt, yt, Xv, yv = self._split(X, yi)
        self.history_ = fit(self.model_, Xt, yt, cfg, val_images=Xv, val_labels=yv, teacher=teacher,
                            distill_cfg=distill_cfg, class_weights=self._weights(yt, len(classes)))
        return self

    def fit(self, X, y):
        return self._fit(X, y)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_shape_[0])
        return predict_logits(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(Tensor(self.decision_function(X)), axis=-1).data

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        zoo.save(self.model_, path)


class DistilledClassifier(FERClassifier):
    """Student trained against a frozen, already-fitted ``teacher``.

    ``teacher`` may be a fitted FERClassifier or a bare zoo Model (whose
    outputs are then taken to be the FER emotion codes).
    """

    def __init__(self, teacher=None, architecture="student_a", temperature=3.0, alpha=0.2, hard_weight=None,
                 epochs=80, batch_size=16, lr=1e-3, momentum=0.9, flip_prob=0.5,
                 class_weighting="inverse_frequency", validation_fraction=0.0, random_state=0):
        super().__init__(architecture=architecture, epochs=epochs, batch_size=batch_size, lr=lr, momentum=momentum,
                         flip_prob=flip_prob, class_weighting=class_weighting,
                         validation_fraction=validation_fraction, random_state=random_state)
        self.teacher = teacher
        self.temperature = temperature
        self.alpha = alpha
        self.hard_weight = hard_weight

    def fit(self, X, y):
        if self.teacher is None:
            raise ValueError("DistilledClassifier needs a teacher")
        if isinstance(self.teacher, FERClassifier):
            check_is_fitted(self.teacher, "model_")
            teacher, classes = self.teacher.model_, self.teacher.classes_
        elif isinstance(self.teacher, zoo.Model):
            teacher, classes = self.teacher, np.arange(self.teacher.config.num_classes)
        else:
            raise TypeError(f"teacher must be a fitted FERClassifier or a Model, got {type(self.teacher).__name__}")
        distill_cfg = DistillConfig(self.temperature, self.alpha, self.hard_weight).validate(len(classes))
        return self._fit(X, y, classes=np.asarray(classes), teacher=teacher, distill_cfg=distill_cfg)


def load_classifier(path) -> FERClassifier:
    """Wrap a checkpoint as a fitted FERClassifier predicting FER emotion codes."""
    model = zoo.load(path)
    clf = FERClassifier(architecture=model.config)
    clf.model_ = model
    clf.classes_ = np.arange(model.config.num_classes)
    clf.input_shape_ = tuple(model.config.input_shape)
    return clf

