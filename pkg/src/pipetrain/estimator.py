"""scikit-learn compatible classifier trained through the pipeline engine."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .experiment import ExperimentConfig, build_engine, train


class PipelineClassifier(ClassifierMixin, BaseEstimator):
    """Softmax classifier whose layers are split across ``stages`` pipeline workers.

    Training runs ``epochs`` passes of shuffled mini-batches through the chosen
    schedule; ``history_`` keeps one :class:`~pipetrain.experiment.MetricsRecord`
    per epoch. Inputs may be flat feature matrices or ``(n, C, H, W)`` images
    (use ``model="cnn_small"`` for the latter).
    """

    def __init__(self, schedule="xpipe", stages=2, micro_batches=1, batch_size=64, optimizer="momentum",
                 lr=1e-2, momentum=0.9, weight_decay=0.0, epochs=5, model="mlp_small", mode="lockstep",
                 prediction=True, seed=1):
        self.schedule = schedule
        self.stages = stages
        self.micro_batches = micro_batches
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.model = model
        self.mode = mode
        self.prediction = prediction
        self.seed = seed

    def _config(self):
        return ExperimentConfig(
            schedule=self.schedule, stages=self.stages, micro_batches=self.micro_batches,
            batch_size=self.batch_size, optimizer=self.optimizer, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, epochs=self.epochs, model=self.model, mode=self.mode,
            prediction=self.prediction, seed=self.seed).validate()

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else int(np.prod(X.shape[1:]))
        self._sample_shape = X.shape[1:]
        cfg = self._config()
        if cfg.batch_size > len(X):
            raise ValueError(f"batch_size={cfg.batch_size} exceeds the {len(X)} training samples")
        data = Dataset(X, self._encoder.transform(y), len(self.classes_))
        self.engine_ = build_engine(cfg, data.sample_shape, data.num_classes)
        _, self.history_, _ = train(cfg, data, None, engine=self.engine_)
        return self

    def _check(self, X):
        check_is_fitted(self, "engine_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.shape[1:] != self._sample_shape:
            raise ValueError(f"X has sample shape {X.shape[1:]}, expected {self._sample_shape}")
        return X

    def predict_proba(self, X):
        X = self._check(X)
        return self.engine_.predict_proba(X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
