"""scikit-learn style wrapper around the restoration pipeline.

MiMRestorer holds hyperparameters verbatim (so get_params/set_params/clone
behave), builds the experiment config at fit time from the training batch's
image extents, and restores with the deterministic sampler at predict time.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .degradations import PairedSample
from .errors import ParameterError
from .routing import MiMConfig
from .flow import SamplerConfig
from .training import (
    DataConfig,
    ExperimentConfig,
    OptimizerConfig,
    derived_seed,
    restoration_noise,
    restore_image,
    train_model,
)

_PREDICT_NOISE_STREAM = 5


def validate_image_batch(X, name="X"):
    """Coerce to a float64 [n, C, H, W] batch with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ParameterError(f"{name} must be [n, channels, height, width], got shape {X.shape}")
    if X.shape[0] < 1:
        raise ParameterError(f"{name} must contain at least one image")
    if not np.all(np.isfinite(X)):
        raise ParameterError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ParameterError(f"{name} values fall outside [0, 1]")
    return X


def validate_image_pair(X, y):
    X = validate_image_batch(X, "X")
    y = validate_image_batch(y, "y")
    if X.shape != y.shape:
        raise ParameterError(f"X shape {X.shape} does not match y shape {y.shape}")
    return X, y


class MiMRestorer(BaseEstimator):
    """Image restorer with a fit/predict/score interface.

    fit(X, y) trains on degraded inputs X against clean targets y; predict(X)
    samples restorations; transform is an alias so the estimator composes in
    pipelines. All arrays are [n, channels, height, width] in [0, 1].
    """

    def __init__(
        self,
        model_dim=16,
        block_count=2,
        sub_expert_count=4,
        top_k=2,
        window=2,
        heads=1,
        se_reduction=4,
        patch=4,
        text_tokens=2,
        variant="full",
        train_steps=200,
        batch_size=4,
        learning_rate=1e-3,
        balance_coeff=0.0,
        sampler_steps=40,
        seed=0,
    ):
        self.model_dim = model_dim
        self.block_count = block_count
        self.sub_expert_count = sub_expert_count
        self.top_k = top_k
        self.window = window
        self.heads = heads
        self.se_reduction = se_reduction
        self.patch = patch
        self.text_tokens = text_tokens
        self.variant = variant
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.balance_coeff = balance_coeff
        self.sampler_steps = sampler_steps
        self.seed = seed

    def _experiment_config(self, channels, height, width):
        model = MiMConfig(
            model_dim=self.model_dim,
            block_count=self.block_count,
            sub_expert_count=self.sub_expert_count,
            top_k=self.top_k,
            window=self.window,
            heads=self.heads,
            se_reduction=self.se_reduction,
            patch=self.patch,
            text_tokens=self.text_tokens,
            variant=self.variant,
            image_height=height,
            image_width=width,
            channels=channels,
        )
        return ExperimentConfig(
            model=model,
            sampler=SamplerConfig(steps=self.sampler_steps),
            optimizer=OptimizerConfig(
                learning_rate=self.learning_rate, balance_coeff=self.balance_coeff
            ),
            data=DataConfig(height=height, width=width, channels=channels),
            train_steps=self.train_steps,
            batch_size=self.batch_size,
            seed=self.seed,
        ).validate()

    def fit(self, X, y):
        X, y = validate_image_pair(X, y)
        n, channels, height, width = X.shape
        config = self._experiment_config(channels, height, width)
        samples = [
            PairedSample(clean=y[i], degraded=X[i], spec=None).validate() for i in range(n)
        ]
        self.config_ = config
        self.model_, self.history_ = train_model(config, samples=samples)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This MiMRestorer instance is not fitted yet; call fit before predict."
            )

    def predict(self, X):
        self._check_fitted()
        X = validate_image_batch(X)
        expected = (self.config_.data.channels, self.config_.data.height, self.config_.data.width)
        if X.shape[1:] != expected:
            raise ParameterError(f"X images have shape {X.shape[1:]}, fitted on {expected}")
        noise_seed = derived_seed(self.seed, _PREDICT_NOISE_STREAM)
        restored = [
            restore_image(
                self.model_, X[i], self.config_.sampler, restoration_noise(self.config_.model, noise_seed, i)
            )
            for i in range(X.shape[0])
        ]
        return np.stack(restored)

    def transform(self, X):
        return self.predict(X)

    def score(self, X, y):
        """Negative pixel MSE, so larger is better per estimator convention."""
        X, y = validate_image_pair(X, y)
        predicted = self.predict(X)
        return float(-np.mean((predicted - y) ** 2))
