"""scikit-learn compatible wrappers around the ViT distillation and the
segmentation networks."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .dino import DistillConfig, dino_train
from .exceptions import ShapeError
from .segnet import DiamantNet, SegNetConfig, SkipSwitches
from .tensor import Tensor, ops
from .training import SplitData, mean_foreground_dice, predict_labels, predict_proba, train_segmenter
from .utils import check_images, check_labels
from .vit import ViTConfig, attention_stack


class AttentionExtractor(TransformerMixin, BaseEstimator):
    """Self-distils a small ViT on the images passed to ``fit``; ``transform``
    returns the per-head CLS attention maps at the input resolution."""

    def __init__(self, image_size=32, patch=8, width=32, depth=2, heads=2, total_steps=200, lr=1e-4,
                 batch_size=8, n_prototypes=16, random_state=0):
        self.image_size = image_size
        self.patch = patch
        self.width = width
        self.depth = depth
        self.heads = heads
        self.total_steps = total_steps
        self.lr = lr
        self.batch_size = batch_size
        self.n_prototypes = n_prototypes
        self.random_state = random_state

    def _resize(self, X):
        if X.shape[-2:] == (self.image_size, self.image_size):
            return X
        return ops.resize_bilinear(Tensor(X), self.image_size, self.image_size).data

    def fit(self, X, y=None):
        X = check_images(X)
        self.vit_config_ = ViTConfig(self.image_size, self.patch, self.width, self.depth, self.heads, X.shape[1])
        cfg = DistillConfig(K=self.n_prototypes, total_steps=self.total_steps, lr=self.lr,
                            batch_size=self.batch_size, seed=int(self.random_state))
        state = dino_train(self._resize(X), self.vit_config_, cfg)
        self.vit_params_ = state.teacher
        self.losses_ = list(state.losses)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "vit_params_")
        X = check_images(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"fitted on {self.n_features_in_} channels, got {X.shape[1]}")
        return attention_stack(X, self.vit_config_, self.vit_params_, out_hw=X.shape[-2:])


def stack_inputs(images, attn) -> np.ndarray:
    """Channel-wise concatenation of images and attention maps, the input layout
    :class:`DiamantSegmenter` expects."""
    return np.concatenate([np.asarray(images, np.float32), np.asarray(attn, np.float32)], axis=1)


class DiamantSegmenter(BaseEstimator):
    """Single- or dual-encoder segmenter.

    ``X`` is (n, in_channels + h, H, W): the first ``in_channels`` channels
    are the image, the rest the attention stack.  ``y`` is (n, H, W) class ids.
    The last ``validation_fraction`` of the samples is held out for model
    selection and early stopping.
    """

    def __init__(self, in_channels=1, variant="dual", switches="1111", base_width=8, n_classes=None,
                 lr0=1e-3, weight_decay=1e-4, batch_size=8, max_epochs=30, lr_power=0.9,
                 early_stop_patience=30, validation_fraction=0.1, augment=True, random_state=0):
        self.in_channels = in_channels
        self.variant = variant
        self.switches = switches
        self.base_width = base_width
        self.n_classes = n_classes
        self.lr0 = lr0
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lr_power = lr_power
        self.early_stop_patience = early_stop_patience
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.random_state = random_state

    def _split(self, X):
        if X.shape[1] <= self.in_channels:
            raise ShapeError(f"X needs more than in_channels={self.in_channels} channels "
                             f"(image followed by attention maps), got {X.shape[1]}")
        return X[:, :self.in_channels], X[:, self.in_channels:]

    def fit(self, X, y):
        X = check_images(X, multiple=16)
        y = check_labels(y, X, self.n_classes)
        n_classes = self.n_classes or int(y.max()) + 1
        images, attn = self._split(X)
        n = len(X)
        n_val = max(1, int(round(n * self.validation_fraction)))
        if n - n_val < 2:
            raise ValueError(f"need at least {n_val + 2} samples to train with a validation split")
        ids = [str(i) for i in range(n)]

        def part(sl):
            return SplitData(ids[sl], ids[sl], images[sl], attn[sl], y[sl], [1.0] * len(ids[sl]))

        cfg = TrainConfig(lr0=self.lr0, weight_decay=self.weight_decay, batch_size=self.batch_size,
                          max_epochs=self.max_epochs, lr_power=self.lr_power,
                          early_stop_patience=self.early_stop_patience, seed=int(self.random_state),
                          variant=self.variant, switches=self.switches, image_size=X.shape[-1],
                          base_width=self.base_width, augment=self.augment)
        self.net_config_ = SegNetConfig(self.in_channels, attn.shape[1], n_classes, self.base_width, self.variant)
        res = train_segmenter(part(slice(0, n - n_val)), part(slice(n - n_val, n)), self.net_config_, cfg)
        self.params_ = res.params
        self.history_ = res.history
        self.best_val_dice_ = res.best_dice
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = X.shape[1]
        return self

    def _inputs(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, multiple=16)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"fitted on {self.n_features_in_} channels, got {X.shape[1]}")
        return self._split(X)

    def predict(self, X) -> np.ndarray:
        images, attn = self._inputs(X)
        return predict_labels(DiamantNet(self.net_config_), self.params_, images, attn,
                              SkipSwitches.parse(self.switches))

    def predict_proba(self, X) -> np.ndarray:
        images, attn = self._inputs(X)
        return predict_proba(DiamantNet(self.net_config_), self.params_, images, attn,
                             SkipSwitches.parse(self.switches))

    def score(self, X, y) -> float:
        """Mean foreground dice over images and classes."""
        pred = self.predict(X)
        y = check_labels(y, check_images(X))
        return mean_foreground_dice(pred, y, len(self.classes_))
