"""scikit-learn style wrappers around frozen branches and attribute fine-tuning."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import model as M
from .evaluator import extract_features
from .trainer import finetune_attributes, finetune_config
from .validation import check_binary_labels, check_images


class BranchFeatures(TransformerMixin, BaseEstimator):
    """Frozen concatenated embeddings of the masked branches.

    ``branches`` maps "id" / "geo" / "weather" to trained ParamStores. Fitting
    only checks that the mask is covered and records the input shape.
    """

    def __init__(self, branches=None, mask="id"):
        self.branches = branches
        self.mask = mask

    def fit(self, X, y=None):
        names = M.parse_mask(self.mask)
        missing = [b for b in names if b not in (self.branches or {})]
        if missing:
            raise ValueError(f"mask {self.mask!r} needs branches {missing}")
        spec = self.branches[names[0]].spec
        X = check_images(X, spec.image_shape)
        self.image_shape_ = X.shape[1:]
        self.n_features_out_ = sum(self.branches[b].spec.embed_dim for b in names)
        return self

    def transform(self, X):
        check_is_fitted(self, "image_shape_")
        X = check_images(X, self.image_shape_)
        return extract_features(self.branches, X, self.mask)


class AttributeClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label attribute model fine-tuned end to end from images.

    ``y`` is ``(N, K)`` binary. ``init="scratch"`` ignores ``branches`` and
    trains a randomly initialized identity-shaped network instead.
    """

    def __init__(self, branches=None, mask="id", init="pretrained", lr=None,
                 lr_top_multiplier=10.0, epochs=100, batch_size=8, spec=None, random_state=0):
        self.branches = branches
        self.mask = mask
        self.init = init
        self.lr = lr
        self.lr_top_multiplier = lr_top_multiplier
        self.epochs = epochs
        self.batch_size = batch_size
        self.spec = spec
        self.random_state = random_state

    def fit(self, X, y):
        branches = self.branches or {}
        spec = self.spec or (next(iter(branches.values())).spec if branches else M.ModelSpec())
        X = check_images(X, spec.image_shape)
        Y = check_binary_labels(y, len(X), multi=True)
        # lr=None keeps the per-init default rate
        rate = {} if self.lr is None else {"lr_global": self.lr}
        cfg = finetune_config(self.init, lr_top_multiplier=self.lr_top_multiplier, epochs=self.epochs,
                              batch_size=self.batch_size, seed=self.random_state, **rate)
        self.model_, self.report_ = finetune_attributes(branches, X, Y, cfg, mask=self.mask,
                                                        init=self.init, spec=spec)
        self.n_outputs_ = Y.shape[1]
        self.classes_ = [np.array([0, 1])] * self.n_outputs_
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(check_images(X, self.model_.spec.image_shape))

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(np.int64)

    def score(self, X, y, sample_weight=None):
        """Mean per-attribute accuracy (not the subset accuracy sklearn uses by default)."""
        Y = check_binary_labels(y, len(X), multi=True)
        return float(np.mean(self.predict(X) == Y))
