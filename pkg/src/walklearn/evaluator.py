"""Frozen-feature linear evaluation, fine-tuning evaluation and the ablation matrix."""
from __future__ import annotations

import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import model as M
from .pipeline import PipelineConfig, pretrain_all
from .trainer import finetune_attributes, finetune_config
from .validation import check_binary_labels, check_features

log = logging.getLogger(__name__)

ARMS = ("scratch", "id", "id+geo", "id+weather", "id+geo+weather")


class LinearSVM(ClassifierMixin, BaseEstimator):
    """Binary linear SVM: mean hinge loss + ``alpha * ||w||^2``.

    Solved by seeded minibatch subgradient descent on standardized features with
    a proximal L2 step and iterate averaging over the second half of training.
    The fitted weights are mapped back to raw feature units, so
    ``decision_function(X) = X @ coef_ + intercept_``. A score of exactly 0
    predicts the positive class.
    """

    def __init__(self, alpha=1e-3, epochs=60, batch_size=32, eta0=0.1, random_state=0):
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.eta0 = eta0
        self.random_state = random_state

    def fit(self, X, y):
        X = check_features(X)
        y = check_binary_labels(y, len(X))
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        if len(np.unique(y)) < 2:
            warnings.warn("single-class labels: fitting a constant predictor", RuntimeWarning)
            self.coef_ = np.zeros(X.shape[1])
            self.intercept_ = 1.0 if (len(y) and y[0] == 1) else -1.0
            return self
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd < 1e-12] = 1.0
        Z = (X - mu) / sd
        s = 2.0 * y - 1.0
        n, d = Z.shape
        w, b = np.zeros(d), 0.0
        w_avg, b_avg, n_avg = np.zeros(d), 0.0, 0
        lam2 = 2.0 * self.alpha
        t = 0
        rng = np.random.default_rng(self.random_state)
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            for i in range(0, n, self.batch_size):
                idx = order[i:i + self.batch_size]
                eta = self.eta0 / (1.0 + self.eta0 * lam2 * t)
                margin = s[idx] * (Z[idx] @ w + b)
                active = margin < 1.0
                gw = -(s[idx, None] * Z[idx] * active[:, None]).sum(axis=0) / len(idx)
                gb = -(s[idx] * active).sum() / len(idx)
                w = (w - eta * gw) / (1.0 + eta * lam2)
                b -= eta * gb
                t += 1
                if epoch >= self.epochs // 2:
                    w_avg += w
                    b_avg += b
                    n_avg += 1
        w, b = w_avg / n_avg, b_avg / n_avg
        self.coef_ = w / sd
        self.intercept_ = float(b - np.sum(w * mu / sd))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_features(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(np.int64)

    def objective(self, X, y):
        s = 2.0 * np.asarray(y) - 1.0
        hinge = np.maximum(0.0, 1.0 - s * self.decision_function(X))
        return float(hinge.mean() + self.alpha * self.coef_ @ self.coef_)


def fit_linear(features, labels, lam=1e-3, seed=0, epochs=60):
    return LinearSVM(alpha=lam, epochs=epochs, random_state=seed).fit(features, labels)


def extract_features(branches, images, mask="id+geo+weather", batch_size=512):
    """Top-layer features of the masked branches, concatenated row-wise."""
    images = np.asarray(images, dtype=np.float64)
    blocks = []
    for b in M.parse_mask(mask):
        if b not in branches:
            raise ValueError(f"mask selects branch {b!r} which was not supplied")
        rows = [M.embed_branch(branches[b], images[i:i + batch_size])
                for i in range(0, len(images), batch_size)]
        blocks.append(np.concatenate(rows) if rows else np.zeros((0, branches[b].spec.embed_dim)))
    return np.concatenate(blocks, axis=1)


def accuracy_table(predictions, truth):
    """Per-attribute accuracy in percent and their unweighted average."""
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.ndim == 1:
        predictions = predictions[:, None]
    if truth.ndim == 1:
        truth = truth[:, None]
    if predictions.shape != truth.shape:
        raise ValueError(f"prediction rows {predictions.shape} misaligned with truth {truth.shape}")
    if len(truth) == 0:
        raise ValueError("no rows to evaluate")
    per = 100.0 * (predictions == truth).mean(axis=0)
    return per, float(per.mean())


def evaluate(classifiers, features, truth):
    """Accuracy of one classifier per attribute column of ``truth``."""
    truth = np.asarray(truth)
    if truth.ndim == 1:
        truth = truth[:, None]
    features = np.asarray(features)
    if len(features) != len(truth):
        raise ValueError(f"{len(features)} feature rows vs {len(truth)} truth rows")
    if len(classifiers) != truth.shape[1]:
        raise ValueError(f"{len(classifiers)} classifiers for {truth.shape[1]} attributes")
    preds = np.stack([clf.predict(features) for clf in classifiers], axis=1)
    return accuracy_table(preds, truth)


def group_split(groups, test_fraction, seed):
    """Boolean test mask assigning whole groups (identities) to one side."""
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    rng = np.random.default_rng([seed, 23])
    n_test = max(1, int(round(test_fraction * len(uniq))))
    test_groups = rng.choice(uniq, size=min(n_test, len(uniq) - 1) if len(uniq) > 1 else 0, replace=False)
    return np.isin(groups, test_groups)


def labelled_split(groups, test_fraction, label_fraction, seed):
    """``(train, test)`` masks: whole groups are held out for testing, and only
    ``label_fraction`` of the remaining groups carry labels for training."""
    groups = np.asarray(groups)
    test = group_split(groups, test_fraction, seed)
    train = ~test
    if label_fraction < 1.0:
        keep = group_split(groups[train], label_fraction, seed + 1)
        train[np.flatnonzero(train)[~keep]] = False
    return train, test


def split_groups(truth, store):
    """Identity per row when known, else the track id."""
    return truth.identity_of if np.all(truth.identity_of >= 0) else store.track_ids


@dataclass
class AblationResult:
    arms: tuple
    n_attributes: int
    seeds: list = field(default_factory=list)
    # path -> array (n_seeds, n_arms, K) of accuracies in percent
    scores: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def partial(self):
        return bool(self.failures)

    def per_seed_average(self, path):
        return self.scores[path].mean(axis=2)

    def mean(self, path):
        return self.scores[path].mean(axis=0)

    def sd(self, path):
        s = self.scores[path]
        return s.std(axis=0, ddof=1) if len(s) > 1 else np.zeros(s.shape[1:])

    def arm_average(self, path, arm):
        return float(self.per_seed_average(path)[:, self.arms.index(arm)].mean())

    def attribute_mean(self, path, arm, k):
        return float(self.scores[path][:, self.arms.index(arm), k].mean())

    def to_csv(self, path):
        buf = io.StringIO()
        k = self.n_attributes
        buf.write("path,seed,arm," + ",".join(f"attr{i}" for i in range(k)) + ",average\n")
        for si, seed in enumerate(self.seeds):
            for ai, arm in enumerate(self.arms):
                row = self.scores[path][si, ai]
                buf.write(f"{path},{seed},{arm}," + ",".join(f"{v:.4f}" for v in row)
                          + f",{row.mean():.4f}\n")
        return buf.getvalue()

    def table(self, path):
        """Rows = arms, columns = attributes plus the average, mean +- sd over seeds."""
        k = self.n_attributes
        mean, sd = self.mean(path), self.sd(path)
        avg = self.per_seed_average(path)
        head = f"{'method':<16}" + "".join(f"{'a' + str(i):>12}" for i in range(k)) + f"{'Average':>14}"
        lines = [f"[{path}] accuracy (%) over {len(self.seeds)} seeds", head, "-" * len(head)]
        for ai, arm in enumerate(self.arms):
            cells = "".join(f"{mean[ai, i]:>7.1f}±{sd[ai, i]:<4.1f}" for i in range(k))
            a_sd = avg[:, ai].std(ddof=1) if len(avg) > 1 else 0.0
            lines.append(f"{arm:<16}{cells}{avg[:, ai].mean():>9.1f}±{a_sd:<4.1f}")
        return "\n".join(lines)

    def improvements(self, path):
        """Average gain of each arm over the id-only arm."""
        base = self.arm_average(path, "id")
        return {arm: self.arm_average(path, arm) - base for arm in self.arms}

    def improvement_chart(self, path, width=30):
        gains = self.improvements(path)
        scale = max(1e-9, max(abs(v) for v in gains.values()))
        lines = [f"[{path}] average gain over id-only (points)"]
        for arm, g in gains.items():
            bar = "#" * int(round(width * abs(g) / scale))
            lines.append(f"{arm:<16}{g:+7.2f} {'-' if g < 0 else ''}{bar}")
        return "\n".join(lines)


def linear_arm_scores(bundle, cfg, seed, arms=ARMS):
    """Frozen features + one linear SVM per attribute on a group-wise split."""
    store, truth = bundle.store, bundle.truth
    Y = truth.aligned(store)
    train, test = labelled_split(split_groups(truth, store), cfg.eval.linear_test_fraction, 1.0, seed)
    out = np.zeros((len(arms), Y.shape[1]))
    for ai, arm in enumerate(arms):
        if arm == "scratch":
            branches = {"id": M.init_verification(cfg.model, seed)}
            mask = "id"
        else:
            branches, mask = bundle.branches, arm
        F = extract_features(branches, store.images, mask)
        clfs = [fit_linear(F[train], Y[train, k], cfg.eval.svm_lambda, seed, cfg.eval.svm_epochs)
                for k in range(Y.shape[1])]
        out[ai], _ = evaluate(clfs, F[test], Y[test])
    return out


def finetune_train_config(ev, init, seed):
    """TrainConfig for attribute fine-tuning from the evaluation settings."""
    lr = ev.finetune_lr_scratch if init == "scratch" else ev.finetune_lr_pretrained
    return finetune_config(init, lr_global=lr, lr_top_multiplier=ev.finetune_top_multiplier,
                           epochs=ev.finetune_epochs, batch_size=ev.finetune_batch_size,
                           momentum=ev.finetune_momentum, seed=seed)


def finetune_arm_scores(bundle, cfg, seed, arms=ARMS):
    """Fine-tune each arm on the training identities and score the held-out ones."""
    store, truth = bundle.store, bundle.truth
    Y = truth.aligned(store)
    train, test = labelled_split(split_groups(truth, store), cfg.eval.finetune_test_fraction,
                                 cfg.eval.finetune_label_fraction, seed)
    out = np.zeros((len(arms), Y.shape[1]))
    for ai, arm in enumerate(arms):
        init = "scratch" if arm == "scratch" else "pretrained"
        mask = "id" if arm == "scratch" else arm
        tc = finetune_train_config(cfg.eval, init, seed)
        am, _ = finetune_attributes(bundle.branches, store.images[train], Y[train], tc, mask=mask,
                                    init=init, spec=cfg.model)
        out[ai], _ = accuracy_table(am.predict(store.images[test]), Y[test])
    return out


def run_ablation(world_seeds, cfg=None, arms=ARMS, min_seeds=3):
    """Run the full pipeline per seed and score every arm on the selected path(s)."""
    cfg = cfg or PipelineConfig()
    seeds = list(world_seeds)
    if len(seeds) < min_seeds:
        raise ValueError(f"ablation needs at least {min_seeds} seeds, got {len(seeds)}")
    paths = ("linear", "finetune") if cfg.eval.path == "both" else (cfg.eval.path,)
    result = AblationResult(tuple(arms), cfg.world.n_attributes)
    collected = {p: [] for p in paths}
    for seed in seeds:
        run_cfg = cfg.with_seed(seed)
        try:
            bundle = pretrain_all(run_cfg)
            rows = {}
            if "linear" in paths:
                rows["linear"] = linear_arm_scores(bundle, run_cfg, seed, arms)
            if "finetune" in paths:
                rows["finetune"] = finetune_arm_scores(bundle, run_cfg, seed, arms)
        except (ValueError, FloatingPointError) as exc:
            log.warning("seed %d failed: %s", seed, exc)
            result.failures.append((seed, str(exc)))
            continue
        result.seeds.append(seed)
        for p in paths:
            collected[p].append(rows[p])
    for p in paths:
        result.scores[p] = (np.array(collected[p]) if collected[p]
                            else np.zeros((0, len(arms), cfg.world.n_attributes)))
    return result
