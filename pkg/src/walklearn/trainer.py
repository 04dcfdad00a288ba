"""Staged SGD training: verification pre-training, context heads, attribute fine-tuning."""
from __future__ import annotations

import logging
import time
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from .tensor_core import autodiff as ad

log = logging.getLogger(__name__)

STAGES = ("verification", "context_geo", "context_weather", "attribute_finetune")
SCRATCH_LR = 1e-3
FINETUNE_LR = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    lr_global: float = 0.01
    lr_top_multiplier: float = 10.0
    margin: float = 1.0
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    stage: str = "verification"
    momentum: float = 0.0

    def __post_init__(self):
        if not self.lr_global > 0:
            raise ValueError("lr_global must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr_top_multiplier > 0:
            raise ValueError("lr_top_multiplier must be > 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def finetune_config(init, **overrides):
    """Attribute fine-tuning defaults for ``init`` in {"scratch", "pretrained"}."""
    if init == "scratch":
        base = TrainConfig(lr_global=SCRATCH_LR, stage="attribute_finetune", epochs=100)
    elif init == "pretrained":
        base = TrainConfig(lr_global=FINETUNE_LR, stage="attribute_finetune", epochs=100)
    else:
        raise ValueError(f"unknown init mode {init!r}")
    return replace(base, **overrides)


@dataclass
class TrainReport:
    stage: str
    epoch_loss: list = field(default_factory=list)
    checksum: str = ""
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"stage": self.stage, "epoch_loss": [float(v) for v in self.epoch_loss],
                "checksum": self.checksum, "wall_time": round(self.wall_time, 3), **self.extra}


def sgd_step(params, grads, lr_global, multipliers=None, velocity=None, momentum=0.0):
    """In-place ``p <- p - lr_global * m(layer) * g``; returns ``params``.

    ``multipliers`` maps layer names to m (default 1). With ``momentum > 0`` the
    caller-owned ``velocity`` dict carries the running update.
    """
    multipliers = multipliers or {}
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ad.ShapeError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        step = lr_global * multipliers.get(M.layer_of(name), 1.0)
        if momentum > 0.0:
            v = velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            velocity[name] = v
            g = v
        params.tensors[name] -= step * g
    return params


def top_two_layers(params):
    """The attribute output layer plus every embedding layer feeding it."""
    layers = params.layers
    return [l for l in layers if l == "attr" or l.endswith("/embed") or l == "embed"]


def layer_multipliers(params, cfg, pretrained):
    if cfg.stage != "attribute_finetune" or not pretrained:
        return {}
    return {l: cfg.lr_top_multiplier for l in top_two_layers(params)}


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _run_epochs(params, n_items, step_fn, cfg, multipliers=None):
    velocity = {}
    report = TrainReport(cfg.stage)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        total, count = 0.0, 0
        for idx in _batches(n_items, cfg.batch_size, rng):
            tape = ad.Tape()
            loss = step_fn(tape, idx)
            grads = ad.backward(tape, loss)
            sgd_step(params, grads, cfg.lr_global, multipliers, velocity, cfg.momentum)
            total += float(loss.data) * len(idx)
            count += len(idx)
        mean_loss = total / count
        if not np.isfinite(mean_loss):
            raise ad.NonFiniteError(f"{cfg.stage}: non-finite loss in epoch {epoch}")
        report.epoch_loss.append(mean_loss)
        log.debug("%s epoch %d loss %.5f", cfg.stage, epoch, mean_loss)
    report.wall_time = time.perf_counter() - start
    report.checksum = params.checksum()
    return report


def pretrain_verification(store, pairs, spec, cfg, init=None):
    """Siamese pre-training over the mined pairs with the contrastive loss."""
    if len(pairs) == 0:
        raise ValueError("cannot pre-train on an empty pair set")
    cfg = replace(cfg, stage="verification")
    params = init.copy() if init is not None else M.init_verification(spec, cfg.seed)
    images = store.images
    rows_a, rows_b = store.rows(pairs.a), store.rows(pairs.b)
    labels = pairs.label

    def step(tape, idx):
        b = len(idx)
        x = tape.constant(images[np.concatenate([rows_a[idx], rows_b[idx]])])
        t = M.bind(tape, params)
        e = M.verification_embedding(t, x)
        per_pair = M.contrastive_loss_tape(ad.take_rows(e, 0, b), ad.take_rows(e, b, 2 * b),
                                           labels[idx], cfg.margin)
        return ad.mean(per_pair)

    report = _run_epochs(params, len(pairs), step, cfg)
    return params, report


def train_context_head(verif_params, store, head, cfg, labels):
    """Copy the verification trunk, attach a fresh head, fit it with softmax loss.

    ``labels`` holds one context class per store row. The input ParamStore is
    never modified.
    """
    if head not in ("geo", "weather"):
        raise ValueError(f"unknown head {head!r}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(store),):
        raise ValueError("need exactly one context label per sample")
    n_cls = verif_params.spec.n_classes(head)
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"{head} labels must lie in 0..{n_cls - 1}")
    if len(np.unique(labels)) < 2:
        warnings.warn(f"{head} labels contain a single class; training proceeds", RuntimeWarning)
    cfg = replace(cfg, stage=f"context_{head}")
    params = M.init_context(verif_params, head, cfg.seed)
    images = store.images

    def step(tape, idx):
        t = M.bind(tape, params)
        logits = M.context_logits(t, tape.constant(images[idx]))
        return ad.mean(ad.softmax_cross_entropy(logits, labels[idx]))

    report = _run_epochs(params, len(store), step, cfg)
    logits = M.forward_context(params, images, head)
    report.extra["train_accuracy"] = float(np.mean(logits.argmax(axis=1) == labels)) if len(labels) else 0.0
    return params, report


class AttributeModel:
    """Masked branch trunks, their concatenated embedding and K sigmoid outputs."""

    def __init__(self, params, mask, kinds):
        self.params = params
        self.mask = M.parse_mask(mask)
        self.kinds = dict(kinds)

    @property
    def spec(self):
        return self.params.spec

    def logits_tape(self, tape, x, trainable=True):
        t = M.bind(tape, self.params, trainable=trainable)
        feats = []
        for b in self.mask:
            pre = b + "/"
            sub = {k[len(pre):]: v for k, v in t.items() if k.startswith(pre)}
            feats.append(M.branch_embedding(sub, x, self.kinds[b]))
        r = feats[0] if len(feats) == 1 else ad.concat(feats)
        return ad.dense(r, t["attr.W"], t["attr.b"])

    def decision_function(self, images, batch_size=512):
        x = np.asarray(images, dtype=np.float64)
        out = []
        for i in range(0, len(x), batch_size):
            tape = ad.Tape()
            out.append(self.logits_tape(tape, tape.constant(x[i:i + batch_size]), trainable=False).data)
        return np.concatenate(out) if out else np.zeros((0, self.params["attr.b"].size))

    def predict(self, images):
        return (self.decision_function(images) >= 0).astype(np.int64)


def standardize_embedding(params, images, scale=1.0):
    """Rescale the embed layer so its outputs have zero mean and standard deviation
    ``scale`` on ``images``.

    The branch computes the same features up to a per-unit affine map, which
    puts every branch on a common scale before a new output layer is trained.
    """
    e = M.embed_branch(params, images)
    mu = e.mean(axis=0)
    sd = np.maximum(e.std(axis=0), 1e-6) / scale
    out = params.copy()
    out.tensors["embed.W"] = params["embed.W"] / sd
    out.tensors["embed.b"] = (params["embed.b"] - mu) / sd
    return out


def compose_attribute_model(branches, mask, n_attributes, spec, seed=0, scratch=False, calibrate=None):
    """Stack the masked branches (fresh random ones when ``scratch``) under a new output layer.

    With ``calibrate`` images, each branch embedding is standardized on them first
    and scaled by 1/sqrt(#branches). The concatenation then has the same total
    variance for every mask, so the output layer learns at the same speed
    whether it sits on one branch or three.
    """
    mask = M.parse_mask(mask)
    missing = [b for b in mask if not scratch and b not in branches]
    if missing:
        raise ValueError(f"mask needs branches {missing} that were not supplied")
    tensors = OrderedDict()
    kinds = {}
    for b in mask:
        if scratch:
            src = M.init_verification(spec, seed + 101 * (1 + M.BRANCHES.index(b)))
            if b != "id":
                src = M.init_context(src, b, seed)
        else:
            src = branches[b]
        if calibrate is not None and len(calibrate):
            src = standardize_embedding(src, calibrate, 1.0 / np.sqrt(len(mask)))
        kinds[b] = "verification" if b == "id" else b
        for k, v in src.items():
            if M.layer_of(k) != "cls":
                tensors[f"{b}/{k}"] = v.copy()
    width = spec.embed_dim * len(mask)
    rng = np.random.default_rng([seed, 17])
    tensors["attr.W"] = rng.uniform(-np.sqrt(6.0 / width), np.sqrt(6.0 / width), (width, n_attributes))
    tensors["attr.b"] = np.zeros(n_attributes)
    return AttributeModel(M.ParamStore(tensors, spec, "attribute"), mask, kinds)


def finetune_attributes(branches, images, labels, cfg, mask="id", init="pretrained", spec=None):
    """Fine-tune masked branches plus K sigmoid outputs with cross-entropy.

    ``branches`` maps "id"/"geo"/"weather" to ParamStores. With ``init="scratch"``
    they are replaced by random initializations and trained with a uniform rate;
    with ``init="pretrained"`` the top two layers get ``lr_top_multiplier``.
    """
    if init not in ("scratch", "pretrained"):
        raise ValueError(f"unknown init mode {init!r}")
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    images = np.asarray(images, dtype=np.float64)
    if len(images) != len(labels):
        raise ValueError("images and labels are misaligned")
    spec = spec or next(iter(branches.values())).spec
    cfg = replace(cfg, stage="attribute_finetune")
    am = compose_attribute_model(branches, mask, labels.shape[1], spec, cfg.seed,
                                 scratch=(init == "scratch"), calibrate=images)
    mult = layer_multipliers(am.params, cfg, pretrained=(init == "pretrained"))
    targets = labels.astype(np.float64)

    def step(tape, idx):
        # summed over attributes, averaged over the batch
        logits = am.logits_tape(tape, tape.constant(images[idx]))
        return ad.scale(ad.total(ad.sigmoid_cross_entropy(logits, targets[idx])), 1.0 / len(idx))

    report = _run_epochs(am.params, len(images), step, cfg, mult)
    report.extra.update(init=init, mask="+".join(am.mask),
                        multipliers={k: v for k, v in sorted(mult.items())},
                        lr_global=cfg.lr_global)
    return am, report
