"""Shared conv trunk, Siamese verification branch and context heads.

Stage layout of every branch (bottom to top)::

    s1  conv3x3 + relu + maxpool2
    s2  conv3x3 + relu + maxpool2
    s3  dense + relu
    s4  dense + relu
    embed   dense -> D_e features          (verification: from s4;
                                            context: from concat(s3, s4))
    cls     dense -> class logits          (context branches only)

Context heads read both dense stages so they see mid-level as well as top-level
features. Parameter names are ``<layer>.W`` / ``<layer>.b``; an optional
``<branch>/`` prefix namespaces several branches inside one store.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .tensor_core import autodiff as ad
from .tensor_core import checkpoint

TRUNK_LAYERS = ("s1", "s2", "s3", "s4")
BRANCHES = ("id", "geo", "weather")
MASKS = {
    "id": ("id",),
    "id+geo": ("id", "geo"),
    "id+weather": ("id", "weather"),
    "id+geo+weather": ("id", "geo", "weather"),
}


@dataclass(frozen=True)
class ModelSpec:
    image_shape: tuple = (16, 16, 1)
    conv1_filters: int = 8
    conv2_filters: int = 16
    kernel: int = 3
    s3_units: int = 64
    s4_units: int = 64
    embed_dim: int = 32
    n_geo_classes: int = 4
    n_weather_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        h, w, _ = self.image_shape
        if h % 4 or w % 4:
            raise ValueError(f"image sides must be divisible by 4, got {h}x{w}")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")

    @property
    def flat_dim(self):
        h, w, _ = self.image_shape
        return (h // 4) * (w // 4) * self.conv2_filters

    def n_classes(self, head):
        return {"geo": self.n_geo_classes, "weather": self.n_weather_classes}[head]

    def to_dict(self):
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "image_shape": tuple(d["image_shape"])})


def parse_mask(mask):
    if isinstance(mask, (tuple, list)):
        branches = tuple(mask)
    else:
        if mask not in MASKS:
            raise ValueError(f"unknown mask {mask!r}; expected one of {sorted(MASKS)}")
        branches = MASKS[mask]
    if not branches:
        raise ValueError("mask selects no branch")
    bad = [b for b in branches if b not in BRANCHES]
    if bad:
        raise ValueError(f"unknown branches {bad}")
    return tuple(b for b in BRANCHES if b in branches)


def layer_of(name):
    return name.rsplit(".", 1)[0]


class ParamStore:
    """Ordered named parameter arrays; insertion order is bottom-to-top."""

    def __init__(self, tensors=None, spec=None, kind="verification"):
        self.tensors = OrderedDict()
        for k, v in (tensors or {}).items():
            if k in self.tensors:
                raise KeyError(f"duplicate parameter {k!r}")
            self.tensors[k] = np.array(v, dtype=np.float64)
        self.spec = spec
        self.kind = kind

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def layers(self):
        """Layer names in bottom-to-top order."""
        return list(OrderedDict.fromkeys(layer_of(n) for n in self.tensors))

    def copy(self):
        return ParamStore({k: v.copy() for k, v in self.tensors.items()}, self.spec, self.kind)

    def subset(self, prefix, strip=True):
        keep = {(k[len(prefix):] if strip else k): v.copy()
                for k, v in self.tensors.items() if k.startswith(prefix)}
        return ParamStore(keep, self.spec, self.kind)

    def n_params(self):
        return int(sum(v.size for v in self.tensors.values()))

    def header(self):
        return {"kind": self.kind, "spec": self.spec.to_dict() if self.spec else None,
                "layers": self.layers}

    def to_bytes(self):
        return checkpoint.dumps(self.tensors, self.header())

    def checksum(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path):
        checkpoint.save(path, self.tensors, self.header())

    @classmethod
    def load(cls, path, expect_spec=None):
        tensors, header = checkpoint.load(path)
        spec = ModelSpec.from_dict(header["spec"]) if header.get("spec") else None
        if expect_spec is not None and spec != expect_spec:
            raise checkpoint.CheckpointError(f"checkpoint spec {spec} does not match {expect_spec}")
        return cls(tensors, spec, header.get("kind", "verification"))


# fixed input centering; images live in [0, 1]
PIXEL_MEAN = 0.5


def _uniform(rng, fan_in, shape):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _trunk_params(spec, rng):
    _, _, c = spec.image_shape
    k = spec.kernel
    p = OrderedDict()
    p["s1.W"] = _uniform(rng, k * k * c, (k, k, c, spec.conv1_filters))
    p["s1.b"] = np.zeros(spec.conv1_filters)
    p["s2.W"] = _uniform(rng, k * k * spec.conv1_filters, (k, k, spec.conv1_filters, spec.conv2_filters))
    p["s2.b"] = np.zeros(spec.conv2_filters)
    p["s3.W"] = _uniform(rng, spec.flat_dim, (spec.flat_dim, spec.s3_units))
    p["s3.b"] = np.zeros(spec.s3_units)
    p["s4.W"] = _uniform(rng, spec.s3_units, (spec.s3_units, spec.s4_units))
    p["s4.b"] = np.zeros(spec.s4_units)
    return p


def init_verification(spec, seed=0):
    """Fresh verification branch: trunk plus a D_e embedding layer."""
    rng = np.random.default_rng([seed, 11])
    p = _trunk_params(spec, rng)
    p["embed.W"] = _uniform(rng, spec.s4_units, (spec.s4_units, spec.embed_dim))
    p["embed.b"] = np.zeros(spec.embed_dim)
    return ParamStore(p, spec, "verification")


def init_context(verif, head, seed=0):
    """Branch-copy the verification trunk and attach a fresh context head."""
    spec = verif.spec
    rng = np.random.default_rng([seed, 13, BRANCHES.index(head)])
    p = OrderedDict((k, verif[k].copy()) for k in verif if layer_of(k) in TRUNK_LAYERS)
    tap = spec.s3_units + spec.s4_units
    p["embed.W"] = _uniform(rng, tap, (tap, spec.embed_dim))
    p["embed.b"] = np.zeros(spec.embed_dim)
    n_cls = spec.n_classes(head)
    p["cls.W"] = _uniform(rng, spec.embed_dim, (spec.embed_dim, n_cls))
    p["cls.b"] = np.zeros(n_cls)
    return ParamStore(p, spec, head)


# tape-level building blocks

def bind(tape, params, prefix="", trainable=True):
    """Put ``params`` on ``tape``; returns ``{name: Tensor}`` without the prefix."""
    out = {}
    for k, v in params.items():
        if trainable:
            out[k] = tape.param(prefix + k, v)
        else:
            out[k] = tape.constant(v)
    return out


def trunk(t, x, acts=None):
    """Forward the four trunk stages; returns ``(s3, s4)`` tensors."""
    x = ad.shift(x, -PIXEL_MEAN)
    h = ad.maxpool2(ad.relu(ad.conv2d(x, t["s1.W"], t["s1.b"])))
    if acts is not None:
        acts["s1"] = h
    h = ad.maxpool2(ad.relu(ad.conv2d(h, t["s2.W"], t["s2.b"])))
    if acts is not None:
        acts["s2"] = h
    h3 = ad.relu(ad.dense(ad.flatten(h), t["s3.W"], t["s3.b"]))
    h4 = ad.relu(ad.dense(h3, t["s4.W"], t["s4.b"]))
    if acts is not None:
        acts["s3"], acts["s4"] = h3, h4
    return h3, h4


def verification_embedding(t, x, acts=None):
    _, h4 = trunk(t, x, acts)
    e = ad.dense(h4, t["embed.W"], t["embed.b"])
    if acts is not None:
        acts["embed"] = e
    return e


def context_embedding(t, x, acts=None):
    h3, h4 = trunk(t, x, acts)
    e = ad.dense(ad.concat([h3, h4]), t["embed.W"], t["embed.b"])
    if acts is not None:
        acts["embed"] = e
    return e


def context_logits(t, x, acts=None):
    logits = ad.dense(context_embedding(t, x, acts), t["cls.W"], t["cls.b"])
    if acts is not None:
        acts["cls"] = logits
    return logits


def branch_embedding(t, x, kind, acts=None):
    if kind == "verification" or kind == "id":
        return verification_embedding(t, x, acts)
    return context_embedding(t, x, acts)


def contrastive_loss_tape(e_i, e_j, y, delta):
    """Per-pair contrastive loss: d for y=+1, max(delta - d, 0) for y=-1."""
    y = np.asarray(y)
    if not np.all(np.isin(y, (1, -1))):
        raise ValueError("pair labels must be +1 or -1")
    d = ad.l2_distance(e_i, e_j)
    pos = ad.mul_const(d, (y == 1).astype(float))
    hinge = ad.relu(ad.shift(ad.scale(d, -1.0), delta))
    neg = ad.mul_const(hinge, (y == -1).astype(float))
    return ad.add(pos, neg)


# numpy-level API

def _check_images(images, spec):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != spec.image_shape:
        raise ad.ShapeError(f"images of shape {x.shape} do not match spec image {spec.image_shape}")
    return x


def _run(params, images, fn, kind=None):
    spec = params.spec
    x = _check_images(images, spec)
    tape = ad.Tape()
    t = bind(tape, params, trainable=False)
    acts = {}
    out = fn(t, tape.constant(x), acts) if kind is None else fn(t, tape.constant(x), kind, acts)
    return out.data, {k: v.data for k, v in acts.items()}


def embed_verification(params, images):
    """D_e embedding rows for one image (H, W, C) or a batch (N, H, W, C)."""
    out, _ = _run(params, images, verification_embedding)
    return out


def embed_branch(params, images):
    out, _ = _run(params, images, branch_embedding, kind=params.kind)
    return out


def forward_context(params, images, head=None):
    head = head or params.kind
    if head not in ("geo", "weather") or params.kind != head:
        raise ValueError(f"params of kind {params.kind!r} cannot serve head {head!r}")
    out, _ = _run(params, images, context_logits)
    return out


def activations(params, images):
    """All named stage activations of a branch (post-nonlinearity)."""
    fn = context_logits if params.kind in ("geo", "weather") else verification_embedding
    _, acts = _run(params, images, fn)
    return acts


def contrastive_loss(e_i, e_j, y, delta):
    """Contrastive loss of a single pair of embedding vectors."""
    if y not in (1, -1):
        raise ValueError(f"label must be +1 or -1, got {y!r}")
    if delta <= 0:
        raise ValueError("margin must be positive")
    d = float(np.linalg.norm(np.asarray(e_i, float) - np.asarray(e_j, float)))
    return d if y == 1 else max(delta - d, 0.0)


def concat_representation(e_verif, e_geo=None, e_weather=None, mask="id+geo+weather"):
    """Concatenate branch features in the fixed order (verification, location, weather)."""
    parts = {"id": e_verif, "geo": e_geo, "weather": e_weather}
    chosen = [np.asarray(parts[b], dtype=float) for b in parse_mask(mask)]
    if any(p is None or p.ndim == 0 for p in chosen):
        raise ValueError("mask selects a missing branch")
    widths = {p.shape[-1] for p in chosen}
    if len(widths) != 1 or len({p.shape[:-1] for p in chosen}) != 1:
        raise ValueError(f"branch feature widths differ: {[p.shape for p in chosen]}")
    return np.concatenate(chosen, axis=-1)
