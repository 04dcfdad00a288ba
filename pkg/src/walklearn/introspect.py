"""Class-related neuron ranking and maximally-activating sample retrieval."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as M


@dataclass
class NeuronReport:
    layer: str
    neuron: int
    selected_for: int
    class_means: list
    top_sample_ids: list
    top_values: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.top_sample_ids) < 1:
            raise ValueError("a neuron report needs at least one retrieved sample")

    def to_dict(self):
        return {
            "layer": self.layer,
            "neuron": int(self.neuron),
            "selected_for": int(self.selected_for),
            "class_means": [float(v) for v in self.class_means],
            "top_sample_ids": [int(s) for s in self.top_sample_ids],
            "top_values": [float(v) for v in self.top_values],
        }


def neuron_activations(params, images, layer):
    """``(N, units)`` post-nonlinearity activations; conv maps are reduced by spatial max."""
    acts = M.activations(params, images)
    if layer not in acts:
        raise KeyError(f"unknown layer {layer!r}; available: {sorted(acts)}")
    a = acts[layer]
    if a.ndim == 4:
        a = a.max(axis=(1, 2))
    return a.reshape(len(a), -1)


def _order_desc(values, tiebreak):
    # descending by value, ascending by tiebreak key
    return np.lexsort((tiebreak, -values))


def standardize_units(acts):
    """Per-unit z-scores over all samples; constant units map to zero."""
    acts = np.asarray(acts, dtype=np.float64)
    sd = acts.std(axis=0)
    return (acts - acts.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def rank_neurons(acts, sample_ids, class_labels, n, k, use_max=False, layer="", standardize=False):
    """Core ranking over a precomputed activation matrix.

    For each class the ``n`` units with the highest class-conditional mean
    (or max with ``use_max``) are selected; each unit then retrieves the ``k``
    samples with the highest activation over the whole set. Ties go to the lower
    unit index and the lower sample id. With ``standardize`` the class statistics
    are taken over per-unit z-scores, so units that fire strongly for every class
    do not crowd out class-specific ones; retrieval order is unaffected.
    """
    acts = np.asarray(acts, dtype=np.float64)
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    labels = np.asarray(class_labels)
    if n < 1 or k < 1:
        raise ValueError("n and k must be >= 1")
    if labels.shape != (len(acts),) or sample_ids.shape != (len(acts),):
        raise ValueError("class labels and sample ids must cover every sample")
    classes = np.unique(labels)
    units = np.arange(acts.shape[1])
    reduce = np.max if use_max else np.mean
    scored = standardize_units(acts) if standardize else acts
    stats = np.stack([reduce(scored[labels == c], axis=0) for c in classes])
    reports = []
    for ci, c in enumerate(classes):
        chosen = _order_desc(stats[ci], units)[:n]
        for u in chosen:
            top = _order_desc(acts[:, u], sample_ids)[:k]
            reports.append(NeuronReport(layer, int(u), int(c), stats[:, u].tolist(),
                                        sample_ids[top].tolist(), acts[top, u].tolist()))
    return reports


def top_neurons_per_class(params, store, layer, class_labels, n=9, k=1, use_max=False,
                          standardize=False):
    """Rank ``layer`` units of ``params`` per class over every sample of ``store``."""
    acts = neuron_activations(params, store.images, layer)
    return rank_neurons(acts, store.sample_ids, class_labels, n, k, use_max, layer, standardize)


def purity(reports, class_of):
    """Fraction of reports whose retrieved samples all belong to the class they were selected for.

    ``class_of`` maps sample_id -> class label.
    """
    if not reports:
        return 0.0
    hits = 0
    for r in reports:
        got = {int(class_of[s]) for s in r.top_sample_ids}
        hits += got == {r.selected_for}
    return hits / len(reports)


def reports_json(reports, **meta):
    return json.dumps({**meta, "neurons": [r.to_dict() for r in reports]}, indent=2, sort_keys=True)


def write_pgm(path, image):
    """Binary 8-bit PGM of a single-channel image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0]
    h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def dump_images(reports, store, directory):
    """One PGM per retrieved sample, named ``c<class>_n<neuron>_r<rank>_s<sample>.pgm``."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for r in reports:
        for rank, sid in enumerate(r.top_sample_ids):
            p = os.path.join(directory, f"c{r.selected_for}_n{r.neuron}_r{rank}_s{sid}.pgm")
            write_pgm(p, store.images[store.row(sid)])
            paths.append(p)
    return paths
