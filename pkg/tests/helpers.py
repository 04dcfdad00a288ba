"""Store builders shared by the tests."""
import numpy as np
from walklearn.track_store import (FaceSample, GeoFix, GeoRegionSet, Region, SampleStore,
                                   WeatherRecord)


def sample(sid, tid, frame, lat=40.77, lon=-73.95, temp=25.0, cond="sunny", image=None, shape=(4, 4, 1)):
    img = np.full(shape, 0.5) if image is None else np.asarray(image, dtype=float).reshape(shape)
    return FaceSample(sid, img, tid, frame, GeoFix(lat, lon), WeatherRecord(temp, cond))


def two_regions(sep_deg=1.0):
    return GeoRegionSet([Region(0, "west", GeoFix(0.0, 0.0)), Region(1, "east", GeoFix(0.0, sep_deg))])


def random_store(rng, n_max=50, n_regions=3, shape=(2, 2, 1), n_frames=8):
    """Small store with random tracks, frames and positions scattered over a few regions."""
    n = int(rng.integers(0, n_max + 1))
    n_tracks = max(1, int(rng.integers(1, 12)))
    centers = [(0.0, 0.1 * i) for i in range(n_regions)]
    regions = GeoRegionSet([Region(i, f"r{i}", GeoFix(*c)) for i, c in enumerate(centers)])
    used = set()
    samples = []
    sid = 0
    for _ in range(n):
        tid = int(rng.integers(0, n_tracks))
        frame = int(rng.integers(0, n_frames))
        if (tid, frame) in used:
            continue
        used.add((tid, frame))
        # every track stays near one region centre, like a short walk
        c = centers[tid % n_regions]
        samples.append(sample(sid, tid, frame, c[0] + rng.normal(0, 0.005), c[1] + rng.normal(0, 0.005),
                              image=rng.uniform(0, 1, shape), shape=shape))
        sid += int(rng.integers(1, 4))
    return SampleStore(samples, shape), regions


def biased_config(bias, seed):
    from dataclasses import replace
    from walklearn.pipeline import PipelineConfig
    cfg = PipelineConfig()
    world = replace(cfg.world, region_attribute_bias=bias, weather_attribute_bias=bias)
    return replace(cfg, world=world).with_seed(seed)


_BUNDLES = {}
_SCORES = {}


def pretrained_bundle(bias, seed):
    """Default pipeline pre-trained on a world with both context biases set to ``bias``.

    Cached for the whole test session; the acceptance suite and the trainer
    tests share the same runs. Returns ``(cfg, bundle)``.
    """
    return _bundle_entry(bias, seed)[:2]


def _bundle_entry(bias, seed):
    import time
    from walklearn.pipeline import pretrain_all
    key = (float(bias), int(seed))
    if key not in _BUNDLES:
        cfg = biased_config(bias, seed)
        start = time.process_time()
        bundle = pretrain_all(cfg)
        _BUNDLES[key] = (cfg, bundle, time.process_time() - start)
    return _BUNDLES[key]


def bundle_seconds(bias, seed):
    """CPU seconds spent pre-training the cached bundle."""
    return _bundle_entry(bias, seed)[2]


def finetuned_arm(bias, seed, arm):
    """``(per-attribute accuracy, CPU seconds)`` of one fine-tuned ablation arm, cached."""
    import time
    from walklearn.evaluator import finetune_arm_scores
    key = (float(bias), int(seed), arm)
    if key not in _SCORES:
        cfg, bundle = pretrained_bundle(bias, seed)
        start = time.process_time()
        scores = finetune_arm_scores(bundle, cfg, seed, (arm,))[0]
        _SCORES[key] = (scores, time.process_time() - start)
    return _SCORES[key]


TINY_INI = """\
[world]
n_identities = 20
samples_per_track = 4

[train.verification]
epochs = 2

[train.context]
epochs = 2

[eval]
finetune_epochs = 2
svm_epochs = 5
finetune_label_fraction = 1.0
"""

PIPELINE = [
    ["gen-world"], ["mine-pairs"], ["pretrain"], ["train-context", "--head", "both"],
    ["finetune", "--mask", "id+geo+weather"], ["finetune", "--mask", "id", "--init", "scratch"],
    ["evaluate", "--mask", "id+geo"], ["inspect"], ["stats"], ["ablate", "--seeds", "1", "2", "3"],
]


def run_pipeline(root, ini_text=TINY_INI):
    """Run every CLI stage inside ``root``; returns ``{relative path: bytes}`` of all outputs.

    The output directory is given relative to ``root`` so replays in different
    roots write identical config snapshots.
    """
    import os
    from walklearn.cli import main
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "run.ini"), "w") as fh:
        fh.write(ini_text)
    here = os.getcwd()
    os.chdir(root)
    try:
        for cmd in PIPELINE:
            code = main([cmd[0], "--config", "run.ini", "--out", "out"] + cmd[1:])
            if code != 0:
                raise AssertionError(f"walklearn {' '.join(cmd)} exited with {code}")
    finally:
        os.chdir(here)
    out = os.path.join(root, "out")
    files = {}
    for dirpath, _, names in os.walk(out):
        for n in names:
            p = os.path.join(dirpath, n)
            with open(p, "rb") as fh:
                files[os.path.relpath(p, out)] = fh.read()
    return files
