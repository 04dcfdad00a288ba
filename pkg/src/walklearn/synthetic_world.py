"""Seeded synthetic face-track corpus with location and weather context.

Walkers live in regions and are filmed during recording sessions. Each session
has one region, one weather state and its own disjoint block of frame numbers;
the tracks of a session overlap in time, so several walkers share frames.

Image model (per pixel, before clipping to [0, 1])::

    0.5 + identity_amp * pattern(appearance_code) + region_amp * pattern(region)
        + sum_k (2 * bit_k - 1) * attribute_amp / 2 * template_k

followed by an integer translation (pose) and a gain/offset change (lighting).
Attribute templates are zero-mean blobs in disjoint 4x4 cells, so the bits are
linearly recoverable from pixels when both noise sigmas are zero.

Attribute 0 agrees with ``region_id % 2`` with probability
``region_attribute_bias``; attribute 1 of each sample agrees with the session's
"sunny and hot" state with probability ``weather_attribute_bias``; the remaining
bits are fair coin flips per identity.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .track_store import (
    Condition, ContextLabelSpec, FaceSample, GeoFix, GeoRegionSet, SampleStore,
    WeatherRecord, default_regions,
)

CELL = 4
N_BASIS = 12


class WorldConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_identities: int = 200
    tracks_per_identity: int = 2
    samples_per_track: int = 6
    regions: GeoRegionSet = field(default_factory=default_regions)
    region_attribute_bias: float = 0.9
    weather_attribute_bias: float = 0.9
    pose_noise_sigma: float = 0.6
    lighting_noise_sigma: float = 0.08
    image_shape: tuple = (16, 16, 1)
    n_attributes: int = 8
    tracks_per_session: int = 10
    identity_amplitude: float = 0.02
    region_amplitude: float = 0.0
    attribute_amplitude: float = 0.4
    context_attribute_amplitude: float = 0.15
    geo_jitter_km: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("n_identities", "tracks_per_identity", "samples_per_track",
                     "n_attributes", "tracks_per_session"):
            if getattr(self, name) < 1:
                raise WorldConfigError(f"{name} must be >= 1")
        for name in ("pose_noise_sigma", "lighting_noise_sigma", "identity_amplitude",
                     "region_amplitude", "attribute_amplitude", "context_attribute_amplitude",
                     "geo_jitter_km"):
            if getattr(self, name) < 0:
                raise WorldConfigError(f"{name} must be >= 0")
        for name in ("region_attribute_bias", "weather_attribute_bias"):
            if not 0.5 <= getattr(self, name) <= 1.0:
                raise WorldConfigError(f"{name} must lie in [0.5, 1]")
        if self.n_attributes < 2:
            raise WorldConfigError("need at least 2 attributes (the region- and weather-linked ones)")
        h, w, c = self.image_shape
        if (h // CELL) * (w // CELL) < self.n_attributes:
            raise WorldConfigError(
                f"image {h}x{w} holds {(h // CELL) * (w // CELL)} template cells, "
                f"needs {self.n_attributes}")


@dataclass(frozen=True)
class LatentIdentity:
    identity_id: int
    region_id: int
    attributes: np.ndarray
    appearance_code: np.ndarray


@dataclass
class AttributeTruth:
    """Attribute bits per sample plus the latent bookkeeping behind them."""

    sample_ids: np.ndarray
    bits: np.ndarray            # (n, K) in {0, 1}
    identity_of: np.ndarray     # identity id per sample
    region_of: np.ndarray       # latent region per sample
    identities: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.bits.shape[1] if self.bits.ndim == 2 else 0
        w.writerow(["sample_id", "identity", "region"] + [f"attr{i}" for i in range(k)])
        for sid, ident, reg, row in zip(self.sample_ids, self.identity_of, self.region_of, self.bits):
            w.writerow([int(sid), int(ident), int(reg)] + [int(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:3] != ["sample_id", "identity", "region"]:
            raise ValueError("truth CSV must start with sample_id,identity,region")
        k = len(rows[0]) - 3
        body = np.array([[int(v) for v in r] for r in rows[1:]], dtype=np.int64).reshape(-1, k + 3)
        return cls(body[:, 0], body[:, 3:], body[:, 1], body[:, 2])

    def aligned(self, store):
        """Bits reordered to the row order of ``store``."""
        index = {int(s): i for i, s in enumerate(self.sample_ids)}
        return self.bits[[index[int(s)] for s in store.sample_ids]]


def attribute_templates(image_shape, k):
    h, w, c = image_shape
    cells = [(r, q) for r in range(h // CELL) for q in range(w // CELL)]
    # spread attributes over the grid rather than filling it row by row
    order = sorted(range(len(cells)), key=lambda i: ((i * 7) % len(cells), i))[:k]
    yy, xx = np.mgrid[0:CELL, 0:CELL] - (CELL - 1) / 2
    blob = np.exp(-(yy ** 2 + xx ** 2) / 2.0)
    blob = blob - blob.mean()
    blob /= np.abs(blob).max()
    out = np.zeros((k, h, w, c))
    for j, ci in enumerate(order):
        r, q = cells[ci]
        out[j, r * CELL:(r + 1) * CELL, q * CELL:(q + 1) * CELL, :] = blob[:, :, None]
    return out


def _basis(image_shape):
    """Smooth low-frequency cosine basis used for appearance patterns."""
    h, w, c = image_shape
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    freqs = [(fy, fx) for fy in range(3) for fx in range(3) if (fy, fx) != (0, 0)]
    basis = []
    for fy, fx in freqs:
        basis.append(np.cos(np.pi * (fy * yy + fx * xx)))
        basis.append(np.sin(np.pi * (fy * yy + fx * xx)))
    basis = np.stack(basis[:N_BASIS])
    basis = basis / np.abs(basis).max(axis=(1, 2), keepdims=True)
    return np.repeat(basis[..., None], c, axis=-1)


def _shift(img, dy, dx):
    if dy == 0 and dx == 0:
        return img
    h, w, _ = img.shape
    pad = np.pad(img, ((abs(dy), abs(dy)), (abs(dx), abs(dx)), (0, 0)), mode="edge")
    return pad[abs(dy) - dy:abs(dy) - dy + h, abs(dx) - dx:abs(dx) - dx + w]


def _offset_fix(centroid, rng, jitter_km):
    dlat = rng.normal(0.0, jitter_km) / 111.0
    dlon = rng.normal(0.0, jitter_km) / (111.0 * math.cos(math.radians(centroid.lat)))
    return GeoFix(round(centroid.lat + dlat, 6), round(centroid.lon + dlon, 6))


def _session_weather(rng, hot, threshold):
    if hot:
        return WeatherRecord(round(float(rng.uniform(threshold + 1, 34.0)), 1), Condition.SUNNY)
    if rng.random() < 0.5:
        return WeatherRecord(round(float(rng.uniform(0.0, 30.0)), 1), Condition.CLOUDY)
    return WeatherRecord(round(float(rng.uniform(-5.0, threshold - 1)), 1), Condition.SUNNY)


def generate_world(cfg, label_spec=None):
    """Build a ``(SampleStore, AttributeTruth)`` pair, deterministic in ``cfg.seed``."""
    label_spec = label_spec or ContextLabelSpec(n_geo_classes=len(cfg.regions))
    rng = np.random.default_rng(cfg.seed)
    shape = tuple(cfg.image_shape)
    k = cfg.n_attributes
    n_regions = len(cfg.regions)
    templates = attribute_templates(shape, k)
    basis = _basis(shape)
    region_codes = np.random.default_rng([cfg.seed, 7]).normal(0.0, 1.0, (n_regions, N_BASIS))
    region_patterns = np.tensordot(region_codes, basis, axes=1) / math.sqrt(N_BASIS)
    amps = np.full(k, cfg.attribute_amplitude)
    amps[:2] = cfg.context_attribute_amplitude

    identities = []
    for i in range(cfg.n_identities):
        region = int(rng.integers(n_regions))
        bits = rng.integers(0, 2, k)
        tied = region % 2
        bits[0] = tied if rng.random() < cfg.region_attribute_bias else 1 - tied
        identities.append(LatentIdentity(i, region, bits, rng.normal(0.0, 1.0, N_BASIS)))

    # tracks grouped into sessions per (region, visit); one identity never
    # appears twice in a session, so its tracks never share frames
    sessions = []
    for region in range(n_regions):
        members = [ident for ident in identities if ident.region_id == region]
        for visit in range(cfg.tracks_per_identity):
            order = rng.permutation(len(members))
            for start in range(0, len(members), cfg.tracks_per_session):
                sessions.append((region, [members[j] for j in order[start:start + cfg.tracks_per_session]]))

    samples, truth_rows, id_of, reg_of = [], [], [], []
    sample_id = 0
    track_id = 0
    frame_block = 10 * cfg.samples_per_track * cfg.tracks_per_session + 100
    for s_idx, (region, members) in enumerate(sessions):
        hot = bool(rng.random() < 0.5)
        weather = _session_weather(rng, hot, label_spec.weather_temp_threshold)
        centroid = cfg.regions[region].centroid
        base_frame = s_idx * frame_block
        span = max(1, cfg.samples_per_track * 2)
        for ident in members:
            pattern = np.tensordot(ident.appearance_code, basis, axes=1) / math.sqrt(N_BASIS)
            base = (0.5 + cfg.identity_amplitude * pattern
                    + cfg.region_amplitude * region_patterns[ident.region_id])
            start = base_frame + int(rng.integers(span))
            step = int(rng.integers(1, 4))
            for j in range(cfg.samples_per_track):
                frame = start + j * step
                # attribute 1 is drawn per rendered sample from the session weather
                bits = ident.attributes.copy()
                bits[1] = int(hot) if rng.random() < cfg.weather_attribute_bias else 1 - int(hot)
                img = base + np.tensordot((2 * bits - 1) * amps / 2, templates, axes=1)
                if cfg.pose_noise_sigma > 0:
                    dy, dx = np.clip(np.rint(rng.normal(0.0, cfg.pose_noise_sigma, 2)), -2, 2).astype(int)
                    img = _shift(img, int(dy), int(dx))
                if cfg.lighting_noise_sigma > 0:
                    gain = 1.0 + rng.normal(0.0, cfg.lighting_noise_sigma)
                    offset = rng.normal(0.0, cfg.lighting_noise_sigma)
                    img = (img - 0.5) * gain + 0.5 + offset
                img = np.clip(img, 0.0, 1.0)
                samples.append(FaceSample(
                    sample_id=sample_id, image=img, track_id=track_id, frame_index=frame,
                    geo=_offset_fix(centroid, rng, cfg.geo_jitter_km), weather=weather,
                ))
                truth_rows.append(bits)
                id_of.append(ident.identity_id)
                reg_of.append(region)
                sample_id += 1
            track_id += 1

    store = SampleStore(samples, shape)
    truth = AttributeTruth(
        sample_ids=np.arange(sample_id, dtype=np.int64),
        bits=np.array(truth_rows, dtype=np.int64).reshape(-1, k),
        identity_of=np.array(id_of, dtype=np.int64),
        region_of=np.array(reg_of, dtype=np.int64),
        identities=identities,
    )
    return store, truth


def _mutual_information(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    mi = 0.0
    for va in np.unique(a):
        pa = np.mean(a == va)
        for vb in np.unique(b):
            pab = np.mean((a == va) & (b == vb))
            if pab > 0:
                mi += pab * math.log(pab / (pa * np.mean(b == vb)))
    return mi


def world_stats(store, truth, regions=None, label_spec=None, pairs=None):
    """Dataset statistics in the spirit of a collection summary table."""
    regions = regions or default_regions()
    label_spec = label_spec or ContextLabelSpec(n_geo_classes=len(regions))
    n = len(store)
    geo = store.geo_labels(regions) if n else np.zeros(0, dtype=int)
    wea = store.weather_labels(label_spec) if n else np.zeros(0, dtype=int)
    bits = truth.aligned(store) if n else np.zeros((0, truth.bits.shape[1] if truth.bits.ndim == 2 else 0))
    report = {
        "tracks": len(store.tracks),
        "samples": n,
        "frames": int(len(np.unique(store.frame_index))),
        "per_region": [int(np.sum(geo == r)) for r in range(len(regions))],
        "per_weather": [int(np.sum(wea == c)) for c in range(label_spec.n_weather_classes)],
        "attribute_marginals": [round(float(v), 6) for v in (bits.mean(axis=0) if n else np.zeros(bits.shape[1]))],
        "attr0_region_agreement": round(float(np.mean(bits[:, 0] == geo % 2)) if n else 0.0, 6),
        "attr0_region_mi": round(_mutual_information(bits[:, 0], geo) if n else 0.0, 6),
        "attr1_weather_agreement": round(float(np.mean(bits[:, 1] == (wea == 0))) if n else 0.0, 6),
    }
    if pairs is not None:
        report["pairs"] = pairs.stats()
    return report


def format_stats(report):
    rows = [
        ("No. of face tracks", report["tracks"]),
        ("No. of face images", report["samples"]),
        ("No. of distinct frames", report["frames"]),
        ("Images per region", " ".join(str(v) for v in report["per_region"])),
        ("Images per weather class", " ".join(str(v) for v in report["per_weather"])),
        ("Attribute-0 / region agreement", f"{report['attr0_region_agreement']:.3f}"),
        ("Attribute-1 / weather agreement", f"{report['attr1_weather_agreement']:.3f}"),
    ]
    if "pairs" in report:
        p = report["pairs"]
        rows += [
            ("No. of generated face pairs", p["n_pairs"]),
            ("  same track (+1)", p["same_track"]),
            ("  same frame (-1)", p["same_frame"]),
            ("  cross region (-1)", p["cross_region"]),
        ]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{name:<{width}} | {value}" for name, value in rows)


def stats_json(report):
    return json.dumps(report, indent=2, sort_keys=True)
