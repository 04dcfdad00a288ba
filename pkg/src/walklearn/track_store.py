"""Face-track data model, JSONL ingest and context discretization.

A store is one ingest file: a header line ``{"h": H, "w": W, "c": C}`` followed
by one JSON object per detection. Stores are immutable once built.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

EARTH_RADIUS_KM = 6371.0088
RECORD_KEYS = ("sample_id", "track_id", "frame_index", "lat", "lon", "temp_c", "condition", "image")


class StoreError(ValueError):
    pass


class StoreParseError(StoreError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class StoreIntegrityError(StoreError):
    pass


class StoreValidationError(StoreError):
    pass


class Condition(str, Enum):
    SUNNY = "sunny"
    CLOUDY = "cloudy"


@dataclass(frozen=True)
class GeoFix:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0):
            raise StoreValidationError(f"latitude out of range: {self.lat}")
        if not (math.isfinite(self.lon) and -180.0 <= self.lon <= 180.0):
            raise StoreValidationError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class WeatherRecord:
    temperature: float
    condition: Condition

    def __post_init__(self):
        if not (math.isfinite(self.temperature) and -50.0 <= self.temperature <= 60.0):
            raise StoreValidationError(f"temperature out of range: {self.temperature}")
        try:
            object.__setattr__(self, "condition", Condition(self.condition))
        except ValueError:
            raise StoreValidationError(f"unknown weather condition {self.condition!r}") from None


@dataclass(frozen=True, eq=False)
class FaceSample:
    sample_id: int
    image: np.ndarray
    track_id: int
    frame_index: int
    geo: GeoFix
    weather: WeatherRecord


@dataclass(frozen=True)
class Track:
    track_id: int
    sample_ids: tuple


@dataclass(frozen=True)
class Region:
    region_id: int
    name: str
    centroid: GeoFix


class GeoRegionSet:
    """Ordered regions with ids ``0..n-1``; lookups are always by region id."""

    def __init__(self, regions):
        regions = sorted(regions, key=lambda r: r.region_id)
        if len(regions) < 2:
            raise StoreValidationError("a region set needs at least 2 regions")
        if [r.region_id for r in regions] != list(range(len(regions))):
            raise StoreValidationError("region ids must be 0..n-1 without gaps")
        cents = {(r.centroid.lat, r.centroid.lon) for r in regions}
        if len(cents) != len(regions):
            raise StoreValidationError("region centroids must be pairwise distinct")
        self.regions = tuple(regions)
        self._lat = np.radians([r.centroid.lat for r in regions])
        self._lon = np.radians([r.centroid.lon for r in regions])

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def __getitem__(self, region_id):
        return self.regions[region_id]

    def __eq__(self, other):
        return isinstance(other, GeoRegionSet) and self.regions == other.regions

    def separation_km(self, r1, r2):
        a, b = self.regions[r1].centroid, self.regions[r2].centroid
        return haversine_km(a.lat, a.lon, b.lat, b.lon)

    def nearest(self, lat, lon):
        """Vectorized nearest-centroid region ids for arrays of coordinates."""
        lat = np.radians(np.atleast_1d(np.asarray(lat, dtype=float)))[:, None]
        lon = np.radians(np.atleast_1d(np.asarray(lon, dtype=float)))[:, None]
        d = _haversine_rad(lat, lon, self._lat[None, :], self._lon[None, :])
        return d.argmin(axis=1)  # first minimum == lowest region id

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region_id", "name", "lat", "lon"])
        for r in self.regions:
            w.writerow([r.region_id, r.name, repr(r.centroid.lat), repr(r.centroid.lon)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.DictReader(io.StringIO(text)))
        try:
            return cls([Region(int(r["region_id"]), r["name"], GeoFix(float(r["lat"]), float(r["lon"])))
                        for r in rows])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, StoreError):
                raise
            raise StoreParseError(0, f"bad region row: {exc}") from None

    @classmethod
    def read(cls, path):
        return cls.from_csv(Path(path).read_text())


def default_regions():
    """Four neighbourhood centroids standing in for the census clusters."""
    return GeoRegionSet([
        Region(0, "upper_east_side", GeoFix(40.7736, -73.9566)),
        Region(1, "harlem", GeoFix(40.8116, -73.9465)),
        Region(2, "flushing", GeoFix(40.7675, -73.8331)),
        Region(3, "jackson_heights", GeoFix(40.7557, -73.8831)),
    ])


@dataclass(frozen=True)
class ContextLabelSpec:
    n_geo_classes: int = 4
    n_weather_classes: int = 2
    weather_temp_threshold: float = 18.0

    def __post_init__(self):
        if self.n_geo_classes < 2 or self.n_weather_classes != 2:
            raise StoreValidationError("need >= 2 geo classes and exactly 2 weather classes")


def _haversine_rad(lat1, lon1, lat2, lon2):
    a = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def haversine_km(lat1, lon1, lat2, lon2):
    return float(_haversine_rad(*np.radians([lat1, lon1, lat2, lon2])))


def discretize_geo(fix, regions):
    return int(regions.nearest(fix.lat, fix.lon)[0])


def discretize_weather(rec, spec):
    """0 = sunny/hot, 1 = cloudy/cold."""
    hot = rec.condition is Condition.SUNNY and rec.temperature >= spec.weather_temp_threshold
    return 0 if hot else 1


class SampleStore:
    """Immutable, validated collection of face samples ordered by sample id.

    Columnar numpy views (``images``, ``sample_ids``, ``track_ids``, ...) are the
    fast path used by mining and training; ``samples`` keeps the record view.
    """

    def __init__(self, samples, image_shape):
        self.image_shape = tuple(int(v) for v in image_shape)
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise StoreValidationError(f"bad image shape {self.image_shape}")
        samples = sorted(samples, key=lambda s: s.sample_id)
        ids = [s.sample_id for s in samples]
        if len(set(ids)) != len(ids):
            raise StoreIntegrityError("duplicate sample_id")
        seen = {}
        for s in samples:
            key = (s.track_id, s.frame_index)
            if key in seen:
                raise StoreIntegrityError(
                    f"duplicate detection for track {s.track_id} at frame {s.frame_index} "
                    f"(samples {seen[key]} and {s.sample_id})")
            seen[key] = s.sample_id
            if s.image.shape != self.image_shape:
                raise StoreValidationError(
                    f"sample {s.sample_id}: image shape {s.image.shape} != {self.image_shape}")
            if not np.all(np.isfinite(s.image)) or s.image.min(initial=0.0) < 0 or s.image.max(initial=0.0) > 1:
                raise StoreValidationError(f"sample {s.sample_id}: pixel values outside [0, 1]")
        self.samples = tuple(samples)
        n = len(samples)
        self.sample_ids = np.array(ids, dtype=np.int64)
        self.track_ids = np.array([s.track_id for s in samples], dtype=np.int64)
        self.frame_index = np.array([s.frame_index for s in samples], dtype=np.int64)
        self.lat = np.array([s.geo.lat for s in samples], dtype=float)
        self.lon = np.array([s.geo.lon for s in samples], dtype=float)
        self.temp_c = np.array([s.weather.temperature for s in samples], dtype=float)
        self.sunny = np.array([s.weather.condition is Condition.SUNNY for s in samples], dtype=bool)
        self.images = (np.stack([s.image for s in samples]).astype(np.float64) if n
                       else np.zeros((0,) + self.image_shape))
        for arr in (self.sample_ids, self.track_ids, self.frame_index, self.lat, self.lon,
                    self.temp_c, self.sunny, self.images):
            arr.setflags(write=False)
        self._row = {sid: i for i, sid in enumerate(ids)}
        groups = {}
        for s in samples:
            groups.setdefault(s.track_id, []).append(s)
        self.tracks = {tid: Track(tid, tuple(s.sample_id for s in sorted(g, key=lambda s: s.frame_index)))
                       for tid, g in sorted(groups.items())}

    def __len__(self):
        return len(self.samples)

    def row(self, sample_id):
        return self._row[int(sample_id)]

    def rows(self, sample_ids):
        return np.array([self._row[int(s)] for s in sample_ids], dtype=np.int64)

    def geo_labels(self, regions):
        if not len(self):
            return np.zeros(0, dtype=np.int64)
        return regions.nearest(self.lat, self.lon).astype(np.int64)

    def weather_labels(self, spec):
        return np.where(self.sunny & (self.temp_c >= spec.weather_temp_threshold), 0, 1).astype(np.int64)

    # serialization

    def dumps(self):
        h, w, c = self.image_shape
        lines = [json.dumps({"h": h, "w": w, "c": c}, separators=(",", ":"))]
        for s in self.samples:
            rec = {
                "sample_id": s.sample_id, "track_id": s.track_id, "frame_index": s.frame_index,
                "lat": s.geo.lat, "lon": s.geo.lon, "temp_c": s.weather.temperature,
                "condition": s.weather.condition.value,
                "image": [float(v) for v in s.image.reshape(-1)],
            }
            lines.append(json.dumps(rec, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())


def _int_field(rec, key, lineno):
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise StoreParseError(lineno, f"{key} must be an integer")
    return v


def loads_store(text):
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        return SampleStore([], (1, 1, 1))
    try:
        header = json.loads(lines[0])
        shape = (int(header["h"]), int(header["w"]), int(header["c"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise StoreParseError(1, f"bad header: {exc}") from None
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise StoreParseError(lineno, f"invalid JSON: {exc.msg}") from None
        if not isinstance(rec, dict):
            raise StoreParseError(lineno, "record is not an object")
        missing = [k for k in RECORD_KEYS if k not in rec]
        if missing:
            raise StoreParseError(lineno, f"missing keys {missing}")
        image = np.asarray(rec["image"], dtype=float)
        if image.ndim != 1 or image.size != shape[0] * shape[1] * shape[2]:
            raise StoreParseError(lineno, f"image must hold {shape[0] * shape[1] * shape[2]} values")
        try:
            geo = GeoFix(float(rec["lat"]), float(rec["lon"]))
            weather = WeatherRecord(float(rec["temp_c"]), rec["condition"])
        except StoreValidationError as exc:
            raise StoreValidationError(f"line {lineno}: {exc}") from None
        samples.append(FaceSample(
            sample_id=_int_field(rec, "sample_id", lineno),
            image=image.reshape(shape),
            track_id=_int_field(rec, "track_id", lineno),
            frame_index=_int_field(rec, "frame_index", lineno),
            geo=geo, weather=weather,
        ))
    return SampleStore(samples, shape)


def load_store(path):
    return loads_store(Path(path).read_text())


def save_store(store, path):
    store.save(path)
