import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tests.helpers import random_store, sample
from tests.oracles import nearest_region
from walklearn.track_store import (Condition, ContextLabelSpec, GeoFix, GeoRegionSet, Region,
                                   SampleStore, StoreIntegrityError, StoreParseError,
                                   StoreValidationError, WeatherRecord, default_regions,
                                   discretize_geo, discretize_weather, haversine_km, load_store,
                                   loads_store, save_store)


def record(sid, tid, frame, **kw):
    rec = {"sample_id": sid, "track_id": tid, "frame_index": frame, "lat": 40.0, "lon": -73.0,
           "temp_c": 20.0, "condition": "sunny", "image": [0.25] * 4}
    rec.update(kw)
    return json.dumps(rec)


def store_text(*records, header='{"h":2,"w":2,"c":1}'):
    return "\n".join([header, *records]) + "\n"


def test_three_records_two_share_a_track():
    store = loads_store(store_text(record(1, 7, 0), record(2, 7, 1), record(3, 9, 0)))
    assert len(store.tracks) == 2
    assert store.tracks[7].sample_ids == (1, 2)
    assert len(store) == 3


def test_empty_file_gives_empty_store():
    store = loads_store("")
    assert len(store) == 0 and len(store.tracks) == 0


def test_duplicate_track_frame_names_the_track():
    with pytest.raises(StoreIntegrityError, match="track 7"):
        loads_store(store_text(record(1, 7, 4), record(2, 7, 4)))


def test_duplicate_sample_id_rejected():
    with pytest.raises(StoreIntegrityError):
        loads_store(store_text(record(1, 7, 0), record(1, 8, 0)))


@pytest.mark.parametrize("line, match", [
    ("{not json", "invalid JSON"),
    ("[1, 2]", "not an object"),
    (json.dumps({"sample_id": 1}), "missing keys"),
    (record(1, 7, 0, image=[0.1] * 3), "4 values"),
    (record(1, True, 0), "track_id"),
])
def test_parse_errors_carry_line_numbers(line, match):
    with pytest.raises(StoreParseError, match=match) as exc:
        loads_store(store_text(line))
    assert exc.value.line == 2


def test_bad_header():
    with pytest.raises(StoreParseError):
        loads_store('{"h": 2}\n')


@pytest.mark.parametrize("kw", [{"lat": 91.0}, {"lon": -181.0}, {"temp_c": 99.0}, {"condition": "snowy"}])
def test_out_of_range_fields(kw):
    with pytest.raises(StoreValidationError):
        loads_store(store_text(record(1, 7, 0, **kw)))


def test_pixels_outside_unit_interval_rejected():
    with pytest.raises(StoreValidationError):
        loads_store(store_text(record(1, 7, 0, image=[0.5, 0.5, 0.5, 1.5])))


def test_save_load_round_trip_is_byte_identical(tmp_path):
    store = loads_store(store_text(record(3, 9, 0), record(1, 7, 0), record(2, 7, 1)))
    p = tmp_path / "a.jsonl"
    save_store(store, p)
    again = load_store(p)
    q = tmp_path / "b.jsonl"
    save_store(again, q)
    assert p.read_bytes() == q.read_bytes()
    # canonical order is by sample id
    assert list(again.sample_ids) == [1, 2, 3]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_round_trip_property(seed):
    store, _ = random_store(np.random.default_rng(seed), n_max=20)
    text = store.dumps()
    again = loads_store(text)
    assert again.dumps() == text
    np.testing.assert_array_equal(again.images, store.images)


def test_fix_on_a_centroid_maps_to_that_region():
    regions = default_regions()
    c = regions[2].centroid
    assert discretize_geo(GeoFix(c.lat, c.lon), regions) == 2


def test_strictly_nearer_centroid_wins():
    regions = GeoRegionSet([Region(0, "a", GeoFix(0, 0)), Region(1, "b", GeoFix(0, 10))])
    assert discretize_geo(GeoFix(0, 3), regions) == 0


def test_nearest_centroid_matches_exhaustive_scan(rng):
    cents = [(float(rng.uniform(-60, 60)), float(rng.uniform(-170, 170))) for _ in range(4)]
    regions = GeoRegionSet([Region(i, f"r{i}", GeoFix(*c)) for i, c in enumerate(cents)])
    for _ in range(100):
        lat, lon = float(rng.uniform(-80, 80)), float(rng.uniform(-179, 179))
        assert discretize_geo(GeoFix(lat, lon), regions) == nearest_region(lat, lon, cents)


def test_region_listing_order_does_not_matter(rng):
    regs = list(default_regions())
    shuffled = [regs[i] for i in rng.permutation(len(regs))]
    a, b = GeoRegionSet(regs), GeoRegionSet(shuffled)
    lat, lon = rng.uniform(40.7, 40.85, 200), rng.uniform(-74.0, -73.8, 200)
    np.testing.assert_array_equal(a.nearest(lat, lon), b.nearest(lat, lon))


def test_equidistant_fix_goes_to_lower_region_id():
    regions = GeoRegionSet([Region(0, "a", GeoFix(0, -1)), Region(1, "b", GeoFix(0, 1))])
    assert discretize_geo(GeoFix(0, 0), regions) == 0


@pytest.mark.parametrize("regions", [
    [Region(0, "a", GeoFix(0, 0))],
    [Region(0, "a", GeoFix(0, 0)), Region(2, "b", GeoFix(0, 1))],
    [Region(0, "a", GeoFix(0, 0)), Region(1, "b", GeoFix(0, 0))],
])
def test_invalid_region_sets(regions):
    with pytest.raises(StoreValidationError):
        GeoRegionSet(regions)


def test_region_csv_round_trip():
    regions = default_regions()
    assert GeoRegionSet.from_csv(regions.to_csv()) == regions


def test_haversine_quarter_meridian():
    # pole to equator along a meridian is a quarter of the circumference
    assert haversine_km(0, 0, 90, 0) == pytest.approx(np.pi * 6371.0088 / 2, rel=1e-12)


@pytest.mark.parametrize("temp, cond, expected", [(30.0, "sunny", 0), (5.0, "sunny", 1), (25.0, "cloudy", 1)])
def test_weather_binning(temp, cond, expected):
    assert discretize_weather(WeatherRecord(temp, cond), ContextLabelSpec(weather_temp_threshold=18.0)) == expected


def test_weather_threshold_is_inclusive():
    assert discretize_weather(WeatherRecord(18.0, Condition.SUNNY), ContextLabelSpec()) == 0


def test_label_spec_validation():
    with pytest.raises(StoreValidationError):
        ContextLabelSpec(n_geo_classes=1)
    with pytest.raises(StoreValidationError):
        ContextLabelSpec(n_weather_classes=3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_labeling_is_total(seed):
    store, regions = random_store(np.random.default_rng(seed))
    spec = ContextLabelSpec(n_geo_classes=len(regions))
    geo, wea = store.geo_labels(regions), store.weather_labels(spec)
    assert geo.shape == wea.shape == (len(store),)
    assert np.all((geo >= 0) & (geo < len(regions)))
    assert np.all((wea >= 0) & (wea < 2))
    for s, g in zip(store.samples, geo):
        assert g == discretize_geo(s.geo, regions)


def test_columnar_views_are_read_only():
    store = SampleStore([sample(1, 1, 0)], (4, 4, 1))
    with pytest.raises(ValueError):
        store.images[0, 0, 0, 0] = 1.0


def test_image_shape_mismatch():
    with pytest.raises(StoreValidationError):
        SampleStore([sample(1, 1, 0, shape=(2, 2, 1))], (4, 4, 1))


def test_tracks_are_frame_ordered():
    store = SampleStore([sample(5, 1, 3), sample(6, 1, 0), sample(7, 1, 1)], (4, 4, 1))
    assert store.tracks[1].sample_ids == (6, 7, 5)
