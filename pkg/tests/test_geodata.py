import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geosr.errors import InputError, ParseError
from geosr.geodata import (
    GeoWorldParams,
    SynthConfig,
    TileRecord,
    assign_utm_zone,
    bicubic_downsample,
    degrade,
    generate_geoworld_tile,
    hue_map,
    read_manifest,
    split_manifest,
    synthesize_dataset,
    to_luma,
    write_manifest,
)
from geosr.metrics import circular_distance, hue_error, mean_hue


def record(i, lon, lat=40.0):
    return TileRecord(f"t{i}", lon, lat, assign_utm_zone(lon), f"hr/{i}.png", f"lr/{i}.png")


def zone_lon(zone):
    # centre longitude of a UTM zone
    return -180.0 + 6.0 * (zone - 1) + 3.0


# -- rendering --------------------------------------------------------------------


def test_tile_is_deterministic_and_in_range():
    p = GeoWorldParams(hue_period_deg=360, hr_size=64, scale_factor=8)
    a = generate_geoworld_tile(p, 0.0, 0.0)
    b = generate_geoworld_tile(p, 0.0, 0.0)
    assert a.shape == (64, 64, 3)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_half_period_shift_flips_hue():
    p = GeoWorldParams(hue_period_deg=360, hr_size=64, scale_factor=8)
    h0 = mean_hue(generate_geoworld_tile(p, 0.0, 0.0))
    h1 = mean_hue(generate_geoworld_tile(p, 180.0 - 1e-9, 0.0))
    assert hue_map(p, 0.0, 0.0) == 0.0
    assert circular_distance(h0, h1) == pytest.approx(0.5, abs=0.02)


@pytest.mark.parametrize("lon,lat", [(-100.0, 35.0), (12.5, -40.0), (170.0, 80.0)])
def test_rendered_tile_recovers_its_hue(lon, lat):
    p = GeoWorldParams(hue_period_deg=60, hr_size=32, scale_factor=4)
    tile = generate_geoworld_tile(p, lon, lat)
    assert hue_error(tile, hue_map(p, lon, lat)) <= 0.02


def test_different_locations_differ():
    p = GeoWorldParams(hr_size=32, scale_factor=4)
    assert not np.array_equal(generate_geoworld_tile(p, 1.0, 2.0), generate_geoworld_tile(p, 1.0, 2.5))


def test_bad_coords_rejected():
    with pytest.raises(InputError):
        generate_geoworld_tile(GeoWorldParams(hr_size=32, scale_factor=4), 200.0, 0.0)
    with pytest.raises(InputError):
        generate_geoworld_tile(GeoWorldParams(hr_size=32, scale_factor=4), 0.0, -91.0)


# -- degradation --------------------------------------------------------------------


def keys(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def bicubic_oracle(img, factor):
    """Direct 2-D convolution with a stretched Keys kernel and mirrored indices."""
    h, w = img.shape
    pad = 4 * factor
    padded = np.pad(img, pad, mode="reflect")
    out = np.zeros((h // factor, w // factor))
    for i in range(h // factor):
        for j in range(w // factor):
            cy = (i + 0.5) * factor - 0.5
            cx = (j + 0.5) * factor - 0.5
            acc = norm = 0.0
            for y in range(int(cy) - 2 * factor, int(cy) + 2 * factor + 2):
                wy = keys((y - cy) / factor)
                for x in range(int(cx) - 2 * factor, int(cx) + 2 * factor + 2):
                    wgt = wy * keys((x - cx) / factor)
                    acc += wgt * padded[y + pad, x + pad]
                    norm += wgt
            out[i, j] = acc / norm
    return out


def test_constant_image_stays_constant():
    lr = degrade(np.full((32, 32, 3), 0.5), 4, noise_sigma=0.0)
    assert lr.shape == (8, 8, 3)
    np.testing.assert_allclose(lr, 0.5, atol=1e-12)


def test_paper_geometry():
    assert degrade(np.zeros((256, 256, 3)), 8, noise_sigma=0.0).shape == (32, 32, 3)


def test_checkerboard_matches_direct_oracle():
    yy, xx = np.mgrid[:16, :16]
    board = ((yy + xx) % 2).astype(np.float64)
    got = bicubic_downsample(board, 2)
    np.testing.assert_allclose(got, bicubic_oracle(board, 2), atol=1e-6)


def test_random_image_matches_direct_oracle():
    img = np.random.default_rng(3).random((24, 16))
    np.testing.assert_allclose(bicubic_downsample(img, 4), bicubic_oracle(img, 4), atol=1e-10)


def test_noise_is_seeded_and_clamped():
    hr = np.random.default_rng(0).random((16, 16, 3))
    a, b = degrade(hr, 2, 0.5, seed=4), degrade(hr, 2, 0.5, seed=4)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, degrade(hr, 2, 0.5, seed=5))


def test_luma_removes_colour():
    img = np.random.default_rng(1).random((4, 4, 3))
    y = to_luma(img)
    assert np.array_equal(y[..., 0], y[..., 2])
    np.testing.assert_allclose(y[..., 0], img @ [0.299, 0.587, 0.114])


# -- UTM zones and splits -----------------------------------------------------------


@pytest.mark.parametrize("lon,zone", [(-180.0, 1), (-105.0, 13), (0.0, 31), (179.999, 60)])
def test_utm_zone(lon, zone):
    assert assign_utm_zone(lon) == zone


@given(st.floats(-180.0, 180.0, exclude_max=True))
def test_utm_zone_range_and_width(lon):
    z = assign_utm_zone(lon)
    assert 1 <= z <= 60
    assert -180 + 6 * (z - 1) <= lon < -180 + 6 * z


def test_split_small_cases():
    recs = [record(i, zone_lon(z)) for i, z in enumerate([12, 13, 14, 13])]
    train, hold = split_manifest(recs, {13})
    assert {r.utm_zone for r in train} == {12, 14}
    assert {r.utm_zone for r in hold} == {13}
    assert [r.tile_id for r in train] == ["t0", "t2"]
    train, hold = split_manifest(recs, set())
    assert train == recs and hold == []


def test_split_hundred_records():
    rng = np.random.default_rng(0)
    lons = rng.uniform(-180 + 6 * 9, -180 + 6 * 19, 100)
    recs = [record(i, float(lon)) for i, lon in enumerate(lons)]
    train, hold = split_manifest(recs, {13, 18, 19})
    assert len(train) + len(hold) == 100
    assert not {r.utm_zone for r in train} & {r.utm_zone for r in hold}
    assert {r.utm_zone for r in hold} <= {13, 18, 19}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=1, max_size=40), st.sets(st.integers(1, 60)))
def test_split_is_a_partition(zones, holdout):
    recs = [record(i, zone_lon(z)) for i, z in enumerate(zones)]
    train, hold = split_manifest(recs, holdout)
    assert sorted(r.tile_id for r in train + hold) == sorted(r.tile_id for r in recs)
    assert all(r.utm_zone in holdout for r in hold)
    assert all(r.utm_zone not in holdout for r in train)


def test_record_validates_zone():
    with pytest.raises(InputError):
        TileRecord("x", 0.0, 0.0, 5, "a", "b")


# -- manifests ----------------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    recs = [record(i, -100.0 + i) for i in range(3)]
    write_manifest(tmp_path / "m.jsonl", recs)
    assert read_manifest(tmp_path / "m.jsonl") == recs


def test_malformed_manifest_reports_line(tmp_path):
    good = json.dumps({"tile_id": "a", "lon": 0.0, "lat": 0.0, "utm_zone": 31, "hr_path": "h", "lr_path": "l"})
    (tmp_path / "m.jsonl").write_text(good + "\n{not json\n")
    with pytest.raises(ParseError, match=":2:"):
        read_manifest(tmp_path / "m.jsonl")


def test_synthesize_dataset_is_byte_reproducible(tmp_path):
    cfg = SynthConfig(tiles=3, seed=7, world=GeoWorldParams(hr_size=32, scale_factor=4))
    synthesize_dataset(tmp_path / "a", cfg)
    synthesize_dataset(tmp_path / "b", cfg)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 3 * 2 + 2
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    recs = read_manifest(tmp_path / "a" / "manifest.jsonl")
    assert all(math.isfinite(r.lon) for r in recs)
