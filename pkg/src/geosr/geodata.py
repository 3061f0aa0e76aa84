"""Procedural geo-world tiles, LR degradation, UTM splits and manifests.

Tiles are rendered so that their colour is a known function of location:
every chromatic pixel carries the hue given by :func:`hue_map`, and all
chromatic pixels share one luma level so a grey LR copy carries no hue
information at all.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import InputError, ParseError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
SPLITS = ("train", "val", "test")
# lon_min, lon_max, lat_min, lat_max
GLOBE = (-180.0, 180.0, -90.0, 90.0)


@dataclass(frozen=True)
class TileRecord:
    tile_id: str
    lon: float
    lat: float
    utm_zone: int
    hr_path: str
    lr_path: str
    split: str = "train"

    def __post_init__(self):
        check_coords(self.lon, self.lat)
        if self.split not in SPLITS:
            raise InputError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.utm_zone != assign_utm_zone(self.lon):
            raise InputError(
                f"{self.tile_id}: utm_zone {self.utm_zone} does not match lon {self.lon}"
            )


@dataclass(frozen=True)
class GeoWorldParams:
    hue_period_deg: float = 360.0
    texture_families: int = 3
    seed: int = 0
    hr_size: int = 256
    scale_factor: int = 8
    saturation: float = 0.6
    luma: float = 0.35

    def __post_init__(self):
        if self.hue_period_deg <= 0:
            raise InputError("hue_period_deg must be positive")
        if self.texture_families < 1:
            raise InputError("texture_families must be >= 1")
        if self.hr_size % self.scale_factor:
            raise InputError("hr_size must be divisible by scale_factor")

    @property
    def lr_size(self) -> int:
        return self.hr_size // self.scale_factor


def check_coords(lon: float, lat: float) -> None:
    if not (-180.0 <= lon < 180.0) or not math.isfinite(lon):
        raise InputError(f"longitude {lon} outside [-180, 180)")
    if not (-90.0 <= lat <= 90.0) or not math.isfinite(lat):
        raise InputError(f"latitude {lat} outside [-90, 90]")


def assign_utm_zone(lon: float) -> int:
    if not (-180.0 <= lon < 180.0):
        raise InputError(f"longitude {lon} outside [-180, 180)")
    zone = int(math.floor((lon + 180.0) / 6.0)) + 1
    # lon + 180 can round across a zone edge; the edges themselves are exact
    if lon < -180.0 + 6.0 * (zone - 1):
        zone -= 1
    elif lon >= -180.0 + 6.0 * zone:
        zone += 1
    return zone


def split_manifest(records: Sequence[TileRecord], holdout_zones: Iterable[int]):
    """Partition records by UTM zone, keeping input order within each side."""
    holdout_zones = set(holdout_zones)
    train = [r for r in records if r.utm_zone not in holdout_zones]
    holdout = [r for r in records if r.utm_zone in holdout_zones]
    return train, holdout


# -- geo-world rendering ----------------------------------------------------


def hue_map(params: GeoWorldParams, lon: float, lat: float) -> float:
    """Normalized hue in [0, 1) assigned to a location."""
    p = params.hue_period_deg
    h = lon / p + 0.25 * math.sin(2.0 * math.pi * lat / p)
    return h - math.floor(h)


def hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array(
        [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    )


def base_color(hue: float, saturation: float, luma: float) -> np.ndarray:
    """RGB colour with the given HSV hue/saturation, scaled to a fixed luma."""
    unit = hsv_to_rgb(hue, saturation, 1.0)
    return unit * (luma / float(unit @ LUMA_WEIGHTS))


def _tile_rng(params: GeoWorldParams, lon: float, lat: float) -> np.random.Generator:
    lon_bits = int(np.float64(lon).view(np.uint64))
    lat_bits = int(np.float64(lat).view(np.uint64))
    return np.random.default_rng([params.seed & (2**64 - 1), lon_bits, lat_bits])


def generate_geoworld_tile(params: GeoWorldParams, lon: float, lat: float) -> np.ndarray:
    """Render an HR tile (hr_size x hr_size x 3, float64 in [0, 1])."""
    check_coords(lon, lat)
    size = params.hr_size
    rng = _tile_rng(params, lon, lat)
    family = int(rng.integers(params.texture_families))
    density = 1.0 - family / max(params.texture_families - 1, 1)

    # vegetation: smooth brightness field over the location colour
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 24, mode="wrap")
    noise /= noise.std() + 1e-12
    brightness = 0.85 + 0.25 * np.tanh(noise * (0.5 + 0.5 * (1.0 - density)))
    color = base_color(hue_map(params, lon, lat), params.saturation, params.luma)
    img = brightness[..., None] * color

    road_w = max(size // 32, 1)
    for _ in range(int(rng.integers(0, 2 + round(2 * density)))):
        pos = int(rng.integers(0, size - road_w))
        if rng.random() < 0.5:
            img[pos : pos + road_w, :, :] = 0.22
        else:
            img[:, pos : pos + road_w, :] = 0.22

    lo, hi = max(size // 16, 2), max(size // 6, 3)
    for _ in range(int(rng.integers(round(12 * density), 2 + round(14 * density)))):
        h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        y, x = int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))
        img[y : y + h, x : x + w, :] = rng.uniform(0.45, 0.85)

    return np.clip(img, 0.0, 1.0)


# -- degradation ------------------------------------------------------------


def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel (Catmull-Rom for a = -0.5)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _reflect(j: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * (n - 1)
    j = j % period
    return j if j < n else period - j


def downsample_matrix(n: int, factor: int) -> np.ndarray:
    """(n // factor) x n antialiased bicubic resampling matrix, reflect borders."""
    m = n // factor
    mat = np.zeros((m, n))
    support = 2.0 * factor
    for i in range(m):
        center = (i + 0.5) * factor - 0.5
        lo = int(math.floor(center - support)) + 1
        hi = int(math.ceil(center + support))
        for j in range(lo, hi):
            w = float(cubic_kernel((j - center) / factor))
            if w:
                mat[i, _reflect(j, n)] += w
        mat[i] /= mat[i].sum()
    return mat


def bicubic_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise InputError(f"image side {h}x{w} not divisible by {factor}")
    rows, cols = downsample_matrix(h, factor), downsample_matrix(w, factor)
    if img.ndim == 2:
        return rows @ img @ cols.T
    return np.einsum("ij,jkc,lk->ilc", rows, img, cols)


def degrade(hr: np.ndarray, scale_factor: int, noise_sigma: float = 0.02, seed: int = 0) -> np.ndarray:
    """Bicubic downsample, add Gaussian noise, clamp to [0, 1]."""
    if noise_sigma < 0:
        raise InputError("noise_sigma must be >= 0")
    lr = bicubic_downsample(np.asarray(hr, dtype=np.float64), scale_factor)
    if noise_sigma > 0:
        lr = lr + np.random.default_rng(seed).normal(0.0, noise_sigma, lr.shape)
    return np.clip(lr, 0.0, 1.0)


def to_luma(img: np.ndarray) -> np.ndarray:
    """Grey copy of an RGB image, replicated to three channels."""
    y = img @ LUMA_WEIGHTS
    return np.repeat(y[..., None], 3, axis=-1)


# -- file IO ------------------------------------------------------------------


def save_png(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_manifest(path, records: Iterable[TileRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec)) + "\n")


def read_manifest(path) -> list[TileRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                records.append(TileRecord(**row))
            except (json.JSONDecodeError, TypeError, InputError) as exc:
                raise ParseError(path, line_no, str(exc)) from exc
    return records


def resolve(manifest_path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p


@dataclass(frozen=True)
class SynthConfig:
    tiles: int = 64
    seed: int = 0
    bbox: tuple = (-125.0, -65.0, 25.0, 49.0)
    noise_sigma: float = 0.02
    lr_mode: str = "rgb"  # "luma" drops colour from LR inputs
    world: GeoWorldParams = field(default_factory=GeoWorldParams)


def make_lr(hr: np.ndarray, cfg: SynthConfig, index: int) -> np.ndarray:
    lr = degrade(hr, cfg.world.scale_factor, cfg.noise_sigma, seed=cfg.seed * 1_000_003 + index)
    if cfg.lr_mode == "luma":
        lr = to_luma(lr)
    elif cfg.lr_mode != "rgb":
        raise InputError(f"unknown lr_mode {cfg.lr_mode!r}")
    return lr


def sample_coords(n: int, bbox, seed: int) -> np.ndarray:
    lon0, lon1, lat0, lat1 = bbox
    rng = np.random.default_rng(seed)
    lon = rng.uniform(lon0, lon1, n)
    lat = rng.uniform(lat0, lat1, n)
    # a fixed number of decimals keeps manifests readable and re-parseable
    return np.round(np.stack([lon, lat], axis=1), 6)


def synthesize_dataset(out_dir, cfg: SynthConfig) -> list[TileRecord]:
    """Write HR/LR PNG pairs plus ``manifest.jsonl`` and ``geoworld.json``."""
    out = Path(out_dir)
    (out / "hr").mkdir(parents=True, exist_ok=True)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (lon, lat) in enumerate(sample_coords(cfg.tiles, cfg.bbox, cfg.seed)):
        lon, lat = float(lon), float(lat)
        tile_id = f"tile_{i:05d}"
        hr = generate_geoworld_tile(cfg.world, lon, lat)
        save_png(out / "hr" / f"{tile_id}.png", hr)
        save_png(out / "lr" / f"{tile_id}.png", make_lr(hr, cfg, i))
        records.append(
            TileRecord(tile_id, lon, lat, assign_utm_zone(lon),
                       f"hr/{tile_id}.png", f"lr/{tile_id}.png", "train")
        )
    write_manifest(out / "manifest.jsonl", records)
    meta = asdict(cfg)
    meta["bbox"] = list(cfg.bbox)
    with open(out / "geoworld.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return records


def load_synth_config(path) -> SynthConfig:
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    world = GeoWorldParams(**meta.pop("world"))
    meta["bbox"] = tuple(meta["bbox"])
    return SynthConfig(world=world, **meta)


def default_data_root() -> Path:
    return Path(os.environ.get("GEOSR_DATA_DIR", "data"))
