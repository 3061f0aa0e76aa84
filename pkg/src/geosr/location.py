"""Location embeddings, conditioning tokens and false-location sampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, InputError, ParseError
from .geodata import GLOBE, check_coords

SOURCES = ("sinusoidal", "external_table")


@dataclass(frozen=True, eq=False)
class LocationEmbedding:
    vector: np.ndarray
    lon: float
    lat: float
    source: str = "sinusoidal"

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    def as_tensor(self, dtype=torch.float32) -> Tensor:
        return torch.as_tensor(self.vector, dtype=dtype)


def frequencies(dim: int) -> np.ndarray:
    """Per-coordinate frequency schedule: dim/4 values spaced from 1 to dim/4."""
    n = dim // 4
    return np.geomspace(1.0, float(n), n)


def encode_location_sinusoidal(lon: float, lat: float, dim: int = 256) -> LocationEmbedding:
    """Interleaved [sin(f lon), cos(f lon), sin(f lat), cos(f lat)] per frequency."""
    if dim < 4 or dim % 4:
        raise InputError(f"embedding dim must be a multiple of 4 and >= 4, got {dim}")
    check_coords(lon, lat)
    f = frequencies(dim)
    lon_r, lat_r = math.radians(lon), math.radians(lat)
    vec = np.stack(
        [np.sin(f * lon_r), np.cos(f * lon_r), np.sin(f * lat_r), np.cos(f * lat_r)], axis=1
    ).reshape(-1)
    return LocationEmbedding(vec, float(lon), float(lat), "sinusoidal")


def lipschitz_bound(dim: int) -> float:
    """L with ||e(p) - e(q)|| <= L * ||p - q|| for coordinates in degrees."""
    f = frequencies(dim)
    return math.radians(1.0) * math.sqrt(float(np.sum(f**2)))


def encode_batch(lons: Sequence[float], lats: Sequence[float], dim: int) -> Tensor:
    vecs = [encode_location_sinusoidal(lo, la, dim).vector for lo, la in zip(lons, lats)]
    return torch.as_tensor(np.stack(vecs), dtype=torch.float32)


class ExternalEmbeddingTable:
    """Nearest-neighbour lookup over a table of precomputed embeddings."""

    def __init__(self, coords: np.ndarray, vectors: np.ndarray):
        if len(coords) == 0:
            raise InputError("embedding table is empty")
        self.coords = np.asarray(coords, dtype=np.float64)
        self.vectors = np.asarray(vectors, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.coords)

    def lookup(self, lon: float, lat: float) -> LocationEmbedding:
        d2 = np.sum((self.coords - np.array([lon, lat])) ** 2, axis=1)
        i = int(np.argmin(d2))
        return LocationEmbedding(self.vectors[i].copy(), float(lon), float(lat), "external_table")


def write_external_embeddings(path, rows: Sequence[tuple[float, float, Sequence[float]]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lon, lat, vec in rows:
            fh.write(json.dumps({"lon": lon, "lat": lat, "vector": [float(v) for v in vec]}) + "\n")


def load_external_embeddings(path) -> ExternalEmbeddingTable:
    coords, vectors = [], []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                lon, lat, vec = float(row["lon"]), float(row["lat"]), row["vector"]
                vec = [float(v) for v in vec]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(path, line_no, f"malformed row: {exc}") from exc
            if dim is None:
                dim = len(vec)
            if len(vec) != dim or dim == 0:
                raise ParseError(path, line_no, f"vector length {len(vec)}, expected {dim}")
            coords.append((lon, lat))
            vectors.append(vec)
    if not coords:
        raise InputError(f"{path}: embedding table is empty")
    return ExternalEmbeddingTable(np.array(coords), np.array(vectors))


# -- token projection -------------------------------------------------------------


def init_projection_params(dim: int, n_loc: int, d_token: int) -> dict[str, Tensor]:
    hidden = n_loc * d_token
    lin1, lin2 = nn.Linear(dim, hidden), nn.Linear(hidden, hidden)
    return {
        "w1": lin1.weight.detach().clone(), "b1": lin1.bias.detach().clone(),
        "w2": lin2.weight.detach().clone(), "b2": lin2.bias.detach().clone(),
    }


def project_to_tokens(vector: Tensor, params: Mapping[str, Tensor], n_loc: int, d_token: int) -> Tensor:
    """Two-layer GELU perceptron mapping (B, D) embeddings to (B, n_loc, d_token) tokens."""
    hidden = n_loc * d_token
    w1, b1, w2, b2 = (params[k] for k in ("w1", "b1", "w2", "b2"))
    dim = vector.shape[-1]
    if (
        w1.shape != (hidden, dim) or b1.shape != (hidden,)
        or w2.shape != (hidden, hidden) or b2.shape != (hidden,)
    ):
        raise ConfigError(
            f"projection parameters do not map D={dim} to {n_loc}x{d_token}: "
            f"w1 {tuple(w1.shape)}, w2 {tuple(w2.shape)}"
        )
    squeeze = vector.dim() == 1
    if squeeze:
        vector = vector[None]
    out = F.linear(F.gelu(F.linear(vector, w1, b1)), w2, b2)
    out = out.reshape(vector.shape[0], n_loc, d_token)
    return out[0] if squeeze else out


class TokenProjector(nn.Module):
    def __init__(self, dim: int, n_loc: int, d_token: int):
        super().__init__()
        self.dim, self.n_loc, self.d_token = dim, n_loc, d_token
        hidden = n_loc * d_token
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)

    def params(self) -> dict[str, Tensor]:
        return {"w1": self.fc1.weight, "b1": self.fc1.bias, "w2": self.fc2.weight, "b2": self.fc2.bias}

    def forward(self, vector: Tensor) -> Tensor:
        return project_to_tokens(vector, self.params(), self.n_loc, self.d_token)


# -- false locations --------------------------------------------------------------

MAX_REJECTIONS = 100_000


def sample_false_location(
    true_lon: float,
    true_lat: float,
    rng: np.random.Generator,
    min_separation_deg: float = 5.0,
    bounds: Optional[Sequence[float]] = None,
) -> tuple[float, float]:
    """Uniform point in ``bounds`` at least ``min_separation_deg`` away (Chebyshev)."""
    if min_separation_deg <= 0:
        raise ConfigError("min_separation_deg must be positive")
    if min_separation_deg >= 180:
        raise ConfigError(f"min_separation_deg {min_separation_deg} >= 180 cannot be satisfied")
    lon0, lon1, lat0, lat1 = GLOBE if bounds is None else bounds
    reach = max(abs(lon0 - true_lon), abs(lon1 - true_lon), abs(lat0 - true_lat), abs(lat1 - true_lat))
    if reach <= min_separation_deg:
        raise ConfigError(
            f"no point of bounds {tuple(bounds or GLOBE)} is {min_separation_deg} deg "
            f"from ({true_lon}, {true_lat})"
        )
    for _ in range(MAX_REJECTIONS):
        lon = float(rng.uniform(lon0, lon1))
        lat = float(rng.uniform(lat0, lat1))
        if lon >= 180.0:
            continue
        if max(abs(lon - true_lon), abs(lat - true_lat)) >= min_separation_deg:
            return lon, lat
    raise ConfigError("false-location rejection sampling did not terminate")
