"""Seeded, resumable alternating GAN training."""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import yaml
from torch import Tensor

from .discriminators import (
    ImageDiscriminator,
    ImageDiscriminatorConfig,
    LocationDiscriminator,
    LocDiscriminatorConfig,
)
from .errors import ConfigError, InputError, NonFiniteLossError
from .geodata import GLOBE, TileRecord, load_png, read_manifest, resolve
from .generator import Generator, GeneratorConfig
from .location import encode_batch, sample_false_location
from .losses import (
    FeaturePyramid,
    LossWeights,
    gan_generator_loss,
    gan_losses,
    loc_match_from_logits,
    loc_match_g_from_logits,
    perceptual_loss,
    pixel_loss,
    total_loss,
    zero_hook,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "geosr-checkpoint/1"
METRIC_COLUMNS = ("step", "pix", "perceptual", "gan_g", "gan_d", "loc_match_d", "loc_match_g", "total")
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class TrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    image_disc: ImageDiscriminatorConfig = field(default_factory=ImageDiscriminatorConfig)
    loc_disc: LocDiscriminatorConfig = field(default_factory=LocDiscriminatorConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    adam_betas: tuple = (0.9, 0.99)
    checkpoint_every: int = 500
    false_loc_min_sep: float = 5.0
    false_loc_bounds: Optional[tuple] = None
    loc_g_term: bool = True
    perceptual_widths: tuple = (16, 32, 64)
    perceptual_seed: int = 1234

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if len(self.adam_betas) != 2 or not all(0 < b < 1 for b in self.adam_betas):
            raise ConfigError("adam_betas must lie in (0, 1)")
        if self.generator.embed_dim != self.loc_disc.embed_dim:
            raise ConfigError("generator and location discriminator embed_dim differ")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        return replace(
            cls(
                generator=GeneratorConfig.toy(),
                image_disc=ImageDiscriminatorConfig(base_features=16, num_downsamples=3),
                loc_disc=LocDiscriminatorConfig(base_features=16, num_downsamples=3, embed_proj_dim=32),
                batch_size=8,
                steps=500,
                checkpoint_every=100,
            ),
            **overrides,
        )

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return replace(
            cls(
                generator=GeneratorConfig.paper(),
                image_disc=ImageDiscriminatorConfig(base_features=64, num_downsamples=4),
                loc_disc=LocDiscriminatorConfig(base_features=64, num_downsamples=4, embed_proj_dim=64),
            ),
            **overrides,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["perceptual_widths"] = list(self.perceptual_widths)
        d["false_loc_bounds"] = None if self.false_loc_bounds is None else list(self.false_loc_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            sub = {
                "generator": GeneratorConfig(**d.pop("generator", {})),
                "image_disc": ImageDiscriminatorConfig(**d.pop("image_disc", {})),
                "loc_disc": LocDiscriminatorConfig(**d.pop("loc_disc", {})),
                "weights": LossWeights(**d.pop("weights", {})),
            }
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        for key in ("adam_betas", "perceptual_widths", "false_loc_bounds"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**sub, **d)


def merge_config(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = merge_config(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path, preset: str = "toy") -> TrainConfig:
    """Read a YAML (or JSON) config; keys override the named preset."""
    base = {"toy": TrainConfig.toy, "paper": TrainConfig.paper}[preset]().to_dict()
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return TrainConfig.from_dict(merge_config(base, raw))


# -- state ------------------------------------------------------------------------


@dataclass
class TrainState:
    step: int
    generator: Generator
    d_img: ImageDiscriminator
    d_loc: LocationDiscriminator
    g_opt: torch.optim.Adam
    d_opt: torch.optim.Adam
    rng: np.random.Generator
    extractor: FeaturePyramid
    false_loc_bounds: tuple = GLOBE
    clip_hook: Callable = zero_hook
    osm_hook: Callable = zero_hook

    def named_modules(self):
        return {"g": self.generator, "d_img": self.d_img, "d_loc": self.d_loc}


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        params, lr=cfg.lr, betas=tuple(cfg.adam_betas), eps=1e-8, weight_decay=0.0, foreach=False
    )


def init_state(cfg: TrainConfig, false_loc_bounds: Optional[Sequence[float]] = None) -> TrainState:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        gen = Generator(cfg.generator)
        d_img = ImageDiscriminator(cfg.image_disc)
        d_loc = LocationDiscriminator(cfg.loc_disc)
    bounds = cfg.false_loc_bounds or false_loc_bounds or GLOBE
    return TrainState(
        step=0,
        generator=gen.train(),
        d_img=d_img.train(),
        d_loc=d_loc.train(),
        g_opt=_adam(gen.parameters(), cfg),
        d_opt=_adam(list(d_img.parameters()) + list(d_loc.parameters()), cfg),
        rng=np.random.default_rng(cfg.seed),
        extractor=FeaturePyramid(cfg.perceptual_widths, cfg.perceptual_seed),
        false_loc_bounds=tuple(float(b) for b in bounds),
    )


def _chw(img) -> Tensor:
    if isinstance(img, Tensor):
        return img.float()
    return torch.as_tensor(np.ascontiguousarray(np.moveaxis(np.asarray(img), -1, 0)), dtype=torch.float32)


def _finite(name: str, value: Tensor, step: int) -> float:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLossError(name, step)
    return v


def _check_params(state: TrainState, step: int) -> None:
    for prefix, module in state.named_modules().items():
        for name, p in module.named_parameters():
            if not torch.isfinite(p).all():
                raise NonFiniteLossError(f"parameter {prefix}/{name}", step)


def train_step(batch, state: TrainState, cfg: TrainConfig):
    """One critic update followed by one generator update. Mutates ``state``."""
    if not batch:
        raise InputError("empty batch")
    lr_img = torch.stack([_chw(b[0]) for b in batch])
    hr_img = torch.stack([_chw(b[1]) for b in batch])
    lons = [float(b[2]) for b in batch]
    lats = [float(b[3]) for b in batch]
    s = cfg.generator.scale_factor
    if hr_img.shape[-2:] != (lr_img.shape[-2] * s, lr_img.shape[-1] * s):
        raise InputError(f"HR {tuple(hr_img.shape[-2:])} is not LR {tuple(lr_img.shape[-2:])} x {s}")
    step = state.step + 1
    w = cfg.weights
    dim = cfg.generator.embed_dim

    c_true = encode_batch(lons, lats, dim)
    false = [
        sample_false_location(lo, la, state.rng, cfg.false_loc_min_sep, state.false_loc_bounds)
        for lo, la in zip(lons, lats)
    ]
    c_false = encode_batch([f[0] for f in false], [f[1] for f in false], dim)

    g, d_img, d_loc = state.generator, state.d_img, state.d_loc
    sr = g(lr_img, c_true if cfg.generator.cond_enabled else None)

    # critics
    d_img.requires_grad_(True)
    d_loc.requires_grad_(True)
    state.d_opt.zero_grad(set_to_none=False)
    sr_d = sr.detach()
    gan_d, _ = gan_losses(d_img(hr_img), d_img(sr_d))
    loc_d = loc_match_from_logits(d_loc(hr_img, c_true), d_loc(hr_img, c_false), d_loc(sr_d, c_false))
    d_total = gan_d + (loc_d if w.loc_match > 0 else 0.0)
    _finite("gan_d", gan_d, step)
    _finite("loc_match_d", loc_d, step)
    d_total.backward()
    state.d_opt.step()

    # generator
    d_img.requires_grad_(False)
    d_loc.requires_grad_(False)
    state.g_opt.zero_grad(set_to_none=False)
    gan_g = gan_generator_loss(d_img(sr))
    loc_g = loc_match_g_from_logits(d_loc(sr, c_true)) if cfg.loc_g_term else sr.new_zeros(())
    components = {
        "pix": pixel_loss(sr, hr_img),
        "perceptual": perceptual_loss(sr, hr_img, state.extractor),
        "gan_g": gan_g,
        "loc_match_g": loc_g,
        "clip": state.clip_hook(sr, hr_img),
        "osm": state.osm_hook(sr, hr_img),
    }
    stats = {k: _finite(k, v, step) for k, v in components.items()}
    total = total_loss(components, w)
    stats["total"] = _finite("total", total, step)
    total.backward()
    state.g_opt.step()
    d_img.requires_grad_(True)
    d_loc.requires_grad_(True)

    _check_params(state, step)
    state.step = step
    stats.update(step=step, gan_d=float(gan_d.detach()), loc_match_d=float(loc_d.detach()))
    return state, stats


# -- checkpoints --------------------------------------------------------------------


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _optimizer_arrays(prefix: str, opt: torch.optim.Adam) -> dict[str, np.ndarray]:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{prefix}/{idx}/{key}"] = val.detach().cpu().numpy()
    return out


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    for prefix, module in state.named_modules().items():
        for name, t in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = t.detach().cpu().numpy()
    arrays.update(_optimizer_arrays("opt_g", state.g_opt))
    arrays.update(_optimizer_arrays("opt_d", state.d_opt))
    return arrays


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> Path:
    """Write a byte-deterministic zip: meta.json plus one .npy per named array."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "false_loc_bounds": list(state.false_loc_bounds),
    }
    entries = {"meta.json": json.dumps(meta, sort_keys=True, indent=1).encode()}
    for name, arr in state_arrays(state).items():
        entries[f"arrays/{name}.npy"] = _npy_bytes(arr)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise InputError(f"{path}: not a geosr checkpoint")
        for name in zf.namelist():
            if name.startswith("arrays/"):
                arrays[name[len("arrays/") : -len(".npy")]] = np.load(io.BytesIO(zf.read(name)))
    return meta, arrays


def _load_module(prefix: str, module: torch.nn.Module, arrays: dict) -> None:
    expected = module.state_dict()
    got = {k[len(prefix) + 1 :]: v for k, v in arrays.items() if k.startswith(prefix + "/")}
    if set(got) != set(expected):
        missing, extra = set(expected) - set(got), set(got) - set(expected)
        raise ConfigError(f"{prefix}: checkpoint arrays mismatch (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, t in expected.items():
        if tuple(got[name].shape) != tuple(t.shape):
            raise ConfigError(f"{prefix}/{name}: shape {got[name].shape} != config shape {tuple(t.shape)}")
    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in got.items()})


def _load_optimizer(prefix: str, opt: torch.optim.Adam, arrays: dict) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for key, arr in arrays.items():
        if key.startswith(prefix + "/"):
            _, idx, field_name = key.split("/")
            state.setdefault(int(idx), {})[field_name] = torch.from_numpy(np.array(arr))
    sd["state"] = state
    opt.load_state_dict(sd)


def load_checkpoint(path, cfg: Optional[TrainConfig] = None) -> tuple[TrainState, TrainConfig]:
    """Rebuild a TrainState; ``cfg`` overrides the stored one (steps, schedule)."""
    meta, arrays = read_checkpoint(path)
    stored = TrainConfig.from_dict(meta["config"])
    if cfg is None:
        cfg = stored
    else:
        keep = ("steps", "checkpoint_every")
        if replace(stored, **{k: getattr(cfg, k) for k in keep}) != cfg:
            raise ConfigError("config differs from the checkpoint's config beyond steps/checkpoint_every")
    state = init_state(cfg, meta["false_loc_bounds"])
    state.false_loc_bounds = tuple(meta["false_loc_bounds"])
    for prefix, module in state.named_modules().items():
        _load_module(prefix, module, arrays)
    _load_optimizer("opt_g", state.g_opt, arrays)
    _load_optimizer("opt_d", state.d_opt, arrays)
    state.rng.bit_generator.state = meta["rng_state"]
    state.step = int(meta["step"])
    return state, cfg


def load_generator(path) -> tuple[Generator, TrainConfig]:
    meta, arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    gen = Generator(cfg.generator)
    _load_module("g", gen, arrays)
    return gen.eval(), cfg


# -- data + loop -------------------------------------------------------------------


@dataclass
class TrainingData:
    lr: Tensor
    hr: Tensor
    lons: list
    lats: list
    records: list

    def __len__(self):
        return len(self.records)

    def batch(self, indices) -> list:
        return [(self.lr[i], self.hr[i], self.lons[i], self.lats[i]) for i in indices]

    def bbox(self) -> tuple:
        return (min(self.lons), max(self.lons), min(self.lats), max(self.lats))


def load_training_data(manifest_path, split: Optional[str] = "train") -> TrainingData:
    records: list[TileRecord] = read_manifest(manifest_path)
    if split is not None:
        records = [r for r in records if r.split == split]
    if not records:
        raise InputError(f"{manifest_path}: no records with split={split!r}")
    missing = [
        str(resolve(manifest_path, p)) for r in records for p in (r.lr_path, r.hr_path)
        if not resolve(manifest_path, p).is_file()
    ]
    if missing:
        raise InputError("missing image files:\n  " + "\n  ".join(missing))
    lr = torch.stack([_chw(load_png(resolve(manifest_path, r.lr_path))) for r in records])
    hr = torch.stack([_chw(load_png(resolve(manifest_path, r.hr_path))) for r in records])
    return TrainingData(lr, hr, [r.lon for r in records], [r.lat for r in records], records)


def batch_indices(step: int, batch_size: int, n: int, seed: int) -> list[int]:
    """Indices for 0-based ``step``; each epoch is a fresh seeded permutation."""
    out, perms = [], {}
    for g in range(step * batch_size, (step + 1) * batch_size):
        epoch, pos = divmod(g, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perms[epoch][pos]))
    return out


def expand_bounds(bbox, margin: float) -> tuple:
    lon0, lon1, lat0, lat1 = bbox
    return (
        max(lon0 - margin, GLOBE[0]), min(lon1 + margin, GLOBE[1]),
        max(lat0 - margin, GLOBE[2]), min(lat1 + margin, GLOBE[3]),
    )


def format_metrics_row(stats: dict) -> str:
    return ",".join(str(stats["step"]) if c == "step" else repr(float(stats[c])) for c in METRIC_COLUMNS)


def fit(
    cfg: TrainConfig,
    data: TrainingData,
    state: Optional[TrainState] = None,
    on_step: Optional[Callable[[dict, TrainState], None]] = None,
) -> TrainState:
    """Run ``train_step`` until ``state.step == cfg.steps``."""
    if state is None:
        state = init_state(cfg, expand_bounds(data.bbox(), cfg.false_loc_min_sep))
    while state.step < cfg.steps:
        idx = batch_indices(state.step, cfg.batch_size, len(data), cfg.seed)
        state, stats = train_step(data.batch(idx), state, cfg)
        if on_step is not None:
            on_step(stats, state)
        if state.step % 50 == 0:
            log.info("step %d total %.4f pix %.4f", state.step, stats["total"], stats["pix"])
    return state


def run_training(cfg: TrainConfig, manifest, out_dir, resume=None, data: Optional[TrainingData] = None) -> dict:
    """Train from scratch or resume; returns paths of the final checkpoint and metrics CSV.

    Checkpoints land in ``out_dir/checkpoints/step_XXXXXXX.ckpt`` every
    ``checkpoint_every`` steps; ``out_dir/final.ckpt`` holds the end state.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = load_training_data(manifest)
    if resume is not None:
        state, cfg = load_checkpoint(resume, cfg)
    else:
        state = init_state(cfg, expand_bounds(data.bbox(), cfg.false_loc_min_sep))

    metrics_path = out / "metrics.csv"
    rows = []
    if resume is not None and metrics_path.exists():
        body = metrics_path.read_text(encoding="utf-8").splitlines()[1:]
        rows = [r for r in body if r and int(r.split(",", 1)[0]) <= state.step]
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for r in rows:
            fh.write(r + "\n")

        def record(stats, st):
            fh.write(format_metrics_row(stats) + "\n")
            if st.step % cfg.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(out / "checkpoints" / f"step_{st.step:07d}.ckpt", st, cfg)

        state = fit(cfg, data, state, record)
    final = save_checkpoint(out / "final.ckpt", state, cfg)
    return {"checkpoint": final, "metrics": metrics_path, "state": state, "config": cfg}
