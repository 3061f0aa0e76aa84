"""Command-line entry point: ``geosr <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import experiments as exp
from .discriminators import ImageDiscriminatorConfig, LocDiscriminatorConfig
from .errors import GeoSRError
from .geodata import (
    GeoWorldParams,
    SynthConfig,
    default_data_root,
    hue_map,
    load_png,
    load_synth_config,
    read_manifest,
    resolve,
    save_png,
    split_manifest,
    synthesize_dataset,
    write_manifest,
)
from .generator import GeneratorConfig
from .location import encode_location_sinusoidal
from .losses import LossWeights
from .metrics import format_metric, hue_error, psnr, ssim
from .tiling import infer_tiled, partition, seam_artifact_index
from .training import TrainConfig, fit, load_config, load_generator, load_training_data, run_training

EVAL_COLUMNS = ("tile_id", "psnr", "ssim", "hue_error", "lpips", "clip_score")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, seed_default=0) -> None:
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")


def build_parser() -> argparse.ArgumentParser:
    root = default_data_root()
    parser = _Parser(prog="geosr", description="Location-conditioned satellite image super-resolution")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate geo-world tiles and a manifest")
    _common(p)
    p.add_argument("--out", type=Path, default=root)
    p.add_argument("--tiles", type=int, default=64)
    p.add_argument("--hr-size", type=int, default=256)
    p.add_argument("--scale", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--hue-period", type=float, default=60.0)
    p.add_argument("--texture-families", type=int, default=3)
    p.add_argument("--bbox", type=float, nargs=4, default=list(exp.DESK_BBOX),
                   metavar=("LON0", "LON1", "LAT0", "LAT1"))
    p.add_argument("--lr-mode", choices=("rgb", "luma"), default="rgb")

    p = sub.add_parser("split", help="hold out UTM zones")
    _common(p)
    p.add_argument("--manifest", type=Path, default=root / "manifest.jsonl")
    p.add_argument("--holdout", default="13,18,19", help="comma-separated UTM zones")
    p.add_argument("--out-dir", type=Path, default=None)

    p = sub.add_parser("train", help="train generator and critics")
    _common(p, seed_default=None)
    p.add_argument("--manifest", type=Path, default=root / "train.jsonl")
    p.add_argument("--config", type=Path, default=None, help="YAML/JSON config file")
    p.add_argument("--preset", choices=("toy", "paper"), default="toy")
    p.add_argument("--out", type=Path, default=Path("runs/train"))
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--resume", type=Path, default=None)

    p = sub.add_parser("infer", help="super-resolve one LR tile")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--lr", type=Path, required=True, help="LR PNG")
    p.add_argument("--lon", type=float, required=True)
    p.add_argument("--lat", type=float, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("tile", help="patch-wise inference on a large LR image")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--lon", type=float, required=True)
    p.add_argument("--lat", type=float, required=True)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--halo", type=int, default=8)
    p.add_argument("--mode", choices=("local", "zero"), default="local")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="per-tile metrics CSV")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, default=root / "holdout.jsonl")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("loc-swap", help="super-resolve one tile under K coordinates")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, default=root / "manifest.jsonl")
    p.add_argument("--tile-id", default=None)
    p.add_argument("--coords", type=int, default=4)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="train the four ablation configurations")
    _common(p)
    p.add_argument("--manifest", type=Path, default=root / "train.jsonl")
    p.add_argument("--test-manifest", type=Path, default=None)
    p.add_argument("--steps", type=int, default=250)
    p.add_argument("--out", type=Path, required=True)
    return parser


# -- helpers ----------------------------------------------------------------------


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(row[c]) for c in header) + "\n")


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if v is None or isinstance(v, float):
        return format_metric(v)
    return str(v)


def _world_for(manifest: Path):
    meta = Path(manifest).parent / "geoworld.json"
    return load_synth_config(meta) if meta.exists() else None


def _tensor(img: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(np.moveaxis(img, -1, 0)), dtype=torch.float32)


def _embedding(gen, lon, lat):
    return encode_location_sinusoidal(lon, lat, gen.cfg.embed_dim) if gen.cfg.cond_enabled else None


def toy_config_for(scale: int, hr_size: int, seed: int, steps: int, **flags) -> TrainConfig:
    """Desk ablation config sized to the data's scale factor and HR side."""
    down = max(1, min(3, int(math.log2(hr_size)) - 3))
    return TrainConfig.toy(
        generator=GeneratorConfig.toy(scale_factor=scale, cond_enabled=flags["cond"], attn_enabled=flags["attn"]),
        image_disc=ImageDiscriminatorConfig(base_features=16, num_downsamples=down),
        loc_disc=LocDiscriminatorConfig(base_features=16, num_downsamples=down, embed_proj_dim=32),
        weights=replace(LossWeights(), loc_match=flags["loc_match"]),
        steps=steps, seed=seed, checkpoint_every=max(steps, 1),
    )


# -- subcommands ------------------------------------------------------------------


def cmd_synth_data(a) -> None:
    cfg = SynthConfig(
        tiles=a.tiles, seed=a.seed, bbox=tuple(a.bbox), noise_sigma=a.noise, lr_mode=a.lr_mode,
        world=GeoWorldParams(hue_period_deg=a.hue_period, texture_families=a.texture_families,
                             seed=a.seed, hr_size=a.hr_size, scale_factor=a.scale),
    )
    records = synthesize_dataset(a.out, cfg)
    print(f"wrote {len(records)} tiles to {a.out}")


def cmd_split(a) -> None:
    zones = {int(z) for z in a.holdout.split(",") if z.strip()}
    records = read_manifest(a.manifest)
    train, holdout = split_manifest(records, zones)
    out_dir = a.out_dir or a.manifest.parent
    out_dir.mkdir(parents=True, exist_ok=True)

    def relocate(r, split):
        hr = os.path.relpath(resolve(a.manifest, r.hr_path), out_dir)
        lr = os.path.relpath(resolve(a.manifest, r.lr_path), out_dir)
        return replace(r, hr_path=Path(hr).as_posix(), lr_path=Path(lr).as_posix(), split=split)

    write_manifest(out_dir / "train.jsonl", [relocate(r, "train") for r in train])
    write_manifest(out_dir / "holdout.jsonl", [relocate(r, "test") for r in holdout])
    meta = a.manifest.parent / "geoworld.json"
    if meta.exists() and out_dir.resolve() != a.manifest.parent.resolve():
        (out_dir / "geoworld.json").write_bytes(meta.read_bytes())
    print(f"train {len(train)} / holdout {len(holdout)} (zones {sorted(zones)})")


def cmd_train(a) -> None:
    cfg = load_config(a.config, a.preset) if a.config else {"toy": TrainConfig.toy, "paper": TrainConfig.paper}[a.preset]()
    data = load_training_data(a.manifest)
    scale = data.hr.shape[-1] // data.lr.shape[-1]
    if a.config is None and scale != cfg.generator.scale_factor:
        cfg = replace(cfg, generator=replace(cfg.generator, scale_factor=scale))
    overrides = {
        "steps": a.steps, "batch_size": a.batch_size, "lr": a.lr,
        "checkpoint_every": a.checkpoint_every, "seed": a.seed,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    result = run_training(cfg, a.manifest, a.out, resume=a.resume, data=data)
    print(f"checkpoint {result['checkpoint']}")


def cmd_infer(a) -> None:
    gen, _ = load_generator(a.checkpoint)
    lr = _tensor(load_png(a.lr))
    from .generator import generate

    sr = generate(gen, lr, _embedding(gen, a.lon, a.lat))
    a.out.parent.mkdir(parents=True, exist_ok=True)
    save_png(a.out, sr.permute(1, 2, 0).numpy())


def cmd_tile(a) -> None:
    gen, _ = load_generator(a.checkpoint)
    img = _tensor(load_png(a.image))
    grid = partition(img.shape[1], img.shape[2], a.patch, a.halo)
    emb = _embedding(gen, a.lon, a.lat)
    loc = (lambda cy, cx: emb) if emb is not None else None
    mode = {"local": "local_padding", "zero": "zero_padding"}[a.mode]
    out = infer_tiled(gen, img, loc, grid, mode)
    a.out.parent.mkdir(parents=True, exist_ok=True)
    save_png(a.out, out.permute(1, 2, 0).numpy())
    print(f"seam_index {seam_artifact_index(out, grid, gen.cfg.scale_factor)!r}")


def cmd_eval(a) -> None:
    gen, _ = load_generator(a.checkpoint)
    synth = _world_for(a.manifest)
    rows = []
    from .generator import generate

    for r in read_manifest(a.manifest):
        lr = _tensor(load_png(resolve(a.manifest, r.lr_path)))
        hr = load_png(resolve(a.manifest, r.hr_path))
        sr = generate(gen, lr, _embedding(gen, r.lon, r.lat))
        hue = hue_error(sr, hue_map(synth.world, r.lon, r.lat)) if synth else None
        rows.append({"tile_id": r.tile_id, "psnr": psnr(sr, hr), "ssim": ssim(sr, hr),
                     "hue_error": hue, "lpips": None, "clip_score": None})
    _write_csv(a.out, EVAL_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {a.out}")


def cmd_loc_swap(a) -> None:
    gen, _ = load_generator(a.checkpoint)
    synth = _world_for(a.manifest)
    if synth is None:
        raise GeoSRError(f"{a.manifest.parent}/geoworld.json not found; hue truth unavailable")
    records = read_manifest(a.manifest)
    rec = next((r for r in records if r.tile_id == a.tile_id), None) if a.tile_id else records[0]
    if rec is None:
        raise GeoSRError(f"tile {a.tile_id!r} not in {a.manifest}")
    lr = _tensor(load_png(resolve(a.manifest, rec.lr_path)))
    coords = exp.swap_coords(rec.lon, rec.lat, a.coords, synth.bbox, a.seed)
    rows = exp.loc_swap(gen, lr, coords, synth.world)
    _write_csv(a.out, exp.LOC_SWAP_COLUMNS, rows)
    print(json.dumps({
        "mean_ssim_vs_original": float(np.mean([r["ssim_vs_original"] for r in rows[1:]])) if len(rows) > 1 else 1.0,
        "mean_hue_error": float(np.nanmean([r["hue_error"] for r in rows])),
    }))


def cmd_ablate(a) -> None:
    train = load_training_data(a.manifest)
    test = load_training_data(a.test_manifest or a.manifest, split=None)
    synth = _world_for(a.manifest)
    scale = train.hr.shape[-1] // train.lr.shape[-1]
    rows = []
    for name, flags in exp.ABLATIONS.items():
        cfg = toy_config_for(scale, train.hr.shape[-1], a.seed, a.steps, **flags)
        state = fit(cfg, train)
        q = exp.quality(state.generator, test, synth.world) if synth else None
        if q is None:
            q = {"psnr": None, "ssim": None, "hue_error": None}
        rows.append({"config": name, **q})
        print(f"{name}: {q}")
    _write_csv(a.out, ("config", "psnr", "ssim", "hue_error"), rows)


COMMANDS = {
    "synth-data": cmd_synth_data,
    "split": cmd_split,
    "train": cmd_train,
    "infer": cmd_infer,
    "tile": cmd_tile,
    "eval": cmd_eval,
    "loc-swap": cmd_loc_swap,
    "ablate": cmd_ablate,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    torch.set_num_threads(max(1, args.threads))
    try:
        COMMANDS[args.command](args)
    except (GeoSRError, OSError, ValueError) as exc:
        print(f"geosr {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
