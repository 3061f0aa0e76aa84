import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from geosr.discriminators import ImageDiscriminatorConfig, LocDiscriminatorConfig
from geosr.errors import ConfigError, InputError, NonFiniteLossError
from geosr.experiments import desk_synth, desk_train_config, make_data
from geosr.generator import GeneratorConfig
from geosr.losses import LossWeights, pixel_loss
from geosr.training import (
    TrainConfig,
    _adam,
    batch_indices,
    fit,
    init_state,
    load_checkpoint,
    load_config,
    load_generator,
    read_checkpoint,
    run_training,
    save_checkpoint,
    state_arrays,
    train_step,
)
from oracles import adam_reference


def tiny_cfg(**kw):
    base = TrainConfig(
        generator=GeneratorConfig(num_features=16, grow_channels=8, num_blocks=1, scale_factor=2,
                                  n_loc=2, d_token=8, embed_dim=16),
        image_disc=ImageDiscriminatorConfig(8, 2),
        loc_disc=LocDiscriminatorConfig(8, 2, 8, embed_dim=16),
        batch_size=2, steps=4, checkpoint_every=2,
    )
    return replace(base, **kw)


@pytest.fixture(scope="module")
def data():
    synth = replace(desk_synth(0, tiles=6, hr_size=16), world=replace(desk_synth().world, hr_size=16, scale_factor=2))
    return make_data(synth)


def arrays_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_presets_and_validation():
    toy = TrainConfig.toy()
    assert toy.generator.num_features == 32 and toy.batch_size == 8
    assert TrainConfig.paper().generator.num_blocks == 30
    assert TrainConfig().adam_betas == (0.9, 0.99) and TrainConfig().lr == 1e-4
    for bad in (dict(lr=0), dict(batch_size=0), dict(steps=-1), dict(adam_betas=(0.9, 1.0))):
        with pytest.raises(ConfigError):
            tiny_cfg(**bad)


def test_config_round_trip_and_yaml(tmp_path):
    cfg = tiny_cfg(false_loc_bounds=(-10.0, 10.0, -5.0, 5.0))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    (tmp_path / "c.yaml").write_text("steps: 7\nweights:\n  gan: 0.5\ngenerator:\n  num_blocks: 1\n")
    loaded = load_config(tmp_path / "c.yaml", "toy")
    assert loaded.steps == 7 and loaded.weights.gan == 0.5 and loaded.weights.pix == 1.0
    assert loaded.generator.num_blocks == 1 and loaded.generator.num_features == 32
    (tmp_path / "bad.yaml").write_text("stepz: 7\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_adam_matches_closed_form():
    cfg = tiny_cfg(lr=1e-3)
    theta = torch.tensor([0.5, -1.5], dtype=torch.float64, requires_grad=True)
    opt = _adam([theta], cfg)
    coeffs = torch.tensor([[0.3, -2.0], [1.1, 0.4], [-0.7, 0.9]], dtype=torch.float64)
    for a in coeffs:
        opt.zero_grad()
        (a * theta).sum().backward()
        opt.step()
    for i in range(2):
        ref = adam_reference([0.5, -1.5][i], coeffs[:, i].tolist(), 1e-3, 0.9, 0.99, 1e-8)
        assert float(theta.detach()[i]) == pytest.approx(ref, abs=1e-7)


def test_zero_weights_freeze_generator(data):
    cfg = tiny_cfg(weights=LossWeights(0, 0, 0, 0, 0, 0))
    state = init_state(cfg)
    before = {k: v.clone() for k, v in state.generator.state_dict().items()}
    train_step(data.batch([0, 1]), state, cfg)
    after = state.generator.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_step_is_deterministic(data):
    cfg = tiny_cfg()
    a, b = init_state(cfg), init_state(cfg)
    assert arrays_equal(state_arrays(a), state_arrays(b))
    _, sa = train_step(data.batch([0, 1]), a, cfg)
    _, sb = train_step(data.batch([0, 1]), b, cfg)
    assert sa == sb
    assert arrays_equal(state_arrays(a), state_arrays(b))
    assert a.step == 1


def test_non_finite_loss_is_reported(data):
    cfg = tiny_cfg()
    state = init_state(cfg)
    lr, hr, lon, lat = data.batch([0])[0]
    with pytest.raises(NonFiniteLossError, match="step 1"):
        train_step([(lr, hr * float("nan"), lon, lat)], state, cfg)


def test_bad_batch(data):
    cfg = tiny_cfg()
    with pytest.raises(InputError):
        train_step([], init_state(cfg), cfg)
    lr, hr, lon, lat = data.batch([0])[0]
    with pytest.raises(InputError):
        train_step([(lr, hr[:, :8, :8], lon, lat)], init_state(cfg), cfg)


def test_batch_indices_cover_each_epoch():
    idx = [i for s in range(5) for i in batch_indices(s, 3, 5, seed=4)]
    assert sorted(idx[:5]) == list(range(5)) and sorted(idx[5:10]) == list(range(5))
    assert idx == [i for s in range(5) for i in batch_indices(s, 3, 5, seed=4)]
    assert idx != [i for s in range(5) for i in batch_indices(s, 3, 5, seed=5)]


def test_zero_steps_writes_initial_checkpoint(tmp_path, data):
    cfg = tiny_cfg(steps=0)
    res = run_training(cfg, None, tmp_path, data=data)
    assert res["checkpoint"].exists()
    assert (tmp_path / "metrics.csv").read_text().splitlines()[1:] == []
    _, arrays = read_checkpoint(res["checkpoint"])
    fresh = {k: v for k, v in state_arrays(init_state(cfg)).items()}
    assert arrays_equal(arrays, fresh)


def test_metrics_rows_and_checkpoints(tmp_path, data):
    res = run_training(tiny_cfg(), None, tmp_path, data=data)
    lines = res["metrics"].read_text().splitlines()
    assert lines[0].startswith("step,pix")
    assert [int(r.split(",")[0]) for r in lines[1:]] == [1, 2, 3, 4]
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_0000002.ckpt", "step_0000004.ckpt"]


def test_resume_is_bit_identical(tmp_path, data):
    cfg = tiny_cfg(steps=5, checkpoint_every=2)
    straight = run_training(cfg, None, tmp_path / "a", data=data)
    run_training(replace(cfg, steps=2), None, tmp_path / "b", data=data)
    resumed = run_training(cfg, None, tmp_path / "b", resume=tmp_path / "b" / "final.ckpt", data=data)
    assert straight["checkpoint"].read_bytes() == resumed["checkpoint"].read_bytes()
    assert straight["metrics"].read_bytes() == resumed["metrics"].read_bytes()


def test_resume_from_mid_checkpoint_truncates_metrics(tmp_path, data):
    cfg = tiny_cfg(steps=4, checkpoint_every=2)
    run_training(cfg, None, tmp_path / "a", data=data)
    ref = (tmp_path / "a" / "final.ckpt").read_bytes()
    res = run_training(cfg, None, tmp_path / "a", resume=tmp_path / "a" / "checkpoints" / "step_0000002.ckpt", data=data)
    assert res["checkpoint"].read_bytes() == ref
    assert len(res["metrics"].read_text().splitlines()) == 5


def test_checkpoint_is_byte_deterministic(tmp_path):
    cfg = tiny_cfg()
    save_checkpoint(tmp_path / "a.ckpt", init_state(cfg), cfg)
    save_checkpoint(tmp_path / "b.ckpt", init_state(cfg), cfg)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_config_mismatch(tmp_path):
    cfg = tiny_cfg()
    save_checkpoint(tmp_path / "a.ckpt", init_state(cfg), cfg)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "a.ckpt", replace(cfg, lr=1e-3))
    state, _ = load_checkpoint(tmp_path / "a.ckpt", replace(cfg, steps=99))
    assert state.step == 0
    gen, stored = load_generator(tmp_path / "a.ckpt")
    assert stored == cfg and not gen.training


def test_not_a_checkpoint(tmp_path):
    import zipfile

    with zipfile.ZipFile(tmp_path / "x.ckpt", "w") as zf:
        zf.writestr("meta.json", "{}")
    with pytest.raises(InputError):
        load_generator(tmp_path / "x.ckpt")


def test_false_locations_stay_in_bounds(data):
    cfg = tiny_cfg()
    state = fit(replace(cfg, steps=1), data)
    lon0, lon1, lat0, lat1 = state.false_loc_bounds
    lo, hi = min(data.lons), max(data.lons)
    assert lon0 == pytest.approx(lo - 5) and lon1 == pytest.approx(hi + 5)
    assert lat0 == pytest.approx(min(data.lats) - 5) and lat1 == pytest.approx(max(data.lats) + 5)


def test_pixel_loss_trends_down():
    drops = []
    for seed in range(3):
        synth = desk_synth(seed, tiles=64)
        train = make_data(synth)
        cfg = desk_train_config(seed, steps=60)
        state = init_state(cfg)

        def pix(st):
            st.generator.eval()
            with torch.no_grad():
                v = float(pixel_loss(st.generator(train.lr, _emb(train, cfg)), train.hr))
            st.generator.train()
            return v

        start = pix(state)
        state = fit(cfg, train, state)
        drops.append(start - pix(state))
    assert np.median(drops) > 0


def _emb(data, cfg):
    from geosr.location import encode_batch

    return encode_batch(data.lons, data.lats, cfg.generator.embed_dim)


def test_metrics_values_are_finite(tmp_path, data):
    res = run_training(tiny_cfg(steps=2), None, tmp_path, data=data)
    for line in res["metrics"].read_text().splitlines()[1:]:
        assert all(math.isfinite(float(v)) for v in line.split(","))
