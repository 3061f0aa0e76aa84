import numpy as np
import pytest
import torch

from geosr.errors import InputError
from geosr.generator import Generator, GeneratorConfig
from geosr.tiling import (
    TilingError,
    infer_direct,
    infer_tiled,
    partition,
    seam_artifact_index,
)
from oracles import conv_exactness_diff


def test_single_cell_grid():
    g = partition(64, 64, 64, halo=8)
    assert len(g.cells) == 1
    assert g.cells[0].padded_rect == g.cells[0].core_rect


def test_two_by_two_grid():
    g = partition(64, 64, 32, halo=4)
    assert len(g.cells) == 4
    for c in g.cells:
        p = c.padded_rect
        # clipped at the image border, extended by the halo toward neighbours
        assert (p.height, p.width) == (36, 36)


def test_interior_cell_is_fully_padded():
    g = partition(96, 96, 32, halo=4)
    mid = next(c for c in g.cells if (c.row, c.col) == (1, 1))
    assert (mid.padded_rect.height, mid.padded_rect.width) == (40, 40)


@pytest.mark.parametrize("h,w,p", [(64, 64, 32), (48, 96, 16), (30, 30, 5)])
def test_cores_tile_the_image(h, w, p):
    count = np.zeros((h, w), dtype=int)
    for c in partition(h, w, p, 3).cells:
        r = c.core_rect
        count[r.y0 : r.y1, r.x0 : r.x1] += 1
    assert (count == 1).all()


def test_partition_errors():
    with pytest.raises(InputError):
        partition(64, 64, 128)
    with pytest.raises(InputError):
        partition(64, 64, 24)
    with pytest.raises(InputError):
        partition(64, 64, 32, halo=-1)


def conv_model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = GeneratorConfig.toy(num_blocks=1, scale_factor=2, attn_enabled=False, cond_enabled=False, **kw)
    return Generator(cfg).eval()


def test_single_cell_equals_direct_in_both_modes():
    g = conv_model()
    img = torch.rand(3, 16, 16)
    grid = partition(16, 16, 16, halo=4)
    direct = infer_direct(g, img, halo=4)
    for mode in ("local_padding", "zero_padding"):
        assert torch.equal(infer_tiled(g, img, None, grid, mode), direct)


def test_local_padding_matches_direct_inside():
    diff, halo, r = conv_exactness_diff()
    assert halo >= r
    assert diff <= 1e-5


def test_local_padding_with_conditioning_matches_direct_inside():
    # cross-attention against global tokens acts per pixel, so exactness survives
    diff, _, _ = conv_exactness_diff(cond=True)
    assert diff <= 1e-5


def test_short_halo_breaks_exactness():
    diff, _, _ = conv_exactness_diff(halo=2)
    assert diff > 1e-5


def test_zero_padding_creates_seams_on_flat_input():
    g = conv_model(seed=1)
    img = torch.full((3, 32, 32), 0.5)
    grid = partition(32, 32, 8, halo=4)
    zero = infer_tiled(g, img, None, grid, "zero_padding")
    local = infer_tiled(g, img, None, grid, "local_padding")
    assert seam_artifact_index(zero, grid, 2) > 1.0
    assert seam_artifact_index(zero, grid, 2) > seam_artifact_index(local, grid, 2)


def test_bad_mode_and_size():
    g = conv_model()
    grid = partition(16, 16, 8)
    with pytest.raises(InputError):
        infer_tiled(g, torch.rand(3, 16, 16), None, grid, "mirror")
    with pytest.raises(InputError):
        infer_tiled(g, torch.rand(3, 24, 16), None, grid)


def test_model_failure_names_the_cell():
    torch.manual_seed(0)
    g = Generator(GeneratorConfig.toy(num_blocks=1, scale_factor=2)).eval()
    grid = partition(16, 16, 8, halo=2)

    def location(cy, cx):
        if cy > 8 and cx > 8:
            return torch.zeros(5)
        return torch.zeros(256)

    with pytest.raises(TilingError, match="cell 3") as info:
        infer_tiled(g, torch.rand(3, 16, 16), location, grid)
    assert info.value.index == 3


# -- seam index -------------------------------------------------------------------


def test_quadratic_ramp_has_unit_index():
    y, x = np.mgrid[:64, :64].astype(float)
    img = np.stack([0.0002 * (x**2 + y**2)] * 3, axis=-1)
    assert seam_artifact_index(img, partition(32, 32, 8), 2) == pytest.approx(1.0, abs=0.05)


def test_planted_steps_score_high():
    # 8 px LR patches at scale 2 put seams at HR rows/columns 16, 32, 48
    grid = partition(32, 32, 8)
    stepped = np.zeros((64, 64))
    for k in (16, 32, 48):
        stepped[:, k:] += 0.5
        stepped[k:, :] += 0.5
    stepped += np.random.default_rng(0).normal(0, 0.01, stepped.shape)
    assert seam_artifact_index(stepped, grid, 2) > 10


def test_index_ignores_constant_offset():
    img = np.random.default_rng(1).random((32, 32, 3))
    grid = partition(16, 16, 4)
    a = seam_artifact_index(img, grid, 2)
    assert seam_artifact_index(img + 0.25, grid, 2) == pytest.approx(a, rel=1e-9)


def test_no_seams_gives_one():
    assert seam_artifact_index(np.random.default_rng(0).random((16, 16)), partition(8, 8, 8), 2) == 1.0
