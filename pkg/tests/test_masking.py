import hashlib
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_camera, simple_camera
from gspretrain.errors import ConfigurationError
from gspretrain.io import to_uint8
from gspretrain.masking import (
    LidarCloud,
    MaskConfig,
    PatchMask,
    generate_patch_mask,
    mask_visualization,
    pixel_index,
    project_lidar,
    round_half_away,
    validate_mask,
)
from gspretrain.train import STREAM_TRAIN
from oracles import brute_force_valid

seeds = st.integers(0, 2**32 - 1)

# sha256 of the uint8 overlay of fixture camera i at training step 0 (reference run, seed 7)
GOLDEN_OVERLAYS = {
    0: "f8c475095b1720cf87ad7c4da49905c5c1a34b1977cf38d9861404cbfb8dcdeb",
    2: "ac720e603e8855a12f9e882f96371fcb95dd2f38a48e3c255c29abcc0258f3a5",
    5: "069ca5e6f741b095910e76846ddb2f1119b145de576198922ec12ca41430e87a",
}


def test_config_validation():
    with pytest.raises(ConfigurationError):
        MaskConfig(mask_ratio=0.0)
    with pytest.raises(ConfigurationError):
        MaskConfig(mask_ratio=1.0)
    with pytest.raises(ConfigurationError):
        MaskConfig(depth_range=(5, 5))
    assert MaskConfig().patch_size == 32 and MaskConfig().mask_ratio == 0.3
    assert MaskConfig().depth_range == (0.0, 50.0)


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, 2.4, -0.5, -1.5)] == [1, 2, 3, 2, -1, -2]


# --- generate_patch_mask -----------------------------------------------------------

def test_mask_count_96():
    pm = generate_patch_mask((96, 96), MaskConfig(patch_size=32, mask_ratio=0.3))
    assert len(pm.patches) == round_half_away(0.3 * 9) == 3


def test_tiny_ratio_masks_nothing():
    pm = generate_patch_mask((96, 96), MaskConfig(patch_size=32, mask_ratio=1e-9))
    assert pm.patches == ()


def test_image_smaller_than_patch():
    with pytest.raises(ConfigurationError):
        generate_patch_mask((16, 64), MaskConfig(patch_size=32))


def test_partial_edge_patches_excluded():
    pm = generate_patch_mask((100, 70), MaskConfig(patch_size=32, mask_ratio=0.99))
    assert pm.grid_shape == (2, 3)
    assert len(pm.patches) == 6  # round(0.99 * 6)


@given(seeds, st.integers(32, 200), st.integers(32, 200), st.floats(0.01, 0.99))
def test_mask_count_unique_and_deterministic(seed, w, h, ratio):
    cfg = MaskConfig(patch_size=16, mask_ratio=ratio, seed=seed)
    a = generate_patch_mask((w, h), cfg)
    b = generate_patch_mask((w, h), cfg)
    assert a == b
    rows, cols = h // 16, w // 16
    assert len(a.patches) == round_half_away(ratio * rows * cols)
    assert len(set(a.patches)) == len(a.patches)
    assert all(0 <= r < rows and 0 <= c < cols for r, c in a.patches)


# --- project_lidar ------------------------------------------------------------------

def test_project_lidar_examples():
    cam = simple_camera()
    pr = project_lidar(LidarCloud([[0, 0, 5]]), cam)
    assert len(pr) == 1 and pr.depths[0] == 5
    assert len(project_lidar(LidarCloud([[0, 0, -5]]), cam)) == 0
    assert len(project_lidar(LidarCloud(np.zeros((0, 3))), cam)) == 0


@given(seeds)
def test_project_lidar_matches_per_point_filter(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    pts = cam.center + rng.normal(scale=5, size=(200, 3))
    pr = project_lidar(LidarCloud(pts), cam)
    expected = []
    for i, x in enumerate(pts):
        z = (cam.R @ x + cam.t)[2]
        if z <= 1e-6:
            continue
        h = cam.P @ np.append(x, 1)
        u, v = h[:2] / h[2]
        if -0.5 <= u < cam.width - 0.5 and -0.5 <= v < cam.height - 0.5:
            expected.append(i)
    assert pr.point_index.tolist() == expected


def test_pixel_index_rounds_to_centres():
    assert pixel_index([[0.49, -0.5], [0.5, 1.49]]).tolist() == [[0, 0], [1, 1]]


# --- validate_mask ------------------------------------------------------------------

def _one_patch(depth):
    cam = simple_camera(f=100.0, c=32.0, size=64)
    cfg = MaskConfig(patch_size=32, mask_ratio=0.3, depth_range=(0, 50))
    pm = PatchMask(0, ((1, 1),), 32, (2, 2))
    # lands on pixel (48, 48): patch (1, 1)
    x = np.array([16.0, 16.0, 100.0]) * depth / 100.0
    return validate_mask(pm, project_lidar(LidarCloud([x]), cam), cfg)


def test_validate_examples():
    assert _one_patch(10).patches == ((1, 1),)
    assert _one_patch(60).patches == ()


def test_validate_closed_range_edges():
    cam = simple_camera()
    cfg = MaskConfig(patch_size=32, depth_range=(2.0, 5.0))
    pm = PatchMask(0, ((1, 1), (0, 0)), 32, (2, 2))
    x_in = np.array([16.0, 16.0, 100.0]) * 5.0 / 100.0  # exactly b
    x_lo = np.array([-16.0, -16.0, 100.0]) * 2.0 / 100.0  # exactly a
    vm = validate_mask(pm, project_lidar(LidarCloud([x_in, x_lo]), cam), cfg)
    assert set(vm.patches) == {(1, 1), (0, 0)}


def test_min_support_knob():
    cam = simple_camera()
    pm = PatchMask(0, ((1, 1),), 32, (2, 2))
    pr = project_lidar(LidarCloud([[0.16, 0.16, 1.0], [0.17, 0.17, 1.0]]), cam)
    assert validate_mask(pm, pr, MaskConfig(patch_size=32, min_support=2)).patches == ((1, 1),)
    assert validate_mask(pm, pr, MaskConfig(patch_size=32, min_support=3)).patches == ()


@given(seeds)
def test_validate_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng, 64, 48)
    pts = cam.center + rng.normal(scale=8, size=(60, 3))
    cfg = MaskConfig(patch_size=16, mask_ratio=0.5, depth_range=(1.0, 9.0), seed=seed)
    pm = generate_patch_mask(cam.image_size, cfg)
    vm = validate_mask(pm, project_lidar(LidarCloud(pts), cam), cfg)
    assert list(vm.patches) == brute_force_valid(pm.patches, 16, pts, cam, cfg.depth_range)
    assert set(vm.patches) <= set(pm.patches)
    for p in vm.patches:
        _, d = vm.support[p]
        assert len(d) >= 1 and np.all((d >= 1.0) & (d <= 9.0))


def test_sky_patches_never_valid(fixture_cfg, fixture_ctx):
    """A patch whose reference depth is empty everywhere has no LiDAR support."""
    ps = fixture_cfg.mask.patch_size
    cfg = MaskConfig(patch_size=ps, mask_ratio=0.99, depth_range=fixture_cfg.mask.depth_range)
    n_sky = 0
    for i, cam in enumerate(fixture_ctx.cameras):
        pm = generate_patch_mask(cam.image_size, cfg, seed=i)
        vm = validate_mask(pm, fixture_ctx.projections[i], cfg)
        depth = fixture_ctx.frame.depths[i]
        for r, c in pm.patches:
            if np.all(np.isinf(depth[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps])):
                n_sky += 1
                assert (r, c) not in vm.patches
    assert n_sky > 0


def test_serialized_masks_are_byte_identical(fixture_cfg, fixture_ctx):
    def dump():
        cam = fixture_ctx.cameras[0]
        pm = generate_patch_mask(cam.image_size, fixture_cfg.mask, seed=[7, 1, 0, 0])
        return json.dumps(validate_mask(pm, fixture_ctx.projections[0], fixture_cfg.mask).to_dict())

    assert dump() == dump()


# --- visualization ------------------------------------------------------------------

def test_visualization_identity_on_empty_mask():
    img = np.random.default_rng(0).integers(0, 255, size=(64, 64, 3), dtype=np.uint8)
    from gspretrain.masking import ValidMask

    out = mask_visualization(img, ValidMask(0, 32, (), ()))
    np.testing.assert_array_equal(out, img)


def test_visualization_full_mask_zeroes_interior():
    from gspretrain.masking import ValidMask

    img = np.full((64, 64, 3), 200, np.uint8)
    all_p = tuple((r, c) for r in range(2) for c in range(2))
    out = mask_visualization(img, ValidMask(0, 32, all_p, all_p))
    for r, c in all_p:
        assert np.all(out[r * 32 + 1:(r + 1) * 32 - 1, c * 32 + 1:(c + 1) * 32 - 1] == 0)
        assert np.all(out[r * 32, c * 32] == [0, 255, 0])


def test_visualization_leaves_unmasked_pixels_untouched():
    from gspretrain.masking import ValidMask

    img = np.random.default_rng(1).integers(0, 255, size=(64, 96, 3), dtype=np.uint8)
    out = mask_visualization(img, ValidMask(0, 32, ((0, 1),), ((0, 1),)))
    keep = np.ones((64, 96), bool)
    keep[0:32, 32:64] = False
    np.testing.assert_array_equal(out[keep], img[keep])
    assert out.shape == img.shape


@pytest.mark.parametrize("cam_i", sorted(GOLDEN_OVERLAYS))
def test_visualization_golden(fixture_cfg, fixture_ctx, cam_i):
    cam = fixture_ctx.cameras[cam_i]
    pm = generate_patch_mask(cam.image_size, fixture_cfg.mask, image_index=cam_i,
                             seed=[fixture_cfg.seed, STREAM_TRAIN, 0, cam_i])
    vm = validate_mask(pm, fixture_ctx.projections[cam_i], fixture_cfg.mask)
    vis = mask_visualization(to_uint8(fixture_ctx.frame.images[cam_i]), vm)
    assert hashlib.sha256(vis.tobytes()).hexdigest() == GOLDEN_OVERLAYS[cam_i]
