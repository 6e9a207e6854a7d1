import numpy as np
import pytest

from aqfusion.data import half_region, normalize_image
from aqfusion.errors import ParameterError
from aqfusion.explain import (OVERLAY_OPACITY, WARM_COLORMAP, Heatmap, cam_from_maps, export_heatmap, grad_cam,
                              half_mass, normalize_max, overlay, parse_target, quantize, read_pgm, read_ppm,
                              upsample_bilinear)
from aqfusion.model import ModelConfig, forward
from helpers import live_params

CFG = ModelConfig(image_size=16, base_width=4, embed_dim=8, fusion_dim=8, proj_hidden=8)


def test_cam_rules():
    ones = np.ones((1, 4, 4))
    assert np.array_equal(normalize_max(upsample_bilinear(cam_from_maps(ones, ones), 16)), np.ones((16, 16)))
    assert not cam_from_maps(ones, np.zeros_like(ones)).any()
    assert not cam_from_maps(ones, -np.ones_like(ones)).any()


def test_upsample_constant_and_shape():
    up = upsample_bilinear(np.full((4, 4), 0.3), 16)
    assert up.shape == (16, 16) and np.allclose(up, 0.3)


@pytest.fixture(scope="module")
def model():
    params = live_params(CFG, 3)
    g = np.random.default_rng(0)
    return params, normalize_image(g.random((3, 16, 16))), g.normal(size=6)


@pytest.mark.parametrize("target", ["aqi", "sensor_0", "sensor_5", 2])
def test_heatmap_range_and_peak(model, target):
    params, img, sens = model
    hm = grad_cam(params, CFG, img, sens, target)
    assert hm.values.shape == (16, 16)
    assert hm.values.min() >= 0 and hm.values.max() <= 1
    assert hm.values.max() == 1.0 or not hm.values.any()
    assert all(t.grad is None for t in params.values())


def test_heatmap_deterministic(model):
    params, img, sens = model
    assert np.array_equal(grad_cam(params, CFG, img, sens).values, grad_cam(params, CFG, img, sens).values)


def test_positive_rescaling_of_target(model):
    params, img, sens = model
    scaled = params.copy()
    c = 3.0
    scaled["aqi_head.w_AQI"].data *= c
    scaled["aqi_head.b_AQI"].data *= c
    assert np.allclose(forward(img, sens, scaled, CFG).y_hat.data, c * forward(img, sens, params, CFG).y_hat.data,
                       rtol=1e-5)
    raw = grad_cam(params, CFG, img, sens, normalize=False).values
    raw_c = grad_cam(scaled, CFG, img, sens, normalize=False).values
    assert np.allclose(raw_c, c * raw, rtol=1e-4, atol=1e-7)
    assert np.allclose(grad_cam(scaled, CFG, img, sens).values, grad_cam(params, CFG, img, sens).values, atol=1e-5)


def test_bad_targets():
    for bad in ["pm25", "sensor_6", "sensor_x", -1, True]:
        with pytest.raises(ParameterError):
            parse_target(bad)
    assert parse_target("sensor_3") == ("sensor_3", 3)


def test_half_mass_uses_region():
    v = np.zeros((4, 4))
    v[:2] = 1.0
    assert half_mass(v, half_region("top", 4)) == (8.0, 0.0)
    assert half_mass(v, half_region("left", 4)) == (4.0, 4.0)
    with pytest.raises(ParameterError):
        half_mass(v, np.ones((2, 2), bool))


def test_zero_map_overlay_is_dimmed_base():
    base = np.random.default_rng(1).random((3, 8, 8))
    assert np.array_equal(WARM_COLORMAP[0], [0.0, 0.0, 0.0])
    out = overlay(np.zeros((8, 8)), base)
    assert np.allclose(out, (1 - OVERLAY_OPACITY) * base.transpose(1, 2, 0))


def test_export_round_trip(tmp_path):
    g = np.random.default_rng(2)
    hm = Heatmap(normalize_max(g.random((16, 16))), "aqi", "s001")
    base = g.random((3, 16, 16))
    pgm, ppm = export_heatmap(hm, base, tmp_path)
    assert pgm.name == "s001_aqi.pgm" and ppm.name == "s001_aqi.ppm"
    assert np.array_equal(read_pgm(pgm), quantize(hm.values))
    rgb = read_ppm(ppm)
    assert rgb.shape == (16, 16, 3)
    assert np.array_equal(rgb, quantize(overlay(hm.values, base)))
    with pytest.raises(ParameterError):
        export_heatmap(hm, np.zeros((3, 8, 8)), tmp_path)
