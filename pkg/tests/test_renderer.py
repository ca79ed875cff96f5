import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralmedia.camera import Camera
from neuralmedia.errors import DomainError, NumericalError
from neuralmedia.fields import NetworkConfig, NetworkSet
from neuralmedia.lights import LightCondition
from neuralmedia.media import HomogeneousField, MediumSample, single_field_scene
from neuralmedia.oracle import ProbeShField
from neuralmedia.renderer import (LightBatch, MarchConfig, NeuralSource, OracleSource, march_batch, march_ray,
                                  multiple_scatter, render_image, single_scatter)

from conftest import UNIT_BOX, sphere_scene

SMALL = NetworkConfig(feature_width=16, feature_depth=2, prop_width=8, sh_width=8, sh_depth=2,
                      vis_width=8, vis_depth=2, pos_band=3)
FAST = MarchConfig(n_samples=8, k_dirs=8, env_dirs=4)
CAM = Camera.look_at((0.0, -4.0, 1.0), (0.0, 0.0, 0.0), width=12, height=10)
LIGHT = LightCondition((3.0, -2.0, 2.0), 400.0)


def dense_net(seed=0):
    net = NetworkSet(SMALL, seed=seed)
    net.groups["R"][-1].value[0] = 1.5
    return net


def test_config_validation():
    with pytest.raises(DomainError):
        MarchConfig(n_samples=0)
    with pytest.raises(DomainError):
        MarchConfig(visibility_source="magic")


def test_zero_resolution_camera_rejected():
    with pytest.raises(DomainError):
        Camera.look_at((0, -4, 0), (0, 0, 0), width=0, height=4)


def test_vacuum_net():
    net = NetworkSet(SMALL, seed=1)
    net.zero_density()
    img = render_image(net, CAM, LIGHT, FAST)
    assert np.all(img.rgb == 0)
    scene = sphere_scene(sigma=0.0)
    grey = type(scene)(scene.instances, background=(0.2, 0.3, 0.4))
    img = render_image(net, CAM, LightCondition((3, 0, 0), 400, env=True), FAST, scene=grey)
    assert np.allclose(img.rgb - grey.env.radiance(CAM.pixel_rays()[1]).reshape(10, 12, 3),
                       [0.2, 0.3, 0.4], atol=1e-6)


def test_zero_sh_reduces_to_single_scattering():
    net = dense_net(2)
    net.zero_sh()
    img = render_image(net, CAM, LIGHT, FAST)
    assert np.all(img.indirect == 0) and np.array_equal(img.rgb, img.direct)
    bare = net.astype(net.dtype)
    bare.s_spec = None
    del bare.groups["S"]
    assert np.array_equal(render_image(bare, CAM, LIGHT, FAST).rgb, img.rgb)


def test_layers_add_up_and_non_negative():
    img = render_image(dense_net(3), CAM, LightCondition((3, 0, 2), 700, env=True), FAST)
    assert np.array_equal(img.rgb, img.direct + img.indirect)
    assert np.all(img.direct >= 0) and np.all(img.indirect >= 0)


def test_single_scatter_hand_case():
    scene = sphere_scene(sigma=0.0)
    d = 2.0
    light = LightCondition((d, 0.0, 0.0), 4 * math.pi * d * d)
    sample = MediumSample(0.0, np.array([0.6, 0.3, 0.9]), 0.0)
    cfg = MarchConfig(visibility_source="oracle")
    out = single_scatter(OracleSource(scene), np.zeros(3), np.array([0.0, 0.0, 1.0]), sample, light, cfg)
    assert out[0] == pytest.approx([0.6, 0.3, 0.9], rel=1e-12)
    dark = MediumSample(0.0, np.zeros(3), 0.0)
    assert np.all(single_scatter(OracleSource(scene), np.zeros(3), [0, 0, 1.0], dark, light, cfg) == 0)


def test_single_scatter_learned_visibility_in_range():
    net = dense_net(4)
    sample = MediumSample(0.0, np.full(3, 0.5), 0.0)
    out = single_scatter(net, np.zeros(3), [0, 0, 1.0], sample, LightCondition((2, 0, 0), 100.0), FAST)
    free = 0.5 * 100.0 / 4.0 / (4 * math.pi)
    assert np.all(out > 0) and np.all(out < free)


def test_multiple_scatter_cases():
    sample = MediumSample(0.0, np.full(3, 0.7), 0.0)
    coeffs = np.zeros((36, 3))
    assert np.all(multiple_scatter(np.zeros(3), [0, 0, 1.0], sample, coeffs, FAST) == 0)
    coeffs[0] = [1.0, 2.0, 3.0]
    out = multiple_scatter(np.zeros(3), [0, 0, 1.0], sample, coeffs, FAST)
    assert out[0] == pytest.approx(0.7 * 0.2820948 * np.array([1.0, 2.0, 3.0]), rel=1e-6)
    strict = multiple_scatter(np.zeros(3), [0, 0, 1.0], sample, coeffs,
                              MarchConfig(k_dirs=8, strict_paper=True))
    assert strict[0] == pytest.approx(out[0] / (4 * math.pi), rel=1e-12)


def test_multiple_scatter_converges_in_k():
    scene = sphere_scene(albedo=0.9)
    probe = ProbeShField.fit(scene, LIGHT, ((-1, -1, -1), (1, 1, 1)), 3, 5, 96, 8, seed=1)
    rng = np.random.default_rng(0)
    p = rng.uniform(-0.8, 0.8, (100, 3))
    w = rng.normal(size=(100, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    sample = MediumSample(np.full(100, 2.0), np.full((100, 3), 0.9), rng.uniform(-0.5, 0.5, 100))
    coeffs = probe(p)
    lo = multiple_scatter(p, w, sample, coeffs, MarchConfig(k_dirs=64))
    hi = multiple_scatter(p, w, sample, coeffs, MarchConfig(k_dirs=16384))
    assert np.mean(np.linalg.norm(lo - hi, axis=1) / np.linalg.norm(hi, axis=1)) < 0.05


@settings(max_examples=20)
@given(st.integers(0, 1000), st.floats(-3, 3))
def test_compositing_weights_bounded(seed, bias):
    net = NetworkSet(SMALL, seed=seed)
    net.groups["R"][-1].value[0] = bias
    o, d = CAM.pixel_rays()
    res = march_batch(NeuralSource(net), o, d, LightBatch.uniform(LIGHT, len(o)), FAST)
    assert np.all(res.weights.sum(axis=1) <= 1 + 1e-5)


def test_ray_missing_bounds_sees_background():
    total, direct, indirect = march_ray(dense_net(), np.array([5.0, 5.0, 5.0]), np.array([1.0, 0, 0]),
                                        LIGHT, FAST)
    assert np.all(total == 0) and np.all(indirect == 0)


def test_threads_and_chunks_do_not_change_image():
    net = dense_net(5)
    a = render_image(net, CAM, LIGHT, FAST)
    b = render_image(net, CAM, LIGHT, MarchConfig(n_samples=8, k_dirs=8, env_dirs=4, chunk_rays=7, threads=3))
    assert np.array_equal(a.rgb, b.rgb)
    c = render_image(net, CAM, LIGHT, MarchConfig(n_samples=8, k_dirs=8, env_dirs=4, seed=9))
    assert not np.array_equal(a.rgb, c.rgb)


def test_quadrature_converged_on_smooth_medium():
    src = OracleSource(single_field_scene(HomogeneousField(2.0, (0.8,) * 3, 0.0, UNIT_BOX, "box")))
    a = render_image(src, CAM, LIGHT, MarchConfig(n_samples=64)).rgb
    b = render_image(src, CAM, LIGHT, MarchConfig(n_samples=128)).rgb
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 0.01


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_network_aborts():
    net = dense_net(6)
    net.groups["F"][0].value[0, 0] = np.nan
    with pytest.raises(NumericalError):
        render_image(net, CAM, LIGHT, FAST)


def test_oracle_visibility_needs_scene():
    with pytest.raises(DomainError):
        render_image(dense_net(), CAM, LIGHT, MarchConfig(n_samples=4, visibility_source="oracle"))
