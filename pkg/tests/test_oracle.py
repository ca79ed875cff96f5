import numpy as np
import pytest

from neuralmedia.camera import Camera
from neuralmedia.errors import DomainError
from neuralmedia.evalkit import relative_rms
from neuralmedia.lights import LightCondition
from neuralmedia.mathkit import sh_basis, sh_project_lstsq
from neuralmedia.oracle import (PathTracerConfig, ProbeShField, incident_radiance_probe, probe_many,
                                render_reference, shadow_transmittance, single_scatter_reference)

from conftest import sphere_scene

TINY = Camera.look_at((0.0, -4.0, 1.0), (0.0, 0.0, 0.0), width=8, height=8)


def test_config_validation():
    with pytest.raises(DomainError):
        PathTracerConfig(spp=0)
    with pytest.raises(DomainError):
        PathTracerConfig(rr_floor=0.0)


def test_vacuum_renders_black(small_camera, point_light):
    scene = sphere_scene(sigma=0.0)
    img = render_reference(scene, small_camera, point_light, PathTracerConfig(spp=4))
    assert np.all(img.rgb == 0)
    assert np.all(single_scatter_reference(scene, small_camera, point_light, 4, 16).rgb == 0)


def test_absorbing_medium_has_no_scattering(small_camera, point_light):
    scene = sphere_scene(albedo=0.0)
    img = render_reference(scene, small_camera, point_light, PathTracerConfig(spp=8))
    assert np.all(img.indirect == 0)
    assert np.all(single_scatter_reference(scene, small_camera, point_light, 4, 16).rgb == 0)


def test_layers_add_up(sphere, small_camera, point_light):
    img = render_reference(sphere, small_camera, point_light, PathTracerConfig(spp=16))
    assert np.all(img.rgb >= 0) and np.all(np.isfinite(img.rgb))
    assert img.rgb == pytest.approx(img.direct + img.indirect, rel=1e-4, abs=1e-7)
    assert img.indirect.sum() > 0 and img.direct.sum() > 0


def test_seed_and_thread_determinism(sphere, small_camera, point_light):
    base = PathTracerConfig(spp=8, seed=3, tile_pixels=32)
    one = render_reference(sphere, small_camera, point_light, base)
    many = render_reference(sphere, small_camera, point_light,
                            PathTracerConfig(spp=8, seed=3, tile_pixels=32, threads=4))
    assert np.array_equal(one.rgb, many.rgb)
    other = render_reference(sphere, small_camera, point_light, PathTracerConfig(spp=8, seed=4))
    assert not np.array_equal(one.rgb, other.rgb)


def test_energy_bound(small_camera):
    light = LightCondition((1.5, -1.5, 1.0), 900.0)
    scene = sphere_scene(sigma=6.0, albedo=1.0)
    img = render_reference(scene, small_camera, light, PathTracerConfig(spp=32))
    d_min = np.linalg.norm(light.pos) - 1.0
    assert img.rgb.max() <= light.intensity / d_min ** 2


def test_more_bounces_more_energy(small_camera, point_light):
    scene = sphere_scene(sigma=4.0, albedo=1.0)
    energy = [render_reference(scene, small_camera, point_light,
                               PathTracerConfig(spp=32, max_bounces=b, seed=1)).rgb.sum()
              for b in (1, 2, 4, 16)]
    assert all(a < b for a, b in zip(energy, energy[1:]))


def test_self_convergence():
    scene = sphere_scene(sigma=4.0, albedo=0.8)
    light = LightCondition((3.0, -2.0, 2.0), 400.0)
    lo = render_reference(scene, TINY, light, PathTracerConfig(spp=4096, seed=1)).rgb
    hi = render_reference(scene, TINY, light, PathTracerConfig(spp=16384, seed=2)).rgb
    assert relative_rms(lo, hi) < 0.01


def test_single_scatter_matches_direct_layer():
    scene = sphere_scene()
    light = LightCondition((3.0, -2.0, 2.0), 400.0)
    pt = render_reference(scene, TINY, light, PathTracerConfig(spp=8192, seed=5)).direct
    ss = single_scatter_reference(scene, TINY, light, 1, 256).rgb
    assert relative_rms(ss, pt) < 0.02


def test_single_scatter_with_sky():
    scene = sphere_scene()
    light = LightCondition((3.0, -2.0, 2.0), 0.0, env=True)
    ss = single_scatter_reference(scene, TINY, light, 64, 64).rgb
    assert ss.min() >= 0 and ss.max() > 0


def test_shadow_transmittance_through_sphere():
    scene = sphere_scene()
    p = np.array([[0.0, 0.0, -2.0], [0.0, 0.0, 0.0]])
    w = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    t = shadow_transmittance(scene, p, w, np.inf, 64)
    assert t == pytest.approx([np.exp(-4.0), np.exp(-2.0)], rel=1e-9)


def test_probe_zero_cases(point_light):
    for scene in (sphere_scene(albedo=0.0), sphere_scene(sigma=0.0)):
        _, rgb = incident_radiance_probe(scene, np.zeros(3), point_light, 16, 8)
        assert np.all(rgb == 0)


def test_probe_smooth_at_dense_center(point_light):
    scene = sphere_scene(sigma=4.0, albedo=0.95)
    dirs, rgb = incident_radiance_probe(scene, np.zeros(3), point_light, 400, 256, seed=2)
    fit = sh_basis(5, dirs) @ sh_project_lstsq(dirs, rgb, 5)
    assert np.linalg.norm(fit - rgb) / np.linalg.norm(rgb) < 0.15


def test_probe_field_interpolates_nodes(point_light):
    scene = sphere_scene()
    field = ProbeShField.fit(scene, point_light, ((-1, -1, -1), (1, 1, 1)), 2, 1, 16, 4)
    nodes = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    out = field(nodes)
    assert out.shape == (2, 4, 3)
    assert np.array_equal(out[0], field.coeffs[0, 0, 0]) and np.array_equal(out[1], field.coeffs[1, 1, 1])
    mid = field(np.zeros((1, 3)))[0]
    assert mid == pytest.approx(field.coeffs.mean(axis=(0, 1, 2)))


def test_probe_many_is_seeded(sphere, point_light):
    pts = np.array([[0.0, 0.0, 0.0], [0.3, 0.2, -0.1]])
    a = probe_many(sphere, pts, point_light, 8, 4, seed=7)
    b = probe_many(sphere, pts, point_light, 8, 4, seed=7)
    assert np.array_equal(a[1], b[1]) and np.allclose(np.linalg.norm(a[0], axis=-1), 1.0)
