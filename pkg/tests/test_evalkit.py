import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from neuralmedia.errors import DataError, DomainError
from neuralmedia.evalkit import (ViewConfig, generate_dataset, load_dataset, psnr, relative_rms,
                                 sample_lights, ssim)
from neuralmedia.hdrimage import HdrImage, load_image, read_pfm, save_image, write_pfm
from neuralmedia.mathkit import luminance, tone_map
from neuralmedia.oracle import PathTracerConfig

from conftest import sphere_scene


def hdr(t):
    """Radiance whose tone-mapped value is t (t < 1)."""
    t = np.asarray(t, dtype=np.float64)
    return t / (1.0 - t)


def random_hdr(shape=(24, 20, 3), seed=0):
    return np.random.default_rng(seed).gamma(1.0, 1.0, shape).astype(np.float32)


# --- image IO ----------------------------------------------------------------

def test_pfm_roundtrip_bit_identical(tmp_path):
    img = random_hdr()
    write_pfm(tmp_path / "a.pfm", img)
    assert np.array_equal(read_pfm(tmp_path / "a.pfm"), img)
    assert (tmp_path / "a.pfm").read_bytes()[:3] == b"PF\n"


def test_pfm_big_endian_is_converted(tmp_path):
    img = random_hdr((3, 4, 3), 1)
    (tmp_path / "be.pfm").write_bytes(b"PF\n4 3\n1.0\n" + img[::-1].astype(">f4").tobytes())
    assert np.array_equal(read_pfm(tmp_path / "be.pfm"), img)


def test_pfm_greyscale(tmp_path):
    grey = np.arange(6, dtype="<f4").reshape(2, 3)
    (tmp_path / "g.pfm").write_bytes(b"Pf\n3 2\n-1.0\n" + grey[::-1].tobytes())
    out = read_pfm(tmp_path / "g.pfm")
    assert out.shape == (2, 3, 3) and np.array_equal(out[..., 2], grey)


def test_pfm_errors(tmp_path):
    img = random_hdr((4, 4, 3))
    write_pfm(tmp_path / "t.pfm", img)
    raw = (tmp_path / "t.pfm").read_bytes()
    (tmp_path / "t.pfm").write_bytes(raw[:-1])
    with pytest.raises(DataError):
        read_pfm(tmp_path / "t.pfm")
    (tmp_path / "h.pfm").write_bytes(b"P6\n4 4\n255\n" + bytes(48))
    with pytest.raises(DataError):
        read_pfm(tmp_path / "h.pfm")
    img[0, 0, 0] = np.nan
    with pytest.raises(DomainError):
        write_pfm(tmp_path / "n.pfm", img)


def test_layered_save_and_load(tmp_path):
    direct, indirect = random_hdr(seed=2), random_hdr(seed=3)
    img = HdrImage.from_layers(direct, indirect)
    written = save_image(tmp_path / "v", img, png=True, decompose=True)
    assert [p.name for p in written] == ["v.pfm", "v_direct.pfm", "v_indirect.pfm"]
    assert (tmp_path / "v.png").exists()
    back = load_image(tmp_path / "v")
    assert np.array_equal(back.direct, direct) and np.array_equal(back.rgb, img.rgb)


# --- metrics -----------------------------------------------------------------

def test_psnr_values():
    a = random_hdr()
    assert psnr(a, a) == math.inf
    assert psnr(hdr(np.full((8, 8, 3), 0.5)), hdr(np.full((8, 8, 3), 0.6))) == pytest.approx(20.0, abs=1e-9)
    check = (np.indices((8, 8)).sum(0) % 2).astype(float)[..., None].repeat(3, 2)
    white = np.where(check > 0, 1e30, 0.0)
    black = np.where(check > 0, 0.0, 1e30)
    assert psnr(white, black) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DomainError):
        psnr(a, a[:-1])


def test_psnr_symmetric_and_monotone():
    a, b = random_hdr(seed=4), random_hdr(seed=5)
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == ssim(b, a)
    noise = np.random.default_rng(6).normal(size=a.shape)
    base = tone_map(a.astype(np.float64))
    scores = [psnr(hdr(np.clip(base + s * noise, 0, 0.999)), a) for s in (0.01, 0.02, 0.05)]
    assert scores[0] > scores[1] > scores[2]


def test_ssim_matches_skimage():
    a, b = random_hdr(seed=7), random_hdr(seed=8) * 0.5 + random_hdr(seed=7) * 0.5
    x = luminance(tone_map(a.astype(np.float64)))
    y = luminance(tone_map(b.astype(np.float64)))
    ref = structural_similarity(x, y, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


def test_ssim_cases():
    a = random_hdr(seed=9)
    assert ssim(a, a) == pytest.approx(1.0)
    flat = hdr(np.full((16, 16, 3), 0.4))
    eps = np.random.default_rng(10).normal(0, 1e-4, flat.shape)
    assert ssim(flat, hdr(0.4 + eps)) > 0.99
    t = np.random.default_rng(11).uniform(0.05, 0.95, (32, 32, 1)).repeat(3, 2)
    assert ssim(hdr(t), hdr(1.0 - t)) < 0.2
    with pytest.raises(DomainError):
        ssim(a[:8, :8], a[:8, :8])


def test_relative_rms():
    a = random_hdr(seed=12)
    assert relative_rms(a, a) == 0.0
    assert relative_rms(hdr(np.full((4, 4, 3), 0.55)), hdr(np.full((4, 4, 3), 0.5))) == pytest.approx(0.1)


@settings(max_examples=25)
@given(st.floats(0.0, 1e4), st.floats(0.0, 1e4))
def test_psnr_non_negative_for_tone_mapped(x, y):
    assert psnr(np.full((2, 2, 3), x), np.full((2, 2, 3), y)) >= 0.0


# --- datasets -----------------------------------------------------------------

SMALL_VIEW = ViewConfig(width=8, height=8)
FAST = PathTracerConfig(spp=2)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(sphere_scene(), root, "env+point", (5, 2, 4), 3, FAST, SMALL_VIEW)
    return root


def test_dataset_layout_and_lights(dataset):
    ds = load_dataset(dataset)
    assert len(ds.records) == 11 and len(ds.split("test")) == 4
    assert (dataset / "images" / "train" / "0.pfm").exists()
    for r in ds.records:
        d = np.linalg.norm(r.light.pos)
        if r.split == "test":
            assert d == pytest.approx(4.0)
        else:
            assert 3.0 <= d <= 5.0
        assert 50.0 <= r.light.intensity <= 900.0
        assert r.image().shape == (8, 8, 3)
        eye = r.camera.origin
        assert np.linalg.norm(eye) == pytest.approx(4.0) and eye[2] > 0


def test_dataset_determinism(dataset, tmp_path):
    generate_dataset(sphere_scene(), tmp_path, "env+point", (5, 2, 4), 3, FAST, SMALL_VIEW)
    assert json.loads((tmp_path / "manifest.json").read_text()) == json.loads(
        (dataset / "manifest.json").read_text())
    for r in load_dataset(tmp_path).records:
        assert np.array_equal(r.image(), read_pfm(dataset / r.path.relative_to(tmp_path)))


def test_full_protocol_counts():
    lights = sample_lights(30, "test", "point", np.random.default_rng(0))
    assert all(not l.env for l in lights)
    mixed = sample_lights(200, "train", "env+point", np.random.default_rng(1))
    assert 60 < sum(l.env for l in mixed) < 140
    with pytest.raises(DomainError):
        sample_lights(3, "train", "sun", np.random.default_rng(0))


def test_dataset_validation(dataset, tmp_path):
    man = json.loads((dataset / "manifest.json").read_text())
    (tmp_path / "scene.json").write_text((dataset / "scene.json").read_text())
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nowhere")
    with pytest.raises(DomainError):
        generate_dataset(sphere_scene(), tmp_path / "x", "point", (0, 0, 0), 0, FAST, SMALL_VIEW)


def test_failed_generation_cleans_up(tmp_path, monkeypatch):
    import neuralmedia.evalkit as ek

    calls = []

    def boom(*args, **kw):
        calls.append(1)
        if len(calls) > 2:
            raise RuntimeError("oracle abort")
        return HdrImage(np.zeros((8, 8, 3)))

    monkeypatch.setattr(ek, "render_reference", boom)
    with pytest.raises(RuntimeError):
        generate_dataset(sphere_scene(), tmp_path, "point", (3, 1, 1), 0, FAST, SMALL_VIEW)
    assert not (tmp_path / "images").exists() and not (tmp_path / "manifest.json").exists()
