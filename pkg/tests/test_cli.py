import json

import numpy as np
import pytest

from neuralmedia.camera import Camera
from neuralmedia.cli import COMMANDS, main
from neuralmedia.fields import NetworkSet
from neuralmedia.hdrimage import read_pfm
from neuralmedia.lights import LightCondition
from neuralmedia.media import load_scene, save_scene
from neuralmedia.presets import get_preset

from conftest import sphere_scene


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if code == 0 else None)


def pfms(root):
    return {p.relative_to(root): read_pfm(p) for p in sorted(root.rglob("*.pfm"))}


@pytest.fixture(scope="module")
def scene_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("scene") / "scene.json"
    scene = sphere_scene()
    cam = Camera.look_at((0.0, -4.0, 1.0), (0.0, 0.0, 0.0), width=6, height=6)
    scene = type(scene)(scene.instances, lights={"key": LightCondition((3.0, -2.0, 2.0), 400.0)},
                        camera=cam)
    save_scene(scene, path)
    return path


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_every_subcommand_has_help(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "--seed" in text and "--threads" in text


def test_usage_errors(capsys, tmp_path):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["trace", "--scene", "x.json"]) == 1
    assert main(["train", "--out", str(tmp_path), "--threads", "0"]) == 1
    assert main(["train", "--out", str(tmp_path), "--preset", "nope"]) == 1
    assert "error" in capsys.readouterr().err


def test_data_errors(capsys, tmp_path):
    assert main(["render", "--ckpt", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == 2
    assert main(["eval", "--pred", str(tmp_path), "--data", str(tmp_path / "nowhere")]) == 2
    assert "data error" in capsys.readouterr().err


def test_numerical_abort(capsys, tmp_path, tiny_dataset):
    net = NetworkSet(get_preset("sphere-desk").network, seed=0)
    net.groups["F"][0].value[...] = np.nan
    net.save(tmp_path / "bad.ckpt")
    with pytest.warns(RuntimeWarning):
        code = main(["render", "--ckpt", str(tmp_path / "bad.ckpt"), "--data", str(tiny_dataset),
                     "--out", str(tmp_path / "r"), "--preset", "sphere-desk"])
    assert code == 3
    assert "numerical abort" in capsys.readouterr().err


def test_eval_identical_sets(capsys, tiny_dataset):
    code, out = run(capsys, "eval", "--pred", tiny_dataset, "--data", tiny_dataset)
    assert code == 0
    assert out["psnr"] == "inf" and out["ssim"] == pytest.approx(1.0) and out["count"] == 2


def test_trace_writes_layers(capsys, tmp_path, scene_file):
    code, out = run(capsys, "trace", "--scene", scene_file, "--out", tmp_path, "--spp", 4, "--decompose")
    assert code == 0 and out["mean"] > 0
    assert {p.name for p in tmp_path.iterdir()} >= {"trace.pfm", "trace_direct.pfm", "trace_indirect.pfm",
                                                      "trace.png"}


def test_edit_and_compose(capsys, tmp_path, scene_file):
    code, _ = run(capsys, "edit", "--scene", scene_file, "--out", tmp_path / "e.json",
                  "--edit", "density=2", "--edit", "albedo.r=0.5")
    assert code == 0
    fld = load_scene(tmp_path / "e.json").instances[0].field
    assert fld.sigma == pytest.approx(4.0) and fld.albedo[0] == pytest.approx(0.4)
    code, out = run(capsys, "compose", "--scene", scene_file, "--scene", tmp_path / "e.json",
                    "--offset", "0,0,0", "--offset", "2,0,0", "--out", tmp_path / "c.json")
    assert code == 0 and out["instances"] == 2
    assert main(["edit", "--scene", str(scene_file), "--out", str(tmp_path / "x.json"),
                 "--edit", "colour=3"]) == 1


def test_pipeline_independent_of_threads(capsys, tmp_path, tiny_dataset, scene_file):
    results = []
    for threads in (1, 3):
        root = tmp_path / f"t{threads}"
        common = ("--seed", 5, "--threads", threads)
        gen = run(capsys, "gen-data", "--scene", scene_file, "--out", root / "data", "--spp", 2,
                  "--counts", "2,1,1", *common)
        trace = run(capsys, "trace", "--scene", scene_file, "--out", root / "trace", "--spp", 8, *common)
        train = run(capsys, "train", "--data", tiny_dataset, "--out", root / "run", "--iters", 3, *common)
        render = run(capsys, "render", "--ckpt", root / "run" / "model.ckpt", "--data", tiny_dataset,
                     "--out", root / "pred", "--preset", "sphere-desk", "--decompose", *common)
        ev = run(capsys, "eval", "--pred", root / "pred", "--data", tiny_dataset, *common)
        extract = run(capsys, "extract", "--ckpt", root / "run" / "model.ckpt", "--res", 6,
                      "--out", root / "grid.json", *common)
        assert all(code == 0 for code, _ in (gen, trace, train, render, ev, extract))
        results.append((root, [gen[1], trace[1], train[1], render[1], ev[1], extract[1]]))
    (a, sa), (b, sb) = results
    strip = lambda d: {k: v for k, v in d.items() if k not in ("out", "files", "checkpoint")}  # noqa: E731
    assert [strip(x) for x in sa] == [strip(x) for x in sb]
    ia, ib = pfms(a), pfms(b)
    assert ia.keys() == ib.keys() and len(ia) > 10
    assert all(np.array_equal(ia[k], ib[k]) for k in ia)
    assert (a / "run" / "model.ckpt").read_bytes() == (b / "run" / "model.ckpt").read_bytes()
    assert (a / "grid.json").read_text() == (b / "grid.json").read_text()
