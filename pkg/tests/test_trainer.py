import math
from dataclasses import replace

import numpy as np
import pytest

from neuralmedia import autodiff as ad
from neuralmedia.errors import DataError, DomainError, ResourceError
from neuralmedia.evalkit import load_dataset
from neuralmedia.fields import NetworkConfig, NetworkSet
from neuralmedia.lights import LightCondition
from neuralmedia.renderer import LightBatch, MarchConfig
from neuralmedia.trainer import (CHECKPOINT_NAME, LOCK_NAME, METRICS_NAME, RayBatch, RayTable, TrainConfig,
                                 compute_loss, config_from_json, config_to_json, render_loss, train,
                                 train_step, visibility_target)

SMALL = NetworkConfig(feature_width=16, feature_depth=2, prop_width=16, sh_width=16, sh_depth=2,
                      vis_width=16, vis_depth=2, pos_band=3)
FAST = TrainConfig(batch_rays=32, total_iters=4, vis_pairs=64, vis_steps=8, lr0=3e-3, lr1=1e-3,
                   march=MarchConfig(n_samples=8, k_dirs=8, env_dirs=4))
LIGHT = LightCondition((3.0, -2.0, 2.0), 400.0)


def one_ray(target, background=(0.0, 0.0, 0.0), o=(0.0, -3.0, 0.0), d=(0.0, 1.0, 0.0)):
    lights = LightBatch.uniform(LIGHT, 1, background=background)
    return RayBatch(np.array([o], float), np.array([d], float), np.array([target], float), lights,
                    np.array([0]))


def constant_sigma(net, sigma):
    w, b = net.groups["R"][-2], net.groups["R"][-1]
    w.value[:, 0] = 0.0
    b.value[0] = math.log(math.expm1(sigma))


@pytest.fixture(scope="module")
def table(tiny_dataset):
    ds = load_dataset(tiny_dataset)
    return RayTable(ds.split("train"), ds.scene.env, ds.scene.background)


# --- loss values ---------------------------------------------------------------

def test_render_loss_hand_value():
    assert render_loss([[1.0, 1.0, 1.0]], [[0.0, 0.0, 0.0]]) == pytest.approx(0.75)
    assert render_loss([[2.0, 0.5, 0.0]], [[2.0, 0.5, 0.0]]) == 0.0


def test_loss_against_background_ray():
    net = NetworkSet(SMALL)
    batch = one_ray([0.0, 0.0, 0.0], background=(1.0, 1.0, 1.0), o=(5.0, 5.0, 5.0))
    loss, terms = compute_loss(net, batch, replace(FAST, mu=0.0))
    assert float(loss.value) == pytest.approx(0.75) and terms["render"] == pytest.approx(0.75)


def test_visibility_term_hand_value():
    net = NetworkSet(SMALL)
    net.zero_density()
    for b in net.groups["V"]:
        b.value[...] = 0.0  # V = sigmoid(0) = 0.5 against a target of 1
    cfg = replace(FAST, mu=0.1, vis_pairs=1)
    loss, terms = compute_loss(net, one_ray([0.0, 0.0, 0.0]), cfg)
    assert terms["render"] == 0.0
    assert terms["visibility"] == pytest.approx(0.25)
    assert float(loss.value) == pytest.approx(0.025)


def test_visibility_target_cases():
    net = NetworkSet(SMALL)
    net.zero_density()
    assert visibility_target(net, [[0.0, 0, 0]], [[1.0, 0, 0]]) == pytest.approx([1.0])
    constant_sigma(net, 2.0)
    t = visibility_target(net, [[-0.5, 0, 0]], [[1.0, 0, 0]], 32, np.array([1.0]))
    assert t == pytest.approx([math.exp(-2.0)], rel=1e-4)
    # without a distance cap the march stops at the bounds
    t = visibility_target(net, [[0.0, 0, 0]], [[1.0, 0, 0]], 32)
    assert t == pytest.approx([math.exp(-2.0)], rel=1e-4)


def test_batch_validation():
    with pytest.raises(DataError):
        one_ray([np.nan, 0.0, 0.0])
    with pytest.raises(DomainError):
        TrainConfig(batch_rays=0)
    with pytest.raises(DomainError):
        TrainConfig(mu=-1.0)


# --- gradient stops ------------------------------------------------------------

def grads_for(terms, table):
    net = NetworkSet(SMALL, seed=2, dtype=np.float64)
    constant_sigma(net, 1.0)
    tape = ad.Tape()
    loss, _ = compute_loss(net, table.draw(16, 0, 0), FAST, tape, terms=terms)
    net.zero_grad()
    tape.backward(loss)
    return {k: [b.grad.copy() for b in g] for k, g in net.groups.items()}


def test_visibility_term_only_reaches_visibility_net(table):
    g = grads_for(("visibility",), table)
    for k in ("F", "R", "S"):
        assert all(np.all(x == 0) for x in g[k]), k
    assert any(np.any(x != 0) for x in g["V"])


def test_render_term_never_reaches_visibility_net(table):
    g = grads_for(("render",), table)
    assert all(np.all(x == 0) for x in g["V"])
    assert any(np.any(x != 0) for x in g["F"]) and any(np.any(x != 0) for x in g["S"])


def test_frozen_render_gives_pure_visibility_regression(table):
    both = grads_for(("render", "visibility"), table)
    vis = grads_for(("visibility",), table)
    for a, b in zip(both["V"], vis["V"]):
        assert np.array_equal(a, b)


# --- training loop -------------------------------------------------------------

def test_train_step_metrics(table):
    net = NetworkSet(SMALL, seed=3)
    state = ad.new_adam_state()
    m = train_step(net, table.draw(16, 0, 0), state, 0, FAST)
    assert set(m["grad_norm"]) == {"F", "R", "S", "V"} and m["lr"] == pytest.approx(3e-3)
    assert state.t == 1


def test_runs_are_deterministic(table):
    _, a = train(table, FAST, SMALL)
    _, b = train(table, FAST, SMALL)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall"} for r in rows]  # noqa: E731
    assert strip(a) == strip(b)


def test_draw_is_uniform_and_keyed(table):
    a = table.draw(4000, 1, 7)
    assert np.array_equal(a.ids, table.draw(4000, 1, 7).ids)
    assert not np.array_equal(a.ids, table.draw(4000, 1, 8).ids)
    counts = np.bincount(a.ids, minlength=len(table))
    assert counts.max() < 4000 / len(table) * 3


def test_loss_decreases_early(table):
    cfg = replace(FAST, total_iters=100, batch_rays=64)
    _, rows = train(table, cfg, SMALL)
    loss = np.array([r["render"] + cfg.mu * r["visibility"] for r in rows])
    assert loss[-20:].mean() < loss[:20].mean()


def test_mu_zero_leaves_visibility_untouched(table):
    net = NetworkSet(SMALL, seed=0)
    before = [b.value.copy() for b in net.groups["V"]]
    train(table, replace(FAST, mu=0.0), net=net)
    assert all(np.array_equal(a, b.value) for a, b in zip(before, net.groups["V"]))


def test_checkpoints_resume_and_log(table, tmp_path):
    cfg = replace(FAST, checkpoint_every=2, lr_total=4)
    full, _ = train(table, cfg, SMALL, tmp_path / "full")
    train(table, replace(cfg, total_iters=2), SMALL, tmp_path / "part")
    resumed, rows = train(table, cfg, SMALL, tmp_path / "part")
    assert [r["iteration"] for r in rows] == [2, 3]
    for a, b in zip(full.blocks, resumed.blocks):
        assert np.allclose(a.value, b.value, atol=1e-6)
    lines = (tmp_path / "part" / METRICS_NAME).read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 5
    _, _, it = NetworkSet.load(tmp_path / "part" / CHECKPOINT_NAME)
    assert it == 4 and not (tmp_path / "part" / LOCK_NAME).exists()


def test_lock_file_blocks_second_run(table, tmp_path):
    (tmp_path / LOCK_NAME).write_text("123")
    with pytest.raises(ResourceError):
        train(table, FAST, SMALL, tmp_path)


def test_config_json_roundtrip():
    assert config_from_json(config_to_json(FAST)) == FAST


def test_table_rejects_mismatched_image(tiny_dataset):
    ds = load_dataset(tiny_dataset)
    rec = ds.split("train")[0]
    bad = replace(rec, camera=replace(rec.camera, width=9))
    with pytest.raises(DataError):
        RayTable([bad])
    with pytest.raises(DataError):
        RayTable([])
