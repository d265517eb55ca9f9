import json

import numpy as np
import pytest

import oracles
from gemloc import diffcore as dc
from gemloc import flowgen as fg
from gemloc import gem
from gemloc import latentspace as ls
from gemloc import localizer as lz
from gemloc import nets
from gemloc.errors import ConfigError, MissingPrerequisiteError
from gemloc.geometry import build_template, knn_graph

GRID = 16


def make_setup(seed=0, crf=True):
    rng = np.random.default_rng(seed)
    ae_cfg = ls.AEConfig(grid=GRID, width=4)
    flow_cfg = fg.FlowConfig(width=4, time_dim=4, unroll_steps=3, sigma_aug=0.01)
    loc_cfg = lz.LocalizerConfig(width=2, d_f=8, roi_out=2, crf_enabled=crf)
    tpl = build_template((GRID,) * 3, (2, 2, 2, 14, 14, 14), parts=(2, 2, 1), roi_out=2)
    graph = knn_graph(tpl, 2)
    ae = nets.params_data(ls.init_ae_params(ae_cfg, rng))
    flow = nets.params_data(fg.init_flow_params(flow_cfg, rng))
    loc = nets.params_data(lz.init_localizer_params(loc_cfg, rng))
    return ae_cfg, flow_cfg, loc_cfg, tpl, graph, ae, flow, loc


def make_batch(seed, n=2, n_zones=4, latent=(3, 2, 2, 2)):
    rng = np.random.default_rng(seed)
    return {
        "z_o": rng.standard_normal((n,) + latent).astype(np.float32) * 0.5,
        "z_z": rng.standard_normal((n,) + latent).astype(np.float32) * 0.5,
        "x_o": rng.uniform(0, 1, (n, 1, GRID, GRID, GRID)).astype(np.float32),
        "labels": rng.integers(0, 4, (n, n_zones)),
        "weights": np.ones(4),
    }


def run_g_step(alpha, seed=5):
    _, flow_cfg, loc_cfg, tpl, graph, ae, flow, loc = make_setup()
    flow_t = nets.as_tensors(flow, requires_grad=True)
    ae_t = nets.as_tensors(ae, requires_grad=False)
    loc_t = nets.as_tensors(loc, requires_grad=False)
    opt = dc.Adam(flow_t, lr=1e-5)
    ema = fg.EMA.from_params(flow_t, 0.9)
    cfg = gem.GemConfig(alpha=alpha)
    out = gem.m_step_generator(flow_t, opt, ema, ae_t, loc_t, make_batch(seed),
                               tpl, graph, flow_cfg, loc_cfg, cfg, np.random.default_rng(seed))
    grads = {k: p.grad.copy() for k, p in flow_t.items()}
    return flow_t, grads, out, ema


# --- generator step -----------------------------------------------------------


def test_alpha_zero_matches_pure_flow_matching():
    _, flow_cfg, loc_cfg, tpl, graph, ae, flow, loc = make_setup()
    _, grads, out, _ = run_g_step(0.0, seed=5)

    flow_t = nets.as_tensors(flow, requires_grad=True)
    loss = fg.fm_loss(flow_t, make_batch(5)["z_o"], make_batch(5)["z_z"], flow_cfg, np.random.default_rng(5))
    loss.backward()
    assert out["emd"] == 0.0
    assert out["fm"] == float(loss.data)
    for k in grads:
        np.testing.assert_array_equal(grads[k], flow_t[k].grad)


def test_alpha_scales_objective_linearly():
    # with shared noise draws the gradient is affine in alpha
    _, g0, o0, _ = run_g_step(0.0)
    _, g1, o1, _ = run_g_step(0.1)
    _, g2, o2, _ = run_g_step(0.2)
    assert o0["fm"] == o1["fm"] == o2["fm"]
    assert o1["emd"] == o2["emd"] > 0.0
    lhs = np.concatenate([(g2[k] - g0[k]).ravel() for k in g0])
    rhs = np.concatenate([(g1[k] - g0[k]).ravel() for k in g0]) * 2.0
    denom = max(float(np.abs(lhs).max()), 1e-12)
    assert float(np.abs(lhs - rhs).max()) / denom < 1e-3


def test_generator_step_freezes_feedback_nets():
    _, flow_cfg, loc_cfg, tpl, graph, ae, flow, loc = make_setup()
    flow_t = nets.as_tensors(flow, requires_grad=True)
    ae_t = nets.as_tensors(ae, requires_grad=False)
    loc_t = nets.as_tensors(loc, requires_grad=False)
    ae_before = nets.params_data(ae_t)
    loc_before = nets.params_data(loc_t)
    flow_before = nets.params_data(flow_t)
    opt = dc.Adam(flow_t, lr=1e-3)
    ema = fg.EMA.from_params(flow_t, 0.5)
    gem.m_step_generator(flow_t, opt, ema, ae_t, loc_t, make_batch(7), tpl, graph,
                         flow_cfg, loc_cfg, gem.GemConfig(alpha=0.1), np.random.default_rng(7))
    for k, v in nets.params_data(ae_t).items():
        np.testing.assert_array_equal(v, ae_before[k])
    for k, v in nets.params_data(loc_t).items():
        np.testing.assert_array_equal(v, loc_before[k])
    moved = any(not np.array_equal(flow_t[k].data, flow_before[k]) for k in flow_t)
    assert moved, "generator parameters should move"


def test_generator_step_rejects_unfrozen_localizer():
    _, flow_cfg, loc_cfg, tpl, graph, ae, flow, loc = make_setup()
    flow_t = nets.as_tensors(flow, requires_grad=True)
    with pytest.raises(ConfigError):
        gem.m_step_generator(flow_t, dc.Adam(flow_t, lr=1e-5), fg.EMA.from_params(flow_t, 0.9),
                             nets.as_tensors(ae, requires_grad=False),
                             nets.as_tensors(loc, requires_grad=True),
                             make_batch(8), tpl, graph, flow_cfg, loc_cfg,
                             gem.GemConfig(), np.random.default_rng(8))


def test_generator_objective_gradcheck_subset():
    _, flow_cfg, loc_cfg, tpl, graph, ae, flow, loc = make_setup()
    batch = make_batch(9)
    probe = ["flow.out.b", "flow.in.b", "flow.t2.b"]

    def build(sub):
        params = {k: (sub[k] if k in sub else v.astype(np.float64)) for k, v in flow.items()}
        ae64 = {k: v.astype(np.float64) for k, v in ae.items()}
        loc64 = {k: v.astype(np.float64) for k, v in loc.items()}
        loss, _ = gem.generator_objective(params, ae64, loc64, batch, tpl, graph,
                                          flow_cfg, loc_cfg, 0.1, np.random.default_rng(9))
        return loss

    tensors = nets.as_tensors(flow, requires_grad=True)
    loss, _ = gem.generator_objective(tensors, nets.as_tensors(ae, False), nets.as_tensors(loc, False),
                                      batch, tpl, graph, flow_cfg, loc_cfg, 0.1, np.random.default_rng(9))
    loss.backward()

    def f(arrs):
        return float(build(arrs))

    want = oracles.finite_diff_grad(f, {k: flow[k].astype(np.float64) for k in probe})
    for k in probe:
        err = oracles.max_rel_err(tensors[k].grad, want[k])
        assert err < 2e-2, f"{k}: rel err {err}"


def test_ema_moves_with_generator_step():
    flow_t, _, _, ema = run_g_step(0.1)
    changed = any(not np.array_equal(ema.shadow[k], flow_t[k].data) for k in flow_t)
    assert changed  # decay 0.9 keeps shadow behind the live weights
    for k in flow_t:
        assert ema.shadow[k].shape == flow_t[k].data.shape


# --- localizer step -------------------------------------------------------------


def l_step_setup(mode, seed=11):
    _, flow_cfg, loc_cfg, tpl, graph, ae, flow, loc = make_setup(crf=gem.crf_for_mode(mode))
    loc_t = nets.as_tensors(loc, requires_grad=True)
    ae_t = nets.as_tensors(ae, requires_grad=False)
    ema = fg.EMA(0.9, flow)
    batch = {"x_o": make_batch(seed)["x_o"], "labels": make_batch(seed)["labels"], "weights": np.ones(4)}
    return flow_cfg, loc_cfg, tpl, graph, ae_t, ema, loc_t, batch


def test_localizer_step_trains_without_touching_generator():
    flow_cfg, loc_cfg, tpl, graph, ae_t, ema, loc_t, batch = l_step_setup("full_gem")
    shadow_before = ema.arrays()
    loc_before = nets.params_data(loc_t)
    opt = dc.Adam(loc_t, lr=1e-3)
    out = gem.m_step_localizer(loc_t, opt, ae_t, ema.as_tensors(), batch, tpl, graph,
                               flow_cfg, loc_cfg, gem.GemConfig(mode="full_gem"), np.random.default_rng(12))
    assert out["loss"] > 0
    for k, v in ema.arrays().items():
        np.testing.assert_array_equal(v, shadow_before[k])
    assert any(not np.array_equal(loc_t[k].data, loc_before[k]) for k in loc_t)


def test_localizer_step_zero_fill_sees_zero_channel():
    flow_cfg, loc_cfg, tpl, graph, ae_t, ema, loc_t, batch = l_step_setup("zero_fill")
    x_hat = gem.functional_volumes(ae_t, None, batch["x_o"], "zero_fill", flow_cfg)
    np.testing.assert_array_equal(x_hat, np.zeros_like(batch["x_o"]))
    opt = dc.Adam(loc_t, lr=1e-3)
    out = gem.m_step_localizer(loc_t, opt, ae_t, None, batch, tpl, graph,
                               flow_cfg, loc_cfg, gem.GemConfig(mode="zero_fill"), np.random.default_rng(13))
    assert np.isfinite(out["loss"])


# --- functional channel routing ---------------------------------------------------


def test_functional_volumes_modes():
    _, flow_cfg, _, _, _, ae, flow, _ = make_setup()
    ae_t = nets.as_tensors(ae, requires_grad=False)
    flow_t = nets.as_tensors(flow, requires_grad=False)
    x_o = make_batch(14)["x_o"]
    zeros = gem.functional_volumes(ae_t, flow_t, x_o, "zero_fill", flow_cfg)
    np.testing.assert_array_equal(zeros, 0.0)
    x_z = np.full_like(x_o, 0.25)
    real = gem.functional_volumes(ae_t, flow_t, x_o, "oracle_multimodal", flow_cfg, x_z=x_z)
    np.testing.assert_array_equal(real, x_z)
    with pytest.raises(ConfigError):
        gem.functional_volumes(ae_t, flow_t, x_o, "oracle_multimodal", flow_cfg)
    with pytest.raises(MissingPrerequisiteError):
        gem.functional_volumes(ae_t, None, x_o, "full_gem", flow_cfg)
    made = gem.functional_volumes(ae_t, flow_t, x_o, "decoupled", flow_cfg)
    assert made.shape == x_o.shape
    assert np.all(made >= 0.0) and np.all(made <= 1.0)
    assert np.any(made != 0.0)


def test_functional_volumes_deterministic_without_rng():
    _, flow_cfg, _, _, _, ae, flow, _ = make_setup()
    ae_t = nets.as_tensors(ae, requires_grad=False)
    flow_t = nets.as_tensors(flow, requires_grad=False)
    x_o = make_batch(15)["x_o"]
    a = gem.functional_volumes(ae_t, flow_t, x_o, "full_gem", flow_cfg)
    b = gem.functional_volumes(ae_t, flow_t, x_o, "full_gem", flow_cfg)
    np.testing.assert_array_equal(a, b)


def test_mode_helpers():
    assert not gem.crf_for_mode("zero_fill") and not gem.crf_for_mode("decoupled")
    assert gem.crf_for_mode("decoupled_crf") and gem.crf_for_mode("full_gem")
    assert gem.crf_for_mode("oracle_multimodal")
    assert gem.functional_source("zero_fill") == "zeros"
    assert gem.functional_source("oracle_multimodal") == "real"
    assert gem.functional_source("decoupled") == "generated"


def test_gem_config_validation():
    with pytest.raises(ConfigError):
        gem.GemConfig(alpha=-0.1)
    with pytest.raises(ConfigError):
        gem.GemConfig(mode="bogus")
    with pytest.raises(ConfigError):
        gem.GemConfig(epochs=0)


# --- trainer ------------------------------------------------------------------------


def make_data(seed=20, n=6, n2=6, n_zones=4):
    rng = np.random.default_rng(seed)
    latent = (3, 2, 2, 2)
    return gem.GemData(
        z_o=rng.standard_normal((n,) + latent) * 0.5,
        z_z=rng.standard_normal((n,) + latent) * 0.5,
        x_o=rng.uniform(0, 1, (n, 1, GRID, GRID, GRID)),
        labels=rng.integers(0, 4, (n, n_zones)),
        t2_x_o=rng.uniform(0, 1, (n2, 1, GRID, GRID, GRID)),
        t2_labels=rng.integers(0, 4, (n2, n_zones)),
        weights=np.ones(4),
    )


def make_trainer(seed=21):
    _, flow_cfg, loc_cfg, tpl, graph, ae, flow, loc = make_setup(seed)
    return gem.GemTrainer(ae, flow, dict(flow), loc, tpl, graph, flow_cfg, loc_cfg,
                          gem.GemConfig(batch=4, lr=1e-4), seed)


def test_epoch_schedule_generator_then_localizer():
    trainer = make_trainer()
    events = trainer.run_epoch(make_data())
    phases = [e["phase"] for e in events]
    assert phases == ["generator"] * 2 + ["localizer"] * 2  # ceil(6/4) each
    assert trainer.epoch == 1
    assert all(np.isfinite(e["loss"]) for e in events)


def test_gem_data_validation():
    with pytest.raises(ConfigError):
        gem.GemData(z_o=np.zeros((2, 3, 2, 2, 2)), z_z=np.zeros((3, 3, 2, 2, 2)),
                    x_o=np.zeros((2, 1, 4, 4, 4)), labels=np.zeros((2, 4), dtype=int),
                    t2_x_o=np.zeros((1, 1, 4, 4, 4)), t2_labels=np.zeros((1, 4), dtype=int),
                    weights=np.ones(4))


def test_resume_is_bit_exact(tmp_path):
    data = make_data()
    ref = make_trainer()
    ref.run_epoch(data)
    ref.run_epoch(data)

    half = make_trainer()
    half.run_epoch(data)
    path = tmp_path / "gem.ckpt"
    dc.save_checkpoint(path, half.state_arrays(), half.state_meta())

    resumed = make_trainer()
    arrays, meta = dc.load_checkpoint(path)
    resumed.load_state(arrays, meta)
    assert resumed.epoch == 1
    resumed.run_epoch(data)

    for k in ref.flow:
        np.testing.assert_array_equal(resumed.flow[k].data, ref.flow[k].data, err_msg=k)
    for k in ref.loc:
        np.testing.assert_array_equal(resumed.loc[k].data, ref.loc[k].data, err_msg=k)
    for k in ref.ema.shadow:
        np.testing.assert_array_equal(resumed.ema.shadow[k], ref.ema.shadow[k], err_msg=k)


def test_state_meta_survives_json():
    trainer = make_trainer()
    trainer.run_epoch(make_data())
    meta = trainer.state_meta()
    round_tripped = json.loads(json.dumps(meta))
    assert round_tripped["rng_state"]["state"]["state"] == meta["rng_state"]["state"]["state"]


def test_trainer_losses_fall_over_epochs():
    trainer = make_trainer(seed=33)
    data = make_data(seed=34)
    first = trainer.run_epoch(data)
    for _ in range(3):
        last = trainer.run_epoch(data)
    f0 = np.mean([e["loss"] for e in first if e["phase"] == "localizer"])
    f1 = np.mean([e["loss"] for e in last if e["phase"] == "localizer"])
    assert f1 < f0


def test_non_finite_step_is_skipped_and_logged():
    trainer = make_trainer(seed=40)
    data = make_data(seed=41)
    data.z_o[0] = 1e38  # overflows the first conv in f32
    events = trainer.run_epoch(data)
    g_events = [e for e in events if e["phase"] == "generator"]
    skipped = [e for e in g_events if e.get("skipped")]
    assert len(skipped) == 1 and "error" in skipped[0]
    assert all("loss" in e for e in g_events if not e.get("skipped"))
    assert all(not e.get("skipped") for e in events if e["phase"] == "localizer")
    assert trainer.epoch == 1
    for k, p in trainer.flow.items():
        assert np.isfinite(p.data).all(), k
    for k, v in trainer.ema.shadow.items():
        assert np.isfinite(v).all(), k
