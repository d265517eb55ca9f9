"""End-to-end CLI tests on a toy-scale dataset.

A module-scoped fixture drives the real command chain once (phantom-gen
through gem-train and infer); individual tests assert the contracts:
exit codes, run-directory contents, snapshot fidelity, access purity,
and byte-level reproducibility.
"""

import json
import os

import numpy as np
import pytest

from gemloc import cli, metrics
from gemloc.dataset import CaseStore

TINY = {
    "phantom": {"grid": 16, "parts": [2, 2, 1], "roi_out": 2, "graph_k": 2,
                "lesion_sigma": [1.2, 1.6, 2.0]},
    "ae": {"grid": 16, "width": 4, "epochs": 2, "batch": 4},
    "flow": {"width": 4, "time_dim": 4, "epochs": 2, "batch": 4,
             "unroll_steps": 3, "ode_steps": 8},
    "localizer": {"width": 2, "d_f": 8, "roi_out": 2, "epochs": 2, "batch": 4},
    "gem": {"epochs": 1, "batch": 4},
    "seeds": [1],
}


def run_cli(*args) -> int:
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    paths = {
        "root": root, "cfg": cfg, "data": root / "data",
        "ae": root / "ae", "fm": root / "fm",
        "loc": root / "loc", "gem": root / "gem", "pred": root / "pred",
    }
    assert run_cli("phantom-gen", "--out", paths["data"], "--n", 12, "--seed", 1,
                   "--config", cfg) == 0
    assert run_cli("train-ae", "--data", paths["data"], "--out", paths["ae"],
                   "--config", cfg, "--seed", 1) == 0
    assert run_cli("train-fm", "--data", paths["data"], "--out", paths["fm"],
                   "--config", cfg, "--seed", 1,
                   "--ae", paths["ae"] / "ae.ckpt") == 0
    assert run_cli("train-localizer", "--data", paths["data"], "--out", paths["loc"],
                   "--config", cfg, "--seed", 1, "--mode", "decoupled_crf",
                   "--ae", paths["ae"] / "ae.ckpt",
                   "--flow", paths["fm"] / "flow.ckpt") == 0
    assert run_cli("gem-train", "--data", paths["data"], "--out", paths["gem"],
                   "--config", cfg, "--seed", 1, "--mode", "full_gem",
                   "--ae", paths["ae"] / "ae.ckpt",
                   "--flow", paths["fm"] / "flow.ckpt",
                   "--loc", paths["loc"] / "loc.ckpt") == 0
    assert run_cli("infer", "--data", paths["data"], "--out", paths["pred"],
                   "--checkpoint", paths["gem"] / "pipeline.ckpt", "--t2-only") == 0
    return paths


def test_phantom_gen_split_sizes(env):
    manifest = json.load(open(env["data"] / "manifest.json"))
    sizes = {k: len(v) for k, v in manifest["splits"].items()}
    assert sizes == {"train": 8, "val": 2, "test": 2}


def test_run_dirs_are_self_describing(env):
    for stage in ("ae", "fm", "loc", "gem", "pred"):
        d = env[stage]
        assert (d / "config.json").exists(), stage
        run = json.load(open(d / "run.json"))
        assert run["version"]
    snap = json.load(open(env["gem"] / "config.json"))
    assert snap["gem"]["mode"] == "full_gem"
    assert snap["gem"]["epochs"] == 1  # flags and file both captured


def test_snapshot_reproduces_training(env, tmp_path):
    out = tmp_path / "ae_again"
    assert run_cli("train-ae", "--data", env["data"], "--out", out,
                   "--config", env["ae"] / "config.json", "--seed", 1) == 0
    for name in ("metrics.csv", "recon_metrics.csv"):
        assert (out / name).read_bytes() == (env["ae"] / name).read_bytes()
    assert (out / "ae.ckpt").read_bytes() == (env["ae"] / "ae.ckpt").read_bytes()


def test_unknown_config_key_exits_2(env, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"ae": {"widht": 4}}))
    assert run_cli("train-ae", "--data", env["data"], "--out", tmp_path / "x",
                   "--config", bad) == 2


def test_missing_checkpoint_exits_3(env, tmp_path):
    assert run_cli("gem-train", "--data", env["data"], "--out", tmp_path / "x",
                   "--config", env["cfg"], "--ae", env["ae"] / "ae.ckpt",
                   "--flow", tmp_path / "nope.ckpt",
                   "--loc", env["loc"] / "loc.ckpt") == 3
    assert run_cli("infer", "--data", env["data"], "--out", tmp_path / "y",
                   "--checkpoint", tmp_path / "nope.ckpt") == 3


def test_numerical_failure_exits_4(env, tmp_path):
    doc = dict(TINY)
    doc["flow"] = dict(TINY["flow"], divergence_bound=1e-9)
    bad = tmp_path / "diverge.json"
    bad.write_text(json.dumps(doc))
    assert run_cli("train-localizer", "--data", env["data"], "--out", tmp_path / "x",
                   "--config", bad, "--mode", "decoupled",
                   "--ae", env["ae"] / "ae.ckpt",
                   "--flow", env["fm"] / "flow.ckpt") == 4


def test_gem_train_refuses_partial_pretraining(env, tmp_path):
    # all three checkpoints are prerequisites, not just some
    rc = run_cli("gem-train", "--data", env["data"], "--out", tmp_path / "x",
                 "--config", env["cfg"], "--ae", env["ae"] / "ae.ckpt",
                 "--flow", env["fm"] / "flow.ckpt", "--loc", tmp_path / "missing.ckpt")
    assert rc == 3


def test_infer_is_t2_only(env):
    store = CaseStore(env["data"])
    run = json.load(open(env["pred"] / "run.json"))
    assert run["t2_only"] is True
    preds = metrics.read_predictions_csv(env["pred"] / "predictions.csv")
    assert sorted(preds) == sorted(store.case_ids("test"))
    for q in preds.values():
        assert q.shape == (len(store.template), 4)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-5)


def test_infer_rerun_is_byte_identical(env, tmp_path):
    out = tmp_path / "pred2"
    assert run_cli("infer", "--data", env["data"], "--out", out,
                   "--checkpoint", env["gem"] / "pipeline.ckpt", "--t2-only") == 0
    assert (out / "predictions.csv").read_bytes() == \
        (env["pred"] / "predictions.csv").read_bytes()


def test_fm_steps_flag_limits_optimizer_steps(env, tmp_path):
    out = tmp_path / "fm3"
    assert run_cli("train-fm", "--data", env["data"], "--out", out,
                   "--config", env["cfg"], "--seed", 1,
                   "--ae", env["ae"] / "ae.ckpt", "--steps", 3) == 0
    assert json.load(open(out / "run.json"))["steps"] == 3
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) - 1 == 2  # 2 steps in the first pass, 1 in the second


def test_evaluate_writes_report(env, tmp_path):
    out = tmp_path / "eval"
    assert run_cli("evaluate", "--data", env["data"], "--out", out,
                   "--pred", env["pred"] / "predictions.csv") == 0
    report = metrics.read_report_csv(out / "report.csv")
    assert ("zone", "grouped", "qwk") in report
    assert report[("zone", "grouped", "qwk")][2] == 1  # n_seeds
    text = (out / "report.csv").read_text()
    assert text.count("#") >= 2  # conventions documented in the footer


def test_evaluate_missing_predictions_exits_3(env, tmp_path):
    assert run_cli("evaluate", "--data", env["data"], "--out", tmp_path / "x",
                   "--pred", tmp_path / "nope.csv") == 3


def test_gem_train_non_joint_mode_is_pretrained_pipeline(env, tmp_path):
    # decoupled skips the feedback term and all joint epochs
    out = tmp_path / "gem_dec"
    assert run_cli("gem-train", "--data", env["data"], "--out", out,
                   "--config", env["cfg"], "--seed", 1, "--mode", "decoupled",
                   "--ae", env["ae"] / "ae.ckpt", "--flow", env["fm"] / "flow.ckpt",
                   "--loc", env["loc"] / "loc.ckpt") == 0
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 1  # header only: no joint epochs ran
    event = json.loads((out / "events.jsonl").read_text().splitlines()[0])
    assert "no joint epochs" in event["note"]


def test_oracle_mode_rejects_t2_only_and_reads_func(env, tmp_path):
    loc_dir = tmp_path / "loc_oracle"
    assert run_cli("train-localizer", "--data", env["data"], "--out", loc_dir,
                   "--config", env["cfg"], "--seed", 1, "--mode", "oracle_multimodal",
                   "--ae", env["ae"] / "ae.ckpt") == 0
    assert run_cli("infer", "--data", env["data"], "--out", tmp_path / "p1",
                   "--checkpoint", loc_dir / "pipeline.ckpt", "--t2-only") == 2
    assert run_cli("infer", "--data", env["data"], "--out", tmp_path / "p2",
                   "--checkpoint", loc_dir / "pipeline.ckpt") == 0
    assert json.load(open(tmp_path / "p2" / "run.json"))["t2_only"] is False


def test_ablate_rerun_reproduces_tables(env, tmp_path):
    outs = []
    for name in ("abl1", "abl2"):
        out = tmp_path / name
        assert run_cli("ablate", "--data", env["data"], "--out", out,
                       "--config", env["cfg"], "--seeds", "1") == 0
        assert (out / "ablation.csv").exists()
        for arm in ("zero_fill", "decoupled", "decoupled_crf", "full_gem"):
            assert (out / f"eval_{arm}" / "report.csv").exists()
        outs.append(out)
    a, b = outs
    assert (a / "ablation.csv").read_bytes() == (b / "ablation.csv").read_bytes()
    pred = os.path.join("seed_1", "pred_full_gem", "predictions.csv")
    assert (a / pred).read_bytes() == (b / pred).read_bytes()


def test_alpha_sweep_reuses_pretraining(env, tmp_path):
    abl = tmp_path / "abl"
    assert run_cli("ablate", "--data", env["data"], "--out", abl,
                   "--config", env["cfg"], "--seeds", "1") == 0
    sweep = tmp_path / "sweep"
    assert run_cli("alpha-sweep", "--data", env["data"], "--out", sweep,
                   "--config", env["cfg"], "--seeds", "1", "--alphas", "0.05,0.2",
                   "--pretrained", abl) == 0
    assert (sweep / "alpha_sweep.csv").exists()
    # reused pretraining: the sweep trains no autoencoder of its own
    assert not (sweep / "seed_1" / "ae").exists()
    assert (sweep / "seed_1" / "gem_alpha_0p05" / "pipeline.ckpt").exists()
    table = (sweep / "alpha_sweep.csv").read_text().splitlines()
    assert table[0].startswith("alpha,")
    alphas = {line.split(",")[0] for line in table[1:]}
    assert alphas == {"0.05", "0.2"}
