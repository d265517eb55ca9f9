"""Stage runners behind the CLI: pretraining, joint training, inference,
evaluation, and the multi-seed experiment drivers.

Every stage writes a self-describing run directory: config.json (the
effective configuration, reloadable as-is), run.json (command, seed, code
version, input paths), metrics.csv (one row per epoch), events.jsonl, and
checkpoints. Nothing here records wall-clock state, so rerunning a stage
with the same inputs reproduces every output byte for byte.

The experiment drivers (ablate, alpha-sweep) compose the public CLI:
each seed runs as a chain of subprocesses pinned to one BLAS thread.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

import gemloc
from gemloc import diffcore as dc
from gemloc import flowgen as fg
from gemloc import gem
from gemloc import latentspace as ls
from gemloc import localizer as lz
from gemloc import metrics
from gemloc import nets
from gemloc import phantom
from gemloc import runconfig
from gemloc.dataset import ANAT, FUNC, CaseStore
from gemloc.errors import (ConfigError, GemlocError, MissingPrerequisiteError,
                           NumericalError)

ARMS = ("zero_fill", "decoupled", "decoupled_crf", "full_gem")
ALPHA_GRID = (0.05, 0.1, 0.2, 0.5)

ENCODE_BATCH = 16
GEN_BATCH = 8


def _fmt(x) -> str:
    return format(float(x), ".10g")


def prepare_run_dir(out_dir, doc: dict, info: dict) -> str:
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    runconfig.write_snapshot(os.path.join(out_dir, "config.json"), doc)
    record = {"version": gemloc.__version__, **info}
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump(record, f, indent=1, sort_keys=True)
        f.write("\n")
    return out_dir


class EventLog:
    """Append-only JSON-lines log; entries must be json-serializable."""

    def __init__(self, path):
        self.f = open(path, "w")

    def write(self, **event):
        self.f.write(json.dumps(event, sort_keys=True) + "\n")
        self.f.flush()

    def close(self):
        self.f.close()


def write_metrics_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [_fmt(v) for v in row[1:]])


def load_ckpt(path, kind: str):
    if not os.path.exists(str(path)):
        raise MissingPrerequisiteError(f"missing {kind} checkpoint: {path}")
    arrays, meta = dc.load_checkpoint(path)
    got = meta.get("kind")
    if got != kind:
        raise ConfigError(f"{path} holds a {got!r} checkpoint, expected {kind!r}")
    return arrays, meta


def _subset(arrays: dict, prefix: str) -> dict:
    return {k: v for k, v in arrays.items() if k.startswith(prefix)}


def _stack_volumes(store: CaseStore, ids, modality: str, grid: int) -> np.ndarray:
    vols = []
    for cid in ids:
        v = store.load_volume(cid, modality)
        if v.dims != (grid, grid, grid):
            raise ConfigError(f"{cid}/{modality} has dims {v.dims}, config grid is {grid}")
        vols.append(v.data)
    return np.stack(vols)[:, None].astype(np.float32)


def _stack_labels(store: CaseStore, ids) -> np.ndarray:
    return np.array([store.zone_labels(cid) for cid in ids], dtype=np.int64)


def _encode_all(ae_arrays: dict, x: np.ndarray) -> np.ndarray:
    outs = []
    with dc.no_grad():
        for i in range(0, len(x), ENCODE_BATCH):
            z, _, _ = ls.encode(ae_arrays, x[i:i + ENCODE_BATCH])
            outs.append(z.data if isinstance(z, dc.Tensor) else z)
    return np.concatenate(outs).astype(np.float32)


def _functional_all(ae_arrays, flow_arrays, x_o, mode, flow_cfg, x_z=None) -> np.ndarray:
    """Deterministic functional channel for a whole case stack."""
    outs = []
    for i in range(0, len(x_o), GEN_BATCH):
        xz = None if x_z is None else x_z[i:i + GEN_BATCH]
        outs.append(gem.functional_volumes(ae_arrays, flow_arrays, x_o[i:i + GEN_BATCH],
                                           mode, flow_cfg, rng=None, x_z=xz))
    return np.concatenate(outs)


def _batches(rng, n: int, batch: int):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


# --- phantom generation -------------------------------------------------------


def run_phantom_gen(out_root, n: int, seed: int, cfg, doc: dict) -> dict:
    manifest = phantom.generate_dataset(n, seed, out_root, config=cfg.phantom)
    prepare_run_dir(out_root, doc, {"command": "phantom-gen", "n": n, "seed": seed})
    return manifest


# --- autoencoder pretraining --------------------------------------------------


def run_train_ae(data_root, out_dir, cfg, doc: dict, seed: int) -> dict:
    store = CaseStore(data_root)
    ae_cfg = cfg.ae
    train_ids = store.case_ids("train")
    val_ids = store.case_ids("val")
    # the latent space is shared, so both modalities feed the same model
    x = np.concatenate([_stack_volumes(store, train_ids, ANAT, ae_cfg.grid),
                        _stack_volumes(store, train_ids, FUNC, ae_cfg.grid)])
    x_val = np.concatenate([_stack_volumes(store, val_ids, ANAT, ae_cfg.grid),
                            _stack_volumes(store, val_ids, FUNC, ae_cfg.grid)])

    prepare_run_dir(out_dir, doc, {"command": "train-ae", "seed": seed,
                                   "n_train_volumes": len(x)})
    rng = np.random.default_rng([seed, 101])
    params = ls.init_ae_params(ae_cfg, rng)
    opt = dc.Adam(params, lr=ae_cfg.lr)
    log = EventLog(os.path.join(out_dir, "events.jsonl"))
    rows = []
    for epoch in range(ae_cfg.epochs):
        stats = []
        for idx in _batches(rng, len(x), ae_cfg.batch):
            out = ls.ae_train_step(params, opt, x[idx], ae_cfg, rng)
            stats.append((out["loss"], out["recon"], out["kl"]))
        arr = np.array(stats)
        with dc.no_grad():
            xh = np.concatenate([ls.reconstruct(params, x_val[i:i + ENCODE_BATCH])
                                 for i in range(0, len(x_val), ENCODE_BATCH)])
        val_mae = float(np.mean(np.abs(x_val - xh)))
        rows.append((epoch, arr[:, 0].mean(), arr[:, 1].mean(), arr[:, 2].mean(), val_mae))
        log.write(stage="train-ae", epoch=epoch, loss=float(arr[:, 0].mean()),
                  recon=float(arr[:, 1].mean()), kl=float(arr[:, 2].mean()), val_mae=val_mae)
    log.close()
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"),
                      ["epoch", "loss", "recon", "kl", "val_mae"], rows)

    arrays = nets.params_data(params)
    ckpt = os.path.join(out_dir, "ae.ckpt")
    dc.save_checkpoint(ckpt, arrays, {"kind": "ae", "seed": seed,
                                      "epochs": ae_cfg.epochs, "config": doc})
    write_recon_csv(os.path.join(out_dir, "recon_metrics.csv"), store, arrays, cfg)
    return {"ckpt": ckpt}


def write_recon_csv(path, store: CaseStore, ae_arrays: dict, cfg):
    """Per-case reconstruction metrics on the eval split, both modalities."""
    ids = store.case_ids(cfg.eval.split)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case_id", "mae", "mse", "psnr"])
        for cid in ids:
            for mod in (ANAT, FUNC):
                x = store.load_volume(cid, mod).data[None, None]
                xh = ls.reconstruct(ae_arrays, x)
                m = ls.recon_metrics(x, xh)
                w.writerow([f"{cid}/{mod}", _fmt(m["mae"]), _fmt(m["mse"]), _fmt(m["psnr"])])


# --- flow-matching pretraining ------------------------------------------------


def resolved_flow_cfg(cfg_flow, z_o_train=None, sigma_aug=None):
    """sigma_aug = 0 in config means: measure 0.1 * std of the training latents."""
    if sigma_aug is None:
        if cfg_flow.sigma_aug > 0:
            sigma_aug = cfg_flow.sigma_aug
        else:
            if z_o_train is None:
                raise ConfigError("cannot measure sigma_aug without training latents")
            sigma_aug = 0.1 * float(np.std(z_o_train))
    return dataclasses.replace(cfg_flow, sigma_aug=sigma_aug)


def run_train_fm(data_root, out_dir, cfg, doc: dict, seed: int, ae_ckpt,
                 steps=None) -> dict:
    store = CaseStore(data_root)
    ae_arrays, _ = load_ckpt(ae_ckpt, "ae")
    grid = cfg.ae.grid
    train_ids = store.case_ids("train")
    val_ids = store.case_ids("val")
    z_o = _encode_all(ae_arrays, _stack_volumes(store, train_ids, ANAT, grid))
    z_z = _encode_all(ae_arrays, _stack_volumes(store, train_ids, FUNC, grid))
    zv_o = _encode_all(ae_arrays, _stack_volumes(store, val_ids, ANAT, grid))
    zv_z = _encode_all(ae_arrays, _stack_volumes(store, val_ids, FUNC, grid))
    flow_cfg = resolved_flow_cfg(cfg.flow, z_o_train=z_o)

    per_epoch = -(-len(z_o) // flow_cfg.batch)
    total = flow_cfg.epochs * per_epoch if steps is None else int(steps)
    if total < 1:
        raise ConfigError(f"need at least 1 training step, got {total}")
    prepare_run_dir(out_dir, doc, {"command": "train-fm", "seed": seed,
                                   "ae_ckpt": str(ae_ckpt), "steps": total,
                                   "sigma_aug": flow_cfg.sigma_aug})
    rng = np.random.default_rng([seed, 202])
    params = fg.init_flow_params(flow_cfg, rng)
    opt = dc.Adam(params, lr=flow_cfg.lr)
    ema = fg.EMA.from_params(params, flow_cfg.ema_decay)
    log = EventLog(os.path.join(out_dir, "events.jsonl"))
    rows = []
    step, epoch = 0, 0
    while step < total:
        losses = []
        for idx in _batches(rng, len(z_o), flow_cfg.batch):
            if step >= total:
                break
            loss = fg.fm_loss(params, z_o[idx], z_z[idx], flow_cfg, rng)
            for p in params.values():
                p.zero_grad()
            loss.backward()
            opt.step()
            ema.update(params)
            losses.append(float(loss.data))
            step += 1
        with dc.no_grad():
            val = fg.fm_loss(params, zv_o, zv_z, flow_cfg, np.random.default_rng([7, epoch]))
        val = float(val.data if isinstance(val, dc.Tensor) else val)
        rows.append((epoch, float(np.mean(losses)), val))
        log.write(stage="train-fm", epoch=epoch, fm=float(np.mean(losses)), val_fm=val)
        epoch += 1
    log.close()
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), ["epoch", "fm", "val_fm"], rows)

    arrays = nets.params_data(params)
    arrays.update({f"ema.{k}": v for k, v in ema.arrays().items()})
    ckpt = os.path.join(out_dir, "flow.ckpt")
    dc.save_checkpoint(ckpt, arrays, {"kind": "flow", "seed": seed,
                                      "sigma_aug": flow_cfg.sigma_aug,
                                      "epochs": flow_cfg.epochs, "config": doc})
    write_generation_csv(os.path.join(out_dir, "gen_metrics.csv"), store, ae_arrays,
                         ema.arrays(), flow_cfg, cfg)
    return {"ckpt": ckpt, "sigma_aug": flow_cfg.sigma_aug}


def write_generation_csv(path, store: CaseStore, ae_arrays, flow_arrays, flow_cfg, cfg):
    """Per-case quality of the synthesized functional volume on the eval split.

    mae_obs is the distance from the observed anatomical volume itself, the
    no-generator baseline the synthesis has to beat.
    """
    ids = store.case_ids(cfg.eval.split)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case_id", "mae_gen", "mse_gen", "psnr_gen", "mae_obs"])
        for cid in ids:
            x_o = store.load_volume(cid, ANAT).data[None, None].astype(np.float32)
            x_z = store.load_volume(cid, FUNC).data[None, None].astype(np.float32)
            xh = gem.functional_volumes(ae_arrays, flow_arrays, x_o, "decoupled", flow_cfg)
            m = ls.recon_metrics(x_z, xh)
            mae_obs = float(np.mean(np.abs(x_o.astype(np.float64) - x_z)))
            w.writerow([cid, _fmt(m["mae"]), _fmt(m["mse"]), _fmt(m["psnr"]), _fmt(mae_obs)])


# --- localizer pretraining ----------------------------------------------------


def resolved_loc_cfg(cfg_loc, mode: str):
    return dataclasses.replace(cfg_loc, crf_enabled=gem.crf_for_mode(mode))


def run_train_localizer(data_root, out_dir, cfg, doc: dict, seed: int, mode: str,
                        ae_ckpt, flow_ckpt=None) -> dict:
    if mode not in gem.MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    ae_arrays, _ = load_ckpt(ae_ckpt, "ae")
    flow_arrays, flow_meta = (None, None)
    flow_cfg = cfg.flow
    if gem.functional_source(mode) == "generated":
        if flow_ckpt is None:
            raise MissingPrerequisiteError(f"mode {mode!r} needs a flow checkpoint")
        all_arrays, flow_meta = load_ckpt(flow_ckpt, "flow")
        flow_arrays = {k[len("ema."):]: v for k, v in all_arrays.items() if k.startswith("ema.")}
        flow_cfg = resolved_flow_cfg(cfg.flow, sigma_aug=flow_meta["sigma_aug"])
    loc_cfg = resolved_loc_cfg(cfg.localizer, mode)

    # non-oracle arms must train T2-only: the access guard enforces it
    allowed = (ANAT, FUNC) if mode == "oracle_multimodal" else (ANAT,)
    store = CaseStore(data_root, allowed_modalities=allowed)
    grid = cfg.ae.grid
    train_ids = store.case_ids("train")
    val_ids = store.case_ids("val")
    x_o = _stack_volumes(store, train_ids, ANAT, grid)
    labels = _stack_labels(store, train_ids)
    xv_o = _stack_volumes(store, val_ids, ANAT, grid)
    v_labels = _stack_labels(store, val_ids)
    weights = lz.class_weights(labels.ravel(), loc_cfg.n_groups)

    real = mode == "oracle_multimodal"
    x_f = _functional_all(ae_arrays, flow_arrays, x_o, mode, flow_cfg,
                          x_z=_stack_volumes(store, train_ids, FUNC, grid) if real else None)
    xv_f = _functional_all(ae_arrays, flow_arrays, xv_o, mode, flow_cfg,
                           x_z=_stack_volumes(store, val_ids, FUNC, grid) if real else None)

    prepare_run_dir(out_dir, doc, {"command": "train-localizer", "seed": seed,
                                   "mode": mode, "ae_ckpt": str(ae_ckpt),
                                   "flow_ckpt": None if flow_ckpt is None else str(flow_ckpt)})
    rng = np.random.default_rng([seed, 303])
    params = lz.init_localizer_params(loc_cfg, rng)
    opt = dc.Adam(params, lr=loc_cfg.lr)
    tpl, graph = store.template, store.graph
    log = EventLog(os.path.join(out_dir, "events.jsonl"))
    rows = []
    for epoch in range(loc_cfg.epochs):
        losses = []
        for idx in _batches(rng, len(x_o), loc_cfg.batch):
            batch = {"x_o": x_o[idx], "labels": labels[idx], "weights": weights}
            loss = gem.localizer_objective(params, batch, x_f[idx], tpl, graph, loc_cfg)
            for p in params.values():
                p.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        val = _val_emd(params, xv_o, xv_f, v_labels, weights, tpl, graph, loc_cfg)
        rows.append((epoch, float(np.mean(losses)), val))
        log.write(stage="train-localizer", mode=mode, epoch=epoch,
                  emd=float(np.mean(losses)), val_emd=val)
    log.close()
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), ["epoch", "emd", "val_emd"], rows)

    arrays = nets.params_data(params)
    ckpt = os.path.join(out_dir, "loc.ckpt")
    dc.save_checkpoint(ckpt, arrays, {"kind": "loc", "seed": seed, "mode": mode,
                                      "crf_enabled": loc_cfg.crf_enabled, "config": doc})
    pipeline_path = os.path.join(out_dir, "pipeline.ckpt")
    write_pipeline_ckpt(pipeline_path, ae_arrays, flow_arrays, arrays, mode, doc, seed,
                        sigma_aug=None if flow_meta is None else flow_meta["sigma_aug"])
    return {"ckpt": ckpt, "pipeline": pipeline_path}


def _val_emd(params, x_o, x_f, labels, weights, tpl, graph, loc_cfg) -> float:
    with dc.no_grad():
        total, n = 0.0, 0
        for i in range(0, len(x_o), GEN_BATCH):
            batch = {"x_o": x_o[i:i + GEN_BATCH], "labels": labels[i:i + GEN_BATCH],
                     "weights": weights}
            loss = gem.localizer_objective(params, batch, x_f[i:i + GEN_BATCH],
                                           tpl, graph, loc_cfg)
            k = len(batch["labels"])
            total += float(loss.data if isinstance(loss, dc.Tensor) else loss) * k
            n += k
    return total / n


# --- the inference bundle -----------------------------------------------------


def write_pipeline_ckpt(path, ae_arrays, flow_arrays, loc_arrays, mode, doc, seed,
                        sigma_aug=None):
    """Single checkpoint carrying everything `infer` needs.

    Flow weights are the EMA shadow, stored under their natural names; the
    zero-fill arm carries no generator at all.
    """
    arrays = dict(ae_arrays)
    if flow_arrays is not None:
        arrays.update(flow_arrays)
    arrays.update(loc_arrays)
    meta = {"kind": "pipeline", "mode": mode, "seed": seed, "config": doc,
            "has_flow": flow_arrays is not None, "sigma_aug": sigma_aug}
    dc.save_checkpoint(path, arrays, meta)


# --- joint GEM training -------------------------------------------------------


def run_gem_train(data_root, out_dir, cfg, doc: dict, seed: int,
                  ae_ckpt, flow_ckpt, loc_ckpt) -> dict:
    missing = [str(p) for p, k in ((ae_ckpt, "ae"), (flow_ckpt, "flow"), (loc_ckpt, "loc"))
               if not os.path.exists(str(p))]
    if missing:
        raise MissingPrerequisiteError(
            "gem-train needs all three pretrained checkpoints; missing: " + ", ".join(missing))
    ae_arrays, _ = load_ckpt(ae_ckpt, "ae")
    flow_all, flow_meta = load_ckpt(flow_ckpt, "flow")
    loc_arrays, _ = load_ckpt(loc_ckpt, "loc")
    flow_arrays = {k: v for k, v in flow_all.items() if not k.startswith("ema.")}
    ema_arrays = {k[len("ema."):]: v for k, v in flow_all.items() if k.startswith("ema.")}
    flow_cfg = resolved_flow_cfg(cfg.flow, sigma_aug=flow_meta["sigma_aug"])
    gem_cfg = cfg.gem
    mode = gem_cfg.mode
    loc_cfg = resolved_loc_cfg(cfg.localizer, mode)

    prepare_run_dir(out_dir, doc, {"command": "gem-train", "seed": seed, "mode": mode,
                                   "ae_ckpt": str(ae_ckpt), "flow_ckpt": str(flow_ckpt),
                                   "loc_ckpt": str(loc_ckpt)})
    log = EventLog(os.path.join(out_dir, "events.jsonl"))
    pipeline_path = os.path.join(out_dir, "pipeline.ckpt")

    joint = mode in ("full_gem", "oracle_multimodal")
    if not joint:
        # these arms are defined as the pretrained pipeline with no joint epochs
        log.write(stage="gem-train", mode=mode, note="no joint epochs for this mode")
        log.close()
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"),
                          ["epoch", "g_fm", "g_emd", "g_loss", "l_emd", "val_emd", "skipped"], [])
        fl = None if mode == "zero_fill" else ema_arrays
        write_pipeline_ckpt(pipeline_path, ae_arrays, fl, loc_arrays, mode, doc, seed,
                            sigma_aug=flow_meta["sigma_aug"])
        return {"pipeline": pipeline_path}

    store = CaseStore(data_root)
    grid = cfg.ae.grid
    train_ids = store.case_ids("train")
    t2_ids = store.manifest.get("train_t2only", train_ids)
    val_ids = store.case_ids("val")
    x_o = _stack_volumes(store, train_ids, ANAT, grid)
    x_z = _stack_volumes(store, train_ids, FUNC, grid)
    labels = _stack_labels(store, train_ids)
    same_stream = list(t2_ids) == list(train_ids)
    t2_x_o = x_o if same_stream else _stack_volumes(store, t2_ids, ANAT, grid)
    t2_labels = labels if same_stream else _stack_labels(store, t2_ids)
    weights = lz.class_weights(labels.ravel(), loc_cfg.n_groups)
    data = gem.GemData(
        z_o=_encode_all(ae_arrays, x_o), z_z=_encode_all(ae_arrays, x_z),
        x_o=x_o, labels=labels, t2_x_o=t2_x_o, t2_labels=t2_labels, weights=weights,
        t2_x_z=(x_z if same_stream else _stack_volumes(store, t2_ids, FUNC, grid))
        if mode == "oracle_multimodal" else None)
    xv_o = _stack_volumes(store, val_ids, ANAT, grid)
    v_labels = _stack_labels(store, val_ids)
    xv_z = _stack_volumes(store, val_ids, FUNC, grid) if mode == "oracle_multimodal" else None

    trainer = gem.GemTrainer(ae_arrays, flow_arrays, ema_arrays, loc_arrays,
                             store.template, store.graph, flow_cfg, loc_cfg, gem_cfg, seed)
    rows = []
    for epoch in range(gem_cfg.epochs):
        events = trainer.run_epoch(data)
        for e in events:
            log.write(stage="gem-train", **e)
        g = [e for e in events if e["phase"] == "generator" and not e.get("skipped")]
        l = [e for e in events if e["phase"] == "localizer" and not e.get("skipped")]
        skipped = sum(1 for e in events if e.get("skipped"))
        xv_f = _functional_all(ae_arrays, trainer.ema.arrays(), xv_o, mode, flow_cfg, x_z=xv_z)
        val = _val_emd(trainer.loc, xv_o, xv_f, v_labels, weights,
                       store.template, store.graph, loc_cfg)
        rows.append((epoch,
                     float(np.mean([e["fm"] for e in g])) if g else float("nan"),
                     float(np.mean([e["emd"] for e in g])) if g else float("nan"),
                     float(np.mean([e["loss"] for e in g])) if g else float("nan"),
                     float(np.mean([e["loss"] for e in l])) if l else float("nan"),
                     val, skipped))
        dc.save_checkpoint(os.path.join(out_dir, "gem_last.ckpt"),
                           trainer.state_arrays(),
                           {"kind": "gem-state", "config": doc, **trainer.state_meta()})
    log.close()
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"),
                      ["epoch", "g_fm", "g_emd", "g_loss", "l_emd", "val_emd", "skipped"], rows)

    dc.save_checkpoint(os.path.join(out_dir, "gem.ckpt"), trainer.state_arrays(),
                       {"kind": "gem-state", "config": doc, **trainer.state_meta()})
    write_pipeline_ckpt(pipeline_path, ae_arrays, trainer.ema.arrays(),
                        nets.params_data(trainer.loc), mode, doc, seed,
                        sigma_aug=flow_meta["sigma_aug"])
    return {"pipeline": pipeline_path, "ckpt": os.path.join(out_dir, "gem.ckpt")}


# --- inference ----------------------------------------------------------------


def run_infer(data_root, out_dir, ckpt_path, split=None, t2_only=None) -> dict:
    arrays, meta = load_ckpt(ckpt_path, "pipeline")
    mode = meta["mode"]
    cfg = runconfig.from_doc(meta["config"])
    if split is None:
        split = cfg.eval.split
    if t2_only is None:
        t2_only = mode != "oracle_multimodal"
    if t2_only and mode == "oracle_multimodal":
        raise ConfigError("oracle_multimodal reads measured functional volumes; "
                          "it cannot run T2-only")
    flow_cfg = resolved_flow_cfg(cfg.flow, sigma_aug=meta.get("sigma_aug") or 0.0)
    loc_cfg = resolved_loc_cfg(cfg.localizer, mode)
    ae_arrays = _subset(arrays, "ae.")
    loc_arrays = _subset(arrays, "loc.")
    flow_arrays = _subset(arrays, "flow.") if meta.get("has_flow") else None

    allowed = (ANAT,) if t2_only else (ANAT, FUNC)
    store = CaseStore(data_root, allowed_modalities=allowed)
    prepare_run_dir(out_dir, meta["config"],
                    {"command": "infer", "checkpoint": str(ckpt_path), "mode": mode,
                     "split": split, "t2_only": bool(t2_only)})
    ids = store.case_ids(split)
    grid = cfg.ae.grid
    preds = {}
    for i in range(0, len(ids), GEN_BATCH):
        chunk = ids[i:i + GEN_BATCH]
        x_o = _stack_volumes(store, chunk, ANAT, grid)
        x_z = None if t2_only or mode != "oracle_multimodal" else \
            _stack_volumes(store, chunk, FUNC, grid)
        x_f = gem.functional_volumes(ae_arrays, flow_arrays, x_o, mode, flow_cfg, x_z=x_z)
        vols = np.concatenate([x_o, x_f], axis=1)
        q = lz.localize(loc_arrays, vols, store.template, store.graph, loc_cfg)
        for j, cid in enumerate(chunk):
            preds[cid] = q[j]
    func_reads = sum(1 for _, m in store.access_log if m == FUNC)
    if t2_only and func_reads:
        raise NumericalError("functional volume read during a T2-only run")
    path = os.path.join(out_dir, "predictions.csv")
    metrics.write_predictions_csv(path, preds)
    return {"predictions": path, "n_cases": len(ids), "func_reads": func_reads}


# --- evaluation ---------------------------------------------------------------


def run_evaluate(data_root, out_dir, pred_paths, doc: dict) -> list:
    if not pred_paths:
        raise ConfigError("evaluate needs at least one predictions CSV")
    for p in pred_paths:
        if not os.path.exists(str(p)):
            raise MissingPrerequisiteError(f"missing predictions CSV: {p}")
    # labels only; volume reads are forbidden entirely here
    store = CaseStore(data_root, allowed_modalities=())
    rows_per_seed = []
    for p in pred_paths:
        preds = metrics.read_predictions_csv(p)
        labels = {cid: store.zone_labels(cid) for cid in preds}
        rows_per_seed.append(metrics.evaluate(preds, labels, store.template))
    prepare_run_dir(out_dir, doc, {"command": "evaluate",
                                   "predictions": [str(p) for p in pred_paths]})
    metrics.write_report_csv(os.path.join(out_dir, "report.csv"), rows_per_seed)
    return rows_per_seed


# --- multi-seed experiment drivers --------------------------------------------


def _child_env() -> dict:
    env = dict(os.environ)
    for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        env[k] = "1"
    return env


_EXIT_ERRORS = {2: ConfigError, 3: MissingPrerequisiteError, 4: NumericalError}


def _run_chain(commands, env):
    """Run (argv, done_path) pairs in order, skipping completed steps."""
    for argv, done in commands:
        if done is not None and os.path.exists(done):
            continue
        proc = subprocess.run(argv, env=env, stdout=subprocess.PIPE,
                              stderr=subprocess.PIPE, text=True)
        if proc.returncode != 0:
            err = _EXIT_ERRORS.get(proc.returncode, GemlocError)
            tail = "\n".join(proc.stderr.strip().splitlines()[-8:])
            raise err(f"subcommand failed ({proc.returncode}): {' '.join(map(str, argv))}\n{tail}")


def _cli(*args) -> list:
    return [sys.executable, "-m", "gemloc.cli"] + [str(a) for a in args]


def pretrain_commands(data_root, seed_dir, config_path, seed: int, arms) -> list:
    """The shared pretraining chain plus per-arm localizers for one seed."""
    ae = os.path.join(seed_dir, "ae")
    fm = os.path.join(seed_dir, "fm")
    cmds = [
        (_cli("train-ae", "--data", data_root, "--out", ae, "--config", config_path,
              "--seed", seed), os.path.join(ae, "ae.ckpt")),
        (_cli("train-fm", "--data", data_root, "--out", fm, "--config", config_path,
              "--seed", seed, "--ae", os.path.join(ae, "ae.ckpt")),
         os.path.join(fm, "flow.ckpt")),
    ]
    loc_arms = sorted({a if a in ("zero_fill", "decoupled") else "decoupled_crf"
                       for a in arms} | ({"oracle_multimodal"} if "oracle_multimodal" in arms else set()),
                      key=lambda a: gem.MODES.index(a))
    for arm in loc_arms:
        out = os.path.join(seed_dir, f"loc_{arm}")
        argv = _cli("train-localizer", "--data", data_root, "--out", out,
                    "--config", config_path, "--seed", seed, "--mode", arm,
                    "--ae", os.path.join(ae, "ae.ckpt"))
        if arm != "zero_fill":
            argv += ["--flow", os.path.join(fm, "flow.ckpt")]
        cmds.append((argv, os.path.join(out, "pipeline.ckpt")))
    return cmds


def loc_dir_for_arm(seed_dir, arm: str) -> str:
    pre = arm if arm in ("zero_fill", "decoupled", "oracle_multimodal") else "decoupled_crf"
    return os.path.join(seed_dir, f"loc_{pre}")


def arm_commands(data_root, pretrain_dir, work_dir, config_path, seed: int, arm: str,
                 alpha=None, tag=None) -> list:
    """GEM (if the arm trains jointly) plus inference for one arm.

    Pretrained checkpoints are read from pretrain_dir; everything new goes
    under work_dir, so reusing another experiment's pretraining never
    writes into it.
    """
    tag = tag or arm
    ae = os.path.join(pretrain_dir, "ae", "ae.ckpt")
    fm = os.path.join(pretrain_dir, "fm", "flow.ckpt")
    loc = os.path.join(loc_dir_for_arm(pretrain_dir, arm), "loc.ckpt")
    cmds = []
    if arm in ("full_gem", "oracle_multimodal"):
        gdir = os.path.join(work_dir, f"gem_{tag}")
        argv = _cli("gem-train", "--data", data_root, "--out", gdir,
                    "--config", config_path, "--seed", seed, "--mode", arm,
                    "--ae", ae, "--flow", fm, "--loc", loc)
        if alpha is not None:
            argv += ["--alpha", format(alpha, "g")]
        cmds.append((argv, os.path.join(gdir, "pipeline.ckpt")))
        ckpt = os.path.join(gdir, "pipeline.ckpt")
    else:
        ckpt = os.path.join(loc_dir_for_arm(pretrain_dir, arm), "pipeline.ckpt")
    pdir = os.path.join(work_dir, f"pred_{tag}")
    infer = _cli("infer", "--data", data_root, "--out", pdir, "--checkpoint", ckpt)
    if arm != "oracle_multimodal":
        infer.append("--t2-only")
    cmds.append((infer, os.path.join(pdir, "predictions.csv")))
    return cmds


def aggregate_comparison(path, keyed_rows: dict, key_name: str):
    """Cross-arm table: one row per (key, level, definition, metric)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([key_name, "level", "definition", "metric", "mean", "std", "n_seeds"])
        for key, rows_per_seed in keyed_rows.items():
            per_seed = [metrics.rows_to_dict(r) for r in rows_per_seed]
            for lv, d, m, _ in rows_per_seed[0]:
                vals = np.array([ps[(lv, d, m)] for ps in per_seed], dtype=np.float64)
                std = float(vals.std(ddof=0)) if len(vals) > 1 else 0.0
                w.writerow([key, lv, d, m, _fmt(vals.mean()), _fmt(std), len(vals)])


def run_ablate(data_root, out_root, cfg, doc: dict, arms=ARMS, jobs=None) -> dict:
    out_root = prepare_run_dir(out_root, doc, {"command": "ablate", "arms": list(arms),
                                               "seeds": list(cfg.seeds)})
    config_path = os.path.join(out_root, "config.json")
    env = _child_env()
    seed_chains = []
    for seed in cfg.seeds:
        sdir = os.path.join(out_root, f"seed_{seed}")
        chain = pretrain_commands(data_root, sdir, config_path, seed, arms)
        for arm in arms:
            chain.extend(arm_commands(data_root, sdir, sdir, config_path, seed, arm))
        seed_chains.append(chain)

    jobs = jobs or min(len(cfg.seeds), os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_chain, chain, env) for chain in seed_chains]
        for f in futures:
            f.result()

    keyed = {}
    for arm in arms:
        paths = [os.path.join(out_root, f"seed_{s}", f"pred_{arm}", "predictions.csv")
                 for s in cfg.seeds]
        keyed[arm] = run_evaluate(data_root, os.path.join(out_root, f"eval_{arm}"),
                                  paths, doc)
    aggregate_comparison(os.path.join(out_root, "ablation.csv"), keyed, "arm")
    qwk = {arm: float(np.mean([metrics.rows_to_dict(r)[("zone", "grouped", "qwk")]
                               for r in keyed[arm]])) for arm in arms}
    return {"table": os.path.join(out_root, "ablation.csv"), "zone_qwk": qwk}


def run_alpha_sweep(data_root, out_root, cfg, doc: dict, alphas=ALPHA_GRID,
                    pretrained=None, jobs=None) -> dict:
    out_root = prepare_run_dir(out_root, doc, {"command": "alpha-sweep",
                                               "alphas": list(alphas),
                                               "seeds": list(cfg.seeds),
                                               "pretrained": pretrained and str(pretrained)})
    config_path = os.path.join(out_root, "config.json")
    env = _child_env()

    def tag(a) -> str:
        return "alpha_" + format(a, "g").replace(".", "p")

    seed_chains = []
    for seed in cfg.seeds:
        own = os.path.join(out_root, f"seed_{seed}")
        pre = own
        if pretrained is not None:
            cand = os.path.join(str(pretrained), f"seed_{seed}")
            needed = [os.path.join(cand, "ae", "ae.ckpt"),
                      os.path.join(cand, "fm", "flow.ckpt"),
                      os.path.join(cand, "loc_decoupled_crf", "loc.ckpt")]
            if all(os.path.exists(p) for p in needed):
                pre = cand
        chain = [] if pre != own else pretrain_commands(
            data_root, own, config_path, seed, ("full_gem",))
        for a in alphas:
            chain.extend(arm_commands(data_root, pre, own, config_path, seed,
                                      "full_gem", alpha=a, tag=tag(a)))
        seed_chains.append(chain)

    jobs = jobs or min(len(cfg.seeds), os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_chain, chain, env) for chain in seed_chains]
        for f in futures:
            f.result()

    keyed = {}
    for a in alphas:
        paths = [os.path.join(out_root, f"seed_{s}", f"pred_{tag(a)}", "predictions.csv")
                 for s in cfg.seeds]
        keyed[format(a, "g")] = run_evaluate(
            data_root, os.path.join(out_root, f"eval_{tag(a)}"), paths, doc)
    aggregate_comparison(os.path.join(out_root, "alpha_sweep.csv"), keyed, "alpha")
    qwk = {k: float(np.mean([metrics.rows_to_dict(r)[("zone", "grouped", "qwk")]
                             for r in rows])) for k, rows in keyed.items()}
    return {"table": os.path.join(out_root, "alpha_sweep.csv"), "zone_qwk": qwk}
