"""Generalized EM coupling of the generator and the localizer.

Each epoch alternates two M-steps. The generator step minimizes the flow
matching loss plus alpha times the localizer's ordinal loss, with gradients
flowing through a reduced ODE unroll and the frozen decoder into frozen
localizer weights. The localizer step trains on anatomical-only cases whose
functional channel is synthesized by the EMA generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gemloc import diffcore as dc
from gemloc import flowgen as fg
from gemloc import latentspace as ls
from gemloc import localizer as lz
from gemloc import nets
from gemloc.errors import ConfigError, MissingPrerequisiteError

MODES = ("zero_fill", "decoupled", "decoupled_crf", "full_gem", "oracle_multimodal")


@dataclass(frozen=True)
class GemConfig:
    alpha: float = 0.1
    lr: float = 1e-5
    epochs: int = 8
    batch: int = 4
    mode: str = "full_gem"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")


def crf_for_mode(mode: str) -> bool:
    return mode not in ("zero_fill", "decoupled")


def functional_source(mode: str) -> str:
    if mode == "zero_fill":
        return "zeros"
    if mode == "oracle_multimodal":
        return "real"
    return "generated"


def functional_volumes(ae_params, flow_params, x_o: np.ndarray, mode: str, flow_cfg, rng=None, x_z=None) -> np.ndarray:
    """The functional input channel under a given operating mode."""
    src = functional_source(mode)
    if src == "zeros":
        return np.zeros_like(x_o, dtype=np.float32)
    if src == "real":
        if x_z is None:
            raise ConfigError("oracle_multimodal needs the measured functional volume")
        return np.asarray(x_z, dtype=np.float32)
    if flow_params is None:
        raise MissingPrerequisiteError(f"mode {mode!r} needs a trained generator")
    with dc.no_grad():
        z, _, _ = ls.encode(ae_params, x_o)
        z = z.data if isinstance(z, dc.Tensor) else z
        zf = fg.generate_latent(flow_params, z, flow_cfg, rng=rng)
        xh = ls.decode(ae_params, zf)
    xh = xh.data if isinstance(xh, dc.Tensor) else xh
    return np.clip(xh, 0.0, 1.0).astype(np.float32)


def _require_frozen(params: dict, who: str):
    if any(p.requires_grad for p in params.values()):
        raise ConfigError(f"{who} must be frozen for this step")


def generator_objective(flow_params, ae_params, loc_params, batch: dict,
                        template, graph, flow_cfg, loc_cfg, alpha: float, rng):
    """L_FM + alpha * L_EMD through the reduced unroll and frozen feedback.

    Draw order is fixed: flow-matching noise first, then the feedback
    branch's start noise, so runs at different alpha share every sample.
    The feedback branch is skipped entirely at alpha = 0.
    """
    z_o, z_z = batch["z_o"], batch["z_z"]
    loss_fm = fg.fm_loss(flow_params, z_o, z_z, flow_cfg, rng)
    parts = {"fm": float(loss_fm.data if isinstance(loss_fm, dc.Tensor) else loss_fm), "emd": 0.0}
    loss = loss_fm
    if alpha != 0.0:
        eps0 = rng.standard_normal(size=np.shape(z_o)).astype(np.float32)
        z0 = z_o + flow_cfg.sigma_min * eps0
        z_hat = fg.integrate_ode_graph(flow_params, z0, z_o, flow_cfg.unroll_steps)
        x_hat = ls.decode(ae_params, z_hat)
        vols = dc.concat([batch["x_o"], x_hat], axis=1)
        logits, embeds = lz.localizer_forward(loc_params, vols, template, loc_cfg)
        q = lz.refine_probs(loc_params, logits, embeds, template, graph, loc_cfg)
        flat = dc.reshape(q, (-1, loc_cfg.n_groups))
        loss_emd = lz.emd_loss(flat, np.reshape(batch["labels"], -1), batch["weights"])
        parts["emd"] = float(loss_emd.data if isinstance(loss_emd, dc.Tensor) else loss_emd)
        loss = dc.add(loss_fm, dc.mul(loss_emd, alpha))
    return loss, parts


def localizer_objective(loc_params, batch: dict, x_hat: np.ndarray, template, graph, loc_cfg):
    """Ordinal loss of the localizer on a fixed two-channel input."""
    vols = np.concatenate([np.asarray(batch["x_o"], dtype=np.float32), x_hat], axis=1)
    logits, embeds = lz.localizer_forward(loc_params, vols, template, loc_cfg)
    q = lz.refine_probs(loc_params, logits, embeds, template, graph, loc_cfg)
    flat = dc.reshape(q, (-1, loc_cfg.n_groups))
    return lz.emd_loss(flat, np.reshape(batch["labels"], -1), batch["weights"])


def m_step_generator(flow_params, opt, ema, ae_params, loc_params, batch: dict,
                     template, graph, flow_cfg, loc_cfg, gem_cfg, rng) -> dict:
    """One optimization step of the generator objective."""
    _require_frozen(ae_params, "autoencoder")
    _require_frozen(loc_params, "localizer")
    z_o = np.asarray(batch["z_o"], dtype=np.float32)
    z_z = np.asarray(batch["z_z"], dtype=np.float32)
    b = dict(batch, z_o=z_o, z_z=z_z, x_o=np.asarray(batch["x_o"], dtype=np.float32))
    loss, parts = generator_objective(flow_params, ae_params, loc_params, b,
                                      template, graph, flow_cfg, loc_cfg, gem_cfg.alpha, rng)
    for p in flow_params.values():
        p.zero_grad()
    loss.backward()
    opt.step()
    ema.update(flow_params)
    parts["loss"] = float(loss.data)
    return parts


def m_step_localizer(loc_params, opt, ae_params, ema_flow, batch: dict,
                     template, graph, flow_cfg, loc_cfg, gem_cfg, rng) -> dict:
    """One optimization step of the localizer on anatomical-only cases.

    The functional channel comes from the EMA generator (or zeros under
    zero_fill); neither the live generator nor the EMA shadow moves here.
    """
    _require_frozen(ae_params, "autoencoder")
    x_hat = functional_volumes(ae_params, ema_flow, batch["x_o"], gem_cfg.mode, flow_cfg,
                               rng=rng, x_z=batch.get("x_z"))
    loss = localizer_objective(loc_params, batch, x_hat, template, graph, loc_cfg)
    for p in loc_params.values():
        p.zero_grad()
    loss.backward()
    opt.step()
    return {"emd": float(loss.data), "loss": float(loss.data)}


@dataclass
class GemData:
    """Training arrays for the alternating schedule.

    The paired stream feeds the generator step (latents from both
    modalities); the t2 stream feeds the localizer step and carries no
    functional data at all.
    """

    z_o: np.ndarray
    z_z: np.ndarray
    x_o: np.ndarray
    labels: np.ndarray
    t2_x_o: np.ndarray
    t2_labels: np.ndarray
    weights: np.ndarray
    t2_x_z: np.ndarray = None  # measured functional stream, oracle mode only

    def __post_init__(self):
        self.z_o = np.asarray(self.z_o, dtype=np.float32)
        self.z_z = np.asarray(self.z_z, dtype=np.float32)
        self.x_o = np.asarray(self.x_o, dtype=np.float32)
        self.t2_x_o = np.asarray(self.t2_x_o, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.t2_labels = np.asarray(self.t2_labels, dtype=np.int64)
        if len(self.z_o) != len(self.z_z) or len(self.z_o) != len(self.x_o) or len(self.x_o) != len(self.labels):
            raise ConfigError("paired stream arrays disagree on case count")
        if len(self.t2_x_o) != len(self.t2_labels):
            raise ConfigError("t2 stream arrays disagree on case count")
        if self.t2_x_z is not None:
            self.t2_x_z = np.asarray(self.t2_x_z, dtype=np.float32)
            if len(self.t2_x_z) != len(self.t2_x_o):
                raise ConfigError("t2 functional stream disagrees on case count")


class GemTrainer:
    """Holds the live parameter sets and runs alternating epochs."""

    def __init__(self, ae_arrays: dict, flow_arrays: dict, ema_arrays: dict, loc_arrays: dict,
                 template, graph, flow_cfg, loc_cfg, gem_cfg, seed: int):
        self.ae = nets.as_tensors(ae_arrays, requires_grad=False)
        self.flow = nets.as_tensors(flow_arrays, requires_grad=True)
        self.loc = nets.as_tensors(loc_arrays, requires_grad=True)
        self.ema = fg.EMA(flow_cfg.ema_decay, ema_arrays)
        self.g_opt = dc.Adam(self.flow, lr=gem_cfg.lr)
        self.l_opt = dc.Adam(self.loc, lr=gem_cfg.lr)
        self.template = template
        self.graph = graph
        self.flow_cfg = flow_cfg
        self.loc_cfg = loc_cfg
        self.gem_cfg = gem_cfg
        self.rng = np.random.default_rng([seed, 3571])
        self.epoch = 0

    def _batches(self, n: int):
        order = self.rng.permutation(n)
        b = self.gem_cfg.batch
        return [order[i : i + b] for i in range(0, n, b)]

    def _guarded(self, phase: str, step, *args) -> dict:
        # non-finite loss or gradient skips the step; params and EMA are
        # untouched because the optimizer validates before writing
        try:
            out = step(*args)
        except (dc.NonFiniteError, dc.NonFiniteGradError) as e:
            out = {"skipped": True, "error": str(e)}
        return {"epoch": self.epoch, "phase": phase, **out}

    def run_epoch(self, data: GemData) -> list:
        """All generator steps, then all localizer steps; returns step records."""
        events = []
        nets.set_requires_grad(self.loc, False)
        for idx in self._batches(len(data.z_o)):
            batch = {
                "z_o": data.z_o[idx],
                "z_z": data.z_z[idx],
                "x_o": data.x_o[idx],
                "labels": data.labels[idx],
                "weights": data.weights,
            }
            events.append(self._guarded(
                "generator", m_step_generator, self.flow, self.g_opt, self.ema, self.ae,
                self.loc, batch, self.template, self.graph, self.flow_cfg, self.loc_cfg,
                self.gem_cfg, self.rng))
        nets.set_requires_grad(self.loc, True)
        ema_params = self.ema.as_tensors()
        for idx in self._batches(len(data.t2_x_o)):
            batch = {"x_o": data.t2_x_o[idx], "labels": data.t2_labels[idx], "weights": data.weights}
            if data.t2_x_z is not None:
                batch["x_z"] = data.t2_x_z[idx]
            events.append(self._guarded(
                "localizer", m_step_localizer, self.loc, self.l_opt, self.ae, ema_params,
                batch, self.template, self.graph, self.flow_cfg, self.loc_cfg,
                self.gem_cfg, self.rng))
        self.epoch += 1
        return events

    # -- serialization -------------------------------------------------------

    def state_arrays(self) -> dict:
        arrays = {}
        arrays.update(nets.params_data(self.flow))
        arrays.update(nets.params_data(self.loc))
        arrays.update({f"ema.{k}": v for k, v in self.ema.arrays().items()})
        arrays.update({f"gopt.{k}": v for k, v in self.g_opt.state_arrays().items()})
        arrays.update({f"lopt.{k}": v for k, v in self.l_opt.state_arrays().items()})
        return arrays

    def state_meta(self) -> dict:
        # PCG64 state is a plain dict of strings and ints; json keeps the
        # 128-bit ints exact, so resume is bit-for-bit
        return {
            "epoch": self.epoch,
            "g_t": self.g_opt.t,
            "l_t": self.l_opt.t,
            "rng_state": self.rng.bit_generator.state,
        }

    def load_state(self, arrays: dict, meta: dict):
        nets.load_params_data(self.flow, {k: arrays[k] for k in self.flow})
        nets.load_params_data(self.loc, {k: arrays[k] for k in self.loc})
        self.ema = fg.EMA(self.flow_cfg.ema_decay, {k: arrays[f"ema.{k}"] for k in self.flow})
        self.g_opt.load_state_arrays({k[len("gopt."):]: v for k, v in arrays.items() if k.startswith("gopt.")}, meta["g_t"])
        self.l_opt.load_state_arrays({k[len("lopt."):]: v for k, v in arrays.items() if k.startswith("lopt.")}, meta["l_t"])
        self.epoch = int(meta["epoch"])
        self.rng.bit_generator.state = meta["rng_state"]
