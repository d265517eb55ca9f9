"""Conditional flow matching in latent space.

The velocity field is trained on straight-line paths between paired latents
(anatomical endpoint conditions the field) and sampled with an explicit Euler
solver. An exponential moving average of the weights drives generation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gemloc import diffcore as dc
from gemloc import nets
from gemloc.errors import ConfigError, NumericalError


@dataclass(frozen=True)
class FlowConfig:
    c_lat: int = 3
    width: int = 32
    time_dim: int = 16
    sigma_min: float = 1e-4
    sigma_aug: float = 0.0
    ema_decay: float = 0.999
    ode_steps: int = 30
    unroll_steps: int = 8
    divergence_bound: float = 100.0
    solver: str = "euler"
    lr: float = 1e-4
    epochs: int = 40
    batch: int = 8

    def __post_init__(self):
        if self.sigma_min < 0 or self.sigma_aug < 0:
            raise ConfigError("noise scales must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.ode_steps < 1 or self.unroll_steps < 1:
            raise ConfigError("step counts must be >= 1")
        if self.time_dim % 2 != 0:
            raise ConfigError(f"time_dim must be even, got {self.time_dim}")
        if self.solver not in ("euler", "midpoint"):
            raise ConfigError(f"unknown solver {self.solver!r}")


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of shape (N, dim) for times in [0, 1]."""
    tt = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = tt[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def init_flow_params(cfg: FlowConfig, rng) -> dict:
    w, c, td = cfg.width, cfg.c_lat, cfg.time_dim
    arrays = {
        "flow.in.w": nets.he_conv(rng, w, 2 * c, 3),
        "flow.in.b": nets.zeros(w),
        "flow.t1.w": nets.glorot_dense(rng, td, w),
        "flow.t1.b": nets.zeros(w),
        "flow.t2.w": nets.glorot_dense(rng, w, w),
        "flow.t2.b": nets.zeros(w),
        "flow.mid1.w": nets.he_conv(rng, w, w, 3),
        "flow.mid1.b": nets.zeros(w),
        "flow.mid2.w": nets.he_conv(rng, w, w, 3),
        "flow.mid2.b": nets.zeros(w),
        "flow.out.w": nets.he_conv(rng, c, w, 3),
        "flow.out.b": nets.zeros(c),
    }
    return nets.as_tensors(arrays, requires_grad=True)


def velocity(params: dict, t, z, cond):
    """Predicted path velocity at time t for state z conditioned on cond.

    z and cond are (N, c_lat, g, g, g); t is a scalar or (N,) vector.
    """
    x = dc.concat([z, cond], axis=1)
    n = x.shape[0] if isinstance(x, dc.Tensor) else np.asarray(x).shape[0]
    temb = time_embedding(np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)), _time_dim(params))
    tfeat = dc.silu(dc.dense(temb, params["flow.t1.w"], params["flow.t1.b"]))
    tfeat = dc.dense(tfeat, params["flow.t2.w"], params["flow.t2.b"])
    tbias = dc.reshape(tfeat, (n, -1, 1, 1, 1))
    h = dc.silu(dc.conv3d(x, params["flow.in.w"], params["flow.in.b"], pad=1))
    h = dc.add(h, tbias)
    m = dc.silu(dc.conv3d(h, params["flow.mid1.w"], params["flow.mid1.b"], pad=1))
    m = dc.silu(dc.conv3d(m, params["flow.mid2.w"], params["flow.mid2.b"], pad=1))
    return dc.conv3d(dc.add(h, m), params["flow.out.w"], params["flow.out.b"], pad=1)


def _time_dim(params: dict) -> int:
    w = params["flow.t1.w"]
    return (w.shape if isinstance(w, dc.Tensor) else np.asarray(w).shape)[0]


def sample_path(z_o, z_z, t, sigma_min: float, eps=None):
    """Interpolant state and its constant target velocity.

    phi = (1 - t) * z_o + t * z_z + sigma_min * eps, u = z_z - z_o.
    Pure ndarray math; t broadcasts over trailing axes.
    """
    a = np.asarray(z_o)
    b = np.asarray(z_z)
    tt = np.asarray(t, dtype=a.dtype)
    if tt.ndim == 1:
        tt = tt.reshape((-1,) + (1,) * (a.ndim - 1))
    phi = (1.0 - tt) * a + tt * b
    if sigma_min != 0.0 and eps is not None:
        phi = phi + sigma_min * np.asarray(eps, dtype=a.dtype)
    return phi, b - a


def fm_loss(params: dict, z_o: np.ndarray, z_z: np.ndarray, cfg: FlowConfig, rng):
    """Flow-matching regression loss on one latent batch.

    Draw order is fixed (t, path noise, conditioning noise) so optimization
    schedules that share an rng stay reproducible.
    """
    n = z_o.shape[0]
    t = rng.uniform(size=n)
    eps = rng.standard_normal(size=z_o.shape).astype(np.float32)
    phi, u = sample_path(z_o.astype(np.float32), z_z.astype(np.float32), t.astype(np.float32), cfg.sigma_min, eps)
    cond = noise_augment(z_o.astype(np.float32), cfg.sigma_aug, rng)
    v = velocity(params, t, phi, cond)
    return dc.mse(v, u)


def noise_augment(z: np.ndarray, sigma: float, rng) -> np.ndarray:
    if sigma == 0.0:
        return z
    return z + sigma * rng.standard_normal(size=z.shape).astype(z.dtype)


def integrate_ode(field, z0: np.ndarray, n_steps: int, *, bound: float = 100.0, solver: str = "euler") -> np.ndarray:
    """Explicit integration of dz/dt = field(t, z) from t=0 to t=1.

    The state accumulates in float64. A non-finite state or one whose
    magnitude exceeds ``bound`` aborts with the offending step index.
    """
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    z = np.asarray(z0, dtype=np.float64).copy()
    dt = 1.0 / n_steps
    for k in range(n_steps):
        t = k * dt
        if solver == "midpoint":
            v_half = np.asarray(field(t, z), dtype=np.float64)
            v = np.asarray(field(t + 0.5 * dt, z + 0.5 * dt * v_half), dtype=np.float64)
        else:
            v = np.asarray(field(t, z), dtype=np.float64)
        z = z + dt * v
        if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > bound:
            raise NumericalError(f"ODE state diverged at step {k} of {n_steps} (max |z| bound {bound})")
    return z


def flow_field(params: dict, cond: np.ndarray, cfg: FlowConfig):
    """Closure over the learned velocity net for the ndarray integrator."""
    cond32 = np.asarray(cond, dtype=np.float32)

    def field(t, z):
        with dc.no_grad():
            v = velocity(params, float(t), np.asarray(z, dtype=np.float32), cond32)
        return v.data if isinstance(v, dc.Tensor) else v

    return field


def integrate_ode_graph(params: dict, z0, cond, n_steps: int):
    """Differentiable Euler unroll used when gradients must reach the field."""
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    z = z0
    dt = 1.0 / n_steps
    for k in range(n_steps):
        v = velocity(params, k * dt, z, cond)
        z = dc.add(z, dc.mul(v, dt))
    return z


class EMA:
    """Exponential moving average over a parameter dict."""

    def __init__(self, decay: float, shadow: dict):
        if not 0.0 <= decay < 1.0:
            raise ConfigError(f"decay must be in [0, 1), got {decay}")
        self.decay = float(decay)
        self.shadow = {k: np.array(v, dtype=np.float32) for k, v in shadow.items()}

    @classmethod
    def from_params(cls, params: dict, decay: float) -> "EMA":
        return cls(decay, nets.params_data(params))

    def update(self, params: dict):
        d = self.decay
        for k, s in self.shadow.items():
            p = params[k]
            v = p.data if isinstance(p, dc.Tensor) else np.asarray(p, dtype=np.float32)
            if v.shape != s.shape:
                raise dc.ShapeError(f"EMA update: param {k!r} shape {v.shape} != shadow {s.shape}")
            s *= d
            s += (1.0 - d) * v

    def arrays(self) -> dict:
        return {k: v.copy() for k, v in self.shadow.items()}

    def as_tensors(self) -> dict:
        return nets.as_tensors(self.shadow, requires_grad=False)


def generate_latent(params: dict, z_o: np.ndarray, cfg: FlowConfig, rng=None, n_steps=None) -> np.ndarray:
    """Integrate the learned field from the anatomical latent endpoint."""
    steps = cfg.ode_steps if n_steps is None else int(n_steps)
    z0 = np.asarray(z_o, dtype=np.float64)
    if rng is not None and cfg.sigma_min > 0.0:
        z0 = z0 + cfg.sigma_min * rng.standard_normal(size=z0.shape)
    field = flow_field(params, z_o, cfg)
    out = integrate_ode(field, z0, steps, bound=cfg.divergence_bound, solver=cfg.solver)
    return out.astype(np.float32)
