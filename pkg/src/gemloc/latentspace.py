"""Shared variational autoencoder mapping both volume modalities to one latent space.

A single parameter set encodes anatomical and functional volumes alike; the
factor-8 spatial reduction turns a (1, G, G, G) volume into a (c_lat, G/8,
G/8, G/8) latent. Inference uses the posterior mean, training samples with
the reparameterization trick.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gemloc import diffcore as dc
from gemloc import nets
from gemloc.errors import ConfigError

DOWNSCALE = 8


@dataclass(frozen=True)
class AEConfig:
    grid: int = 32
    width: int = 16
    c_lat: int = 3
    beta: float = 1e-6
    lr: float = 5e-4
    epochs: int = 10
    batch: int = 8

    def __post_init__(self):
        if self.grid % DOWNSCALE != 0 or self.grid < DOWNSCALE:
            raise ConfigError(f"grid must be a positive multiple of {DOWNSCALE}, got {self.grid}")
        if self.width < 1 or self.c_lat < 1:
            raise ConfigError("width and c_lat must be positive")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")

    @property
    def latent_grid(self) -> int:
        return self.grid // DOWNSCALE

    @property
    def latent_shape(self) -> tuple:
        g = self.latent_grid
        return (self.c_lat, g, g, g)


def init_ae_params(cfg: AEConfig, rng) -> dict:
    w, c = cfg.width, cfg.c_lat
    arrays = {
        "ae.enc1.w": nets.he_conv(rng, w, 1, 3),
        "ae.enc1.b": nets.zeros(w),
        "ae.enc2.w": nets.he_conv(rng, 2 * w, w, 3),
        "ae.enc2.b": nets.zeros(2 * w),
        "ae.enc3.w": nets.he_conv(rng, 2 * w, 2 * w, 3),
        "ae.enc3.b": nets.zeros(2 * w),
        "ae.mean.w": nets.he_conv(rng, c, 2 * w, 3),
        "ae.mean.b": nets.zeros(c),
        "ae.logvar.w": nets.he_conv(rng, c, 2 * w, 3),
        "ae.logvar.b": nets.zeros(c),
        "ae.dec1.w": nets.he_conv(rng, 2 * w, c, 3),
        "ae.dec1.b": nets.zeros(2 * w),
        "ae.dec2.w": nets.he_conv(rng, 2 * w, 2 * w, 3),
        "ae.dec2.b": nets.zeros(2 * w),
        "ae.dec3.w": nets.he_conv(rng, w, 2 * w, 3),
        "ae.dec3.b": nets.zeros(w),
        "ae.dec_out.w": nets.he_conv(rng, 1, w, 1),
        "ae.dec_out.b": nets.zeros(1),
    }
    return nets.as_tensors(arrays, requires_grad=True)


def encode(params: dict, x, sample: bool = False, rng=None):
    """Posterior moments for volumes x of shape (N, 1, G, G, G).

    Returns (z, mean, logvar); z is the mean unless sample=True, in which
    case rng supplies the reparameterization noise.
    """
    h = dc.silu(dc.conv3d(x, params["ae.enc1.w"], params["ae.enc1.b"], stride=2, pad=1))
    h = dc.silu(dc.conv3d(h, params["ae.enc2.w"], params["ae.enc2.b"], stride=2, pad=1))
    h = dc.silu(dc.conv3d(h, params["ae.enc3.w"], params["ae.enc3.b"], stride=2, pad=1))
    mean = dc.conv3d(h, params["ae.mean.w"], params["ae.mean.b"], pad=1)
    logvar = dc.conv3d(h, params["ae.logvar.w"], params["ae.logvar.b"], pad=1)
    if not sample:
        return mean, mean, logvar
    if rng is None:
        raise ConfigError("encode(sample=True) needs an rng")
    shape = mean.shape if isinstance(mean, dc.Tensor) else np.asarray(mean).shape
    eps = rng.standard_normal(size=shape).astype(np.float32)
    std = dc.exp(dc.mul(logvar, 0.5))
    z = dc.add(mean, dc.mul(std, eps))
    return z, mean, logvar


def decode(params: dict, z):
    """Latents (N, c_lat, g, g, g) back to volumes in (0, 1)."""
    h = dc.silu(dc.conv3d(z, params["ae.dec1.w"], params["ae.dec1.b"], pad=1))
    h = dc.upsample3d_nearest(h, 2)
    h = dc.silu(dc.conv3d(h, params["ae.dec2.w"], params["ae.dec2.b"], pad=1))
    h = dc.upsample3d_nearest(h, 2)
    h = dc.silu(dc.conv3d(h, params["ae.dec3.w"], params["ae.dec3.b"], pad=1))
    h = dc.upsample3d_nearest(h, 2)
    out = dc.conv3d(h, params["ae.dec_out.w"], params["ae.dec_out.b"])
    return dc.sigmoid(out)


def kl_divergence(mean, logvar):
    """KL(q || N(0, I)), summed per sample and averaged over the batch."""
    term = dc.sub(dc.add(1.0, logvar), dc.add(dc.mul(mean, mean), dc.exp(logvar)))
    per_sample = dc.reduce_sum(term, axis=tuple(range(1, _ndim(term))))
    return dc.mul(dc.reduce_mean(per_sample), -0.5)


def _ndim(x) -> int:
    return x.ndim if isinstance(x, dc.Tensor) else np.asarray(x).ndim


def ae_loss(params: dict, x: np.ndarray, cfg: AEConfig, rng):
    """Sampled ELBO surrogate: MSE reconstruction + beta * KL."""
    z, mean, logvar = encode(params, x, sample=True, rng=rng)
    xh = decode(params, z)
    recon = dc.mse(xh, x)
    kl = kl_divergence(mean, logvar)
    loss = dc.add(recon, dc.mul(kl, cfg.beta))
    return loss, float(recon.data), float(kl.data)


def ae_train_step(params: dict, opt, x: np.ndarray, cfg: AEConfig, rng) -> dict:
    loss, recon, kl = ae_loss(params, x, cfg, rng)
    for p in params.values():
        p.zero_grad()
    loss.backward()
    opt.step()
    return {"loss": float(loss.data), "recon": recon, "kl": kl}


def reconstruct(params: dict, x: np.ndarray) -> np.ndarray:
    """Mean-mode round trip used by evaluation; no graph is built."""
    with dc.no_grad():
        z, _, _ = encode(params, x)
        xh = decode(params, z)
    return np.asarray(xh.data if isinstance(xh, dc.Tensor) else xh, dtype=np.float32)


def recon_metrics(x: np.ndarray, xh: np.ndarray) -> dict:
    """MAE / MSE / PSNR in float64 for a unit-range signal pair."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(xh, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"recon_metrics: shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    mae = float(np.mean(np.abs(diff)))
    mse = float(np.mean(diff * diff))
    psnr = float("inf") if mse == 0.0 else float(10.0 * np.log10(1.0 / mse))
    return {"mae": mae, "mse": mse, "psnr": psnr}
