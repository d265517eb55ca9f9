"""Shared parameter-dict plumbing for the small conv nets."""

from __future__ import annotations

import numpy as np

from gemloc import diffcore as dc


def he_conv(rng, c_out: int, c_in: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (c_in * k**3))
    return (rng.standard_normal((c_out, c_in, k, k, k)) * std).astype(np.float32)


def glorot_dense(rng, f_in: int, f_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (f_in + f_out))
    return rng.uniform(-bound, bound, size=(f_in, f_out)).astype(np.float32)


def zeros(*shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.float32)


def as_tensors(arrays: dict, requires_grad: bool) -> dict:
    return {k: dc.Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


def params_data(params: dict) -> dict:
    """Detached float32 copies of every parameter array."""
    return {k: np.array(p.data, dtype=np.float32) for k, p in params.items()}


def load_params_data(params: dict, arrays: dict):
    for k, p in params.items():
        a = np.asarray(arrays[k], dtype=np.float32)
        if a.shape != p.data.shape:
            raise dc.ShapeError(f"param {k!r}: checkpoint shape {a.shape} != {p.data.shape}")
        p.data = a.copy()


def set_requires_grad(params: dict, flag: bool):
    for p in params.values():
        p.requires_grad = bool(flag)
        if not flag:
            p.grad = None


def count_params(params: dict) -> int:
    return sum(int(p.data.size) for p in params.values())
