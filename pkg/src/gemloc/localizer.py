"""Zone-level ordinal localizer: conv backbone, box pooling, CRF refinement.

The network sees a two-channel volume (anatomical plus functional, real or
generated), pools a fixed template of zone boxes from a small feature
pyramid, and produces per-zone grade posteriors. A mean-field pass over the
zone graph couples neighboring posteriors through an ordinal compatibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gemloc import diffcore as dc
from gemloc import nets
from gemloc.errors import ConfigError, DataError, GeometryError
from gemloc.geometry import ZoneGraph, ZoneTemplate

NORM_DELTA = 1e-20


@dataclass(frozen=True)
class LocalizerConfig:
    width: int = 16
    d_f: int = 64
    n_groups: int = 4
    roi_out: int = 4
    crf_enabled: bool = True
    t_mf: int = 1
    sigma_init: float = 5.0
    lambda_init: float = 0.5
    row_eps: float = 1e-8
    multi_level: bool = False
    level_threshold: float = 1728.0
    lr: float = 1e-4
    epochs: int = 12
    batch: int = 8

    def __post_init__(self):
        if self.n_groups < 2:
            raise ConfigError(f"n_groups must be >= 2, got {self.n_groups}")
        if self.roi_out < 1:
            raise ConfigError(f"roi_out must be >= 1, got {self.roi_out}")
        if self.t_mf < 0:
            raise ConfigError(f"t_mf must be >= 0, got {self.t_mf}")
        if self.sigma_init <= 0 or self.lambda_init < 0:
            raise ConfigError("sigma_init must be > 0 and lambda_init >= 0")


def _softplus_inverse(y: float) -> float:
    # softplus(x) = log(1 + e^x); stable inverse for y > 0
    return float(y + np.log(-np.expm1(-y)))


def init_localizer_params(cfg: LocalizerConfig, rng) -> dict:
    w = cfg.width
    feat = w * cfg.roi_out**3
    arrays = {
        "loc.b1.w": nets.he_conv(rng, w, 2, 3),
        "loc.b1.b": nets.zeros(w),
        "loc.r1a.w": nets.he_conv(rng, w, w, 3),
        "loc.r1a.b": nets.zeros(w),
        "loc.r1b.w": nets.he_conv(rng, w, w, 3),
        "loc.r1b.b": nets.zeros(w),
        "loc.b2.w": nets.he_conv(rng, 2 * w, w, 3),
        "loc.b2.b": nets.zeros(2 * w),
        "loc.r2a.w": nets.he_conv(rng, 2 * w, 2 * w, 3),
        "loc.r2a.b": nets.zeros(2 * w),
        "loc.r2b.w": nets.he_conv(rng, 2 * w, 2 * w, 3),
        "loc.r2b.b": nets.zeros(2 * w),
        "loc.lat4.w": nets.he_conv(rng, w, 2 * w, 1),
        "loc.lat4.b": nets.zeros(w),
        "loc.lat2.w": nets.he_conv(rng, w, w, 1),
        "loc.lat2.b": nets.zeros(w),
        "loc.smooth.w": nets.he_conv(rng, w, w, 3),
        "loc.smooth.b": nets.zeros(w),
        "loc.embed.w": nets.glorot_dense(rng, feat, cfg.d_f),
        "loc.embed.b": nets.zeros(cfg.d_f),
        "loc.logit.w": nets.glorot_dense(rng, cfg.d_f, cfg.n_groups),
        "loc.logit.b": nets.zeros(cfg.n_groups),
        "loc.crf.sigma_raw": np.float32(_softplus_inverse(cfg.sigma_init)),
        "loc.crf.lambda_raw": np.float32(_softplus_inverse(max(cfg.lambda_init, 1e-6))),
    }
    return nets.as_tensors(arrays, requires_grad=True)


def crf_sigma(params: dict):
    return dc.softplus(params["loc.crf.sigma_raw"])


def crf_lambda(params: dict):
    return dc.softplus(params["loc.crf.lambda_raw"])


def backbone_forward(params: dict, x) -> dict:
    """Two-level feature pyramid from a (N, 2, G, G, G) input.

    Returns {2: (N, w, G/2, ...), 4: (N, w, G/4, ...)} keyed by stride.
    """
    c1 = dc.silu(dc.conv3d(x, params["loc.b1.w"], params["loc.b1.b"], stride=2, pad=1))
    t = dc.silu(dc.conv3d(c1, params["loc.r1a.w"], params["loc.r1a.b"], pad=1))
    t = dc.conv3d(t, params["loc.r1b.w"], params["loc.r1b.b"], pad=1)
    f1 = dc.silu(dc.add(c1, t))
    c2 = dc.silu(dc.conv3d(f1, params["loc.b2.w"], params["loc.b2.b"], stride=2, pad=1))
    t = dc.silu(dc.conv3d(c2, params["loc.r2a.w"], params["loc.r2a.b"], pad=1))
    t = dc.conv3d(t, params["loc.r2b.w"], params["loc.r2b.b"], pad=1)
    f2 = dc.silu(dc.add(c2, t))
    p4 = dc.conv3d(f2, params["loc.lat4.w"], params["loc.lat4.b"])
    p2 = dc.add(dc.conv3d(f1, params["loc.lat2.w"], params["loc.lat2.b"]), dc.upsample3d_nearest(p4, 2))
    p2 = dc.conv3d(p2, params["loc.smooth.w"], params["loc.smooth.b"], pad=1)
    return {2: p2, 4: p4}


def roi_sample_points(box, out: int, stride: int) -> np.ndarray:
    """Bin-center sample grid of a half-open voxel box, in feature coords."""
    d0, h0, w0, d1, h1, w1 = (float(v) for v in box)
    if not (d1 > d0 and h1 > h0 and w1 > w0):
        raise GeometryError(f"degenerate box {tuple(box)}: extents must be positive")
    axes = []
    for lo, hi in ((d0, d1), (h0, h1), (w0, w1)):
        step = (hi - lo) / out
        axes.append(lo + (np.arange(out, dtype=np.float64) + 0.5) * step)
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)
    # feature voxel j sits at volume coordinate j*stride + (stride-1)/2
    return (pts - (stride - 1) / 2.0) / stride


def roi_align(feat, box, out: int, stride: int):
    """Pool one box from a (N, C, d, h, w) feature map to (N, C, out^3)."""
    pts = roi_sample_points(box, out, stride)
    return dc.trilinear_sample(feat, pts)


def route_level(box, threshold: float) -> int:
    d0, h0, w0, d1, h1, w1 = box
    vol = max(d1 - d0, 0) * max(h1 - h0, 0) * max(w1 - w0, 0)
    return 4 if vol > threshold else 2


def pool_zones(feats: dict, template: ZoneTemplate, cfg: LocalizerConfig):
    """Pooled features for every template zone: (N, R, width * roi_out^3).

    Boxes route to the coarse level once their volume passes the threshold;
    with multi_level off everything pools from stride 2.
    """
    boxes = [z.bbox for z in template.zones]
    levels = [route_level(b, cfg.level_threshold) if cfg.multi_level else 2 for b in boxes]
    o3 = cfg.roi_out**3
    order, chunks = [], []
    for stride in (2, 4):
        idxs = [i for i, lv in enumerate(levels) if lv == stride]
        if not idxs:
            continue
        pts = np.concatenate([roi_sample_points(boxes[i], cfg.roi_out, stride) for i in idxs], axis=0)
        sampled = dc.trilinear_sample(feats[stride], pts)  # (N, C, len(idxs)*o3)
        n, c = sampled.shape[0], sampled.shape[1]
        block = dc.reshape(sampled, (n, c, len(idxs), o3))
        block = dc.transpose(block, (0, 2, 1, 3))
        chunks.append(dc.reshape(block, (n, len(idxs), c * o3)))
        order.extend(idxs)
    pooled = chunks[0] if len(chunks) == 1 else dc.concat(chunks, axis=1)
    if order != sorted(order):
        perm = np.zeros((len(order), len(order)), dtype=np.float32)
        for row, src in enumerate(np.argsort(order)):
            perm[row, src] = 1.0
        pooled = dc.matmul(perm, pooled)
    return pooled


def zone_head(params: dict, pooled):
    """Embeddings and grade logits from pooled zone features."""
    e = dc.dense(pooled, params["loc.embed.w"], params["loc.embed.b"])
    logits = dc.dense(e, params["loc.logit.w"], params["loc.logit.b"])
    return e, logits


def _swap_last(x):
    ndim = x.ndim if isinstance(x, dc.Tensor) else np.asarray(x).ndim
    axes = tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)
    return dc.transpose(x, axes)


def crf_affinity(centers: np.ndarray, embeds, adjacency: np.ndarray, sigma, row_eps: float = 1e-8):
    """Edge affinities and their row-normalized transport weights.

    centers (R, 3) and adjacency (R, R) are fixed geometry; embeds may carry
    leading batch axes (..., R, D). Works on the graph path when embeds or
    sigma are tensors and in plain float64 otherwise.
    """
    centers = np.asarray(centers, dtype=np.float64)
    diff = centers[:, None, :] - centers[None, :, :]
    dist2 = np.sum(diff * diff, axis=-1)
    adj = np.asarray(adjacency)
    gauss = dc.exp(dc.mul(-dist2, dc.div(1.0, dc.mul(dc.mul(sigma, sigma), 2.0))))
    dots = dc.matmul(embeds, _swap_last(embeds))
    n2 = dc.reduce_sum(dc.mul(embeds, embeds), axis=-1, keepdims=True)
    norms = dc.power(dc.add(n2, NORM_DELTA), 0.5)
    cos = dc.div(dots, dc.matmul(norms, _swap_last(norms)))
    a = dc.mul(adj * 1.0, dc.mul(gauss, dc.mul(dc.add(cos, 1.0), 0.5)))
    rowsum = dc.reduce_sum(a, axis=-1, keepdims=True)
    w = dc.div(a, dc.add(rowsum, row_eps))
    return a, w


def ordinal_compat(n_groups: int) -> np.ndarray:
    """Squared normalized grade distance, zero on the diagonal."""
    if n_groups < 2:
        raise ConfigError(f"ordinal_compat needs >= 2 groups, got {n_groups}")
    idx = np.arange(n_groups, dtype=np.float64)
    return ((idx[:, None] - idx[None, :]) / (n_groups - 1)) ** 2


def mean_field_refine(logits, w, omega: np.ndarray, lam, t_mf: int):
    """Synchronous mean-field updates of zone posteriors.

    q <- softmax(logits - lam * W (q Omega)); t_mf = 0 returns the plain
    softmax. Accepts leading batch axes on logits and w.
    """
    if t_mf < 0:
        raise ConfigError(f"t_mf must be >= 0, got {t_mf}")
    omega = np.asarray(omega, dtype=np.float64)
    q = dc.softmax(logits, axis=-1)
    for _ in range(t_mf):
        msg = dc.matmul(w, dc.matmul(q, omega))
        q = dc.softmax(dc.sub(logits, dc.mul(lam, msg)), axis=-1)
    return q


def emd_loss(q, labels: np.ndarray, weights: np.ndarray):
    """Class-weighted squared-CDF distance between posteriors and labels.

    q: (M, C) rows on the simplex; labels: (M,) ints; weights: (C,) positive.
    """
    labels = np.asarray(labels)
    qc = q.shape[-1] if isinstance(q, dc.Tensor) else np.asarray(q).shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= qc):
        raise DataError(f"labels outside [0, {qc}): {sorted(set(labels.tolist()) - set(range(qc)))}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (qc,) or np.any(weights <= 0):
        raise DataError(f"weights must be {qc} positive values")
    target = (np.arange(qc)[None, :] >= labels[:, None]).astype(np.float64)
    cdf = dc.cumsum(q, axis=-1)
    gap = dc.sub(cdf, target)
    per_row = dc.reduce_sum(dc.mul(gap, gap), axis=-1)
    row_w = weights[labels]
    return dc.div(dc.reduce_sum(dc.mul(per_row, row_w)), float(row_w.sum()))


def class_weights(labels: np.ndarray, n_groups: int) -> np.ndarray:
    """Inverse-frequency weights, mean 1 over present classes.

    Absent classes inherit the largest present weight; they contribute no
    loss rows, so the value only has to stay positive and finite.
    """
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_groups).astype(np.float64)
    if counts.sum() == 0:
        raise DataError("class_weights: no labels")
    present = counts > 0
    inv = np.zeros(n_groups, dtype=np.float64)
    inv[present] = 1.0 / counts[present]
    inv /= inv[present].mean()
    if not present.all():
        inv[~present] = inv[present].max()
    return inv


def localizer_forward(params: dict, vols, template: ZoneTemplate, cfg: LocalizerConfig):
    """Backbone + pooling + head: (N, 2, G, G, G) -> (logits, embeds)."""
    feats = backbone_forward(params, vols)
    pooled = pool_zones(feats, template, cfg)
    e, logits = zone_head(params, pooled)
    return logits, e


def refine_probs(params: dict, logits, embeds, template: ZoneTemplate, graph: ZoneGraph, cfg: LocalizerConfig):
    if not cfg.crf_enabled:
        return dc.softmax(logits, axis=-1)
    _, w = crf_affinity(template.centers, embeds, graph.adjacency(), crf_sigma(params), cfg.row_eps)
    omega = ordinal_compat(cfg.n_groups)
    return mean_field_refine(logits, w, omega, crf_lambda(params), cfg.t_mf)


def localize(params: dict, vols: np.ndarray, template: ZoneTemplate, graph: ZoneGraph, cfg: LocalizerConfig) -> np.ndarray:
    """Inference pass: per-zone posteriors (N, R, C) as plain float32."""
    with dc.no_grad():
        logits, embeds = localizer_forward(params, vols, template, cfg)
        q = refine_probs(params, logits, embeds, template, graph, cfg)
    return np.asarray(q.data if isinstance(q, dc.Tensor) else q, dtype=np.float32)
