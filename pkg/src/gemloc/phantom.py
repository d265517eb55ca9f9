"""Synthetic paired-modality phantom generator.

Each case is an ellipsoidal gland with smooth background texture on a fixed
grid, plus 0-3 Gaussian-bump lesions planted inside zones. The observed
modality shows lesions as weak hypointense dips whose depth is the same for
every grade (grade reaches it only through lesion size); the functional
modality shows them as strong hyperintense bumps whose contrast grows
steeply with grade, so the functional volume carries the legible grade
signal. Zone labels are the max grade over lesions whose core (bump >= 0.5)
intersects the zone box.

Everything is deterministic given (seed, case index).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from gemloc import dataset, geometry
from gemloc.errors import ConfigError, DataError, GeometryError
from gemloc.volume import Volume

N_GROUPS = 4  # ISUP groups 0, 1, 2, >=3


@dataclass
class LesionSpec:
    center: tuple  # (d, h, w) voxel coords, continuous
    grade: int  # 1..3
    sigma: float  # Gaussian radius in voxels


@dataclass
class PhantomConfig:
    grid: int = 32
    gland_axes: tuple = (0.40, 0.42, 0.40)  # semi-axes / grid
    tz_scale: float = 0.72  # TZ = inner ellipsoid scaled by this
    tz_shift: float = -0.12  # anterior offset of the TZ center, / grid
    base_o: float = 0.55
    base_z: float = 0.30
    outside_o: float = 0.18
    outside_z: float = 0.10
    texture_amp_o: float = 0.06
    texture_amp_z: float = 0.05
    texture_sigma: float = 2.5
    noise_o: float = 0.01
    noise_z: float = 0.01
    lesion_count_probs: tuple = (0.15, 0.30, 0.30, 0.25)  # P(0..3 lesions)
    grade_probs: tuple = (0.34, 0.33, 0.33)  # grade 1..3 given a lesion
    lesion_sigma: tuple = (2.0, 2.6, 3.2)  # per grade 1..3
    contrast_o: tuple = (0.08, 0.08, 0.08)  # hypointense dip, grade-blind
    contrast_z: tuple = (0.20, 0.42, 0.65)  # hyperintense bump per grade
    parts: tuple = (2, 5, 2)
    roi_out: int = 4
    graph_k: int = 3

    def __post_init__(self):
        for name in ("lesion_count_probs", "grade_probs", "lesion_sigma",
                     "contrast_o", "contrast_z", "gland_axes", "parts"):
            setattr(self, name, tuple(getattr(self, name)))
        if len(self.grade_probs) != 3 or len(self.lesion_sigma) != 3:
            raise ConfigError("grade tables must cover grades 1..3")
        cz = self.contrast_z
        if not all(cz[i] < cz[i + 1] for i in range(len(cz) - 1)):
            raise ConfigError(f"contrast_z must be strictly increasing, got {cz}")
        co = self.contrast_o
        if not all(co[i] <= co[i + 1] for i in range(len(co) - 1)):
            raise ConfigError(f"contrast_o must be nondecreasing, got {co}")
        if abs(sum(self.lesion_count_probs) - 1.0) > 1e-9:
            raise ConfigError("lesion_count_probs must sum to 1")
        if abs(sum(self.grade_probs) - 1.0) > 1e-9:
            raise ConfigError("grade_probs must sum to 1")


@dataclass
class CaseRecord:
    case_id: str
    x_o: Volume
    x_z: Volume
    zone_labels: list
    lesions: list
    seed: object


def _voxel_coords(grid: int):
    ax = np.arange(grid, dtype=np.float64)
    return np.meshgrid(ax, ax, ax, indexing="ij")


def gland_masks(config: PhantomConfig):
    """Boolean (gland, pz, tz) masks.

    TZ is a smaller ellipsoid offset toward the anterior (low-d) side and
    slightly flattened along the ap axis; PZ is the remaining gland shell.
    """
    g = config.grid
    zz, yy, xx = _voxel_coords(g)
    c = (g - 1) / 2.0
    ax = tuple(a * g for a in config.gland_axes)
    r2 = (((zz - c) / ax[0]) ** 2 + ((yy - c) / ax[1]) ** 2 + ((xx - c) / ax[2]) ** 2)
    gland = r2 <= 1.0
    cz = c + config.tz_shift * g
    s = config.tz_scale
    t2 = (((zz - cz) / (ax[0] * s)) ** 2 + ((yy - c) / (ax[1] * s * 0.9)) ** 2
          + ((xx - c) / (ax[2] * s)) ** 2)
    tz = (t2 <= 1.0) & gland
    pz = gland & ~tz
    return gland, pz, tz


def build_phantom_template(config: PhantomConfig):
    """Zone template over the gland bbox with PZ/TZ tags and kNN graph baked in."""
    gland, pz, tz = gland_masks(config)
    idx = np.argwhere(gland)
    lo = idx.min(axis=0)
    hi = idx.max(axis=0) + 1
    bbox = (int(lo[0]), int(lo[1]), int(lo[2]), int(hi[0]), int(hi[1]), int(hi[2]))
    template = geometry.build_template((config.grid,) * 3, bbox, parts=config.parts,
                                       roi_out=config.roi_out, graph_k=config.graph_k)
    regions = geometry.assign_pz_tz(template, pz, tz)
    template = geometry.with_regions(template, regions)
    graph = geometry.knn_graph(template, config.graph_k)
    return template, graph


def _lesion_bump(grid: int, lesion: LesionSpec) -> np.ndarray:
    """Gaussian bump exp(-d^2 / 2 sigma^2) evaluated on a local window."""
    out = np.zeros((grid,) * 3, dtype=np.float64)
    cz, cy, cx = lesion.center
    reach = int(np.ceil(4.0 * lesion.sigma))
    z0, z1 = max(0, int(cz) - reach), min(grid, int(cz) + reach + 1)
    y0, y1 = max(0, int(cy) - reach), min(grid, int(cy) + reach + 1)
    x0, x1 = max(0, int(cx) - reach), min(grid, int(cx) + reach + 1)
    zz, yy, xx = np.meshgrid(np.arange(z0, z1), np.arange(y0, y1),
                             np.arange(x0, x1), indexing="ij")
    d2 = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2
    out[z0:z1, y0:y1, x0:x1] = np.exp(-d2 / (2.0 * lesion.sigma**2))
    return out


def labels_from_lesions(template, lesions, grid: int):
    """Zone label = max grade over lesions whose core voxels hit the zone box.

    The core is where the bump reaches 0.5, i.e. within sigma*sqrt(2 ln 2)
    of the center. Pure function of the lesion specs; used both to label
    generated cases and to re-derive labels in tests.
    """
    labels = [0] * len(template)
    for les in lesions:
        core = _lesion_bump(grid, les) >= 0.5
        for z in template.zones:
            d0, h0, w0, d1, h1, w1 = z.bbox
            if core[d0:d1, h0:h1, w0:w1].any():
                labels[z.id] = max(labels[z.id], les.grade)
    return labels


def _draw_lesions(rng, config: PhantomConfig, template, gland):
    n = int(rng.choice(len(config.lesion_count_probs), p=config.lesion_count_probs))
    lesions = []
    for _ in range(n):
        for attempt in range(20):
            zone = template.zones[int(rng.integers(len(template)))]
            d0, h0, w0, d1, h1, w1 = zone.bbox
            inner = np.zeros_like(gland)
            inner[d0 + 1:max(d0 + 1, d1 - 1), h0 + 1:max(h0 + 1, h1 - 1),
                  w0 + 1:max(w0 + 1, w1 - 1)] = True
            eligible = np.argwhere(gland & inner)
            if len(eligible):
                break
        else:
            raise DataError(f"no eligible lesion site found in 20 zone draws")
        site = eligible[int(rng.integers(len(eligible)))]
        center = tuple(float(c) + float(j) for c, j in
                       zip(site, rng.uniform(-0.5, 0.5, size=3)))
        grade = 1 + int(rng.choice(3, p=config.grade_probs))
        lesions.append(LesionSpec(center=center, grade=grade,
                                  sigma=float(config.lesion_sigma[grade - 1])))
    return lesions


def _texture(rng, config: PhantomConfig, amp: float):
    noise = rng.standard_normal((config.grid,) * 3)
    t = ndimage.gaussian_filter(noise, sigma=config.texture_sigma)
    sd = t.std()
    if sd > 0:
        t = t / sd
    return amp * t


def generate_case(seed, config: PhantomConfig, template=None, lesions=None,
                  case_id=None) -> CaseRecord:
    """One phantom case. ``seed`` may be an int or (dataset_seed, index) pair."""
    rng = np.random.default_rng(seed)
    if template is None:
        template, _ = build_phantom_template(config)
    gland, _, _ = gland_masks(config)
    soft = ndimage.gaussian_filter(gland.astype(np.float64), sigma=1.2)
    if lesions is None:
        lesions = _draw_lesions(rng, config, template, gland)

    x_o = config.outside_o + (config.base_o - config.outside_o) * soft
    x_z = config.outside_z + (config.base_z - config.outside_z) * soft
    x_o = x_o + _texture(rng, config, config.texture_amp_o) * soft
    x_z = x_z + _texture(rng, config, config.texture_amp_z) * soft
    for les in lesions:
        bump = _lesion_bump(config.grid, les)
        x_o = x_o - config.contrast_o[les.grade - 1] * bump
        x_z = x_z + config.contrast_z[les.grade - 1] * bump
    x_o = x_o + config.noise_o * rng.standard_normal(x_o.shape)
    x_z = x_z + config.noise_z * rng.standard_normal(x_z.shape)
    x_o = np.clip(x_o, 0.0, 1.0)
    x_z = np.clip(x_z, 0.0, 1.0)

    labels = labels_from_lesions(template, lesions, config.grid)
    if case_id is None:
        case_id = f"case_{np.random.default_rng(seed).integers(10**8):08d}"
    return CaseRecord(case_id=case_id, x_o=Volume(x_o), x_z=Volume(x_z),
                      zone_labels=labels, lesions=lesions, seed=seed)


# --- dataset assembly ------------------------------------------------------


def _largest_remainder(total: int, fractions):
    quotas = [total * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    short = total - sum(counts)
    order = sorted(range(len(fractions)),
                   key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def stratified_split(ids_by_stratum: dict, fractions, rng):
    """Split case ids stratum-by-stratum with largest-remainder apportionment.

    Global split sizes are exact for the full set; within every stratum each
    split receives floor or ceil of its real-valued quota (the +-1 property).
    Strata with fewer cases than nonzero splits raise DataError.
    """
    n_splits = len(fractions)
    nonzero = sum(1 for f in fractions if f > 0)
    strata = sorted(ids_by_stratum)
    for s in strata:
        if 0 < len(ids_by_stratum[s]) < nonzero:
            raise DataError(
                f"stratum {s!r} has {len(ids_by_stratum[s])} cases, too small "
                f"to split across {nonzero} nonempty splits")
    total = sum(len(v) for v in ids_by_stratum.values())
    targets = _largest_remainder(total, fractions)
    counts = {s: _largest_remainder(len(ids_by_stratum[s]), fractions) for s in strata}
    quotas = {s: [len(ids_by_stratum[s]) * f for f in fractions] for s in strata}

    # Corrective moves to hit exact global targets while keeping every
    # stratum cell within floor/ceil of its quota.
    for _ in range(total):
        totals = [sum(counts[s][k] for s in strata) for k in range(n_splits)]
        over = [k for k in range(n_splits) if totals[k] > targets[k]]
        under = [k for k in range(n_splits) if totals[k] < targets[k]]
        if not over and not under:
            break
        moved = False
        for ko in over:
            for ku in under:
                for s in strata:
                    if (counts[s][ko] - 1 >= np.floor(quotas[s][ko])
                            and counts[s][ku] + 1 <= np.ceil(quotas[s][ku])):
                        counts[s][ko] -= 1
                        counts[s][ku] += 1
                        moved = True
                        break
                if moved:
                    break
            if moved:
                break
        if not moved:
            raise DataError("stratified split could not reach exact global targets")

    for s in strata:
        for k in range(n_splits):
            if abs(counts[s][k] - quotas[s][k]) > 1.0 + 1e-9:
                raise DataError(f"stratum {s!r} split {k} off quota by > 1")

    splits = [[] for _ in range(n_splits)]
    for s in strata:
        ids = list(ids_by_stratum[s])
        rng.shuffle(ids)
        pos = 0
        for k in range(n_splits):
            splits[k].extend(ids[pos:pos + counts[s][k]])
            pos += counts[s][k]
    return [sorted(sp) for sp in splits]


def generate_dataset(n_cases: int, seed: int, out_root, config: PhantomConfig = None,
                     split=(0.70, 0.15, 0.15)) -> dict:
    """Write a full dataset directory and return its manifest."""
    if config is None:
        config = PhantomConfig()
    if n_cases < 10:
        raise ConfigError(f"need at least 10 cases, got {n_cases}")
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"split must be 3 fractions summing to 1, got {split}")
    template, graph = build_phantom_template(config)
    import os
    os.makedirs(out_root, exist_ok=True)
    geometry.save_template(os.path.join(out_root, "template.json"), template, graph)

    by_stratum = {}
    for i in range(n_cases):
        rec = generate_case([seed, i], config, template=template,
                            case_id=f"case_{i:04d}")
        labels = {
            "case_id": rec.case_id,
            "zone_labels": rec.zone_labels,
            "max_grade": int(max(rec.zone_labels)),
            "lesions": [{"center": list(l.center), "grade": l.grade,
                         "sigma": l.sigma} for l in rec.lesions],
            "seed": [seed, i],
        }
        dataset.write_case(out_root, rec.case_id, rec.x_o, rec.x_z, labels)
        by_stratum.setdefault(labels["max_grade"], []).append(rec.case_id)

    rng = np.random.default_rng([seed, 2**31])
    train, val, test = stratified_split(by_stratum, split, rng)
    manifest = {
        "n_cases": n_cases,
        "seed": seed,
        "split_fractions": list(split),
        "splits": {"train": train, "val": val, "test": test},
        "train_t2only": list(train),  # same cases, functional volumes withheld
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(config).items()},
    }
    dataset.write_manifest(out_root, manifest)
    return manifest
