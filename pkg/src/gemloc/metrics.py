"""Evaluation protocol: ordinal metrics, ROC operating points, and reports.

Cancer definitions: tertiary = ISUP >= 1, primary = ISUP >= 2 (csPCa),
secondary = ISUP >= 3. Grouped (4-class) metrics are computed at zone level;
per-definition binary metrics at zone, region (PZ/TZ), and patient level,
with risk aggregated by max over the zones of the unit.

Conventions (also emitted as report footers): one-vs-rest AUC arms with an
absent class are skipped and the macro mean taken over present arms; absent
classes contribute F1 = 0; degenerate MCC reports the 0 sentinel; operating
points sweep observed score thresholds only (no interpolation) and report 0
when the target is unreachable.
"""

from __future__ import annotations

import csv
import math
import warnings

import numpy as np
from scipy.stats import rankdata

from gemloc import geometry
from gemloc.errors import DataError

N_GROUPS = 4
DEFINITIONS = {"tertiary": 1, "primary": 2, "secondary": 3}
DEFINITION_ORDER = ("tertiary", "primary", "secondary")
LEVELS = ("zone", "region", "patient")
GROUPED_METRICS = ("qwk", "macro_f1", "mcc", "macro_auc")
BINARY_METRICS = ("auc", "sen_at_spe80", "sen_at_spe90", "spe_at_sen80", "spe_at_sen90")

FOOTER_LINES = (
    "# grouped metrics are zone-level over 4 ISUP groups; binary metrics use the named cancer definition",
    "# absent one-vs-rest AUC arms are skipped; absent classes contribute F1=0; degenerate MCC reports 0",
    "# operating points sweep observed thresholds only; unreachable targets report 0",
)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".10g")


def confusion(preds, trues, n_groups: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    trues = np.asarray(trues, dtype=np.int64)
    if preds.shape != trues.shape:
        raise DataError(f"preds shape {preds.shape} != trues shape {trues.shape}")
    if preds.size and (preds.min() < 0 or preds.max() >= n_groups
                       or trues.min() < 0 or trues.max() >= n_groups):
        raise DataError("group labels outside [0, n_groups)")
    m = np.zeros((n_groups, n_groups), dtype=np.float64)
    for p, t in zip(preds, trues):
        m[t, p] += 1.0
    return m


def qwk(preds, trues, n_groups: int = N_GROUPS) -> float:
    """Quadratic weighted kappa; nan when chance agreement is degenerate."""
    o = confusion(preds, trues, n_groups)
    n = o.sum()
    if n == 0:
        return float("nan")
    idx = np.arange(n_groups, dtype=np.float64)
    w = ((idx[:, None] - idx[None, :]) / (n_groups - 1)) ** 2
    e = np.outer(o.sum(axis=1), o.sum(axis=0)) / n
    denom = (w * e).sum()
    if denom == 0:
        return float("nan")
    return float(1.0 - (w * o).sum() / denom)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average-rank tie handling; nan if single-class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    pos_ranks = ranks[labels].sum()
    return float((pos_ranks - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(prob_rows, trues, n_groups: int = N_GROUPS):
    """Unweighted mean of one-vs-rest AUCs. Returns (value, skipped groups)."""
    probs = np.asarray(prob_rows, dtype=np.float64)
    trues = np.asarray(trues, dtype=np.int64)
    values, skipped = [], []
    for c in range(n_groups):
        pos = trues == c
        if pos.all() or not pos.any():
            skipped.append(c)
            continue
        values.append(auc(probs[:, c], pos))
    if not values:
        return float("nan"), skipped
    return float(np.mean(values)), skipped


def macro_f1(preds, trues, n_groups: int = N_GROUPS) -> float:
    m = confusion(preds, trues, n_groups)
    f1s = []
    for c in range(n_groups):
        tp = m[c, c]
        fp = m[:, c].sum() - tp
        fn = m[c, :].sum() - tp
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0)
    return float(np.mean(f1s))


def mcc(preds, trues, n_groups: int = N_GROUPS) -> float:
    """Multiclass MCC via the covariance formula; 0 sentinel when degenerate."""
    m = confusion(preds, trues, n_groups)
    s = m.sum()
    c = np.trace(m)
    t = m.sum(axis=1)  # true counts
    p = m.sum(axis=0)  # predicted counts
    num = c * s - float(t @ p)
    den = math.sqrt(float(s * s - p @ p)) * math.sqrt(float(s * s - t @ t))
    if den == 0:
        warnings.warn("MCC degenerate (single observed or predicted class); reporting 0")
        return 0.0
    return float(num / den)


def _roc_points(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise DataError("operating point needs both classes present")
    pts = []
    for thr in np.unique(scores):
        pred = scores >= thr
        sen = float((pred & labels).sum() / labels.sum())
        spe = float((~pred & ~labels).sum() / (~labels).sum())
        pts.append((sen, spe))
    return pts


def sen_at_spe(scores, labels, spe_target: float):
    """Max sensitivity among observed thresholds with specificity >= target.

    Returns (value, reached). No interpolation: if no threshold achieves the
    target the value is 0 and reached is False.
    """
    feasible = [sen for sen, spe in _roc_points(scores, labels) if spe >= spe_target]
    if not feasible:
        return 0.0, False
    return max(feasible), True


def spe_at_sen(scores, labels, sen_target: float):
    feasible = [spe for sen, spe in _roc_points(scores, labels) if sen >= sen_target]
    if not feasible:
        return 0.0, False
    return max(feasible), True


# --- unit assembly and the report protocol ---------------------------------


def risk_from_probs(probs: np.ndarray, threshold_group: int) -> np.ndarray:
    """Per-zone probability mass at or above the group."""
    probs = np.asarray(probs, dtype=np.float64)
    return probs[:, threshold_group:].sum(axis=1)


def _units(preds_by_case: dict, labels_by_case: dict, template, level: str):
    """(true_group, pred_group, risk_per_definition[, prob_row]) per unit."""
    if level == "zone":
        subsets = None
    elif level == "region":
        subsets = [template.region_ids(geometry.PZ), template.region_ids(geometry.TZ)]
        subsets = [s for s in subsets if s]
    elif level == "patient":
        subsets = [[z.id for z in template.zones]]
    else:
        raise DataError(f"unknown level {level!r}")
    trues, preds, probs = [], [], []
    risks = {name: [] for name in DEFINITION_ORDER}
    for case_id in sorted(preds_by_case):
        q = np.asarray(preds_by_case[case_id], dtype=np.float64)
        y = np.asarray(labels_by_case[case_id], dtype=np.int64)
        if q.shape != (len(template), N_GROUPS):
            raise DataError(f"{case_id}: prediction shape {q.shape} != "
                            f"({len(template)}, {N_GROUPS})")
        if len(y) != len(template):
            raise DataError(f"{case_id}: {len(y)} labels for {len(template)} zones")
        arg = q.argmax(axis=1)
        if level == "zone":
            trues.extend(int(v) for v in y)
            preds.extend(int(v) for v in arg)
            probs.extend(q)
            for name, thr in DEFINITIONS.items():
                risks[name].extend(risk_from_probs(q, thr))
        else:
            for subset in subsets:
                trues.append(int(y[subset].max()))
                preds.append(int(arg[subset].max()))
                for name, thr in DEFINITIONS.items():
                    risks[name].append(geometry.aggregate_risk(q, subset, thr))
    risks = {k: np.asarray(v) for k, v in risks.items()}
    return np.asarray(trues), np.asarray(preds), risks, np.asarray(probs) if probs else None


def evaluate(preds_by_case: dict, labels_by_case: dict, template):
    """Full single-run evaluation -> ordered list of report rows.

    ``preds_by_case`` maps case_id to an (n_zones, C) probability array;
    ``labels_by_case`` maps case_id to the zone label list.
    """
    missing = set(preds_by_case) ^ set(labels_by_case)
    if missing:
        raise DataError(f"case sets differ between predictions and labels: {sorted(missing)}")
    rows = []
    trues_z, preds_z, risks_z, probs_z = _units(preds_by_case, labels_by_case,
                                                template, "zone")
    rows.append(("zone", "grouped", "qwk", qwk(preds_z, trues_z)))
    rows.append(("zone", "grouped", "macro_f1", macro_f1(preds_z, trues_z)))
    rows.append(("zone", "grouped", "mcc", mcc(preds_z, trues_z)))
    rows.append(("zone", "grouped", "macro_auc", macro_auc(probs_z, trues_z)[0]))
    for level in LEVELS:
        trues, _, risks, _ = _units(preds_by_case, labels_by_case, template, level)
        for name in DEFINITION_ORDER:
            thr = DEFINITIONS[name]
            binary = trues >= thr
            score = risks[name]
            if binary.all() or not binary.any():
                vals = {m: float("nan") for m in BINARY_METRICS}
            else:
                vals = {
                    "auc": auc(score, binary),
                    "sen_at_spe80": sen_at_spe(score, binary, 0.80)[0],
                    "sen_at_spe90": sen_at_spe(score, binary, 0.90)[0],
                    "spe_at_sen80": spe_at_sen(score, binary, 0.80)[0],
                    "spe_at_sen90": spe_at_sen(score, binary, 0.90)[0],
                }
            for metric in BINARY_METRICS:
                rows.append((level, name, metric, vals[metric]))
    return rows


def rows_to_dict(rows) -> dict:
    return {(lv, d, m): v for lv, d, m, v in rows}


def write_report_csv(path, rows_per_seed):
    """Aggregate per-seed row lists into the report schema and write it.

    ``rows_per_seed`` is a list (one entry per seed) of evaluate() outputs.
    """
    if not rows_per_seed:
        raise DataError("no rows to report")
    keys = [(lv, d, m) for lv, d, m, _ in rows_per_seed[0]]
    per_seed = [rows_to_dict(r) for r in rows_per_seed]
    n = len(per_seed)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["level", "definition", "metric", "mean", "std", "n_seeds"])
        for key in keys:
            vals = np.array([d[key] for d in per_seed], dtype=np.float64)
            mean = float(vals.mean())
            std = float(vals.std(ddof=0)) if n > 1 else 0.0
            writer.writerow([key[0], key[1], key[2], _fmt(mean), _fmt(std), n])
        for line in FOOTER_LINES:
            f.write(line + "\n")


def read_report_csv(path) -> dict:
    out = {}
    with open(path) as f:
        reader = csv.reader(f)
        header = next(reader)
        for row in reader:
            if not row or row[0].startswith("#"):
                continue
            lv, d, m, mean, std, n = row
            out[(lv, d, m)] = (float(mean), float(std), int(n))
    return out


# --- predictions CSV (localizer output schema) -----------------------------

PRED_HEADER = ["case_id", "zone_id", "q0", "q1", "q2", "q3", "argmax",
               "risk_tertiary", "risk_primary", "risk_secondary"]


def write_predictions_csv(path, preds_by_case: dict):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PRED_HEADER)
        for case_id in sorted(preds_by_case):
            q = np.asarray(preds_by_case[case_id], dtype=np.float64)
            for r in range(q.shape[0]):
                row = [case_id, r] + [_fmt(v) for v in q[r]]
                row.append(int(q[r].argmax()))
                for name in DEFINITION_ORDER:
                    row.append(_fmt(risk_from_probs(q[r:r + 1], DEFINITIONS[name])[0]))
                writer.writerow(row)


def read_predictions_csv(path) -> dict:
    by_case = {}
    with open(path) as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != PRED_HEADER:
            raise DataError(f"{path}: unexpected predictions header {header}")
        for row in reader:
            if not row or row[0].startswith("#"):
                continue
            case_id = row[0]
            zone_id = int(row[1])
            by_case.setdefault(case_id, {})[zone_id] = [float(v) for v in row[2:6]]
    out = {}
    for case_id, zones in by_case.items():
        ids = sorted(zones)
        if ids != list(range(len(ids))):
            raise DataError(f"{case_id}: missing zone rows {sorted(set(range(max(ids) + 1)) - set(ids))}")
        out[case_id] = np.array([zones[i] for i in ids], dtype=np.float64)
    return out
