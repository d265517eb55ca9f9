"""Zone template, zone graph, PZ/TZ assignment, and risk aggregation.

Zones form a parametric lattice over the gland bounding box: a stand-in for
the Barzell sector scheme that keeps the pieces downstream code consumes
(bounding boxes, centers, PZ/TZ tags, a kNN neighborhood graph).

Conventions: volume axes are (d, h, w); bounding boxes are half-open voxel
ranges (d0, h0, w0, d1, h1, w1); centers are voxel-center coordinates, so a
box [lo, hi) has center (lo + hi - 1) / 2 per axis. Distances are Euclidean
in voxel units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from gemloc.errors import GeometryError

PZ = "PZ"
TZ = "TZ"


@dataclass(frozen=True)
class Zone:
    id: int
    bbox: tuple  # (d0, h0, w0, d1, h1, w1), half-open
    center: tuple  # (d, h, w) floats
    region: str = ""  # "PZ" | "TZ" | "" before assignment


@dataclass(frozen=True)
class ZoneTemplate:
    zones: tuple
    grid_dims: tuple
    graph_k: int = 3

    def __len__(self):
        return len(self.zones)

    @property
    def centers(self) -> np.ndarray:
        return np.array([z.center for z in self.zones], dtype=np.float64)

    def zone(self, zone_id: int) -> Zone:
        return self.zones[zone_id]

    def region_ids(self, region: str):
        out = [z.id for z in self.zones if z.region == region]
        return out


@dataclass(frozen=True)
class ZoneGraph:
    edges: tuple  # sorted tuple of (a, b) pairs with a < b
    n_zones: int

    def neighbors(self, r: int):
        out = []
        for a, b in self.edges:
            if a == r:
                out.append(b)
            elif b == r:
                out.append(a)
        return sorted(out)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_zones, self.n_zones), dtype=np.float64)
        for i, j in self.edges:
            a[i, j] = 1.0
            a[j, i] = 1.0
        return a


def _split_range(lo: int, hi: int, parts: int):
    """Half-open subranges of [lo, hi), sizes differing by at most 1."""
    edges = np.linspace(lo, hi, parts + 1).round().astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(parts)]


def build_template(grid_dims, gland_bbox, parts=(2, 5, 2), roi_out: int = 4,
                   graph_k: int = 3) -> ZoneTemplate:
    """Tile the gland bbox with a lat x ap x depth lattice of zones.

    ``parts`` is (n_lat, n_ap, n_depth) mapped to the (w, h, d) axes; the
    default 2x5x2 yields 20 zones. Zone ids are dense, ordered row-major
    over (depth, ap, lat) parts.
    """
    grid_dims = tuple(int(g) for g in grid_dims)
    n_lat, n_ap, n_depth = (int(p) for p in parts)
    if min(n_lat, n_ap, n_depth) < 1:
        raise GeometryError(f"partition counts must be >= 1, got {parts}")
    d0, h0, w0, d1, h1, w1 = (int(v) for v in gland_bbox)
    if not (0 <= d0 < d1 <= grid_dims[0] and 0 <= h0 < h1 <= grid_dims[1]
            and 0 <= w0 < w1 <= grid_dims[2]):
        raise GeometryError(f"gland bbox {gland_bbox} outside grid {grid_dims}")
    d_ranges = _split_range(d0, d1, n_depth)
    h_ranges = _split_range(h0, h1, n_ap)
    w_ranges = _split_range(w0, w1, n_lat)
    zones = []
    zid = 0
    for dz in d_ranges:
        for hy in h_ranges:
            for wx in w_ranges:
                bbox = (dz[0], hy[0], wx[0], dz[1], hy[1], wx[1])
                ext = (dz[1] - dz[0], hy[1] - hy[0], wx[1] - wx[0])
                if min(ext) < roi_out:
                    raise GeometryError(
                        f"zone {zid} extent {ext} smaller than RoI output {roi_out}; "
                        f"use fewer partitions or a larger gland")
                center = tuple((bbox[i] + bbox[i + 3] - 1) / 2.0 for i in range(3))
                zones.append(Zone(id=zid, bbox=bbox, center=center))
                zid += 1
    return ZoneTemplate(zones=tuple(zones), grid_dims=grid_dims, graph_k=graph_k)


def assign_pz_tz(template: ZoneTemplate, pz_mask: np.ndarray, tz_mask: np.ndarray):
    """Tag each zone by majority voxel overlap; ties go to TZ.

    Returns the list of region strings in zone-id order.
    """
    pz_mask = np.asarray(pz_mask).astype(bool)
    tz_mask = np.asarray(tz_mask).astype(bool)
    if pz_mask.shape != template.grid_dims or tz_mask.shape != template.grid_dims:
        raise GeometryError(
            f"mask shapes {pz_mask.shape}/{tz_mask.shape} != grid {template.grid_dims}")
    regions = []
    for z in template.zones:
        d0, h0, w0, d1, h1, w1 = z.bbox
        pz_n = int(pz_mask[d0:d1, h0:h1, w0:w1].sum())
        tz_n = int(tz_mask[d0:d1, h0:h1, w0:w1].sum())
        if pz_n == 0 and tz_n == 0:
            raise GeometryError(f"zone {z.id} overlaps neither PZ nor TZ mask")
        regions.append(PZ if pz_n > tz_n else TZ)
    return regions


def with_regions(template: ZoneTemplate, regions) -> ZoneTemplate:
    if len(regions) != len(template):
        raise GeometryError(f"{len(regions)} regions for {len(template)} zones")
    zones = tuple(replace(z, region=r) for z, r in zip(template.zones, regions))
    return ZoneTemplate(zones=zones, grid_dims=template.grid_dims, graph_k=template.graph_k)


def knn_graph(template: ZoneTemplate, k: int) -> ZoneGraph:
    """Union-symmetrized k-nearest-neighbor graph over zone centers.

    Neighbor order is by (squared distance, zone id), so duplicate centers
    break ties deterministically.
    """
    n = len(template)
    if not 1 <= k < n:
        raise GeometryError(f"need 1 <= k < n_zones, got k={k}, n={n}")
    centers = template.centers
    edges = set()
    for r in range(n):
        d2 = ((centers - centers[r]) ** 2).sum(axis=1)
        order = sorted((float(d2[j]), j) for j in range(n) if j != r)
        for _, j in order[:k]:
            edges.add((min(r, j), max(r, j)))
    return ZoneGraph(edges=tuple(sorted(edges)), n_zones=n)


def aggregate_risk(zone_probs: np.ndarray, zone_subset, threshold_group: int) -> float:
    """Max over the subset of each zone's probability mass at or above the group."""
    probs = np.asarray(zone_probs, dtype=np.float64)
    subset = list(zone_subset)
    if not subset:
        raise GeometryError("aggregate_risk: empty zone subset")
    if probs.ndim != 2:
        raise GeometryError(f"zone_probs must be (n_zones, C), got {probs.shape}")
    c = probs.shape[1]
    if not 0 <= threshold_group < c:
        raise GeometryError(f"threshold group {threshold_group} outside [0, {c})")
    best = 0.0
    for r in subset:
        best = max(best, float(probs[r, threshold_group:].sum()))
    return best


# --- serialization ---------------------------------------------------------


def template_to_json(template: ZoneTemplate, graph: ZoneGraph) -> dict:
    return {
        "grid_dims": list(template.grid_dims),
        "graph_k": template.graph_k,
        "zones": [
            {"id": z.id, "bbox": list(z.bbox),
             "center": [float(c) for c in z.center], "region": z.region}
            for z in template.zones
        ],
        "graph_edges": [list(e) for e in graph.edges],
    }


def template_from_json(doc: dict):
    zones = tuple(
        Zone(id=int(z["id"]), bbox=tuple(int(v) for v in z["bbox"]),
             center=tuple(float(c) for c in z["center"]), region=z.get("region", ""))
        for z in sorted(doc["zones"], key=lambda z: z["id"])
    )
    template = ZoneTemplate(zones=zones, grid_dims=tuple(doc["grid_dims"]),
                            graph_k=int(doc.get("graph_k", 3)))
    edges = tuple(sorted(tuple(int(v) for v in e) for e in doc["graph_edges"]))
    graph = ZoneGraph(edges=edges, n_zones=len(zones))
    return template, graph


def save_template(path, template: ZoneTemplate, graph: ZoneGraph):
    with open(path, "w") as f:
        json.dump(template_to_json(template, graph), f, indent=1, sort_keys=True)
        f.write("\n")


def load_template(path):
    with open(path) as f:
        return template_from_json(json.load(f))
