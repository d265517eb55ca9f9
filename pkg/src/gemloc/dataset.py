"""On-disk dataset layout and the modality access guard.

A dataset directory holds ``template.json``, ``manifest.json``, and one
subdirectory per case with ``anat.rvol`` (observed modality x_o),
``func.rvol`` (latent modality x_z), and ``labels.json``.

CaseStore is the only sanctioned read path. It records every volume read
and enforces an allowed-modality set, so tests can prove an inference run
never touched the functional volumes.
"""

from __future__ import annotations

import json
import os

from gemloc import geometry
from gemloc.errors import DataAccessError, DataError, MissingPrerequisiteError
from gemloc.volume import Volume, load_volume, save_volume

ANAT = "anat"  # observed modality, available at inference
FUNC = "func"  # latent modality, training-only
MODALITIES = (ANAT, FUNC)
SPLITS = ("train", "val", "test")


def case_dir(root, case_id):
    return os.path.join(root, "cases", case_id)


def write_case(root, case_id, x_o: Volume, x_z: Volume, labels: dict):
    d = case_dir(root, case_id)
    os.makedirs(d, exist_ok=True)
    save_volume(os.path.join(d, ANAT + ".rvol"), x_o)
    save_volume(os.path.join(d, FUNC + ".rvol"), x_z)
    with open(os.path.join(d, "labels.json"), "w") as f:
        json.dump(labels, f, indent=1, sort_keys=True)
        f.write("\n")


def write_manifest(root, manifest: dict):
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_manifest(root) -> dict:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise MissingPrerequisiteError(f"no manifest.json under {root}")
    with open(path) as f:
        return json.load(f)


class CaseStore:
    """Reader for a dataset directory with modality-level access control."""

    def __init__(self, root, allowed_modalities=MODALITIES):
        self.root = str(root)
        self.allowed = frozenset(allowed_modalities)
        unknown = self.allowed - set(MODALITIES)
        if unknown:
            raise DataError(f"unknown modalities {sorted(unknown)}")
        self.manifest = load_manifest(self.root)
        self.access_log = []  # (case_id, modality) in read order
        tpath = os.path.join(self.root, "template.json")
        if not os.path.exists(tpath):
            raise MissingPrerequisiteError(f"no template.json under {self.root}")
        self.template, self.graph = geometry.load_template(tpath)

    def case_ids(self, split: str):
        if split == "all":
            out = []
            for s in SPLITS:
                out.extend(self.manifest["splits"][s])
            return out
        if split not in self.manifest["splits"]:
            raise DataError(f"unknown split {split!r}")
        return list(self.manifest["splits"][split])

    def load_volume(self, case_id: str, modality: str) -> Volume:
        if modality not in MODALITIES:
            raise DataError(f"unknown modality {modality!r}")
        if modality not in self.allowed:
            raise DataAccessError(
                f"read of {modality!r} for case {case_id} violates the "
                f"allowed set {sorted(self.allowed)}")
        self.access_log.append((case_id, modality))
        path = os.path.join(case_dir(self.root, case_id), modality + ".rvol")
        if not os.path.exists(path):
            raise MissingPrerequisiteError(f"missing volume {path}")
        return load_volume(path)

    def labels(self, case_id: str) -> dict:
        path = os.path.join(case_dir(self.root, case_id), "labels.json")
        if not os.path.exists(path):
            raise MissingPrerequisiteError(f"missing labels {path}")
        with open(path) as f:
            return json.load(f)

    def zone_labels(self, case_id: str):
        return list(self.labels(case_id)["zone_labels"])
