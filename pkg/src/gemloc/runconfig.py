"""One-document run configuration shared by every CLI command.

The configuration is a flat JSON object with one section per stage plus a
top-level seed list. Unknown sections or keys are rejected so typos fail
loudly instead of silently training with defaults. CLI flags override
config keys via dotted paths ("gem.alpha"), and every command snapshots
the effective document into its run directory so a run can be reproduced
from the snapshot alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from gemloc.errors import ConfigError
from gemloc.flowgen import FlowConfig
from gemloc.gem import GemConfig
from gemloc.latentspace import AEConfig
from gemloc.localizer import LocalizerConfig
from gemloc.phantom import PhantomConfig

DEFAULT_SEEDS = (1, 2, 3)


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"eval split must be train/val/test, got {self.split!r}")


SECTIONS = {
    "phantom": PhantomConfig,
    "ae": AEConfig,
    "flow": FlowConfig,
    "localizer": LocalizerConfig,
    "gem": GemConfig,
    "eval": EvalConfig,
}

# Full-scale profile: restores the published training recipe (128 cubed
# grids, batch/lr/epoch settings) for hardware that can carry it. Widths
# stay at package defaults; only grid and schedule values change.
PAPER_SCALE = {
    "phantom.grid": 128,
    "ae.grid": 128,
    "ae.batch": 2,
    "ae.lr": 1e-4,
    "ae.epochs": 50,
    "flow.batch": 12,
    "flow.lr": 1e-4,
    "flow.epochs": 50,
    "flow.ode_steps": 30,
    "localizer.batch": 12,
    "localizer.lr": 1e-4,
    "localizer.epochs": 50,
    "localizer.multi_level": True,
    "gem.batch": 12,
    "gem.lr": 1e-5,
    "gem.epochs": 50,
    "gem.alpha": 0.1,
}


@dataclass
class RunConfig:
    phantom: PhantomConfig
    ae: AEConfig
    flow: FlowConfig
    localizer: LocalizerConfig
    gem: GemConfig
    eval: EvalConfig
    seeds: tuple = DEFAULT_SEEDS

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if self.ae.grid != self.phantom.grid:
            raise ConfigError(
                f"ae.grid ({self.ae.grid}) must match phantom.grid ({self.phantom.grid})")
        if self.flow.c_lat != self.ae.c_lat:
            raise ConfigError(
                f"flow.c_lat ({self.flow.c_lat}) must match ae.c_lat ({self.ae.c_lat})")


def default_doc() -> dict:
    return to_doc(RunConfig(**{name: cls() for name, cls in SECTIONS.items()}))


def to_doc(cfg: RunConfig) -> dict:
    """JSON-ready dict (tuples become lists)."""
    doc = {}
    for name in SECTIONS:
        section = dataclasses.asdict(getattr(cfg, name))
        doc[name] = {k: (list(v) if isinstance(v, tuple) else v)
                     for k, v in section.items()}
    doc["seeds"] = list(cfg.seeds)
    return doc


def from_doc(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config must be a JSON object, got {type(doc).__name__}")
    unknown = set(doc) - set(SECTIONS) - {"seeds"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    kwargs = {}
    for name, cls in SECTIONS.items():
        sub = doc.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"section {name!r} must be an object, got {type(sub).__name__}")
        fields = {f.name for f in dataclasses.fields(cls)}
        bad = set(sub) - fields
        if bad:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
        try:
            kwargs[name] = cls(**sub)
        except TypeError as e:
            raise ConfigError(f"section {name!r}: {e}") from None
    seeds = doc.get("seeds", list(DEFAULT_SEEDS))
    if not isinstance(seeds, (list, tuple)) or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError(f"seeds must be a list of ints, got {seeds!r}")
    return RunConfig(seeds=tuple(seeds), **kwargs)


def apply_overrides(doc: dict, overrides: dict) -> dict:
    """New doc with dotted-path overrides applied ("gem.alpha" -> 0.2).

    The top-level key "seeds" is also accepted. Unknown paths raise.
    """
    out = json.loads(json.dumps(doc))
    for path, value in overrides.items():
        if path == "seeds":
            out["seeds"] = list(value)
            continue
        if "." not in path:
            raise ConfigError(f"override {path!r} must be section.key or 'seeds'")
        section, key = path.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        fields = {f.name for f in dataclasses.fields(SECTIONS[section])}
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        out.setdefault(section, {})[key] = value
    return out


def load_doc(path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def resolve(config_path=None, paper_scale: bool = False, overrides=None):
    """(RunConfig, effective doc) from file + profile + flag overrides.

    Precedence, lowest to highest: package defaults, config file,
    --paper-scale profile, individual CLI flags.
    """
    doc = default_doc()
    if config_path is not None:
        file_doc = load_doc(config_path)
        merged = apply_overrides(doc, {})
        for name in SECTIONS:
            if name in file_doc:
                merged[name].update(file_doc[name])
        if "seeds" in file_doc:
            merged["seeds"] = file_doc["seeds"]
        unknown = set(file_doc) - set(SECTIONS) - {"seeds"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        doc = merged
    if paper_scale:
        doc = apply_overrides(doc, PAPER_SCALE)
    if overrides:
        doc = apply_overrides(doc, overrides)
    cfg = from_doc(doc)
    return cfg, to_doc(cfg)


def dump_doc(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_snapshot(path, doc: dict):
    with open(path, "w") as f:
        f.write(dump_doc(doc))
