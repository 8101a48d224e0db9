"""Experiment configuration and run records.

A config is plain JSON validated against CONFIG_SCHEMA; missing fields take
the defaults below, and the filled-in config is what gets hashed and written
next to the results.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import jsonschema

from . import __version__
from .verify import digest

KINDS = ("certify-control", "verify-doob", "verify-tail", "aronson", "flow-converge", "density")


@dataclass
class ModelSpec:
    kind: str = "brownian"           # brownian | fbm | diffusion
    dim: int = 1
    x0: float | list = 0.0
    hurst: float | None = None
    drift: dict | None = None        # {"name": ..., "params": {...}} for diffusions
    noise_scale: float = 1.0


@dataclass
class GridSpec:
    t_start: float = 0.0
    t_end: float = 1.0
    n_steps: int = 1024


@dataclass
class ControlSpec:
    mode: str = "analytic"           # analytic | fit | given
    p: float = 4.0
    h: float | None = None
    A: float | None = None
    route: str = "unconditional"     # unconditional | nested
    n_paths: int = 100_000
    n_outer: int = 10_000
    n_inner: int = 64
    k_min: int = 1
    k_max: int = 8
    x0_nested: float | None = None


@dataclass
class DoobSpec:
    q: list = field(default_factory=lambda: [1.5, 2.0, 4.0])
    theta: float = 2.0
    n_boot: int = 1000
    confidence: float = 0.99
    window: list | None = None


@dataclass
class TailSpec:
    lambda_grid: list = field(default_factory=lambda: [2.0, 3.0, 4.0])
    statistic: str = "grid"          # grid | bridge (exact one-sided sup for unit diffusions)
    decay: dict | None = None        # {"alpha", "c1", "c2"}; None = Gaussian marginal of the model
    beta: float | None = None
    theta: float = 2.0
    n_max: int = 10**6
    fit_window: list | None = None
    confidence: float = 0.99


@dataclass
class AronsonSpec:
    l: float = 4.0
    q: float = 6.0
    d: int = 3
    Lambda: float = 0.0
    t: float = 0.5
    n_train: int = 20_000
    n_bins: int = 24
    min_count: int = 30
    slack: float = 0.25
    confidence: float = 0.99


@dataclass
class FlowSpec:
    drift: dict = field(default_factory=lambda: {"name": "planar_vortex", "params": {}})
    levels: list = field(default_factory=lambda: [4, 8, 16, 32])
    schedule_mode: str = "potential_cutoff"
    r0: float = 2.0
    eps: list | None = None
    n_noise: int = 64
    n_points: int = 4096
    r: float = 1.0
    k: float = 2.0
    norm_p: float = 1.25
    max_ratio: float = 0.8
    log_tolerance: float = 0.25
    cap: float | None = 1.0
    residual: bool = True
    confidence: float = 0.99


@dataclass
class DensitySpec:
    drift: dict = field(default_factory=lambda: {"name": "abc", "params": {}})
    source: str = "ball"             # ball | box
    r: float = 1.0
    n_points: int = 4096
    t: float = 0.5
    noise_scale: float = 0.0
    n_noise: int = 1
    noise_index: int = 0
    bin_cells: int = 2
    tol: float = 0.05
    coverage: float = 0.95


@dataclass
class ExperimentConfig:
    kind: str
    master_seed: int = 0
    n_paths: int = 100_000
    model: ModelSpec = field(default_factory=ModelSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    control: ControlSpec = field(default_factory=ControlSpec)
    doob: DoobSpec = field(default_factory=DoobSpec)
    tail: TailSpec = field(default_factory=TailSpec)
    aronson: AronsonSpec = field(default_factory=AronsonSpec)
    flow: FlowSpec = field(default_factory=FlowSpec)
    density: DensitySpec = field(default_factory=DensitySpec)
    output_dir: str | None = None

    SECTIONS = {"model": ModelSpec, "grid": GridSpec, "control": ControlSpec, "doob": DoobSpec,
                "tail": TailSpec, "aronson": AronsonSpec, "flow": FlowSpec, "density": DensitySpec}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        validate(d)
        kw = dict(d)
        for name, sec in cls.SECTIONS.items():
            if name in kw:
                kw[name] = sec(**kw[name])
        cfg = cls(**kw)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @property
    def digest(self) -> str:
        """Content hash of everything that determines numeric output."""
        d = self.to_dict()
        d.pop("output_dir")
        return digest(d)

    def check(self):
        """Cross-field validation beyond the schema."""
        c = self.control
        if self.kind == "verify-doob":
            for q in self.doob.q:
                if not 1 < q <= c.p:
                    raise ValueError(f"verify-doob needs 1 < q <= p; got q={q} with p={c.p}")
        if c.mode == "given" and (c.h is None or c.A is None):
            raise ValueError("control mode 'given' needs h and A")
        if self.model.kind == "fbm" and self.model.hurst is None:
            raise ValueError("fbm model needs hurst")
        if self.model.kind == "diffusion" and not self.model.drift:
            raise ValueError("diffusion model needs a drift spec")
        if self.kind == "flow-converge" and len(self.flow.levels) < 3:
            raise ValueError("flow-converge needs at least 3 levels")


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_NUMS = {"type": "array", "items": _NUM}


def _section(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


CONFIG_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": list(KINDS)},
        "master_seed": {"type": "integer", "minimum": 0},
        "n_paths": {"type": "integer", "minimum": 2},
        "output_dir": {"type": ["string", "null"]},
        "model": _section({"kind": {"enum": ["brownian", "fbm", "diffusion"]},
                           "dim": {"type": "integer", "minimum": 1},
                           "x0": {"type": ["number", "array"]},
                           "hurst": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                           "drift": {"type": ["object", "null"]}, "noise_scale": _NUM}),
        "grid": _section({"t_start": _NUM, "t_end": _NUM, "n_steps": {"type": "integer", "minimum": 1}}),
        "control": _section({"mode": {"enum": ["analytic", "fit", "given"]},
                             "p": {"type": "number", "exclusiveMinimum": 1},
                             "h": {"type": ["number", "null"]}, "A": {"type": ["number", "null"]},
                             "route": {"enum": ["unconditional", "nested"]}, "n_paths": _INT,
                             "n_outer": _INT, "n_inner": _INT, "k_min": _INT, "k_max": _INT,
                             "x0_nested": {"type": ["number", "null"]}}),
        "doob": _section({"q": _NUMS, "theta": {"type": "number", "exclusiveMinimum": 1},
                          "n_boot": _INT, "confidence": _NUM,
                          "window": {"type": ["array", "null"], "items": _NUM}}),
        "tail": _section({"lambda_grid": _NUMS, "statistic": {"enum": ["grid", "bridge"]},
                          "decay": {"type": ["object", "null"]}, "beta": {"type": ["number", "null"]},
                          "theta": _NUM, "n_max": _INT,
                          "fit_window": {"type": ["array", "null"], "items": _NUM}, "confidence": _NUM}),
        "aronson": _section({"l": _NUM, "q": {"type": ["number", "string"]}, "d": _INT, "Lambda": _NUM,
                             "t": _NUM, "n_train": _INT, "n_bins": _INT, "min_count": _INT,
                             "slack": _NUM, "confidence": _NUM}),
        "flow": _section({"drift": {"type": "object"}, "levels": {"type": "array", "items": _INT},
                          "schedule_mode": {"enum": ["potential_cutoff", "direct_mollify", "direct_cutoff"]},
                          "r0": _NUM, "eps": {"type": ["array", "null"], "items": _NUM},
                          "n_noise": _INT, "n_points": _INT, "r": _NUM, "k": _NUM, "norm_p": _NUM,
                          "max_ratio": _NUM, "log_tolerance": _NUM, "cap": {"type": ["number", "null"]},
                          "residual": {"type": "boolean"}, "confidence": _NUM}),
        "density": _section({"drift": {"type": "object"}, "source": {"enum": ["ball", "box"]}, "r": _NUM,
                             "n_points": _INT, "t": _NUM, "noise_scale": _NUM, "n_noise": _INT,
                             "noise_index": _INT, "bin_cells": _INT, "tol": _NUM, "coverage": _NUM}),
    },
}


def validate(d: dict):
    try:
        jsonschema.validate(d, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(map(str, e.absolute_path)) or "<root>"
        raise ValueError(f"invalid config at {where}: {e.message}") from None


def defaults(kind: str) -> dict:
    """Fully populated config for ``kind``, suitable as a starting point."""
    return ExperimentConfig(kind).to_dict()


# -- run records ------------------------------------------------------------------------

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunRecord:
    config_digest: str
    kind: str
    status: str
    exit_code: int
    started: str
    finished: str
    files: dict = field(default_factory=dict)       # relative name -> sha256
    artifact_version: str = __version__
    workers: int | None = None
    timing_s: float | None = None

    def add(self, run_dir, name):
        self.files[name] = file_sha256(os.path.join(run_dir, name))

    def verify(self, run_dir) -> bool:
        return all(file_sha256(os.path.join(run_dir, n)) == h for n, h in self.files.items())

    def save(self, run_dir):
        with open(os.path.join(run_dir, "run_record.json"), "w") as fh:
            json.dump(dataclasses.asdict(self), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        with open(os.path.join(run_dir, "run_record.json")) as fh:
            return cls(**json.load(fh))
