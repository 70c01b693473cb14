"""Run configuration: a flat document of dotted keys (TOML syntax), strictly validated."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli

from .errors import ConfigError

# (key, type, default, help) -- the single source of truth for the file format.
SCHEMA: list[tuple[str, type, Any, str]] = [
    ("dataset.kind", str, "synthetic-shapes", "synthetic-shapes | image-folder"),
    ("dataset.path", str, "", "image-folder root (one subdirectory per integer label)"),
    ("dataset.public_size", int, 64, "synthetic images in the public diffusion training set"),
    ("dataset.public_seed", int, 100, "seed of the public synthetic set"),
    ("dataset.private_size", int, 8, "synthetic images in the private set whose gradients leak"),
    ("dataset.private_seed", int, 7, "seed of the private synthetic set"),
    ("dataset.targets", list, [0], "indices of attacked private images"),
    ("dataset.reference", int, 0, "index of the public reference image (batch slot j uses reference + j)"),
    ("image.size", list, [16, 16, 3], "H, W, C"),
    ("target.model", str, "dlg-lenet", "dlg-lenet | linear"),
    ("target.num_classes", int, 10, "classifier outputs"),
    ("target.seed", int, 1, "weight initialisation seed"),
    ("target.checkpoint", str, "", "load trained weights from this file instead of initialising"),
    ("diffusion.T", int, 1000, "diffusion steps"),
    ("diffusion.beta_start", float, 1e-4, "first beta of the linear schedule"),
    ("diffusion.beta_end", float, 0.02, "last beta of the linear schedule"),
    ("diffusion.architecture", str, "unet-16-32", "epsilon network"),
    ("diffusion.train_steps", int, 3000, "training updates when no checkpoint exists"),
    ("diffusion.batch_size", int, 32, "training batch size"),
    ("diffusion.lr", float, 2e-3, "training learning rate (cosine-annealed)"),
    ("diffusion.seed", int, 0, "network init and training seed"),
    ("diffusion.train_precision", str, "single", "single | double; the model is cast to run.precision after training"),
    ("diffusion.checkpoint", str, "", "load from here if present, otherwise train and save here"),
    ("sampler.kind", str, "ddim", "ddim | ddpm"),
    ("sampler.S_for", int, 40, "forward sub-steps over [1, t0]"),
    ("sampler.S_gen", int, 6, "reverse sub-steps over [1, t0]"),
    ("sampler.t0", int, 500, "return step"),
    ("sampler.seed", int, -1, "forward-chain seed; -1 derives it from run.master_seed"),
    ("attack.method", str, "ggdm", "ggdm | dlg"),
    ("attack.max_iterations", int, 200, "fine-tuning iterations (dlg: gradient steps)"),
    ("attack.eta", float, 2e-4, "initial learning rate"),
    ("attack.gamma", float, 0.98, "per-iteration learning-rate decay"),
    ("attack.batch_size", int, 1, "leaked gradients averaged per fine-tuned model"),
    ("attack.snapshot_every", int, 10, "snapshot period (iteration 1 and the last are always kept)"),
    ("attack.seed", int, -1, "dlg dummy-image seed; -1 derives it from run.master_seed"),
    ("attack.dlg_step", float, 0.0, "dlg gradient step; 0 picks the per-model default"),
    ("defense.family", str, "none", "none | gaussian | laplacian"),
    ("defense.variance", float, 0.0, "per-element noise variance"),
    ("defense.seed", int, -1, "noise seed; -1 derives it from run.master_seed"),
    ("run.master_seed", int, 0, "root of every derived random stream"),
    ("run.output_dir", str, "runs/default", "run directory"),
    ("run.precision", str, "double", "double | single"),
    ("run.trace_wall_time", bool, False, "write measured wall_ms into trace.csv (breaks byte reproducibility)"),
]

SCHEMA_KEYS = {k: (t, d) for k, t, d, _ in SCHEMA}

SWEEP_SCHEMA: list[tuple[str, type, Any, str]] = [
    ("sweep.axis", str, "eta", "t0 | s_for_s_gen | eta | gamma | batch_size | epochs_K"),
    ("sweep.values", list, [], "axis values (s_for_s_gen takes [S_for, S_gen] pairs)"),
    ("sweep.mode", str, "attack", "attack | roundtrip (diffusion round trip only, no attack)"),
    ("sweep.workers", int, 1, "concurrent runs"),
]
SWEEP_AXES = ("t0", "s_for_s_gen", "eta", "gamma", "batch_size", "epochs_K")


def _flatten(doc, prefix=""):
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, value, typ):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is bool and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if typ is int and isinstance(value, bool):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if not isinstance(value, typ):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")
    return value


@dataclass
class RunConfig:
    """Every schema key mapped to its value, e.g. ``cfg["attack.eta"]``."""

    values: dict = field(default_factory=lambda: {k: _copy(d) for k, (_, d) in SCHEMA_KEYS.items()})

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def with_updates(self, updates: dict) -> RunConfig:
        new = RunConfig({k: _copy(v) for k, v in self.values.items()})
        for key, value in updates.items():
            if key not in SCHEMA_KEYS:
                raise ConfigError(f"unknown configuration key {key!r}")
            new.values[key] = _coerce(key, value, SCHEMA_KEYS[key][0])
        new.validate()
        return new

    @property
    def image_size(self):
        return tuple(int(v) for v in self["image.size"])

    def validate(self):
        v = self.values
        if v["dataset.kind"] not in ("synthetic-shapes", "image-folder"):
            raise ConfigError(f"dataset.kind must be synthetic-shapes or image-folder, got {v['dataset.kind']!r}")
        if v["dataset.kind"] == "image-folder" and not v["dataset.path"]:
            raise ConfigError("dataset.path is required for image-folder datasets")
        if len(v["image.size"]) != 3:
            raise ConfigError("image.size must be [H, W, C]")
        if not v["dataset.targets"]:
            raise ConfigError("dataset.targets must list at least one image")
        if v["attack.method"] not in ("ggdm", "dlg"):
            raise ConfigError(f"attack.method must be ggdm or dlg, got {v['attack.method']!r}")
        if v["defense.family"] not in ("none", "gaussian", "laplacian"):
            raise ConfigError(f"defense.family must be none, gaussian or laplacian, got {v['defense.family']!r}")
        if v["defense.variance"] < 0:
            raise ConfigError("defense.variance must be >= 0")
        if v["run.precision"] not in ("single", "double"):
            raise ConfigError("run.precision must be single or double")
        if v["diffusion.train_precision"] not in ("single", "double"):
            raise ConfigError("diffusion.train_precision must be single or double")
        if v["sampler.kind"] not in ("ddim", "ddpm"):
            raise ConfigError("sampler.kind must be ddim or ddpm")
        if not 1 <= v["sampler.t0"] <= v["diffusion.T"]:
            raise ConfigError("sampler.t0 must lie in [1, diffusion.T]")
        if v["sampler.S_for"] > v["sampler.t0"] or v["sampler.S_gen"] > v["sampler.t0"]:
            raise ConfigError("sampler.S_for and sampler.S_gen must not exceed sampler.t0")
        return self

    def to_text(self) -> str:
        lines = []
        section = None
        for key, _, _, help_text in SCHEMA:
            head = key.split(".")[0]
            if head != section:
                if section is not None:
                    lines.append("")
                section = head
            lines.append(f"{key} = {_toml_value(self.values[key])}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())


def _copy(v):
    return list(v) if isinstance(v, list) else v


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        if math.isinf(v) or math.isnan(v):
            raise ConfigError("non-finite values are not representable")
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)


def parse_text(text: str, allowed=None) -> dict:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    flat = _flatten(doc)
    allowed = SCHEMA_KEYS if allowed is None else allowed
    unknown = sorted(set(flat) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    return flat


def load_config(path) -> RunConfig:
    flat = parse_text(Path(path).read_text())
    return RunConfig().with_updates(flat)


@dataclass
class SweepSpec:
    axis: str
    values: list
    base: RunConfig
    mode: str = "attack"
    workers: int = 1

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {SWEEP_AXES}")
        if not self.values:
            raise ConfigError("sweep.values must not be empty")
        if self.mode not in ("attack", "roundtrip"):
            raise ConfigError("sweep.mode must be attack or roundtrip")
        for value in self.values:
            self.config_for(value, 0)  # validates every value against the base

    def updates_for(self, value) -> dict:
        if self.axis == "t0":
            return {"sampler.t0": int(value)}
        if self.axis == "s_for_s_gen":
            s_for, s_gen = value
            return {"sampler.S_for": int(s_for), "sampler.S_gen": int(s_gen)}
        if self.axis == "eta":
            return {"attack.eta": float(value)}
        if self.axis == "gamma":
            return {"attack.gamma": float(value)}
        if self.axis == "batch_size":
            return {"attack.batch_size": int(value)}
        return {"attack.max_iterations": int(value)}

    def config_for(self, value, index) -> RunConfig:
        out = Path(self.base["run.output_dir"]) / f"{self.axis}_{index:03d}"
        return self.base.with_updates({**self.updates_for(value), "run.output_dir": str(out)})


def load_sweep(path) -> SweepSpec:
    sweep_keys = {k: (t, d) for k, t, d, _ in SWEEP_SCHEMA}
    flat = parse_text(Path(path).read_text(), allowed={**SCHEMA_KEYS, **sweep_keys})
    sweep = {k: _coerce(k, flat.pop(k), sweep_keys[k][0]) for k in list(flat) if k in sweep_keys}
    base = RunConfig().with_updates(flat)
    return SweepSpec(
        axis=sweep.get("sweep.axis", "eta"),
        values=list(sweep.get("sweep.values", [])),
        base=base,
        mode=sweep.get("sweep.mode", "attack"),
        workers=sweep.get("sweep.workers", 1),
    )


def derive_seed(master_seed: int, run_index: int, stream: str) -> int:
    """Independent 31-bit seed for (master_seed, run_index, stream)."""
    tag = int.from_bytes(stream.encode()[:8].ljust(8, b"\0"), "little")
    ss = np.random.SeedSequence([int(master_seed), int(run_index), tag])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def schema_markdown() -> str:
    rows = ["| key | type | default | meaning |", "|---|---|---|---|"]
    for key, typ, default, help_text in SCHEMA + SWEEP_SCHEMA:
        rows.append(f"| `{key}` | {typ.__name__} | `{_toml_value(default)}` | {help_text} |")
    return "\n".join(rows) + "\n"


__all__ = [
    "RunConfig", "SweepSpec", "SCHEMA", "SWEEP_SCHEMA", "load_config", "load_sweep",
    "derive_seed", "schema_markdown", "parse_text",
]
