"""JSON run configuration: strict loading (unknown keys rejected), canonical echo, config hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any

from .data import MixtureSpec, SplitSpec
from .diffusion import DiffusionConfig, GuidanceConfig
from .numcore import ConfigError
from .pipeline import PipelineConfig
from .ssl_classifier import MsnConfig, ProbeConfig

TOP_KEYS = ("mixture", "split", "msn", "probe", "diffusion", "pipeline", "output_dir")
PIPELINE_KEYS = ("K", "k_grid", "refinement_rounds", "refine_finetune", "heldout_per_class", "seed")
RING_KEYS = ("num_classes", "radius", "var", "samples_per_class", "seed")


def _check_keys(d: Any, allowed, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _build(cls, d: dict, where: str, nested: dict | None = None):
    nested = nested or {}
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(d, names, where)
    kwargs = dict(d)
    for key, sub in nested.items():
        if key in kwargs:
            kwargs[key] = _build(sub, kwargs[key], f"{where}.{key}")
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def _mixture(d: dict) -> MixtureSpec:
    if "means" in d or "covs" in d:
        return _build(MixtureSpec, d, "mixture")
    _check_keys(d, RING_KEYS, "mixture")
    try:
        return MixtureSpec.ring(**d)
    except TypeError as e:
        raise ConfigError(f"mixture: {e}") from None


@dataclasses.dataclass
class RunConfig:
    pipeline: PipelineConfig
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _check_keys(doc, TOP_KEYS, "config")
        kw = {}
        if "mixture" in doc:
            kw["mixture"] = _mixture(doc["mixture"])
        if "split" in doc:
            kw["split"] = _build(SplitSpec, doc["split"], "split")
        if "msn" in doc:
            kw["msn"] = _build(MsnConfig, doc["msn"], "msn")
        if "probe" in doc:
            kw["probe"] = _build(ProbeConfig, doc["probe"], "probe")
        if "diffusion" in doc:
            kw["diffusion"] = _build(DiffusionConfig, doc["diffusion"], "diffusion", {"guidance": GuidanceConfig})
        pipe = doc.get("pipeline", {})
        _check_keys(pipe, PIPELINE_KEYS, "pipeline")
        try:
            cfg = PipelineConfig(**kw, **pipe)
        except TypeError as e:
            raise ConfigError(f"pipeline: {e}") from None
        out = doc.get("output_dir")
        if out is not None and not isinstance(out, str):
            raise ConfigError("output_dir must be a string")
        try:
            cfg.validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        return cls(cfg, out)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(doc)

    def echo(self) -> dict:
        """Fully resolved configuration, without the location-dependent output directory."""
        return config_echo(self.pipeline)


def config_echo(cfg: PipelineConfig) -> dict:
    return {
        "mixture": dataclasses.asdict(cfg.mixture),
        "split": dataclasses.asdict(cfg.split),
        "msn": dataclasses.asdict(cfg.msn),
        "probe": dataclasses.asdict(cfg.probe),
        "diffusion": dataclasses.asdict(cfg.diffusion),
        "pipeline": {k: getattr(cfg, k) for k in PIPELINE_KEYS},
    }


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: PipelineConfig) -> str:
    """Hash of everything that determines stage 1/2 artifacts; the seed and K grid are excluded."""
    doc = config_echo(cfg)
    doc["pipeline"] = {k: v for k, v in doc["pipeline"].items() if k not in ("seed", "k_grid")}
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()[:12]


def run_dir_name(cfg: PipelineConfig) -> str:
    return f"{config_hash(cfg)}-seed{cfg.seed}"
