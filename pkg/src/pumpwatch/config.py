"""Run configuration: a flat, typed key/value YAML document.

Keys are dotted paths (``model.clstm.conv_out``). Nested mappings are
flattened on read, so both spellings work. ``null`` for ``epochs``,
``batch_size``, ``threshold`` or ``undersample`` means "use the published
value for this model and chunk size".
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .anomaly_transformer import AnomTransConfig
from .clstm import CLstmConfig
from .dataset import DEFAULT_MASK, SynthSpec
from .errors import ConfigInvalid
from .ingest import CHUNK_SIZES, FEATURE_COLUMNS
from .train_eval import (
    DEFAULT_UNDERSAMPLE,
    PUBLISHED_BATCH_SIZE,
    PUBLISHED_EPOCHS,
    PUBLISHED_THRESHOLD,
    PUBLISHED_UNDERSAMPLE,
)

MODELS = ("clstm", "anomaly_transformer")
SEED_ENV = "PUMPWATCH_SEED"

_NESTED = {
    "synthetic": SynthSpec,
    "model.clstm": CLstmConfig,
    "model.anomaly_transformer": AnomTransConfig,
}
# chunk_size is a top-level key; the fixture generator takes it from there
_NESTED_SKIP = {"synthetic": {"chunk_size"}}


@dataclass(frozen=True)
class RunConfig:
    model: str = "clstm"
    features: str | None = None  # feature CSV; None -> synthetic fixture
    synthetic_seed: int = 0
    chunk_size: int = 15
    segment_length: int = 15
    train_fraction: float = 0.8
    min_pump_chunks: int = 100
    undersample: float | None = None
    masked_columns: tuple[str, ...] = DEFAULT_MASK
    epochs: int | None = None
    batch_size: int | None = None
    threshold: float | None = None
    learning_rate: float | None = None
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/default"
    synthetic: SynthSpec = field(default_factory=SynthSpec)
    clstm: CLstmConfig = field(default_factory=CLstmConfig)
    anomaly_transformer: AnomTransConfig = field(default_factory=AnomTransConfig)

    # effective values -------------------------------------------------------
    @property
    def key(self) -> tuple[str, int]:
        return (self.model, self.chunk_size)

    def resolved_epochs(self) -> int:
        return self.epochs if self.epochs is not None else PUBLISHED_EPOCHS[self.model]

    def resolved_batch_size(self) -> int:
        return self.batch_size if self.batch_size is not None else PUBLISHED_BATCH_SIZE[self.key]

    def resolved_threshold(self) -> float:
        return self.threshold if self.threshold is not None else PUBLISHED_THRESHOLD[self.key]

    def resolved_undersample(self) -> float:
        if self.undersample is not None:
            return self.undersample
        return PUBLISHED_UNDERSAMPLE.get(self.key, DEFAULT_UNDERSAMPLE)

    def model_config(self):
        cfg = self.clstm if self.model == "clstm" else self.anomaly_transformer
        if self.model == "anomaly_transformer" and cfg.seq_len != self.segment_length:
            cfg = replace(cfg, seq_len=self.segment_length)
        return cfg

    def synth_spec(self) -> SynthSpec:
        return replace(self.synthetic, chunk_size=self.chunk_size)


_TOP = {f.name: f for f in fields(RunConfig) if f.name not in ("synthetic", "clstm", "anomaly_transformer")}


def _type_ok(value, annotation: str) -> bool:
    optional = "None" in annotation
    if value is None:
        return optional
    if annotation.startswith("tuple"):
        inner = "int" if "int" in annotation else "str"
        return isinstance(value, (list, tuple)) and all(_type_ok(v, inner) for v in value)
    if "bool" in annotation:
        return isinstance(value, bool)
    if "int" in annotation and "float" not in annotation:
        return isinstance(value, int) and not isinstance(value, bool)
    if "float" in annotation:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if "str" in annotation:
        return isinstance(value, str)
    return True


def flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key not in ("",):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def from_dict(doc: dict) -> RunConfig:
    """Validate a (flat or nested) mapping. Every problem is collected before raising."""
    flat = flatten(doc or {})
    problems: list[str] = []
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {k: {} for k in _NESTED}

    for key, value in flat.items():
        if key in _TOP:
            ann = str(_TOP[key].type)
            if not _type_ok(value, ann):
                problems.append(f"{key}: expected {ann}, got {type(value).__name__}")
                continue
            top[key] = tuple(value) if isinstance(value, list) else value
            continue
        prefix, _, leaf = key.rpartition(".")
        if prefix in _NESTED:
            cls = _NESTED[prefix]
            names = {f.name: f for f in fields(cls)}
            if leaf in names and leaf not in _NESTED_SKIP.get(prefix, ()):
                ann = str(names[leaf].type)
                if not _type_ok(value, ann):
                    problems.append(f"{key}: expected {ann}, got {type(value).__name__}")
                else:
                    nested[prefix][leaf] = value
                continue
        problems.append(f"{key}: unknown key")

    if problems:
        raise ConfigInvalid(problems)

    cfg_kwargs = dict(top)
    try:
        cfg_kwargs["synthetic"] = SynthSpec(**nested["synthetic"])
        cfg_kwargs["clstm"] = CLstmConfig(**nested["model.clstm"])
        cfg_kwargs["anomaly_transformer"] = AnomTransConfig(**nested["model.anomaly_transformer"])
    except ValueError as exc:
        raise ConfigInvalid([str(exc)]) from None
    cfg = RunConfig(**cfg_kwargs)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    p = []
    if cfg.model not in MODELS:
        p.append(f"model: must be one of {', '.join(MODELS)}")
    if cfg.chunk_size not in CHUNK_SIZES:
        p.append(f"chunk_size: must be one of {CHUNK_SIZES}")
    if cfg.segment_length < 1:
        p.append("segment_length: must be >= 1")
    elif cfg.model == "clstm" and cfg.segment_length < cfg.clstm.min_segment_length():
        p.append(f"segment_length: C-LSTM needs at least {cfg.clstm.min_segment_length()}")
    if not 0 < cfg.train_fraction < 1:
        p.append("train_fraction: must be in (0, 1)")
    if cfg.min_pump_chunks < 0:
        p.append("min_pump_chunks: must be >= 0")
    if cfg.undersample is not None and not 0 < cfg.undersample <= 1:
        p.append("undersample: must be in (0, 1]")
    bad = [c for c in cfg.masked_columns if c not in FEATURE_COLUMNS]
    if bad:
        p.append(f"masked_columns: unknown column(s) {', '.join(bad)}")
    if cfg.epochs is not None and cfg.epochs < 1:
        p.append("epochs: must be >= 1")
    if cfg.batch_size is not None and cfg.batch_size < 1:
        p.append("batch_size: must be >= 1")
    if cfg.threshold is not None and not 0 <= cfg.threshold <= 1:
        p.append("threshold: must be in [0, 1]")
    if cfg.learning_rate is not None and cfg.learning_rate <= 0:
        p.append("learning_rate: must be > 0")
    if not cfg.seeds:
        p.append("seeds: need at least one seed")
    if cfg.features is None:
        try:
            cfg.synth_spec().validate()
        except ValueError as exc:
            p.append(f"synthetic: {exc}")
    if p:
        raise ConfigInvalid(p)


def to_flat(cfg: RunConfig) -> dict:
    out: dict[str, Any] = {}
    for name in _TOP:
        v = getattr(cfg, name)
        out[name] = list(v) if isinstance(v, tuple) else v
    for prefix, attr in (("synthetic", "synthetic"), ("model.clstm", "clstm"), ("model.anomaly_transformer", "anomaly_transformer")):
        obj = getattr(cfg, attr)
        for f in fields(obj):
            if f.name in _NESTED_SKIP.get(prefix, ()):
                continue
            out[f"{prefix}.{f.name}"] = getattr(obj, f.name)
    return out


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_flat(cfg), sort_keys=False, default_flow_style=None)


def loads(text: str) -> RunConfig:
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc, dict):
        raise ConfigInvalid(["config document must be a mapping"])
    return from_dict(doc)


def load(path, env: dict | None = None) -> RunConfig:
    cfg = loads(Path(path).read_text(encoding="utf-8"))
    return apply_env(cfg, os.environ if env is None else env)


def apply_env(cfg: RunConfig, env) -> RunConfig:
    raw = env.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigInvalid([f"{SEED_ENV}: expected an integer, got {raw!r}"]) from None
    return replace(cfg, seeds=(seed,))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def data_hash(cfg: RunConfig) -> str:
    """Fingerprint of everything that determines the prepared segments."""
    doc = {
        "chunk_size": cfg.chunk_size,
        "segment_length": cfg.segment_length,
        "train_fraction": cfg.train_fraction,
        "min_pump_chunks": cfg.min_pump_chunks,
        "masked_columns": list(cfg.masked_columns),
    }
    if cfg.features is None:
        doc["synthetic"] = to_flat(cfg)  # only the synthetic.* entries matter
        doc["synthetic"] = {k: v for k, v in doc["synthetic"].items() if k.startswith("synthetic.")}
        doc["synthetic_seed"] = cfg.synthetic_seed
    else:
        doc["features_sha256"] = file_digest(cfg.features)
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def quickstart(model: str = "clstm", output_dir: str = "runs/quickstart") -> RunConfig:
    """Small synthetic run that finishes in a couple of minutes on one CPU core."""
    return RunConfig(
        model=model,
        epochs=20,
        batch_size=64 if model == "clstm" else 32,
        output_dir=output_dir,
    )
