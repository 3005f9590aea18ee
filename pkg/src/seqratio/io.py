"""File formats: binary datasets, flat key=value configs, and CSV exports.

Dataset layout (all little-endian):

    bytes 0-3   magic b"SEQB"
    u16         version (1)
    u64 x 4     M, T, d, K
    f64 x M*T*d features, sequence-major, then frame, then feature
    u32 x M     labels, 1-based
"""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import InvalidInput, SequenceBatch
from .model import TrainConfig
from .oracle import GaussianSourceSpec, equilateral_spec

MAGIC = b"SEQB"
VERSION = 1
HEADER = struct.Struct("<4sHQQQQ")


class ConfigError(InvalidInput):
    pass


def write_dataset(batch: SequenceBatch, path) -> bytes:
    """Serialise a batch; returns the bytes written."""
    head = HEADER.pack(MAGIC, VERSION, batch.M, batch.T, batch.d, batch.K)
    body = np.ascontiguousarray(batch.features, dtype="<f8").tobytes()
    labels = (batch.labels + 1).astype("<u4").tobytes()
    blob = head + body + labels
    Path(path).write_bytes(blob)
    return blob


def read_dataset(path) -> SequenceBatch:
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size:
        raise InvalidInput("dataset file is truncated")
    magic, version, M, T, d, K = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise InvalidInput("not a SEQB dataset")
    if version != VERSION:
        raise InvalidInput(f"unsupported dataset version {version}")
    n = M * T * d
    expected = HEADER.size + 8 * n + 4 * M
    if len(blob) != expected:
        raise InvalidInput(f"dataset size {len(blob)} != expected {expected}")
    x = np.frombuffer(blob, dtype="<f8", count=n, offset=HEADER.size).reshape(M, T, d)
    y = np.frombuffer(blob, dtype="<u4", count=M, offset=HEADER.size + 8 * n).astype(np.int64) - 1
    return SequenceBatch(x.astype(np.float64), y, int(K))


def digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


@dataclass
class SourceSettings:
    num_classes: int = 3
    kl: float = 0.5
    sigma: float = 1.0
    means: str = ""

    def spec(self) -> GaussianSourceSpec:
        if self.means:
            rows = [[float(v) for v in r.split(",")] for r in self.means.split(";") if r.strip()]
            return GaussianSourceSpec(np.array(rows), self.sigma)
        return equilateral_spec(self.num_classes, self.kl, self.sigma)


@dataclass
class DataSettings:
    M: int = 1000
    T: int = 10


@dataclass
class EvalSettings:
    thresholds: int = 50
    test_M: int = 2000
    test_seed: int = 10_000_019
    holdout: float = 0.2


@dataclass
class CompareSettings:
    losses: str = "LSEL,LSIF,DSKL"
    seeds: str = "0,1,2"


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "out"
    source: SourceSettings = field(default_factory=SourceSettings)
    data: DataSettings = field(default_factory=DataSettings)
    model: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    compare: CompareSettings = field(default_factory=CompareSettings)


_SECTIONS = ("source", "data", "model", "eval", "compare")


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat ``dotted.key = value`` lines; unknown keys are errors."""
    cfg = ExperimentConfig()
    parts = {s: {} for s in _SECTIONS}
    top = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in parts:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            target = getattr(cfg, section)
            known = {f.name: f for f in fields(target)}
            if name not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            like = getattr(target, name)
            try:
                parts[section][name] = _coerce(value, like.value if hasattr(like, "value") else like)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from None
        else:
            if key not in ("seed", "out"):
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                top[key] = _coerce(value, getattr(cfg, key))
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from None
    try:
        for s in _SECTIONS:
            if parts[s]:
                setattr(cfg, s, replace(getattr(cfg, s), **parts[s]))
    except InvalidInput as exc:
        raise ConfigError(str(exc)) from None
    for k, v in top.items():
        setattr(cfg, k, v)
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


SAT_HEADER = ("threshold", "mean_hitting_time", "balanced_error", "sem_mht", "sem_err")


def write_sat_curve(path, curve) -> None:
    write_csv(
        path,
        SAT_HEADER,
        [(p.threshold, p.mean_hitting_time, p.balanced_error, p.sem_mht, p.sem_err) for p in curve.points],
    )


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
