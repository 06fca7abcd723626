"""Dataset loading, run configuration and reproducible artifact writing."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, MertonPoissonError, ParseError, SchemaViolation
from .inference import PortfolioSeries, normalize_counts
from .latent import EXPONENTIAL, POWER, canonical_family

HEADER = ("year", "obligors", "defaults")
ARTIFACT_SCHEMA = "merton-poisson/artifact/v1"
BUNDLED_DATASET = "synthetic_1920_2023.csv"
MAX_SEED = 2 ** 64 - 1


class ConfigError(MertonPoissonError):
    """Invalid or incomplete run configuration (a usage error)."""


# --------------------------------------------------------------------------
# Dataset files
# --------------------------------------------------------------------------

def parse_dataset(text: str, source: str = "<string>") -> PortfolioSeries:
    """Parse ``year,obligors,defaults`` CSV text.

    Blank lines and lines starting with ``#`` are ignored.  Line numbers in
    errors are 1-based physical lines; columns are 1-based field positions.
    """
    rows = []
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if not header_seen:
            if tuple(f.lower() for f in fields) != HEADER:
                raise ParseError(f"expected header {','.join(HEADER)!r}, got {line!r}", lineno, 1)
            header_seen = True
            continue
        if len(fields) != 3:
            # point at the first missing field, or the first surplus one
            raise ParseError(f"expected 3 fields, got {len(fields)}", lineno, min(len(fields) + 1, 4))
        values = []
        for col, f in enumerate(fields, start=1):
            try:
                values.append(int(f))
            except ValueError:
                raise ParseError(f"{HEADER[col - 1]} must be an integer, got {f!r}", lineno, col) from None
        year, n, k = values
        if n <= 0:
            raise SchemaViolation(f"{source}:{lineno}: obligors must be positive (year {year})")
        if k < 0:
            raise SchemaViolation(f"{source}:{lineno}: defaults must be non-negative (year {year})")
        if k > n:
            raise SchemaViolation(f"{source}:{lineno}: defaults {k} exceed obligors {n} (year {year})")
        if rows and year <= rows[-1][0]:
            what = "duplicate" if year == rows[-1][0] else "decreasing"
            raise SchemaViolation(f"{source}:{lineno}: years must be strictly increasing ({what} year {year})")
        rows.append((year, n, k))
    if not header_seen:
        raise EmptyDataset(f"{source}: no header")
    if not rows:
        raise EmptyDataset(f"{source}: no data rows")
    arr = np.array(rows, dtype=np.int64)
    return normalize_counts(PortfolioSeries(arr[:, 0], arr[:, 1], arr[:, 2]))


def load_dataset(path) -> PortfolioSeries:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise EmptyDataset(f"{path}: file not found") from None
    return parse_dataset(text, str(path))


def load_bundled_dataset() -> PortfolioSeries:
    """The synthetic 1920-2023 dataset shipped with the package (not real agency data)."""
    text = resources.files("merton_poisson").joinpath("data", BUNDLED_DATASET).read_text(encoding="utf-8")
    return parse_dataset(text, BUNDLED_DATASET)


def format_dataset(series: PortfolioSeries, comments: list[str] | None = None) -> str:
    buf = io.StringIO()
    for c in comments or []:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for row in zip(series.years.tolist(), series.obligors.tolist(), series.defaults.tolist()):
        w.writerow(row)
    return buf.getvalue()


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    seed: int
    model: str = EXPONENTIAL
    kernel_param: float | None = None        # theta or gamma; family default when None
    lambda0: float = 18.0
    alpha: float = 1.4
    T: int = 104
    start_year: int = 1920
    process: str = "limit"                    # simulate: "limit" or "merton"
    p_prime: float = 0.004
    rho_A: float = 0.2
    N: int = 5000
    beta: float = 1.3
    portfolio_size: int = 3000
    dataset: str | None = None                # fit/compare input; bundled synthetic data when None
    sc: float | list | None = None            # single sc, or a grid searched by LFO
    t0_range: list | None = None
    families: list = field(default_factory=lambda: [EXPONENTIAL, POWER])
    gammas: list = field(default_factory=lambda: [0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0])
    thetas: list = field(default_factory=lambda: [0.8, 0.9, 0.99, 0.999])
    T_max: int = 2 ** 14
    shock: float = 1.0
    horizons: list = field(default_factory=lambda: [1, 10, 100, 1000, 10000])
    kesten_a: float = 0.9
    kesten_beta_b: float = 0.5
    kesten_samples: int = 1_000_000
    kesten_burn_in: int = 10_000
    hill_k: list = field(default_factory=lambda: [500, 1000, 2000, 5000, 10000, 20000])
    chains: int = 4
    draws: int = 1000
    warmup: int = 4000
    thin: int = 20
    n_starts: int = 5
    quad_tol: float = 1e-6
    gtol: float = 1e-6
    out: str = "out"

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed <= MAX_SEED:
            raise ConfigError(f"seed must be an integer in [0, 2^64 - 1], got {self.seed!r}")
        try:
            object.__setattr__(self, "model", canonical_family(self.model))
            object.__setattr__(self, "families", [canonical_family(f) for f in self.families])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.model not in (EXPONENTIAL, POWER):
            raise ConfigError("model must be exp or pow")
        if self.process not in ("limit", "merton"):
            raise ConfigError(f"process must be 'limit' or 'merton', got {self.process!r}")
        for name in ("quad_tol", "gtol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("T", "N", "T_max", "kesten_samples", "chains", "draws", "thin", "n_starts",
                     "portfolio_size"):
            if not int(getattr(self, name)) >= 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.warmup < 0 or self.kesten_burn_in < 0:
            raise ConfigError("warmup and kesten_burn_in must be >= 0")

    @property
    def kernel_value(self) -> float:
        if self.kernel_param is not None:
            return float(self.kernel_param)
        return 0.89 if self.model == EXPONENTIAL else 0.6

    @property
    def sc_grid(self) -> list | None:
        if self.sc is None or isinstance(self.sc, list):
            return self.sc
        return [self.sc]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "seed" not in data or data["seed"] is None:
            raise ConfigError("seed is mandatory (config 'seed' or --seed)")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def echo(self) -> dict:
        """The result-determining part of the config (everything except ``out``)."""
        d = self.to_dict()
        d.pop("out")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


# --------------------------------------------------------------------------
# Artifacts
# --------------------------------------------------------------------------

def atomic_write(path, text: str) -> Path:
    """Write ``text`` to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if hasattr(obj, "value") and hasattr(obj, "name"):  # enums
        return obj.value
    return obj


def provenance(config: RunConfig, command: str) -> dict:
    return {"schema": ARTIFACT_SCHEMA, "command": command, "seed": config.seed,
            "config_hash": config.config_hash(), "config": config.echo()}


def write_json(path, payload: dict, config: RunConfig, command: str) -> Path:
    doc = {**provenance(config, command), "result": _jsonable(payload)}
    return atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def csv_preamble(config: RunConfig, command: str) -> list[str]:
    return [f"schema={ARTIFACT_SCHEMA} command={command} seed={config.seed} config_hash={config.config_hash()}",
            "config=" + json.dumps(config.echo(), sort_keys=True, separators=(",", ":"))]


def write_csv(path, header, rows, config: RunConfig, command: str) -> Path:
    buf = io.StringIO()
    for c in csv_preamble(config, command):
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return atomic_write(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_embedded_config(path) -> RunConfig:
    """Recover the RunConfig echoed into a JSON or CSV artifact."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return RunConfig.from_dict(json.loads(text)["config"])
    for line in text.splitlines():
        if line.startswith("# config="):
            return RunConfig.from_dict(json.loads(line[len("# config="):]))
    raise ConfigError(f"{path}: no embedded config")
