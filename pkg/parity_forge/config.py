"""Run configuration: one JSON document per pipeline run, CLI flags layered on top."""
import hashlib
import json
import os

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from parity_forge.core import ChainPlan, ColumnSpec
from parity_forge.data_load import read_json_source
from parity_forge.errors import ConfigError
from parity_forge.predict import ForestParams, PredictorKind
from parity_forge.simulation import SimConfig

THREADS_ENV = "PARITY_FORGE_THREADS"


class DataConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    path: str
    columns: list[ColumnSpec]
    stem: str | None = None


class PredictConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: PredictorKind = PredictorKind.random_forest
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    forest: ForestParams = Field(default_factory=ForestParams)
    # defaults to every feature column of the ensemble
    features: list[str] | None = None


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    data: DataConfig | None = None
    plan: ChainPlan | None = None
    simulation: SimConfig = Field(default_factory=SimConfig)
    predict: PredictConfig = Field(default_factory=PredictConfig)
    threads: int | None = Field(default=None, ge=1)


def describe_validation_error(e: ValidationError) -> str:
    first = e.errors()[0]
    where = ".".join(str(part) for part in first["loc"]) or "<root>"
    more = f" (+{e.error_count() - 1} more)" if e.error_count() > 1 else ""
    return f"invalid config field '{where}': {first['msg']}{more}"


def parse_config(payload: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(describe_validation_error(e)) from e


def apply_overrides(cfg: RunConfig, *, seed: int | None = None, m: int | None = None, n: int | None = None,
                    model: str | None = None, threshold: float | None = None,
                    threads: int | None = None) -> RunConfig:
    """Re-validate ``cfg`` with every non-None command-line value written over its field."""
    payload = cfg.model_dump(mode="json")
    sim = payload["simulation"]
    if seed is not None:
        sim["seed"] = seed
        if payload["plan"] is not None:
            payload["plan"]["seed"] = seed
    if m is not None:
        sim["M"] = m
        if payload["plan"] is not None:
            payload["plan"]["M"] = m
    if n is not None:
        sim["n"] = n
    if model is not None:
        payload["predict"]["model"] = PredictorKind.parse(model).value
    if threshold is not None:
        payload["predict"]["threshold"] = threshold
    if threads is not None:
        payload["threads"] = threads
    return parse_config(payload)


def resolve_threads(cfg: RunConfig) -> int:
    if cfg.threads is not None:
        return cfg.threads
    load_dotenv()
    raw = os.getenv(THREADS_ENV)
    if raw is None or not raw.strip():
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads


def config_digest(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(raw: str | os.PathLike) -> RunConfig:
    """Path to a JSON config file, or the JSON text itself."""
    return parse_config(read_json_source(raw))
