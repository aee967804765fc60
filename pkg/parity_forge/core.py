"""Typed tabular data model: column schema, datasets and chain plans."""
from dataclasses import dataclass, field
from enum import Enum
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from parity_forge.errors import ConfigError, RoleError


class Scale(str, Enum):
    continuous = "continuous"
    count = "count"
    binary = "binary"
    categorical = "categorical"


class Role(str, Enum):
    feature = "feature"
    protected = "protected"
    response = "response"
    excluded = "excluded"


class Family(str, Enum):
    empirical_by_group = "empirical_by_group"
    gaussian_linear = "gaussian_linear"
    logistic_binary = "logistic_binary"
    poisson = "poisson"
    zero_inflated_poisson = "zero_inflated_poisson"
    zero_inflated_negbin = "zero_inflated_negbin"


COMPATIBLE_SCALES: dict[Family, set[Scale]] = {
    Family.empirical_by_group: {Scale.continuous, Scale.count, Scale.binary},
    Family.gaussian_linear: {Scale.continuous},
    Family.logistic_binary: {Scale.binary},
    Family.poisson: {Scale.count},
    Family.zero_inflated_poisson: {Scale.count},
    Family.zero_inflated_negbin: {Scale.count},
}

# invertible pre-transforms for continuous columns: name -> (forward, inverse)
PRE_TRANSFORMS = {
    "none": (lambda v: v, lambda v: v),
    "log": (np.log, np.exp),
}


# -----------------------------
# Schema
# -----------------------------
class ColumnSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    scale: Scale
    role: Role = Role.feature
    transform: Literal["none", "log"] = "none"

    @model_validator(mode="after")
    def _transform_needs_continuous(self):
        if self.transform != "none" and self.scale != Scale.continuous:
            raise ValueError(f"pre-transform '{self.transform}' only applies to continuous columns")
        return self

    def forward(self, values):
        return PRE_TRANSFORMS[self.transform][0](values)

    def inverse(self, values):
        return PRE_TRANSFORMS[self.transform][1](values)


class CompanionSpec(BaseModel):
    """Discretized companion of an adjusted column.

    ``cutpoints`` are given on the source column's raw scale; ``quantiles``
    are probabilities resolved against each replicate's adjusted values.
    """

    model_config = ConfigDict(frozen=True)

    source: str
    cutpoints: list[float] = Field(default_factory=list)
    quantiles: list[float] = Field(default_factory=list)

    @field_validator("cutpoints")
    @classmethod
    def _strictly_ascending(cls, v: list[float]) -> list[float]:
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("cutpoints must be strictly ascending")
        return v

    @field_validator("quantiles")
    @classmethod
    def _probabilities(cls, v: list[float]) -> list[float]:
        if any(not 0.0 < p <= 1.0 for p in v):
            raise ValueError("companion quantiles must lie in (0, 1]")
        return v


class OptimizerOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    tol: float = 1e-8
    max_iter: int = 200
    divergence_norm: float = 1e3


class StepSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Family
    companions: list[CompanionSpec] = Field(default_factory=list)
    # zero-inflation probability depends on the full design or only an intercept
    inflation: Literal["covariates", "intercept"] = "covariates"
    interactions: list[tuple[str, str]] = Field(default_factory=list)


class ChainPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    ordering: list[str]
    steps: dict[str, StepSpec]
    M: int = Field(default=50, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    key_by_replicate: bool = True
    tolerate_zero_mass: bool = False
    include_response: bool = False
    optimizer: OptimizerOptions = Field(default_factory=OptimizerOptions)

    @model_validator(mode="after")
    def _ordering_matches_steps(self):
        if len(set(self.ordering)) != len(self.ordering):
            raise ValueError("ordering lists a column more than once")
        if set(self.ordering) != set(self.steps):
            missing = sorted(set(self.ordering) ^ set(self.steps))
            raise ValueError(f"ordering and steps disagree on: {', '.join(missing)}")
        seen: set[str] = set()
        for name in self.ordering:
            for comp in self.steps[name].companions:
                if comp.source not in seen:
                    raise ValueError(f"companion of '{name}' refers to '{comp.source}', "
                                     f"which is not adjusted earlier in the ordering")
            seen.add(name)
        return self

    def validate_against(self, ds: "Dataset") -> None:
        """Raise ConfigError naming the first column the plan gets wrong."""
        for name in self.ordering:
            if name not in ds.names:
                raise ConfigError(f"plan references unknown column '{name}'")
        features = set(ds.features)
        for name in self.ordering:
            if name not in features:
                raise ConfigError(f"plan column '{name}' is not a feature column")
        uncovered = [f for f in ds.features if f not in self.steps]
        if uncovered:
            raise ConfigError(f"plan does not cover feature columns: {', '.join(uncovered)}")
        for name, step in self.steps.items():
            scale = ds.spec(name).scale
            if scale not in COMPATIBLE_SCALES[step.family]:
                raise ConfigError(f"family '{step.family.value}' cannot model {scale.value} column '{name}'")
            for a, b in step.interactions:
                for term in (a, b):
                    if term not in ds.names:
                        raise ConfigError(f"interaction in step '{name}' references unknown column '{term}'")


# -----------------------------
# Dataset
# -----------------------------
@dataclass(frozen=True)
class Dataset:
    """Validated, immutable table. Values of pre-transformed columns are stored transformed."""

    columns: tuple[ColumnSpec, ...]
    frame: pd.DataFrame = field(repr=False)
    levels: dict[str, tuple] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def spec(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def _with_role(self, role: Role) -> list[str]:
        return [c.name for c in self.columns if c.role == role]

    @property
    def features(self) -> list[str]:
        return self._with_role(Role.feature)

    @property
    def protected(self) -> list[str]:
        return self._with_role(Role.protected)

    @property
    def response(self) -> str:
        (name,) = self._with_role(Role.response)
        return name

    def values(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(copy=True)

    def group_labels(self, names: list[str] | None = None) -> np.ndarray:
        """One string label per row joining the given (default: protected) columns."""
        names = self.protected if names is None else names
        return group_labels(self.frame, names)


def group_labels(frame: pd.DataFrame, names: list[str]) -> np.ndarray:
    if not names:
        return np.full(len(frame), "all", dtype=object)
    parts = [frame[n].astype(str).to_numpy() for n in names]
    if len(parts) == 1:
        return parts[0].astype(object)
    return np.array(["|".join(row) for row in zip(*parts)], dtype=object)


def validate_roles(ds: Dataset, require_protected: bool = True) -> None:
    responses = [c.name for c in ds.columns if c.role == Role.response]
    if len(responses) != 1:
        raise RoleError(f"expected exactly one response column, found {len(responses)}"
                        + (f": {', '.join(responses)}" if responses else ""))
    if require_protected and not ds.protected:
        raise RoleError("at least one protected column is required to build a transform")
