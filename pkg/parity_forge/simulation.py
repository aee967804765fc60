"""Synthetic two-feature study comparing unadjusted, pairwise and mutual adjustment.

Generating model, with z the protected column:

    z ~ Bernoulli(0.5)
    x1 | z ~ Normal(z + 4, 1)
    x2 | x1, z ~ Poisson(mu),  log mu = -1 + 0.5 x1 z + 0.1 x1 + z / 6
    y | x1, x2, z ~ Normal(2 x1 + x2 + z, 1)
"""
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats
from scipy.special import ndtri

from parity_forge.condmodels import INTERCEPT, CondModel, DesignMatrix, fit_conditional
from parity_forge.core import ChainPlan, ColumnSpec, Dataset, Family, Role, Scale, StepSpec
from parity_forge.data_load import write_frame
from parity_forge.empirical import Ecdf
from parity_forge.helpers.utils import write_json
from parity_forge.predict import parity_gap, score_cdf_grid, score_density_grid
from parity_forge.rng import derive_seed, keyed_generator, keyed_uniforms
from parity_forge.transform import AdjustedEnsemble, chain_transform, pairwise_transform, transform_none, univariate_map

# first key of every simulation stream; replicate indices never reach it
STREAM_TAG = 0x53494D
COLUMN_STREAMS = {"z": 1, "x1": 2, "x2": 3, "y": 4}
ORACLE_STREAM = 5
PLAN_STREAM = 6

SCHEMA = (
    ColumnSpec(name="z", scale=Scale.binary, role=Role.protected),
    ColumnSpec(name="x1", scale=Scale.continuous),
    ColumnSpec(name="x2", scale=Scale.count),
    ColumnSpec(name="y", scale=Scale.continuous, role=Role.response),
)

X2_COEFFICIENTS = {INTERCEPT: -1.0, "z": 1.0 / 6.0, "x1": 0.1, "z:x1": 0.5}


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: int = Field(default=10_000, ge=100)
    seed: int = Field(default=0, ge=0, lt=2**64)
    M: int = Field(default=10, ge=1)
    # add the z * x1 term to the fitted x2 model
    interaction: bool = False
    # also run the transform with the true conditionals
    oracle: bool = False


def _uniforms(cfg: SimConfig, column: str) -> np.ndarray:
    return keyed_uniforms(cfg.seed, STREAM_TAG, COLUMN_STREAMS[column], n=cfg.n)


def simulate_data(cfg: SimConfig) -> Dataset:
    z = (_uniforms(cfg, "z") < 0.5).astype(np.int64)
    x1 = z + 4.0 + ndtri(_uniforms(cfg, "x1"))
    mu = np.exp(-1.0 + 0.5 * x1 * z + 0.1 * x1 + z / 6.0)
    x2 = stats.poisson.ppf(_uniforms(cfg, "x2"), mu).astype(np.int64)
    y = 2.0 * x1 + x2 + z + ndtri(_uniforms(cfg, "y"))
    frame = pd.DataFrame({"z": z, "x1": x1, "x2": x2, "y": y})
    logger.info(f"simulated {cfg.n:,} rows (seed {cfg.seed})")
    return Dataset(SCHEMA, frame, {"z": (0, 1)})


def sim_plan(cfg: SimConfig) -> ChainPlan:
    x2_step = StepSpec(family=Family.poisson, interactions=[("z", "x1")] if cfg.interaction else [])
    return ChainPlan(
        ordering=["x1", "x2"],
        steps={"x1": StepSpec(family=Family.gaussian_linear), "x2": x2_step},
        M=cfg.M,
        # transform streams are keyed apart from the data streams of the same study seed
        seed=derive_seed(cfg.seed, STREAM_TAG, PLAN_STREAM),
    )


# -----------------------------
# True conditionals
# -----------------------------
def true_models() -> dict[str, CondModel]:
    x1 = CondModel(Family.gaussian_linear, pd.Series({INTERCEPT: 4.0, "z": 1.0, "sigma": 1.0}),
                   (INTERCEPT, "z"), atomic=False)
    x2 = CondModel(Family.poisson, pd.Series(X2_COEFFICIENTS), tuple(X2_COEFFICIENTS))
    return {"x1": x1, "x2": x2}


def true_design(frame: pd.DataFrame, column: str) -> DesignMatrix:
    z = frame["z"].to_numpy(dtype=float)
    if column == "x1":
        return DesignMatrix(np.column_stack([np.ones(len(frame)), z]), (INTERCEPT, "z"))
    x1 = frame["x1"].to_numpy(dtype=float)
    return DesignMatrix(np.column_stack([np.ones(len(frame)), z, x1, z * x1]), tuple(X2_COEFFICIENTS))


def oracle_transform(ds: Dataset, plan: ChainPlan) -> AdjustedEnsemble:
    """Mutual adjustment through the known conditionals instead of fitted ones."""
    models = true_models()
    replicates, warnings = [], []
    for m in range(plan.M):
        rep = pd.DataFrame(index=ds.frame.index)
        for j, name in enumerate(plan.ordering):
            rng = keyed_generator(plan.seed, STREAM_TAG, ORACLE_STREAM, m, j)
            # conditioning on the raw x1 equals conditioning on its within-group monotone image
            adjusted, _, warn = univariate_map(ds.values(name), true_design(ds.frame, name), models[name],
                                               Ecdf.from_sample(ds.values(name)), rng, tolerate_zero_mass=True)
            rep[name] = adjusted
            warnings += warn
        replicates.append(rep)
    return AdjustedEnsemble(replicates, plan, plan.seed, "mutual_oracle", ds.columns,
                            ds.frame[ds.protected + [ds.response]].copy(), dict(ds.levels), warnings=warnings)


# -----------------------------
# Study
# -----------------------------
def least_squares_fit(ensemble: AdjustedEnsemble, y) -> np.ndarray:
    """Per-row fitted values of y on the adjusted features (with intercept), averaged over replicates."""
    y = np.asarray(y, dtype=float)
    total = np.zeros(y.size)
    for rep in ensemble.replicates:
        X = rep[ensemble.features].to_numpy(dtype=float)
        rows = DesignMatrix(np.column_stack([np.ones(y.size), X]), (INTERCEPT, *ensemble.features))
        model = fit_conditional(Family.gaussian_linear, y, rows)
        total += rows.values @ model.coefficients[list(rows.columns)].to_numpy()
    return total / ensemble.M


@dataclass
class RegimeResult:
    name: str
    gap: float
    fitted: np.ndarray = field(repr=False)


@dataclass
class SimStudy:
    config: SimConfig
    regimes: dict[str, RegimeResult]
    cdf_grid: pd.DataFrame
    density_grid: pd.DataFrame
    warnings: list[str] = field(default_factory=list)

    @property
    def gaps(self) -> dict[str, float]:
        return {name: r.gap for name, r in self.regimes.items()}

    def to_dict(self) -> dict:
        return {"config": self.config.model_dump(mode="json"), "gaps": self.gaps, "warnings": self.warnings}

    def export(self, out_dir: str | os.PathLike, stem: str = "study") -> list[Path]:
        out_dir = Path(out_dir)
        return [
            write_json(out_dir / f"{stem}.json", self.to_dict()),
            write_frame(self.cdf_grid, out_dir / f"{stem}.cdf.csv"),
            write_frame(self.density_grid, out_dir / f"{stem}.density.csv"),
        ]


def run_sim_study(cfg: SimConfig, threads: int = 1, ds: Dataset | None = None) -> SimStudy:
    ds = simulate_data(cfg) if ds is None else ds
    plan = sim_plan(cfg)
    ensembles = {
        "unadjusted": transform_none(ds, plan),
        "pairwise": pairwise_transform(ds, plan, threads),
        "mutual": chain_transform(ds, plan, threads),
    }
    if cfg.oracle:
        ensembles["mutual_oracle"] = oracle_transform(ds, plan)

    y, z = ds.values("y"), ds.values("z")
    regimes, cdfs, densities, warnings = {}, [], [], []
    for name, ensemble in ensembles.items():
        fitted = least_squares_fit(ensemble, y)
        gap = parity_gap(fitted, z, warnings)
        regimes[name] = RegimeResult(name, gap, fitted)
        cdfs.append(score_cdf_grid(fitted, z).assign(regime=name))
        densities.append(score_density_grid(fitted, z, warnings=warnings).assign(regime=name))
        warnings += ensemble.warnings
        logger.info(f"{name}: parity gap {gap:.4f}")
    return SimStudy(cfg, regimes, pd.concat(cdfs, ignore_index=True), pd.concat(densities, ignore_index=True),
                    warnings)
