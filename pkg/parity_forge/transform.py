"""Transformation to independence.

Each feature x_j is pushed through its fitted conditional CDF given the
protected columns (and, in mutual mode, every previously adjusted feature plus
its discretized companions), then through the marginal empirical quantile
function of x_j. Continuous conditionals give a deterministic map; atomic ones
draw u ~ Uniform(F(x-), F(x)) first.
"""
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger

from parity_forge.condmodels import CondModel, DesignMatrix, build_design, fit_conditional
from parity_forge.core import ChainPlan, ColumnSpec, CompanionSpec, Dataset, Family, Role, Scale, group_labels, validate_roles
from parity_forge.data_load import write_frame
from parity_forge.empirical import Ecdf, quantile
from parity_forge.errors import (
    ChainStepError,
    EmptyEnsembleError,
    ParityForgeError,
    PropagationError,
    ZeroMassError,
)
from parity_forge.helpers.utils import file_digest, write_json
from parity_forge.rng import keyed_generator

Mode = Literal["mutual", "pairwise", "none"]
REFIT_POLICY = "per-replicate"


# -----------------------------
# Companions
# -----------------------------
def make_companions(adjusted, spec: CompanionSpec) -> np.ndarray:
    """Bin index per value for bins (-inf, c1], (c1, c2], ..., (ck, inf)."""
    cuts = np.asarray(spec.cutpoints, dtype=float)
    return np.searchsorted(cuts, np.asarray(adjusted, dtype=float), side="left")


def resolve_companion(spec: CompanionSpec, adjusted, source: ColumnSpec) -> CompanionSpec:
    """Concrete cutpoints: fixed ones mapped through the pre-transform plus adjusted-value quantiles."""
    cuts = list(np.atleast_1d(source.forward(np.asarray(spec.cutpoints, dtype=float))))
    if spec.quantiles:
        cuts += list(np.atleast_1d(quantile(Ecdf.from_sample(adjusted), spec.quantiles)).astype(float))
    return CompanionSpec(source=spec.source, cutpoints=sorted(set(float(c) for c in cuts)))


def companion_name(spec: CompanionSpec, index: int = 0) -> str:
    return f"{spec.source}*" + (str(index) if index else "")


# -----------------------------
# Univariate map
# -----------------------------
def univariate_map(x, rows: DesignMatrix, m: CondModel, target: Ecdf, rng: np.random.Generator,
                   tolerate_zero_mass: bool = False):
    """Return (adjusted, pit, warnings)."""
    x = np.asarray(x)
    n = x.size
    warnings: list[str] = []
    right = m.cdf(x, rows)
    if not m.atomic:
        bad = np.flatnonzero(np.isnan(right))
        if bad.size:
            raise PropagationError(int(bad[0]))
        return quantile(target, np.clip(right, 0.0, 1.0)), right, warnings

    left = m.cdf_left(x, rows)
    bad = np.flatnonzero(np.isnan(right) | np.isnan(left))
    if bad.size:
        raise PropagationError(int(bad[0]))
    collapsed = np.flatnonzero(right <= left)
    empty = collapsed[:0]
    if collapsed.size:
        log_mass = m.logpmf(x[collapsed], rows.take(collapsed))
        empty = collapsed[~np.isfinite(log_mass)]
        # positive mass whose CDF difference rounded away: rebuild the interval at the tail it sits in
        tail = collapsed[np.isfinite(log_mass)]
        if tail.size:
            mass = np.exp(log_mass[np.isfinite(log_mass)])
            upper = right[tail] >= 0.5
            left, right = left.copy(), right.copy()
            right[tail] = np.where(upper, 1.0, np.maximum(mass, np.finfo(float).tiny))
            left[tail] = np.where(upper, np.minimum(1.0 - mass, np.nextafter(1.0, 0.0)), 0.0)
            logger.debug(f"{tail.size} rows sit beyond the resolution of the fitted CDF; mapped to its tail")
    if empty.size:
        if not tolerate_zero_mass:
            raise ZeroMassError(int(empty[0]), x[empty[0]].item())
        width = 1.0 / n
        left = left.copy()
        right = right.copy()
        left[empty] = np.minimum(left[empty], 1.0 - width)
        right[empty] = left[empty] + width
        msg = f"{empty.size} rows had zero fitted mass at their observed value; widened by 1/n"
        logger.warning(msg)
        warnings.append(msg)
    v = rng.random(n)
    u = left + (right - left) * v
    u = np.minimum(np.maximum(u, np.nextafter(left, np.inf)), right)
    return quantile(target, np.clip(u, 0.0, 1.0)), u, warnings


def transform_univariate(x, rows: DesignMatrix, m: CondModel, target: Ecdf, rng: np.random.Generator,
                         tolerate_zero_mass: bool = False) -> np.ndarray:
    adjusted, _, _ = univariate_map(x, rows, m, target, rng, tolerate_zero_mass)
    return adjusted


# -----------------------------
# Ensembles
# -----------------------------
@dataclass
class AdjustedEnsemble:
    replicates: list[pd.DataFrame]
    plan: ChainPlan
    seed: int
    mode: str
    schema: tuple[ColumnSpec, ...]
    untouched: pd.DataFrame
    levels: dict = field(default_factory=dict)
    fit_summaries: list[dict] = field(default_factory=list)
    pit: list[pd.DataFrame] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def M(self) -> int:
        return len(self.replicates)

    @property
    def features(self) -> list[str]:
        return [c.name for c in self.schema if c.role == Role.feature]

    @property
    def protected(self) -> list[str]:
        return [c.name for c in self.schema if c.role == Role.protected]

    @property
    def response(self) -> str:
        return next(c.name for c in self.schema if c.role == Role.response)

    def replicate_dataset(self, m: int) -> Dataset:
        frame = pd.concat([self.untouched.reset_index(drop=True), self.replicates[m].reset_index(drop=True)], axis=1)
        cols = tuple(c for c in self.schema if c.name in frame.columns)
        return Dataset(cols, frame[[c.name for c in cols]], dict(self.levels))

    def manifest(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "M": self.M,
            "refit_policy": REFIT_POLICY,
            "plan": self.plan.model_dump(mode="json"),
            "schema": [c.model_dump(mode="json") for c in self.schema],
            "levels": {k: list(v) for k, v in self.levels.items()},
            "fit_summaries": self.fit_summaries,
            "warnings": self.warnings,
        }

    def export(self, out_dir: str | os.PathLike, stem: str, include_response: bool | None = None) -> list[Path]:
        """One CSV per replicate plus PIT values, the untouched columns and a JSON manifest."""
        out_dir = Path(out_dir)
        include_response = self.plan.include_response if include_response is None else include_response
        specs = {c.name: c for c in self.schema}
        written: list[Path] = []
        for m, rep in enumerate(self.replicates, start=1):
            frame = pd.DataFrame({name: specs[name].inverse(rep[name].to_numpy()) if specs[name].transform != "none"
                                  else rep[name] for name in rep.columns})
            if include_response:
                frame[self.response] = self.untouched[self.response].to_numpy()
            written.append(write_frame(frame, out_dir / f"{stem}.adjusted.{m}.csv"))
            if m - 1 < len(self.pit) and not self.pit[m - 1].empty:
                written.append(write_frame(self.pit[m - 1], out_dir / f"{stem}.pit.{m}.csv"))
        written.append(write_frame(self.untouched, out_dir / f"{stem}.untouched.csv"))
        manifest = self.manifest()
        manifest["stem"] = stem
        manifest["include_response"] = include_response
        manifest["files"] = {p.name: file_digest(p) for p in written}
        written.append(write_json(out_dir / f"{stem}.manifest.json", manifest))
        logger.info(f"wrote {self.M} {self.mode} replicates to {out_dir}")
        return written


def load_ensemble(ensemble_dir: str | os.PathLike) -> AdjustedEnsemble:
    ensemble_dir = Path(ensemble_dir)
    manifests = sorted(ensemble_dir.glob("*.manifest.json")) if ensemble_dir.is_dir() else []
    if not manifests:
        raise EmptyEnsembleError(f"no ensemble manifest found in {ensemble_dir}")
    if len(manifests) > 1:
        raise EmptyEnsembleError(f"{ensemble_dir} holds {len(manifests)} manifests; expected one")
    try:
        return _read_ensemble(ensemble_dir, manifests[0])
    except ParityForgeError:
        raise
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise EmptyEnsembleError(f"{ensemble_dir} holds an incomplete ensemble: {type(e).__name__}: {e}") from e


def _read_ensemble(ensemble_dir: Path, manifest_path: Path) -> AdjustedEnsemble:
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    stem = manifest["stem"]
    schema = tuple(ColumnSpec(**c) for c in manifest["schema"])
    specs = {c.name: c for c in schema}
    levels = {k: tuple(v) for k, v in manifest.get("levels", {}).items()}

    untouched = pd.read_csv(ensemble_dir / f"{stem}.untouched.csv")
    for name in untouched.columns:
        if specs[name].scale == Scale.categorical:
            untouched[name] = pd.Categorical(untouched[name].astype(str), categories=[str(v) for v in levels[name]])
    features = [c.name for c in schema if c.role == Role.feature]
    replicates, pits = [], []
    for m in range(1, manifest["M"] + 1):
        rep = pd.read_csv(ensemble_dir / f"{stem}.adjusted.{m}.csv")[features]
        for name in features:
            rep[name] = specs[name].forward(rep[name].to_numpy())
        replicates.append(rep)
        pit_path = ensemble_dir / f"{stem}.pit.{m}.csv"
        pits.append(pd.read_csv(pit_path) if pit_path.exists() else pd.DataFrame())
    plan = ChainPlan(**manifest["plan"])
    return AdjustedEnsemble(replicates, plan, manifest["seed"], manifest["mode"], schema, untouched, levels,
                            manifest.get("fit_summaries", []), pits, manifest.get("warnings", []))


# -----------------------------
# Chained transform
# -----------------------------
def _design_for(ds: Dataset, plan: ChainPlan, work: pd.DataFrame, j: int, mode: Mode) -> DesignMatrix:
    name = plan.ordering[j]
    step = plan.steps[name]
    protected = ds.protected
    categorical = {c: lv for c, lv in ds.levels.items() if ds.spec(c).scale == Scale.categorical}
    covariates = list(protected)
    group_by = list(protected)
    interactions = step.interactions
    if mode == "mutual":
        covariates += plan.ordering[:j]
        for i, comp in enumerate(step.companions):
            resolved = resolve_companion(comp, work[comp.source].to_numpy(), ds.spec(comp.source))
            cname = companion_name(comp, i)
            work[cname] = make_companions(work[comp.source].to_numpy(), resolved)
            categorical[cname] = tuple(range(len(resolved.cutpoints) + 1))
            covariates.append(cname)
            group_by.append(cname)
    else:
        interactions = [(a, b) for a, b in interactions if a in protected and b in protected]
    if step.family == Family.empirical_by_group:
        return DesignMatrix.from_groups(group_labels(work, group_by))
    return build_design(work, covariates, categorical, interactions)


def _protected_only(plan: ChainPlan, j: int, mode: Mode) -> bool:
    return mode == "pairwise" or j == 0


def _fit_step(ds: Dataset, plan: ChainPlan, j: int, rows: DesignMatrix) -> CondModel:
    name = plan.ordering[j]
    step = plan.steps[name]
    atomic = None
    if step.family == Family.empirical_by_group and ds.spec(name).scale != Scale.continuous:
        atomic = True
    return fit_conditional(step.family, ds.values(name), rows, plan.optimizer, step.inflation, atomic)


def _summary(model: CondModel, rows: DesignMatrix) -> dict:
    out = {"family": model.family.value, "design_columns": list(model.design_columns),
           "dropped_columns": list(rows.dropped), "fit_diagnostics": model.fit_diagnostics,
           "atomic": model.atomic}
    if not model.coefficients.empty:
        out["coefficients"] = {k: float(v) for k, v in model.coefficients.items()}
    return out


def _run_replicate(ds: Dataset, plan: ChainPlan, m: int, mode: Mode, cache: dict):
    work = ds.frame.copy()
    pit = pd.DataFrame(index=ds.frame.index)
    summaries: dict[str, dict] = {}
    warnings: list[str] = []
    key_m = m if plan.key_by_replicate else 0
    for j, name in enumerate(plan.ordering):
        try:
            rows = _design_for(ds, plan, work, j, mode)
            model = cache[j] if j in cache else _fit_step(ds, plan, j, rows)
            target = Ecdf.from_sample(ds.values(name))
            adjusted, u, warn = univariate_map(ds.values(name), rows, model, target,
                                               keyed_generator(plan.seed, key_m, j), plan.tolerate_zero_mass)
        except ParityForgeError as e:
            raise ChainStepError(e, name, j, m) from e
        work[name] = adjusted
        pit[name] = u
        summaries[name] = _summary(model, rows)
        warnings += [f"replicate {m + 1}, {name}: {w}" for w in warn]
    logger.debug(f"replicate {m + 1}/{plan.M} ({mode}) done")
    return work[plan.ordering].copy(), pit, summaries, warnings


def _ensemble(ds: Dataset, plan: ChainPlan, mode: Mode, threads: int) -> AdjustedEnsemble:
    validate_roles(ds)
    plan.validate_against(ds)

    # fits whose design holds only protected columns are the same in every replicate
    cache: dict[int, CondModel] = {}
    for j in range(len(plan.ordering)):
        if _protected_only(plan, j, mode):
            try:
                rows = _design_for(ds, plan, ds.frame.copy(), j, mode)
                cache[j] = _fit_step(ds, plan, j, rows)
            except ParityForgeError as e:
                raise ChainStepError(e, plan.ordering[j], j, 0) from e

    results = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_run_replicate)(ds, plan, m, mode, cache) for m in range(plan.M)
    )
    untouched_cols = ds.protected + [ds.response]
    ensemble = AdjustedEnsemble(
        replicates=[r[0] for r in results],
        plan=plan,
        seed=plan.seed,
        mode=mode,
        schema=tuple(c for c in ds.columns if c.role != Role.excluded),
        untouched=ds.frame[untouched_cols].copy(),
        levels=dict(ds.levels),
        fit_summaries=[r[2] for r in results],
        pit=[r[1] for r in results],
        warnings=[w for r in results for w in r[3]],
    )
    logger.info(f"built {plan.M} {mode} replicates over {len(plan.ordering)} features")
    return ensemble


def chain_transform(ds: Dataset, plan: ChainPlan, threads: int = 1) -> AdjustedEnsemble:
    return _ensemble(ds, plan, "mutual", threads)


def pairwise_transform(ds: Dataset, plan: ChainPlan, threads: int = 1) -> AdjustedEnsemble:
    return _ensemble(ds, plan, "pairwise", threads)


def transform_none(ds: Dataset, plan: ChainPlan) -> AdjustedEnsemble:
    """The unadjusted arm packaged as a one-replicate ensemble."""
    plan.validate_against(ds)
    return AdjustedEnsemble(
        replicates=[ds.frame[plan.ordering].copy()],
        plan=plan.model_copy(update={"M": 1}),
        seed=plan.seed,
        mode="none",
        schema=tuple(c for c in ds.columns if c.role != Role.excluded),
        untouched=ds.frame[ds.protected + [ds.response]].copy(),
        levels=dict(ds.levels),
    )


def run_transform(ds: Dataset, plan: ChainPlan, mode: Mode, threads: int = 1) -> AdjustedEnsemble:
    if mode == "mutual":
        return chain_transform(ds, plan, threads)
    if mode == "pairwise":
        return pairwise_transform(ds, plan, threads)
    return transform_none(ds, plan)


__all__ = [
    "AdjustedEnsemble", "chain_transform", "companion_name", "load_ensemble", "make_companions",
    "pairwise_transform", "resolve_companion", "run_transform", "transform_none",
    "transform_univariate", "univariate_map",
]
