"""Command-line pipeline: simulate | transform | diagnose | predict | report."""
import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from parity_forge import __version__
from parity_forge.config import RunConfig, apply_overrides, config_digest, load_config, resolve_threads
from parity_forge.core import group_labels
from parity_forge.data_load import load_csv, write_csv, write_frame
from parity_forge.diagnostics import independence_report, pairwise_cramers_v, pit_from_values
from parity_forge.errors import ConfigError, ParityForgeError, UsageError
from parity_forge.helpers.utils import file_digest, format_number, format_pvalue, write_json
from parity_forge.log import configure_logging
from parity_forge.predict import build_parity_report, predict_ensemble, stratified_split
from parity_forge.simulation import run_sim_study, simulate_data
from parity_forge.transform import load_ensemble, run_transform

MANIFEST_NAME = "run_manifest.json"
SUMMARY_NAME = "summary.json"


# -----------------------------
# Run manifest
# -----------------------------
def _versions() -> dict[str, str]:
    out = {"parity_forge": __version__}
    for pkg in ("numpy", "scipy", "pandas", "pydantic", "joblib", "loguru"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int | None
    started: float = field(default_factory=time.time)
    warnings: list[str] = field(default_factory=list)
    files: dict[str, str] = field(default_factory=dict)

    def add(self, paths) -> None:
        for p in paths:
            self.files[Path(p).name] = file_digest(p)

    def write(self, out_dir: Path) -> Path:
        finished = time.time()
        payload = {
            "command": self.command,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "timings": {
                "started": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
                "seconds": round(finished - self.started, 3),
            },
            "versions": _versions(),
            "warnings": self.warnings,
            "files": dict(sorted(self.files.items())),
        }
        path = write_json(out_dir / MANIFEST_NAME, payload)
        logger.info(f"wrote {len(self.files)} files to {out_dir}")
        return path


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(
        cfg,
        seed=getattr(args, "seed", None),
        m=getattr(args, "m", None),
        n=getattr(args, "n", None),
        model=getattr(args, "model", None),
        threshold=getattr(args, "threshold", None),
        threads=getattr(args, "threads", None),
    )


# -----------------------------
# Commands
# -----------------------------
def cmd_simulate(args) -> int:
    cfg = _config(args)
    sim = cfg.simulation
    out = Path(args.out)
    ds = simulate_data(sim)
    manifest = RunManifest("simulate", config_digest(cfg), sim.seed)
    manifest.add([write_csv(ds, out / "data.csv")])
    study = run_sim_study(sim, resolve_threads(cfg), ds)
    manifest.add(study.export(out, "study"))
    manifest.warnings += study.warnings
    for name, gap in study.gaps.items():
        print(f"{name:<14} gap {gap:.4f}")
    manifest.write(out)
    return 0


def cmd_transform(args) -> int:
    cfg = _config(args)
    if cfg.data is None or cfg.plan is None:
        raise ConfigError("transform needs 'data' and 'plan' sections in the config")
    out = Path(args.out)
    ds = load_csv(cfg.data.path, cfg.data.columns)
    ensemble = run_transform(ds, cfg.plan, args.mode, resolve_threads(cfg))
    stem = cfg.data.stem or Path(cfg.data.path).stem
    manifest = RunManifest("transform", config_digest(cfg), cfg.plan.seed)
    manifest.add(ensemble.export(out, stem))
    manifest.warnings += ensemble.warnings
    print(f"{ensemble.M} {ensemble.mode} replicates of {format_number(ds.n)} rows -> {out}")
    manifest.write(out)
    return 0


def cmd_diagnose(args) -> int:
    ensemble = load_ensemble(args.ensemble)
    out = Path(args.out) if args.out else Path(args.ensemble) / "diagnostics"
    manifest = RunManifest("diagnose", _digest_of(args.ensemble), ensemble.seed)

    groups = group_labels(ensemble.untouched, ensemble.protected)
    reports, cramers, pit_rows, pit_values = [], [], [], []
    for m in range(ensemble.M):
        frame = ensemble.replicate_dataset(m).frame
        report = independence_report(frame, ensemble.protected, ensemble.features, replicate=m + 1)
        reports.append(report.table)
        manifest.warnings += report.warnings
        cramers.append(pairwise_cramers_v(frame, ensemble.protected + ensemble.features).assign(replicate=m + 1))
        pit = ensemble.pit[m] if m < len(ensemble.pit) else pd.DataFrame()
        for name in pit.columns:
            for res in pit_from_values(pit[name].to_numpy(), groups):
                pit_rows.append({"replicate": m + 1, "variable": name, "group": res.group, "n": res.n,
                                 "ks": res.ks, "p_value": res.p_value, "low_power": res.low_power})
                if res.low_power:
                    manifest.warnings.append(f"replicate {m + 1}, {name}: PIT group '{res.group}' is low-power")
            pit_values.append(pd.DataFrame({"replicate": m + 1, "variable": name, "group": groups,
                                            "pit": pit[name].to_numpy()}))

    table = pd.concat(reports, ignore_index=True)
    written = [
        write_frame(table, out / "independence.csv"),
        write_json(out / "independence.json", table.to_dict(orient="records")),
        write_frame(pd.concat(cramers, ignore_index=True), out / "cramers_v.csv"),
    ]
    if pit_rows:
        written.append(write_frame(pd.DataFrame(pit_rows), out / "pit.csv"))
        written.append(write_frame(pd.concat(pit_values, ignore_index=True), out / "pit_values.csv"))
    manifest.add(written)

    first = table[table["replicate"] == 1]
    for row in first.itertuples():
        print(f"{row.protected} vs {row.variable}: p={format_pvalue(row.p_raw)} "
              f"BH={format_pvalue(row.p_bh)} V={row.cramers_v:.3f}")
    manifest.write(out)
    return 0


def cmd_predict(args) -> int:
    cfg = _config(args)
    ensemble = load_ensemble(args.ensemble)
    out = Path(args.out) if args.out else Path(args.ensemble) / "predict"
    seed = args.seed if args.seed is not None else ensemble.seed
    pcfg = cfg.predict
    features = pcfg.features or ensemble.features

    y = ensemble.untouched[ensemble.response].to_numpy()
    train = stratified_split(y, seed)
    hp = pcfg.forest if pcfg.model.value == "random_forest" else None
    scores = predict_ensemble(pcfg.model, ensemble, y, hp, seed, train, resolve_threads(cfg), features=features)
    groups = group_labels(ensemble.untouched, ensemble.protected)
    test = ~train
    report = build_parity_report(scores[test], y[test], groups[test], pcfg.threshold)

    manifest = RunManifest("predict", config_digest(cfg), seed)
    stem = f"parity.{ensemble.mode}.{pcfg.model.value}"
    manifest.add(report.export(out, stem))
    scores_frame = pd.DataFrame({"row": np.arange(y.size), "split": np.where(train, "train", "test"),
                                 "group": groups, "label": y, "score": scores})
    manifest.add([write_frame(scores_frame, out / f"{stem}.scores.csv")])
    manifest.warnings += report.warnings + report.metrics.warnings
    print(f"{ensemble.mode}/{pcfg.model.value}: AUC {report.auc:.3f}, parity gap {report.gap:.4f}, "
          f"fpr mad {report.metrics.mad['fpr']:.3f}")
    manifest.write(out)
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"not a directory: {run_dir}")
    summary: dict = {"simulation": {}, "predict": {}, "diagnose": {}}
    for path in sorted(run_dir.rglob("*.json")):
        if path.name in (MANIFEST_NAME, SUMMARY_NAME) or path.name.endswith(".manifest.json"):
            continue
        payload = json.loads(path.read_text(encoding="utf-8"))
        rel = str(path.relative_to(run_dir))
        if isinstance(payload, dict) and "gaps" in payload:
            summary["simulation"][rel] = payload["gaps"]
        elif isinstance(payload, dict) and "auc" in payload:
            summary["predict"][rel] = {"auc": payload["auc"], "gap": payload["gap"], "mad": payload["mad"]}
        elif isinstance(payload, list) and payload and "p_bh" in payload[0]:
            rejected = sum(1 for r in payload if r["p_bh"] is not None and r["p_bh"] < args.alpha)
            summary["diagnose"][rel] = {"pairs": len(payload), "rejected": rejected, "alpha": args.alpha}

    for section, entries in summary.items():
        for rel, values in entries.items():
            print(f"[{section}] {rel}: {json.dumps(values, sort_keys=True)}")
    out = Path(args.out) if args.out else run_dir / "report"
    manifest = RunManifest("report", _digest_of(run_dir), None)
    manifest.add([write_json(out / SUMMARY_NAME, summary)])
    manifest.write(out)
    return 0


def _digest_of(path) -> str:
    """Digest of a directory's manifests, standing in for a config digest."""
    manifests = sorted(Path(path).glob("*.manifest.json"))
    return file_digest(manifests[0]) if manifests else ""


# -----------------------------
# Parser
# -----------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parity-forge",
                                     description="Transform features to mutual independence of protected columns.")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON config file or JSON text")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)

    p = sub.add_parser("simulate", help="simulate the two-feature study and compare regimes")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("transform", help="build an adjusted ensemble from a CSV")
    common(p, config_required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int)
    p.add_argument("--mode", choices=["mutual", "pairwise", "none"], default="mutual")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("diagnose", help="independence and PIT checks on an ensemble")
    p.add_argument("ensemble")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("predict", help="fit predictors on an ensemble and report parity")
    p.add_argument("ensemble")
    common(p)
    p.add_argument("--out")
    p.add_argument("--model", choices=["rf", "random_forest", "logistic"])
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="summarize every JSON artifact in a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except ParityForgeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
