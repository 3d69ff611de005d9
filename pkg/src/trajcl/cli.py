"""Command-line entry point.

Commands: ingest, synth, measure-divergence, train, evaluate, report. A flat
JSON config file supplies defaults; flags override; the resolved config is
echoed into every output directory.

Exit codes: 0 ok, 2 input/schema error, 3 insufficient data, 4 numerical
failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import divergence as div
from . import metrics
from .config import RunConfig, ScenarioSource
from .data import (SyntheticScenarioSpec, build_samples, generate_synthetic,
                   load_dataset, parse_tracks, save_dataset, split_dataset)
from .errors import (BadRatios, BadSpec, EmptyFile, InsufficientData,
                     MissingArtifacts, MissingColumn, NonFiniteInput,
                     NonFiniteLoss, NonMonotonicFrames, TrajclError)
from .nn import load_params
from .predictor import forward_batch, mean_trajectories
from .trainer import run_continual

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_INPUT = 2
EXIT_INSUFFICIENT_DATA = 3
EXIT_NUMERICAL = 4

_INPUT_ERRORS = (MissingColumn, NonMonotonicFrames, EmptyFile, BadRatios, BadSpec,
                 FileNotFoundError, ValueError, KeyError, json.JSONDecodeError)
_NUMERICAL_ERRORS = (NonFiniteLoss, NonFiniteInput)


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def cmd_ingest(args) -> int:
    tracks = parse_tracks(args.csv, frame_rate=args.frame_rate)
    samples, skipped = build_samples(tracks, args.t_h, args.t_f, args.frame_rate,
                                     n_max=args.n_neighbors, stride=args.stride)
    dataset = split_dataset(samples, args.ratios, args.seed,
                            scenario_id=args.scenario_id, name=args.name,
                            frame_rate=args.frame_rate, tracks=tracks)
    manifest = save_dataset(dataset, args.out)
    print(f"ingested {args.csv}: {len(tracks)} tracks, {len(samples)} samples "
          f"({skipped} windows skipped), splits "
          + "/".join(str(manifest["split_counts"][k]) for k in ("train", "val", "test")))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticScenarioSpec(
        family=args.family, n_vehicles=args.n_vehicles,
        speed_range=(args.speed_min, args.speed_max), noise_std=args.noise_std,
        seed=args.seed, duration_s=args.duration)
    dataset = generate_synthetic(spec, t_h=args.t_h, t_f=args.t_f,
                                 n_max=args.n_neighbors, stride=args.stride,
                                 split_seed=args.seed, scenario_id=args.scenario_id,
                                 name=args.name or args.family)
    manifest = save_dataset(dataset, args.out)
    print(f"generated {args.family}: {manifest['n_samples']} samples -> {args.out}")
    return EXIT_OK


def cmd_measure_divergence(args) -> int:
    datasets = [load_dataset(p) for p in args.datasets]
    if len(datasets) < 2:
        raise ValueError("need at least two ingested scenarios")
    case_sets = {}
    for ds in datasets:
        name = ds.name
        while name in case_sets:
            name += "'"
        case_sets[name] = div.build_cases(ds.subset("train"), k=args.k,
                                          lambda_decay=args.lambda_decay,
                                          downsample=args.downsample)
    report = div.measure_divergence(case_sets, n_components=args.components,
                                    epochs=args.epochs, lr=args.lr, n_mc=args.n_mc,
                                    w1=args.w1, seed=args.seed,
                                    condition_cap=args.condition_cap)
    report.save(args.out)
    print(f"weighted CKLD matrix ({', '.join(report.names)}):")
    for row in report.weighted:
        print("  " + "  ".join(f"{v:10.3f}" for v in row))
    print(f"wrote {args.out}")
    return EXIT_OK


def _resolve_config(args) -> RunConfig:
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {k: v for k, v in vars(args).items()
                 if k in RunConfig.__dataclass_fields__ and v is not None}
    doc.update(overrides)
    return RunConfig.from_dict(doc)


def cmd_train(args) -> int:
    config = _resolve_config(args)
    if not config.scenarios:
        raise ValueError("config must list at least one scenario")
    # task identity follows the sequence: repeating a name is a re-visit
    name_to_id = {}
    scenarios = []
    for src in config.scenarios:
        sid = name_to_id.setdefault(src.name, len(name_to_id) + 1)
        if src.path is not None:
            ds = load_dataset(src.path)
        else:
            spec = SyntheticScenarioSpec(**src.synthetic)
            ds = generate_synthetic(spec, t_h=config.t_h, t_f=config.t_f,
                                    n_max=config.n_neighbors, stride=config.stride,
                                    ratios=config.split_ratios,
                                    split_seed=config.split_seed, name=src.name)
        ds.name = src.name
        ds.scenario_id = sid
        for s in ds.samples:
            s.scenario_id = sid
        scenarios.append(ds)
    artifacts = run_continual(scenarios, config, config.mode, out_dir=config.output_dir)
    final = artifacts.final_report
    print(f"mode={config.mode} scenarios={len(scenarios)} "
          f"final average ADE {final.average_ade:.3f} / FDE {final.average_fde:.3f}")
    print(f"artifacts in {config.output_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, meta = load_params(args.checkpoint)
    dataset = load_dataset(args.dataset)
    from .predictor import ModelConfig
    sample = dataset.samples[0]
    model_config = ModelConfig(
        t_h_frames=sample.target_history.shape[0],
        t_f_frames=sample.target_future.shape[0],
        n_neighbors=sample.neighbor_histories.shape[0],
        normalize=bool(meta.get("normalize", True)))
    test = dataset.subset("test")
    pred = mean_trajectories(forward_batch(params, test, model_config))
    truth = np.stack([s.target_future for s in test])
    doc = {"dataset": dataset.name, "checkpoint": str(args.checkpoint),
           "n_ts": len(test),
           "ade": metrics.ade(pred, truth), "fde": metrics.fde(pred, truth)}
    if args.out:
        _write_json(args.out, doc)
    print(f"{dataset.name}: ADE {doc['ade']:.3f} m, FDE {doc['fde']:.3f} m ({len(test)} samples)")
    return EXIT_OK


def _load_run(run_dir: Path) -> dict:
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifacts(f"{run_dir} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    evals = sorted(run_dir.glob("eval_*.json"))
    plans = sorted(run_dir.glob("plan_*.json"))
    return {
        "dir": run_dir,
        "manifest": manifest,
        "evals": [json.loads(p.read_text()) for p in evals],
        "plans": [json.loads(p.read_text()) for p in plans],
    }


def cmd_report(args) -> int:
    runs = [_load_run(Path(d)) for d in args.runs]
    if not runs:
        raise MissingArtifacts("no run directories given")

    scenario_ids = []
    for run in runs:
        for sid in run["evals"][-1]["learned_order"]:
            if sid not in scenario_ids:
                scenario_ids.append(sid)
    modes = [run["evals"][-1]["mode"] for run in runs]

    rows = []
    for sid in scenario_ids:
        row = {"scenario": sid}
        for run, mode in zip(runs, modes):
            entry = run["evals"][-1]["per_scenario"].get(str(sid))
            row[mode] = (f"{entry['ade']:.3f}/{entry['fde']:.3f}" if entry else "")
        rows.append(row)
    avg_row = {"scenario": "average"}
    for run, mode in zip(runs, modes):
        final = run["evals"][-1]
        avg_row[mode] = f"{final['average_ade']:.3f}/{final['average_fde']:.3f}"
    rows.append(avg_row)

    mem_row = {"scenario": "memory_samples"}
    for run, mode in zip(runs, modes):
        mem_row[mode] = str(sum(p["total"] for p in run["plans"]))
    rows.append(mem_row)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["scenario"] + modes)
        writer.writeheader()
        writer.writerows(rows)

    doc = {"columns": modes, "rows": rows}
    totals = {mode: sum(p["total"] for p in run["plans"])
              for run, mode in zip(runs, modes)}
    if "gsm" in totals and "dgsm" in totals and totals["gsm"] > 0:
        doc["cost_ratio_dgsm_vs_gsm"] = totals["dgsm"] / totals["gsm"]
    _write_json(out_dir / "summary.json", doc)

    header = ["scenario"] + modes
    print("  ".join(f"{h:>16s}" for h in header))
    for row in rows:
        print("  ".join(f"{str(row.get(h, '')):>16s}" for h in header))
    if "cost_ratio_dgsm_vs_gsm" in doc:
        print(f"memory cost ratio dgsm/gsm: {doc['cost_ratio_dgsm_vs_gsm']:.3f}")
    print(f"wrote {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajcl",
                                     description="Continual trajectory prediction runs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a trajectory CSV into a dataset directory")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="scenario")
    p.add_argument("--scenario-id", type=int, default=1, dest="scenario_id")
    p.add_argument("--frame-rate", type=float, default=10.0, dest="frame_rate")
    p.add_argument("--t-h", type=float, default=2.0, dest="t_h")
    p.add_argument("--t-f", type=float, default=4.0, dest="t_f")
    p.add_argument("--n-neighbors", type=int, default=5, dest="n_neighbors")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.1, 0.2))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic scenario dataset")
    p.add_argument("--family", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="")
    p.add_argument("--scenario-id", type=int, default=1, dest="scenario_id")
    p.add_argument("--n-vehicles", type=int, default=10, dest="n_vehicles")
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--speed-min", type=float, default=6.0, dest="speed_min")
    p.add_argument("--speed-max", type=float, default=12.0, dest="speed_max")
    p.add_argument("--noise-std", type=float, default=0.05, dest="noise_std")
    p.add_argument("--t-h", type=float, default=2.0, dest="t_h")
    p.add_argument("--t-f", type=float, default=4.0, dest="t_f")
    p.add_argument("--n-neighbors", type=int, default=5, dest="n_neighbors")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("measure-divergence", help="pairwise weighted CKLD between datasets")
    p.add_argument("--datasets", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--components", type=int, default=20, help="mixture components K")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--lambda-decay", type=float, default=0.9, dest="lambda_decay")
    p.add_argument("--downsample", type=int, default=5)
    p.add_argument("--n-mc", type=int, default=1000, dest="n_mc")
    p.add_argument("--w1", type=float, default=0.5)
    p.add_argument("--condition-cap", type=int, default=2000, dest="condition_cap")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_measure_divergence)

    p = sub.add_parser("train", help="run a continual training sequence")
    p.add_argument("--config", help="flat JSON RunConfig document")
    p.add_argument("--mode", choices=("vanilla", "gsm", "dgsm", "joint"))
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--m-cl", type=int, dest="m_cl")
    p.add_argument("--memory-capacity", type=int, dest="memory_capacity")
    p.add_argument("--w1", type=float)
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summary tables across run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InsufficientData as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT_DATA
    except _NUMERICAL_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrajclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
