"""``cellspan`` command line.

Every command writes into an ``--out`` directory together with a
``manifest.json`` recording the command, its configuration, inputs and
outputs. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .dataset import (
    DEFAULT_THRESHOLD,
    SyntheticSpec,
    cell_from_dict,
    generate_synthetic,
    load_dataset,
    load_truth,
    parse_dataset,
    save_dataset,
    save_truth,
)
from .errors import DataError, NumericalError
from .features import read_feature_table, write_feature_table
from .interp import KERNELS
from .training import DEFAULT_ALPHA_GRID, DEFAULT_L1_GRID, TrainConfig, r_squared, rmse_cycles, write_history

logger = logging.getLogger("cellspan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: list[str]
    seed: int | None
    tool_version: str = field(default_factory=_version)
    wall_time_s: float = 0.0

    def write(self, out_dir: Path) -> None:
        with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _out_dir(path: str) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise UsageError(f"--out {path} exists and is not a directory")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _threshold(text: str) -> float:
    try:
        t = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (0 < t < 1):
        raise argparse.ArgumentTypeError("threshold must lie in (0, 1)")
    return t


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, allow_nan=True)
        fh.write("\n")


def _num(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _config(args) -> dict:
    skip = {"func", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip}


# --- commands -------------------------------------------------------------------


def cmd_synth(args) -> tuple[int, RunManifest]:
    out = _out_dir(args.out)
    fr = tuple(args.split_fractions)
    if len(fr) != 3:
        raise UsageError("--split-fractions needs three values")
    spec = SyntheticSpec(
        n_cells=args.n_cells,
        noise_sd=args.noise_sd,
        max_cycles=args.max_cycles,
        rng_seed=args.seed,
        threshold=args.threshold,
        split_fractions=fr,
    )
    cells, truth = generate_synthetic(spec)
    save_dataset(cells, out / "dataset.json")
    save_truth(truth, out / "truth.json")
    print(f"wrote {len(cells)} cells to {out / 'dataset.json'}")
    return EXIT_OK, RunManifest("synth", _config(args), {}, ["dataset.json", "truth.json"], args.seed)


def cmd_fit_curves(args) -> tuple[int, RunManifest]:
    out = _out_dir(args.out)
    cells = load_dataset(args.dataset)
    truth = load_truth(args.truth) if args.truth else {}
    fits = pl.fit_all(cells)
    pairs, per_cell_r2, failures = [], [], []
    with open(out / "params.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "A", "B", "C", "r_squared", "cycle_life_fit", "cycle_life_true"])
        for f in fits:
            cid = f.cell.cell_id
            if f.report is None:
                failures.append((cid, f.error_kind, f.error))
                w.writerow([cid, "", "", "", "", "", ""])
                continue
            if not f.report.converged:
                failures.append((cid, "numerical", f"cell {cid}: fit did not converge in {f.report.iterations} iterations"))
            p = f.report.params
            life_fit = pl.fitted_life(f.report, args.threshold)
            if cid in truth and args.threshold == DEFAULT_THRESHOLD:
                life_true = truth[cid].get("cycle_life_true")
            else:
                life_true = pl.observed_life(f.cell, args.threshold)
            if life_fit is not None and life_true is not None:
                pairs.append((life_fit, float(life_true)))
            per_cell_r2.append(f.report.r_squared)
            w.writerow([cid, _num(p.A), _num(p.B), _num(p.C), _num(f.report.r_squared), _num(life_fit), _num(life_true)])

    summary = {
        "n_cells": len(fits),
        "n_failed": len(failures),
        "threshold": args.threshold,
        "mean_cell_r_squared": float(np.mean(per_cell_r2)) if per_cell_r2 else None,
        "life_r_squared": None,
        "life_rmse": None,
        "failures": [{"cell_id": c, "kind": k, "error": e} for c, k, e in failures],
    }
    if len(pairs) >= 2:
        fit_l, true_l = np.array(pairs).T
        summary["life_r_squared"] = r_squared(fit_l, true_l)
        summary["life_rmse"] = rmse_cycles(fit_l, true_l)
    _write_json(out / "summary.json", summary)
    print(f"fitted {len(fits) - len(failures)}/{len(fits)} cells; "
          f"mean per-cell R^2 {_fmt_opt(summary['mean_cell_r_squared'])}; "
          f"life R^2 {_fmt_opt(summary['life_r_squared'])}, RMSE {_fmt_opt(summary['life_rmse'])} cycles")
    for cid, kind, err in failures:
        print(f"  FAILED {cid} ({kind}): {err}", file=sys.stderr)
    code = EXIT_OK
    if failures:
        code = EXIT_DATA if any(k == "data" for _, k, _ in failures) else EXIT_NUMERICAL
    return code, RunManifest("fit-curves", _config(args), {"dataset": args.dataset, "truth": args.truth},
                             ["params.csv", "summary.json"], None)


def _fmt_opt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def cmd_features(args) -> tuple[int, RunManifest]:
    out = _out_dir(args.out)
    cells = load_dataset(args.dataset)
    settings = pl.FeatureSettings(args.grid_points, kernel=args.kernel, degree=args.degree)
    vectors, skipped = pl.extract_all(cells, settings)
    for msg in skipped:
        print(f"warning: skipped {msg}", file=sys.stderr)
    kept = {v.cell_id for v in vectors}
    fits = pl.fit_all([c for c in cells if c.cell_id in kept])
    rows = pl.build_feature_rows(vectors, fits)
    write_feature_table(rows, out / "features.csv")
    outputs = ["features.csv", "feature_config.json"]
    config = {"feature_settings": asdict(settings), "selected": None}
    try:
        report = pl.correlation_report(rows)
    except DataError as exc:
        print(f"warning: no feature selection: {exc}", file=sys.stderr)
    else:
        _write_json(out / "correlation.json", report.to_dict())
        print(report.to_table())
        config["selected"] = list(report.selected)
        outputs.append("correlation.json")
    _write_json(out / "feature_config.json", config)
    return EXIT_OK, RunManifest("features", _config(args), {"dataset": args.dataset}, outputs, None)


def _feature_settings_near(features_path: str, args) -> pl.FeatureSettings:
    cfg = Path(features_path).with_name("feature_config.json")
    if cfg.exists():
        with open(cfg, encoding="utf-8") as fh:
            try:
                return pl.FeatureSettings(**json.load(fh)["feature_settings"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{cfg}: malformed feature config ({exc!r})") from None
    return pl.FeatureSettings(args.grid_points, kernel=args.kernel, degree=args.degree)


def _apply_params_csv(rows, path: str) -> None:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read params {path}: {exc.strerror}") from None
    with fh:
        table = {}
        for lineno, rec in enumerate(csv.DictReader(fh), start=2):
            try:
                table[rec["cell_id"]] = tuple(float(rec[k]) if rec[k] else None for k in ("A", "B", "C"))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}, line {lineno}: {exc!r}") from None
    for r in rows:
        A, B, C = table.get(r.features.cell_id, (None, None, None))
        r.A, r.B = A, B
        if C is not None:
            r.C = C


def cmd_train(args) -> tuple[int, RunManifest]:
    out = _out_dir(args.out)
    rows = read_feature_table(args.features)
    if args.params:
        _apply_params_csv(rows, args.params)
    settings = _feature_settings_near(args.features, args)
    config = TrainConfig(
        stage1_epochs=args.stage1_epochs,
        stage1_lr=args.stage1_lr,
        stage2_epochs=args.stage2_epochs,
        stage2_lr=args.stage2_lr,
        w_A=args.w_a,
        w_B=args.w_b,
        rng_seed=args.seed,
        threshold=args.threshold,
        embed_dim=args.embed_dim,
    )
    result = pl.train_pipeline(rows, config, settings, args.alpha_grid, args.l1_grid, not args.no_baseline)
    result.checkpoint.save(out / "checkpoint.json")
    write_history(result.history, out / "history.csv")
    for st in (1, 2):
        h = [x for x in result.history if x.stage == st]
        if h:
            key = "param_loss" if st == 1 else "cycle_life_loss"
            print(f"stage {st}: {key} {getattr(h[0], key):.6g} -> {getattr(h[-1], key):.6g} over {h[-1].epoch} epochs")
    print(f"selected features: {', '.join(result.checkpoint.selected)}")
    outputs = ["checkpoint.json", "history.csv"]
    if result.baseline_grid:
        with open(out / "baseline_grid.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "l1_ratio", "rmse_primary"])
            for g in result.baseline_grid:
                w.writerow([repr(g.alpha), repr(g.l1_ratio), repr(g.rmse_select)])
        outputs.append("baseline_grid.csv")
        b = result.checkpoint.baseline
        print(f"elastic-net baseline: alpha={b.alpha:.4g}, l1_ratio={b.l1_ratio:.4g}")
    inputs = {"features": args.features, "params": args.params}
    return EXIT_OK, RunManifest("train", _config(args), inputs, outputs, args.seed)


def cmd_evaluate(args) -> tuple[int, RunManifest]:
    out = _out_dir(args.out)
    ckpt = pl.Checkpoint.load(args.checkpoint)
    cells = load_dataset(args.dataset)
    prepared, skipped = pl.prepare_cells(ckpt, cells)
    for msg in skipped:
        print(f"warning: skipped {msg}", file=sys.stderr)
    reports = {"attention": pl.evaluate_prepared(ckpt.model, prepared, args.threshold, "attention")}
    if ckpt.baseline is not None:
        reports["elastic_net"] = pl.evaluate_prepared(ckpt.baseline, prepared, args.threshold, "elastic_net")
    _write_json(out / "report.json", {name: r.to_dict() for name, r in reports.items()})

    with open(out / "curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "cell_id", "split", "cycle", "q_loss_pred", "q_loss_observed"])
        for name, rep in reports.items():
            for p, c in zip(prepared, rep.cells):
                obs = dict(zip(p.cell.summaries.cycle.tolist(), (1.0 - p.cell.summaries.qd / p.cell.nominal_capacity).tolist()))
                last = max(x for x in (c.life_pred, c.life_true or 0, 100) if math.isfinite(x))
                for cyc, q in pl.loss_curve_samples(c.A_hat, c.B_hat, c.C, last):
                    w.writerow([name, c.cell_id, c.split, cyc, repr(q), _num(obs.get(cyc))])

    for name, rep in reports.items():
        for split, m in rep.splits.items():
            print(f"{name:12s} {split:15s} n={m.n:4d} RMSE={m.rmse_cycles:10.3f} cycles  R^2={m.r_squared:.4f}")
        for note in rep.notices:
            print(f"{name}: {note}", file=sys.stderr)
    inputs = {"checkpoint": args.checkpoint, "dataset": args.dataset}
    return EXIT_OK, RunManifest("evaluate", _config(args), inputs, ["report.json", "curves.csv"], None)


def _load_single_cell(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if isinstance(obj, dict) and "cells" not in obj:
        return cell_from_dict(obj, path)
    cells = parse_dataset(text, path)
    if len(cells) != 1:
        raise DataError(f"{path}: expected exactly one cell, found {len(cells)}")
    return cells[0]


def cmd_predict(args) -> tuple[int, RunManifest | None]:
    ckpt = pl.Checkpoint.load(args.checkpoint)
    cell = _load_single_cell(args.cell)
    prepared, skipped = pl.prepare_cells(ckpt, [cell])
    if not prepared:
        raise DataError(skipped[0])
    p = prepared[0]
    predictor = ckpt.baseline if args.model == "elastic_net" else ckpt.model
    if predictor is None:
        raise DataError("checkpoint has no elastic-net baseline")
    A, B, life = pl.predict_one(predictor, p, args.threshold)
    thresholds = sorted(set(args.sweep or []))
    result = {
        "cell_id": cell.cell_id,
        "model": args.model,
        "A_hat": A,
        "B_hat": B,
        "C": p.C,
        "threshold": args.threshold,
        "cycle_life": life,
        "sweep": [{"threshold": t, "cycle_life": pl.predict_one(predictor, p, t)[2]} for t in thresholds if t > p.C],
        "curve": [{"cycle": c, "q_loss": q} for c, q in pl.loss_curve_samples(A, B, p.C, life if math.isfinite(life) else 1)],
    }
    if not args.out:
        json.dump(result, sys.stdout, indent=1)
        sys.stdout.write("\n")
        return EXIT_OK, None
    out = _out_dir(args.out)
    _write_json(out / "prediction.json", result)
    print(f"{cell.cell_id}: A_hat={A:.6g} B_hat={B:.6g} life@{args.threshold}={life:.2f}")
    inputs = {"checkpoint": args.checkpoint, "cell": args.cell}
    return EXIT_OK, RunManifest("predict", _config(args), inputs, ["prediction.json"], None)


# --- parser -----------------------------------------------------------------------


def _add_feature_flags(p) -> None:
    p.add_argument("--grid-points", type=int, default=1000, help="voltage grid size (default 1000)")
    p.add_argument("--kernel", choices=KERNELS, default="cubic")
    p.add_argument("--degree", type=int, default=1, help="polynomial trend degree m (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cellspan", description="Capacity-loss curve reconstruction and cycle-life prediction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset and truth sidecar")
    p.add_argument("--out", required=True)
    p.add_argument("--n-cells", type=int, default=124)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sd", type=float, default=0.002)
    p.add_argument("--max-cycles", type=int, default=3000)
    p.add_argument("--threshold", type=_threshold, default=DEFAULT_THRESHOLD)
    p.add_argument("--split-fractions", type=_float_list, default=[0.8, 0.1, 0.1])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-curves", help="fit the capacity-loss law per cell")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=_threshold, default=DEFAULT_THRESHOLD)
    p.add_argument("--truth", help="optional truth sidecar; its exact lives replace the recorded labels")
    p.set_defaults(func=cmd_fit_curves)

    p = sub.add_parser("features", help="extract candidate features and rank them")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_feature_flags(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="two-stage training plus elastic-net baseline")
    p.add_argument("--features", required=True, help="features.csv written by the features command")
    p.add_argument("--params", help="params.csv from fit-curves; overrides the fitted targets in features.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=_threshold, default=DEFAULT_THRESHOLD)
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--stage1-epochs", type=int, default=800)
    p.add_argument("--stage1-lr", type=float, default=1e-3)
    p.add_argument("--stage2-epochs", type=int, default=3000)
    p.add_argument("--stage2-lr", type=float, default=5e-5)
    p.add_argument("--w-a", type=float, default=1.0)
    p.add_argument("--w-b", type=float, default=1.0)
    p.add_argument("--alpha-grid", type=_float_list, default=list(DEFAULT_ALPHA_GRID))
    p.add_argument("--l1-grid", type=_float_list, default=list(DEFAULT_L1_GRID))
    p.add_argument("--no-baseline", action="store_true")
    _add_feature_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-split RMSE report and plot-ready curves")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=_threshold, default=DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict one cell's curve parameters and life")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cell", required=True, help="JSON file holding one cell (bare object or one-cell dataset)")
    p.add_argument("--out")
    p.add_argument("--threshold", type=_threshold, default=DEFAULT_THRESHOLD)
    p.add_argument("--sweep", type=_float_list, help="comma-separated extra thresholds")
    p.add_argument("--model", choices=("attention", "elastic_net"), default="attention")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help (0) or a usage error (1)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        code, manifest = args.func(args)
    except UsageError as exc:
        print(f"cellspan: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"cellspan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"cellspan: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if manifest is not None:
        manifest.wall_time_s = round(time.perf_counter() - start, 3)
        manifest.write(Path(args.out))
    return code


if __name__ == "__main__":
    sys.exit(main())
