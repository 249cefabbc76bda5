"""Experiment runner.

Subcommands: riesz, toy, train, margins, gradcheck. Every run is fully
determined by the resolved config plus the seed; numeric outputs (CSV,
report JSON) are byte-identical across reruns, with the timestamp isolated
in meta.json. Exit codes: 0 success, 2 config error, 3 numeric failure,
4 threshold failure in --assert mode.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import math
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import plots
from .datasets import imbalance_counts, make_blob_pair
from .errors import ConfigError, MarginForgeError, NumericOverflowError, TrainingDivergedError
from .gradcheck import sweep
from .margins import build_report
from .reports import fmt, write_csv, write_json, write_matrix_csv, write_meta
from .sphere_opt import minimize_riesz, optimize_free_embedding
from .trainer import build_mlp, histogram_rows, similarity_and_margins, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ASSERT = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI-shaped config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    p.add_argument("--seed", type=int, help="override the config/env seed")
    p.add_argument("--output-dir", help="override run.output_dir")
    p.add_argument("--dry-run", action="store_true",
                   help="validate config and write resolved_config.json only")
    p.add_argument("--assert", dest="check_assert", action="store_true",
                   help="fail with exit code 4 if [assert] thresholds are not met")
    p.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    p.add_argument("--jobs", type=int, help="max concurrent grid entries")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="margin-forge",
                                 description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("riesz", help="minimize Riesz energy / pack prototypes")
    p.add_argument("--k", type=int, help="number of prototypes")
    p.add_argument("--d", type=int, help="ambient dimension")
    _add_common(p)

    p = sub.add_parser("toy", help="free-embedding optimization of (W, Z)")
    p.add_argument("--k", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--n", type=int, help="number of feature rows")
    _add_common(p)

    p = sub.add_parser("train", help="train the MLP on synthetic blobs")
    _add_common(p)

    p = sub.add_parser("margins", help="margin report for matrices on disk")
    p.add_argument("prototypes", help="CSV of prototype rows")
    p.add_argument("features", help="CSV of feature rows")
    p.add_argument("labels", help="CSV of integer labels, one per line")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference sweep over all losses")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", metavar="CHECK",
                   help="negative control: flip the named check's gradient sign")
    _add_common(p)
    return ap


def _prepare(args, command: str):
    cfg = C.load_config(args.config)
    for dotted in args.overrides:
        C.apply_override(cfg, dotted)
    for flag in ("k", "d", "n"):
        v = getattr(args, flag, None)
        if v is not None:
            cfg["geometry"][flag] = v
    if args.output_dir is not None:
        cfg["run"]["output_dir"] = args.output_dir
    if args.jobs is not None:
        cfg["run"]["jobs"] = args.jobs
    seed = C.resolve_seed(cfg, args.seed)
    out_dir = Path(cfg["run"]["output_dir"])
    if args.dry_run:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.json").write_text(C.resolved_json(cfg, seed) + "\n")
        print(f"dry run: config OK, wrote {out_dir / 'resolved_config.json'}")
        return None
    out_dir.mkdir(parents=True, exist_ok=True)
    write_meta(out_dir / "meta.json", command, seed, C.resolved_json(cfg, seed))
    return cfg, seed, out_dir


def _check_thresholds(cfg, args, *, class_margin_deg=None, gamma_min=None,
                      accuracy=None) -> int:
    if not args.check_assert:
        return EXIT_OK
    failures = []
    sec = cfg["assert"]
    if sec["min_class_margin_deg"] is not None and class_margin_deg is not None:
        if class_margin_deg < sec["min_class_margin_deg"]:
            failures.append(
                f"class_margin_deg {class_margin_deg:.3f} < {sec['min_class_margin_deg']}")
    if sec["min_gamma_min"] is not None and gamma_min is not None:
        if gamma_min < sec["min_gamma_min"]:
            failures.append(f"gamma_min {gamma_min:.4f} < {sec['min_gamma_min']}")
    if sec["min_accuracy"] is not None and accuracy is not None:
        if accuracy < sec["min_accuracy"]:
            failures.append(f"accuracy {accuracy:.4f} < {sec['min_accuracy']}")
    for f in failures:
        print(f"ASSERT FAIL: {f}", file=sys.stderr)
    return EXIT_ASSERT if failures else EXIT_OK


def cmd_riesz(args) -> int:
    prep = _prepare(args, "riesz")
    if prep is None:
        return EXIT_OK
    cfg, seed, out_dir = prep
    k, d = cfg["geometry"]["k"], cfg["geometry"]["d"]
    result = minimize_riesz(k, d, C.riesz_from(cfg), C.optim_from(cfg, seed))
    labels = np.arange(k)
    report = build_report(result.prototypes, result.prototypes, labels)
    write_matrix_csv(out_dir / "prototypes.csv", result.prototypes)
    write_json(out_dir / "margin_report.json", report.to_dict() | {
        "riesz_energy": result.energy,
        "restarts": [
            {"restart": s["restart"], "class_margin_deg": math.degrees(s["class_margin"]),
             "energy": s["energy"]} for s in result.restarts
        ],
    })
    write_csv(out_dir / "history.csv", result.history.COLUMNS, result.history.csv_rows())
    if not args.no_plots:
        plots.plot_prototypes(result.prototypes, out_dir / "fig_prototypes.png",
                              title=f"riesz k={k} d={d}")
        plots.plot_history(result.history, out_dir / "fig_history.png",
                           title=f"riesz k={k} d={d}")
    print(f"riesz k={k} d={d}: class_margin {report.class_margin_deg:.3f} deg, "
          f"energy {result.energy:.6g} -> {out_dir}")
    return _check_thresholds(cfg, args, class_margin_deg=report.class_margin_deg)


def _toy_entry(cfg, seed, out_dir, name):
    k, d, n = cfg["geometry"]["k"], cfg["geometry"]["d"], cfg["geometry"]["n"]
    if n % k:
        raise ConfigError(f"toy needs n divisible by k, got n={n}, k={k}")
    labels = np.repeat(np.arange(k), n // k)
    loss_spec = C.loss_spec_from(cfg)
    s_cont = cfg["toy"]["s_continuation"] or None
    w, z, history = optimize_free_embedding(
        k, d, labels, loss_spec, C.reg_spec_from(cfg), C.optim_from(cfg, seed),
        s_continuation=s_cont)
    report = build_report(w, z, labels)
    write_matrix_csv(out_dir / "prototypes.csv", w)
    write_matrix_csv(out_dir / "features.csv", z)
    write_json(out_dir / "margin_report.json", report.to_dict())
    write_csv(out_dir / "history.csv", history.COLUMNS, history.csv_rows())
    return name, report, history, w, z


def cmd_toy(args) -> int:
    prep = _prepare(args, "toy")
    if prep is None:
        return EXIT_OK
    cfg, seed, out_dir = prep
    entries = C.grid_entries(cfg) or {"run": cfg}
    jobs = max(1, cfg["run"]["jobs"])
    results = {}
    if jobs == 1 or len(entries) == 1:
        for name, entry_cfg in entries.items():
            results[name] = _toy_entry(entry_cfg, seed, out_dir / name, name)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_toy_entry, ec, seed, out_dir / nm, nm): nm
                       for nm, ec in entries.items()}
            for fut in concurrent.futures.as_completed(futures):
                name, report, history, w, z = fut.result()
                results[name] = (name, report, history, w, z)
    rows = []
    worst_margin = math.inf
    worst_gamma = math.inf
    for name in sorted(results):
        _, report, history, w, z = results[name]
        rows.append([name, fmt(report.class_margin_deg), fmt(report.gamma_min),
                     fmt(report.m_samp), fmt(history.rows[-1].loss)])
        worst_margin = min(worst_margin, report.class_margin_deg)
        worst_gamma = min(worst_gamma, report.gamma_min)
        if not args.no_plots:
            plots.plot_prototypes(w, out_dir / name / "fig_prototypes.png", z=z,
                                  title=name)
            plots.plot_history(history, out_dir / name / "fig_history.png", title=name)
        print(f"toy[{name}]: class_margin {report.class_margin_deg:.2f} deg, "
              f"gamma_min {report.gamma_min:.4f}, m_samp {report.m_samp:.4f}")
    write_csv(out_dir / "summary.csv",
              ["entry", "class_margin_deg", "gamma_min", "m_samp", "final_loss"], rows)
    return _check_thresholds(cfg, args, class_margin_deg=worst_margin,
                             gamma_min=worst_gamma)


def _train_entry(cfg, seed, out_dir, name):
    k = cfg["geometry"]["k"]
    ds = cfg["dataset"]
    counts = imbalance_counts(k, C.imbalance_from(cfg))
    blobs_train, blobs_test = make_blob_pair(
        k, ds["d_in"], counts, ds["spread"], seed,
        test_per_class=ds["test_per_class"], separation=ds["separation"])
    model = build_mlp(C.mlp_from(cfg, seed))
    record = train(model, blobs_train, blobs_test, C.train_config_from(cfg, seed))
    blobs_train.save(out_dir, "train")
    write_json(out_dir / "run_record.json", record.to_dict())
    write_csv(out_dir / "evals.csv", record.EVAL_COLUMNS, record.eval_rows())
    sims, margs = similarity_and_margins(model, blobs_test, record.prototypes)
    hist_sim = histogram_rows(sims, -1.0, 1.0)
    hist_marg = histogram_rows(margs, -2.0, 2.0)
    hist_header = ["bin_left", "bin_right", "count"]
    write_csv(out_dir / "hist_similarity.csv", hist_header, hist_sim)
    write_csv(out_dir / "hist_margin.csv", hist_header, hist_marg)
    return name, record, hist_sim, hist_marg


def cmd_train(args) -> int:
    prep = _prepare(args, "train")
    if prep is None:
        return EXIT_OK
    cfg, seed, out_dir = prep
    entries = C.grid_entries(cfg) or {"run": cfg}
    jobs = max(1, cfg["run"]["jobs"])
    results = {}
    if jobs == 1 or len(entries) == 1:
        for name, entry_cfg in entries.items():
            results[name] = _train_entry(entry_cfg, seed, out_dir / name, name)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_train_entry, ec, seed, out_dir / nm, nm): nm
                       for nm, ec in entries.items()}
            for fut in concurrent.futures.as_completed(futures):
                res = fut.result()
                results[res[0]] = res
    rows = []
    worst_margin = math.inf
    worst_acc = math.inf
    for name in sorted(results):
        _, record, hist_sim, hist_marg = results[name]
        final = record.final
        rows.append([name, fmt(final.test_accuracy), fmt(final.report.class_margin_deg),
                     fmt(final.report.gamma_min), fmt(final.report.m_samp),
                     fmt(final.train_loss)])
        worst_margin = min(worst_margin, final.report.class_margin_deg)
        worst_acc = min(worst_acc, final.test_accuracy)
        if not args.no_plots:
            plots.plot_evals(record, out_dir / name / "fig_training.png", title=name)
            plots.plot_histogram(hist_sim, out_dir / name / "fig_hist_similarity.png",
                                 "cosine similarity to own prototype", name)
            plots.plot_histogram(hist_marg, out_dir / name / "fig_hist_margin.png",
                                 "cosine sample margin", name)
        print(f"train[{name}]: acc {final.test_accuracy:.4f}, "
              f"class_margin {final.report.class_margin_deg:.2f} deg, "
              f"m_samp {final.report.m_samp:.4f}")
    write_csv(out_dir / "summary.csv",
              ["entry", "test_accuracy", "class_margin_deg", "gamma_min", "m_samp",
               "final_train_loss"], rows)
    return _check_thresholds(cfg, args, class_margin_deg=worst_margin,
                             accuracy=worst_acc)


def cmd_margins(args) -> int:
    prep = _prepare(args, "margins")
    if prep is None:
        return EXIT_OK
    cfg, seed, out_dir = prep
    w = np.loadtxt(args.prototypes, delimiter=",", skiprows=_header_rows(args.prototypes),
                   ndmin=2)
    z = np.loadtxt(args.features, delimiter=",", skiprows=_header_rows(args.features),
                   ndmin=2)
    labels = np.loadtxt(args.labels, dtype=int, ndmin=1)
    if w.shape[1] != z.shape[1]:
        raise ConfigError(
            f"dimension mismatch: prototypes are {w.shape[1]}-d, features {z.shape[1]}-d")
    if z.shape[0] != labels.shape[0]:
        raise ConfigError(
            f"{z.shape[0]} feature rows but {labels.shape[0]} labels")
    report = build_report(w, z, labels)
    write_json(out_dir / "margin_report.json", report.to_dict())
    if not args.no_plots:
        plots.plot_prototypes(w, out_dir / "fig_prototypes.png", z=z, title="margins")
    print(report.to_json())
    return _check_thresholds(cfg, args, class_margin_deg=report.class_margin_deg,
                             gamma_min=report.gamma_min)


def _header_rows(path) -> int:
    with open(path) as fh:
        first = fh.readline()
    try:
        float(first.split(",")[0])
        return 0
    except ValueError:
        return 1


def cmd_gradcheck(args) -> int:
    prep = _prepare(args, "gradcheck")
    if prep is None:
        return EXIT_OK
    cfg, seed, out_dir = prep
    rows, ok = sweep(instances=args.instances, seed=seed, corrupt=args.corrupt,
                     tol=args.tol)
    print(f"{'check':<18} {'max_rel_err':>12}  status")
    for r in rows:
        print(f"{r['check']:<18} {r['max_rel_err']:>12.3e}  "
              f"{'PASS' if r['pass'] else 'FAIL'}")
    write_csv(out_dir / "gradcheck.csv", ["check", "max_rel_err", "pass"],
              [[r["check"], fmt(r["max_rel_err"]), str(r["pass"]).lower()] for r in rows])
    if not ok:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "riesz": cmd_riesz,
        "toy": cmd_toy,
        "train": cmd_train,
        "margins": cmd_margins,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericOverflowError, TrainingDivergedError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except MarginForgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
