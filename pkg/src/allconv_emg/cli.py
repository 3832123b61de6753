"""Command-line entry point: synth, pretrain, adapt, eval, sweep, report.

Every command writes ``config_echo.json`` into its output directory. Passing
that file back through ``--config`` reruns the command with the same
effective parameters.

Exit codes: 0 success, 1 IO or configuration error, 2 contract violation
(shapes, architecture, usage), 3 numerical failure.
"""

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from allconv_emg import __version__
from allconv_emg.data import (
    SyntheticConfig,
    generate_synthetic,
    load_manifest,
    make_inter_session_split,
    make_inter_subject_splits,
    make_intra_session_splits,
)
from allconv_emg.errors import AllConvError, ConfigurationError, ContractViolation, FormatError
from allconv_emg.experiment import (
    AdaptConfig,
    EvalReport,
    ExperimentSpec,
    ImageCache,
    TrainConfig,
    adapt,
    evaluate_voted,
    improvement,
    pretrain,
    result_rows,
    run_experiment,
    transfusion_sweep,
)
from allconv_emg.experiment.runner import fold_seed
from allconv_emg.model import AllConvNet, load_checkpoint, save_checkpoint
from allconv_emg.signal import read_pgm, write_pgm

log = logging.getLogger("allconv_emg")

SEED_ENV = "EMG_ALLCONV_SEED"
SCENARIOS = {"intra": "intra_session", "intersession": "inter_session", "intersubject": "inter_subject"}
MODES = {
    "scratch": "scratch",
    "finetune-top": "finetune_top",
    "feature-extract": "feature_extract_full",
    "transfusion": "transfusion",
    "slim": "slim",
}
DEFAULT_WINDOWS = "1,32,64,150,160"
SWEEP_EPOCHS = "8,16,32,46,64,100"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# argument helpers


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigurationError("empty integer list")
    return values


def _k_range(text: str) -> list[int]:
    if ":" in text:
        lo, hi = text.split(":", 1)
        try:
            return list(range(int(lo), int(hi) + 1))
        except ValueError:
            raise ConfigurationError(f"bad --k-range {text!r}; expected LO:HI") from None
    return _int_list(text)


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV}={env!r} is not an integer") from None


def _common(p: argparse.ArgumentParser, manifest: bool = True):
    if manifest:
        p.add_argument("--manifest", type=Path, required=True, help="dataset manifest (JSON)")
    p.add_argument("--out", type=Path, required=True, help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=None, help=f"root seed (fallback: ${SEED_ENV}, then 0)")
    p.add_argument("--config", type=Path, default=None, help="JSON defaults, e.g. a config_echo.json")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-exact reruns")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _scenario_args(p, budget=True):
    p.add_argument("--scenario", choices=sorted(SCENARIOS), default="intersession")
    if budget:
        p.add_argument("--budget", choices=["T1", "T2", "T3", "T4", "T5"], default="T5")
    p.add_argument("--jobs", type=int, default=1, help="folds run in parallel")


def _training_args(p):
    p.add_argument("--epochs", type=int, default=None, help="max pretraining epochs (default 100)")
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience (default 5, capped at --epochs)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--train-stride", type=int, default=1, help="keep every n-th training frame")
    p.add_argument("--val-stride", type=int, default=1, help="keep every n-th validation frame")


def _adapt_args(p, mode=True):
    if mode:
        p.add_argument("--mode", choices=sorted(MODES), default="finetune-top")
        p.add_argument("--k", type=int, default=None, help="transfusion depth 0..8")
    p.add_argument("--adapt-epochs", type=int, default=None, help="adaptation epochs (default 100)")
    p.add_argument("--adapt-stride", type=int, default=1, help="keep every n-th adaptation frame")
    p.add_argument("--checkpoints", type=Path, required=True, help="directory with pretrained checkpoints")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="allconv-emg", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p, manifest=False)

    p = sub.add_parser("pretrain", help="train from scratch (intra folds, or per-subject pretraining)")
    _common(p)
    _scenario_args(p, budget=False)
    _training_args(p)
    p.add_argument("--windows", default=DEFAULT_WINDOWS)

    p = sub.add_parser("adapt", help="adapt pretrained checkpoints to the target trials")
    _common(p)
    _scenario_args(p)
    _adapt_args(p)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--windows", default=DEFAULT_WINDOWS)

    p = sub.add_parser("eval", help="evaluate checkpoints on each fold's test trials")
    _common(p)
    _scenario_args(p)
    p.add_argument("--checkpoints", type=Path, required=True)
    p.add_argument("--stage", choices=["model", "pretrained", "adapted"], default="adapted")
    p.add_argument("--windows", default=DEFAULT_WINDOWS)

    p = sub.add_parser("sweep", help="transfusion convergence table")
    _common(p)
    _scenario_args(p)
    _adapt_args(p, mode=False)
    p.add_argument("--k-range", default="0:8")
    p.add_argument("--sweep-epochs", default=SWEEP_EPOCHS, help="epoch checkpoints")
    p.add_argument("--window", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)

    p = sub.add_parser("report", help="merge result files, curves, improvements and figures")
    _common(p, manifest=False)
    p.add_argument("results", nargs="*", type=Path, help="results CSV files; the first is the baseline")
    p.add_argument("--windows", default=None, help="windows for the curve (default: all present)")
    p.add_argument("--activations", type=Path, default=None, help="checkpoint for an activation-map dump")
    p.add_argument("--image", type=Path, default=None, help="16x16 PGM input for the activation dump")
    return parser


# ---------------------------------------------------------------------------
# shared plumbing


def _apply_config_file(parser, argv):
    """Install values from ``--config`` as defaults, then parse ``argv``.

    Flags given on the command line win over the file. ``--out`` is never
    taken from the file.
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if not a.startswith("-")), None)
    doc = None
    if known.config is not None and command in COMMANDS:
        try:
            doc = json.loads(known.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"{known.config}: cannot load config ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{known.config}: config must be a JSON object")
        if "command" in doc and doc["command"] != command:
            raise ConfigurationError(f"{known.config} echoes command {doc['command']!r}, not {command!r}")
        values = doc.get("args", {}) if "command" in doc else doc
        sub = parser._subparsers._group_actions[0].choices[command]
        for action in sub._actions:
            if action.dest in values and action.dest not in ("config", "out", "help", "command"):
                value = values[action.dest]
                if action.dest == "results":
                    value = [Path(v) for v in value]
                action.default = value
                action.required = False
    return parser.parse_args(argv), doc


def _echo(args, out: Path, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    flat = {}
    for k, v in vars(args).items():
        if k in ("config", "verbose"):
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, list):
            v = [str(x) if isinstance(x, Path) else x for x in v]
        flat[k] = v
    doc = {"command": args.command, "version": __version__, "args": flat, **extra}
    (out / "config_echo.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


@contextlib.contextmanager
def _determinism(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _plan(manifest, scenario: str, budget: str = "T5"):
    if scenario == "intra_session":
        return make_intra_session_splits(manifest, manifest.trials_per_gesture)
    if scenario == "inter_session":
        return make_inter_session_split(manifest, budget, manifest.trials_per_gesture)
    return make_inter_subject_splits(manifest, budget, n_trials=manifest.trials_per_gesture)


def _train_config(args, seed: int) -> TrainConfig:
    max_epochs = 100 if args.epochs is None else args.epochs
    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=max_epochs,
        patience=min(5, max_epochs) if args.patience is None else args.patience,
        seed=seed,
        train_stride=args.train_stride,
        val_stride=args.val_stride,
    )


def _adapt_config(args, seed: int, mode: str = "transfusion", k: int | None = 0) -> AdaptConfig:
    return AdaptConfig(
        mode=mode,
        k=k,
        epochs=100 if args.adapt_epochs is None else args.adapt_epochs,
        budget=getattr(args, "budget", "T5"),
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=seed,
        train_stride=args.adapt_stride,
    )


def _write_rows(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})
    return path


def _write_log(out: Path, name: str, history, timings: dict) -> None:
    _write_rows(out / "logs" / f"{name}.csv", history.rows())
    timings[name] = [round(t, 3) for t in history.wall_time]


def _pretrained_name(subject: int) -> str:
    return f"pretrained-s{subject:02d}.acnv"


def _wide_table(report: EvalReport, windows) -> list[dict]:
    """One row per (fold, mode) and one voted-accuracy column per window."""
    table: dict = {}
    for r in report.rows:
        key = (r["fold"], r["mode"])
        row = table.setdefault(
            key, {"fold": r["fold"], "subject": r["subject"], "budget": r["budget"], "mode": r["mode"]}
        )
        row["per_frame_acc"] = r["per_frame_acc"]
        row[f"voted@{r['window']}"] = r["voted_acc"]
    return list(table.values())


def _save_report(out: Path, report: EvalReport, windows, stem: str = "results") -> None:
    report.save(out, stem)
    _write_rows(out / f"{stem}_by_window.csv", _wide_table(report, windows))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, doc) -> int:
    if doc is not None and "synthetic" in doc:
        config = SyntheticConfig.from_dict(doc["synthetic"])
    elif doc is not None and "command" not in doc:
        config = SyntheticConfig.from_dict(doc)
    else:
        config = SyntheticConfig()
    if args.seed is not None or os.environ.get(SEED_ENV) is not None:
        config.seed = resolve_seed(args.seed)
    manifest, path = generate_synthetic(config, args.out)
    _echo(args, args.out, {"synthetic": config.to_dict()})
    print(path)
    return 0


def cmd_pretrain(args, doc) -> int:
    seed = resolve_seed(args.seed)
    manifest = load_manifest(args.manifest, validate=True)
    scenario = SCENARIOS[args.scenario]
    plan = _plan(manifest, scenario)
    cache = ImageCache.from_manifest(manifest)
    windows = _int_list(args.windows)
    tcfg = _train_config(args, seed)
    timings: dict = {}
    _echo(args, args.out, {"train": tcfg.to_dict(), "resolved_seed": seed})
    if scenario == "intra_session":
        spec = ExperimentSpec(scenario, tcfg, windows=windows, seed=seed, dataset_tag=manifest.dataset_tag)
        report, outcomes = run_experiment(plan, cache, spec, manifest.gestures, jobs=args.jobs)
        for o in outcomes:
            if "model" in o.checkpoints:
                save_checkpoint(args.out / "checkpoints" / f"{o.fold.fold_id}.acnv", o.checkpoints["model"])
                _write_log(args.out, o.fold.fold_id, o.logs["train"], timings)
        _save_report(args.out, report, windows)
        (args.out / "timing.json").write_text(json.dumps(timings, indent=1, sort_keys=True) + "\n")
        return _report_exit(report)

    spec = ExperimentSpec(scenario, tcfg, windows=windows, seed=seed, dataset_tag=manifest.dataset_tag)
    for i, fold in enumerate(plan.folds):
        s = fold_seed(seed, i)
        _, ckpt, history = pretrain(
            cache, fold.pretrain, spec, manifest.gestures, s, tag=f"{fold.fold_id}-pretrain", forbidden=fold.test
        )
        ckpt.tag = manifest.dataset_tag
        save_checkpoint(args.out / "checkpoints" / _pretrained_name(fold.subject), ckpt)
        _write_log(args.out, f"pretrain-s{fold.subject:02d}", history, timings)
    (args.out / "timing.json").write_text(json.dumps(timings, indent=1, sort_keys=True) + "\n")
    return 0


def _load_pretrained(checkpoints: Path, plan, gestures: int) -> dict:
    out = {}
    for fold in plan.folds:
        path = checkpoints / _pretrained_name(fold.subject)
        if not path.exists():
            raise FormatError(f"missing pretrained checkpoint {path}")
        out[fold.subject] = load_checkpoint(path, gestures)
    return out


def _report_exit(report: EvalReport) -> int:
    if report.complete:
        return 0
    for f in report.failures:
        print(f"error: fold {f['fold']}: {f['error']}", file=sys.stderr)
    return max(f["exit_code"] for f in report.failures)


def cmd_adapt(args, doc) -> int:
    seed = resolve_seed(args.seed)
    scenario = SCENARIOS[args.scenario]
    if scenario == "intra_session":
        raise ConfigurationError("adapt needs --scenario intersession or intersubject")
    manifest = load_manifest(args.manifest, validate=True)
    plan = _plan(manifest, scenario, args.budget)
    mode = MODES[args.mode]
    acfg = _adapt_config(args, seed, mode, args.k)
    windows = _int_list(args.windows)
    _echo(args, args.out, {"adapt": acfg.to_dict(), "resolved_seed": seed})
    pretrained = _load_pretrained(args.checkpoints, plan, manifest.gestures)
    spec = ExperimentSpec(scenario, adapt=acfg, windows=windows, seed=seed, dataset_tag=manifest.dataset_tag)
    cache = ImageCache.from_manifest(manifest)
    report, outcomes = run_experiment(plan, cache, spec, manifest.gestures, pretrained=pretrained, jobs=args.jobs)
    timings: dict = {}
    for o in outcomes:
        if "adapted" in o.checkpoints:
            save_checkpoint(args.out / "checkpoints" / f"{o.fold.fold_id}-{acfg.label}.acnv", o.checkpoints["adapted"])
            _write_log(args.out, f"{o.fold.fold_id}-{acfg.label}", o.logs["adapt"], timings)
    _save_report(args.out, report, windows)
    (args.out / "timing.json").write_text(json.dumps(timings, indent=1, sort_keys=True) + "\n")
    return _report_exit(report)


def cmd_eval(args, doc) -> int:
    seed = resolve_seed(args.seed)
    manifest = load_manifest(args.manifest, validate=True)
    scenario = SCENARIOS[args.scenario]
    plan = _plan(manifest, scenario, args.budget)
    windows = _int_list(args.windows)
    _echo(args, args.out, {"resolved_seed": seed})
    cache = ImageCache.from_manifest(manifest)
    report = EvalReport()
    for fold in plan.folds:
        if args.stage == "pretrained":
            paths = [args.checkpoints / _pretrained_name(fold.subject)]
        elif args.stage == "model":
            paths = [args.checkpoints / f"{fold.fold_id}.acnv"]
        else:
            paths = sorted(args.checkpoints.glob(f"{fold.fold_id}-*.acnv"))
        if not paths or not paths[0].exists():
            raise FormatError(f"no {args.stage} checkpoint for fold {fold.fold_id} in {args.checkpoints}")
        test = cache.frames(fold.test)
        for path in paths:
            model = AllConvNet.from_checkpoint(load_checkpoint(path, manifest.gestures))
            mode = path.stem[len(fold.fold_id) + 1 :] if args.stage == "adapted" else args.stage
            res = evaluate_voted(model, test, windows, fold.fold_id)
            report.rows.extend(result_rows(res, scenario, manifest.dataset_tag, fold, mode, windows))
    _save_report(args.out, report, windows)
    return 0


def cmd_sweep(args, doc) -> int:
    from allconv_emg import plotting

    seed = resolve_seed(args.seed)
    scenario = SCENARIOS[args.scenario]
    if scenario == "intra_session":
        raise ConfigurationError("sweep needs --scenario intersession or intersubject")
    manifest = load_manifest(args.manifest, validate=True)
    plan = _plan(manifest, scenario, args.budget)
    ks = _k_range(args.k_range)
    epochs = _int_list(args.sweep_epochs)
    base = _adapt_config(args, seed)
    base.epochs = max(epochs)
    _echo(args, args.out, {"adapt": base.to_dict(), "resolved_seed": seed, "k_values": ks, "epochs": epochs})
    pretrained = _load_pretrained(args.checkpoints, plan, manifest.gestures)
    cache = ImageCache.from_manifest(manifest)
    for i, fold in enumerate(plan.folds):
        base.seed = fold_seed(seed, i)
        table = transfusion_sweep(
            pretrained[fold.subject],
            cache.frames(fold.adaptation),
            cache.frames(fold.test),
            k_values=ks,
            epochs=epochs,
            window=args.window,
            base=base,
            forbidden_keys=fold.test,
        )
        rows = table.rows()
        _write_rows(args.out / f"sweep-{fold.fold_id}.csv", rows)
        plotting.plot_convergence(
            rows, table.epochs, args.out / f"sweep-{fold.fold_id}.png", title=f"{fold.fold_id} (window {args.window})"
        )
    return 0


def _dump_activations(ckpt_path: Path, image_path: Path | None, out: Path) -> None:
    model = AllConvNet.from_checkpoint(load_checkpoint(ckpt_path))
    if image_path is None:
        raise ConfigurationError("--activations needs --image (16x16 PGM)")
    img = read_pgm(image_path)
    if img.shape != (16, 16):
        raise ContractViolation(f"{image_path}: activation input must be 16x16, got {img.shape}")
    acts = model.activations(img[None, None].astype(np.float32) / 255.0)
    for name, a in acts.items():
        a = a[0]
        for c in range(a.shape[-1]):
            ch = a[..., c]
            span = float(ch.max() - ch.min())
            scaled = (ch - ch.min()) / span * 255.0 if span > 0 else np.zeros_like(ch)
            write_pgm(out / "activations" / name / f"ch{c:03d}.pgm", scaled)


def cmd_report(args, doc) -> int:
    from allconv_emg import plotting

    if not args.results:
        raise ConfigurationError("report needs at least one results CSV")
    reports = [EvalReport.load(p) for p in args.results]
    _echo(args, args.out, {})
    merged = EvalReport.merge(reports)
    summaries = [r.summary() for r in reports]
    stems = [p.stem for p in args.results]
    names = stems if len(set(stems)) == len(stems) else [f"{p.parent.name}_{p.stem}" for p in args.results]
    improvements = {}
    for name, summary in zip(names[1:], summaries[1:]):
        for bm in sorted({g["mode"] for g in summaries[0].values()}):
            for om in sorted({g["mode"] for g in summary.values()}):
                key = f"{names[0]}:{bm} -> {name}:{om}"
                improvements[key] = improvement(summaries[0], summary, "voted_mean", bm, om)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.json").write_text(
        json.dumps({"summary": merged.summary(), "improvements": improvements}, indent=1, sort_keys=True) + "\n"
    )
    wanted = set(_int_list(args.windows)) if args.windows else None
    curves: dict = {}
    for g in merged.summary().values():
        if wanted is not None and g["window"] not in wanted:
            continue
        curves.setdefault((g["dataset"], g["scenario"], g["budget"], g["mode"]), []).append(g)
    for dataset in sorted({k[0] for k in curves}):
        rows, plot_data = [], {}
        for key in sorted(k for k in curves if k[0] == dataset):
            groups = sorted(curves[key], key=lambda g: g["window"])
            label = "/".join(str(x) for x in key[1:])
            for g in groups:
                rows.append(
                    {
                        "scenario": key[1],
                        "budget": key[2],
                        "mode": key[3],
                        "window": g["window"],
                        "voted_mean": g["voted_mean"],
                        "voted_std": g["voted_std"],
                        "per_frame_mean": g["per_frame_mean"],
                    }
                )
            plot_data[label] = ([g["window"] for g in groups], [g["voted_mean"] for g in groups])
        _write_rows(args.out / f"curve-{dataset}.csv", rows)
        plotting.plot_accuracy_vs_window(plot_data, args.out / f"curve-{dataset}.png", title=dataset)
    for key, deltas in improvements.items():
        stem = key.replace(" -> ", "__vs__").replace(":", "-")
        _write_rows(args.out / f"improvement-{stem}.csv", [{"group": g, "delta_points": d} for g, d in deltas.items()])
        if deltas:
            plotting.plot_improvements(deltas, args.out / f"improvement-{stem}.png", title=key)
    if args.activations is not None:
        _dump_activations(args.activations, args.image, args.out)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, doc = _apply_config_file(parser, argv)
        level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        start = time.perf_counter()
        with _determinism(args.deterministic):
            code = COMMANDS[args.command](args, doc)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
        return code
    except AllConvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
