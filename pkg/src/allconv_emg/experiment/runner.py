"""Fold orchestration and result aggregation for the three scenarios."""

import csv
import io
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from allconv_emg.data.splits import Fold, SplitPlan
from allconv_emg.errors import AllConvError, ConfigurationError, FormatError
from allconv_emg.experiment.adaptation import AdaptConfig, adapt
from allconv_emg.experiment.evaluation import EvalResult, evaluate_voted
from allconv_emg.experiment.frames import ImageCache
from allconv_emg.experiment.training import TrainConfig, train
from allconv_emg.model import AllConvNet, Checkpoint, build_allconvnet
from allconv_emg.nn.rng import RngStream

log = logging.getLogger(__name__)

SCENARIOS = ("intra_session", "inter_session", "inter_subject")
ROW_FIELDS = ("scenario", "dataset", "subject", "fold", "budget", "mode", "window", "per_frame_acc", "voted_acc")
GROUP_FIELDS = ("scenario", "dataset", "budget", "mode", "window")


@dataclass
class ExperimentSpec:
    scenario: str
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig | None = None
    windows: tuple = (1, 64, 150)
    seed: int = 0
    pretrain_val_fraction: float = 0.1
    evaluate_unadapted: bool = False
    dataset_tag: str = "dataset"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.scenario != "intra_session" and self.adapt is None:
            self.adapt = AdaptConfig()
        if not 0.0 < self.pretrain_val_fraction < 1.0:
            raise ConfigurationError("pretrain_val_fraction must lie in (0, 1)")
        self.windows = tuple(int(w) for w in self.windows)
        if any(w < 1 for w in self.windows):
            raise ConfigurationError(f"voting windows must be >= 1, got {self.windows}")


@dataclass
class FoldOutcome:
    fold: Fold
    seed: int
    results: list = field(default_factory=list)  # (mode label, EvalResult)
    checkpoints: dict = field(default_factory=dict)  # role -> Checkpoint
    logs: dict = field(default_factory=dict)  # role -> EpochLog
    error: str | None = None
    exit_code: int = 0


def fold_seed(seed: int, index: int) -> int:
    return seed ^ index


def _split_frames(frames, fraction: float, seed: int):
    perm = RngStream(seed, "pretrain-split").permutation(len(frames))
    n_val = max(1, int(round(fraction * len(frames))))
    return frames.take(np.sort(perm[n_val:])), frames.take(np.sort(perm[:n_val]))


def pretrain(cache: ImageCache, keys, spec: ExperimentSpec, gestures: int, seed: int, tag: str = "", forbidden=frozenset()):
    """Train from scratch on ``keys`` with a random frame-level validation split."""
    frames = cache.frames(keys, spec.train.train_stride)
    tr, val = _split_frames(frames, spec.pretrain_val_fraction, seed)
    cfg = TrainConfig(**{**spec.train.to_dict(), "seed": seed})
    model = build_allconvnet(gestures, rng=RngStream(seed, "model"), dropout_p=cfg.dropout_p)
    ckpt, history = train(model, tr, val, cfg, forbidden_keys=forbidden, tag=tag)
    return model, ckpt, history


def run_fold(
    fold: Fold, index: int, cache: ImageCache, spec: ExperimentSpec, gestures: int, pretrained: Checkpoint | None = None
) -> FoldOutcome:
    seed = fold_seed(spec.seed, index)
    out = FoldOutcome(fold, seed)
    forbidden = fold.test
    test = cache.frames(fold.test)
    if spec.scenario == "intra_session":
        cfg = TrainConfig(**{**spec.train.to_dict(), "seed": seed})
        model = build_allconvnet(gestures, rng=RngStream(seed, "model"), dropout_p=cfg.dropout_p)
        tr = cache.frames(fold.train, cfg.train_stride)
        val = cache.frames(fold.validation, cfg.val_stride)
        ckpt, history = train(model, tr, val, cfg, forbidden_keys=forbidden, tag=fold.fold_id)
        out.checkpoints["model"], out.logs["train"] = ckpt, history
        out.results.append(("scratch", evaluate_voted(model, test, spec.windows, fold.fold_id)))
        return out

    if pretrained is None:
        model, pretrained, history = pretrain(
            cache, fold.pretrain, spec, gestures, seed, tag=f"{fold.fold_id}-pretrain", forbidden=forbidden
        )
        out.logs["pretrain"] = history
    else:
        model = AllConvNet.from_checkpoint(pretrained)
    out.checkpoints["pretrained"] = pretrained
    if spec.evaluate_unadapted:
        out.results.append(("none", evaluate_voted(model, test, spec.windows, fold.fold_id)))
    acfg = AdaptConfig(**{**spec.adapt.to_dict(), "seed": seed, "budget": fold.budget or spec.adapt.budget})
    adapted, ckpt, history = adapt(
        pretrained, cache.frames(fold.adaptation), acfg, forbidden_keys=forbidden, tag=f"{fold.fold_id}-adapt"
    )
    out.checkpoints["adapted"], out.logs["adapt"] = ckpt, history
    out.results.append((acfg.label, evaluate_voted(adapted, test, spec.windows, fold.fold_id)))
    return out


def _safe_run_fold(*args, **kwargs) -> FoldOutcome:
    fold, index = args[0], args[1]
    try:
        return run_fold(*args, **kwargs)
    except AllConvError as exc:
        log.error("fold %s failed: %s", fold.fold_id, exc)
        return FoldOutcome(fold, fold_seed(args[3].seed, index), error=str(exc), exit_code=exc.exit_code)


_POOL_STATE: dict = {}


def _pool_worker(item):
    fold, index = item
    s = _POOL_STATE
    return _safe_run_fold(fold, index, s["cache"], s["spec"], s["gestures"], s["pretrained"].get(fold.subject))


def run_experiment(
    plan: SplitPlan,
    cache: ImageCache,
    spec: ExperimentSpec,
    gestures: int,
    *,
    pretrained: dict | None = None,
    jobs: int = 1,
) -> tuple["EvalReport", list[FoldOutcome]]:
    """Run every fold of ``plan`` and aggregate the results.

    ``pretrained`` maps a subject id to an existing checkpoint, so budget
    sweeps can reuse one pretraining per subject. ``jobs > 1`` runs folds in
    worker processes; each fold still derives its own seed, so results do not
    depend on ``jobs``.
    """
    if plan.scenario != spec.scenario:
        raise ConfigurationError(f"plan scenario {plan.scenario!r} != spec scenario {spec.scenario!r}")
    pretrained = pretrained or {}
    items = list((fold, i) for i, fold in enumerate(plan.folds))
    if jobs > 1 and len(items) > 1:
        _POOL_STATE.update(cache=cache, spec=spec, gestures=gestures, pretrained=pretrained)
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            outcomes = list(pool.map(_pool_worker, items))
        _POOL_STATE.clear()
    else:
        outcomes = [_safe_run_fold(f, i, cache, spec, gestures, pretrained.get(f.subject)) for f, i in items]
    report = EvalReport.from_outcomes(outcomes, spec)
    return report, outcomes


# ---------------------------------------------------------------------------
# reports


def _std(values) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # {"fold": id, "error": msg, "exit_code": n}

    @property
    def complete(self) -> bool:
        return not self.failures

    @classmethod
    def from_outcomes(cls, outcomes: list[FoldOutcome], spec: ExperimentSpec) -> "EvalReport":
        report = cls()
        for o in outcomes:
            if o.error is not None:
                report.failures.append({"fold": o.fold.fold_id, "error": o.error, "exit_code": o.exit_code})
                continue
            for mode, res in o.results:
                report.rows.extend(result_rows(res, spec.scenario, spec.dataset_tag, o.fold, mode, spec.windows))
        return report

    def summary(self) -> dict:
        groups: dict = {}
        for r in self.rows:
            groups.setdefault(tuple(r[k] for k in GROUP_FIELDS), []).append(r)
        out = {}
        for key, rows in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
            pf = [r["per_frame_acc"] for r in rows]
            vt = [r["voted_acc"] for r in rows]
            out["|".join(str(k) for k in key)] = {
                **dict(zip(GROUP_FIELDS, key)),
                "n_folds": len(rows),
                "per_frame_mean": float(np.mean(pf)),
                "per_frame_std": _std(pf),
                "voted_mean": float(np.nanmean(vt)) if not np.all(np.isnan(vt)) else float("nan"),
                "voted_std": _std([v for v in vt if not np.isnan(v)]),
            }
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(float(r[k])) if k.endswith("_acc") else r[k]) for k in ROW_FIELDS})
        return buf.getvalue()

    def to_json(self, improvements: dict | None = None) -> str:
        doc = {"complete": self.complete, "failures": self.failures, "summary": self.summary()}
        if improvements is not None:
            doc["improvements"] = improvements
        return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True)

    def save(self, out_dir, stem: str = "results", improvements: dict | None = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json(improvements) + "\n")
        return csv_path, json_path

    @classmethod
    def from_csv(cls, text: str, source: str = "<csv>") -> "EvalReport":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != ROW_FIELDS:
            raise FormatError(f"{source}: result schema {reader.fieldnames} != expected {list(ROW_FIELDS)}")
        rows = []
        for r in reader:
            r = dict(r)
            r["subject"] = int(r["subject"])
            r["window"] = int(r["window"])
            r["per_frame_acc"] = float(r["per_frame_acc"])
            r["voted_acc"] = float(r["voted_acc"])
            rows.append(r)
        return cls(rows)

    @classmethod
    def load(cls, path) -> "EvalReport":
        path = Path(path)
        try:
            return cls.from_csv(path.read_text(), str(path))
        except OSError as exc:
            raise FormatError(f"{path}: cannot read results ({exc})") from exc

    @classmethod
    def merge(cls, reports: list["EvalReport"]) -> "EvalReport":
        out = cls()
        for r in reports:
            out.rows.extend(r.rows)
            out.failures.extend(r.failures)
        return out


def result_rows(res: EvalResult, scenario: str, dataset: str, fold: Fold, mode: str, windows) -> list[dict]:
    return [
        {
            "scenario": scenario,
            "dataset": dataset,
            "subject": fold.subject,
            "fold": fold.fold_id,
            "budget": fold.budget or "-",
            "mode": mode,
            "window": int(n),
            "per_frame_acc": res.per_frame_accuracy,
            "voted_acc": res.voted_accuracy.get(int(n), float("nan")),
        }
        for n in windows
    ]


def improvement(base: dict, other: dict, metric: str = "voted_mean", base_mode=None, other_mode=None) -> dict:
    """Accuracy gain of ``other`` over ``base`` in percentage points, per shared group.

    Groups are matched on scenario, dataset, budget and window. The mode is
    what is being compared, so it is not part of the match; pass
    ``base_mode`` / ``other_mode`` when a summary holds several modes.
    """

    def index(summary, mode):
        out = {}
        for g in summary.values():
            if mode is not None and g["mode"] != mode:
                continue
            key = (g["scenario"], g["dataset"], g["budget"], g["window"])
            if key in out:
                raise ConfigurationError(f"several modes share group {key}; choose one explicitly")
            out[key] = g
        return out

    b, o = index(base, base_mode), index(other, other_mode)
    out = {}
    for key in sorted(set(b) & set(o), key=lambda k: tuple(str(x) for x in k)):
        out["|".join(str(k) for k in key)] = 100.0 * (o[key][metric] - b[key][metric])
    return out
