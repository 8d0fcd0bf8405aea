"""Metrics, repeated cross-validation driver and the comparison report."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ._util import SCHEMA_VERSION, dump_json
from .cit import expand_dataset, expanded_arrays, train_cit
from .classifier import predict_batch, train_classifier
from .config import VARIANTS, RunConfig
from .dataset import POSITIVE_LEVELS, CvPlan, DatasetManifest, SeverityLevel
from .errors import EmptyConfusion, EmptyInput, LengthMismatch, MissingSeverity
from .fusion import fuse_model_outputs
from .preprocess import make_backend, prepare_image, read_image, segment_and_crop

log = logging.getLogger(__name__)

METRIC_NAMES = ("specificity", "precision_N", "f1_N", "sensitivity", "precision_P", "f1_P", "accuracy")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary counts with P as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(predictions, labels) -> ConfusionMatrix:
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not labels:
        raise EmptyInput("no predictions to score")
    for v in predictions + labels:
        if v not in ("P", "N"):
            raise ValueError(f"labels must be 'P' or 'N', got {v!r}")
    pairs = list(zip(predictions, labels))
    return ConfusionMatrix(
        tp=sum(p == "P" and y == "P" for p, y in pairs),
        fp=sum(p == "P" and y == "N" for p, y in pairs),
        tn=sum(p == "N" and y == "N" for p, y in pairs),
        fn=sum(p == "N" and y == "P" for p, y in pairs),
    )


@dataclass(frozen=True)
class MetricsRecord:
    sensitivity: float
    specificity: float
    precision_P: float
    precision_N: float
    f1_P: float
    f1_N: float
    accuracy: float
    flags: tuple[str, ...] = ()  # metrics whose denominator was zero; their value is reported as 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = list(self.flags)
        return d


def _ratio(num: int, den: int, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(cm: ConfusionMatrix) -> MetricsRecord:
    if cm.total == 0:
        raise EmptyConfusion("confusion matrix has no entries")
    flags: list[str] = []
    sens = _ratio(cm.tp, cm.tp + cm.fn, "sensitivity", flags)
    spec = _ratio(cm.tn, cm.tn + cm.fp, "specificity", flags)
    prec_p = _ratio(cm.tp, cm.tp + cm.fp, "precision_P", flags)
    prec_n = _ratio(cm.tn, cm.tn + cm.fn, "precision_N", flags)
    # 2pr/(p+r) written over counts; p+r is 0 exactly when the class has no true hits
    f1_p = _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, "f1_P", flags) if cm.tp else _flag_zero("f1_P", flags)
    f1_n = _ratio(2 * cm.tn, 2 * cm.tn + cm.fn + cm.fp, "f1_N", flags) if cm.tn else _flag_zero("f1_N", flags)
    acc = (cm.tp + cm.tn) / cm.total
    return MetricsRecord(sens, spec, prec_p, prec_n, f1_p, f1_n, acc, tuple(flags))


def _flag_zero(name, flags) -> float:
    flags.append(name)
    return 0.0


@dataclass(frozen=True)
class LevelAccuracy:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    def to_dict(self) -> dict:
        return {"correct": self.correct, "total": self.total, "accuracy": self.accuracy}


@dataclass(frozen=True)
class SeverityBreakdown:
    levels: dict = field(default_factory=dict)  # level name -> LevelAccuracy
    absent: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"levels": {k: v.to_dict() for k, v in self.levels.items()}, "absent": list(self.absent)}


def severity_accuracy(predictions, labels, severities, levels=POSITIVE_LEVELS) -> SeverityBreakdown:
    """Per-level accuracy over positive cases; levels without cases are listed as absent."""
    predictions, labels, severities = list(predictions), list(labels), list(severities)
    if not len(predictions) == len(labels) == len(severities):
        raise LengthMismatch("predictions, labels and severities differ in length")
    counts = {lvl.value: [0, 0] for lvl in levels}
    for i, (p, y, s) in enumerate(zip(predictions, labels, severities)):
        if y != "P":
            continue
        if s is None or s == "":
            raise MissingSeverity(f"positive case at position {i} has no severity")
        key = s.value if isinstance(s, SeverityLevel) else SeverityLevel.parse(s).value
        if key in counts:
            counts[key][0] += p == y
            counts[key][1] += 1
    present = {k: LevelAccuracy(c, t) for k, (c, t) in counts.items() if t}
    absent = tuple(k for k, (_, t) in counts.items() if not t)
    return SeverityBreakdown(present, absent)


def aggregate(values) -> dict:
    """Mean and sample standard deviation (n-1); std is None for a single value."""
    values = [float(v) for v in values]
    if not values:
        raise EmptyInput("nothing to aggregate")
    n = len(values)
    std = float(np.std(values, ddof=1)) if n > 1 else None
    return {"mean": float(np.mean(values)), "std": std, "n": n}


def aggregate_runs(runs: list[dict], std_over: str = "runs") -> dict:
    """Aggregate each metric over all runs, or over per-repeat means when std_over='repeats'."""
    out = {}
    for name in METRIC_NAMES:
        if std_over == "repeats":
            by_repeat: dict[int, list] = {}
            for r in runs:
                by_repeat.setdefault(r["repeat"], []).append(r["metrics"][name])
            values = [float(np.mean(v)) for _, v in sorted(by_repeat.items())]
        else:
            values = [r["metrics"][name] for r in runs]
        out[name] = aggregate(values)
    return out


def aggregate_severity(runs: list[dict]) -> dict:
    out = {}
    for lvl in POSITIVE_LEVELS:
        vals = [r["severity"]["levels"][lvl.value]["accuracy"] for r in runs if lvl.value in r["severity"]["levels"]]
        out[lvl.value] = aggregate(vals) if vals else None
    return out


# ---------------------------------------------------------------- experiment driver


def fold_seed(base: int, repeat: int, fold: int) -> int:
    return int(np.random.SeedSequence([base, repeat, fold]).generate_state(1)[0])


def prepare_images(manifest: DatasetManifest, cfg: RunConfig, crop: bool, backend=None) -> dict[str, np.ndarray]:
    """Read, optionally lung-crop, and standardize every image of the manifest."""
    p = cfg.preprocess
    if crop and backend is None:
        backend = make_backend(p.backend, p.backend_input_side)
    out = {}
    for rec in manifest:
        img = read_image(manifest.image_path(rec), rec.id)
        if crop:
            img = segment_and_crop(img, backend, p.margin, p.threshold, p.margin_relative_to).image
        out[rec.id] = prepare_image(img, p.side, p.mean, p.std)
    return out


def _stack(ids, images):
    return np.stack([images[i] for i in ids])


def run_fold(variant: str, manifest: DatasetManifest, assignment, images: dict, cfg: RunConfig, seed: int) -> dict:
    """Train on the fold's train/val ids, predict its test ids. Returns raw per-id predictions."""
    recs = manifest.by_id()
    lab = {i: recs[i].label for i in recs}
    tr, va, te = list(assignment.train), list(assignment.val), list(assignment.test)
    extra: dict = {}
    if variant in ("no_seg", "with_seg"):
        ccfg = cfg.classifier_config(2, seed)
        model, hist = train_classifier(_stack(tr, images), [lab[i] for i in tr], _stack(va, images), [lab[i] for i in va], ccfg)
        _, pred = predict_batch(model, _stack(te, images))
        preds = [("N", "P")[k] for k in pred]
        extra["epochs"] = len(hist)
    else:
        gens, chist = train_cit(
            _stack(tr, images), [lab[i] for i in tr], _stack(va, images), [lab[i] for i in va],
            cfg.cit.loss_config(), cfg.cit.schedule(seed),
        )
        extra["cit_best_epoch"] = chist["best_epoch"]
        if variant == "cit_only":
            preds = list(gens.classify(_stack(te, images)))
        else:
            xtr, ytr, _ = expanded_arrays(expand_dataset([recs[i] for i in tr], images, gens))
            xva, yva, _ = expanded_arrays(expand_dataset([recs[i] for i in va], images, gens))
            model, hist = train_classifier(xtr, ytr, xva, yva, cfg.classifier_config(4, seed))
            extra["epochs"] = len(hist)
            pairs = expand_dataset([recs[i] for i in te], images, gens)
            pp, _ = predict_batch(model, np.stack([q.x_plus for q in pairs]))
            pm, _ = predict_batch(model, np.stack([q.x_minus for q in pairs]))
            decisions = fuse_model_outputs(pp, pm)
            preds = [d.label for d in decisions]
            extra["rules"] = [d.rule_fired for d in decisions]
    raw = [
        {"id": i, "label": lab[i], "prediction": str(p), "severity": recs[i].severity.value}
        for i, p in zip(te, preds)
    ]
    if "rules" in extra:
        for row, rule in zip(raw, extra.pop("rules")):
            row["rule"] = rule
    return {"predictions": raw, "info": extra}


def score_fold(raw: list[dict]) -> dict:
    preds = [r["prediction"] for r in raw]
    labels = [r["label"] for r in raw]
    cm = confusion(preds, labels)
    sev = severity_accuracy(preds, labels, [r["severity"] for r in raw])
    return {"confusion": cm.to_dict(), "metrics": metrics(cm).to_dict(), "severity": sev.to_dict()}


def build_report(variant: str, cfg: RunConfig, manifest: DatasetManifest, plan: CvPlan, runs: list[dict],
                 complete: bool = True, backend_identity: str | None = None) -> dict:
    report = {
        "schema_version": SCHEMA_VERSION,
        "variant": variant,
        "config_hash": cfg.config_hash(),
        "complete": complete,
        "runs": runs,
        "aggregate": aggregate_runs(runs, cfg.evaluation.std_over) if runs else {},
        "severity_aggregate": aggregate_severity(runs) if runs else {},
        "metadata": {
            "data_hash": manifest.data_hash(),
            "n_images": manifest.n,
            "class_counts": manifest.class_counts(),
            "repeats": plan.repeats,
            "folds": plan.folds,
            "plan_seed": plan.seed,
            "std": "sample (ddof=1)",
            "std_over": cfg.evaluation.std_over,
            "exclude_normal_pcr": cfg.evaluation.exclude_normal_pcr,
            "backend_identity": backend_identity,
        },
    }
    return report


def run_experiment(manifest: DatasetManifest, plan: CvPlan, variant: str, cfg: RunConfig,
                   workdir=None, images: dict | None = None) -> dict:
    """Run one variant over every (repeat, fold) of the plan.

    Raw predictions of each fold are written under workdir/predictions/<variant>/ as soon as
    the fold finishes. If a fold fails, the partial report is saved and the error re-raised.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    crop = variant != "no_seg"
    backend = make_backend(cfg.preprocess.backend, cfg.preprocess.backend_input_side) if crop else None
    if images is None:
        images = prepare_images(manifest, cfg, crop, backend)
    identity = backend.identity if backend is not None else None
    workdir = Path(workdir) if workdir is not None else None
    runs: list[dict] = []
    for a in plan.assignments:
        seed = fold_seed(cfg.seed, a.repeat, a.fold)
        t0 = time.time()
        try:
            result = run_fold(variant, manifest, a, images, cfg, seed)
        except Exception:
            if workdir is not None:
                partial = build_report(variant, cfg, manifest, plan, runs, complete=False, backend_identity=identity)
                dump_json(partial, workdir / f"report_{variant}.partial.json")
            raise
        scored = score_fold(result["predictions"])
        run = {"repeat": a.repeat, "fold": a.fold, "seed": seed, **scored, "info": result["info"]}
        runs.append(run)
        log.info("%s r%d f%d acc=%.3f (%.0fs)", variant, a.repeat, a.fold, scored["metrics"]["accuracy"], time.time() - t0)
        if workdir is not None:
            dump_json({"repeat": a.repeat, "fold": a.fold, "variant": variant, "predictions": result["predictions"]},
                      workdir / "predictions" / variant / f"r{a.repeat}_f{a.fold}.json")
    return build_report(variant, cfg, manifest, plan, runs, backend_identity=identity)


# ---------------------------------------------------------------- report schema and tables


def report_schema() -> dict:
    text = resources.files("sdnet").joinpath("schemas/report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, report_schema())


_TABLE_COLUMNS = (
    ("N", "Specificity", "specificity"),
    ("N", "Precision", "precision_N"),
    ("N", "F1", "f1_N"),
    ("P", "Sensitivity", "sensitivity"),
    ("P", "Precision", "precision_P"),
    ("P", "F1", "f1_P"),
    ("", "Accuracy", "accuracy"),
)


def _cell(stat: dict | None) -> str:
    if not stat:
        return "n/a"
    mean = 100 * stat["mean"]
    if stat.get("std") is None:
        return f"{mean:.2f}"
    return f"{mean:.2f}±{100 * stat['std']:.2f}"


def _render(header_top, header, rows) -> str:
    widths = [max(len(str(r[i])) for r in [header_top, header, *rows]) for i in range(len(header))]
    lines = []
    for r in [header_top, header, *rows]:
        lines.append(" | ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
        if r is header:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_table(reports: dict) -> str:
    """Comparison table, one row per variant, values in percent as mean±std; absent variants read n/a."""
    header_top = ["Class"] + [c for c, _, _ in _TABLE_COLUMNS]
    header = ["Model"] + [m for _, m, _ in _TABLE_COLUMNS]
    rows = []
    for v in VARIANTS:
        agg = reports.get(v, {}).get("aggregate") if reports.get(v) else None
        rows.append([v] + [_cell(agg.get(key) if agg else None) for _, _, key in _TABLE_COLUMNS])
    return _render(header_top, header, rows)


def render_severity_table(reports: dict) -> str:
    header = ["Model"] + [lvl.value for lvl in POSITIVE_LEVELS]
    rows = []
    for v in VARIANTS:
        sev = reports.get(v, {}).get("severity_aggregate") if reports.get(v) else None
        rows.append([v] + [_cell(sev.get(lvl.value) if sev else None) for lvl in POSITIVE_LEVELS])
    return _render([""] * len(header), header, rows)


def load_reports(workdir) -> dict:
    """Collect complete report_<variant>.json files from a work directory."""
    out = {}
    for v in VARIANTS:
        path = Path(workdir) / f"report_{v}.json"
        if path.is_file():
            out[v] = json.loads(path.read_text(encoding="utf-8"))
    return out
