"""Command-line entry point: `sdnet <subcommand> [flags]`.

Every subcommand reads one resolved RunConfig and writes its artifacts under the work
directory. JSON artifacts carry the schema version and the config hash, so reruns with the
same inputs reproduce them byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._util import SCHEMA_VERSION, dump_json
from .config import VARIANTS, RunConfig, load_config
from .dataset import CvPlan, load_manifest, make_cv_plan
from .errors import ConfigError, SDNetError, UnknownSubcommand

log = logging.getLogger("sdnet")

SUBCOMMANDS = ("ingest", "crop", "split", "train-cit", "transform", "train-clf", "infer", "evaluate", "explain", "report")
LOCK_NAME = ".sdnet.lock"


# ---------------------------------------------------------------- shared helpers


def file_digest(path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest(cfg: RunConfig):
    m = load_manifest(cfg.paths.manifest, root=cfg.image_root)
    return m.exclude_normal_pcr() if cfg.evaluation.exclude_normal_pcr else m


def _plan(cfg: RunConfig, manifest) -> CvPlan:
    """Reuse cv_plan.json when it matches the data and plan settings, else build and store it."""
    path = cfg.workdir / "cv_plan.json"
    p = cfg.plan
    if path.is_file():
        stored = json.loads(path.read_text(encoding="utf-8"))
        if stored.get("data_hash") == manifest.data_hash():
            plan = CvPlan.from_dict(stored)
            if (plan.repeats, plan.folds, plan.seed) == (p.repeats, p.folds, p.seed):
                return plan
    plan = make_cv_plan(manifest, p.repeats, p.folds, p.val_fraction, p.seed, p.seeds)
    _write_plan(cfg, manifest, plan)
    return plan


def _write_plan(cfg, manifest, plan):
    d = plan.to_dict()
    d.update(config_hash=cfg.config_hash(), data_hash=manifest.data_hash())
    dump_json(d, cfg.workdir / "cv_plan.json")


def _images(cfg: RunConfig, manifest, crop: bool) -> dict:
    """Standardized inputs per id; stored crops are reused when they match the backend."""
    from .evaluation import prepare_images
    from .preprocess import make_backend, prepare_image, read_image

    if not crop:
        return prepare_images(manifest, cfg, crop=False)
    p = cfg.preprocess
    backend = make_backend(p.backend, p.backend_input_side)
    crops = cfg.workdir / "crops"
    out = {}
    for rec in manifest:
        png, side = crops / f"{rec.id}.png", crops / f"{rec.id}.json"
        if png.is_file() and side.is_file():
            meta = json.loads(side.read_text(encoding="utf-8"))
            if meta.get("backend_identity") == backend.identity and meta.get("margin") == p.margin:
                out[rec.id] = prepare_image(read_image(png, rec.id), p.side, p.mean, p.std)
                continue
        return prepare_images(manifest, cfg, crop=True, backend=backend)
    return out


def _run_dir(cfg: RunConfig, repeat: int, fold: int) -> Path:
    return cfg.workdir / "runs" / f"r{repeat}_f{fold}"


def _provenance(cfg: RunConfig, **identities) -> dict:
    return {"schema_version": SCHEMA_VERSION, "config_hash": cfg.config_hash(), **identities}


def _load_gens(run_dir: Path):
    from .cit import GeneratorPair

    return GeneratorPair.load(run_dir / "cit")


def _cit_identity(run_dir: Path) -> dict:
    return {tag: file_digest(run_dir / "cit" / tag / "weights.pt") for tag in ("gen_P", "gen_N", "internal_clf")}


def _assignment(cfg, manifest, repeat, fold):
    plan = _plan(cfg, manifest)
    try:
        return plan.get(repeat, fold)
    except KeyError:
        raise ConfigError(f"plan has no repeat {repeat} / fold {fold}") from None


# ---------------------------------------------------------------- subcommands


def cmd_ingest(cfg, args):
    m = _manifest(cfg)
    d = m.to_dict()
    d.update(_provenance(cfg), data_hash=m.data_hash(), class_counts=m.class_counts())
    dump_json(d, cfg.workdir / "manifest.json")
    return {"records": m.n, "class_counts": m.class_counts()}


def cmd_crop(cfg, args):
    from .preprocess import make_backend, read_image, save_crop, segment_and_crop

    m = _manifest(cfg)
    p = cfg.preprocess
    backend = make_backend(p.backend, p.backend_input_side)
    index = []
    for rec in m:
        img = read_image(m.image_path(rec), rec.id)
        res = segment_and_crop(img, backend, p.margin, p.threshold, p.margin_relative_to)
        save_crop(res, cfg.workdir / "crops", rec.id)
        index.append(res.sidecar(rec.id))
    dump_json({**_provenance(cfg, backend_identity=backend.identity), "crops": index}, cfg.workdir / "crops" / "index.json")
    return {"cropped": len(index), "fallbacks": sum(e["empty_mask_fallback"] for e in index)}


def cmd_split(cfg, args):
    m = _manifest(cfg)
    p = cfg.plan
    plan = make_cv_plan(m, p.repeats, p.folds, p.val_fraction, p.seed, p.seeds)
    _write_plan(cfg, m, plan)
    return {"triples": len(plan)}


def cmd_train_cit(cfg, args):
    from .cit import train_cit
    from .evaluation import fold_seed

    m = _manifest(cfg)
    a = _assignment(cfg, m, args.repeat, args.fold)
    images = _images(cfg, m, crop=True)
    lab = {r.id: r.label for r in m}
    stack = lambda ids: np.stack([images[i] for i in ids])  # noqa: E731
    seed = fold_seed(cfg.seed, a.repeat, a.fold)
    gens, history = train_cit(
        stack(a.train), [lab[i] for i in a.train], stack(a.val), [lab[i] for i in a.val],
        cfg.cit.loss_config(), cfg.cit.schedule(seed),
    )
    run_dir = _run_dir(cfg, a.repeat, a.fold)
    gens.meta.update(config_hash=cfg.config_hash(), repeat=a.repeat, fold=a.fold)
    gens.save(run_dir / "cit")
    dump_json({**_provenance(cfg, cit=_cit_identity(run_dir)), "history": history}, run_dir / "cit_history.json")
    return {"best_epoch": history["best_epoch"], "epochs": len(history["P"])}


def cmd_transform(cfg, args):
    from .cit import expand_dataset, write_expanded

    m = _manifest(cfg)
    a = _assignment(cfg, m, args.repeat, args.fold)
    run_dir = _run_dir(cfg, a.repeat, a.fold)
    gens = _load_gens(run_dir)
    images = _images(cfg, m, crop=True)
    recs = m.by_id()
    counts = {}
    for part in ("train", "val", "test"):
        pairs = expand_dataset([recs[i] for i in getattr(a, part)], images, gens)
        write_expanded(pairs, run_dir / "expanded" / part)
        counts[part] = 2 * len(pairs)
    dump_json({**_provenance(cfg, cit=_cit_identity(run_dir)), "counts": counts}, run_dir / "expanded" / "index.json")
    return counts


def cmd_train_clf(cfg, args):
    from .cit import expanded_arrays, read_expanded
    from .classifier import save_classifier, train_classifier
    from .evaluation import fold_seed

    variant = cfg.evaluation.variant
    if variant in ("cit_only", "all"):
        raise ConfigError(f"train-clf needs --variant sdnet, with_seg or no_seg, not {variant}")
    m = _manifest(cfg)
    a = _assignment(cfg, m, args.repeat, args.fold)
    run_dir = _run_dir(cfg, a.repeat, a.fold)
    seed = fold_seed(cfg.seed, a.repeat, a.fold)
    if variant == "sdnet":
        xtr, ytr, _ = expanded_arrays(read_expanded(run_dir / "expanded" / "train"))
        xva, yva, _ = expanded_arrays(read_expanded(run_dir / "expanded" / "val"))
        ccfg = cfg.classifier_config(4, seed)
    else:
        images = _images(cfg, m, crop=variant == "with_seg")
        lab = {r.id: r.label for r in m}
        xtr, ytr = np.stack([images[i] for i in a.train]), [lab[i] for i in a.train]
        xva, yva = np.stack([images[i] for i in a.val]), [lab[i] for i in a.val]
        ccfg = cfg.classifier_config(2, seed)
    model, history = train_classifier(xtr, ytr, xva, yva, ccfg)
    out = run_dir / f"clf_{variant}"
    save_classifier(model, ccfg, out, {"config_hash": cfg.config_hash(), "repeat": a.repeat, "fold": a.fold})
    dump_json({**_provenance(cfg, classifier=file_digest(out / "weights" / "model.pt")), "history": history},
              run_dir / f"clf_{variant}_history.json")
    return {"epochs": len(history)}


def cmd_infer(cfg, args):
    from .classifier import load_classifier, predict_batch
    from .fusion import infer_case
    from .preprocess import make_backend, read_image

    variant = cfg.evaluation.variant
    m = _manifest(cfg)
    a = _assignment(cfg, m, args.repeat, args.fold)
    run_dir = _run_dir(cfg, a.repeat, a.fold)
    recs = m.by_id()
    ids = args.ids or list(a.test)
    rows, ident = [], {}
    if variant == "sdnet":
        gens = _load_gens(run_dir)
        model, _ = load_classifier(run_dir / "clf_sdnet")
        p = cfg.preprocess
        backend = make_backend(p.backend, p.backend_input_side)
        ident = {"cit": _cit_identity(run_dir), "classifier": file_digest(run_dir / "clf_sdnet" / "weights" / "model.pt"),
                 "backend_identity": backend.identity}
        for i in ids:
            img = read_image(m.image_path(recs[i]), i)
            decision, trace = infer_case(img, backend, gens, model, cfg.inference_settings(), i)
            rows.append({**trace, "truth": recs[i].label})
    else:
        images = _images(cfg, m, crop=variant != "no_seg")
        x = np.stack([images[i] for i in ids])
        if variant == "cit_only":
            preds = _load_gens(run_dir).classify(x)
            ident = {"cit": _cit_identity(run_dir)}
        else:
            model, _ = load_classifier(run_dir / f"clf_{variant}")
            _, k = predict_batch(model, x)
            preds = [("N", "P")[j] for j in k]
            ident = {"classifier": file_digest(run_dir / f"clf_{variant}" / "weights" / "model.pt")}
        rows = [{"id": i, "label": str(pr), "truth": recs[i].label} for i, pr in zip(ids, preds)]
    dump_json({**_provenance(cfg, **ident), "variant": variant, "predictions": rows}, run_dir / f"predictions_{variant}.json")
    acc = float(np.mean([r["label"] == r["truth"] for r in rows])) if rows else None
    return {"n": len(rows), "accuracy": acc}


def cmd_evaluate(cfg, args):
    from .evaluation import run_experiment

    m = _manifest(cfg)
    plan = _plan(cfg, m)
    variants = VARIANTS if cfg.evaluation.variant == "all" else (cfg.evaluation.variant,)
    summary = {}
    for v in variants:
        report = run_experiment(m, plan, v, cfg, cfg.workdir)
        dump_json(report, cfg.workdir / f"report_{v}.json")
        summary[v] = report["aggregate"]["accuracy"]
    _write_tables(cfg)
    return {"accuracy": summary}


def _write_tables(cfg):
    from .evaluation import load_reports, render_severity_table, render_table

    reports = load_reports(cfg.workdir)
    table = render_table(reports)
    (cfg.workdir / "table.txt").write_text(table, encoding="utf-8")
    (cfg.workdir / "severity_table.txt").write_text(render_severity_table(reports), encoding="utf-8")
    return table


def cmd_explain(cfg, args):
    from .classifier import CLASS_NAMES, load_classifier
    from .explain import counterfactual_pair, save_triptych
    from .preprocess import unnormalize

    m = _manifest(cfg)
    a = _assignment(cfg, m, args.repeat, args.fold)
    run_dir = _run_dir(cfg, a.repeat, a.fold)
    gens = _load_gens(run_dir)
    model, _ = load_classifier(run_dir / "clf_sdnet")
    images = _images(cfg, m, crop=True)
    ids = args.ids or cfg.explain.ids or list(a.test)
    plus, minus = gens.transform(np.stack([images[i] for i in ids]))
    ident = {"cit": _cit_identity(run_dir), "classifier": file_digest(run_dir / "clf_sdnet" / "weights" / "model.pt"),
             "config_hash": cfg.config_hash()}
    out_dir = cfg.workdir / "explain" / f"r{a.repeat}_f{a.fold}"
    written = 0
    for i, xp, xm in zip(ids, plus, minus):
        for tag, x in (("plus", xp), ("minus", xm)):
            dec, cf = counterfactual_pair(model, x)
            gray = unnormalize(x, cfg.preprocess.mean, cfg.preprocess.std)
            save_triptych(gray, dec, cf, out_dir, f"{i}_{tag}", CLASS_NAMES[4][dec.target_class][0],
                          cfg.explain.colormap, cfg.explain.alpha, {"source_id": i, "transform": tag, **ident})
            written += 1
    return {"triptychs": written}


def cmd_report(cfg, args):
    table = _write_tables(cfg)
    sys.stdout.write(table)
    return None


COMMANDS = {
    "ingest": cmd_ingest,
    "crop": cmd_crop,
    "split": cmd_split,
    "train-cit": cmd_train_cit,
    "transform": cmd_transform,
    "train-clf": cmd_train_clf,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "report": cmd_report,
}


# ---------------------------------------------------------------- argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdnet", description="Segmentation, CiT transforms and twin-fusion CXR screening.")
    parser.add_argument("subcommand", help=", ".join(SUBCOMMANDS))
    parser.add_argument("--config", help="YAML or JSON run config")
    parser.add_argument("--manifest", help="manifest CSV/JSONL (paths.manifest)")
    parser.add_argument("--image-root", help="directory the manifest paths are relative to")
    parser.add_argument("--workdir", help="output directory (paths.workdir)")
    parser.add_argument("--variant", choices=VARIANTS + ("all",))
    parser.add_argument("--exclude-normal-pcr", action="store_true", default=None)
    parser.add_argument("--seed", type=int, help="seeds both the CV plan and training")
    parser.add_argument("--repeats", type=int)
    parser.add_argument("--folds", type=int)
    parser.add_argument("--repeat", type=int, default=0, help="which repeat the per-fold stages act on")
    parser.add_argument("--fold", type=int, default=0, help="which fold the per-fold stages act on")
    parser.add_argument("--ids", nargs="*", default=None, help="restrict infer/explain to these ids")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def flag_overrides(args) -> dict:
    paths = {k: v for k, v in (("manifest", args.manifest), ("image_root", args.image_root), ("workdir", args.workdir)) if v}
    out: dict = {}
    if paths:
        out["paths"] = paths
    evaluation = {}
    if args.variant:
        evaluation["variant"] = args.variant
    if args.exclude_normal_pcr:
        evaluation["exclude_normal_pcr"] = True
    if evaluation:
        out["evaluation"] = evaluation
    plan = {k: v for k, v in (("repeats", args.repeats), ("folds", args.folds), ("seed", args.seed)) if v is not None}
    if plan:
        out["plan"] = plan
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _error_record(exc: Exception, subcommand: str | None) -> dict:
    code = exc.code if isinstance(exc, SDNetError) else type(exc).__name__
    record = {"error": code, "message": str(exc), "subcommand": subcommand}
    image_id = getattr(exc, "image_id", None)
    if image_id is not None:
        record["id"] = image_id
    return record


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.subcommand not in COMMANDS:
            raise UnknownSubcommand(f"unknown subcommand {args.subcommand!r}; expected one of {', '.join(SUBCOMMANDS)}")
        cfg = load_config(args.config, flag_overrides(args)).validate()
        cfg.workdir.mkdir(parents=True, exist_ok=True)
        from filelock import FileLock, Timeout

        try:
            with FileLock(str(cfg.workdir / LOCK_NAME), timeout=0):
                result = COMMANDS[args.subcommand](cfg, args)
        except Timeout as exc:
            raise ConfigError(f"work dir {cfg.workdir} is locked by another sdnet process") from exc
    except (SDNetError, OSError, ValueError) as exc:
        sys.stderr.write(json.dumps(_error_record(exc, args.subcommand), sort_keys=True) + "\n")
        return 1
    if result is not None:
        sys.stdout.write(json.dumps({"subcommand": args.subcommand, **result}, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
