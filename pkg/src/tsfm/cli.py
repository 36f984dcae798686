"""Command-line entry point: ``tsfm <command> [options]``.

Exit codes: 0 success, 2 usage or specification errors, 3 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import datapool, infereval, model, transferkit, volumeio
from .checkpoint import load_checkpoint
from .errors import ConfigInvariantViolation, PoolError, TSFMError
from .losstrain import CaseStore, TrainConfig, train

EXIT_USAGE = 2
EXIT_RUNTIME = 3

MODEL_KEYS = {f.name for f in fields(model.ModelConfig)} - {"preset_name"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config plumbing


def load_config_file(path) -> dict:
    """JSON or TOML document whose keys are TrainConfig/ModelConfig field names."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        doc = tomllib.loads(text)
    else:
        doc = json.loads(text)
    unknown = set(doc) - MODEL_KEYS - TRAIN_KEYS
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
    return doc


def _split(doc: dict):
    return ({k: v for k, v in doc.items() if k in TRAIN_KEYS},
            {k: v for k, v in doc.items() if k in MODEL_KEYS})


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, args, **sections) -> None:
    doc = {"command": args.command, "seed": args.seed, "out": str(args.out), "workers": args.workers}
    doc.update({k: v for k, v in vars(args).items()
                if k not in {"func", "command", "seed", "out", "workers", "config"} and v is not None})
    doc.update(sections)
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _train_config(args, file_train: dict) -> TrainConfig:
    d = dict(file_train)
    d["seed"] = args.seed
    for flag, key in (("epochs", "epochs"), ("iters", "iters_per_epoch"), ("batch_size", "batch_size"),
                      ("lr", "lr0"), ("overlap", "val_overlap")):
        if getattr(args, flag, None) is not None:
            d[key] = getattr(args, flag)
    try:
        return TrainConfig.from_mapping(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _echo(msg="") -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- commands


def cmd_pool(args) -> int:
    spec_dir = Path(args.spec_dir)
    if not spec_dir.is_dir():
        raise UsageError(f"{spec_dir} is not a directory")
    files = sorted(spec_dir.glob("*.json"))
    if not files:
        raise UsageError(f"no dataset specs found in {spec_dir}")
    specs = []
    for f in files:
        try:
            doc = json.loads(f.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{f.name}: invalid JSON ({exc})") from exc
        try:
            specs.append(datapool.DatasetSpec.from_dict(doc, base_dir=spec_dir))
        except (KeyError, PoolError) as exc:
            raise PoolError(f"dataset spec {doc.get('dataset_id', f.stem)!r} ({f.name}): {exc}") from exc
    aliases = json.loads(Path(args.alias).read_text(encoding="utf-8")) if args.alias else None
    pool = datapool.build_pool(specs, alias_map=aliases, forbid_merge=args.forbid_merge or (), seed=args.seed)

    out = _out_dir(args)
    _write_resolved(out, args)
    pool.save(out / "pool.json")
    (out / "remap.csv").write_text(pool.remap.to_csv(), encoding="utf-8")
    probs = pool.dataset_probabilities()
    _echo(f"classes C = {pool.num_classes}")
    for c, name in sorted(pool.remap.pool_classes.items()):
        _echo(f"  {c:3d}  {name}")
    _echo(f"{'dataset':<24} {'n':>6} {'probability':>12}")
    for s in pool.datasets:
        _echo(f"{s.dataset_id:<24} {s.n_cases:>6d} {probs[s.dataset_id]:>12.6f}")
    return 0


def cmd_preprocess(args) -> int:
    pool = datapool.PoolManifest.load(args.pool)
    store_raw = []
    for case in pool.cases:
        spec = pool.dataset(case.dataset_id)
        store_raw.append(volumeio.read_case(case.image, case.label, spec.modality))
    target = tuple(args.spacing) if args.spacing else volumeio.median_spacing([v.spacing for v in store_raw])
    out = _out_dir(args)
    case_dir = out / "cases"
    case_dir.mkdir(exist_ok=True)
    _write_resolved(out, args, target_spacing=list(target))

    new_paths: dict = {}
    for case, vol in zip(pool.cases, store_raw):
        prep = volumeio.preprocess(vol, volumeio.PreprocessSpec.for_modality(vol.modality, target))
        path = case_dir / f"case{case.case_index:04d}.tsv3d"
        volumeio.write_internal(prep, path)
        new_paths.setdefault(case.dataset_id, []).append((str(path), str(path)))
        _echo(f"{case.case_index:4d} {case.dataset_id:<20} {vol.shape} -> {prep.shape}")
    datasets = tuple(replace(s, case_paths=tuple(new_paths[s.dataset_id])) for s in pool.datasets)
    cases = []
    for s in datasets:
        for img, lbl in s.case_paths:
            cases.append(datapool.CaseRecord(len(cases), s.dataset_id, img, lbl))
    replace(pool, datasets=datasets, cases=tuple(cases)).save(out / "pool.json")
    _echo(f"target spacing {tuple(round(t, 4) for t in target)}; wrote {len(cases)} cases to {case_dir}")
    return 0


def _model_config(args, file_model: dict, num_classes: int) -> model.ModelConfig:
    overrides = dict(file_model)
    overrides["num_classes"] = num_classes
    if getattr(args, "patch_size", None):
        overrides["patch_size"] = tuple(args.patch_size)
    try:
        return model.preset(args.preset, **overrides)
    except (TypeError, KeyError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    file_train, file_model = _split(load_config_file(args.config)) if args.config else ({}, {})
    pool = datapool.PoolManifest.load(args.pool)
    cfg = _train_config(args, file_train)
    mcfg = _model_config(args, file_model, pool.num_classes)
    out = _out_dir(args)
    _write_resolved(out, args, train=cfg.to_dict(), model=mcfg.to_dict())
    net = model.build(mcfg, seed=args.seed)
    ckpt = train(net, pool, cfg, out_dir=out, callbacks=[_progress(cfg)])
    _echo(f"best checkpoint: epoch {ckpt.epoch}, mean Dice {ckpt.best_metric}")
    return 0


def _progress(cfg):
    def report(record):
        if record.get("event") == "validation":
            _echo(f"epoch {record['epoch']:4d}  validation mean Dice {record['mean_dice']:.4f}")
        elif record.get("iter") == cfg.iters_per_epoch - 1:
            _echo(f"epoch {record['epoch']:4d}  lr {record['lr']:.3e}  loss {record['total']:.4f}")
    return report


def cmd_finetune(args) -> int:
    file_train, file_model = _split(load_config_file(args.config)) if args.config else ({}, {})
    source = load_checkpoint(args.checkpoint)
    pool = datapool.PoolManifest.load(args.pool)
    overrides = dict(file_model)
    overrides["num_classes"] = pool.num_classes
    if args.patch_size:
        overrides["patch_size"] = tuple(args.patch_size)
    d = source.config.to_dict()
    d.update(overrides)
    if "patch_size" in overrides:
        d["transformer"] = {**d["transformer"], "pos_tokens": 0}
    try:
        target = model.ModelConfig.from_dict(d).validate()
    except (TypeError, ConfigInvariantViolation) as exc:
        raise UsageError(str(exc)) from exc
    base = _train_config(args, file_train)
    epochs = args.epochs if args.epochs is not None else file_train.get("epochs", transferkit.FINETUNE_BUDGETS[-1])
    budget = transferkit.FinetuneBudget(epochs, base.iters_per_epoch, base.lr0)
    out = _out_dir(args)
    _write_resolved(out, args, train=budget.train_config(base).to_dict(), model=target.to_dict())
    net, plan = transferkit.transfer(source, target, seed=args.seed)
    plan.save(out / "surgery.json")
    _echo(f"surgery: {len(plan.copied)} copied, {len(plan.interpolated)} interpolated, "
          f"{len(plan.reinitialized)} reinitialized")
    ckpt = transferkit.finetune(net, pool, budget, base_config=base, freeze_cnn=args.freeze_cnn, out_dir=out,
                                callbacks=[_progress(budget.train_config(base))])
    _echo(f"best checkpoint: epoch {ckpt.epoch}, mean Dice {ckpt.best_metric}")
    return 0


def _case_lookup(pool) -> dict:
    lookup = {}
    for case in pool.cases:
        lookup[str(Path(case.image).resolve())] = case.case_index
    return lookup


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii", ".tsv3d"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net = ckpt.to_model()
    lookup = _case_lookup(datapool.PoolManifest.load(args.pool)) if args.pool else {}
    out = _out_dir(args)
    _write_resolved(out, args, model=ckpt.config.to_dict())
    for vol_path in map(Path, args.volumes):
        vol = volumeio.read_case(vol_path)
        case_id = lookup.get(str(vol_path.resolve()))
        stem = f"case{case_id:04d}" if case_id is not None else _stem(vol_path)
        pm = infereval.sliding_window_predict(net, vol, overlap=args.overlap, weighting=args.weighting,
                                              case_id="" if case_id is None else str(case_id))
        pm.save(out / stem)
        masks = infereval.binarize(pm, args.threshold)
        # viewing aid: the most probable positive class per voxel; the full multi-label output is the .probs file
        scored = np.where(masks[1:], pm.probs[1:], -1.0)
        label = np.where(masks[1:].any(axis=0), scored.argmax(axis=0) + 1, 0).astype(np.uint16)
        volumeio.write_internal(volumeio.Volume(vol.data.astype(np.float32), vol.spacing, vol.modality, label,
                                                {"source": vol_path.name}), out / f"{stem}.mask.tsv3d")
        _echo(f"{vol_path.name}: {stem}.probs.f32, {stem}.mask.tsv3d")
    return 0


def cmd_evaluate(args) -> int:
    pool = datapool.PoolManifest.load(args.pool)
    pred_dir = Path(args.pred_dir)
    sidecars = sorted(pred_dir.glob("*.probs.json"))
    if not sidecars:
        raise UsageError(f"no predictions (*.probs.json) in {pred_dir}")
    store = CaseStore(pool)
    preds, gts = [], []
    for side in sidecars:
        pm = infereval.PredictionMap.load(pred_dir / side.name[: -len(".probs.json")])
        if not pm.case_id:
            raise UsageError(f"{side.name} has no pool case id; predict with --pool")
        preds.append(pm)
        gts.append(store.get(int(pm.case_id)))
    report = infereval.evaluate_cases(preds, gts, pool, threshold=args.threshold, method=args.method,
                                      postprocess=args.largest_component)
    out = _out_dir(args)
    _write_resolved(out, args)
    md = infereval.render_report(report, "table1", "md")
    (out / "report.md").write_text(md, encoding="utf-8")
    (out / "report.csv").write_text(infereval.render_report(report, "table1", "csv"), encoding="utf-8")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _echo(md)
    return 0


def cmd_params(args) -> int:
    overrides = {"num_classes": args.num_classes} if args.num_classes else {}
    cfg = model.preset(args.preset, **overrides)
    if args.breakdown:
        for k, v in model.param_breakdown(cfg).items():
            _echo(f"{k:<16}{v:>16,d}")
    else:
        _echo(str(model.param_count(cfg)))
    return 0


def cmd_report(args) -> int:
    reports = [infereval.report_from_dict(json.loads(Path(p).read_text(encoding="utf-8"))) for p in args.results]
    out = _out_dir(args)
    _write_resolved(out, args)
    md = infereval.render_report(reports, args.style, "md")
    (out / "report.md").write_text(md, encoding="utf-8")
    (out / "report.csv").write_text(infereval.render_report(reports, args.style, "csv"), encoding="utf-8")
    _echo(md)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global seed for sampling, crops and initialization")
    common.add_argument("--out", default="tsfm_out", help="output directory; every file a command writes goes here")
    common.add_argument("--config", help="JSON or TOML file with TrainConfig/ModelConfig field overrides")
    common.add_argument("--workers", type=int, default=1,
                        help="cap on data-loading workers (loading is sequential; accepted for scripts)")

    parser = argparse.ArgumentParser(prog="tsfm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("pool", parents=[common], help="fuse dataset specs into a pool manifest")
    p.add_argument("spec_dir", help="directory of per-dataset JSON specs")
    p.add_argument("--alias", help="JSON object mapping class-name variants to canonical names")
    p.add_argument("--forbid-merge", nargs="*", metavar="NAME", help="class names that may not be shared")
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("preprocess", parents=[common], help="resample and normalize every pool case")
    p.add_argument("pool", help="pool.json")
    p.add_argument("--spacing", type=float, nargs=3, metavar=("D", "H", "W"),
                   help="target spacing in mm (default: median over the pool)")
    p.set_defaults(func=cmd_preprocess)

    def training_flags(p, epochs_help):
        p.add_argument("--epochs", type=int, help=epochs_help)
        p.add_argument("--iters", type=int, help="iterations per epoch (default 250)")
        p.add_argument("--batch-size", type=int, help="cases per iteration (default 2)")
        p.add_argument("--lr", type=float, help="initial learning rate (default 1e-3)")
        p.add_argument("--overlap", type=float, help="validation sliding-window overlap (default 0.5)")
        p.add_argument("--patch-size", type=int, nargs=3, metavar=("D", "H", "W"), help="training patch size")

    p = sub.add_parser("train", parents=[common], help="train on a pool")
    p.add_argument("pool", help="pool.json")
    p.add_argument("--preset", choices=sorted(model.load_presets()), default="toy", help="model preset")
    training_flags(p, "training epochs (default 1000)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="transfer a checkpoint and fine-tune on a pool")
    p.add_argument("checkpoint", help="pretrained .tsfm checkpoint")
    p.add_argument("pool", help="downstream pool.json")
    training_flags(p, "fine-tuning epochs (default 100)")
    p.add_argument("--freeze-cnn", action="store_true", help="keep all CNN weights fixed; train the bottleneck and head")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", parents=[common], help="sliding-window prediction of whole volumes")
    p.add_argument("checkpoint", help=".tsfm checkpoint")
    p.add_argument("volumes", nargs="+", help="preprocessed .tsv3d or NIfTI volumes")
    p.add_argument("--pool", help="pool.json; tags predictions with pool case indices for evaluate")
    p.add_argument("--overlap", type=float, default=0.5, help="tile overlap fraction in [0, 1)")
    p.add_argument("--threshold", type=float, default=0.5, help="per-class probability threshold")
    p.add_argument("--weighting", choices=["gaussian", "uniform"], default="gaussian", help="tile weighting")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="Dice report for a prediction directory")
    p.add_argument("pred_dir", help="directory written by predict")
    p.add_argument("pool", help="pool.json naming the ground-truth cases")
    p.add_argument("--threshold", type=float, default=0.5, help="per-class probability threshold")
    p.add_argument("--method", default="Ours", help="row label in the rendered table")
    p.add_argument("--largest-component", action="store_true", help="keep only the largest component per class")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("params", parents=[common], help="analytic parameter count of a preset")
    p.add_argument("--preset", choices=sorted(model.load_presets()), default="full16b", help="model preset")
    p.add_argument("--num-classes", type=int, help="override the preset's class count")
    p.add_argument("--breakdown", action="store_true", help="print per-component counts")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("report", parents=[common], help="render report JSON files as tables")
    p.add_argument("results", nargs="+", help="report.json files (Dice or transfer reports)")
    p.add_argument("--style", choices=["table1", "transfer"], default="table1", help="table layout")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, PoolError, ConfigInvariantViolation, FileNotFoundError) as exc:
        print(f"tsfm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TSFMError, OSError, ValueError, KeyError) as exc:
        print(f"tsfm {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
