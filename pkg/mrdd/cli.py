"""
Command-line interface for MRDD.

    mrdd data synth --recipe jitter3 --src ./coil --out ./data/coil-jitter
    mrdd train stage1 --config exp.json
    mrdd train stage2 --config exp.json --stage1 runs/exp/stage1.pt
    mrdd extract --config exp.json --stage2 runs/exp/stage2.pt --out runs/exp/latents
    mrdd eval --latents runs/exp/latents --selector cs1 --task cluster
    mrdd audit-mi --latents runs/exp/latents --out runs/exp/mi_audit.csv
    mrdd sweep mask|dims --config exp.json
    mrdd ablate components|strategy|representations --config exp.json
    mrdd run --config exp.json
    mrdd report runs/<run_id>

Every command exits with 1 when a stage fails.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from mrdd import __version__
from mrdd.config import ExperimentConfig, load_config, output_root, override
from mrdd.services.data import RECIPES, SPLITS, JitterConfig, MultiViewDataset, iterate_batches, synthesize

logger = logging.getLogger("mrdd.cli")


def _configure_logging():
    logging.basicConfig(
        level=os.getenv("MRDD_LOG_LEVEL", "INFO"),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _parse_set(pairs: Optional[List[str]]) -> Dict[str, Any]:
    updates = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got '{pair}'")
        key, raw = pair.split("=", 1)
        try:
            updates[key] = json.loads(raw)
        except json.JSONDecodeError:
            updates[key] = raw
    return updates


def _config(args) -> ExperimentConfig:
    config = load_config(args.config)
    updates = _parse_set(getattr(args, "set", None))
    return override(config, updates) if updates else config


def _stage_dir(config: ExperimentConfig, out: Optional[str]) -> Path:
    path = Path(out) if out else Path(config.output_dir or output_root()) / config.name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print_progress(pct: float, msg: str):
    logger.info(f"[{pct:5.1f}%] {msg}")


def cmd_data_synth(args) -> int:
    jitter = JitterConfig.model_validate(json.loads(args.jitter)) if args.jitter else None
    dataset = synthesize(args.recipe, args.out, src=args.src, seed=args.seed, image_size=args.image_size,
                         n_views=args.n_views, n_samples=args.n_samples, jitter=jitter,
                         progress_callback=_print_progress)
    m = dataset.manifest
    print(f"{m.name}: {m.n_samples} samples, {m.n_views} views, {m.n_classes} classes -> {args.out}")
    return 0


def cmd_train(args) -> int:
    from mrdd.services.consistency import ConsistentModel, load_stage1, train_stage1
    from mrdd.services.disentangle import SpecificModel, train_stage2
    from mrdd.services.training import seed_everything
    from mrdd.utils.report import loss_columns, write_table

    config = _config(args)
    out_dir = _stage_dir(config, args.out)
    dataset = MultiViewDataset.load(config.dataset)

    if args.stage == "stage1":
        seed_everything(config.seed)
        model = ConsistentModel.from_dataset(dataset, config)
        model, curve = train_stage1(model, dataset, config, device=config.device, checkpoint_dir=out_dir,
                                    progress_callback=_print_progress)
        table = write_table(curve, loss_columns(curve), out_dir / "stage1_losses.csv", config)
        print(f"stage1 checkpoint: {out_dir / 'stage1.pt'} (encoder {model.encoder_hash()[:12]})")
    else:
        if not args.stage1:
            raise ValueError("train stage2 needs --stage1 <checkpoint>")
        consistent = load_stage1(args.stage1)
        seed_everything(config.seed + 1)
        model = SpecificModel.from_config(consistent, config)
        model, curve = train_stage2(model, dataset, config, device=config.device, checkpoint_dir=out_dir,
                                    progress_callback=_print_progress)
        table = write_table(curve, loss_columns(curve), out_dir / "stage2_losses.csv", config)
        print(f"stage2 checkpoint: {out_dir / 'stage2.pt'}")
    print(f"loss curve: {table}")
    return 0


def _dataset_path(args) -> str:
    if args.dataset:
        return args.dataset
    if args.config:
        return load_config(args.config).dataset
    raise ValueError("pass --dataset or --config to locate the dataset")


def cmd_extract(args) -> int:
    from mrdd.services.disentangle import load_stage2
    from mrdd.services.latents import extract_latents

    model = load_stage2(args.stage2)
    dataset = MultiViewDataset.load(_dataset_path(args))
    latents = extract_latents(model, dataset, split=args.split, batch_size=args.batch_size, device=args.device,
                              meta={"checkpoints": {"stage2": str(args.stage2)}})
    path = latents.save(args.out)
    print(f"{len(latents)} latent bundles (d_c={latents.d_c}, d_s={latents.d_s}, views={latents.n_views}) -> {path}")
    return 0


def cmd_eval(args) -> int:
    from mrdd.services.evaluation import classify_eval, cluster_eval
    from mrdd.services.latents import LatentSet
    from mrdd.utils.report import METRIC_COLUMNS, write_table
    from mrdd.utils.report_generator import format_metric

    latents = LatentSet.load(args.latents)
    if args.task == "cluster":
        reports = cluster_eval(latents, args.selector, runs=args.runs, seed=args.seed)
    else:
        reports = classify_eval(latents, args.selector, runs=args.runs, seed=args.seed, C=args.svm_c)
    rows = [r.model_dump() for r in reports.values()]
    out = Path(args.out) if args.out else Path(args.latents) / f"eval_{args.task}_{args.selector}.csv"
    write_table(rows, METRIC_COLUMNS, out, extra={"latents": str(args.latents), "runs": args.runs,
                                                  "seed": args.seed})
    for row in rows:
        print(f"{row['task']:<15} {row['selector']:<8} {row['metric'].upper():<8} "
              f"{format_metric(row['mean'], row['variance'])}")
    print(f"table: {out}")
    return 0


def cmd_audit_mi(args) -> int:
    from mrdd.config import MineConfig
    from mrdd.services.latents import LatentSet
    from mrdd.services.mi_audit import audit_redundancy
    from mrdd.utils.report import AUDIT_COLUMNS, write_table

    mine = load_config(args.config).mine if args.config else MineConfig()
    if args.repeats:
        mine = mine.model_copy(update={"repeats": args.repeats})
    if args.epochs:
        mine = mine.model_copy(update={"epochs": args.epochs})
    latents = LatentSet.load(args.latents)
    rows = [r.model_dump() for r in audit_redundancy(latents, mine, seed=args.seed,
                                                      progress_callback=_print_progress)]
    write_table(rows, AUDIT_COLUMNS, args.out, extra={"latents": str(args.latents),
                                                      "mine": mine.model_dump(mode="json")})
    for row in rows:
        print(f"I(c; s{row['view']}) = {row['mi_nats']:.4f} +/- {row['std']:.4f} nats")
    return 0


def cmd_run(args) -> int:
    from mrdd.services.pipeline import run_full

    record = run_full(_config(args), progress_callback=_print_progress, run_id=args.run_id)
    print(f"run {record.run_id}: {record.status} ({record.run_dir})")
    if not record.success:
        print(f"failed during {record.failed_stage}: {record.error}", file=sys.stderr)
        return 1
    return 0


def _floats(text: Optional[str]) -> Optional[List[float]]:
    return [float(x) for x in text.split(",")] if text else None


def _ints(text: Optional[str]) -> Optional[List[int]]:
    return [int(x) for x in text.split(",")] if text else None


def _table_status(path: str) -> int:
    from mrdd.utils.report import read_table

    rows = read_table(path)
    failed = [r for r in rows if r.get("status") == "failed"]
    print(f"table: {path} ({len(rows)} rows, {len(failed)} failed)")
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    from mrdd.services.pipeline import sweep_dims, sweep_mask_ratio

    config = _config(args)
    if args.kind == "mask":
        path = sweep_mask_ratio(config, ratios=_floats(args.ratios), out_dir=args.out)
    else:
        path = sweep_dims(config, dc_list=_ints(args.dc), ds_list=_ints(args.ds), out_dir=args.out)
    return _table_status(path)


def cmd_ablate(args) -> int:
    from mrdd.services.pipeline import ablate_components, ablate_mask_strategy, ablate_representations

    config = _config(args)
    if args.kind == "components":
        path = ablate_components(config, out_dir=args.out)
    elif args.kind == "strategy":
        path = ablate_mask_strategy(config, ratio=args.ratio, out_dir=args.out)
    else:
        path = ablate_representations(config, out_dir=args.out)
        print(f"table: {path}")
        return 0
    return _table_status(path)


def cmd_report(args) -> int:
    from mrdd.services.pipeline import generate_report

    paths = generate_report(args.run_dir)
    for kind, path in paths.items():
        print(f"{kind}: {path or 'FAILED'}")
    return 0 if all(paths.values()) else 1


def cmd_reconstruct(args) -> int:
    from mrdd.services.disentangle import load_stage2, reconstruct_samples
    from mrdd.utils.images import save_reconstruction_grid

    model = load_stage2(args.stage2)
    dataset = MultiViewDataset.load(_dataset_path(args))
    batch = next(iterate_batches(dataset, args.split, args.n, shuffle=False))
    path = save_reconstruction_grid(reconstruct_samples(model, batch), args.out, n_samples=args.n)
    print(f"reconstructions: {path}")
    return 0


def cmd_export(args) -> int:
    from mrdd.services.latents import LatentSet, export_embeddings

    path = export_embeddings(LatentSet.load(args.latents), args.selector, args.out)
    print(f"embeddings: {path}")
    return 0


def cmd_serve(args) -> int:
    from mrdd.main import serve

    serve(host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrdd", description="Two-stage multi-view representation learning")
    parser.add_argument("--version", action="version", version=f"mrdd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="experiment config (JSON)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. --set mask.ratio=0.5")

    data = sub.add_parser("data", help="dataset construction")
    data_sub = data.add_subparsers(dest="data_command", required=True)
    synth = data_sub.add_parser("synth", help="build a multi-view dataset")
    synth.add_argument("--recipe", choices=RECIPES, required=True)
    synth.add_argument("--src", help="source images (images.npy or one folder per object)")
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--image-size", type=int)
    synth.add_argument("--n-views", type=int, default=3)
    synth.add_argument("--n-samples", type=int, default=1000, help="synthetic recipe only")
    synth.add_argument("--jitter", help="JSON jitter ranges for the jitter3 recipe")
    synth.set_defaults(func=cmd_data_synth)

    train = sub.add_parser("train", help="train one stage")
    train.add_argument("stage", choices=["stage1", "stage2"])
    with_config(train)
    train.add_argument("--stage1", help="frozen stage-I checkpoint (stage2 only)")
    train.add_argument("--out", help="checkpoint directory")
    train.set_defaults(func=cmd_train)

    extract = sub.add_parser("extract", help="write latent bundles from a stage-II checkpoint")
    extract.add_argument("--stage2", required=True)
    extract.add_argument("--config")
    extract.add_argument("--dataset")
    extract.add_argument("--split", choices=SPLITS, default="all")
    extract.add_argument("--batch-size", type=int, default=512)
    extract.add_argument("--device", default="cpu")
    extract.add_argument("--out", required=True, help="latents directory")
    extract.set_defaults(func=cmd_extract)

    ev = sub.add_parser("eval", help="clustering or classification on extracted latents")
    ev.add_argument("--latents", required=True)
    ev.add_argument("--selector", default="c", help="c | s<i> | cs<i> | concat")
    ev.add_argument("--task", choices=["cluster", "classify"], required=True)
    ev.add_argument("--runs", type=int, default=10)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--svm-c", type=float, default=1.0)
    ev.add_argument("--out", help="metrics table path")
    ev.set_defaults(func=cmd_eval)

    audit = sub.add_parser("audit-mi", help="MINE estimate of I(c; s^i) per view")
    audit.add_argument("--latents", required=True)
    audit.add_argument("--out", required=True)
    audit.add_argument("--config", help="take MINE settings from this config")
    audit.add_argument("--repeats", type=int)
    audit.add_argument("--epochs", type=int)
    audit.add_argument("--seed", type=int, default=0)
    audit.set_defaults(func=cmd_audit_mi)

    run = sub.add_parser("run", help="full pipeline for one config")
    with_config(run)
    run.add_argument("--run-id")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="hyper-parameter sweeps")
    sweep.add_argument("kind", choices=["mask", "dims"])
    with_config(sweep)
    sweep.add_argument("--ratios", help="comma-separated mask ratios")
    sweep.add_argument("--dc", help="comma-separated d_c values")
    sweep.add_argument("--ds", help="comma-separated d_s values")
    sweep.add_argument("--out")
    sweep.set_defaults(func=cmd_sweep)

    ablate = sub.add_parser("ablate", help="ablation tables")
    ablate.add_argument("kind", choices=["components", "strategy", "representations"])
    with_config(ablate)
    ablate.add_argument("--ratio", type=float, default=0.7, help="mask ratio for the strategy ablation")
    ablate.add_argument("--out")
    ablate.set_defaults(func=cmd_ablate)

    report = sub.add_parser("report", help="PDF and JSON report for a run directory")
    report.add_argument("run_dir")
    report.set_defaults(func=cmd_report)

    recon = sub.add_parser("reconstruct", help="reconstruction grid from c and from [c, s]")
    recon.add_argument("--stage2", required=True)
    recon.add_argument("--config")
    recon.add_argument("--dataset")
    recon.add_argument("--split", choices=SPLITS, default="test")
    recon.add_argument("--n", type=int, default=8)
    recon.add_argument("--out", required=True, help="PNG path")
    recon.set_defaults(func=cmd_reconstruct)

    export = sub.add_parser("export", help="write one representation as CSV")
    export.add_argument("--latents", required=True)
    export.add_argument("--selector", default="cs1")
    export.add_argument("--out", required=True)
    export.set_defaults(func=cmd_export)

    serve = sub.add_parser("serve", help="start the run registry API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        return 130
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
