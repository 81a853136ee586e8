"""``beamfed`` command line.

    beamfed gen    --config cfg.toml --seed 0 --out data/
    beamfed train  --config cfg.toml --seed 0 --out run/ [--data data/dataset.bin]
    beamfed eval   --run run/ --out eval/
    beamfed sweep  --config cfg.toml --seed 0 --out sweep/ --axis num_clusters --values 1,2,4
    beamfed report --sweep sweep/ --out figures/

``--set key=value`` (repeatable) overrides single config keys.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import harness, io
from .config import ExperimentConfig, desk_config, load_config
from .data import generate_dataset
from .report import write_report

log = logging.getLogger("beamfed")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset == "desk":
        cfg = desk_config()
    else:
        cfg = ExperimentConfig()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), _parse_value(value.strip()))
    return cfg


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="TOML or JSON experiment config")
        p.add_argument("--preset", choices=("default", "desk"), default="default",
                       help="built-in config used when --config is absent")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, scene = generate_dataset(cfg, args.seed)
    io.save_dataset(ds, out / "dataset.bin", config=cfg.to_dict(), scene=scene)
    sizes = ds.client_sizes().tolist()
    log.info("wrote %d samples for %d clients (sizes %s) to %s", len(ds.samples), ds.num_clients,
             sizes, out / "dataset.bin")
    return 0


def _save_method(mm: harness.MethodModels, out: Path) -> dict:
    files = []
    for k, m in enumerate(mm.models):
        if isinstance(m, harness.MoeBundle):
            io.save_bundle(m, out / f"{mm.method}_{k}")
            files.append(f"{mm.method}_{k}")
        else:
            io.save_checkpoint(m, mm.arch, out / f"{mm.method}_{k}.ckpt")
            files.append(f"{mm.method}_{k}.ckpt")
    return {"files": files, "epochs": mm.epochs, "total_epochs": mm.total_epochs,
            "model_bytes": mm.model_bytes}


def _load_method(method: str, entry: dict, run: Path) -> harness.MethodModels:
    models, arch = [], None
    for name in entry["files"]:
        if name.endswith(".ckpt"):
            params, arch, _ = io.load_checkpoint(run / name)
            models.append(params)
        else:
            bundle = io.load_bundle(run / name)
            models.append(bundle)
            arch = bundle.arch
    return harness.MethodModels(method, models, arch, entry["epochs"], entry["total_epochs"],
                                entry["model_bytes"])


def _eval_rows(methods: dict[str, harness.MethodModels], cfg: ExperimentConfig, ds, draws,
               seed: int) -> list[harness.MetricRow]:
    rows = []
    opt = cfg.federated.server_optim.lower()
    for method in harness.METHODS:
        if method in methods:
            base = harness.MetricRow("train_fraction", cfg.data.train_frac, opt, method, "", 0, seed)
            rows += harness.method_rows(base, methods[method], ds, draws, harness.dl_bandwidth(cfg))
    return rows


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.optimizer:
        cfg = cfg.for_optimizer(args.optimizer)
    else:
        cfg = cfg.for_optimizer(cfg.federated.server_optim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(1):
        full = io.load_dataset(args.data)[0] if args.data else None
        ds, draws = harness.prepare_data(cfg, args.seed, full)
        pipe = harness.Pipeline(cfg, ds, args.seed)
        trained, manifest = {}, {}
        for method in args.methods.split(","):
            trained[method] = pipe.train(method)
            manifest[method] = _save_method(trained[method], out)
            log.info("trained %s", method)
        for name, hist in pipe.histories.items():
            io.write_history_csv(hist, out / f"history_{name}.csv")
        for name, trace in pipe.traces.items():
            io.write_trace_csv(trace, out / f"trace_{name}.csv")
        (out / "run.json").write_text(json.dumps(
            {"config": cfg.to_dict(), "seed": args.seed, "data": args.data, "methods": manifest},
            sort_keys=True, indent=1))
        rows = _eval_rows(trained, cfg, ds, draws, args.seed)
    (out / "metrics.csv").write_text(harness.rows_to_csv(rows))
    _print_pooled(rows)
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    meta = json.loads((run / "run.json").read_text())
    cfg = ExperimentConfig.from_mapping(meta["config"])
    seed = meta["seed"]
    with threadpool_limits(1):
        full = io.load_dataset(meta["data"])[0] if meta["data"] else None
        ds, draws = harness.prepare_data(cfg, seed, full)
        methods = {m: _load_method(m, e, run) for m, e in meta["methods"].items()}
        rows = _eval_rows(methods, cfg, ds, draws, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(harness.rows_to_csv(rows))
    _print_pooled(rows)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    spec = harness.SweepSpec(
        axis=args.axis,
        values=tuple(float(v) for v in args.values.split(",")),
        repeats=args.repeats,
        methods=tuple(args.methods.split(",")),
        optimizers=tuple(args.optimizers.split(",")),
    )
    res = harness.run_sweep(spec, cfg, seed=args.seed, workers=args.workers, out_dir=args.out)
    errors = [r for r in res.rows if r.error]
    for r in errors[:5]:
        log.warning("error in %s/%s value=%s: %s", r.optimizer, r.method, r.value, r.error)
    log.info("wrote %d metric rows to %s", len(res.rows), Path(args.out) / "metrics.csv")
    return 1 if errors else 0


def cmd_report(args) -> int:
    written = write_report([Path(s) for s in args.sweep], Path(args.out))
    for p in written:
        log.info("wrote %s", p)
    return 0


def _print_pooled(rows) -> None:
    for r in rows:
        if r.client_id == harness.POOLED:
            print(f"{r.optimizer:8s} {r.method:14s} acc={r.accuracy:.4f} top3={r.top3_accuracy:.4f} "
                  f"epochs={r.local_epochs}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beamfed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train every method once and save checkpoints")
    _common(p)
    p.add_argument("--data", help="dataset written by 'gen' (default: generate from the config)")
    p.add_argument("--optimizer", choices=harness.OPTIMIZERS)
    p.add_argument("--methods", default=",".join(harness.METHODS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate the checkpoints of a 'train' run")
    p.add_argument("--run", required=True, help="output directory of 'train'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep one axis over values, optimizers and methods")
    _common(p)
    p.add_argument("--axis", choices=sorted(harness.AXES), required=True)
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--methods", default=",".join(harness.METHODS))
    p.add_argument("--optimizers", default=",".join(harness.OPTIMIZERS))
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="turn sweep CSVs into per-figure data files")
    p.add_argument("--sweep", required=True, action="append",
                   help="sweep output directory (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
