"""Command-line entry point.

Subcommands: gen-data, run, sweep-order, sweep-clients, report.
Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import pathlib
import statistics
import sys

from . import datagen, harness
from .harness import ConfigurationError, ExperimentConfig
from .model_split import U_SHAPED, VANILLA


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=pathlib.Path, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--protocol", choices=["fl", "sl", "sfv1", "sfv2", "sfv3"], default=None)
    p.add_argument("--split", choices=["vanilla", "ushape"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--probe", type=int, default=None, help="probe client id")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (multi-seed mode)")
    p.add_argument("--out", type=pathlib.Path, default=pathlib.Path("out"))
    p.add_argument("--message-log", action="store_true",
                   help="dump the transport message log next to the results")


def _build_config(args) -> ExperimentConfig:
    file_values = harness.parse_config_file(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "protocol": args.protocol,
        "split_kind": {"vanilla": VANILLA, "ushape": U_SHAPED}.get(args.split),
        "epochs": args.epochs,
        "probe": args.probe,
    }
    return harness.config_from(file_values, overrides)


def _seed_range(base: int, n: int):
    return range(base, base + n)


def cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    manifest = datagen.desk_manifest(cfg.n_clients)
    clients = datagen.generate_clients(manifest, d=cfg.feature_dim,
                                       shift_scale=cfg.shift_scale, seed=cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    data_path = args.out / "clients.sds"
    datagen.save_clients(data_path, clients)
    datagen.save_manifest_text(args.out / "manifest.txt", manifest)
    print(f"wrote {data_path} ({cfg.n_clients} clients, seed {cfg.seed})")
    return 0


def cmd_run(args) -> int:
    cfg = _build_config(args)
    result = harness.run_experiment(cfg, keep_bus=args.message_log)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "result.json").write_text(result.to_json())
    (args.out / "result.manifest.txt").write_text(harness.render_manifest(result.config))
    if args.message_log and result.bus is not None:
        result.bus.dump_log(args.out / "messages.log")
    print(json.dumps(result.to_dict()["per_client"], indent=1))
    print(f"checkpoint epoch {result.checkpoint_epoch}, "
          f"{result.total_bytes} bytes on the wire, "
          f"{result.duration:.2f}s")
    return 0


def cmd_sweep_order(args) -> int:
    cfg = _build_config(args)
    for seed in _seed_range(cfg.seed, args.seeds):
        from dataclasses import replace
        cfg_s = replace(cfg, seed=seed)
        table = harness.sweep_order(cfg_s, probe_only=args.probe is not None)
        harness.emit_report(table, args.out, name=f"order_sweep_seed{seed}", config=cfg_s)
        print(harness.render_table(table), end="")
    return 0


def cmd_sweep_clients(args) -> int:
    cfg = _build_config(args)
    from dataclasses import replace
    per_seed_kappa = {}
    for seed in _seed_range(cfg.seed, args.seeds):
        cfg_s = replace(cfg, seed=seed)
        table = harness.sweep_client_count(cfg_s)
        harness.emit_report(table, args.out, name=f"client_sweep_seed{seed}", config=cfg_s)
        for key, drop in harness.trend_series(table):
            per_seed_kappa.setdefault(key, []).append(drop)
        print(harness.render_table(table), end="")
    if args.seeds > 1:
        lines = ["setting,median_kappa_drop"]
        for key, drops in per_seed_kappa.items():
            lines.append(f"{key},{statistics.median(drops):.2f}")
        (args.out / "client_sweep_trend.csv").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    return 0


def cmd_report(args) -> int:
    result = json.loads(pathlib.Path(args.result).read_text())
    print(f"protocol {result['protocol']} seed {result['seed']} "
          f"checkpoint epoch {result['checkpoint_epoch']}")
    print("client,auprc,f1,kappa,threshold")
    for cid, rep in sorted(result["per_client"].items(), key=lambda kv: int(kv[0])):
        print(f"{cid},{rep['auprc']:.4f},{rep['f1']:.4f},"
              f"{rep['kappa']:.4f},{rep['threshold']:.4f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="splitsim")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic client datasets")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run a single experiment")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-order", help="probe-first vs probe-last sweep")
    _add_common(p)
    p.set_defaults(func=cmd_sweep_order)

    p = sub.add_parser("sweep-clients", help="client-count sweep")
    _add_common(p)
    p.set_defaults(func=cmd_sweep_clients)

    p = sub.add_parser("report", help="re-render a stored run result")
    p.add_argument("result", type=pathlib.Path, help="result.json from a run")
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, datagen.ManifestError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
