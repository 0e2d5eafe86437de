"""Command-line front end.

Subcommands:

* ``run``      execute one configured experiment and persist its artifacts
               (manifest, metrics CSV, assignment history JSON, and the
               K-selection table for the heuristic algorithm);
* ``sweep``    run the same config once per value of one hyperparameter;
* ``gen-data`` write a shard dump, either synthetic or by partitioning an
               IDX file pair.

Configs are TOML files with [run], [model], [data], and [hyperparameters]
sections; any scalar can be overridden with repeated ``--set key=value``
flags. Exit codes: 0 success, 2 configuration problem, 3 numerical failure
during training. All outputs stay inside the requested --out directory.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .data import (
    ClientShard,
    PartitionConfig,
    load_idx,
    load_shards,
    partition_noniid,
    save_shards,
    synth_contexts,
)
from .errors import ClassExhaustedError, ConfigError, IdxFormatError, NumericalError
from .models import ModelSpec
from .orchestrator import (
    ALGORITHMS,
    RunConfig,
    RunOutput,
    run,
    write_assignment_history,
    write_ek_table,
    write_metrics_csv,
)

_DEFAULTS: dict[str, dict] = {
    "run": {"algorithm": "cgpfl", "T": 200, "seed": 0, "eval_every": 1},
    "model": {
        "kind": "mlr",
        "input_dim": 784,
        "hidden_dim": 0,
        "num_classes": 10,
        "l2_coeff": 1e-4,
    },
    "data": {"source": "synthetic", "seed": None},
    "hyperparameters": {
        "N": 40,
        "K": 4,
        "R": 10,
        "S": 5,
        "lambda": 12.0,
        "eta": 0.005,
        "beta": None,
        "alpha": 1.0,
        "mu": 1.0,
        "batch_size": 32,
        "K_min": 1,
        "K_max": None,
        "weights": "data",
    },
}

SWEEPABLE = {
    "K": ("hyperparameters", "K"),
    "lambda": ("hyperparameters", "lambda"),
    "mu": ("hyperparameters", "mu"),
    "eta": ("hyperparameters", "eta"),
    "alpha": ("hyperparameters", "alpha"),
}


@dataclass
class RunManifest:
    config_snapshot: dict
    code_version: str = __version__
    started_at: str = ""
    finished_at: str | None = None
    output_paths: list[str] = field(default_factory=list)

    def write(self, path: Path) -> None:
        payload = {
            "config_snapshot": self.config_snapshot,
            "code_version": self.code_version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "output_paths": self.output_paths,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config parse error in {path}: {err}") from err
    config = copy.deepcopy(_DEFAULTS)
    for section, values in raw.items():
        if section not in config:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        config[section].update(values)
    return config


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply repeated --set key=value flags; bare keys are looked up across
    all sections, dotted keys (section.key) address one directly."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        value = _parse_value(text)
        if "." in key:
            section, name = key.split(".", 1)
            if section not in config:
                raise ConfigError(f"unknown section in override {item!r}")
            config[section][name] = value
            continue
        hits = [s for s, table in config.items() if key in table]
        if not hits:
            raise ConfigError(f"override key {key!r} not found in any section")
        if len(hits) > 1:
            raise ConfigError(
                f"override key {key!r} is ambiguous across sections {hits}; "
                "use section.key"
            )
        config[hits[0]][key] = value
    return config


def build_model_spec(config: dict) -> ModelSpec:
    m = config["model"]
    hidden = m["hidden_dim"]
    if m["kind"] == "mlp1" and not hidden:
        hidden = 128
    l2 = m["l2_coeff"] if m["kind"] == "mlr" else 0.0
    return ModelSpec(
        kind=m["kind"],
        input_dim=int(m["input_dim"]),
        num_classes=int(m["num_classes"]),
        hidden_dim=int(hidden),
        l2_coeff=float(l2),
    )


def build_run_config(config: dict) -> RunConfig:
    r, h = config["run"], config["hyperparameters"]
    if r["algorithm"] not in ALGORITHMS:
        raise ConfigError(
            f"run.algorithm must be one of {ALGORITHMS}, got {r['algorithm']!r}"
        )
    cfg = RunConfig(
        model=build_model_spec(config),
        algorithm=r["algorithm"],
        num_clients=int(h["N"]),
        K=int(h["K"]),
        T=int(r["T"]),
        R=int(h["R"]),
        S=int(h["S"]),
        lam=float(h["lambda"]),
        eta=float(h["eta"]),
        beta=None if h["beta"] is None else float(h["beta"]),
        alpha=float(h["alpha"]),
        mu=float(h["mu"]),
        batch_size=int(h["batch_size"]),
        seed=int(r["seed"]),
        eval_every=int(r["eval_every"]),
        K_min=int(h["K_min"]),
        K_max=None if h["K_max"] is None else int(h["K_max"]),
        weights=h["weights"],
    )
    cfg.validate()
    return cfg


def build_shards(config: dict, cfg: RunConfig) -> list[ClientShard]:
    d = config["data"]
    seed = cfg.seed if d.get("seed") is None else int(d["seed"])
    source = d.get("source")
    if source == "synthetic":
        shards = synth_contexts(
            num_contexts=int(d["num_contexts"]),
            clients_per_context=int(d["clients_per_context"]),
            input_dim=cfg.model.input_dim,
            num_classes=cfg.model.num_classes,
            samples_per_client=int(d["samples_per_client"]),
            separation=float(d["separation"]),
            seed=seed,
            class_spread=float(d.get("class_spread", 2.0)),
            noise=float(d.get("noise", 0.5)),
        )
    elif source == "idx":
        pool = load_idx(d["images"], d["labels"])
        pcfg = PartitionConfig(
            num_clients=cfg.num_clients,
            classes_per_client=int(d.get("classes_per_client", 3)),
            shard_size_min=int(d.get("shard_size_min", 400)),
            shard_size_max=int(d.get("shard_size_max", 5000)),
            train_fraction=float(d.get("train_fraction", 0.75)),
            seed=seed,
        )
        shards = partition_noniid(pool, pcfg)
    elif source == "shards":
        shards = load_shards(d["dir"])
    else:
        raise ConfigError(f"data.source must be synthetic, idx, or shards, got {source!r}")

    if len(shards) != cfg.num_clients:
        raise ConfigError(
            f"data source produced {len(shards)} shards but N={cfg.num_clients}"
        )
    sample = shards[0].train
    if sample.features.shape[1] != cfg.model.input_dim:
        raise ConfigError(
            f"data input_dim {sample.features.shape[1]} != model input_dim "
            f"{cfg.model.input_dim}"
        )
    if sample.num_classes != cfg.model.num_classes:
        raise ConfigError(
            f"data num_classes {sample.num_classes} != model num_classes "
            f"{cfg.model.num_classes}"
        )
    return shards


def execute_run(config: dict, out_dir: Path) -> RunOutput:
    """Run one experiment and persist every artifact under out_dir."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = build_run_config(config)
    shards = build_shards(config, cfg)

    manifest = RunManifest(config_snapshot=config, started_at=_utcnow())
    manifest_path = out_dir / "manifest.json"
    manifest.write(manifest_path)

    output = run(cfg, shards)

    metrics_path = out_dir / "metrics.csv"
    write_metrics_csv(output.metrics, metrics_path)
    history_path = out_dir / "assignment_history.json"
    write_assignment_history(output, history_path)
    manifest.output_paths = [metrics_path.name, history_path.name]
    if output.ek_table is not None:
        ek_path = out_dir / "ek_table.csv"
        write_ek_table(output.ek_table, ek_path)
        manifest.output_paths.append(ek_path.name)
        (out_dir / "selected_K.json").write_text(
            json.dumps({"selected_K": output.selected_K}) + "\n", encoding="utf-8"
        )
        manifest.output_paths.append("selected_K.json")
    manifest.finished_at = _utcnow()
    manifest.write(manifest_path)
    return output


def cmd_run(args) -> int:
    config = apply_overrides(load_config(args.config), args.set or [])
    execute_run(config, Path(args.out))
    return 0


def cmd_sweep(args) -> int:
    if args.param not in SWEEPABLE:
        raise ConfigError(
            f"sweep parameter must be one of {sorted(SWEEPABLE)}, got {args.param!r}"
        )
    values = [v for v in (args.values or "").split(",") if v]
    if not values:
        raise ConfigError("sweep needs a non-empty comma-separated --values list")
    base = apply_overrides(load_config(args.config), args.set or [])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    section, key = SWEEPABLE[args.param]
    rows = []
    failures = 0
    for text in values:
        value = _parse_value(text)
        config = copy.deepcopy(base)
        config[section][key] = value
        sub_dir = out_dir / f"{args.param}={text}"
        try:
            output = execute_run(config, sub_dir)
            final_acc = output.metrics[-1].mean_test_accuracy if output.metrics else ""
            rows.append((text, repr(final_acc) if final_acc != "" else ""))
        except (ConfigError, NumericalError, ClassExhaustedError, OSError) as err:
            failures += 1
            print(f"sweep value {args.param}={text} failed: {err}", file=sys.stderr)
            rows.append((text, ""))

    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["value", "final_mean_test_accuracy"])
        writer.writerows(rows)
    return 1 if failures else 0


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out)
    if args.kind == "synthetic":
        shards = synth_contexts(
            num_contexts=args.contexts,
            clients_per_context=args.clients_per_context,
            input_dim=args.input_dim,
            num_classes=args.classes,
            samples_per_client=args.samples_per_client,
            separation=args.separation,
            seed=args.seed,
        )
        extra = {
            "kind": "synthetic",
            "num_contexts": args.contexts,
            "clients_per_context": args.clients_per_context,
            "separation": args.separation,
            "seed": args.seed,
        }
    else:  # partition-idx
        pool = load_idx(args.images, args.labels)
        pcfg = PartitionConfig(
            num_clients=args.clients,
            classes_per_client=args.classes_per_client,
            shard_size_min=args.size_min,
            shard_size_max=args.size_max,
            train_fraction=args.train_fraction,
            seed=args.seed,
        )
        shards = partition_noniid(pool, pcfg)
        extra = {"kind": "partition-idx", "seed": args.seed}
    save_shards(shards, out_dir, extra=extra)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cgpfl",
        description="Deterministic personalized-federated-learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured experiment")
    p_run.add_argument("--config", required=True, help="TOML config file")
    p_run.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override a config value"
    )
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run once per value of one parameter")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--param", required=True, help="K, lambda, mu, eta, or alpha")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_sweep.add_argument("--out", required=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_gen = sub.add_parser("gen-data", help="write a shard dump")
    gen_sub = p_gen.add_subparsers(dest="kind", required=True)

    p_synth = gen_sub.add_parser("synthetic")
    p_synth.add_argument("--contexts", type=int, required=True)
    p_synth.add_argument("--clients-per-context", type=int, required=True)
    p_synth.add_argument("--input-dim", type=int, default=2)
    p_synth.add_argument("--classes", type=int, default=3)
    p_synth.add_argument("--samples-per-client", type=int, default=160)
    p_synth.add_argument("--separation", type=float, default=10.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_gen_data)

    p_idx = gen_sub.add_parser("partition-idx")
    p_idx.add_argument("--images", required=True)
    p_idx.add_argument("--labels", required=True)
    p_idx.add_argument("--clients", type=int, default=40)
    p_idx.add_argument("--classes-per-client", type=int, default=3)
    p_idx.add_argument("--size-min", type=int, default=400)
    p_idx.add_argument("--size-max", type=int, default=5000)
    p_idx.add_argument("--train-fraction", type=float, default=0.75)
    p_idx.add_argument("--seed", type=int, default=0)
    p_idx.add_argument("--out", required=True)
    p_idx.set_defaults(func=cmd_gen_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IdxFormatError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except ClassExhaustedError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
