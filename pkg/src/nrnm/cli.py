"""Command-line harness: train, gradcheck, ablate, export-traces.

Configuration is layered: built-in defaults, then an INI-style config file
(sections [task]/[model]/[train]/[run]), then individual ``--flag value``
overrides. Every run directory receives a ``manifest.ini`` holding the
fully resolved configuration; re-running with that manifest reproduces the
metrics byte-for-byte apart from wall-time columns.

Exit codes: 0 success, 1 failed verification (gradcheck), 2 configuration
error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import configparser
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from .baselines import BaselineClassifier, BaselineKind
from .errors import ConfigError, DivergenceError, ParseError
from .gradcheck import check_gradients
from .memory import NrnmConfig
from .model import ModelConfig, SequenceClassifier, loss_from_logits
from .tasks import TaskSpec, generate_splits, load_external
from .training import Dataset, TrainConfig, evaluate, train

VERSION_STRING = f"nrnm-{__version__}"
MODEL_KINDS = ("lstm", "rnn", "gru", "horder", "nrnm")
ABLATION_AXES = {
    "block_k": "k",
    "window_win": "win",
    "inject_layer": "inject_layer",
    "stride_s": "s",
}

# section -> key -> (type, default); None defaults resolve later
SCHEMA = {
    "task": {
        "task": (str, "copy_memory"),
        "T": (int, 60),
        "D": (int, 0),
        "K": (int, 8),
        "G": (int, 40),
        "n_train": (int, 512),
        "n_val": (int, 256),
        "n_test": (int, 256),
        "motif_len": (int, 6),
        "path": (str, ""),
        "seed": (int, None),
    },
    "model": {
        "kind": (str, "nrnm"),
        "depth": (int, 3),
        "hidden": (int, 32),
        "k": (int, 8),
        "s": (int, 1),
        "win": (int, 4),
        "m": (int, 0),
        "heads": (int, 4),
        "inject_layer": (int, 1),
        "per_head_scale": (bool, False),
        "order": (int, 3),
        "dropout": (float, 0.5),
        "precision": (str, "f64"),
        "seed": (int, None),
    },
    "train": {
        "optimizer": (str, "adam"),
        "lr": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "clip_norm": (float, 5.0),
        "epochs": (int, 20),
        "batch_size": (int, 32),
        "eval_every": (int, 1),
        "seed": (int, None),
    },
    "run": {
        "seed": (int, 0),
        "out": (str, ""),
    },
}

# flag name -> (section, key)
FLAG_MAP = {
    "task": ("task", "task"),
    "T": ("task", "T"),
    "D": ("task", "D"),
    "K": ("task", "K"),
    "G": ("task", "G"),
    "n_train": ("task", "n_train"),
    "n_val": ("task", "n_val"),
    "n_test": ("task", "n_test"),
    "motif_len": ("task", "motif_len"),
    "data": ("task", "path"),
    "model": ("model", "kind"),
    "depth": ("model", "depth"),
    "hidden": ("model", "hidden"),
    "k": ("model", "k"),
    "s": ("model", "s"),
    "win": ("model", "win"),
    "m": ("model", "m"),
    "heads": ("model", "heads"),
    "inject_layer": ("model", "inject_layer"),
    "per_head_scale": ("model", "per_head_scale"),
    "order": ("model", "order"),
    "dropout": ("model", "dropout"),
    "precision": ("model", "precision"),
    "optimizer": ("train", "optimizer"),
    "lr": ("train", "lr"),
    "epochs": ("train", "epochs"),
    "batch": ("train", "batch_size"),
    "clip": ("train", "clip_norm"),
    "eval_every": ("train", "eval_every"),
    "seed": ("run", "seed"),
    "out": ("run", "out"),
}


def _coerce(section: str, key: str, raw, kind):
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            lowered = str(raw).strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{section}] {key}: {err}") from None


def resolve_config(config_path: str | None, overrides: dict) -> dict:
    """Defaults <- config file <- CLI flags, all coerced and validated."""
    resolved = {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in SCHEMA.items()
    }
    if config_path:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case: T and K are meaningful
        read = parser.read(config_path)
        if not read:
            raise ConfigError(f"config file not found: {config_path}")
        for section in parser.sections():
            if section == "meta":  # manifest provenance, not configuration
                continue
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config field [{section}] {key}")
                kind, _ = SCHEMA[section][key]
                resolved[section][key] = _coerce(section, key, raw, kind)
    for flag, value in overrides.items():
        if value is None:
            continue
        section, key = FLAG_MAP[flag]
        kind, _ = SCHEMA[section][key]
        resolved[section][key] = _coerce(section, key, value, kind)
    base_seed = resolved["run"]["seed"]
    for section in ("task", "model", "train"):
        if resolved[section]["seed"] is None:
            resolved[section]["seed"] = base_seed
    if resolved["model"]["m"] == 0:
        resolved["model"]["m"] = resolved["model"]["hidden"]
    if resolved["model"]["kind"] not in MODEL_KINDS:
        raise ConfigError(
            f"[model] kind: {resolved['model']['kind']!r} not in {MODEL_KINDS}"
        )
    return resolved


def write_manifest(path, resolved: dict, command: str) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, keys in resolved.items():
        parser[section] = {}
        for key, value in keys.items():
            parser[section][key] = str(value)
    parser["meta"] = {"command": command, "version": VERSION_STRING}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)


def build_task_spec(cfg: dict) -> TaskSpec:
    t = cfg["task"]
    return TaskSpec(
        task=t["task"],
        T=t["T"],
        D=t["D"],
        K=t["K"],
        G=t["G"],
        n_train=t["n_train"],
        n_val=t["n_val"],
        n_test=t["n_test"],
        seed=t["seed"],
        motif_len=t["motif_len"],
        path=t["path"],
    )


def load_datasets(cfg: dict) -> dict[str, Dataset]:
    spec = build_task_spec(cfg)
    if spec.task in ("csv", "jsonl"):
        data = load_external(spec.path, spec.task)
        return {"train": data, "val": data, "test": data}
    return generate_splits(spec)


def data_dims(cfg: dict, splits: dict[str, Dataset]) -> tuple[int, int]:
    spec = build_task_spec(cfg)
    if spec.task in ("csv", "jsonl"):
        data = splits["train"]
        if len(data) == 0:
            raise ConfigError(f"[task] path: no sequences in {spec.path}")
        return data.x.shape[2], int(data.labels.max()) + 1
    return spec.feature_dim(), spec.K


def model_meta(cfg: dict, input_dim: int, n_classes: int) -> dict:
    m = cfg["model"]
    meta = {
        "kind": m["kind"],
        "depth": m["depth"],
        "d_h": m["hidden"],
        "input_dim": input_dim,
        "n_classes": n_classes,
        "dropout": m["dropout"],
        "precision": m["precision"],
        "seed": m["seed"],
        "order": m["order"],
        "version": VERSION_STRING,
    }
    if m["kind"] == "nrnm":
        meta["nrnm"] = {
            "k": m["k"],
            "s": m["s"],
            "win": m["win"],
            "m": m["m"],
            "heads": m["heads"],
            "inject_layer": m["inject_layer"],
            "per_head_scale": m["per_head_scale"],
        }
    return meta


def build_model_from_meta(meta: dict):
    nrnm_cfg = NrnmConfig(**meta["nrnm"]) if meta.get("nrnm") else None
    model_cfg = ModelConfig(
        depth=meta["depth"],
        d_h=meta["d_h"],
        input_dim=meta["input_dim"],
        n_classes=meta["n_classes"],
        nrnm=nrnm_cfg,
        dropout=meta["dropout"],
        precision=meta["precision"],
        seed=meta["seed"],
    )
    kind = meta["kind"]
    if kind in ("lstm", "nrnm"):
        return SequenceClassifier(model_cfg)
    baseline = {
        "rnn": "vanilla_rnn",
        "gru": "gru",
        "horder": "high_order_rnn",
    }[kind]
    return BaselineClassifier(model_cfg, BaselineKind(baseline, order=meta["order"]))


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    clip = t["clip_norm"]
    return TrainConfig(
        optimizer=t["optimizer"],
        lr=t["lr"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        eps=t["eps"],
        clip_norm=None if clip <= 0 else clip,
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        eval_every=t["eval_every"],
        seed=t["seed"],
    )


# ---------------------------------------------------------------------------
# commands


def run_train(cfg: dict, out_dir: Path) -> dict:
    splits = load_datasets(cfg)
    input_dim, n_classes = data_dims(cfg, splits)
    meta = model_meta(cfg, input_dim, n_classes)
    model = build_model_from_meta(meta)
    write_manifest(out_dir / "manifest.ini", cfg, "train")
    result = train(
        model,
        build_train_config(cfg),
        splits["train"],
        val_set=splits["val"],
        out_dir=out_dir,
        checkpoint_meta=meta,
    )
    test_loss, test_acc = evaluate(model, splits["test"], cfg["train"]["batch_size"])
    summary = {
        "best_val_accuracy": result.best_accuracy,
        "best_epoch": result.best_epoch,
        "final_test_loss": test_loss,
        "final_test_accuracy": test_acc,
        "epochs": cfg["train"]["epochs"],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def run_gradcheck(cfg: dict, tolerance: float = 1e-4) -> tuple[dict, bool]:
    """Finite-difference verification of the configured model, forced f64."""
    cfg = {section: dict(keys) for section, keys in cfg.items()}
    cfg["model"]["precision"] = "f64"
    splits = load_datasets(cfg)
    input_dim, n_classes = data_dims(cfg, splits)
    model = build_model_from_meta(model_meta(cfg, input_dim, n_classes))
    probe = splits["train"].batch(np.arange(min(2, len(splits["train"]))))

    def builder():
        return loss_from_logits(model.forward(probe).logits, probe.labels)

    report = check_gradients(builder, sorted(model.named_parameters().items()))
    return report, all(err < tolerance for err in report.values())


def run_ablation(cfg: dict, axis: str, values: list[int], sweep_seeds: int,
                 out_dir: Path) -> list[dict]:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"--axis must be one of {sorted(ABLATION_AXES)}")
    if cfg["model"]["kind"] != "nrnm":
        raise ConfigError("ablation sweeps run on the nrnm model")
    model_key = ABLATION_AXES[axis]
    rows = []
    for value in values:
        for seed_offset in range(sweep_seeds):
            point = {section: dict(keys) for section, keys in cfg.items()}
            point["model"][model_key] = value
            seed = cfg["run"]["seed"] + seed_offset
            point["model"]["seed"] = seed
            point["train"]["seed"] = seed
            run_dir = out_dir / f"{axis}_{value}_seed{seed}"
            try:
                summary = run_train(point, run_dir)
                accuracy = summary["final_test_accuracy"]
            except (ConfigError, DivergenceError) as err:
                print(f"[ablate] {axis}={value} seed={seed} failed: {err}",
                      file=sys.stderr)
                accuracy = float("nan")
            rows.append(
                {"axis": axis, "value": value, "seed": seed, "accuracy": accuracy}
            )
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w") as fh:
        fh.write("axis,value,seed,accuracy\n")
        for row in rows:
            fh.write(
                f"{row['axis']},{row['value']},{row['seed']},{row['accuracy']!r}\n"
            )
    with open(out_dir / "plot_data.csv", "w") as fh:
        fh.write("value,median_accuracy\n")
        for value in values:
            accs = [
                r["accuracy"] for r in rows
                if r["value"] == value and np.isfinite(r["accuracy"])
            ]
            median = statistics.median(accs) if accs else float("nan")
            fh.write(f"{value},{median!r}\n")
    return rows


def run_export_traces(checkpoint_path: str, cfg: dict, out_path: Path,
                      trace_seqs: int = 1) -> int:
    arrays, meta = ckpt.load_params(checkpoint_path)
    if not meta or "kind" not in meta:
        raise ConfigError(f"checkpoint {checkpoint_path} carries no model metadata")
    if meta["kind"] != "nrnm":
        raise ConfigError(f"traces need an nrnm checkpoint, got {meta['kind']!r}")
    model = build_model_from_meta(meta)
    ckpt.restore_into(model.named_parameters(), arrays)
    splits = load_datasets(cfg)
    probe_set = splits["test"] if len(splits["test"]) else splits["train"]
    if probe_set.x.shape[2] != meta["input_dim"]:
        raise ConfigError(
            f"probe data dim {probe_set.x.shape[2]} != checkpoint input_dim "
            f"{meta['input_dim']}"
        )
    n = min(trace_seqs, len(probe_set))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    records = 0
    with open(out_path, "w") as fh:
        header = {
            "type": "header",
            "schema": "nrnm-trace-v1",
            "T": int(probe_set.x.shape[1]),
            "seqs": n,
            **meta["nrnm"],
        }
        fh.write(json.dumps(header) + "\n")
        for i in range(n):
            batch = probe_set.batch(np.array([i]))
            result = model.forward(batch, collect_traces=True)
            for tr in result.traces:
                record = {
                    "type": "block",
                    "seq": i,
                    "step": tr["step"],
                    "layer": tr["layer"],
                    "heads": [w[0].ravel().tolist() for w in tr["heads"]],
                    "memory": tr["memory"][0].ravel().tolist(),
                }
                fh.write(json.dumps(record) + "\n")
                records += 1
    return records


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--task", choices=("copy_memory", "adding", "segment_order",
                                      "csv", "jsonl"))
    p.add_argument("--T", type=int)
    p.add_argument("--D", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--G", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--motif-len", dest="motif_len", type=int)
    p.add_argument("--data", help="path for csv/jsonl tasks")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--depth", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--s", type=int)
    p.add_argument("--win", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--inject-layer", dest="inject_layer", type=int)
    p.add_argument("--per-head-scale", dest="per_head_scale",
                   action="store_const", const=True)
    p.add_argument("--order", type=int, help="high-order RNN lag count")
    p.add_argument("--dropout", type=float)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--clip", type=float, help="gradient clip norm; <=0 disables")
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nrnm",
        description="Train and probe the non-local recurrent memory model",
    )
    parser.add_argument("--version", action="version", version=VERSION_STRING)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model, write a run directory")
    _add_config_flags(p_train)
    p_train.add_argument("--out", required=True, help="run directory")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_config_flags(p_grad)
    p_grad.add_argument("--out", help="optional directory for the report")
    p_grad.add_argument("--tolerance", type=float, default=1e-4)

    p_abl = sub.add_parser("ablate", help="sweep one memory axis over values")
    _add_config_flags(p_abl)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p_abl.add_argument("--values", required=True,
                       help="comma-separated integers, e.g. 4,6,8,10,12")
    p_abl.add_argument("--sweep-seeds", dest="sweep_seeds", type=int, default=3)

    p_tr = sub.add_parser("export-traces",
                          help="dump per-block attention/memory JSONL")
    _add_config_flags(p_tr)
    p_tr.add_argument("--checkpoint", required=True)
    p_tr.add_argument("--out", required=True, help="output JSONL path")
    p_tr.add_argument("--trace-seqs", dest="trace_seqs", type=int, default=1)
    return parser


def _overrides_from(args: argparse.Namespace) -> dict:
    return {flag: getattr(args, flag, None) for flag in FLAG_MAP if flag != "out"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = _overrides_from(args)
        if getattr(args, "out", None) is not None:
            overrides["out"] = args.out
        cfg = resolve_config(args.config, overrides)

        if args.command == "train":
            out_dir = Path(cfg["run"]["out"])
            summary = run_train(cfg, out_dir)
            print(
                f"run complete: best val acc {summary['best_val_accuracy']:.4f}, "
                f"test acc {summary['final_test_accuracy']:.4f} -> {out_dir}"
            )
            return 0

        if args.command == "gradcheck":
            report, ok = run_gradcheck(cfg, args.tolerance)
            width = max(len(name) for name in report)
            lines = [
                f"{name:<{width}}  {err: .3e}  "
                f"{'PASS' if err < args.tolerance else 'FAIL'}"
                for name, err in sorted(report.items())
            ]
            text = "\n".join(lines)
            print(text)
            verdict = "ALL PASS" if ok else "FAILED"
            print(f"gradcheck: {verdict} (tolerance {args.tolerance:g})")
            if cfg["run"]["out"]:
                out_dir = Path(cfg["run"]["out"])
                out_dir.mkdir(parents=True, exist_ok=True)
                (out_dir / "gradcheck.txt").write_text(text + "\n" + verdict + "\n")
            return 0 if ok else 1

        if args.command == "ablate":
            try:
                values = [int(v) for v in args.values.split(",") if v.strip()]
            except ValueError as err:
                raise ConfigError(f"--values: {err}") from None
            if not values:
                raise ConfigError("--values: need at least one integer")
            out_dir = Path(cfg["run"]["out"])
            rows = run_ablation(cfg, args.axis, values, args.sweep_seeds, out_dir)
            print(f"sweep complete: {len(rows)} runs -> {out_dir}/sweep.csv")
            return 0

        if args.command == "export-traces":
            records = run_export_traces(
                args.checkpoint, cfg, Path(args.out), args.trace_seqs
            )
            print(f"wrote {records} block records -> {args.out}")
            return 0

        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ParseError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except DivergenceError as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
