"""Command-line experiment runner.

Subcommands: gen, transform, reid, probe, attack, dp, bench, sweep, report.
Options come from a JSON config file (--config) and/or flags; flags win.
Keys are taken from --key, the KNT_KEY environment variable, or derived from
integer key seeds, and are never echoed anywhere except as fingerprints.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import GradAttackConfig
from .baselines import DpConfig
from .experiments import (
    METHODS,
    DefenseSpec,
    apply_defense,
    resolve_key,
    run_attack,
    run_bench,
    run_probe,
    run_reid,
    run_sweep,
)
from .io_store import (
    ATTACK_CSV_COLUMNS,
    METRICS_CSV_COLUMNS,
    load_dataset,
    save_dataset,
    write_json,
    write_report,
)
from .keying import MasterKey
from .metrics import SIMILARITY_MODES
from .probe import ProbeTrainConfig
from .synthdata import Dataset, SynthConfig, generate, split_patient_disjoint


class UsageError(Exception):
    """Bad config/flag combination; exits with code 2."""


def _ints(text: str) -> list[int]:
    return [int(part) for part in str(text).split(",") if part.strip()]


def _dims(text: str) -> list[int | None]:
    # "none" (or "c") in a dim grid means: keep the input channel count
    out: list[int | None] = []
    for part in str(text).split(","):
        part = part.strip().lower()
        if not part:
            continue
        out.append(None if part in ("none", "c") else int(part))
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve_explicit_key(merged: dict) -> MasterKey | None:
    hex_key = merged.get("key") or os.environ.get("KNT_KEY")
    if hex_key:
        return MasterKey.from_hex(hex_key)
    return None


def _redacted(merged: dict, key: MasterKey | None) -> dict:
    echo = {k: v for k, v in merged.items() if k != "key"}
    if merged.get("key") or os.environ.get("KNT_KEY"):
        echo["key_fingerprint"] = (key or _resolve_explicit_key(merged)).fingerprint()
    return echo


def _provenance(out_dir, command: str, merged: dict, started: float,
                key: MasterKey | None = None, extra: dict | None = None) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "config": _redacted(merged, key),
        "elapsed_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        payload.update(extra)
    write_json(Path(out_dir) / "provenance.json", payload)


def _dataset_splits(dataset: Dataset, need_train: bool,
                    where: str) -> tuple[Dataset, Dataset]:
    if dataset.split is None:
        if need_train:
            raise UsageError(
                f"{where} needs a train/test split; regenerate with "
                "`knt gen --train-fraction ...` or supply a tagged manifest"
            )
        return dataset, dataset
    tags = np.asarray(dataset.split)
    train = dataset.subset(np.flatnonzero(tags == "train"), tag="train")
    test = dataset.subset(np.flatnonzero(tags == "test"), tag="test")
    if need_train and (len(train) == 0 or len(test) == 0):
        raise UsageError(f"{where}: split tags present but one side is empty")
    return train, test


def _spec_from(merged: dict, channels: int | None = None) -> DefenseSpec:
    method = merged["method"]
    if method not in METHODS:
        raise UsageError(f"config field 'method': unknown value {method!r}")
    dp = None
    if method == "dp":
        try:
            dp = DpConfig(
                epsilon=float(merged["epsilon"]),
                delta=float(merged["delta"]),
                clip_quantile=float(merged["clip_quantile"]),
            )
        except (TypeError, ValueError) as exc:
            raise UsageError(f"config field 'epsilon/delta/clip_quantile': {exc}")
    d = merged.get("d")
    return DefenseSpec(
        method=method,
        d=int(d) if d is not None else None,
        layers=int(merged.get("L", 2)),
        sigma=float(merged.get("sigma", 3.0)),
        dp=dp,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

GEN_DEFAULTS = dict(
    out=None, patients=200, samples_per_patient=3, h=7, w=7, c=64, labels=4,
    identity_strength=None, label_strength=None, noise_std=None,
    label_prior=None, seed=0, train_fraction=0.5, split_seed=0,
)


def cmd_gen(merged: dict) -> int:
    if not merged["out"]:
        raise UsageError("config field 'out': an output directory is required")
    kwargs = dict(
        num_patients=int(merged["patients"]),
        samples_per_patient=int(merged["samples_per_patient"]),
        h=int(merged["h"]), w=int(merged["w"]), c=int(merged["c"]),
        num_labels=int(merged["labels"]),
        seed=int(merged["seed"]),
    )
    for flag, field in (("identity_strength", "identity_strength"),
                        ("label_strength", "label_strength"),
                        ("noise_std", "noise_std"),
                        ("label_prior", "label_prior")):
        if merged[flag] is not None:
            kwargs[field] = float(merged[flag])
    cfg = SynthConfig(**kwargs)
    started = time.perf_counter()
    dataset = generate(cfg)
    if merged["train_fraction"]:
        train, test = split_patient_disjoint(
            dataset, float(merged["train_fraction"]), int(merged["split_seed"])
        )
        tags = {sid: "train" for sid in train.sample_ids}
        tags.update({sid: "test" for sid in test.sample_ids})
        dataset.split = [tags[sid] for sid in dataset.sample_ids]
    out = save_dataset(merged["out"], dataset)
    _provenance(out, "gen", merged, started,
                extra={"n_samples": len(dataset),
                       "tensor_sha256": _sha256(out / "features.kntf")})
    print(f"wrote {len(dataset)} samples "
          f"({cfg.num_patients} patients x {cfg.samples_per_patient}) to {out}")
    return 0


TRANSFORM_DEFAULTS = dict(
    out=None, **{"in": None}, method="knt", d=None, L=2, sigma=3.0,
    epsilon=8.0, delta=1e-5, clip_quantile=0.95, key=None, key_seed=0,
    seed=0, threads=1,
)


def cmd_transform(merged: dict) -> int:
    if not merged["in"] or not merged["out"]:
        raise UsageError("config fields 'in'/'out': input and output dirs required")
    dataset = load_dataset(merged["in"])
    spec = _spec_from(merged)
    key = _resolve_explicit_key(merged)
    if key is None and spec.method != "dp":
        try:
            key = resolve_key(spec.method, None, int(merged["key_seed"]))
        except ValueError:
            key = None
    train_features = None
    if spec.method == "dp":
        train, _ = _dataset_splits(dataset, need_train=True, where="dp transform")
        train_features = train.features
    started = time.perf_counter()
    defended, info = apply_defense(
        dataset.features, spec, key=key, seed=int(merged["seed"]),
        train_features=train_features, threads=int(merged["threads"]),
    )
    out_dir = save_dataset(merged["out"], dataset.with_features(defended))
    _provenance(out_dir, "transform", merged, started, key=key,
                extra={"defense": info,
                       "tensor_sha256": _sha256(out_dir / "features.kntf")})
    print(f"transformed {len(dataset)} samples with {spec.method} -> {out_dir}")
    print(f"tensor sha256: {_sha256(out_dir / 'features.kntf')}")
    return 0


REID_DEFAULTS = dict(
    **{"in": None}, out=None, method="knt", d=None, L=2, sigma=3.0,
    epsilon=8.0, delta=1e-5, clip_quantile=0.95, key=None, seeds="0,1,2",
    eval_seed=0, mode="pooled", n_same=500, n_diff=500, threads=1,
)


def cmd_reid(merged: dict) -> int:
    if not merged["in"] or not merged["out"]:
        raise UsageError("config fields 'in'/'out': input and output dirs required")
    if merged["mode"] not in SIMILARITY_MODES:
        raise UsageError(f"config field 'mode': pick from {SIMILARITY_MODES}")
    dataset = load_dataset(merged["in"])
    spec = _spec_from(merged)
    # Verification needs no training, so it scores the whole dataset; only
    # the dp clip norm is fitted, on the train side.
    train, _ = _dataset_splits(dataset, need_train=spec.method == "dp",
                               where="reid")
    started = time.perf_counter()
    reports = run_reid(
        dataset, spec,
        key_seeds=_ints(merged["seeds"]),
        eval_seed=int(merged["eval_seed"]),
        mode=merged["mode"],
        n_same=int(merged["n_same"]), n_diff=int(merged["n_diff"]),
        train_features=train.features if spec.method == "dp" else None,
        threads=int(merged["threads"]),
        key=_resolve_explicit_key(merged),
    )
    out = Path(merged["out"])
    for i, report in enumerate(reports):
        write_report(out / f"report_{i}.json", report, out / "results.csv",
                     experiment_id="reid")
    _provenance(out, "reid", merged, started)
    aucs = [r.verification_auc for r in reports]
    print(f"{spec.method}: verification AUC "
          f"{np.mean(aucs):.3f} +/- {np.std(aucs):.3f} over {len(aucs)} seed(s); "
          f"top-1 {np.mean([r.top1 for r in reports]):.3f}")
    return 0


PROBE_DEFAULTS = dict(
    **{"in": None}, out=None, method="knt", d=None, L=2, sigma=3.0,
    epsilon=8.0, delta=1e-5, clip_quantile=0.95, key=None, seeds="0,1,2",
    epochs=100, learning_rate=1e-3, probe_seed=0, threads=1,
)


def cmd_probe(merged: dict) -> int:
    if not merged["in"] or not merged["out"]:
        raise UsageError("config fields 'in'/'out': input and output dirs required")
    dataset = load_dataset(merged["in"])
    train, test = _dataset_splits(dataset, need_train=True, where="probe")
    spec = _spec_from(merged)
    probe_cfg = ProbeTrainConfig(
        epochs=int(merged["epochs"]),
        learning_rate=float(merged["learning_rate"]),
        seed=int(merged["probe_seed"]),
    )
    started = time.perf_counter()
    reports = run_probe(
        train, test, spec, key_seeds=_ints(merged["seeds"]),
        probe_cfg=probe_cfg, threads=int(merged["threads"]),
        key=_resolve_explicit_key(merged),
    )
    out = Path(merged["out"])
    for i, report in enumerate(reports):
        write_report(out / f"report_{i}.json", report, out / "results.csv",
                     experiment_id="probe")
    _provenance(out, "probe", merged, started)
    aucs = [r.classification_auc for r in reports]
    print(f"{spec.method}: classification AUC "
          f"{np.mean(aucs):.3f} +/- {np.std(aucs):.3f} over {len(aucs)} seed(s)")
    return 0


ATTACK_DEFAULTS = dict(
    **{"in": None}, out=None, attack="grad", d=None, L=2, linear=None,
    seeds="0,1,2", steps=2000, restarts=5, ridge=1e-4, learning_rate=0.05,
    init_scale=1.0, samples=None, seed=0, threads=1,
)


def cmd_attack(merged: dict) -> int:
    if not merged["in"] or not merged["out"]:
        raise UsageError("config fields 'in'/'out': input and output dirs required")
    if merged["attack"] not in ("pinv", "grad"):
        raise UsageError("config field 'attack': pick 'pinv' or 'grad'")
    dataset = load_dataset(merged["in"])
    _, test = _dataset_splits(dataset, need_train=False, where="attack")
    grad_cfg = GradAttackConfig(
        steps=int(merged["steps"]), restarts=int(merged["restarts"]),
        ridge=float(merged["ridge"]),
        learning_rate=float(merged["learning_rate"]),
        init_scale=float(merged["init_scale"]),
    )
    started = time.perf_counter()
    d = merged.get("d")
    reports = run_attack(
        test, merged["attack"],
        key_seeds=_ints(merged["seeds"]),
        d=int(d) if d is not None else None,
        layers=int(merged["L"]),
        nonlinear=not bool(merged["linear"]),
        grad_cfg=grad_cfg,
        n_samples=int(merged["samples"]) if merged["samples"] else None,
        seed=int(merged["seed"]),
        threads=int(merged["threads"]),
    )
    out = Path(merged["out"])
    for i, report in enumerate(reports):
        write_report(out / f"attack_{i}.json", report, out / "results.csv",
                     experiment_id="attack")
    cosines = [r.mean_cosine for r in reports]
    summary = {
        "attack": reports[0].attack,
        "mean_cosine": float(np.mean(cosines)),
        "std_over_seeds": float(np.std(cosines)),
        "top1_mean": float(np.mean([r.top1 for r in reports])),
        "wall_time_per_sample_s": float(np.mean(
            [r.wall_time_per_sample for r in reports])),
    }
    write_json(out / "summary.json", summary)
    _provenance(out, "attack", merged, started)
    print(f"{summary['attack']}: cosine {summary['mean_cosine']:.3f} "
          f"+/- {summary['std_over_seeds']:.3f}, top-1 {summary['top1_mean']:.3f}, "
          f"{summary['wall_time_per_sample_s']:.3f} s/sample")
    return 0


DP_DEFAULTS = dict(
    **{"in": None}, out=None, epsilon=8.0, delta=1e-5, clip_quantile=0.95,
    seeds="0,1,2", eval_seed=0, mode="pooled", n_same=500, n_diff=500,
    epochs=100, learning_rate=1e-3, probe_seed=0, threads=1,
)


def cmd_dp(merged: dict) -> int:
    merged = dict(merged)
    merged["method"] = "dp"
    merged["d"] = None
    merged["L"] = 0
    merged["sigma"] = 3.0
    if not merged["in"] or not merged["out"]:
        raise UsageError("config fields 'in'/'out': input and output dirs required")
    dataset = load_dataset(merged["in"])
    train, test = _dataset_splits(dataset, need_train=True, where="dp")
    spec = _spec_from(merged)
    started = time.perf_counter()
    reid_reports = run_reid(
        test, spec, key_seeds=_ints(merged["seeds"]),
        eval_seed=int(merged["eval_seed"]), mode=merged["mode"],
        n_same=int(merged["n_same"]), n_diff=int(merged["n_diff"]),
        train_features=train.features, threads=int(merged["threads"]),
    )
    probe_reports = run_probe(
        train, test, spec, key_seeds=_ints(merged["seeds"]),
        probe_cfg=ProbeTrainConfig(
            epochs=int(merged["epochs"]),
            learning_rate=float(merged["learning_rate"]),
            seed=int(merged["probe_seed"]),
        ),
        threads=int(merged["threads"]),
    )
    out = Path(merged["out"])
    for i, report in enumerate(reid_reports):
        report.extra.update(probe_reports[i].extra)
        report.classification_auc = probe_reports[i].classification_auc
        write_report(out / f"report_{i}.json", report, out / "results.csv",
                     experiment_id="dp")
    _provenance(out, "dp", merged, started)
    dp_info = reid_reports[0].extra.get("dp", {})
    print(f"dp (epsilon={merged['epsilon']}): sigma {dp_info.get('sigma', 0):.1f}, "
          f"clip {dp_info.get('clip_norm', 0):.1f}, "
          f"verif AUC {np.mean([r.verification_auc for r in reid_reports]):.3f}, "
          f"cls AUC {np.mean([r.classification_auc for r in reid_reports]):.3f}")
    if dp_info.get("epsilon_above_classical_range"):
        print("note: epsilon > 1 is outside the classical Gaussian-mechanism "
              "guarantee; sigma uses the same formula and is flagged in reports")
    return 0


BENCH_DEFAULTS = dict(
    out=None, h=7, w=7, c=512, d=None, L=2, reps=1000, key_seed=0,
)

#: Published single-core reference point for the same transform shape.
REFERENCE_LATENCY_MS = 0.15


def cmd_bench(merged: dict) -> int:
    started = time.perf_counter()
    d = merged.get("d")
    result = run_bench(
        h=int(merged["h"]), w=int(merged["w"]), c=int(merged["c"]),
        d=int(d) if d is not None else None,
        layers=int(merged["L"]), reps=int(merged["reps"]),
        key_seed=int(merged["key_seed"]),
    )
    result["reference_ms"] = REFERENCE_LATENCY_MS
    print(f"transform {result['h']}x{result['w']}x{result['c']} -> d={result['d']}, "
          f"L={result['L']}: median {result['median_ms']:.3f} ms "
          f"(p90 {result['p90_ms']:.3f} ms, single-threaded="
          f"{result['single_threaded']}; reference {REFERENCE_LATENCY_MS} ms)")
    if merged["out"]:
        out = Path(merged["out"])
        write_json(out / "bench.json", result)
        _provenance(out, "bench", merged, started)
    return 0


SWEEP_DEFAULTS = dict(
    **{"in": None}, out=None, L_grid="1,2,3,4", d_grid="none",
    seeds="0,1,2", eval_seed=0, mode="pooled", n_same=500, n_diff=500,
    epochs=100, learning_rate=1e-3, probe_seed=0, threads=1,
)


def cmd_sweep(merged: dict) -> int:
    if not merged["in"] or not merged["out"]:
        raise UsageError("config fields 'in'/'out': input and output dirs required")
    dataset = load_dataset(merged["in"])
    train, test = _dataset_splits(dataset, need_train=True, where="sweep")
    started = time.perf_counter()
    rows = run_sweep(
        train, test,
        layer_grid=_ints(merged["L_grid"]),
        dim_grid=_dims(merged["d_grid"]),
        key_seeds=_ints(merged["seeds"]),
        eval_seed=int(merged["eval_seed"]),
        mode=merged["mode"],
        n_same=int(merged["n_same"]), n_diff=int(merged["n_diff"]),
        probe_cfg=ProbeTrainConfig(
            epochs=int(merged["epochs"]),
            learning_rate=float(merged["learning_rate"]),
            seed=int(merged["probe_seed"]),
        ),
        threads=int(merged["threads"]),
        verification_dataset=dataset,
    )
    out = Path(merged["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w") as fh:
        cols = list(rows[0].keys())
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    write_json(out / "sweep.json", rows)
    _provenance(out, "sweep", merged, started)
    for row in rows:
        print(f"L={row['L']} d={row['d']}: verif {row['verif_auc_mean']:.3f} "
              f"+/- {row['verif_auc_std']:.3f}, cls {row['cls_auc_mean']:.3f}")
    return 0


REPORT_DEFAULTS = dict(csv=None, out=None)


def cmd_report(merged: dict) -> int:
    if not merged["csv"]:
        raise UsageError("config field 'csv': a results.csv path is required")
    import csv as _csv

    with open(merged["csv"]) as fh:
        rows = list(_csv.DictReader(fh))
    if not rows:
        raise UsageError(f"no rows in {merged['csv']}")
    groups: dict = {}
    for row in rows:
        key = (row.get("method") or row.get("attack"),
               row.get("d"), row.get("L"))
        groups.setdefault(key, []).append(row)

    def fmt(values):
        vals = [float(v) for v in values if v not in ("", None)]
        if not vals:
            return "-"
        if len(vals) == 1:
            return f"{vals[0]:.3f}"
        return f"{np.mean(vals):.3f} +/- {np.std(vals):.3f}"

    metric_cols = [c for c in ("verif_auc", "top1", "cls_auc", "mean_cosine")
                   if any(r.get(c) for r in rows)]
    lines = ["| method | d | L | " + " | ".join(metric_cols) + " |",
             "|" + "---|" * (3 + len(metric_cols))]
    for (method, d, L), group in sorted(groups.items()):
        cells = [fmt([r.get(c, "") for r in group]) for c in metric_cols]
        lines.append(f"| {method} | {d} | {L} | " + " | ".join(cells) + " |")
    table = "\n".join(lines)
    print(table)
    if merged["out"]:
        Path(merged["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(merged["out"]).write_text(table + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen": (cmd_gen, GEN_DEFAULTS),
    "transform": (cmd_transform, TRANSFORM_DEFAULTS),
    "reid": (cmd_reid, REID_DEFAULTS),
    "probe": (cmd_probe, PROBE_DEFAULTS),
    "attack": (cmd_attack, ATTACK_DEFAULTS),
    "dp": (cmd_dp, DP_DEFAULTS),
    "bench": (cmd_bench, BENCH_DEFAULTS),
    "sweep": (cmd_sweep, SWEEP_DEFAULTS),
    "report": (cmd_report, REPORT_DEFAULTS),
}


def _add_flags(sub: argparse.ArgumentParser, defaults: dict) -> None:
    sub.add_argument("--config", help="JSON config file; flags override it")
    for name in defaults:
        flag = "--" + name.replace("_", "-")
        if name == "linear":
            sub.add_argument(flag, action="store_const", const=True,
                             default=None, help="attack the no-ReLU ablation")
        else:
            sub.add_argument(flag, default=None, help=argparse.SUPPRESS)


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    merged = dict(defaults)
    values = vars(args)
    if values.get("config"):
        with open(values["config"]) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for field, value in file_cfg.items():
            if field not in defaults:
                raise UsageError(f"config field {field!r}: unknown for this command")
            merged[field] = value
    for field in defaults:
        if values.get(field) is not None:
            merged[field] = values[field]
    return merged


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knt",
        description="Keyed feature obfuscation for split inference: "
                    "defenses, re-identification metrics, attacks, baselines.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    for name, (_, defaults) in _COMMANDS.items():
        sub = subs.add_parser(name)
        _add_flags(sub, defaults)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func, defaults = _COMMANDS[args.command]
    try:
        merged = _merge(args, defaults)
        return func(merged)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
