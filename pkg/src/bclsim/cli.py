"""Command-line entry points: run, lsa, sweep, report.

``run`` executes one experiment from a TOML config and writes rounds.csv
plus summary.json; ``lsa`` does a one-shot backdoor-critical layer
identification and writes the report JSON; ``sweep`` iterates one config
axis; ``report`` merges summaries into an attack x defense matrix.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import run_lsa
from .config import (ExperimentConfig, atomic_write, load_config,
                     resolve_datasets, serialize_config)
from .data import build_poison_splits
from .federation import build_state, child_seed, run_experiment

__all__ = ["main"]


def _git_describe() -> str:
    try:
        root = Path(__file__).resolve().parents[2]
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], cwd=root,
            capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def _summary_payload(cfg: ExperimentConfig, summary, seed: int) -> dict:
    fl = cfg.fl
    return {
        "name": cfg.name,
        "seed": seed,
        "attack": fl.attack.method if fl.attack else "none",
        "defense": fl.defense.rule,
        "best_bsr": summary.best_bsr,
        "avg_bsr": summary.avg_bsr,
        "final_acc": summary.final_acc,
        "bar": summary.bar,
        "mar": summary.mar,
        "rounds": summary.rounds,
        "warmup": summary.warmup,
        "git_describe": _git_describe(),
        "config": serialize_config(cfg),
    }


def _write_rounds_csv(path, records) -> None:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["round", "acc", "bsr", "n_selected", "n_malicious",
                "n_accepted_benign", "n_accepted_malicious", "defense_diag"])
    for r in records:
        diag = {k: v for k, v in r.diagnostics.items() if k != "per_layer_accepted"}
        w.writerow([r.round_index, f"{r.acc:.6f}", f"{r.bsr:.6f}",
                    len(r.selected), len(r.malicious_selected),
                    r.n_accepted_benign, r.n_accepted_malicious,
                    json.dumps(diag, sort_keys=True, default=str)])
    atomic_write(path, buf.getvalue())


def _write_rounds_jsonl(path, records) -> None:
    lines = []
    for r in records:
        lines.append(json.dumps({
            "round": r.round_index, "acc": r.acc, "bsr": r.bsr,
            "selected": list(r.selected),
            "malicious_selected": list(r.malicious_selected),
            "accepted": list(r.accepted), "rejected": list(r.rejected),
            "fallbacks": list(r.fallbacks),
            "bc_report_round": r.bc_report_round,
            "diagnostics": r.diagnostics,
        }, sort_keys=True, default=str))
    atomic_write(path, "\n".join(lines) + "\n")


def _run_one(cfg: ExperimentConfig, seed: int, out_dir: Path,
             dataset_dir: str | None, verbose: bool = True) -> dict:
    cfg = replace(cfg, fl=replace(cfg.fl, seed=seed))
    train, test = resolve_datasets(cfg.dataset, dataset_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        if verbose:
            print(f"[{cfg.name} seed={seed}] round {rec.round_index:3d} "
                  f"acc={rec.acc:.4f} bsr={rec.bsr:.4f} "
                  f"acc_mal={rec.n_accepted_malicious}/{len(rec.malicious_selected)}",
                  flush=True)

    records, summary = run_experiment(cfg.fl, train, test, progress=progress)
    payload = _summary_payload(cfg, summary, seed)
    _write_rounds_csv(out_dir / "rounds.csv", records)
    _write_rounds_jsonl(out_dir / "rounds.jsonl", records)
    atomic_write(out_dir / "summary.json", json.dumps(payload, indent=2))
    if verbose:
        print(f"[{cfg.name} seed={seed}] done in {summary.wall_time:.1f}s")
    return payload


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.fl.seed
    out = Path(args.out or cfg.out_dir)
    _run_one(cfg, seed, out, args.dataset_dir, verbose=not args.quiet)
    print(f"wrote {out / 'summary.json'}")
    return 0


def cmd_lsa(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.fl.seed
    cfg = replace(cfg, fl=replace(cfg.fl, seed=seed))
    train, test = resolve_datasets(cfg.dataset, args.dataset_dir)
    state = build_state(cfg.fl, train, test)
    client = args.client if args.client is not None else (
        state.malicious_ids[0] if state.malicious_ids else 0)
    atk = cfg.fl.attack
    if atk is None:
        print("error: the config has no [attack] section", file=sys.stderr)
        return 1
    splits = build_poison_splits(
        state.client_data[client], state.poison_spec, cfg.fl.val_fraction,
        seed=child_seed(seed, 0x5B))
    report, _, _ = run_lsa(
        state.global_model, state.arch, splits[0], splits[1], splits[3],
        cfg.fl.train_spec(seed), atk, clean_val=splits[2], round_index=0)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "bc_report.json", report.to_json())
    print(f"client {client}: BSR_malicious={report.bsr_malicious:.3f} "
          f"L*={report.selected} (exhausted={report.exhausted})")
    print(f"wrote {out / 'bc_report.json'}")
    return 0


def _sweep_point(packed):
    cfg_text, axis, value, repeat, seed, out_dir, dataset_dir = packed
    from .config import parse_config
    cfg = parse_config(cfg_text)
    cfg = replace(cfg, sweep_axis=axis, sweep_values=(value,))
    point_cfg = cfg.with_axis_value(value)
    point_cfg = replace(point_cfg, name=f"{cfg.name}-{axis}{value}-r{repeat}")
    return _run_point_result(point_cfg, axis, value, repeat, seed,
                             Path(out_dir), dataset_dir)


def _run_point_result(point_cfg, axis, value, repeat, seed, out_dir, dataset_dir):
    payload = _run_one(point_cfg, seed, out_dir, dataset_dir, verbose=False)
    payload.update({"axis": axis, "value": value, "repeat": repeat})
    atomic_write(out_dir / "summary.json", json.dumps(payload, indent=2))
    return payload


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    axis = args.axis or cfg.sweep_axis
    if axis == "none":
        print("error: no sweep axis given (--axis or [sweep] section)",
              file=sys.stderr)
        return 1
    if args.values:
        values = [float(v) if axis != "interval" else int(v)
                  for v in args.values.split(",")]
    else:
        values = list(cfg.sweep_values)
    if not values:
        print("error: no sweep values given", file=sys.stderr)
        return 1
    base_seed = args.seed if args.seed is not None else cfg.fl.seed
    out_root = Path(args.out or cfg.out_dir)
    cfg_text = serialize_config(cfg)
    jobs = []
    for value in values:
        for rep in range(cfg.repeats):
            point_dir = out_root / f"{axis}_{value}" / f"seed_{base_seed + rep}"
            jobs.append((cfg_text, axis, value, rep, base_seed + rep,
                         str(point_dir), args.dataset_dir))
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            payloads = list(pool.map(_sweep_point, jobs))
    else:
        payloads = [_sweep_point(j) for j in jobs]
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow([axis, "repeat", "seed", "best_bsr", "avg_bsr", "final_acc",
                "bar", "mar"])
    for p in payloads:
        w.writerow([p["value"], p["repeat"], p["seed"],
                    f"{p['best_bsr']:.6f}", f"{p['avg_bsr']:.6f}",
                    f"{p['final_acc']:.6f}", f"{p['bar']:.6f}",
                    "" if p["mar"] is None else f"{p['mar']:.6f}"])
    out_root.mkdir(parents=True, exist_ok=True)
    atomic_write(out_root / "sweep.csv", buf.getvalue())
    print(f"wrote {out_root / 'sweep.csv'} ({len(payloads)} runs)")
    return 0


def cmd_report(args) -> int:
    paths = []
    for item in args.inputs.split(","):
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.rglob("summary.json")))
        elif p.exists():
            paths.append(p)
    if not paths:
        print("error: no summary.json files found", file=sys.stderr)
        return 1
    cells: dict = {}
    for p in paths:
        s = json.loads(p.read_text())
        cells.setdefault((s["attack"], s["defense"]), []).append(s)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["attack", "defense", "runs", "best_bsr_mean", "avg_bsr_mean",
                "final_acc_mean", "bar_mean", "mar_mean"])
    for (attack, defense), group in sorted(cells.items()):
        mars = [g["mar"] for g in group if g["mar"] is not None]
        w.writerow([
            attack, defense, len(group),
            f"{np.mean([g['best_bsr'] for g in group]):.4f}",
            f"{np.mean([g['avg_bsr'] for g in group]):.4f}",
            f"{np.mean([g['final_acc'] for g in group]):.4f}",
            f"{np.mean([g['bar'] for g in group]):.4f}",
            f"{np.mean(mars):.4f}" if mars else ""])
    out = Path(args.out or "report.csv")
    atomic_write(out, buf.getvalue())
    print(buf.getvalue())
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bclsim",
        description="Layer-wise backdoor attacks vs robust aggregation, on CPU.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--out")
    run_p.add_argument("--dataset-dir")
    run_p.add_argument("--quiet", action="store_true")
    run_p.set_defaults(func=cmd_run)

    lsa_p = sub.add_parser("lsa", help="one-shot BC-layer identification")
    lsa_p.add_argument("--config", required=True)
    lsa_p.add_argument("--seed", type=int)
    lsa_p.add_argument("--out")
    lsa_p.add_argument("--dataset-dir")
    lsa_p.add_argument("--client", type=int)
    lsa_p.set_defaults(func=cmd_lsa)

    sweep_p = sub.add_parser("sweep", help="sweep one config axis")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--axis")
    sweep_p.add_argument("--values")
    sweep_p.add_argument("--parallel", type=int, default=1)
    sweep_p.add_argument("--seed", type=int)
    sweep_p.add_argument("--out")
    sweep_p.add_argument("--dataset-dir")
    sweep_p.set_defaults(func=cmd_sweep)

    report_p = sub.add_parser("report", help="merge summaries into a matrix")
    report_p.add_argument("--inputs", required=True,
                          help="comma-separated dirs or summary.json files")
    report_p.add_argument("--out")
    report_p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
