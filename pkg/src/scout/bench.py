"""Paired mode-by-seed comparison of selection strategies.

For each seed one synthetic corpus is generated and shared by every mode, so
per-seed differences between modes are paired. The summary is computed from
the persisted run records only.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .manifest import Corpus, Manifest, config_hash
from .synth import SynthConfig, synth_generate
from .trainer import TrainConfig, train_run

SUMMARY_METRICS = ("s_measure", "mae", "e_measure_mean", "f_measure_weighted")


def corpus_dir(out: Path, seed: int) -> Path:
    return out / "corpora" / f"seed{seed}"


def run_bench(bench, synth: SynthConfig, train: TrainConfig, out_dir, log: Callable[[str], None] | None = None) -> list[dict]:
    """Train every (mode, seed) pair and write one run record per pair under ``out_dir/runs``."""
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    budget = max(1, int(round(bench.budget_fraction * bench.n_images)))
    records = []
    for seed in bench.seeds:
        cdir = corpus_dir(out, seed)
        if not (cdir / "manifest.jsonl").exists():
            synth_generate(dataclasses.replace(synth, seed=seed, size=train.image_size), bench.n_images, cdir)
        for mode in bench.modes:
            cfg = dataclasses.replace(train, seed=seed, selection_mode=mode, label_budget=budget)
            cfg.loss = dataclasses.replace(train.loss)
            corpus = Corpus(Manifest.load(cdir / "manifest.jsonl"), cfg.image_size)
            result = train_run(cfg, corpus)
            rec = dict(result.record)
            rec["bench"] = {"mode": mode, "seed": seed, "corpus": str(cdir.relative_to(out))}
            path = out / "runs" / f"{mode}_seed{seed}.json"
            path.write_text(json.dumps(rec, sort_keys=True), encoding="utf-8")
            records.append(rec)
            if log:
                m = rec["test_metrics"]
                log(f"{mode} seed={seed} sm={m['s_measure']:.4f} mae={m['mae']:.4f}")
    return records


def load_records(out_dir) -> list[dict]:
    runs = sorted((Path(out_dir) / "runs").glob("*.json"))
    return [json.loads(p.read_text(encoding="utf-8")) for p in runs]


def summarize(records: Iterable[dict], modes: Iterable[str] | None = None) -> list[dict]:
    """Mean and sample std of the test metrics per mode, with wins against random on S-measure and MAE."""
    records = list(records)
    by_mode: dict[str, dict[int, dict]] = {}
    for r in records:
        by_mode.setdefault(r["bench"]["mode"], {})[r["bench"]["seed"]] = r["test_metrics"]
    order = list(modes) if modes is not None else sorted(by_mode)
    base = by_mode.get("random", {})
    rows = []
    for mode in order:
        runs = by_mode[mode]
        seeds = sorted(runs)
        row = {"mode": mode, "n": len(seeds)}
        for k in SUMMARY_METRICS:
            v = np.array([runs[s][k] for s in seeds])
            row[f"{k}_mean"] = float(v.mean())
            row[f"{k}_std"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        paired = [s for s in seeds if s in base]
        row["sm_wins_vs_random"] = sum(runs[s]["s_measure"] > base[s]["s_measure"] for s in paired)
        row["mae_wins_vs_random"] = sum(runs[s]["mae"] < base[s]["mae"] for s in paired)
        row["paired"] = len(paired)
        rows.append(row)
    return rows


def summary_csv(rows: list[dict], header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(header + "\n")
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["mode"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def summary_text(rows: list[dict], header: str = "") -> str:
    cols = ["mode", "n"] + [f"{k} (mean ± std)" for k in SUMMARY_METRICS] + ["S wins", "MAE wins"]
    table = [cols]
    for r in rows:
        cells = [r["mode"], str(r["n"])]
        cells += [f"{r[k + '_mean']:.4f} ± {r[k + '_std']:.4f}" for k in SUMMARY_METRICS]
        cells += [f"{r['sm_wins_vs_random']}/{r['paired']}", f"{r['mae_wins_vs_random']}/{r['paired']}"]
        table.append(cells)
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    lines = [header] if header else []
    for row in table:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_summary(out_dir, rows: list[dict], seed_line: str) -> None:
    out = Path(out_dir)
    (out / "bench.csv").write_text(summary_csv(rows, seed_line), encoding="utf-8")
    (out / "bench.txt").write_text(summary_text(rows, seed_line), encoding="utf-8")


def bench_hash(bench, synth: SynthConfig, train: TrainConfig) -> str:
    return config_hash({"bench": dataclasses.asdict(bench), "synth": dataclasses.asdict(synth), "train": train.to_dict()})
