"""Command-line entry point: ``scout <command> [options]``.

Thread-count environment variables are applied before numpy is imported, so
the heavy imports live inside the command functions.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

COMMANDS = ("synth", "init-select", "score", "select", "train", "eval", "bench-compare")


def _global_parent(defaults: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)  # noqa: E731
    p.add_argument("--seed", type=int, default=d(None), help="RNG seed (overrides the config file)")
    p.add_argument("--config", default=d(None), help="INI config file; see 'scout train --help' for keys")
    p.add_argument("--out", default=d("."), help="output directory")
    p.add_argument("--threads", type=int, default=d(None), help="BLAS/OpenMP thread count")
    p.add_argument("--label-cost", action="store_true", default=d(False), help="print the cumulative label cost")
    return p


def build_parser() -> argparse.ArgumentParser:
    from .config import describe_keys

    parser = argparse.ArgumentParser(
        prog="scout",
        description="Semi-supervised camouflaged object segmentation at desk scale.",
        parents=[_global_parent(True)],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    g = [_global_parent(False)]

    p = sub.add_parser("synth", parents=g, help="generate a synthetic camouflage corpus")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int)
    p.add_argument("--kappa", type=float)
    p.add_argument("--kappa-range", help="lo,hi: draw kappa per image")
    p.add_argument("--test-fraction", type=float)

    p = sub.add_parser("init-select", parents=g, help="k-means cold-start selection")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--size", type=int, help="feature working resolution (default: train.image_size)")

    for name, text in (("score", "score unlabeled samples"), ("select", "score and reveal a selection")):
        p = sub.add_parser(name, parents=g, help=text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--weights", required=True)
        p.add_argument("--budget", type=int, default=0)
        p.add_argument("--mode", default="center")
        p.add_argument("--center", type=float, default=0.5)
        p.add_argument("--batch-size", type=int, default=16)

    p = sub.add_parser(
        "train",
        parents=g,
        help="run the full training pipeline",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (section, name, default):\n" + describe_keys(),
    )
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("eval", parents=g, help="evaluate weights on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--model", choices=("student", "teacher"), default="student")
    p.add_argument("--text", choices=("fixed", "precise"), default="fixed")

    p = sub.add_parser("bench-compare", parents=g, help="paired comparison of selection modes")
    p.add_argument("--from-records", action="store_true", help="only recompute the summary from saved runs")
    return parser


def _apply_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _header(seed, chash: str) -> str:
    return f"# seed={seed} config_hash={chash}"


def _write_csv(path: Path, header: str, columns, rows) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def _provenance(manifest, command: str, seed, chash: str) -> None:
    manifest.meta.setdefault("provenance", []).append({"command": command, "seed": seed, "config_hash": chash})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, fc) -> int:
    import dataclasses

    from .synth import synth_generate

    cfg = fc.synth
    upd = {"seed": args.seed if args.seed is not None else cfg.seed}
    if args.size is not None:
        upd["size"] = args.size
    if args.kappa is not None:
        upd["kappa"] = args.kappa
    if args.kappa_range:
        lo, hi = (float(v) for v in args.kappa_range.split(","))
        upd["kappa_range"] = (lo, hi)
    if args.test_fraction is not None:
        upd["test_fraction"] = args.test_fraction
    cfg = dataclasses.replace(cfg, **upd)
    m = synth_generate(cfg, args.n, args.out)
    print(f"wrote {len(m.records)} records to {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_init_select(args, fc) -> int:
    import numpy as np

    from . import adas
    from .imgfeat import FeatureConfig, assemble_features, corpus_stats, load_image, standardize
    from .manifest import Manifest, config_hash

    seed = args.seed if args.seed is not None else fc.train.seed
    size = args.size or fc.train.image_size
    man = Manifest.load(args.manifest)
    pool = man.ids("unlabeled")
    if not pool:
        raise ValueError("manifest has no unlabeled records")
    if args.k > len(pool):
        raise ValueError(f"k={args.k} exceeds the {len(pool)} unlabeled records")
    recs = man.by_id()
    fcfg = FeatureConfig(fc.train.feature_color_bins, fc.train.feature_texture_bins, fc.train.feature_dct_k)
    feats = np.stack([assemble_features(load_image(man.resolve(recs[i].image_path), size), fcfg).values for i in pool])
    stats = corpus_stats(feats)
    chosen = adas.kmeans_init(standardize(feats, stats), args.k, seed=[seed, 1], ids=pool)
    chash = config_hash({"command": "init-select", "k": args.k, "size": size, "features": vars(fcfg)})
    man.log_state("init-select")
    man.reveal(chosen)
    man.meta["corpus_stats"] = {**stats.to_dict(), "resolution": size}
    _provenance(man, "init-select", seed, chash)
    man.save(args.manifest)
    print(f"labeled {len(chosen)} records: {' '.join(chosen)}")
    return 0


def _score_or_select(args, fc, patch: bool) -> int:
    import numpy as np

    from . import adas
    from .imgfeat import load_image
    from .manifest import Manifest, config_hash
    from .trainer import _text_vectors, load_models

    if not Path(args.weights).exists():
        raise FileNotFoundError(f"weights file not found: {args.weights}")
    meta, models, params = load_models(args.weights)
    seed = args.seed if args.seed is not None else meta.get("seed", 0)
    size = meta["image_size"]
    man = Manifest.load(args.manifest)
    recs = man.by_id()
    pool = man.ids("unlabeled", "remaining")
    samples = [(i, load_image(man.resolve(recs[i].image_path), size).chw()) for i in pool]
    text = _text_vectors(models, [None])

    def pred(branch):
        return lambda x: branch.forward(x, None if text is None else np.repeat(text, x.shape[0], axis=0))[0]

    res = adas.run_selection_round(
        samples, pred(models.teacher), pred(models.student), params, args.budget, args.mode, args.center,
        seed=[seed, 7, 0], batch_size=args.batch_size,
    )
    chash = config_hash({"command": "score", "weights": meta.get("config_hash"), "mode": args.mode,
                         "center": args.center, "budget": args.budget})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[r.id, _fmt(r.raw_score), _fmt(r.norm_score), r.rank, int(r.selected)] for r in res.reports]
    _write_csv(out / "scores.csv", _header(seed, chash), ["id", "raw_score", "norm_score", "rank", "selected"], rows)
    if patch and res.selected:
        man.log_state("select")
        man.reveal(res.selected)
        _provenance(man, "select", seed, chash)
        man.save(args.manifest)
    print(f"scored {len(rows)} samples; selected {len(res.selected)}")
    return 0


def cmd_train(args, fc) -> int:
    from . import metrics
    from .manifest import Corpus, Manifest, config_hash
    from .trainer import save_models, train_run

    cfg = fc.train
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest.load(args.manifest)
    corpus = Corpus(man, cfg.image_size)
    res = train_run(cfg, corpus)
    chash = config_hash(cfg.to_dict())
    (out / "run.json").write_text(json.dumps(res.record, sort_keys=True, indent=1), encoding="utf-8")
    (out / "timing.json").write_text(json.dumps(res.timing, sort_keys=True, indent=1), encoding="utf-8")
    save_models(out / "weights.bin", cfg, res.models, res.augmenter)
    reports = res.test_reports
    rows = [[i, *map(_fmt, reports[i].as_row())] for i in sorted(reports)]
    if reports:
        rows.append(["mean", *map(_fmt, metrics.mean_report([reports[i] for i in sorted(reports)]).as_row())])
    _write_csv(out / "metrics.csv", _header(cfg.seed, chash), ["id", *metrics.MetricReport.CSV_COLUMNS], rows)
    # final splits, with revealed annotations copied in
    after = man.copy()
    revealed = [i for i, s in res.splits.items() if s == "labeled" and man.by_id()[i].split != "labeled"]
    after.log_state("train")
    after.reveal(revealed)
    after.set_splits(res.splits)
    after.root = out
    for r in after.records:
        r.image_path = os.path.relpath(man.resolve(r.image_path), out)
        if r.mask_path:
            r.mask_path = os.path.relpath(man.resolve(r.mask_path), out)
    if after.meta.get("truth_path"):
        after.meta["truth_path"] = os.path.relpath(man.truth_path, out)
    _provenance(after, "train", cfg.seed, chash)
    after.save(out / "manifest.jsonl")
    final = res.record["test_metrics"]
    if final:
        print(f"test S-measure {final['s_measure']:.4f}  MAE {final['mae']:.4f}")
    args._label_cost = after.meta.get("label_cost", 0)
    return 0


def cmd_eval(args, fc) -> int:
    from . import metrics
    from .manifest import Corpus, Manifest, config_hash
    from .tensor import no_grad
    from .trainer import _text_vectors, load_models

    meta, models, _ = load_models(args.weights)
    man = Manifest.load(args.manifest)
    if args.split not in ("labeled", "test"):
        raise ValueError("only the labeled and test splits carry masks")
    ids = man.ids(args.split)
    if not ids:
        raise ValueError(f"split {args.split!r} is empty")
    corpus = Corpus(man, meta["image_size"])
    branch = models.student if args.model == "student" else models.teacher

    reports = {}
    with no_grad():
        for i in ids:
            t = corpus.referring_text(i) if args.text == "precise" else None
            p = branch.forward(corpus.images([i]), _text_vectors(models, [t]))[0].data[0, 0]
            reports[i] = metrics.evaluate(p, corpus.mask(i))
    seed = args.seed if args.seed is not None else meta.get("seed", 0)
    chash = config_hash({"command": "eval", "weights": meta.get("config_hash"), "split": args.split,
                         "model": args.model, "text": args.text})
    rows = [[i, *map(_fmt, reports[i].as_row())] for i in ids]
    mean = metrics.mean_report([reports[i] for i in ids])
    rows.append(["mean", *map(_fmt, mean.as_row())])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", _header(seed, chash), ["id", *metrics.MetricReport.CSV_COLUMNS], rows)
    print(f"{args.split}: S-measure {mean.s_measure:.4f}  MAE {mean.mae:.4f}  ({len(ids)} images)")
    return 0


def cmd_bench_compare(args, fc) -> int:
    from . import bench

    out = Path(args.out)
    chash = bench.bench_hash(fc.bench, fc.synth, fc.train)
    seeds = ",".join(map(str, fc.bench.seeds))
    if args.from_records:
        records = bench.load_records(out)
    else:
        records = bench.run_bench(fc.bench, fc.synth, fc.train, out, log=print)
    rows = bench.summarize(records, fc.bench.modes)
    bench.write_summary(out, rows, f"# seeds={seeds} config_hash={chash}")
    print(bench.summary_text(rows))
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "init-select": cmd_init_select,
    "score": lambda a, c: _score_or_select(a, c, False),
    "select": lambda a, c: _score_or_select(a, c, True),
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-compare": cmd_bench_compare,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # thread settings must land before numpy loads
    pre = _global_parent(True).parse_known_args(argv)[0]
    _apply_threads(pre.threads)
    from .manifest import ManifestError
    from .trainer import ConfigError, TrainPhaseError

    args = build_parser().parse_args(argv)
    _apply_threads(args.threads)
    try:
        from .config import load_config

        fc = load_config(args.config)
        rc = HANDLERS[args.command](args, fc)
    except (ConfigError, ManifestError, FileNotFoundError, ValueError, TrainPhaseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.label_cost:
        cost = getattr(args, "_label_cost", None)
        if cost is None and getattr(args, "manifest", None):
            from .manifest import Manifest

            cost = Manifest.load(args.manifest).meta.get("label_cost", 0)
        print(f"label cost: {cost or 0}")
    return rc


if __name__ == "__main__":
    sys.exit(main())
