"""Command-line entry point.

Exit codes: 0 success, 1 verification failure (or an aborted run),
2 usage or configuration error, 3 file or format error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import bench, gradsuite
from .config import ModelConfig, TrainConfig, config_from_dict, dump_config, parse_config
from .errors import ConfigError, ContractError, FormatError, NumericError
from .io import (atomic_write, import_pgm_pairs, load_checkpoint, load_dataset, save_checkpoint,
                 save_dataset)
from .model import Model
from .train import (SYNTH_TASKS, Dataset, MultiRunReport, SyntheticSpec, check_compatible,
                    evaluate, gen_synthetic, train_loop)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SPLITS = ("train", "val", "test")
log = logging.getLogger("mvssm")


@dataclass(frozen=True)
class AblationRow:
    num: int
    views: str
    fusion: str
    cvsm: bool
    mvcm: str  # "yes", or the substitute used in its place, or "no"
    overrides: dict


# mirrors the eight-row ablation grid: view 1 is frontal, view 2 lateral
ABLATION_ROWS = (
    AblationRow(1, "v2", "none", False, "no", {"fusion_mode": "single_view_v2"}),
    AblationRow(2, "v1", "none", False, "no", {"fusion_mode": "single_view_v1"}),
    AblationRow(3, "v1+v2", "early", False, "no", {"fusion_mode": "early"}),
    AblationRow(4, "v1+v2", "late", False, "no", {"fusion_mode": "late"}),
    AblationRow(5, "v1+v2", "cross", True, "concat",
                {"fusion_mode": "cross", "use_cvsm": True, "use_mvcm": False,
                 "mvcm_substitute": "concat"}),
    AblationRow(6, "v1+v2", "cross", True, "add",
                {"fusion_mode": "cross", "use_cvsm": True, "use_mvcm": False,
                 "mvcm_substitute": "add"}),
    AblationRow(7, "v1+v2", "cross", False, "yes",
                {"fusion_mode": "cross", "use_cvsm": False, "use_mvcm": True,
                 "mvcm_substitute": "none"}),
    AblationRow(8, "v1+v2", "cross", True, "yes",
                {"fusion_mode": "cross", "use_cvsm": True, "use_mvcm": True,
                 "mvcm_substitute": "none"}),
)


# ------------------------------------------------------------------ helpers


def _write_json(path: Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2) + "\n").encode())


def _load_configs(args) -> tuple[ModelConfig, TrainConfig]:
    if args.config is None:
        model_cfg, train_cfg = config_from_dict({})
    else:
        model_cfg, train_cfg = parse_config(args.config)
    if getattr(args, "runs", None) is not None:
        train_cfg = replace(train_cfg, runs=args.runs)
    if getattr(args, "seed", None) is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
        model_cfg = replace(model_cfg, seed=args.seed)
    train_cfg.validate()
    return model_cfg, train_cfg


def load_splits(data_dir, model_cfg: ModelConfig, names=SPLITS) -> dict[str, Dataset]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"dataset directory {data_dir} not found")
    k = model_cfg.num_classes if model_cfg.task == "multi_label" else None
    out = {}
    for name in names:
        path = data_dir / f"{name}.xfmv"
        if not path.exists():
            raise FileNotFoundError(f"missing dataset file {path}")
        out[name] = Dataset(*load_dataset(path, k))
        check_compatible(model_cfg, out[name])
    return out


def _report_row(row: AblationRow, rep: MultiRunReport) -> dict:
    return {"num": row.num, "views": row.views, "fusion": row.fusion,
            "cvsm": "yes" if row.cvsm else "no", "mvcm": row.mvcm,
            "auroc_mean": rep.mean, "auroc_std": rep.std}


# ----------------------------------------------------------------- commands


def cmd_gradcheck(args) -> int:
    report = gradsuite.run_suite(args.scope, seed=args.seed or 0)
    for r in report.records:
        flag = "ok  " if r.passed else "FAIL"
        name = f"{r.op}[{r.variant}]" if r.variant else r.op
        print(f"{flag} {name:<32} max_rel_err={r.report.max_rel_err:.3e} "
              f"(<= {r.threshold:g}) worst={r.report.worst_param}")
    doc = report.to_dict()
    if args.out:
        _write_json(Path(args.out), doc)
    if not report.passed:
        print(f"gradcheck failed: worst op {doc['worst_op']} "
              f"max_rel_err={doc['worst_max_rel_err']:.3e}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_scan_bench(args) -> int:
    rows = bench.run_bench(args.L, args.N, args.C, args.strategies, args.chunks,
                           repeats=args.repeats, warmup=args.warmup, workers=args.workers,
                           seed=args.seed or 0)
    print(bench.format_table(rows))
    text = bench.rows_to_csv(rows)
    if args.csv:
        atomic_write(Path(args.csv), text.encode())
    else:
        print()
        print(text, end="")
    ratios = bench.scaling_ratios(rows)
    for (n, c, _, L), r in sorted(ratios.items()):
        print(f"# sequential t({2 * L})/t({L}) N={n} C={c}: {r:.2f}", file=sys.stderr)
    bad = [r for r in rows if r.max_err_vs_seq > args.tol]
    if bad:
        print(f"{len(bad)} row(s) exceed max_err tolerance {args.tol:g}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.from_images:
        v1, v2, labels = import_pgm_pairs(args.from_images, args.img_size)
        n = len(labels)
        order = np.random.default_rng(args.seed).permutation(n)
        n_val, n_test = int(round(n * args.val_frac)), int(round(n * args.test_frac))
        parts = {"val": order[:n_val], "test": order[n_val:n_val + n_test],
                 "train": order[n_val + n_test:]}
        for name, idx in parts.items():
            save_dataset(out / f"{name}.xfmv", v1[idx], v2[idx], labels[idx])
        meta = {"source": str(args.from_images), "img_size": args.img_size,
                "counts": {k: int(len(v)) for k, v in parts.items()}}
    else:
        spec = SyntheticSpec(img_size=args.img_size, n_train=args.n_train, n_val=args.n_val,
                             n_test=args.n_test, task=args.task, noise_std=args.noise_std,
                             blob_size=args.blob_size, blob_intensity=args.blob_intensity,
                             seed=args.seed)
        splits = gen_synthetic(spec)
        for name, ds in splits.items():
            save_dataset(out / f"{name}.xfmv", ds.v1, ds.v2, ds.labels)
        meta = {"synthetic": asdict(spec)}
    _write_json(out / "meta.json", meta)
    print(f"wrote {', '.join(f'{s}.xfmv' for s in SPLITS)} to {out}")
    return EXIT_OK


def _train(model_cfg, train_cfg, splits, out: Path, tag: str = "") -> MultiRunReport:
    rep = train_loop(model_cfg, train_cfg, splits)
    prefix = f"{tag}_" if tag else ""
    for r, run in enumerate(rep.runs):
        save_checkpoint(out / f"{prefix}run{r}.xfck", run.state)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "seed", "epoch", "train_loss", "val_auroc", "val_loss"])
    for r, run in enumerate(rep.runs):
        for h in run.history:
            w.writerow([r, run.seed, h["epoch"], h["train_loss"], h["val_auroc"], h["val_loss"]])
    atomic_write(out / f"{prefix}history.csv", buf.getvalue().encode())
    return rep


def cmd_train(args) -> int:
    model_cfg, train_cfg = _load_configs(args)
    splits = load_splits(args.data, model_cfg)
    out = Path(args.out)
    t0 = time.perf_counter()
    rep = _train(model_cfg, train_cfg, splits, out)
    doc = {"config": dump_config(model_cfg, train_cfg), **rep.to_dict(),
           "seconds": time.perf_counter() - t0}
    _write_json(out / "metrics.json", doc)
    print(f"test macro AUROC {rep.mean:.4f} +/- {rep.std:.4f} over {len(rep.runs)} run(s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    model_cfg, _ = _load_configs(args)
    split = load_splits(args.data, model_cfg, names=(args.split,))[args.split]
    model = Model(model_cfg)
    model.load_state_dict(load_checkpoint(args.checkpoint))
    rep = evaluate(model, split)
    doc = {"checkpoint": str(args.checkpoint), "split": args.split, **rep.to_dict()}
    text = json.dumps(doc, indent=2)
    if args.out:
        _write_json(Path(args.out) / f"eval_{args.split}.json", doc)
    print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = _load_configs(args)
    splits = load_splits(args.data, model_cfg)
    out = Path(args.out)
    rows = []
    for row in ABLATION_ROWS:
        cfg = replace(model_cfg, **row.overrides)
        cfg.validate()
        t0 = time.perf_counter()
        rep = _train(cfg, train_cfg, splits, out, tag=f"row{row.num}")
        rows.append({**_report_row(row, rep), "seconds": time.perf_counter() - t0})
        log.info("row %d %s: %.4f +/- %.4f", row.num, row.overrides["fusion_mode"],
                 rep.mean, rep.std)
    cols = ["num", "views", "fusion", "cvsm", "mvcm", "auroc_mean", "auroc_std"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write(out / "ablation.csv", buf.getvalue().encode())
    _write_json(out / "ablation.json",
                {"config": dump_config(model_cfg, train_cfg), "rows": rows})
    print(f"{'#':>2} {'views':<6} {'fusion':<6} {'cvsm':<4} {'mvcm':<6} auroc")
    for r in rows:
        print(f"{r['num']:>2} {r['views']:<6} {r['fusion']:<6} {r['cvsm']:<4} {r['mvcm']:<6} "
              f"{r['auroc_mean']:.4f} +/- {r['auroc_std']:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvssm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON config (absent keys take defaults)")
        sp.add_argument("--seed", type=int, default=None)
        if data:
            sp.add_argument("--data", required=True,
                            help="directory holding train/val/test .xfmv files")

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scope", choices=("op", "block", "model"), default="op")
    g.add_argument("--config", help="accepted for symmetry; the suite uses fixed toys")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="write the JSON report here")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("scan-bench", help="time scan strategies against the sequential oracle")
    b.add_argument("--L", type=int, nargs="+", default=[1024, 2048, 4096, 8192])
    b.add_argument("--N", type=int, nargs="+", default=[16])
    b.add_argument("--C", type=int, nargs="+", default=[16])
    b.add_argument("--strategies", nargs="+", default=list(bench.STRATEGIES))
    b.add_argument("--chunks", type=int, nargs="+", default=[64])
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--tol", type=float, default=1e-5, help="max_err_vs_seq bound")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--csv", help="write the CSV here instead of stdout")
    b.set_defaults(func=cmd_scan_bench)

    d = sub.add_parser("gen-data", help="write train/val/test dataset files")
    d.add_argument("--out", required=True)
    d.add_argument("--task", choices=SYNTH_TASKS, default="xor_cross_view")
    d.add_argument("--img-size", type=int, default=32)
    d.add_argument("--n-train", type=int, default=2048)
    d.add_argument("--n-val", type=int, default=256)
    d.add_argument("--n-test", type=int, default=512)
    d.add_argument("--noise-std", type=float, default=0.3)
    d.add_argument("--blob-size", type=int, default=16)
    d.add_argument("--blob-intensity", type=float, default=1.0)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--from-images", metavar="MANIFEST",
                   help="CSV with view1,view2,label columns pointing at PGM files")
    d.add_argument("--val-frac", type=float, default=0.1)
    d.add_argument("--test-frac", type=float, default=0.2)
    d.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and report test AUROC over several runs")
    common(t)
    t.add_argument("--runs", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the eight fusion configurations")
    common(a)
    a.add_argument("--runs", type=int, default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
