"""Command-line entry point: gen-data, train, cache-protos, eval, ablate, gradcheck.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 integrity (hash) error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import IntegrityError, PrototypeCache, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .evaluation import EvalReport, ProposalSettings, evaluate
from .gradcheck import run_gradcheck
from .losses import LossWeights
from .synthbench import SPLITS, Dataset, DatasetIntegrityError, generate_dataset, load_dataset
from .trainer import cache_reference_prototypes, train_rscn, train_source_only

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_INTEGRITY = 0, 1, 2, 3

CHECKPOINT = "checkpoint.rsck"
METRICS = "metrics.ndjson"
CONFIG_ECHO = "config.ini"

log = logging.getLogger("rscn")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_ECHO).write_text(cfg.to_text(), encoding="utf-8")


def _load_data(path) -> Dataset:
    if not (Path(path) / "manifest.json").is_file():
        raise UsageError(f"no dataset at {path} (manifest.json missing)")
    return load_dataset(path)


def _settings(cfg: RunConfig, ds: Dataset) -> ProposalSettings:
    return cfg.train.proposals((ds.spec.size_min, ds.spec.size_max))


def _evaluate(cfg: RunConfig, ds: Dataset, params, split: str, ckpt_hash: str = "") -> EvalReport:
    source = ds.split("source_train")[:cfg.eval.analysis_scenes]
    return evaluate(params, ds.split(split), split, seed=cfg.seed, settings=_settings(cfg, ds),
                    score_thresh=cfg.eval.score_thresh, iou_thresh=cfg.eval.iou_thresh,
                    source_scenes=source, checkpoint_hash=ckpt_hash)


def _eval_hook(cfg: RunConfig, ds: Dataset):
    def hook(step, params):
        return _evaluate(cfg, ds, params, "target_val").log_block()
    return hook


def _load_cache(path) -> PrototypeCache:
    if not Path(path).is_file():
        raise UsageError(f"cache file not found: {path}")
    return PrototypeCache.load(path)


def _fmt(v) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def table_row(name: str, report: EvalReport, baseline: float | None) -> str:
    aps = " | ".join(_fmt(report.per_class_ap[c]) for c in sorted(report.per_class_ap))
    gain = "" if baseline is None else f"{100 * (report.map50 - baseline):+.1f}"
    return f"| {name} | {aps} | {_fmt(report.map50)} | {gain} |"


def table_header(n_classes: int) -> list[str]:
    cols = " | ".join(f"c{c}" for c in range(n_classes))
    return [f"| model | {cols} | mAP | gain |", "|---" * (n_classes + 3) + "|"]


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    ds = generate_dataset(cfg.scene, cfg.sizes.as_tuple(), cfg.seed, out_dir=out)
    _echo_config(cfg, out)
    print(f"{'split':<14} {'scenes':>7} " + " ".join(f"{'c' + str(c):>6}"
                                                     for c in range(cfg.scene.n_classes)))
    for split in SPLITS:
        counts = ds.manifest.class_counts[split]
        print(f"{split:<14} {ds.manifest.sizes[split]:>7} " + " ".join(f"{n:>6}" for n in counts))
    return EXIT_OK


def run_training(cfg: RunConfig, ds: Dataset, mode: str, out: Path,
                 cache: PrototypeCache | None = None) -> str:
    """Train, then write checkpoint, metrics log and echoed config to ``out``."""
    _echo_config(cfg, out)
    hook = _eval_hook(cfg, ds)
    if mode == "source-only":
        result = train_source_only(cfg.train, ds, out / METRICS, eval_hook=hook)
    else:
        result = train_rscn(cfg.train, ds, cache, out / METRICS, eval_hook=hook)
    return save_checkpoint(out / CHECKPOINT, result.params, result.disc)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.weights:
        try:
            weights = LossWeights.from_string(args.weights, cfg.train.weights.grl_lambda)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        cfg = cfg.with_weights(weights)
    if args.mode == "rscn" and not args.cache:
        raise UsageError("train --mode rscn requires --cache")
    ds = _load_data(args.data)
    cache = _load_cache(args.cache) if args.mode == "rscn" else None
    digest = run_training(cfg, ds, args.mode, Path(args.out), cache)
    print(f"{args.mode} checkpoint {Path(args.out) / CHECKPOINT} sha256 {digest}")
    return EXIT_OK


def build_cache(cfg: RunConfig, ds: Dataset, ckpt_path: Path, out: Path, force: bool = False) -> PrototypeCache:
    ckpt = load_checkpoint(ckpt_path)
    if out.exists() and not force:
        existing = PrototypeCache.load(out)
        if existing.ref_hash != ckpt.hash:
            raise IntegrityError(f"{out} was built from checkpoint {existing.ref_hash[:12]}, "
                                 f"not {ckpt.hash[:12]}; pass --force to rebuild")
    cache = cache_reference_prototypes(ckpt.params, ds, ckpt.hash, cfg.train)
    cache.save(out)
    return cache


def cmd_cache_protos(args) -> int:
    cfg = load_config(args.config)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ds = _load_data(args.data)
    cache = build_cache(cfg, ds, Path(args.checkpoint), Path(args.out), args.force)
    print(f"cached prototypes for {len(cache.entries)} source images -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.split not in SPLITS or args.split == "target_train":
        raise UsageError(f"split {args.split!r} has no annotations to score; "
                         "use source_train or target_val")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ds = _load_data(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    report = _evaluate(cfg, ds, ckpt.params, args.split, ckpt.hash)
    baseline = None
    if args.baseline:
        try:
            baseline = EvalReport.from_dict(json.loads(Path(args.baseline).read_text())).map50
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read baseline report {args.baseline}: {exc}") from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    for line in table_header(ckpt.params.n_classes):
        print(line)
    print(table_row(Path(args.checkpoint).parent.name or "model", report, baseline))
    return EXIT_OK


ABLATION_ROWS = (
    ("source-only", None),
    ("BPA", (1.0, 1.0, 0.0, 0.0)),
    ("BPA+RSH", (1.0, 1.0, 1.0, 0.0)),
    ("BPA+SSP", (1.0, 1.0, 0.0, 1.0)),
    ("BPA+RSH+SSP", (1.0, 1.0, 1.0, 1.0)),
)


def run_ablation(cfg: RunConfig, ds: Dataset, cache: PrototypeCache | None,
                 out: Path) -> list[tuple[str, EvalReport]]:
    """Source-only plus the four constraint combinations, one shared seed."""
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    ref_hash = run_training(cfg, ds, "source-only", out / "source-only")
    if cache is None:
        cache = build_cache(cfg, ds, out / "source-only" / CHECKPOINT, out / "cache.rspc")
    elif cache.ref_hash != ref_hash:
        raise IntegrityError("cache was not built from this config's source-only checkpoint")
    for name, weights in ABLATION_ROWS:
        run_dir = out / name
        if weights is not None:
            run_training(cfg.with_weights(LossWeights(*weights, cfg.train.weights.grl_lambda)),
                         ds, "rscn", run_dir, cache)
        ckpt = load_checkpoint(run_dir / CHECKPOINT)
        report = _evaluate(cfg, ds, ckpt.params, "target_val", ckpt.hash)
        (run_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        rows.append((name, report))
    return rows


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    ds = _load_data(args.data)
    cache = _load_cache(args.cache) if args.cache else None
    out = Path(args.out)
    rows = run_ablation(cfg, ds, cache, out)
    base = rows[0][1].map50
    lines = table_header(ds.spec.n_classes) + [table_row(n, r, base) for n, r in rows]
    (out / "ablation.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    csv = ["row,map50,gain"] + [f"{n},{r.map50:.6f},{r.map50 - base:.6f}" for n, r in rows]
    (out / "ablation.csv").write_text("\n".join(csv) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed, trials=args.trials)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_VERIFY


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rscn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic benchmark")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a source-only or adapted detector")
    t.add_argument("--mode", choices=("source-only", "rscn"), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--cache", help="reference prototype cache (rscn mode)")
    t.add_argument("--weights", help="w_det,w_bpa,w_rsh,w_ssp; overrides the config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cache-protos", help="precompute reference detector prototypes")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--force", action="store_true", help="overwrite a cache from another checkpoint")
    c.set_defaults(func=cmd_cache_protos)

    e = sub.add_parser("eval", help="AP@50 and feature metrics on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="target_val")
    e.add_argument("--baseline", help="report JSON whose mAP the gain is measured against")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="source-only plus the four constraint combinations")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--cache", help="cache built from this config's source-only checkpoint")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trials", type=int, default=100)
    v.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, DatasetIntegrityError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
