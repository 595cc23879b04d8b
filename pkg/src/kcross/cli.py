"""Single command-line entry point.

    kcross gen-data      generate a rated phantom suite + manifest
    kcross train-stage1  branch pretraining
    kcross train-stage2  score-network regression on rating levels
    kcross score         ScoreReport JSON for one image
    kcross evaluate      metric-vs-rating inconsistency table
    kcross serve         rating-collection HTTP service

Every command works under a run directory (KCROSS_RUN_DIR overrides the
root) holding the resolved config snapshot, checkpoints and logs, so runs
are reproducible from their artifacts. Failures print machine-readable
error JSON on stderr and exit nonzero.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .config import load_run_config, write_snapshot
from .consistency import evaluate_metrics, external_score_metric, resolve_metrics, write_table
from .errors import ConfigurationError, DataError, KCrossError
from .model import BranchSet, KCrossScorer, ScoreNetworks
from .phantom import load_image, load_manifest, write_suite
from .rating import RatingService, RatingStore, serve as build_server
from .segmentation import default_registry
from .training import train_stage1, train_stage2


def _run_root():
    return Path(os.environ.get("KCROSS_RUN_DIR", "runs"))


def _run_dir(args, default_name):
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    return _run_root() / default_name


def _load_ratings(path):
    """Accept either {id: level} JSON or export-style JSON lines."""
    text = Path(path).read_text()
    try:
        blob = json.loads(text)
        if isinstance(blob, dict):
            return {k: float(v) for k, v in blob.items()}
    except json.JSONDecodeError:
        pass
    ratings = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        key = "rated_level" if "rated_level" in row else "level"
        ratings[row["id"]] = float(row[key])
    if not ratings:
        raise DataError(f"no ratings found in {path}")
    return ratings


def cmd_gen_data(args):
    manifest = write_suite(
        args.out, n=args.n, seed=args.seed, size=args.size, healthy_every=args.healthy_every
    )
    print(json.dumps({"manifest": str(manifest), "n": args.n, "seed": args.seed}))
    return 0


def cmd_train_stage1(args):
    cfg = load_run_config(args.config)
    if args.manifest:
        cfg.data.manifest = args.manifest
    if not cfg.data.manifest:
        raise ConfigurationError("no manifest: set data.manifest in the config or pass --manifest")
    run_dir = _run_dir(args, "stage1")
    write_snapshot(cfg, run_dir)
    records = load_manifest(cfg.data.manifest)
    _, ckpt = train_stage1(
        records, cfg.train, run_dir, model_cfg=cfg.model, resume=args.resume
    )
    print(json.dumps({"checkpoint": str(ckpt), "run_dir": str(run_dir)}))
    return 0


def cmd_train_stage2(args):
    cfg = load_run_config(args.config)
    if args.manifest:
        cfg.data.manifest = args.manifest
    if args.ratings:
        cfg.data.ratings = args.ratings
    if not cfg.data.manifest:
        raise ConfigurationError("no manifest: set data.manifest in the config or pass --manifest")
    run_dir = _run_dir(args, "stage2")
    write_snapshot(cfg, run_dir)
    records = load_manifest(cfg.data.manifest)
    branches = BranchSet.load(args.stage1_ckpt)
    ratings = _load_ratings(cfg.data.ratings) if cfg.data.ratings else None
    _, ckpt = train_stage2(records, branches, cfg.train, run_dir, ratings=ratings)
    print(json.dumps({"checkpoint": str(ckpt), "run_dir": str(run_dir)}))
    return 0


def _build_scorer(stage1_ckpt, stage2_ckpt, backend):
    branches = BranchSet.load(stage1_ckpt)
    nets = ScoreNetworks.load(stage2_ckpt)
    return KCrossScorer(branches, nets, default_registry(), backend)


def cmd_score(args):
    scorer = _build_scorer(args.stage1_ckpt, args.stage2_ckpt, args.backend)
    report = scorer.score_array(load_image(args.image), healthy=args.healthy)
    print(report.to_json())
    return 0


def cmd_evaluate(args):
    records = load_manifest(args.manifest)
    names = [n.strip() for n in args.metrics.split(",") if n.strip()]
    scorer = None
    if "kcross" in names:
        if not (args.stage1_ckpt and args.stage2_ckpt):
            raise ConfigurationError(
                "metric 'kcross' needs --stage1-ckpt and --stage2-ckpt"
            )
        scorer = _build_scorer(args.stage1_ckpt, args.stage2_ckpt, args.backend)
    external = {}
    for spec in args.external or []:
        try:
            name, rest = spec.split("=", 1)
            path, direction = rest.rsplit(":", 1)
        except ValueError:
            raise ConfigurationError(
                f"bad --external {spec!r}; expected name=scores.json:higher_is_better"
            )
        external[name] = external_score_metric(name, path, direction)
    metrics = resolve_metrics(names, scorer=scorer, external=external)
    rows = evaluate_metrics(
        records, metrics, subset_key=lambda r: r.degradation.get("kind", "unknown")
    )
    out = Path(args.out)
    write_table(rows, out, out.with_suffix(".csv"))
    print(json.dumps({"table": str(out), "metrics": [r["metric"] for r in rows]}))
    return 0


def cmd_serve(args):
    records = load_manifest(args.manifest)
    store = RatingStore(args.ratings)
    service = RatingService(records, store, frontend_dir=args.frontend)
    server = build_server(service, host=args.host, port=args.port)
    print(
        json.dumps({"serving": f"http://{args.host}:{server.server_address[1]}", "images": len(records)}),
        flush=True,
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        store.close()
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="kcross", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kcross {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a rated phantom suite")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--healthy-every", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="branch pretraining")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--run-dir")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="score-network training")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--ratings")
    p.add_argument("--stage1-ckpt", required=True)
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("score", help="score one synthesized image")
    p.add_argument("--image", required=True)
    p.add_argument("--healthy", action="store_true")
    p.add_argument("--stage1-ckpt", required=True)
    p.add_argument("--stage2-ckpt", required=True)
    p.add_argument("--backend", default="otsu_lcc")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="metric comparison table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--metrics", default="mae,psnr,ssim")
    p.add_argument("--stage1-ckpt")
    p.add_argument("--stage2-ckpt")
    p.add_argument("--backend", default="otsu_lcc")
    p.add_argument("--external", action="append", metavar="NAME=FILE:DIRECTION")
    p.add_argument("--out", default="table.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="rating collection service")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratings", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--frontend")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KCrossError as exc:
        sys.stderr.write(json.dumps(exc.payload()) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
