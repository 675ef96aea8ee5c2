"""Command-line entry point: make-synth, train, predict, eval, graph-stats, run.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .classifier import EnsembleConfig, votes_to_csv
from .data import SplitMask, load_dataset, make_synthetic, save_dataset, split
from .estimator import TripletWatershed
from .graph_build import build_edge_set, fit_pca
from .metrics import compute_metrics, default_map_subsample, mean_average_precision
from .trainer import TrainConfig

FORMAT_VERSION = 1
log = logging.getLogger("triplet_watershed")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Echoed into every artifact. Output paths and ``--threads`` are left
    out: they do not change results and would break byte-identical reruns."""

    subcommand: str
    data: str = None
    model: str = None
    seed: int = 0
    repeats: int = 1
    split: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["version"] = __version__
        d["format_version"] = FORMAT_VERSION
        return d


# -- argument parsing ------------------------------------------------------
def _per_class(text):
    try:
        big, small = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected N,M") from None
    if big < 1 or small < 1:
        raise argparse.ArgumentTypeError("N and M must be positive")
    return big, small


def _add_split(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--train-frac", type=float, help="stratified train fraction (default 0.1)")
    g.add_argument("--per-class", type=_per_class, metavar="N,M",
                   help="N train pixels per class, M for classes of size <= N")
    p.add_argument("--split", help="existing split.u8 to reuse instead of drawing one")


def _add_model_flags(p):
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--arch", choices=["mlp", "conv"], default="mlp")
    p.add_argument("--pca-k", type=int, default=None, help="PCA components (default: all bands)")
    p.add_argument("--emst-dims", type=int, default=32)
    p.add_argument("--patch-size", type=int, default=11)
    p.add_argument("--seed-frac", type=float, default=0.4,
                   help="fraction of training pixels used as watershed seeds per epoch")
    p.add_argument("--lr-base", type=float, default=0.01)
    p.add_argument("--lr-max", type=float, default=0.1)
    p.add_argument("--cycle-len", type=int, default=None,
                   help="iterations per half cycle (default: 4 epochs' worth)")
    p.add_argument("--triplet-pool", choices=["all", "train-only"], default="all")
    p.add_argument("--fixed-seeds", action="store_true")


def _add_ensemble_flags(p, seed_flag):
    p.add_argument("--n-estimators", type=int, default=25)
    p.add_argument(seed_flag, dest="ens_seed_frac", type=float, default=0.5,
                   help="fraction of seeds kept by each ensemble member")
    p.add_argument("--feature-frac", type=float, default=0.5)
    p.add_argument("--votes-csv", help="write per-vertex vote counts as CSV")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="triplet-watershed", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--h", type=int, default=64)
    p.add_argument("--w", type=int, default=64)
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--unlabeled-frac", type=float, default=0.0)
    _add_common(p)

    p = sub.add_parser("train", help="train the embedding network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="model file to continue training")
    _add_split(p)
    _add_model_flags(p)
    _add_common(p)

    p = sub.add_parser("predict", help="ensemble watershed prediction")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split.u8 holding the seeds (default: next to the model)")
    p.add_argument("--out", required=True, help="output directory")
    _add_ensemble_flags(p, "--seed-frac")
    _add_common(p)

    p = sub.add_parser("eval", help="score predictions and/or embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", help="pred.u16 from predict")
    p.add_argument("--split", help="split.u8 (default: next to the prediction or model)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--map", action="store_true", help="MAP of the model embeddings")
    p.add_argument("--model", help="model file for --map")
    p.add_argument("--map-subsample", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("graph-stats", help="edge set statistics as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--pca-k", type=int, default=None)
    p.add_argument("--emst-dims", type=int, default=32)
    p.add_argument("--dump", help="write the graph as 'u v w' text")
    _add_split(p)
    _add_common(p)

    p = sub.add_parser("run", help="train, predict and eval, optionally repeated")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--map", action="store_true")
    p.add_argument("--map-subsample", type=int, default=None)
    _add_split(p)
    _add_model_flags(p)
    _add_ensemble_flags(p, "--ensemble-seed-frac")
    _add_common(p)
    return parser


# -- validation ------------------------------------------------------------
def _need_file(path, what):
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _need_dataset(path):
    if not (Path(path) / "cube.json").is_file():
        raise UsageError(f"dataset directory {path} has no cube.json")


def _split_spec(args):
    if getattr(args, "split", None):
        _need_file(args.split, "split file")
        return {"file": str(args.split)}
    if args.per_class is not None:
        return {"per_class": list(args.per_class)}
    frac = 0.1 if args.train_frac is None else args.train_frac
    if not 0 < frac <= 1:
        raise UsageError("--train-frac must be in (0, 1]")
    return {"fraction": frac}


def _estimator_params(args):
    if args.patch_size < 1 or args.patch_size % 2 != 1:
        raise UsageError("--patch-size must be a positive odd number")
    if args.pca_k is not None and args.pca_k < 1:
        raise UsageError("--pca-k must be positive")
    if args.emst_dims < 1 or args.embed_dim < 1:
        raise UsageError("--emst-dims and --embed-dim must be positive")
    params = dict(
        n_components=args.pca_k, emst_dims=args.emst_dims, patch_size=args.patch_size,
        arch=args.arch, embed_dim=args.embed_dim, epochs=args.epochs,
        batch_size=args.batch_size, alpha=args.alpha, seed_fraction=args.seed_frac,
        lr_base=args.lr_base, lr_max=args.lr_max, cycle_length=args.cycle_len,
        triplet_pool=args.triplet_pool, fixed_seeds=args.fixed_seeds)
    try:
        TrainConfig(epochs=args.epochs, batch_size=args.batch_size, alpha=args.alpha,
                    seed_fraction=args.seed_frac, lr_base=args.lr_base, lr_max=args.lr_max,
                    cycle_length=args.cycle_len, triplet_pool=args.triplet_pool)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return params


def _ensemble_params(args):
    try:
        EnsembleConfig(args.n_estimators, args.ens_seed_frac, args.feature_frac)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return dict(n_estimators=args.n_estimators, ensemble_seed_fraction=args.ens_seed_frac,
                feature_fraction=args.feature_frac)


def _check_common(args):
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if getattr(args, "repeats", 1) < 1:
        raise UsageError("--repeats must be >= 1")
    if getattr(args, "map_subsample", None) is not None and args.map_subsample < 1:
        raise UsageError("--map-subsample must be >= 1")


# -- helpers ---------------------------------------------------------------
def _seeds(seed, n):
    """Independent integer seeds fanned out from ``seed``."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _make_split(ds, spec, seed):
    if "file" in spec:
        return SplitMask.load(spec["file"], ds.labels.shape, ds.labels)
    if "per_class" in spec:
        return split(ds.labels, per_class=tuple(spec["per_class"]), rng=seed)
    return split(ds.labels, fraction=spec["fraction"], rng=seed)


def _default_split(path, other):
    """``path`` if given, else split.u8 next to ``other``, else the split
    recorded in a neighbouring pred.json."""
    if path:
        _need_file(path, "split file")
        return path
    cand = Path(other).parent / "split.u8"
    if cand.is_file():
        return str(cand)
    meta = Path(other).parent / "pred.json"
    if meta.is_file():
        recorded = json.loads(meta.read_text())["run_config"]["split"].get("file")
        if recorded and Path(recorded).is_file():
            return recorded
    raise UsageError(f"no --split given and none found next to {other}")


def _load_model(path):
    try:
        return TripletWatershed.load(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from None


# -- subcommands -----------------------------------------------------------
def cmd_make_synth(args):
    if args.classes < 2:
        raise UsageError("--classes must be >= 2")
    if min(args.h, args.w, args.bands) < 1 or args.h * args.w < args.classes:
        raise UsageError("invalid image dimensions")
    if args.noise < 0 or not 0 <= args.unlabeled_frac < 1:
        raise UsageError("--noise must be >= 0 and --unlabeled-frac in [0, 1)")
    cfg = RunConfig("make-synth", seed=args.seed,
                    extra={k: getattr(args, k) for k in
                           ("h", "w", "bands", "classes", "noise", "separation",
                            "unlabeled_frac")})
    ds = make_synthetic(args.h, args.w, args.bands, args.classes, args.noise, rng=args.seed,
                        separation=args.separation, unlabeled_frac=args.unlabeled_frac)
    save_dataset(ds, args.out, {"run_config": cfg.to_dict()})
    print(json.dumps({"class_sizes": ds.class_sizes(), "unlabeled": int((ds.labels == 0).sum())}))
    return 0


def _train_one(args, out, seed, params, split_spec, cfg):
    """Train into ``out``; returns (estimator, dataset, split)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(args.data)
    split_seed, model_seed = _seeds(seed, 2)
    sp = _make_split(ds, split_spec, split_seed)
    y = sp.training_target(ds.labels)
    if getattr(args, "resume", None):
        est = _load_model(args.resume)
        est.set_params(warm_start=True, epochs=args.epochs, n_jobs=args.threads)
    else:
        est = TripletWatershed(random_state=model_seed, n_jobs=args.threads, **params)
    est.fit(ds.cube, y)
    est.save(out / "model.twnet", cfg.to_dict())
    with open(out / "train_log.jsonl", "w") as fh:
        fh.write(json.dumps({"run_config": cfg.to_dict()}, sort_keys=True) + "\n")
        for rec in est.history_:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    sp.save(out / "split.u8")
    _write_json(out / "split.json", {
        "run_config": cfg.to_dict(), "shape": list(ds.labels.shape), "dtype": "u8",
        "flags": {"excluded": 0, "train": 1, "test": 2},
        "train_counts": sp.train_counts, "test_counts": sp.test_counts})
    return est, ds, sp


def cmd_train(args):
    if args.resume:
        _need_file(args.resume, "model file")
    _need_dataset(args.data)
    params = _estimator_params(args)
    split_spec = _split_spec(args)
    cfg = RunConfig("train", data=args.data, model=args.resume, seed=args.seed,
                    split=split_spec, estimator=params)
    est, _, _ = _train_one(args, args.out, args.seed, params, split_spec, cfg)
    last = est.history_[-1].to_dict() if est.history_ else {}
    print(json.dumps({"n_params": est.model_.n_params, "epochs_run": len(est.history_),
                      "out_of_box": last.get("out_of_box"), "mean_loss": last.get("mean_loss")}))
    return 0


def _predict_with(est, ds, sp, out, cfg, votes_csv=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    est.prepare_graph(ds.cube, sp.training_target(ds.labels))
    pred, votes, _ = est.predict_votes(ds.cube)
    (out / "pred.u16").write_bytes(np.ascontiguousarray(pred, dtype="<u2").tobytes())
    _write_json(out / "pred.json", {
        "run_config": cfg.to_dict(), "height": int(pred.shape[0]), "width": int(pred.shape[1]),
        "dtype": "u16le", "order": "row-major HW", "ensemble": est.ensemble_config().to_dict(),
        "orphan_policy": "nearest seed by pass value, ties to lowest class",
        "orphan_vertices": est.orphan_vertices()})
    if votes_csv:
        with open(votes_csv, "w") as fh:
            votes_to_csv(votes, fh)
    return pred


def cmd_predict(args):
    _need_file(args.model, "model file")
    _need_dataset(args.data)
    split_path = _default_split(args.split, args.model)
    ens = _ensemble_params(args)
    est = _load_model(args.model)
    cfg = RunConfig("predict", data=args.data, model=args.model, seed=args.seed,
                    split={"file": split_path}, estimator=ens)
    est.set_params(n_jobs=args.threads, **ens)
    ds = load_dataset(args.data)
    sp = SplitMask.load(split_path, ds.labels.shape, ds.labels)
    _predict_with(est, ds, sp, args.out, cfg, args.votes_csv)
    print(json.dumps({"pred": str(Path(args.out) / "pred.u16")}))
    return 0


def _map_for(est, ds, subsample, seed):
    coords = np.argwhere(ds.labels != 0)
    emb = est.transform(ds.cube)[coords[:, 0], coords[:, 1]]
    truth = ds.labels[coords[:, 0], coords[:, 1]]
    k = subsample if subsample is not None else default_map_subsample(len(coords))
    value, n_q, skipped = mean_average_precision(emb, truth, k, rng=seed)
    return {"map": value, "map_queries": n_q, "map_skipped": skipped}


def _report(ds, sp, pred, cfg, out, map_info=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = compute_metrics(pred, ds.labels, sp, n_classes=ds.n_classes)
    d = report.to_dict()
    table = [{"class": c, "train_n": sp.train_counts.get(c, 0), "test_n": sp.test_counts.get(c, 0),
              "accuracy": report.per_class.get(c)} for c in range(1, ds.n_classes + 1)]
    d.update(map_info or {})
    d["per_class_table"] = table
    d["run_config"] = cfg.to_dict()
    _write_json(out / "report.json", d)
    with open(out / "report.csv", "w") as fh:
        fh.write("class,train_n,test_n,accuracy\n")
        for row in table:
            acc = "" if row["accuracy"] is None else repr(row["accuracy"])
            fh.write(f"{row['class']},{row['train_n']},{row['test_n']},{acc}\n")
    return d


def cmd_eval(args):
    _need_dataset(args.data)
    if args.pred is None and not args.map:
        raise UsageError("give --pred and/or --map")
    if args.map:
        _need_file(args.model, "model file (needed by --map)")
    if args.pred:
        _need_file(args.pred, "prediction file")
    split_path = args.split
    if args.pred:
        split_path = _default_split(args.split, args.pred)
    cfg = RunConfig("eval", data=args.data, model=args.model, seed=args.seed,
                    split={"file": split_path} if split_path else {},
                    extra={"pred": args.pred, "map": args.map,
                           "map_subsample": args.map_subsample})
    ds = load_dataset(args.data)
    map_info = None
    if args.map:
        map_info = _map_for(_load_model(args.model), ds, args.map_subsample, args.seed)
    if args.pred is None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "report.json", {**map_info, "run_config": cfg.to_dict()})
        print(json.dumps(map_info))
        return 0
    raw = Path(args.pred).read_bytes()
    if len(raw) != 2 * ds.labels.size:
        raise UsageError(f"prediction size mismatch: expected {2 * ds.labels.size} bytes, "
                         f"got {len(raw)}")
    pred = np.frombuffer(raw, dtype="<u2").reshape(ds.labels.shape).astype(np.int64)
    sp = SplitMask.load(split_path, ds.labels.shape, ds.labels)
    d = _report(ds, sp, pred, cfg, args.out, map_info)
    print(json.dumps({k: d[k] for k in ("oa", "aa", "kappa", "map") if k in d}))
    return 0


def cmd_graph_stats(args):
    _need_dataset(args.data)
    split_spec = _split_spec(args)
    ds = load_dataset(args.data)
    b = ds.bands
    k = args.pca_k or b
    if not 1 <= k <= b:
        raise UsageError(f"--pca-k must be in [1, {b}]")
    cube = ds.cube.astype(np.float64)
    Z = fit_pca(cube, k).transform(cube.reshape(-1, b)).reshape(ds.height, ds.width, k)
    dims = min(args.emst_dims, k)
    es = build_edge_set(ds.labels, Z, dims)
    g = es.to_graph(Z[es.coords[:, 0], es.coords[:, 1], :dims])
    comps = g.connected_components()
    sp = _make_split(ds, split_spec, _seeds(args.seed, 2)[0])
    seeded = np.unique(comps[sp.train[es.coords[:, 0], es.coords[:, 1]]])
    stats = {"n_vertices": es.n_vertices, "n_adjacency_edges": len(es.adjacency_edges),
             "n_emst_edges": len(es.emst_edges), "n_combined": len(es.edges),
             "n_connected_components": int(len(np.unique(comps))),
             "orphan_components": int(len(np.setdiff1d(np.unique(comps), seeded)))}
    if args.dump:
        Path(args.dump).write_text(g.to_text())
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_run(args):
    _need_dataset(args.data)
    params = _estimator_params(args)
    ens = _ensemble_params(args)
    split_spec = _split_spec(args)
    out = Path(args.out)
    rows = []
    for i, seed in enumerate(_seeds(args.seed, args.repeats)):
        cfg = RunConfig("run", data=args.data, seed=args.seed,
                        repeats=args.repeats, split=split_spec,
                        estimator={**params, **ens}, extra={"repeat": i, "repeat_seed": seed})
        est, ds, sp = _train_one(args, out / f"run_{i}", seed, {**params, **ens}, split_spec, cfg)
        pred = _predict_with(est, ds, sp, out / f"run_{i}", cfg, args.votes_csv and
                             str(out / f"run_{i}" / Path(args.votes_csv).name))
        map_info = _map_for(est, ds, args.map_subsample, seed) if args.map else None
        d = _report(ds, sp, pred, cfg, out / f"run_{i}", map_info)
        rows.append({k: d.get(k) for k in ("oa", "aa", "kappa", "map")})
    summary = {"runs": rows, "run_config": RunConfig(
        "run", data=args.data, seed=args.seed, repeats=args.repeats,
        split=split_spec, estimator={**params, **ens}).to_dict()}
    for key in ("oa", "aa", "kappa", "map"):
        vals = [r[key] for r in rows if r[key] is not None and not np.isnan(r[key])]
        if vals:
            summary[key] = {"mean": statistics.fmean(vals),
                            "std": statistics.stdev(vals) if len(vals) > 1 else 0.0}
    _write_json(out / "summary.json", summary)
    print(json.dumps({k: summary[k] for k in ("oa", "aa", "kappa", "map") if k in summary}))
    return 0


COMMANDS = {"make-synth": cmd_make_synth, "train": cmd_train, "predict": cmd_predict,
            "eval": cmd_eval, "graph-stats": cmd_graph_stats, "run": cmd_run}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        _check_common(args)
        # BLAS stays single-threaded so results never depend on --threads
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
