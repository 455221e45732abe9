"""Command-line entry point: ``cvgeo {gen,train,eval,ablate,gradcam,orient}``.

Each invocation writes into one run directory (``--out``): the resolved
config, machine-readable outputs (JSON, CSV), SVG figures and ``run.log``.
Only ``run.log`` carries timestamps, so reruns are otherwise byte-identical.

Exit codes: 0 ok, 1 other failure, 2 configuration, 3 data or shape,
4 training divergence.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError, CvgeoError, ShapeError

log = logging.getLogger("cvgeo")


@dataclass
class EvalOptions:
    ks: list = field(default_factory=lambda: [1, 5, 10])
    curve_k: int = 0  # 0 means the whole reference set


@dataclass
class OrientOptions:
    tau: float = 0.5
    bins: int = 360
    smooth: bool = False
    baseline: bool = True
    baseline_epochs: int = 200


@dataclass
class AblateOptions:
    grid: str = "alignment"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_train: int = 1000
    n_val: int = 500


@dataclass
class ValOptions:
    n_pairs: int = 200
    seed: int = 1


SECTIONS = {
    "synthetic": None,  # SyntheticConfig
    "val": ValOptions,
    "training": None,   # TrainingConfig
    "eval": EvalOptions,
    "orientation": OrientOptions,
    "ablate": AblateOptions,
}


def _strict(cls, d, section):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError(f"unknown config key: {section}.{key}")
    return cls(**d)


@dataclass
class RunConfig:
    synthetic: dict = field(default_factory=dict)
    val: ValOptions = field(default_factory=ValOptions)
    training: dict = field(default_factory=dict)
    eval: EvalOptions = field(default_factory=EvalOptions)
    orientation: OrientOptions = field(default_factory=OrientOptions)
    ablate: AblateOptions = field(default_factory=AblateOptions)

    @classmethod
    def from_dict(cls, doc):
        from .data import SyntheticConfig
        from .losses import LossConfig
        from .trainer import TrainingConfig

        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        for key in doc:
            if key not in SECTIONS:
                raise ConfigError(f"unknown config key: {key}")
        syn = dict(doc.get("synthetic", {}))
        _strict(SyntheticConfig, syn, "synthetic")
        tr = dict(doc.get("training", {}))
        if "loss" in tr:
            _strict(LossConfig, tr["loss"], "training.loss")
        _strict(TrainingConfig, tr, "training")
        return cls(
            synthetic=syn,
            val=_strict(ValOptions, doc.get("val", {}), "val"),
            training=tr,
            eval=_strict(EvalOptions, doc.get("eval", {}), "eval"),
            orientation=_strict(OrientOptions, doc.get("orientation", {}), "orientation"),
            ablate=_strict(AblateOptions, doc.get("ablate", {}), "ablate"),
        )

    def synthetic_config(self):
        from .data import SyntheticConfig
        return SyntheticConfig.from_dict(self.synthetic)

    def training_config(self):
        from .trainer import TrainingConfig
        return TrainingConfig.from_dict(self.training)

    def as_dict(self):
        return {
            "synthetic": asdict(self.synthetic_config()),
            "val": asdict(self.val),
            "training": self.training_config().to_dict(),
            "eval": asdict(self.eval),
            "orientation": asdict(self.orientation),
            "ablate": asdict(self.ablate),
        }


def load_config(path):
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


def apply_overrides(cfg, args):
    from .losses import LossConfig

    tr = dict(cfg.training)
    if getattr(args, "seed", None) is not None:
        cfg.synthetic["seed"] = args.seed
        tr["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        tr["epochs"] = args.epochs
        tr["warmup_epochs"] = min(tr.get("warmup_epochs", 30), args.epochs)
    if getattr(args, "mining", None):
        tr["mining"] = args.mining
    if getattr(args, "regime", None):
        tr["alignment_regime"] = "random_rotate" if args.regime == "rotate" else "aligned"
    if getattr(args, "loss", None):
        kind = "weighted_soft" if args.loss == "eq2" else "binomial_asym"
        loss = dict(tr.get("loss", {}))
        loss["kind"] = kind
        tr["loss"] = loss
        LossConfig.from_dict(loss)
    cfg.training = tr
    if getattr(args, "tau", None) is not None:
        if not 0.0 <= args.tau <= 1.0:
            raise ConfigError(f"--tau must lie in [0, 1], got {args.tau}")
        cfg.orientation.tau = args.tau
    if getattr(args, "bins", None) is not None:
        if args.bins < 2:
            raise ConfigError("--bins must be at least 2")
        cfg.orientation.bins = args.bins
    # validate the merged result before any work starts
    cfg.synthetic_config()
    cfg.training_config()
    return cfg


# ---------------------------------------------------------------- outputs

class RunDir:
    def __init__(self, path):
        self.path = path
        os.makedirs(path, exist_ok=True)

    def file(self, name):
        return os.path.join(self.path, name)

    def json(self, name, obj):
        with open(self.file(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def csv(self, name, rows, header=None):
        rows = list(rows)
        if header is None:
            header = list(rows[0]) if rows else []
        with open(self.file(name), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: r[k] for k in header})


def _setup_logging(run):
    log.handlers.clear()
    log.setLevel(logging.INFO)
    fh = logging.FileHandler(run.file("run.log"), mode="w")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(fh)
    return fh


def _say(msg):
    print(msg)
    log.info(msg)


def _pairs_from(args, cfg, split="train", manifest=None):
    from .data import generate_synthetic, load_manifest
    path = manifest if manifest is not None else getattr(args, "manifest", None)
    if path:
        return load_manifest(path, split).load_pairs()
    scfg = cfg.synthetic_config()
    if split == "val":
        scfg = replace(scfg, n_pairs=cfg.val.n_pairs, seed=scfg.seed + cfg.val.seed + 1000,
                       id_prefix="v")
    return generate_synthetic(scfg)


# ---------------------------------------------------------------- commands

def cmd_gen(args, cfg, run):
    from .data import generate_synthetic, write_dataset
    scfg = cfg.synthetic_config()
    train_path = write_dataset(generate_synthetic(scfg), run.path, "manifest.json")
    val = _pairs_from(args, cfg, "val")
    val_path = write_dataset(val, run.path, "manifest_val.json")
    _say(f"wrote {scfg.n_pairs} training pairs to {train_path}")
    _say(f"wrote {len(val)} validation pairs to {val_path}")
    return {"train_manifest": "manifest.json", "val_manifest": "manifest_val.json",
            "n_train": scfg.n_pairs, "n_val": len(val)}


def _epoch_rows(report):
    return [asdict(e) for e in report.epochs]


def cmd_train(args, cfg, run):
    from . import plotting
    from .model import save_checkpoint
    from .retrieval import recall_curve
    from .trainer import embed_pairs, evaluate_pairs, similarity_stats, train

    tcfg = cfg.training_config()
    pairs = _pairs_from(args, cfg, "train")
    val = _pairs_from(args, cfg, "val", manifest=getattr(args, "val_manifest", None))

    def progress(rec):
        log.info("epoch %d %s loss=%.6f top1=%.4f seconds=%.2f",
                 rec.epoch, rec.loss_kind, rec.loss, rec.recall1, rec.seconds)

    params, report = train(pairs, tcfg, val, progress)
    save_checkpoint(run.file("model.cvck"), params)
    rep = evaluate_pairs(params, val)
    stats = similarity_stats(*embed_pairs(params, val))
    rows = [{k: v for k, v in r.items() if k != "seconds"} for r in _epoch_rows(report)]
    run.csv("epochs.csv", rows)
    curve = recall_curve(rep, len(val))
    run.csv("recall_curve.csv", [{"k": k, "recall": r} for k, r in curve])
    summary = {"recall": rep.as_dict(), "margins": report.as_dict()["margins"],
               **{k: stats[k] for k in ("sp_mean", "sp_var", "sn_mean", "sn_var")}}
    plotting.convergence(report, run.file("convergence.svg"))
    plotting.similarity_distributions(stats["s_p"], stats["s_n"], run.file("similarities.svg"))
    plotting.recall_curve(curve, run.file("recall_curve.svg"), len(val))
    _say(f"top-1 {rep.recall[1]:.4f}  top-1% {rep.recall_top1pct:.4f}  "
         f"({len(val)} validation pairs)")
    return summary


def cmd_eval(args, cfg, run):
    from . import plotting
    from .model import load_checkpoint
    from .retrieval import recall_at, recall_curve
    from .trainer import evaluate_pairs

    params = load_checkpoint(args.checkpoint)
    pairs = _pairs_from(args, cfg, "val")
    C = params.dims[0]
    if pairs[0].street.shape[-1] != C:
        raise ShapeError(f"data has {pairs[0].street.shape[-1]} channels, "
                         f"checkpoint expects {C}")
    rep = evaluate_pairs(params, pairs)
    ks = sorted(set(int(k) for k in cfg.eval.ks))
    extra = recall_at(rep.ranks, ks, rep.n_refs)
    k_max = cfg.eval.curve_k or len(pairs)
    curve = recall_curve(rep, k_max)
    run.csv("recall_curve.csv", [{"k": k, "recall": r} for k, r in curve])
    run.csv("ranks.csv", [{"id": p.id, "rank": int(r)} for p, r in zip(pairs, rep.ranks)])
    plotting.recall_curve(curve, run.file("recall_curve.svg"), len(pairs))
    _say(f"top-1 {rep.recall[1]:.4f}  top-1% {rep.recall_top1pct:.4f}  "
         f"(k={rep.top1pct_k}, {len(pairs)} pairs)")
    out = rep.as_dict()
    out["recall"] = {str(k): v for k, v in extra.recall.items()}
    return out


def cmd_ablate(args, cfg, run):
    from . import experiments as X
    from . import plotting

    grid = args.grid or cfg.ablate.grid
    seeds = [args.seed] if args.seed is not None else list(cfg.ablate.seeds)
    preset = {"alignment": ({}, X.ALIGNMENT_TRAINING),
              "mining": (X.MINING_DATA, X.MINING_TRAINING),
              "loss": ({}, X.LOSS_TRAINING)}.get(grid, ({}, {}))
    syn = {**X.ABLATION_DATA, **preset[0], **cfg.synthetic}
    syn.pop("seed", None)
    tr = {**X.ABLATION_TRAINING, **preset[1], **cfg.training}
    tr.pop("seed", None)
    scfg, tcfg = X.synthetic(syn), X.training(tr)
    n_train, n_val = cfg.ablate.n_train, cfg.ablate.n_val
    if grid == "alignment":
        rows = X.alignment_grid(scfg, tcfg, seeds, n_train, n_val)
        pattern = X.alignment_pattern(rows)
        mean = {}
        for r in rows:
            mean.setdefault(r["train"], {}).setdefault(r["val"], []).append(r["top1"])
        table = {t: {v: sum(x) / len(x) for v, x in c.items()} for t, c in mean.items()}
        plotting.alignment_matrix(table, run.file("alignment_matrix.svg"))
        summary = {"table": table, "pattern": {str(k): v for k, v in pattern.items()}}
        for t in sorted(table):
            _say(f"train {t:>13}: aligned {table[t]['aligned']:.3f}  "
                 f"rotated {table[t]['rotated']:.3f}")
    elif grid == "mining":
        rows = X.mining_grid(scfg, tcfg, seeds, n_train=n_train, n_val=n_val)
        summary = _grid_summary(rows, "mining")
    elif grid == "loss":
        rows = X.loss_grid(scfg, tcfg, seeds, n_train, n_val)
        summary = _grid_summary(rows, "loss")
    else:
        raise ConfigError(f"unknown ablation grid {grid!r}")
    run.csv(f"{grid}_grid.csv", rows)
    return {"grid": grid, "seeds": seeds, **summary}


def _grid_summary(rows, key):
    out = {}
    for r in rows:
        out.setdefault(r[key], []).append(r)
    summary = {}
    for name, rs in out.items():
        summary[name] = {m: sum(r[m] for r in rs) / len(rs)
                         for m in ("top1", "top1pct", "sp_var", "sn_var")}
        _say(f"{key} {name:>7}: top-1 {summary[name]['top1']:.3f}  "
             f"top-1% {summary[name]['top1pct']:.3f}  "
             f"var(s_p) {summary[name]['sp_var']:.5f}  var(s_n) {summary[name]['sn_var']:.5f}")
    return {"mean": summary}


def cmd_gradcam(args, cfg, run):
    from . import plotting
    from .explain import pair_maps, write_map_cvfm, write_pgm
    from .model import load_checkpoint

    params = load_checkpoint(args.checkpoint)
    pairs = _pairs_from(args, cfg, "val")
    wanted = args.ids.split(",") if args.ids else [p.id for p in pairs[:4]]
    by_id = {p.id: p for p in pairs}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise ConfigError(f"pair id not in manifest: {missing[0]}")
    exported = []
    for pid in wanted:
        for amap in pair_maps(params, by_id[pid]):
            stem = f"{pid}_{amap.view}"
            write_pgm(run.file(stem + ".pgm"), amap)
            write_map_cvfm(run.file(stem + ".cvfm"), amap)
            plotting.activation_map(amap.values, run.file(stem + ".svg"), stem)
            exported.append({"id": pid, "view": amap.view, "max": float(amap.values.max()),
                             "mean": float(amap.values.mean())})
    run.csv("maps.csv", exported)
    _say(f"exported {len(exported)} activation maps")
    return {"maps": exported}


def cmd_orient(args, cfg, run):
    from . import plotting
    from .model import load_checkpoint
    from .orientation import (RegressionConfig, error_distribution, estimate_orientation,
                              train_regression_baseline)

    params = load_checkpoint(args.checkpoint)
    pairs = _pairs_from(args, cfg, "val")
    o = cfg.orientation
    est = [estimate_orientation(params, p, o.tau, o.bins, o.smooth) for p in pairs]
    rows = [{"id": p.id, "phi_deg": e.phi_deg, "peak": e.correlation_peak,
             "secondary_deg": e.secondary_peak[0] if e.secondary_peak else "",
             "truth_deg": "" if p.rotation_deg is None else p.rotation_deg}
            for p, e in zip(pairs, est)]
    run.csv("estimates.csv", rows)
    out = {"n": len(pairs), "tau": o.tau, "bins": o.bins}
    if all(p.rotation_deg is not None for p in pairs):
        dists = {"activation histograms": error_distribution(est, [p.rotation_deg for p in pairs])}
        if o.baseline and len(pairs) >= 4:
            half = len(pairs) // 2
            _, dists["regression baseline"] = train_regression_baseline(
                params, pairs[:half], pairs[half:],
                RegressionConfig(epochs=o.baseline_epochs))
        plotting.error_histogram(dists, run.file("orientation_errors.svg"))
        out["errors"] = {k: d.as_dict() for k, d in dists.items()}
        for name, d in dists.items():
            _say(f"{name}: {100 * d.within_3_5:.1f}% within 3.5 deg, "
                 f"{100 * d.near_180:.1f}% near 180 deg")
    else:
        if o.baseline:
            log.info("no ground-truth rotations; skipping error report")
        _say(f"estimated {len(pairs)} orientations")
    plotting.correlation_signal(est[0].signal, run.file(f"{pairs[0].id}_correlation.svg"),
                                pairs[0].rotation_deg)
    return out


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcam": cmd_gradcam, "orient": cmd_orient}


def build_parser():
    p = argparse.ArgumentParser(prog="cvgeo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="run directory")
        return sp

    common(sub.add_parser("gen", help="write a synthetic dataset and manifests"))
    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--manifest", help="training manifest (default: generate from config)")
    t.add_argument("--val-manifest", dest="val_manifest")
    t.add_argument("--epochs", type=int)
    t.add_argument("--mining", choices=["none", "batch", "global"])
    t.add_argument("--loss", choices=["eq2", "eq4"])
    t.add_argument("--regime", choices=["aligned", "rotate"])
    e = common(sub.add_parser("eval", help="retrieval recall of a checkpoint"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest")
    a = common(sub.add_parser("ablate", help="alignment, mining or loss grid"))
    a.add_argument("--grid", choices=["alignment", "mining", "loss"])
    a.add_argument("--epochs", type=int)
    a.add_argument("--mining", choices=["none", "batch", "global"])
    a.add_argument("--loss", choices=["eq2", "eq4"])
    g = common(sub.add_parser("gradcam", help="export activation maps"))
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--manifest")
    g.add_argument("--ids", help="comma-separated pair ids")
    o = common(sub.add_parser("orient", help="orientation estimates and error report"))
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--manifest")
    o.add_argument("--tau", type=float)
    o.add_argument("--bins", type=int)
    return p


def thread_cap(env=None):
    env = os.environ if env is None else env
    raw = env.get("CVGEO_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CVGEO_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CVGEO_THREADS must be a positive integer, got {raw!r}")
    return n


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


def main(argv=None):
    from ._perf import tune_allocator

    args = build_parser().parse_args(argv)
    handler = None
    try:
        n = thread_cap()
        if n is not None:
            _limit_threads(n)
        tune_allocator()
        cfg = apply_overrides(load_config(args.config), args)
        run = RunDir(args.out)
        handler = _setup_logging(run)
        log.info("command %s", " ".join(sys.argv[1:] if argv is None else argv))
        run.json("config.json", {"command": args.command, **cfg.as_dict()})
        result = COMMANDS[args.command](args, cfg, run)
        run.json("report.json", result)
        return 0
    except CvgeoError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.exception("unexpected failure")
        return 1
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
