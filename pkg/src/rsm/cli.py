"""Command-line entry point: ``rsm <subcommand> [options]``.

Exit codes: 0 ok, 1 unexpected error, 2 config error, 3 data error,
4 numeric divergence, 5 stale artifacts. Failures print one JSON object on
stderr.
"""

import argparse
import json
import logging
import os
import shutil
import sys
import warnings

from . import pipeline
from .config import load_config, override
from .errors import ConfigError, RSMError

log = logging.getLogger("rsm")


def _global_flags(parser, top):
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--seed", type=int, default=d(None), help="global seed")
    parser.add_argument("--config", default=d(None), help="TOML config file")
    parser.add_argument("--out-dir", default=d(None), help="artifact directory")
    parser.add_argument("--quiet", action="store_true", default=d(False),
                        help="only print errors")


def build_parser():
    p = argparse.ArgumentParser(prog="rsm", description=__doc__.splitlines()[0])
    _global_flags(p, top=True)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, out_help=None):
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp, top=False)
        if out_help:
            sp.add_argument("--out", help=out_help)
        return sp

    g = add("generate", "write a synthetic cohort CSV plus truth.json",
            "cohort CSV path (default <out-dir>/cohort.csv)")
    g.add_argument("--n", type=int, help="number of patients")

    t = add("train", "split, standardize, and train the survival network",
            "model path; its directory becomes the artifact directory")
    t.add_argument("--cohort", help="cohort CSV or .rsmc (default <out-dir>/cohort.csv)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lambda", dest="lam", type=float, help="L1 strength on the gate")
    t.add_argument("--model-only", action="store_true",
                   help="stop after the network; skip significance, clustering and indexing")

    s = add("significance", "rank gate weights and select feature sets", "report path")
    s.add_argument("--model", help="model file (default <out-dir>/model.rsmn)")
    s.add_argument("--alpha", type=float)
    s.add_argument("--step", type=int)
    s.add_argument("--top-fraction", type=float)

    c = add("cluster", "cluster training PDFs by summary statistics", "cluster model path")
    c.add_argument("--pdfs", help="PDF file (default <out-dir>/pdfs.bin)")
    c.add_argument("--kmax", type=int)

    i = add("index", "fit the projection basis and build the similarity index", "index path")
    i.add_argument("--model", help="model file (default <out-dir>/model.rsmn)")
    i.add_argument("--method", choices=("pca", "kpca", "euclidean"))
    i.add_argument("--bandwidth", type=float)
    i.add_argument("--cutoff", type=float)

    e = add("explain", "retrieve similar training patients for query patients",
            "explanation JSON path (default <out-dir>/explanation.json)")
    e.add_argument("--patient", required=True, help="query CSV (outcome columns optional)")
    e.add_argument("--model", help="model file (default <out-dir>/model.rsmn)")
    e.add_argument("--index", help="index file (default <out-dir>/index.rsmi)")
    e.add_argument("--method", choices=("pca", "kpca", "euclidean"))
    e.add_argument("--k", type=int)

    v = add("evaluate", "C^td and MAE at event-time quantiles",
            "report path (default <out-dir>/evaluation.json)")
    v.add_argument("--model", help="model file (default <out-dir>/model.rsmn)")
    v.add_argument("--cohort", help="evaluation cohort (default <out-dir>/test.csv)")
    v.add_argument("--bootstrap", type=int, default=0, metavar="N",
                   help="percentile intervals from N resamples")

    add("plot-data", "write CSV series for plotting")
    add("pipeline", "run the whole train path")
    return p


def _config(args):
    cfg = load_config(args.config, seed_override=args.seed)
    out_dir = args.out_dir
    if out_dir is None:
        # an explicit artifact path locates the artifact directory
        for attr in ("index", "model", "pdfs"):
            path = getattr(args, attr, None)
            if path:
                out_dir = os.path.dirname(os.path.abspath(path))
                break
        else:
            if args.command == "train" and args.out:
                out_dir = os.path.dirname(os.path.abspath(args.out))
    if out_dir is not None:
        cfg = override(cfg, paths={"out_dir": out_dir})
    return cfg


def _echo(args, text):
    if not args.quiet:
        print(text)


def _summary(manifest):
    lines = []
    for name, entry in sorted(manifest.get("artifacts", {}).items()):
        lines.append(f"{entry['file']:<14} {entry['sha256'][:16]}")
    return "\n".join(lines)


def _same(a, b):
    return os.path.abspath(a) == os.path.abspath(b)


def _export(out, name, dest):
    """Copy a canonical artifact to a user-chosen path as well."""
    if dest and not _same(dest, out.path(name)):
        shutil.copyfile(out.path(name), dest)


def _check_input(out, name, given):
    """True when ``given`` is absent or is the canonical artifact of ``out``."""
    return given is None or _same(given, out.path(name))


def cmd_generate(args, cfg):
    dg = cfg.datagen
    if args.n is not None:
        dg = override(cfg, datagen={"n_samples": args.n}).datagen
    out = args.out or os.path.join(cfg.paths.out_dir, pipeline.FILES["cohort"])
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    truth = os.path.join(os.path.dirname(os.path.abspath(out)), pipeline.FILES["truth"])
    draw = pipeline.generate_cohort(dg, out, truth)
    c = draw.cohort
    _echo(args, f"wrote {len(c)} patients ({int(c.censored.sum())} censored, "
                f"{1 - c.observed.mean():.3f} missing) to {out}")


def cmd_train(args, cfg):
    paths = {}
    if args.cohort:
        paths["cohort"] = args.cohort
    elif cfg.paths.cohort is None:
        default = os.path.join(cfg.paths.out_dir, pipeline.FILES["cohort"])
        if not os.path.exists(default):
            raise ConfigError(f"no cohort given and {default} does not exist; "
                              "run `rsm generate` or pass --cohort")
        paths["cohort"] = default
    train = {}
    if args.epochs is not None:
        train["epochs"] = args.epochs
    if args.lam is not None:
        train["lam"] = args.lam
    cfg = override(cfg, paths=paths, train=train)
    stages = ("train",) if args.model_only else pipeline.STAGES
    manifest = pipeline.run_train_path(cfg, stages=stages)
    _export(pipeline.ArtifactDir(cfg.paths.out_dir), "model", args.out)
    _echo(args, _summary(manifest))


def cmd_significance(args, cfg):
    vals = {k: v for k, v in (("alpha", args.alpha), ("step", args.step),
                              ("top_fraction", args.top_fraction)) if v is not None}
    cfg = override(cfg, significance=vals)
    out = pipeline.ArtifactDir(cfg.paths.out_dir)
    if _check_input(out, "model", args.model):
        pipeline.run_stage(cfg.paths.out_dir, "significance", cfg)
        _export(out, "significance", args.out)
        report = pipeline.load_report(out.path("significance"))
    else:
        dest = args.out or pipeline.FILES["significance"]
        report = pipeline.significance_stage(args.model, dest, cfg.significance)
    _echo(args, f"most significant:  {list(report.most_significant)}\n"
                f"least significant: {list(report.least_significant)}")


def cmd_cluster(args, cfg):
    if args.kmax is not None:
        cfg = override(cfg, cluster={"k_max": args.kmax})
    out = pipeline.ArtifactDir(cfg.paths.out_dir)
    if _check_input(out, "pdfs", args.pdfs):
        pipeline.run_stage(cfg.paths.out_dir, "cluster", cfg)
        _export(out, "clusters", args.out)
        model = pipeline.load_clusters(out.path("clusters"))
    else:
        dest = args.out or pipeline.FILES["clusters"]
        model = pipeline.cluster_stage(args.pdfs, dest, cfg.cluster.k_max,
                                       cfg.seed_for("cluster"))
    _echo(args, f"k = {model.k}; inertia curve: "
                + ", ".join(f"{k}:{v:.4g}" for k, v in model.inertia_curve))


def cmd_index(args, cfg):
    vals = {k: v for k, v in (("method", args.method), ("bandwidth", args.bandwidth),
                              ("cutoff", args.cutoff)) if v is not None}
    cfg = override(cfg, rank=vals)
    out = pipeline.ArtifactDir(cfg.paths.out_dir)
    if not _check_input(out, "model", args.model):
        raise ConfigError("index needs the model inside its artifact directory; "
                          "pass --out-dir instead")
    pipeline.run_stage(cfg.paths.out_dir, "index", cfg)
    _export(out, "index", args.out)
    _echo(args, _summary(out.manifest()))


def cmd_explain(args, cfg):
    if args.k is not None:
        cfg = override(cfg, rank={"k": args.k})
    out = pipeline.ArtifactDir(cfg.paths.out_dir)
    if not (_check_input(out, "model", args.model) and _check_input(out, "index", args.index)):
        raise ConfigError("--model and --index must come from the same artifact directory")
    query = pipeline.load_query(args.patient)
    results = pipeline.run_test_path(cfg, query, method=args.method)
    if args.out and not _same(args.out, out.path("explanation.json")):
        shutil.copyfile(out.path("explanation.json"), args.out)
    _echo(args, "\n\n".join(r.table() for r in results))


def cmd_evaluate(args, cfg):
    out = pipeline.ArtifactDir(cfg.paths.out_dir)
    model = args.model or out.path("model")
    if _same(model, out.path("model")) and os.path.exists(os.path.join(out.root,
                                                                       pipeline.MANIFEST)):
        out.verify(("model",))
    cohort = args.cohort or out.path("test_cohort")
    report = pipeline.evaluate_model(model, cohort, args.bootstrap, cfg.seed)
    dest = args.out or out.path("evaluation.json")
    pipeline._atomic_write(dest, pipeline.dump_json(report.to_dict()))
    lines = [f"{'quantile':>8} {'time':>10} {'C^td':>7} {'MAE':>9}"]
    for r in report.rows:
        lines.append(f"{r.quantile:>8.2f} {r.time:>10.4g} {r.c_index:>7.4f} {r.mae:>9.4g}")
    _echo(args, "\n".join(lines))


def cmd_plot_data(args, cfg):
    pipeline.ArtifactDir(cfg.paths.out_dir).verify()
    written = pipeline.emit_plot_data(cfg.paths.out_dir, cfg)
    _echo(args, "\n".join(written.values()))


def cmd_pipeline(args, cfg):
    manifest = pipeline.run_train_path(cfg)
    _echo(args, _summary(manifest))


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "significance": cmd_significance,
    "cluster": cmd_cluster,
    "index": cmd_index,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "plot-data": cmd_plot_data,
    "pipeline": cmd_pipeline,
}


def _fail(exc, code):
    err = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    stage = getattr(exc, "stage", None)
    if stage:
        err["stage"] = stage
        err["cause"] = type(exc.cause).__name__
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    if args.quiet:
        warnings.simplefilter("ignore")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except RSMError as exc:
        return _fail(exc, exc.exit_code)
    except FileNotFoundError as exc:
        return _fail(exc, 3)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
