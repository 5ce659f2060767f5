"""Command-line surface: train, transform, evaluate, export-plot."""

import argparse
import sys

import numpy as np

from . import data_io, metrics, trainer
from .perf import tune_malloc


def _build_parser():
    p = argparse.ArgumentParser(
        prog="deepembed",
        description="Parametric embedding networks with staged t-SNE/UMAP "
                    "training, out-of-sample projection, and quality metrics.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model from a config and a dataset")
    t.add_argument("--config", help="key=value config file (defaults if omitted)")
    t.add_argument("--data", help="training data (IDX or CSV)")
    t.add_argument("--labels", help="optional label file")
    t.add_argument("--out", required=True, help="output model path (.drem)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--log", help="also write training log lines to this file")
    t.add_argument("--plot", help="render the loss curves to this image file")

    x = sub.add_parser("transform", help="project data with a trained model")
    x.add_argument("--model", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--labels", help="optional label file carried into the CSV")
    x.add_argument("--out", required=True, help="embedding CSV path")
    x.add_argument("--config", help="config file for data-parsing options")

    e = sub.add_parser("evaluate", help="score an embedding against its data")
    e.add_argument("--data", required=True, help="high-dimensional data")
    e.add_argument("--labels", help="optional label file")
    e.add_argument("--embedding", required=True, help="embedding CSV")
    e.add_argument("--out", required=True, help="report CSV path")
    e.add_argument("--config", help="config file for data-parsing options")
    e.add_argument("--knn", type=int, default=7, help="neighborhood size")
    e.add_argument("--subsample", type=int,
                   help="evaluate on this many rows drawn with --seed")
    e.add_argument("--seed", type=int, default=0, help="subsampling seed")
    e.add_argument("--plot", help="render a labeled scatter next to the report")

    s = sub.add_parser("export-plot", help="render an embedding CSV as SVG")
    s.add_argument("--embedding", required=True)
    s.add_argument("--out", required=True, help="SVG path")
    return p


def _load_cfg(args):
    cfg = data_io.load_config(args.config) if args.config else dict(
        data_io.CONFIG_DEFAULTS)
    for key in ("data", "labels", "out"):
        value = getattr(args, key, None)
        if value:
            cfg[key] = value
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _load_data(cfg, require_data=True):
    if not cfg["data"]:
        raise ValueError("no data file given (--data or config key 'data')")
    labels = cfg["labels"] or None
    return data_io.load_dataset(cfg["data"], labels, cfg)


def cmd_train(args):
    cfg = _load_cfg(args)
    ds = _load_data(cfg)
    ds = data_io.normalize(ds, cfg["normalize"])
    spec = data_io.build_spec(cfg, ds.X.shape[1])
    tc = data_io.build_train_config(cfg)

    sinks = [lambda line: print(line, flush=True)]
    log_file = open(args.log, "w") if args.log else None
    if log_file:
        sinks.append(lambda line: (log_file.write(line + "\n"), log_file.flush()))

    def sink(line):
        for s in sinks:
            s(line)

    sink(f"training on {ds.n} rows x {ds.X.shape[1]} features, "
         f"seed={cfg['seed']}")
    try:
        result = trainer.run_dre(ds.X, tc, spec=spec, sink=sink)
    finally:
        if log_file:
            log_file.close()
    # echo the tunables, not the file paths: the same data and seed must
    # yield byte-identical models wherever they are written
    echo = {k: str(v) for k, v in cfg.items()
            if k not in ("data", "labels", "out")}
    artifact = data_io.ModelArtifact(params=result.params, config=echo,
                                     norm=ds.norm)
    data_io.save_model(artifact, cfg["out"])
    print(f"model written to {cfg['out']}")
    if args.plot:
        from . import figures
        figures.loss_figure(result.log, args.plot)
        print(f"loss curves written to {args.plot}")
    return 0


def cmd_transform(args):
    cfg = _load_cfg(args)
    artifact = data_io.load_model(args.model)
    ds = _load_data(cfg)
    X = data_io.apply_normalizer(artifact.norm, ds.X)
    Y = trainer.embed(artifact.params, X,
                      batch_size=int(artifact.config.get("batch_size", 0)) or None)
    data_io.export_embedding(Y, ds.labels, cfg["out"])
    print(f"embedding ({Y.shape[0]} x {Y.shape[1]}) written to {cfg['out']}")
    return 0


def cmd_evaluate(args):
    cfg = _load_cfg(args)
    cfg["out"] = args.out
    ds = _load_data(cfg)
    Y, csv_labels = data_io.read_embedding_csv(args.embedding)
    labels = ds.labels if ds.labels is not None else csv_labels
    if Y.shape[0] != ds.n:
        raise ValueError(f"data has {ds.n} rows but embedding has {Y.shape[0]}")
    X = ds.X
    extra = [f"k={args.knn}", f"n={ds.n}"]
    if args.subsample and args.subsample < ds.n:
        rng = np.random.default_rng(args.seed)
        keep = np.sort(rng.choice(ds.n, size=args.subsample, replace=False))
        X, Y = X[keep], Y[keep]
        labels = labels[keep] if labels is not None else None
        extra += [f"subsample={args.subsample}", f"seed={args.seed}"]
    report = metrics.full_report(metrics.LabeledEmbedding(X, Y, labels,
                                                          k=args.knn))
    text = report.to_key_values() + "".join(f"{e}\n" for e in extra[1:])
    sys.stdout.write(text)
    data_io.write_text(args.out, report.to_csv())
    print(f"report written to {args.out}")
    if args.plot:
        from . import figures
        figures.scatter_figure(Y, labels, args.plot)
        print(f"scatter written to {args.plot}")
    return 0


def cmd_export_plot(args):
    Y, labels = data_io.read_embedding_csv(args.embedding)
    data_io.export_scatter_svg(Y, labels, args.out)
    print(f"SVG scatter written to {args.out}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "transform": cmd_transform,
    "evaluate": cmd_evaluate,
    "export-plot": cmd_export_plot,
}


def main(argv=None) -> int:
    tune_malloc()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
