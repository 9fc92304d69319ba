"""Command-line entry point: ``twembed <subcommand> ...``.

Exit status: 0 success, 1 validation error, 2 runtime failure,
3 infeasible protocol.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .connectome import WindowSpec, write_phenotype, write_timeseries_csv
from .errors import StageError, TwembedError, ValidationError
from .evalkit import EvalConfig
from .pipeline import (PipelineConfig, build_connectomes, bundled_config_path, embed_from_checkpoint,
                       evaluate_to_file, load_graphs, parse_protocol, run_pipeline, sample_walks_to_file,
                       train_to_dir)
from .report import emit_report
from .synth import RegimeSpec, generate_synthetic_corpus
from .tempwalk import WalkConfig
from .trainer import TrainConfig, read_loss_trace

log = logging.getLogger("twembed")


def cmd_build_connectome(args):
    spec = WindowSpec(args.window, args.stride, args.percentile)
    written = build_connectomes(args.input_dir, spec, args.out)
    print(f"wrote {len(written)} graph(s) to {args.out}")


def cmd_sample_walks(args):
    graphs = load_graphs(args.graphs)
    cfg = WalkConfig(l_max=args.walk_length, walks_per_node=args.walks_per_node, min_length=args.min_length,
                     start_time_policy=args.start_policy, seed=args.seed)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    stats = sample_walks_to_file(graphs, cfg, args.out)
    print(f"wrote {stats['emitted']} walks ({stats['attempted']} attempted) to {args.out}")


def cmd_train(args):
    tcfg = TrainConfig(lambda1=args.lambda1, lambda2=args.lambda2, batch_size=args.batch_size,
                       epochs=args.epochs, lr=args.lr, seed=args.seed)
    enc = {"d": args.dim, "heads": args.heads, "layers": args.layers}
    if args.d_ff is not None:
        enc["d_ff"] = args.d_ff
    if args.max_seq is not None:
        enc["max_seq"] = args.max_seq
    out = train_to_dir(args.walks, enc, tcfg, args.out, n_nodes=args.nodes)
    last = out["result"].trace[-1]
    print(f"final epoch {last['epoch']}: L_TD={last['L_TD']:.4f} L_GS={last['L_GS']:.4f} "
          f"L_total={last['L_total']:.4f}; checkpoint {out['checkpoint']}")


def cmd_embed(args):
    ckpt = args.ckpt
    if os.path.isdir(ckpt):
        ckpt = os.path.join(ckpt, "model.ckpt")
    ids = embed_from_checkpoint(ckpt, args.out)
    print(f"wrote {len(ids)} embeddings to {args.out}")


def cmd_evaluate(args):
    protocol, k = parse_protocol(args.protocol)
    cfg = EvalConfig(protocol=protocol, k=k or 10, seed=args.seed, reg=args.reg, threshold=args.threshold,
                     zscore=not args.no_zscore)
    report = evaluate_to_file(args.embeddings, args.phenotype, cfg, args.out)
    agg = report["aggregate"]
    for m in ("accuracy", "sensitivity", "specificity", "auc"):
        a = agg[m]
        if a["mean"] is None:
            print(f"{m:<12} n/a")
        else:
            print(f"{m:<12} {a['mean']:.4f} ± {a['std']:.4f}")


def cmd_synth(args):
    kinds = (args.class0, args.class1)
    corpus = generate_synthetic_corpus(args.n_subjects, args.regions, args.timepoints, RegimeSpec(kinds=kinds),
                                       args.seed, args.sites)
    os.makedirs(args.out, exist_ok=True)
    for ts in corpus.subjects:
        write_timeseries_csv(ts, os.path.join(args.out, f"{ts.subject_id}.csv"))
    write_phenotype(zip([s.subject_id for s in corpus.subjects], corpus.labels, corpus.sites),
                    os.path.join(args.out, "phenotype.csv"))
    with open(os.path.join(args.out, "synthetic_meta.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(corpus.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if corpus.meta["degenerate"]:
        log.warning("both classes use the same regime; labels carry no signal")
    print(f"wrote {len(corpus)} subjects to {args.out}")


def cmd_pipeline(args):
    path = args.config or bundled_config_path()
    cfg = PipelineConfig.load(path)
    if args.out:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.train["epochs"] = args.epochs
    if args.lambda1 is not None:
        cfg.train["lambda1"] = args.lambda1
    if args.no_plots:
        cfg.plots = False
    result = run_pipeline(cfg, force=args.force)
    for stage, st in result["status"].items():
        print(f"{stage:<18}{st}")
    print(f"report: {result['report']}")


def cmd_report(args):
    try:
        with open(args.report, encoding="utf-8") as fh:
            text = fh.read()
        report = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.report}: not valid JSON ({exc})") from None
    trace = read_loss_trace(args.loss_trace) if args.loss_trace else None
    out = args.out or os.path.dirname(os.path.abspath(args.report))
    written = emit_report(report, out, trace, plots=not args.no_plots)
    sys.stdout.write(written["text"])
    for w in written["warnings"]:
        print(f"warning: {w}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twembed", description="Dynamic-graph embedding via temporal walks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-connectome", help="time-series CSVs -> dynamic graph files")
    s.add_argument("--input-dir", required=True)
    s.add_argument("--window", type=int, default=50)
    s.add_argument("--stride", type=int, default=5)
    s.add_argument("--percentile", type=float, default=80.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_connectome)

    s = sub.add_parser("sample-walks", help="dynamic graphs -> temporal walks file")
    s.add_argument("--graphs", required=True)
    s.add_argument("--walk-length", type=int, default=20)
    s.add_argument("--walks-per-node", type=int, default=30)
    s.add_argument("--min-length", type=int, default=2)
    s.add_argument("--start-policy", choices=["earliest", "uniform-incident"], default="earliest")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample_walks)

    s = sub.add_parser("train", help="fit the encoder and heads on a walks file")
    s.add_argument("--walks", required=True)
    s.add_argument("--nodes", type=int, help="node count (default: from the walks sidecar)")
    s.add_argument("--dim", type=int, default=252)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--layers", type=int, default=6)
    s.add_argument("--d-ff", type=int)
    s.add_argument("--max-seq", type=int)
    s.add_argument("--lambda1", type=float, default=1.0)
    s.add_argument("--lambda2", type=float, default=5.0)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", help="checkpoint -> embeddings CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("evaluate", help="cross-validated logistic classification")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--phenotype", required=True)
    s.add_argument("--protocol", default="stratified10", help="stratifiedK (e.g. stratified10) or loso")
    s.add_argument("--reg", type=float, default=1.0)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--no-zscore", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="write a synthetic two-class corpus")
    s.add_argument("--n-subjects", type=int, default=40)
    s.add_argument("--regions", type=int, default=20)
    s.add_argument("--timepoints", type=int, default=200)
    s.add_argument("--sites", type=int, default=4)
    s.add_argument("--class0", default="static")
    s.add_argument("--class1", default="rotating")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pipeline", help="run every stage from a config file")
    s.add_argument("--config", help="YAML config (default: bundled synthetic config)")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lambda1", type=float)
    s.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("report", help="summary table and plots from report.json")
    s.add_argument("--report", required=True)
    s.add_argument("--loss-trace")
    s.add_argument("--out")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps({"stage": exc.stage, "code": exc.code}), file=sys.stderr)
        return exc.exit_status
    except TwembedError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_status
    except FileNotFoundError as exc:
        print(f"error [invalid-input]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error [runtime-failure]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
