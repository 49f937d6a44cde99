"""Command-line entry point: ``dimsel <subcommand> ...``.

Every subcommand writes a JSON manifest next to its outputs. The manifest
records the fully resolved argument vector (absolute paths, concrete seed),
so ``dimsel replay MANIFEST`` re-executes the run exactly.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import adapter as adapter_mod
from . import embstore, evalkit, oracle, predictor, selection, synthgen
from .errors import ConfigError, DimselError

logger = logging.getLogger("dimsel")

SEED_ENV = "DIMSEL_SEED"
OUTPUT_ARGS = ("out", "output", "run_out", "out_dir")
MANIFEST_VERSION = 1

# One-at-a-time sensitivity grids; every other setting stays at its default.
HYPER_GRIDS = {
    "epochs": (20, 30, 50, 100, 200),
    "tau": (0.005, 0.01, 0.02, 0.05, 0.1),
    "pool_size": (500, 1000, 2000, 3000),
    "sample_size": (16, 32, 64, 128, 256),
}


class UsageError(Exception):
    pass


def _abspath(s: str) -> Path:
    return Path(s).expanduser().resolve()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


# ---- argument plumbing ------------------------------------------------------


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help=f"RNG seed (falls back to ${SEED_ENV}, then 0)")


def _add_oracle_args(p: argparse.ArgumentParser) -> None:
    d = oracle.OracleConfig()
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--pool-size", type=int, default=d.pool_size, help="hard-negative pool K")
    p.add_argument("--sample-size", type=int, default=d.sample_size, help="sampled negatives M")
    p.add_argument("--no-weighting", action="store_true", help="unweighted positive centroid")
    p.add_argument("--no-hard-negatives", action="store_true", help="drop the negative centroid")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    d = predictor.TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--val-fraction", type=float, default=d.val_fraction)


def _oracle_config(args, seed: int) -> oracle.OracleConfig:
    return oracle.OracleConfig(
        tau=args.tau,
        pool_size=args.pool_size,
        sample_size=args.sample_size,
        weight_positives=not args.no_weighting,
        hard_negatives=not args.no_hard_negatives,
        seed=seed,
    )


def _train_config(args, seed: int) -> predictor.TrainConfig:
    return predictor.TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        dropout=args.dropout,
        seed=seed,
        val_fraction=args.val_fraction,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dimsel", description="Query-aware embedding dimension selection.")
    parser.add_argument("--threads", type=int, default=1, help="cap on BLAS threads (1 = bit-reproducible)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("normalize", help="L2-normalize an EMB1 file")
    p.add_argument("input", type=_abspath)
    p.add_argument("output", type=_abspath)

    p = sub.add_parser("build-targets", help="oracle importance targets from relevance labels")
    p.add_argument("--queries", type=_abspath, required=True)
    p.add_argument("--corpus", type=_abspath, required=True)
    p.add_argument("--qrels", type=_abspath, required=True)
    p.add_argument("--out", type=_abspath, required=True, help="targets (EMB1)")
    _add_oracle_args(p)
    _add_seed(p)

    p = sub.add_parser("train", help="fit the importance predictor on oracle targets")
    p.add_argument("--targets", type=_abspath, required=True)
    p.add_argument("--queries", type=_abspath, required=True)
    p.add_argument("--out", type=_abspath, required=True, help="predictor (DPRD)")
    _add_train_args(p)
    _add_seed(p)

    p = sub.add_parser("train-adapter", help="fit a square search adapter")
    p.add_argument("--queries", type=_abspath, required=True)
    p.add_argument("--corpus", type=_abspath, required=True)
    p.add_argument("--qrels", type=_abspath, required=True)
    p.add_argument("--out", type=_abspath, required=True, help="adapter (ADPT)")
    p.add_argument("--temperature", type=float, default=adapter_mod.TEMPERATURE)
    _add_train_args(p)
    _add_seed(p)

    p = sub.add_parser("sweep", help="NDCG@10 over the retained-dimension grid")
    p.add_argument("--queries", type=_abspath, required=True, help="evaluation queries")
    p.add_argument("--corpus", type=_abspath, required=True)
    p.add_argument("--qrels", type=_abspath, required=True, help="evaluation qrels")
    p.add_argument("--out-dir", type=_abspath, required=True)
    p.add_argument("--method", action="append", choices=selection.VARIANTS, default=None)
    p.add_argument("--predictor", type=_abspath, default=None)
    p.add_argument("--adapter", type=_abspath, default=None)
    p.add_argument("--grid-step", type=int, default=2, help="grid step in percent of D")
    p.add_argument("--prf-depth", type=int, default=1)
    p.add_argument("--n-neg", type=int, default=10)
    p.add_argument("--train-queries", type=_abspath, default=None, help="needed by --hyper/--seeds")
    p.add_argument("--train-qrels", type=_abspath, default=None, help="needed by --hyper/--seeds")
    p.add_argument("--hyper", action="append", choices=sorted(HYPER_GRIDS) + ["all"], default=None)
    p.add_argument("--seeds", type=int, default=0, help="robustness runs with distinct training seeds")
    _add_oracle_args(p)
    _add_train_args(p)
    _add_seed(p)

    p = sub.add_parser("eval", help="score queries, write a TREC run and NDCG@10 JSON")
    p.add_argument("--queries", type=_abspath, required=True)
    p.add_argument("--corpus", type=_abspath, required=True)
    p.add_argument("--qrels", type=_abspath, required=True)
    p.add_argument("--run-out", type=_abspath, required=True)
    p.add_argument("--out", type=_abspath, required=True, help="metrics JSON")
    p.add_argument("--method", choices=selection.VARIANTS, default="full")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--predictor", type=_abspath, default=None)
    p.add_argument("--adapter", type=_abspath, default=None)
    p.add_argument("--prf-depth", type=int, default=1)
    p.add_argument("--n-neg", type=int, default=10)
    p.add_argument("--depth", type=int, default=1000)
    p.add_argument("--tag", default="dimsel")

    p = sub.add_parser("analyze", help="dimension-selection consistency across queries")
    p.add_argument("--queries", type=_abspath, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--predictor", type=_abspath)
    src.add_argument("--targets", type=_abspath, help="analyze oracle targets instead")
    p.add_argument("--out", type=_abspath, required=True)
    p.add_argument("--k", type=int, default=512)
    p.add_argument("--n-pairs", type=int, default=20000)
    _add_seed(p)

    p = sub.add_parser("synth", help="generate a planted-structure synthetic corpus")
    p.add_argument("--out-dir", type=_abspath, required=True)
    d = synthgen.SynthConfig()
    for name, value in asdict(d).items():
        if name in ("seed", "disjoint"):
            continue
        p.add_argument("--" + name.replace("_", "-"), type=type(value), default=value)
    p.add_argument("--overlapping", action="store_true", help="allow planted sets to overlap")
    _add_seed(p)

    p = sub.add_parser("replay", help="re-execute a manifest")
    p.add_argument("manifest", type=_abspath)
    return parser


def _canonical_argv(parser: argparse.ArgumentParser, args: argparse.Namespace) -> list[str]:
    """Argument vector that reproduces ``args`` exactly, global options first."""
    out = ["--threads", str(args.threads), args.command]
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[args.command]
    positionals = []
    for action in sub._actions:
        if isinstance(action, argparse._HelpAction):
            continue
        value = getattr(args, action.dest)
        if not action.option_strings:
            positionals.append(str(value))
            continue
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                out.append(flag)
        elif isinstance(action, argparse._AppendAction):
            for v in value or ():
                out += [flag, str(v)]
        elif value is not None:
            out += [flag, str(value)]
    return out + positionals


# ---- manifests ---------------------------------------------------------------


def _write_manifest(path: Path, argv: list[str], inputs: dict, outputs: dict, config: dict) -> None:
    manifest = {
        "version": MANIFEST_VERSION,
        "argv": argv,
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in sorted(inputs.items()) if v is not None},
        "outputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in sorted(outputs.items())},
        "config": config,
    }
    _dump_json(manifest, path)


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# ---- commands ----------------------------------------------------------------


def cmd_normalize(args, argv):
    m = embstore.normalize(embstore.load_embeddings(args.input))
    embstore.save_embeddings(m, args.output)
    _write_manifest(_manifest_path(args.output), argv, {"input": args.input}, {"output": args.output}, {})
    return {"rows": m.count, "dim": m.dim}


def cmd_build_targets(args, argv):
    cfg = _oracle_config(args, args.seed)
    queries = embstore.load_embeddings(args.queries)
    corpus = embstore.load_embeddings(args.corpus)
    qrels = embstore.load_qrels(args.qrels)
    targets, summary = oracle.build_targets(corpus, queries, qrels, cfg)
    if not targets:
        raise DimselError("no query has relevant documents in the corpus")
    embstore.save_embeddings(oracle.targets_to_matrix(targets), args.out)
    summary_path = args.out.with_name(args.out.name + ".summary.json")
    info = summary.to_dict() | {"duplicate_qrels": qrels.duplicates}
    _dump_json(info, summary_path)
    _write_manifest(
        _manifest_path(args.out),
        argv,
        {"queries": args.queries, "corpus": args.corpus, "qrels": args.qrels},
        {"targets": args.out, "summary": summary_path},
        {"oracle": asdict(cfg)},
    )
    return info


def cmd_train(args, argv):
    cfg = _train_config(args, args.seed)
    queries = embstore.load_embeddings(args.queries)
    targets = oracle.targets_from_matrix(embstore.load_embeddings(args.targets))
    model = predictor.train(targets, queries, cfg)
    predictor.save(model, args.out)
    _write_manifest(
        _manifest_path(args.out),
        argv,
        {"targets": args.targets, "queries": args.queries},
        {"predictor": args.out},
        {"train": cfg.to_dict()},
    )
    return {k: model.metadata[k] for k in ("best_val_kl", "best_epoch", "n_train", "n_val")}


def cmd_train_adapter(args, argv):
    cfg = _train_config(args, args.seed)
    queries = embstore.load_embeddings(args.queries)
    corpus = embstore.load_embeddings(args.corpus)
    qrels = embstore.load_qrels(args.qrels)
    a = adapter_mod.train_adapter(queries, corpus, qrels, cfg, temperature=args.temperature)
    adapter_mod.save(a, args.out)
    _write_manifest(
        _manifest_path(args.out),
        argv,
        {"queries": args.queries, "corpus": args.corpus, "qrels": args.qrels},
        {"adapter": args.out},
        {"train": cfg.to_dict(), "temperature": args.temperature},
    )
    return {k: a.metadata[k] for k in ("best_val_loss", "best_epoch", "n_train_pairs", "n_val_pairs")}


def _load_adapter(path, dim):
    return adapter_mod.load(path, expected_dim=dim) if path is not None else None


def _sweep_one(method, queries, corpus, qrels, model, adp, grid, tag):
    if adp is not None:
        return adapter_mod.compose(adp, method, model).sweep(queries, corpus, qrels, grid=grid, tag=tag)
    return evalkit.sweep(method, queries, corpus, qrels, model, grid=grid, tag=tag)


def _write_curve(result: evalkit.SweepResult, path: Path, outputs: dict) -> None:
    path.write_text(result.to_csv(), encoding="utf-8")
    outputs[path.stem] = path


def cmd_sweep(args, argv):
    if args.grid_step < 1 or 100 % args.grid_step:
        raise UsageError("--grid-step must divide 100")
    queries = embstore.load_embeddings(args.queries)
    corpus = embstore.load_embeddings(args.corpus)
    qrels = embstore.load_qrels(args.qrels)
    grid = evalkit.k_grid(corpus.dim, args.grid_step)
    adp = _load_adapter(args.adapter, corpus.dim)
    model = predictor.load(args.predictor, expected_dim=corpus.dim) if args.predictor else None
    methods = args.method or [v for v in selection.VARIANTS if v != "learned" or model is not None]
    if "learned" in methods and model is None:
        raise UsageError("method 'learned' needs --predictor")
    hyper = sorted(HYPER_GRIDS) if args.hyper and "all" in args.hyper else sorted(set(args.hyper or ()))
    needs_training = bool(hyper) or args.seeds > 0
    if needs_training and (args.train_queries is None or args.train_qrels is None):
        raise UsageError("--hyper and --seeds need --train-queries and --train-qrels")

    out_dir = args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: dict[str, Path] = {}
    summary: dict = {"methods": {}}
    inputs = {"queries": args.queries, "corpus": args.corpus, "qrels": args.qrels}
    inputs |= {"predictor": args.predictor, "adapter": args.adapter}

    for variant in methods:
        method = selection.ScoringMethod(variant, prf_depth=args.prf_depth, n_neg=args.n_neg)
        tag = variant if adp is None else f"adapter+{variant}"
        res = _sweep_one(method, queries, corpus, qrels, model, adp, grid, tag)
        _write_curve(res, out_dir / f"curve_{tag}.csv", outputs)
        summary["methods"][tag] = res.to_dict()

    if needs_training:
        inputs |= {"train_queries": args.train_queries, "train_qrels": args.train_qrels}
        train_q = embstore.load_embeddings(args.train_queries)
        train_qrels = embstore.load_qrels(args.train_qrels)
        if adp is not None:
            train_q, corpus_t = adapter_mod.apply(adp, train_q), adapter_mod.apply(adp, corpus)
            eval_q = adapter_mod.apply(adp, queries)
        else:
            corpus_t, eval_q = corpus, queries
        base_o = _oracle_config(args, args.seed)
        base_t = _train_config(args, args.seed)
        learned = selection.ScoringMethod("learned")
        cache: dict = {}

        def targets_for(ocfg):
            if ocfg not in cache:
                cache[ocfg] = oracle.build_targets(corpus_t, train_q, train_qrels, ocfg)[0]
            return cache[ocfg]

        def run(ocfg, tcfg, tag):
            model_h = predictor.train(targets_for(ocfg), train_q, tcfg)
            return evalkit.sweep(learned, eval_q, corpus_t, qrels, model_h, grid=grid, tag=tag)

        if hyper:
            summary["hyper"] = {}
            for name in hyper:
                rows = []
                for value in HYPER_GRIDS[name]:
                    ocfg, tcfg = base_o, base_t
                    if name == "epochs":
                        tcfg = replace(base_t, epochs=value)
                    else:
                        ocfg = replace(base_o, **{name: value})
                        if ocfg.sample_size > ocfg.pool_size:
                            logger.warning("skipping %s=%s: sample_size exceeds pool_size", name, value)
                            continue
                    tag = f"hyper_{name}_{value}"
                    res = run(ocfg, tcfg, tag)
                    _write_curve(res, out_dir / f"{tag}.csv", outputs)
                    rows.append({"value": value} | res.to_dict())
                summary["hyper"][name] = rows

        if args.seeds > 0:
            results = [
                run(base_o, replace(base_t, seed=args.seed + i), f"seed_{args.seed + i}") for i in range(args.seeds)
            ]
            lines = ["fraction,k,mean,std"]
            lines += [f"{f:.2f},{k},{m!r},{s!r}" for f, k, m, s in evalkit.seed_summary(results)]
            path = out_dir / "seeds.csv"
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            outputs["seeds"] = path
            peaks = np.array([r.peak for r in results])
            summary["seeds"] = {
                "seeds": [args.seed + i for i in range(args.seeds)],
                "peak_mean": float(peaks.mean()),
                "peak_std": float(peaks.std()),
                "runs": [r.to_dict() for r in results],
            }

    summary_path = out_dir / "summary.json"
    _dump_json(summary, summary_path)
    outputs["summary"] = summary_path
    config = {"grid": grid, "methods": methods, "hyper": hyper, "seeds": args.seeds}
    if needs_training:
        config |= {"oracle": asdict(_oracle_config(args, args.seed)), "train": _train_config(args, args.seed).to_dict()}
    _write_manifest(out_dir / "manifest.json", argv, inputs, outputs, config)
    return summary


def cmd_eval(args, argv):
    queries = embstore.load_embeddings(args.queries)
    corpus = embstore.load_embeddings(args.corpus)
    qrels = embstore.load_qrels(args.qrels)
    method = selection.ScoringMethod(args.method, k=args.k, prf_depth=args.prf_depth, n_neg=args.n_neg)
    model = predictor.load(args.predictor, expected_dim=corpus.dim) if args.predictor else None
    if args.depth < 1:
        raise UsageError("--depth must be >= 1")
    adp = _load_adapter(args.adapter, corpus.dim)
    if adp is not None:
        run = adapter_mod.compose(adp, method, model).run(queries, corpus, depth=args.depth)
    else:
        run = selection.score_batch(method, queries, corpus, model, depth=args.depth)
    args.run_out.parent.mkdir(parents=True, exist_ok=True)
    args.run_out.write_text(selection.format_run(run, args.tag), encoding="utf-8")
    metrics = evalkit.mean_ndcg(run, qrels, cutoff=10)
    result = {
        "method": args.method,
        "k": method.budget(corpus.dim),
        "ndcg@10": metrics.mean,
        "n_queries": metrics.n_evaluated,
        "n_skipped": metrics.n_skipped,
        "per_query": metrics.per_query,
    }
    _dump_json(result, args.out)
    _write_manifest(
        _manifest_path(args.out),
        argv,
        {"queries": args.queries, "corpus": args.corpus, "qrels": args.qrels}
        | {"predictor": args.predictor, "adapter": args.adapter},
        {"run": args.run_out, "metrics": args.out},
        {"method": asdict(method)},
    )
    return {k: v for k, v in result.items() if k != "per_query"}


def cmd_analyze(args, argv):
    queries = embstore.load_embeddings(args.queries)
    if args.predictor is not None:
        model = predictor.load(args.predictor, expected_dim=queries.dim)
        imp = model.predict_log_probs(queries.data)
        emb = queries.data
        source = {"predictor": args.predictor}
    else:
        t = embstore.load_embeddings(args.targets)
        missing = [q for q in t.ids if q not in queries.id_index]
        if missing:
            raise DimselError(f"{len(missing)} target ids absent from queries, e.g. {missing[0]!r}")
        imp = t.data
        emb = queries.subset(t.ids).data
        source = {"targets": args.targets}
    if not 1 <= args.k <= queries.dim:
        raise UsageError(f"--k must lie in [1, {queries.dim}]")
    res = evalkit.consistency_analysis(imp, emb, k=args.k)
    result = res.to_dict() | {"pairwise_jaccard": evalkit.pairwise_jaccard(imp, args.k, args.n_pairs, args.seed)}
    result["n_sampled_pairs"] = args.n_pairs
    _dump_json(result, args.out)
    _write_manifest(_manifest_path(args.out), argv, {"queries": args.queries} | source, {"analysis": args.out}, {})
    return result


def cmd_synth(args, argv):
    fields = {k for k in asdict(synthgen.SynthConfig()) if k not in ("seed", "disjoint")}
    cfg = synthgen.SynthConfig(
        **{k: getattr(args, k) for k in fields}, disjoint=not args.overlapping, seed=args.seed
    )
    data = synthgen.generate(cfg)
    paths = synthgen.write(data, cfg, args.out_dir)
    _write_manifest(args.out_dir / "manifest.json", argv, {}, paths, {"synth": asdict(cfg)})
    return {"queries": data.queries.count, "documents": data.corpus.count, "dim": cfg.dim}


COMMANDS = {
    "normalize": cmd_normalize,
    "build-targets": cmd_build_targets,
    "train": cmd_train,
    "train-adapter": cmd_train_adapter,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "synth": cmd_synth,
}


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("dimsel")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _configure_logging(args.verbose)
    try:
        if args.command == "replay":
            manifest = json.loads(args.manifest.read_text(encoding="utf-8"))
            if not isinstance(manifest, dict) or "argv" not in manifest:
                raise ConfigError(f"{args.manifest} is not a dimsel manifest")
            replay_argv = list(manifest["argv"])
            return main(["-v"] * args.verbose + replay_argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if hasattr(args, "seed"):
            args.seed = _resolve_seed(args.seed)
        argv_c = _canonical_argv(parser, args)
        for dest in OUTPUT_ARGS:
            if getattr(args, dest, None) is not None:
                args.__dict__[dest].parent.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            result = COMMANDS[args.command](args, argv_c)
    except UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (DimselError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return 1
    json.dump(result, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
