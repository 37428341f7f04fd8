"""Command-line entry point (``python -m qreform <subcommand>``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import metrics as M
from . import pipeline as P
from .agents import Policy, read_agent_results, write_agent_results
from .aggregator import AggregatorConfig, RelevanceModel, aggregate, train_aggregator
from .baselines import RM3Config, rm3_terms, write_expansion_trace
from .nn import load_params, save_params
from .partitioning import read_partition_tsv, write_partition_tsv
from .search import write_corpus_jsonl, write_qrels_tsv, write_queries_tsv

log = logging.getLogger("qreform")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _config(args) -> P.ExperimentConfig:
    cfg = P.ExperimentConfig.load(args.config) if args.config else P.ExperimentConfig()
    over = {"threads": args.threads}
    if getattr(args, "data", None):
        over["data_dir"] = args.data
    if args.seed is not None:
        over["seeds"] = [args.seed]
    return cfg.with_overrides(**over)


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj, path: Optional[Path] = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        P.write_json(obj, path)
    print(text)


def cmd_synth(args) -> None:
    cfg = _config(args)
    if cfg.synthetic is None:
        raise P.ConfigError("config has no synthetic spec")
    from .synth import SyntheticSpec, synth_corpus
    d = synth_corpus(SyntheticSpec(**cfg.synthetic), _seed(args, cfg))
    out = _out(args)
    write_corpus_jsonl(d.corpus, out / "corpus.jsonl")
    write_queries_tsv({q: " ".join(t) for q, t in d.queries.items()}, out / "queries.tsv")
    write_qrels_tsv(d.qrels, out / "qrels.tsv")
    P.write_splits_tsv(d.splits, out / "splits.tsv")
    P.write_tsv(sorted(d.synonyms.items()), out / "synonyms.tsv")
    print(f"wrote {len(d.corpus)} documents and {len(d.queries)} queries to {out}")


def cmd_index(args) -> None:
    cfg = _config(args)
    ctx = P.SeedContext(cfg, _seed(args, cfg))
    lens = ctx.index.doc_lengths
    _emit({"documents": ctx.index.n_docs, "vocabulary": len(ctx.data.corpus.vocab),
           "mean_doc_length": float(np.mean(lens)), "fingerprint": ctx.fingerprint,
           "queries": {s: len(q) for s, q in ctx.data.splits.items()}},
          _out(args) / "index_stats.json")


def cmd_baseline(args) -> None:
    cfg = _config(args)
    ctx = P.SeedContext(cfg, _seed(args, cfg))
    out = _out(args)
    qids = ctx.data.splits[args.split]
    res = P.run_arm(ctx, args.method, qids)
    M.write_run(res.run, out / f"run_{args.method}_{args.split}.tsv")
    (out / f"metrics_{args.method}_{args.split}.tsv").write_text(M.format_metrics_tsv(res.metrics))
    if args.trace and args.method == "rm3":
        qid = args.trace
        n = res.extra.get("n_terms", cfg.rm3_n_terms[-1])
        pairs = rm3_terms(ctx.data.queries[qid], ctx.index,
                          RM3Config(cfg.rm3_lambda, cfg.rm3_u, n, cfg.rm3_fb_docs))
        write_expansion_trace(pairs, out / f"trace_{qid}.tsv")
    print(M.format_metrics_tsv(res.metrics), end="")


def cmd_train_agents(args) -> None:
    cfg = _config(args)
    ctx = P.SeedContext(cfg, _seed(args, cfg))
    out = _out(args)
    agents = P.arm_agents(ctx, args.arm)
    for i, (_, pol) in enumerate(agents):
        save_params(pol.params, out / f"agent{i}.qrfp")
    if args.arm in ("sub", "sub-pretrained"):
        write_partition_tsv(P.sub_partition(ctx), out / "partition.tsv")
    P.write_json({"arm": args.arm, "n_agents": len(agents), "policy": ctx.pcfg.__dict__,
                  "seed": ctx.seed}, out / "agents.json")
    print(f"trained {len(agents)} agents for arm {args.arm}")


def _load_agents(ctx: P.SeedContext, agent_dir: Path) -> List[tuple]:
    files = sorted(agent_dir.glob("agent*.qrfp"), key=lambda p: int(p.stem[5:]))
    if not files:
        raise P.DataError(f"no agent checkpoints in {agent_dir}")
    out = []
    for i, f in enumerate(files):
        params = load_params(f)
        if params["t_emb"].shape[0] != ctx.pcfg.vocab_size:
            raise P.DataError(f"{f} does not match the corpus vocabulary")
        out.append((f"file:{f.resolve()}", Policy(params, ctx.pcfg, ctx.data.corpus.vocab, f"agent{i}")))
    return out


def cmd_log_results(args) -> None:
    cfg = _config(args)
    ctx = P.SeedContext(cfg, _seed(args, cfg))
    agents = _load_agents(ctx, Path(args.agents))
    qids = ctx.data.splits[args.split]
    mode = args.decode or cfg.decode
    n = cfg.n_rewrites if mode in ("sample",) else (cfg.beam_width if mode == "beam" else 1)
    recs = ctx.agent_log("cli", agents, qids, mode, n, identity=not args.no_identity)
    out = _out(args) / f"log_{args.split}.jsonl"
    with open(out, "w", encoding="utf-8") as fh:
        for r in recs:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"wrote {len(recs)} records to {out}")


def cmd_train_aggregator(args) -> None:
    cfg = _config(args)
    ctx = P.SeedContext(cfg, _seed(args, cfg))
    recs = read_agent_results(args.log)
    acfg = cfg.aggregator_config()
    model, curve = train_aggregator(recs, ctx.data.queries, ctx.data.qrels, ctx.data.corpus,
                                    acfg, ctx.seed)
    out = _out(args)
    save_params(model.params, out / "aggregator.qrfp")
    P.write_json(acfg.to_dict(), out / "aggregator_config.json")
    P.write_tsv([["epoch", "loss"]] + [[str(i + 1), f"{v:.6f}"] for i, v in enumerate(curve)],
                out / "aggregator_loss.tsv")
    print(f"final epoch loss {curve[-1]:.4f}")


def cmd_evaluate(args) -> None:
    """Either score an existing run file, or aggregate a log into a run first."""
    out = _out(args)
    if args.run:
        from .search import read_qrels_tsv
        qrels = read_qrels_tsv(args.qrels) if args.qrels else None
        if qrels is None:
            raise P.ConfigError("--run needs --qrels")
        run = M.read_run(args.run)
        per_query, macro = M.evaluate_run(run, qrels, args.k)
    else:
        if not (args.log and args.model):
            raise P.ConfigError("evaluate needs --run/--qrels or --log/--model")
        cfg = _config(args)
        ctx = P.SeedContext(cfg, _seed(args, cfg))
        mdir = Path(args.model)
        acfg = AggregatorConfig.from_dict(json.loads((mdir / "aggregator_config.json").read_text()))
        model = RelevanceModel(load_params(mdir / "aggregator.qrfp"), acfg, ctx.data.corpus)
        from .aggregator import group_records
        groups = group_records(read_agent_results(args.log))
        run = {q: aggregate(recs, ctx.data.queries[q], [model], args.variant, args.k)[0].items
               for q, recs in sorted(groups.items())}
        M.write_run(run, out / "run_aggregated.tsv")
        per_query, macro = M.evaluate_run(run, {q: ctx.data.qrels[q] for q in run}, args.k)
    (out / "metrics.tsv").write_text(M.format_metrics_tsv(macro))
    (out / "metrics.json").write_text(M.format_metrics_json(macro))
    print(M.format_metrics_tsv(macro), end="")


def cmd_sweep_agents(args) -> None:
    cfg = _config(args)
    ctx = P.SeedContext(cfg, _seed(args, cfg))
    res = P.run_arm(ctx, args.arm)
    points = P.sweep(ctx, res)
    out = _out(args)
    P.write_sweep_dat(points, cfg.eval_k, out / "sweep.dat")
    _emit(points, out / "sweep.json")


def cmd_diversity(args) -> None:
    if args.log:
        from .aggregator import group_records
        groups = group_records(read_agent_results(args.log))
        sets = [[r["reformulation"] for r in recs if r["agent_id"] != "identity"]
                for recs in groups.values()]
        sets = [s for s in sets if len(s) >= 2]
        if not sets:
            raise P.DataError("need at least two reformulations per query")
        _emit(M.diversity(sets), _out(args) / "diversity.json")
        return
    cfg = _config(args)
    ctx = P.SeedContext(cfg, _seed(args, cfg))
    results = [P.run_arm(ctx, a) for a in cfg.arms if a in P.AGGREGATED]
    out = _out(args)
    P.write_tsv(P.diversity_rows(results, cfg.eval_k), out / "diversity.tsv")
    print((out / "diversity.tsv").read_text(), end="")


def cmd_stability(args) -> None:
    cfg = _config(args)
    seeds = list(range(args.n_seeds)) if args.seed is None else \
        [args.seed + i for i in range(args.n_seeds)]
    _emit(P.stability_report(cfg, seeds=seeds), _out(args) / "stability.json")


def cmd_partition_eval(args) -> None:
    cfg = _config(args)
    study = P.partition_study(cfg, _seed(args, cfg))
    out = _out(args)
    P.write_tsv(P.partition_rows(study, cfg.eval_k), out / "partitioning.tsv")
    print((out / "partitioning.tsv").read_text(), end="")


def cmd_run(args) -> None:
    cfg = _config(args)
    if args.seed is None:
        cfg = cfg.with_overrides(seeds=cfg.seeds)
    P.run_experiment(cfg, _out(args))
    print((Path(args.out) / "retrieval_by_seed.tsv").read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="seed (u64); default: first config seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="agent-training workers")
    common.add_argument("--data", help="directory with corpus.jsonl, queries.tsv, qrels.tsv, splits.tsv")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qreform", parents=[common],
                                description="multi-agent query reformulation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(fn=fn)
        return sp

    add("synth", cmd_synth, "generate a synthetic benchmark")
    add("index", cmd_index, "build the index and report collection statistics")
    sp = add("baseline", cmd_baseline, "run BM25, PRF or RM3")
    sp.add_argument("--method", choices=["bm25", "prf", "rm3"], default="bm25")
    sp.add_argument("--split", choices=["train", "dev", "test"], default="test")
    sp.add_argument("--trace", metavar="QID", help="dump the RM3 expansion trace of one query")
    sp = add("train-agents", cmd_train_agents, "train the sub-agents of an arm")
    sp.add_argument("--arm", choices=["rl-rnn", "full", "bagging", "sub", "sub-pretrained"],
                    default="sub")
    sp = add("log-results", cmd_log_results, "precompute agent-result logs")
    sp.add_argument("--agents", required=True, help="directory of agent checkpoints")
    sp.add_argument("--split", choices=["train", "dev", "test"], default="train")
    sp.add_argument("--decode", choices=["greedy", "beam", "sample"])
    sp.add_argument("--no-identity", action="store_true", help="omit the original query")
    sp = add("train-aggregator", cmd_train_aggregator, "train the aggregator on a log")
    sp.add_argument("--log", required=True)
    sp = add("evaluate", cmd_evaluate, "score a run file, or aggregate a log and score it")
    sp.add_argument("--run")
    sp.add_argument("--qrels")
    sp.add_argument("--log")
    sp.add_argument("--model", help="directory written by train-aggregator")
    sp.add_argument("--variant", default="product",
                    choices=["product", "rank_only", "relevance_only", "count_rank"])
    sp.add_argument("-k", type=int, default=10)
    sp = add("sweep-agents", cmd_sweep_agents, "aggregated score over nested agent pools")
    sp.add_argument("--arm", choices=sorted(P.MULTI_AGENT), default="sub")
    sp = add("diversity", cmd_diversity, "diversity of reformulations (log or config arms)")
    sp.add_argument("--log")
    sp = add("stability", cmd_stability, "score variance across seeds")
    sp.add_argument("--n-seeds", type=int, default=10)
    add("partition-eval", cmd_partition_eval, "compare partitioning strategies")
    add("run", cmd_run, "run every configured arm and write all reports")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except P.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (P.DataError, FileNotFoundError, KeyError, json.JSONDecodeError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
