"""Command-line harness: synthetic workload replay and metric reports.

Subcommands: ``bench-dipr``, ``bench-heads``, ``decode-replay``,
``build-bench``, ``import``, ``store``, ``inspect``. Benchmark commands write
line-delimited records plus a rendered figure into ``--out`` and print a
table; all quality metrics are computed by the library's exact oracles
(``dipr_bruteforce``, ``recovery_ratio``), never re-derived here.

In deterministic mode (the default) report files are byte-stable for a given
seed: the harness pins itself to one worker and keeps wall-clock fields out
of the record stream (they go to the ``timings.jsonl`` sidecar, which is
exempt). Config precedence: defaults < config file (``--config`` or
``$SPARSEKV_CONFIG``) < explicit flags.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import reporting, workload
from .attention import full_attention, recovery_ratio
from .config import CONFIG_ENV_VAR, EngineConfig, load_config
from .core import ModelShape
from .dipr import dipr_bruteforce
from .index import (
    FlatIndex,
    build_graph,
    build_shared_graph,
    exact_knn,
    index_memory_bytes,
)
from .planner import IndexKind, Plan, QueryKind
from .store import ContextStore
from .vfs import describe_file

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

SLO_TPOT_SECONDS = 0.24


# ---------------------------------------------------------------------------
# shared plumbing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"config file (overrides ${CONFIG_ENV_VAR})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report directory (default: ./<command>-report)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                   default=None, help="pin to one worker and byte-stable reports")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--l0", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--max-degree", dest="max_degree", type=int, default=None)
    p.add_argument("--window-initial", dest="window_initial", type=int, default=None)
    p.add_argument("--window-last", dest="window_last", type=int, default=None)


def _add_workload(p: argparse.ArgumentParser, tokens: int) -> None:
    p.add_argument("--tokens", type=int, default=tokens)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--distribution", choices=[workload.GAUSSIAN_CLUSTERS, workload.UNIFORM_SPHERE],
                   default=workload.GAUSSIAN_CLUSTERS)
    p.add_argument("--clusters", type=int, default=16)
    p.add_argument("--spread", type=float, default=0.25)
    p.add_argument("--query-mode", dest="query_mode",
                   choices=[workload.IN_DISTRIBUTION, workload.SHIFTED],
                   default=workload.IN_DISTRIBUTION)
    p.add_argument("--cluster-sizes", dest="cluster_sizes",
                   choices=[workload.UNIFORM_SIZES, workload.GEOMETRIC_SIZES],
                   default=None)


def _config_from(args: argparse.Namespace) -> EngineConfig:
    overrides = {
        name: getattr(args, name, None)
        for name in ("workers", "l0", "beta", "max_degree", "deterministic",
                     "window_initial", "window_last")
    }
    return load_config(args.config, overrides)


def _spec_from(
    args: argparse.Namespace, shape: ModelShape, default_sizes: str = workload.UNIFORM_SIZES
) -> workload.WorkloadSpec:
    return workload.WorkloadSpec(
        n_tokens=args.tokens,
        shape=shape,
        distribution=args.distribution,
        clusters=args.clusters,
        spread=args.spread,
        cluster_sizes=args.cluster_sizes or default_sizes,
        query_mode=args.query_mode,
        seed=args.seed,
    )


def _out_dir(args: argparse.Namespace, command: str) -> Path:
    out = Path(args.out) if args.out else Path(f"{command}-report")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(
    out: Path,
    name: str,
    records: list[dict],
    columns: list[str],
    timings: list[dict] | None = None,
) -> None:
    reporting.write_records(out / f"{name}.jsonl", records)
    if timings is not None:
        reporting.write_records(out / "timings.jsonl", timings)
    print(reporting.format_table(records, columns))


@contextlib.contextmanager
def _execution_mode(cfg: EngineConfig):
    """One BLAS thread in deterministic mode so runs replay bit-stably."""
    if cfg.deterministic and threadpool_limits is not None:
        with threadpool_limits(limits=1):
            yield
    else:
        yield


# ---------------------------------------------------------------------------
# bench-dipr


def cmd_bench_dipr(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    shape = ModelShape(n_layers=1, n_query_heads=1, n_kv_heads=1, dim=args.dim)
    spec = _spec_from(args, shape, default_sizes=workload.GEOMETRIC_SIZES)
    out = _out_dir(args, "bench-dipr")
    betas = [float(b) for b in args.betas.split(",")] if args.betas else [10.0, 16.0, 24.0]
    match_ks = args.ks == "auto"
    ks = [] if match_ks or not args.ks else [int(k) for k in args.ks.split(",")]
    ks = ks or ([] if match_ks else [16, 64, 256])

    with _execution_mode(cfg):
        ctx = workload.make_context(spec)
        keys = ctx.keys[0, 0]
        queries = workload.make_queries(spec, args.queries, ctx.centers, stream=3)
        flat = FlatIndex(keys)

        records = []
        dipr_points, topk_points = [], []
        for beta in betas:
            counts, ratios = [], []
            for q in queries:
                selected = dipr_bruteforce(q, keys, beta)
                counts.append(len(selected))
                ratios.append(recovery_ratio(q, keys, selected))
            rec = {
                "query_type": "dipr", "beta": beta, "k": None,
                "mean_retrieved": float(np.mean(counts)),
                "mean_recovery": float(np.mean(ratios)),
            }
            records.append(rec)
            dipr_points.append((rec["mean_retrieved"], rec["mean_recovery"]))
        if match_ks:
            # matched operating points: one k per beta's mean retrieved count
            ks = sorted({max(1, round(count)) for count, _ in dipr_points})
        for k in ks:
            k = min(k, spec.n_tokens)
            ratios = []
            for q in queries:
                selected = set(flat.top_k(q, k))
                ratios.append(recovery_ratio(q, keys, selected))
            rec = {
                "query_type": "topk", "beta": None, "k": k,
                "mean_retrieved": float(k),
                "mean_recovery": float(np.mean(ratios)),
            }
            records.append(rec)
            topk_points.append((rec["mean_retrieved"], rec["mean_recovery"]))

        reporting.frontier_figure(dipr_points, topk_points, out / "bench-dipr.png")
    _emit(out, "bench-dipr", records,
          ["query_type", "beta", "k", "mean_retrieved", "mean_recovery"])
    print(f"report: {out}")
    return 0


# ---------------------------------------------------------------------------
# bench-heads


def cmd_bench_heads(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    shape = ModelShape(n_layers=1, n_query_heads=args.heads, n_kv_heads=args.heads,
                       dim=args.dim)
    spec = _spec_from(args, shape, default_sizes=workload.GEOMETRIC_SIZES)
    out = _out_dir(args, "bench-heads")
    beta = cfg.beta if args.beta is None else args.beta
    target = args.recovery_target

    with _execution_mode(cfg):
        ctx = workload.make_context(spec)
        # head h attends a cluster whose population sets its token demand
        populations = workload.cluster_populations(spec)
        order = np.argsort(populations)
        records = []
        for head in range(shape.n_kv_heads):
            keys = ctx.keys[0, head]
            target_cluster = int(order[(head * len(order)) // shape.n_kv_heads])
            queries = workload.make_queries(
                spec, args.queries, ctx.centers, stream=10 + head,
                cluster=target_cluster,
            )
            oracle_counts, dipr_counts = [], []
            for q in queries:
                oracle_counts.append(_tokens_for_recovery(q, keys, target))
                dipr_counts.append(len(dipr_bruteforce(q, keys, beta)))
            records.append({
                "kv_head": head,
                "cluster_population": int(populations[target_cluster]),
                "oracle_tokens_90": float(np.mean(oracle_counts)),
                "dipr_tokens": float(np.mean(dipr_counts)),
            })
        corr = float(np.corrcoef(
            [r["oracle_tokens_90"] for r in records],
            [r["dipr_tokens"] for r in records],
        )[0, 1]) if len(records) > 1 else 1.0
        summary = {
            "kv_head": "all", "cluster_population": None,
            "oracle_tokens_90": float(np.mean([r["oracle_tokens_90"] for r in records])),
            "dipr_tokens": float(np.mean([r["dipr_tokens"] for r in records])),
            "correlation": corr,
        }
        reporting.heads_figure(records, out / "bench-heads.png")
    _emit(out, "bench-heads", records + [summary],
          ["kv_head", "cluster_population", "oracle_tokens_90", "dipr_tokens",
           "correlation"])
    print(f"report: {out}")
    return 0


def _tokens_for_recovery(q: np.ndarray, keys: np.ndarray, target: float) -> int:
    from .core import scaled_scores

    z = scaled_scores(keys, q)
    w = np.exp(z - z.max())
    w /= w.sum()
    ordered = np.sort(w)[::-1]
    return int(np.searchsorted(np.cumsum(ordered), target) + 1)


# ---------------------------------------------------------------------------
# decode-replay


_PLAN_CHOICES = ("auto", "full", "dipr", "topk")


def _plan_override(choice: str, record_plans: dict[int, Plan], cfg: EngineConfig):
    if choice == "auto":
        return None
    if choice == "full":
        return Plan(QueryKind.FULL_ATTENTION, IndexKind.NONE)
    out = {}
    for layer, built in record_plans.items():
        index = built.index if built.index is not IndexKind.NONE else IndexKind.FLAT
        if choice == "dipr":
            out[layer] = Plan(QueryKind.DIPR, index, beta=cfg.beta)
        else:
            out[layer] = Plan(QueryKind.TOP_K, index, k=cfg.top_k)
    return out


def cmd_decode_replay(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    shape = ModelShape(n_layers=args.layers, n_query_heads=args.query_heads,
                       n_kv_heads=args.kv_heads, dim=args.dim)
    spec = _spec_from(args, shape)
    out = _out_dir(args, "decode-replay")

    with _execution_mode(cfg):
        ctx = workload.make_context(spec)
        db = ContextStore(shape, cfg)
        queries = _import_queries(spec, ctx)
        cid = db.import_context(ctx.token_ids, ctx.keys, ctx.values, queries)
        session, truncated = db.create_session(ctx.token_ids)
        if truncated:
            raise RuntimeError("replay context did not fully reuse its own import")
        session.plan_override = _plan_override(args.plan, db.get(cid).plans, cfg)

        token_ids, qs, ks, vs = workload.decode_step_inputs(spec, args.steps, ctx.centers)
        records, tpots = [], []
        for step in range(args.steps):
            t0 = time.perf_counter()
            step_recovery, step_dev, step_retrieved = [], [], []
            for layer in range(shape.n_layers):
                session.update(qs[step, layer], ks[step, layer], vs[step, layer], layer)
                outputs = session.attention(qs[step, layer], layer)
                rec, dev, ret = _step_quality(session, qs[step, layer], layer, outputs)
                step_recovery.extend(rec)
                step_dev.extend(dev)
                step_retrieved.extend(ret)
            session.record_token(int(token_ids[step]))
            tpots.append(time.perf_counter() - t0)
            records.append({
                "step": step,
                "recovery_ratio": float(np.mean(step_recovery)),
                "deviation_l2": float(np.mean(step_dev)),
                "retrieved_tokens": float(np.mean(step_retrieved)),
            })

        pct = reporting.percentiles(tpots)
        timings = [{
            "metric": "tpot_seconds", **pct,
            "slo_seconds": SLO_TPOT_SECONDS,
            "slo_met": bool(pct["p50"] <= SLO_TPOT_SECONDS),
            "steps": args.steps,
            "plan": args.plan,
        }]
        reporting.decode_figure(records, out / "decode-replay.png")
    _emit(out, "decode-replay", records,
          ["step", "recovery_ratio", "deviation_l2", "retrieved_tokens"],
          timings=timings)
    print(f"tpot p50={pct['p50']:.4f}s p90={pct['p90']:.4f}s p99={pct['p99']:.4f}s "
          f"(SLO {SLO_TPOT_SECONDS}s {'met' if timings[0]['slo_met'] else 'missed'}) "
          f"[timings.jsonl is exempt from determinism]")
    print(f"report: {out}")
    return 0


def _step_quality(session, q_heads: np.ndarray, layer: int, outputs: np.ndarray):
    """Recovery ratio, oracle deviation, and retrieved counts per query head."""
    shape = session._store.shape
    recoveries, deviations, retrieved = [], [], []
    diag = {d["query_head"]: d for d in session.last_diagnostics["heads"]}
    for qh in range(shape.n_query_heads):
        head = shape.kv_head_of(qh)
        keys, values = session.full_kv(layer, head)
        info = diag[qh]
        window_len = session.window_len
        p = session.reused_prefix_len
        selected = set(info["selected_base"]) | set(info["window_base"]) | set(
            range(p, p + window_len)
        )
        recoveries.append(recovery_ratio(q_heads[qh], keys, selected))
        oracle = full_attention(q_heads[qh], keys, values)
        deviations.append(float(np.linalg.norm(outputs[qh].astype(np.float64)
                                               - oracle.astype(np.float64))))
        retrieved.append(info["retrieved"])
    return recoveries, deviations, retrieved


def _import_queries(spec: workload.WorkloadSpec, ctx) -> np.ndarray:
    """Synthetic per-query-head query samples for shared index construction."""
    shape = spec.shape
    m = min(spec.n_tokens, max(256, spec.n_tokens // 4))
    out = np.empty((shape.n_layers, shape.n_query_heads, m, shape.dim), dtype=np.float32)
    for layer in range(shape.n_layers):
        for qh in range(shape.n_query_heads):
            out[layer, qh] = workload.make_queries(
                spec, m, ctx.centers, stream=100 + layer * shape.n_query_heads + qh
            )
    return out


# ---------------------------------------------------------------------------
# build-bench


def cmd_build_bench(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    g = args.group_size
    shape = ModelShape(n_layers=1, n_query_heads=g, n_kv_heads=1, dim=args.dim)
    spec = _spec_from(args, shape)
    out = _out_dir(args, "build-bench")
    params = cfg.graph_params()

    with _execution_mode(cfg):
        ctx = workload.make_context(spec)
        keys = ctx.keys[0, 0]
        nq = max(64, spec.n_tokens // 4)
        head_queries = [
            workload.make_queries(spec, nq, ctx.centers, stream=200 + qh)
            for qh in range(g)
        ]

        records, timings = [], []

        t0 = time.perf_counter()
        per_head = [
            build_graph(keys, head_queries[qh], params) for qh in range(g)
        ]
        per_head_seconds = time.perf_counter() - t0
        per_head_bytes = sum(index_memory_bytes(ix) for ix in per_head)
        records.append({"strategy": "per-head", "indexes": g,
                        "index_bytes": per_head_bytes})
        timings.append({"strategy": "per-head", "build_seconds": per_head_seconds})

        t0 = time.perf_counter()
        shared = build_shared_graph(keys, head_queries, cfg.sample_ratio, params)
        shared_seconds = time.perf_counter() - t0
        shared_bytes = index_memory_bytes(shared)
        records.append({"strategy": "gqa-shared", "indexes": 1,
                        "index_bytes": shared_bytes})
        timings.append({"strategy": "gqa-shared", "build_seconds": shared_seconds})

        records.append({
            "strategy": "memory-ratio", "indexes": None,
            "index_bytes": None,
            "shared_over_per_head": shared_bytes / per_head_bytes,
            "expected": 1.0 / g,
        })

        knn_queries = np.concatenate(head_queries)
        t0 = time.perf_counter()
        exact_knn(keys, knn_queries, params.knn_k, workers=1)
        serial_s = time.perf_counter() - t0
        import os

        n_workers = args.knn_workers or (os.cpu_count() or 1)
        t0 = time.perf_counter()
        exact_knn(keys, knn_queries, params.knn_k, workers=n_workers)
        parallel_s = time.perf_counter() - t0
        timings.append({
            "strategy": "knn", "serial_seconds": serial_s,
            "parallel_seconds": parallel_s, "workers": n_workers,
            "speedup": serial_s / parallel_s if parallel_s > 0 else None,
        })

        reporting.build_figure(
            [r for r in records if r.get("index_bytes") is not None],
            out / "build-bench.png",
        )
    _emit(out, "build-bench", records,
          ["strategy", "indexes", "index_bytes", "shared_over_per_head", "expected"],
          timings=timings)
    print(f"report: {out}")
    return 0


# ---------------------------------------------------------------------------
# import / store / inspect


def _make_db(args: argparse.Namespace, cfg: EngineConfig, shape: ModelShape) -> ContextStore:
    return ContextStore(shape, cfg, root=args.db)


def cmd_import(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    shape = ModelShape(n_layers=args.layers, n_query_heads=args.query_heads,
                       n_kv_heads=args.kv_heads, dim=args.dim)
    spec = _spec_from(args, shape)
    with _execution_mode(cfg):
        ctx = workload.make_context(spec)
        db = _make_db(args, cfg, shape)
        cid = db.import_context(ctx.token_ids, ctx.keys, ctx.values,
                                _import_queries(spec, ctx))
    print(cid)
    return 0


def cmd_store(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    shape = ModelShape(n_layers=args.layers, n_query_heads=args.query_heads,
                       n_kv_heads=args.kv_heads, dim=args.dim)
    spec = _spec_from(args, shape)
    with _execution_mode(cfg):
        ctx = workload.make_context(spec)
        db = _make_db(args, cfg, shape)
        db.import_context(ctx.token_ids, ctx.keys, ctx.values,
                          _import_queries(spec, ctx))
        session, truncated = db.create_session(ctx.token_ids)
        token_ids, qs, ks, vs = workload.decode_step_inputs(spec, args.steps, ctx.centers)
        for step in range(args.steps):
            for layer in range(shape.n_layers):
                session.update(qs[step, layer], ks[step, layer], vs[step, layer], layer)
                session.attention(qs[step, layer], layer)
            session.record_token(int(token_ids[step]))
        cid = db.store(session)
    print(cid)
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    path = Path(args.path)
    files = sorted(path.rglob("*.avdb")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no vector files under {path}")
    for f in files:
        info = describe_file(f)
        if args.json:
            print(json.dumps(info, sort_keys=True))
        else:
            blocks = ", ".join(f"{k}={v}" for k, v in sorted(info["blocks"].items()))
            print(f"{info['path']}: dim={info['dim']} vectors={info['n_vectors']} "
                  f"width={info['element_width']} blocks[{blocks}]")
            if args.directory:
                for entry in info["directory"]:
                    print(f"  @{entry['offset']:>10} {entry['type']:<9} items={entry['items']}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsekv",
        description="Sparse-attention retrieval engine benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench-dipr", help="DIPR vs top-k frontier on one head")
    _add_common(p)
    _add_workload(p, tokens=8192)
    p.add_argument("--queries", type=int, default=64)
    p.add_argument("--betas", help="comma-separated beta sweep")
    p.add_argument("--ks", help="comma-separated k sweep, or 'auto' to match "
                   "each beta's mean retrieved count")
    p.set_defaults(func=cmd_bench_dipr)

    p = sub.add_parser("bench-heads", help="per-head token demand variation")
    _add_common(p)
    _add_workload(p, tokens=8192)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--queries", type=int, default=32)
    p.add_argument("--recovery-target", dest="recovery_target", type=float, default=0.9)
    p.set_defaults(func=cmd_bench_heads)

    p = sub.add_parser("decode-replay", help="decode loop with latency/quality report")
    _add_common(p)
    _add_workload(p, tokens=8192)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--query-heads", dest="query_heads", type=int, default=4)
    p.add_argument("--kv-heads", dest="kv_heads", type=int, default=2)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--plan", choices=_PLAN_CHOICES, default="auto")
    p.set_defaults(func=cmd_decode_replay)

    p = sub.add_parser("build-bench", help="index construction time and memory")
    _add_common(p)
    _add_workload(p, tokens=8192)
    p.add_argument("--group-size", dest="group_size", type=int, default=4)
    p.add_argument("--knn-workers", dest="knn_workers", type=int, default=None)
    p.set_defaults(func=cmd_build_bench)

    p = sub.add_parser("import", help="import a synthetic context into a DB directory")
    _add_common(p)
    _add_workload(p, tokens=4096)
    p.add_argument("--db", required=True)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--query-heads", dest="query_heads", type=int, default=4)
    p.add_argument("--kv-heads", dest="kv_heads", type=int, default=2)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("store", help="run a session against a DB and store it")
    _add_common(p)
    _add_workload(p, tokens=4096)
    p.add_argument("--db", required=True)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--query-heads", dest="query_heads", type=int, default=4)
    p.add_argument("--kv-heads", dest="kv_heads", type=int, default=2)
    p.add_argument("--steps", type=int, default=16)
    p.set_defaults(func=cmd_store)

    p = sub.add_parser("inspect", help="print vector file headers and directories")
    p.add_argument("path")
    p.add_argument("--json", action="store_true")
    p.add_argument("--directory", action="store_true", help="list every block")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # surfaced with a message, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
