"""``routerank`` command line.

Exit codes: 0 success, 1 runtime failure, 2 bad or unknown flag, 3 missing
or invalid input file.  Flags and file formats are listed in
docs/INTERFACES.md.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from routerank import audit, config, evaluate, store, trainer
from routerank.model import VARIANTS
from routerank.synthworld import io
from routerank.synthworld.network import generate_network
from routerank.synthworld.simulate import simulate_logs

GRAPH_FILE = "graph.jsonl"
DATASET_FILE = "dataset.jsonl"
USERS_FILE = "users.jsonl"
RANKING_FORMAT = "routerank-ranking/1"


class InputError(Exception):
    """A flag names a file that is missing or unreadable."""


def _need(args, flag: str) -> Path:
    value = getattr(args, flag.replace("-", "_"))
    if value is None:
        raise InputError(f"--{flag} is required")
    path = Path(value)
    if not path.is_file():
        raise InputError(f"--{flag}: no such file: {path}")
    return path


def _read(args, flag: str, reader):
    path = _need(args, flag)
    try:
        return reader(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"--{flag}: cannot read {path}: {exc}") from exc


def _graph(args):
    return _read(args, "graph", io.import_graph)


def _records(args):
    return _read(args, "records", io.import_dataset)


def _checkpoint(args):
    return _read(args, "checkpoint", trainer.load)


def _out(args) -> Path:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg) -> int:
    net = cfg["network"]
    rows = args.rows if args.rows is not None else net["rows"]
    cols = args.cols if args.cols is not None else net["cols"]
    rate = args.corruption if args.corruption is not None else net["corruption_rate"]
    seed = _seed(args)
    graph = generate_network(rows, cols, seed, corruption_rate=rate)
    records, users = simulate_logs(graph, args.users, args.records, seed, config.sim_config(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.export_graph(graph, out / GRAPH_FILE)
    io.export_dataset(records, out / DATASET_FILE)
    io.export_users(users, out / USERS_FILE)
    for name in (GRAPH_FILE, DATASET_FILE, USERS_FILE):
        print(f"{out / name}\tsha256={io.file_digest(out / name)}")
    dr = np.mean([r.label_y for r in records])
    print(f"{len(records)} records, {len(users)} users, {graph.n_links} links, DR {dr:.4f}")
    return 0


def cmd_train(args, cfg) -> int:
    graph, records = _graph(args), _records(args)
    model_cfg = config.model_config(cfg, args.variant)
    tc = config.train_config(cfg)
    epochs = args.epochs if args.epochs is not None else tc.epochs
    data = trainer.prepare(graph, records, cfg["schema"]["min_frequency"])
    seed = _seed(args)
    state = trainer.train(model_cfg, data, epochs=epochs, seed=seed, train_cfg=tc, verbose=args.verbose)
    out = _out(args)
    digest = trainer.save(out, state, model_cfg, data, seed, tc)
    trainer.write_log(state, out.with_suffix(".log.jsonl"))
    auc = evaluate.evaluate_params(model_cfg, data, state.params)
    print(f"{out}\tmodel={digest}\tsteps={state.step}\ttest_auc={auc:.6f}")
    return 0


def cmd_eval(args, cfg) -> int:
    if args.ablation:
        graph, records = _graph(args), _records(args)
        data = trainer.prepare(graph, records, cfg["schema"]["min_frequency"])
        seeds = [int(s) for s in args.seeds.split(",")]
        variants = args.variants.split(",")
        unknown = set(variants) - set(VARIANTS)
        if unknown:
            print(f"error: --variants: unknown {sorted(unknown)}", file=sys.stderr)
            return 2
        tc = config.train_config(cfg)
        epochs = args.epochs if args.epochs is not None else tc.epochs
        cfgs = [config.model_config(cfg, v) for v in variants]
        rows = evaluate.run_ablation_matrix(data, seeds, cfgs, epochs, train_cfg=tc, verbose=args.verbose)
    else:
        loaded = _checkpoint(args)
        graph, records = _graph(args), _records(args)
        _, test_idx = trainer.split_by_day(records)
        enc = trainer.encode_for(loaded, graph, records, [(i, records[i].chosen_index) for i in test_idx.tolist()])
        auc = evaluate.auc_fast(loaded.model.predict(loaded.params, enc), enc.y)
        rows = [evaluate.AblationRow(loaded.model.cfg.name, [auc], loaded.model.cfg.setting())]
    text = evaluate.format_report(rows)
    if args.out:
        _out(args).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_rank(args, cfg) -> int:
    loaded = _checkpoint(args)
    graph, records = _graph(args), _records(args)
    user_store = None
    if args.store is not None:
        user_store = _read(args, "store", lambda p: store.UserEmbeddingStore.load(p, loaded.model_hash))
    positions = {r.record_id: i for i, r in enumerate(records)}
    if args.record not in positions:
        print(f"error: --record: no record with id {args.record}", file=sys.stderr)
        return 2
    order, scores = store.rank_record(loaded, graph, records, positions[args.record], user_store)
    lines = [f"#format {RANKING_FORMAT}", "rank\tcandidate\tdr"]
    lines += [f"{k}\t{j}\t{scores[j]:.10f}" for k, j in enumerate(order)]
    text = "\n".join(lines) + "\n"
    if args.out:
        _out(args).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_audit_links(args, cfg) -> int:
    loaded = _checkpoint(args)
    graph, records = _graph(args), _records(args)
    if loaded.model.cfg.wo_sparse:
        print("error: --checkpoint has no link-id embeddings", file=sys.stderr)
        return 1
    train_idx, _ = trainer.split_by_day(records)
    min_chosen = args.min_chosen if args.min_chosen is not None else cfg["audit"]["min_chosen"]
    links = audit.audit_population([records[i] for i in train_idx.tolist()], loaded.vocab, min_chosen)
    if len(links) == 0:
        print("error: no links pass --min-chosen", file=sys.stderr)
        return 1
    emb = audit.link_embeddings(loaded.params, loaded.vocab, links)
    epochs = args.epochs if args.epochs is not None else cfg["audit"]["epochs"]
    sim = audit.fit_similarity(emb, graph, links, epochs=epochs, seed=_seed(args))
    report = audit.rank_suspicious(sim, emb, graph, links, cfg["audit"]["suspicious_fraction"])
    report.write(_out(args))
    print(f"{len(report)} links audited, {int(report.flagged.sum())} flagged, final loss {sim.losses[-1]:.6f}")
    if len(graph.corrupted):
        print(f"planted corruption recall {audit.corruption_recall(report, graph.corrupted):.4f}")
    for name, p in audit.enrichment_pvalues(report, graph).items():
        print(f"enrichment {name}: p={p:.4g}")
    return 0


def cmd_cluster(args, cfg) -> int:
    loaded = _checkpoint(args)
    if args.entity == "links":
        if loaded.model.cfg.wo_sparse:
            print("error: --checkpoint has no link-id embeddings", file=sys.stderr)
            return 1
        ids = np.array(sorted(loaded.vocab.index), dtype=np.int64)
        emb = audit.link_embeddings(loaded.params, loaded.vocab, ids)
    else:
        graph, records = _graph(args), _records(args)
        s = store.build_user_store(loaded, graph, records)
        ids, emb = s.user_ids, s.embeddings
    if not 1 <= args.k <= len(ids):
        print(f"error: --k must lie in [1, {len(ids)}]", file=sys.stderr)
        return 2
    result = audit.cluster_embeddings(emb, args.k, seed=_seed(args))
    audit.write_clusters(_out(args), ids.tolist(), result)
    sizes = np.bincount(result.labels, minlength=args.k)
    print(f"{len(ids)} {args.entity}, k={args.k}, inertia {result.inertia_history[-1]:.6f}, sizes {sizes.tolist()}")
    return 0


def cmd_build_user_store(args, cfg) -> int:
    loaded = _checkpoint(args)
    graph, records = _graph(args), _records(args)
    s = store.build_user_store(loaded, graph, records)
    s.save(_out(args))
    print(f"{args.out}\t{len(s.user_ids)} users\tmodel={s.model_hash}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="routerank", description="Route ranking by predicted deviation rate.")
    p.add_argument("--config", help="versioned JSON config file")
    p.add_argument("--seed", type=int, help="seed for all randomness (default 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def inputs(sp, checkpoint=False, data=True):
        if checkpoint:
            sp.add_argument("--checkpoint", help="model checkpoint (.npz)")
        if data:
            sp.add_argument("--graph", help=f"graph file ({GRAPH_FILE})")
            sp.add_argument("--records", help=f"dataset file ({DATASET_FILE})")

    g = sub.add_parser("gen-data", help="generate a network and navigation logs")
    g.add_argument("--rows", type=int)
    g.add_argument("--cols", type=int)
    g.add_argument("--users", type=int, default=2000)
    g.add_argument("--records", type=int, default=50000)
    g.add_argument("--corruption", type=float, help="fraction of links with corrupted attributes")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model variant")
    inputs(t)
    t.add_argument("--variant", choices=VARIANTS, default="R4")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test AUC of a checkpoint, or the ablation matrix")
    inputs(e, checkpoint=True)
    e.add_argument("--ablation", action="store_true", help="train and evaluate every variant")
    e.add_argument("--seeds", default="0,1,2")
    e.add_argument("--variants", default=",".join(VARIANTS))
    e.add_argument("--epochs", type=int)
    e.add_argument("--out", help="report path")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rank", help="rank the candidates of one record")
    inputs(r, checkpoint=True)
    r.add_argument("--record", type=int, required=True, help="record id")
    r.add_argument("--store", help="user embedding store; computed on the fly when absent")
    r.add_argument("--out")
    r.set_defaults(func=cmd_rank)

    a = sub.add_parser("audit-links", help="flag links whose embedding disagrees with recorded attributes")
    inputs(a, checkpoint=True)
    a.add_argument("--min-chosen", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_audit_links)

    c = sub.add_parser("cluster", help="k-means over link or user embeddings")
    inputs(c, checkpoint=True)
    c.add_argument("--entity", choices=("links", "users"), default="links")
    c.add_argument("--k", type=int, default=8)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    b = sub.add_parser("build-user-store", help="precompute user embeddings for a checkpoint")
    inputs(b, checkpoint=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_user_store)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = config.load_config(args.config)
    except config.ConfigError as exc:
        print(f"error: --config: {exc}", file=sys.stderr)
        return 3
    try:
        return args.func(args, cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - report any pipeline failure as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
