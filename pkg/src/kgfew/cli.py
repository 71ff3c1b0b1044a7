"""Command-line entry point.

Subcommands cover the full pipeline: synthetic corpus generation,
self-supervised pretraining (or ground-truth-supervised training on a
synthetic corpus), learning-free mask-optimization runs, ranking
evaluation, and human-readable mask dumps.

Every run writes a manifest echoing the fully resolved configuration.
One global --seed fans out to per-component seeds through a labeled
hash, so outputs are byte-identical across reruns with the same seed.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .context import ContextConfig
from .evaluation import EvalConfig, evaluate, sample_negatives
from .kg import load_kg, load_triplet_names
from .learned import AdamW, TrainConfig, score_query, train, train_supervised
from .mask_opt import OptConfig, propose_evidence_opt, propose_hypothesis_opt
from .model import Model, ModelConfig, init_model, load_checkpoint, save_checkpoint
from .seeding import derive_rng, derive_seed
from .synth import SynthConfig, SyntheticTask, generate_task, iou, load_corpus, save_corpus
from .tasks import load_task_file

# section -> key -> (type, default); every key is also exposed as a
# --section.key command-line flag and may appear in the INI config file.
CONFIG_SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "model": {
        "d_rel": (int, 100),
        "d_hid": (int, 128),
        "n_layers": (int, 3),
        "clf_hidden": (int, 64),
        "activation": (str, "tanh"),
        "init_gain": (float, 2.0),
        "rel_init_scale": (float, 1.0),
    },
    "context": {
        "k_hops": (int, 2),
        "max_supplement_neighbors": (int, 50),
        "per_endpoint_cap": (int, 1),
    },
    "opt": {
        "lambda_entropy": (float, 0.1),
        "epsilon": (float, 0.01),
        "max_steps": (int, 300),
        "step_size": (float, 0.1),
        "bdmm_multiplier_rate": (float, 30.0),
        "optimizer": (str, "adamw"),
        "momentum": (float, 0.0),
        "init_logit": (float, 0.0),
    },
    "train": {
        "lambda1": (float, 0.7),
        "lambda2": (float, 0.1),
        "gamma": (float, 1.0),
        "learning_rate": (float, 1e-5),
        "weight_decay": (float, 0.01),
        "epochs": (int, 5000),
        "batch_size": (int, 8),
        "proposal_iters": (int, 2),
        "n_pretrain_samples": (int, 256),
        "n_finetune_tasks": (int, 32),
        "shots": (int, 3),
        "max_walks": (int, 4),
        "max_walk_len": (int, 3),
    },
    "synth": {
        "n_tasks": (int, 50),
        "n_relations": (int, 50),
        "n_graphs": (int, 100),
        "n_support": (int, 3),
        "n_pos_queries": (int, 1),
        "n_neg_queries": (int, 1),
        "noise_nodes_min": (int, 4),
        "noise_nodes_max": (int, 10),
        "noise_edges_min": (int, 8),
        "noise_edges_max": (int, 20),
        "prune_hops": (int, 2),
    },
    "eval": {
        "n_negatives": (int, 50),
    },
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config(path: str | None, overrides: dict[str, str]) -> dict[str, dict]:
    resolved = {s: {k: d for k, (_, d) in keys.items()} for s, keys in CONFIG_SCHEMA.items()}
    if path:
        parser = configparser.ConfigParser()
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in CONFIG_SCHEMA:
                raise _UsageError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in CONFIG_SCHEMA[section]:
                    raise _UsageError(f"unknown config key {section}.{key}")
                resolved[section][key] = CONFIG_SCHEMA[section][key][0](raw)
    for dotted, raw in overrides.items():
        section, key = dotted.split(".", 1)
        resolved[section][key] = CONFIG_SCHEMA[section][key][0](raw)
    return resolved


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--config", default=None, help="INI config file")
    sub.add_argument("--seed", type=int, default=0, help="global seed")
    sub.add_argument("--jobs", type=int, default=1, help="worker threads")
    for section, keys in CONFIG_SCHEMA.items():
        for key, (typ, default) in keys.items():
            sub.add_argument(
                f"--{section}.{key}",
                dest=f"cfg_{section}__{key}",
                type=str,
                default=None,
                help=f"override {section}.{key} (default {default})",
            )


def _collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    overrides = {}
    for name, value in vars(args).items():
        if name.startswith("cfg_") and value is not None:
            section, key = name[4:].split("__", 1)
            overrides[f"{section}.{key}"] = value
    return overrides


def _write_manifest(out_dir: str, command: str, args: argparse.Namespace, cfg: dict) -> None:
    manifest = {
        "command": command,
        "seed": args.seed,
        "jobs": args.jobs,
        "inputs": {
            k: v
            for k, v in vars(args).items()
            if k in ("kg", "tasks", "corpus", "checkpoint", "resume", "test_triplets", "masks")
            and v is not None
        },
        "config": cfg,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _synth_config(cfg: dict, seed: int) -> SynthConfig:
    s = cfg["synth"]
    return SynthConfig(
        n_relations=s["n_relations"],
        n_graphs=s["n_graphs"],
        n_support=s["n_support"],
        n_pos_queries=s["n_pos_queries"],
        n_neg_queries=s["n_neg_queries"],
        noise_nodes=(s["noise_nodes_min"], s["noise_nodes_max"]),
        noise_edges=(s["noise_edges_min"], s["noise_edges_max"]),
        prune_hops=s["prune_hops"],
        rng_seed=derive_seed(seed, "synth"),
    )


def _model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        d_rel=m["d_rel"],
        d_hid=m["d_hid"],
        n_layers=m["n_layers"],
        clf_hidden=m["clf_hidden"],
        activation=m["activation"],
        init_gain=m["init_gain"],
        rel_init_scale=m["rel_init_scale"],
    )


def _context_config(cfg: dict, seed: int) -> ContextConfig:
    c = cfg["context"]
    return ContextConfig(
        k_hops=c["k_hops"],
        max_supplement_neighbors=c["max_supplement_neighbors"],
        rng_seed=derive_seed(seed, "context"),
        per_endpoint_cap=bool(c["per_endpoint_cap"]),
    )


def _opt_config(cfg: dict, seed: int) -> OptConfig:
    o = cfg["opt"]
    return OptConfig(
        lambda_entropy=o["lambda_entropy"],
        epsilon=o["epsilon"],
        max_steps=o["max_steps"],
        step_size=o["step_size"],
        bdmm_multiplier_rate=o["bdmm_multiplier_rate"],
        rng_seed=derive_seed(seed, "opt"),
        optimizer=o["optimizer"],
        momentum=o["momentum"],
        init_logit=o["init_logit"],
    )


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lambda1=t["lambda1"],
        lambda2=t["lambda2"],
        gamma=t["gamma"],
        learning_rate=t["learning_rate"],
        weight_decay=t["weight_decay"],
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        rng_seed=derive_seed(seed, "train"),
        proposal_iters=t["proposal_iters"],
        n_pretrain_samples=t["n_pretrain_samples"],
        n_finetune_tasks=t["n_finetune_tasks"],
        shots=t["shots"],
        max_walks=t["max_walks"],
        max_walk_len=t["max_walk_len"],
    )


def _mask_dump(graph, mask, rel_names: list[str] | None) -> dict:
    edges = []
    for (u, r, v, d), w in zip(graph.edges, np.asarray(mask, dtype=np.float64)):
        name = rel_names[r] if rel_names and r < len(rel_names) else f"rel_{r}"
        edges.append({"u": int(u), "relation": name, "v": int(v), "direction": int(d), "weight": float(w)})
    return {"head": graph.head_idx, "tail": graph.tail_idx, "edges": edges}


def cmd_synth_gen(args: argparse.Namespace, cfg: dict) -> int:
    os.makedirs(args.out, exist_ok=True)
    scfg = _synth_config(cfg, args.seed)
    n_tasks = cfg["synth"]["n_tasks"]

    def build(i: int) -> SyntheticTask:
        return generate_task(scfg, derive_rng(scfg.rng_seed, f"task:{i}"))

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            tasks = list(pool.map(build, range(n_tasks)))
    else:
        tasks = [build(i) for i in range(n_tasks)]
    save_corpus(tasks, scfg, args.out)
    _write_manifest(args.out, "synth-gen", args, cfg)
    print(f"wrote {n_tasks} tasks to {args.out}")
    return 0


def cmd_pretrain(args: argparse.Namespace, cfg: dict) -> int:
    os.makedirs(args.out, exist_ok=True)
    tcfg = _train_config(cfg, args.seed)
    mcfg = _model_config(cfg)

    start_epoch = 0
    optimizer = None
    if args.resume:
        model, meta, extra = load_checkpoint(args.resume)
        start_epoch = int(meta.get("epoch", -1)) + 1
        optimizer = AdamW(model.parameters(), lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay)
        if extra:
            optimizer.load_state_arrays(extra)
    elif args.corpus:
        _, corpus_meta = load_corpus(args.corpus)
        model = init_model(mcfg, corpus_meta["n_relations"], seed=derive_seed(args.seed, "model"))
    else:
        kg = load_kg(args.kg)
        model = init_model(mcfg, kg.n_relations, seed=derive_seed(args.seed, "model"))

    log_path = os.path.join(args.out, "train_log.jsonl")
    best = {"loss": float("inf")}

    def on_epoch(epoch, record, opt):
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        loss = record.get("loss_supervised")
        if loss is None:
            loss = tcfg.lambda1 * record["loss_recon"] + tcfg.lambda2 * record["loss_contrast"]
            loss += record.get("loss_finetune", 0.0)
        meta = {"epoch": epoch, "mode": args.mode}
        save_checkpoint(model, os.path.join(args.out, "checkpoint.ckpt"), meta, opt.state_arrays())
        if loss < best["loss"]:
            best["loss"] = loss
            save_checkpoint(model, os.path.join(args.out, "checkpoint_best.ckpt"), meta)

    open(log_path, "w").close()
    if args.corpus:
        tasks, _ = load_corpus(args.corpus)
        result = train_supervised(model, tasks, tcfg, on_epoch=on_epoch)
    else:
        kg = load_kg(args.kg)
        result = train(
            model,
            kg,
            tcfg,
            context_cfg=_context_config(cfg, args.seed),
            mode=args.mode,
            optimizer=optimizer,
            start_epoch=start_epoch,
            on_epoch=on_epoch,
        )
    _write_manifest(args.out, "pretrain", args, cfg)
    if result.diverged:
        print("training diverged; last good checkpoint kept", file=sys.stderr)
        return 2
    print(f"trained {len(result.log)} epochs; checkpoint at {args.out}/checkpoint.ckpt")
    return 0


def cmd_opt_run(args: argparse.Namespace, cfg: dict) -> int:
    os.makedirs(args.out, exist_ok=True)
    masks_dir = os.path.join(args.out, "masks")
    os.makedirs(masks_dir, exist_ok=True)
    tasks, corpus_meta = load_corpus(args.corpus)
    if args.n_tasks is not None:
        tasks = tasks[: args.n_tasks]
    ocfg = _opt_config(cfg, args.seed)
    mcfg = _model_config(cfg)
    model = init_model(
        mcfg, corpus_meta["n_relations"], seed=derive_seed(args.seed, "model"), with_decoder=False
    )

    results = []
    for i, task in enumerate(tasks):
        hyp = propose_hypothesis_opt(model, task.support_graphs, ocfg)
        supports = [
            {"iou": iou(m, gt)} for m, gt in zip(hyp.masks, task.support_masks)
        ]
        queries = []
        dump = {
            "task": i,
            "supports": [
                _mask_dump(g, m, None) for g, m in zip(task.support_graphs, hyp.masks)
            ],
            "queries": [],
        }
        for g, gt in zip(task.pos_query_graphs, task.pos_query_masks):
            mask, score = propose_evidence_opt(model, hyp.embedding, g, ocfg)
            queries.append({"kind": "pos", "score": score, "iou": iou(mask, gt)})
            dump["queries"].append(_mask_dump(g, mask, None))
        for g in task.neg_query_graphs:
            mask, score = propose_evidence_opt(model, hyp.embedding, g, ocfg)
            queries.append({"kind": "neg", "score": score})
            dump["queries"].append(_mask_dump(g, mask, None))
        results.append(
            {
                "task": i,
                "feasible": hyp.feasible,
                "supports": supports,
                "queries": queries,
            }
        )
        with open(os.path.join(masks_dir, f"task_{i:04d}.json"), "w", encoding="utf-8") as fh:
            json.dump(dump, fh, sort_keys=True)
    support_ious = [s["iou"] for r in results for s in r["supports"]]
    evidence_ious = [q["iou"] for r in results for q in r["queries"] if q["kind"] == "pos"]
    summary = {
        "n_tasks": len(results),
        "mean_support_iou": float(np.mean(support_ious)) if support_ious else None,
        "mean_evidence_iou": float(np.mean(evidence_ious)) if evidence_ious else None,
        "results": results,
    }
    with open(os.path.join(args.out, "scores.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_manifest(args.out, "opt-run", args, cfg)
    print(
        f"{len(results)} tasks: support IOU {summary['mean_support_iou']:.3f}, "
        f"evidence IOU {summary['mean_evidence_iou']:.3f}"
    )
    return 0


def _collect_task_files(path: str) -> list[str]:
    if os.path.isdir(path):
        return sorted(
            os.path.join(path, f)
            for f in os.listdir(path)
            if f.endswith((".task", ".txt", ".tsv"))
        )
    return [path]


def cmd_evaluate(args: argparse.Namespace, cfg: dict) -> int:
    os.makedirs(args.out, exist_ok=True)
    kg = load_kg(args.kg)
    if args.inductive:
        if not args.test_triplets:
            raise _UsageError("--inductive requires --test-triplets")
        kg = kg.merge(load_triplet_names(args.test_triplets))
    tasks = [load_task_file(p) for p in _collect_task_files(args.tasks)]
    ecfg = EvalConfig(
        context=_context_config(cfg, args.seed),
        n_negatives=cfg["eval"]["n_negatives"],
        rng_seed=derive_seed(args.seed, "eval"),
    )

    if args.scorer == "stub":
        scorer = None
    elif args.scorer == "gnn":
        if not args.checkpoint:
            raise _UsageError("--scorer gnn requires --checkpoint")
        model, _, _ = load_checkpoint(args.checkpoint)
        iters = cfg["train"]["proposal_iters"]

        def scorer(support_graphs, query_graph, _model=model, _iters=iters):
            return score_query(_model, support_graphs, query_graph, _iters)

    elif args.scorer == "opt":
        model = init_model(
            _model_config(cfg), kg.n_relations, seed=derive_seed(args.seed, "model"),
            with_decoder=False,
        )
        ocfg = _opt_config(cfg, args.seed)
        cache: dict[int, np.ndarray] = {}

        def scorer(support_graphs, query_graph, _model=model, _ocfg=ocfg, _cache=cache):
            key = id(support_graphs)
            if key not in _cache:
                _cache.clear()
                _cache[key] = propose_hypothesis_opt(_model, support_graphs, _ocfg).embedding
            _, score = propose_evidence_opt(_model, _cache[key], query_graph, _ocfg)
            return score

    else:
        raise _UsageError(f"unknown scorer {args.scorer!r}")

    report = evaluate(scorer, tasks, kg, ecfg)
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    _write_manifest(args.out, "evaluate", args, cfg)
    print(report.to_text(), end="")
    return 0


def cmd_dump_masks(args: argparse.Namespace, cfg: dict) -> int:
    os.makedirs(args.out, exist_ok=True)
    for path in sorted(_collect_mask_files(args.masks)):
        with open(path, "r", encoding="utf-8") as fh:
            dump = json.load(fh)
        base = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(args.out, base + ".txt")
        with open(out_path, "w", encoding="utf-8") as fh:
            for kind in ("supports", "queries"):
                for gi, graph in enumerate(dump.get(kind, [])):
                    fh.write(f"{kind[:-1]} {gi} (head={graph['head']} tail={graph['tail']})\n")
                    edges = [e for e in graph["edges"] if e["weight"] >= args.threshold]
                    edges.sort(key=lambda e: (-e["weight"], e["u"], e["v"], e["relation"]))
                    for e in edges:
                        fh.write(
                            f"  {e['weight']:.4f}  ({e['u']}) -[{e['relation']}]-> ({e['v']})\n"
                        )
    _write_manifest(args.out, "dump-masks", args, cfg)
    print(f"wrote mask listings to {args.out}")
    return 0


def _collect_mask_files(path: str) -> list[str]:
    if os.path.isdir(path):
        return [
            os.path.join(path, f) for f in sorted(os.listdir(path)) if f.endswith(".json")
        ]
    return [path]


def build_parser() -> _Parser:
    parser = _Parser(prog="kgfew", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth-gen", help="generate a synthetic task corpus")
    _add_common(p)

    p = subs.add_parser("pretrain", help="train the encoder/decoder")
    _add_common(p)
    p.add_argument("--kg", help="background KG triplet TSV")
    p.add_argument("--corpus", help="synthetic corpus dir (ground-truth supervised training)")
    p.add_argument("--mode", choices=["pretrain", "pretrain+finetune"], default="pretrain")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = subs.add_parser("opt-run", help="learning-free mask optimization on a synthetic corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="synthetic corpus dir")
    p.add_argument("--n-tasks", type=int, default=None, help="limit number of tasks")

    p = subs.add_parser("evaluate", help="ranking evaluation over few-shot task files")
    _add_common(p)
    p.add_argument("--kg", required=True, help="background KG triplet TSV")
    p.add_argument("--tasks", required=True, help="task file or directory")
    p.add_argument("--scorer", choices=["stub", "gnn", "opt"], default="stub")
    p.add_argument("--checkpoint", help="model checkpoint for --scorer gnn")
    p.add_argument("--inductive", action="store_true", help="merge held-out triplets first")
    p.add_argument("--test-triplets", help="held-out triplet TSV for --inductive")

    p = subs.add_parser("dump-masks", help="render mask dumps as sorted text")
    _add_common(p)
    p.add_argument("--masks", required=True, help="mask dump file or directory")
    p.add_argument("--threshold", type=float, default=0.0, help="hide edges below this weight")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "pretrain" and not args.resume and not args.kg and not args.corpus:
            raise _UsageError("pretrain needs --kg, --corpus, or --resume")
        cfg = _load_config(args.config, _collect_overrides(args))
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    handlers = {
        "synth-gen": cmd_synth_gen,
        "pretrain": cmd_pretrain,
        "opt-run": cmd_opt_run,
        "evaluate": cmd_evaluate,
        "dump-masks": cmd_dump_masks,
    }
    try:
        return handlers[args.command](args, cfg)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
