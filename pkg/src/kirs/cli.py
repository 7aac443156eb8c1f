"""Command-line entry point: ``kirs <command> [--config run.ini] [flags]``.

Every command reads and writes inside ``run.output_dir``:

    interactions.tsv  triples.tsv  kg_test.tsv  item_links.tsv  stats.json
    semantic.ckpt  structural.ckpt  infomax.kirs  model.ckpt
    train_report.csv  metrics.csv  kg_metrics.csv  effective_config.ini

Exit codes: 0 success, 1 internal error, 2 input error, 3 missing prerequisite.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import infomax
from .config import ConfigError, dump_config, load_config
from .evaluation import evaluate_completion, evaluate_recommendation
from .kg_data import (
    SPLIT_CODES, EmptyDatasetError, KnowledgeGraph, ParseError, _iter_rows, cold_start_subsets,
    dataset_stats, holdout_split, link_items, load_interactions, load_item_links, load_split,
    load_triples, normalize_name, split_per_user, write_item_links, write_split, write_triples,
)
from .preference import PreferenceModel
from .semantic import SemanticTable, load_pretrained
from .structural import StructuralTable
from .trainer import TrainReport, pretrain_semantic, pretrain_structural, run_pipeline

logger = logging.getLogger("kirs")

COMMANDS = (
    "preprocess", "pretrain-semantic", "pretrain-structural", "build-infomax",
    "train", "evaluate", "kg-complete", "cold-start-split",
)


class InputError(Exception):
    exit_code = 2


class MissingArtifact(Exception):
    exit_code = 3


def _out(cfg, name=""):
    return Path(cfg.run.output_dir) / name


def _need(path, hint):
    if not Path(path).exists():
        raise MissingArtifact(f"missing {path} (run `{hint}` first)")
    return Path(path)


def _input(path, key):
    if not path:
        raise InputError(f"config key {key} is required")
    if not Path(path).is_file():
        raise InputError(f"input file not found: {path}")
    return Path(path)


# -- data -------------------------------------------------------------------


def _is_split_file(path):
    for _, cols in _iter_rows(path, 2):
        return len(cols) == 3 and cols[2] in SPLIT_CODES
    return False


def _read_kg_rows(path):
    return [tuple(c) for _, c in _iter_rows(path, 3, 3)]


def preprocess(cfg):
    """Filter, split and link the raw inputs; rerunning on the output is a fixed point."""
    d = cfg.data
    inter = _input(d.interactions, "data.interactions")
    full = KnowledgeGraph.from_triples(
        load_triples(_input(d.triples, "data.triples"), d.min_entity_freq, d.relation_blacklist)
    )
    links = load_item_links(_input(d.links, "data.links"))

    if _is_split_file(inter):
        log = load_split(inter)
    else:
        log = load_interactions(inter, d.min_user_freq, d.min_item_freq)
        log = split_per_user(log, tuple(d.split_ratios), cfg.run.seed)

    if d.kg_test:
        train_kg, test_rows = full, _read_kg_rows(_input(d.kg_test, "data.kg_test"))
    elif d.kg_test_fraction > 0:
        train_kg, test_idx = holdout_split(full, d.kg_test_fraction, cfg.run.seed)
        test_rows = [(t.head_name, t.relation_name, t.tail_name) for t in (full.triples[k] for k in test_idx)]
    else:
        train_kg, test_rows = full, []

    log = link_items(log, links, train_kg)
    out = _out(cfg)
    write_split(log, out / "interactions.tsv")
    write_triples(train_kg.triples, out / "triples.tsv")
    with open(out / "kg_test.tsv", "w", encoding="utf-8") as fh:
        fh.writelines(f"{h}\t{r}\t{t}\n" for h, r, t in test_rows)
    write_item_links(log, train_kg, out / "item_links.tsv")
    stats = dataset_stats(log, train_kg).as_dict()
    stats["n_linked_items"] = int((log.item_to_entity >= 0).sum())
    stats["n_kg_test"] = len(test_rows)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(stats, sort_keys=True))


def _load_kg(cfg):
    return KnowledgeGraph.from_triples(load_triples(_need(_out(cfg, "triples.tsv"), "preprocess")))


def _load_log(cfg, kg):
    split = cfg.data.split_file
    if not split:
        name = "interactions.tsv"
        if cfg.run.fraction < 1:
            name = f"interactions_cold_{cfg.run.fraction}.tsv"
        split = _need(_out(cfg, name), "cold-start-split" if cfg.run.fraction < 1 else "preprocess")
    log = load_split(_need(split, "preprocess"))
    links = load_item_links(_need(_out(cfg, "item_links.tsv"), "preprocess"))
    return link_items(log, links, kg)


def cold_start_split(cfg):
    kg = _load_kg(cfg)
    log = load_split(_need(_out(cfg, "interactions.tsv"), "preprocess"))
    if cfg.run.fraction >= 1:
        raise InputError("--fraction must be 0.25, 0.5 or 0.75")
    reduced = cold_start_subsets(log, cfg.run.fraction, cfg.run.seed)
    path = _out(cfg, f"interactions_cold_{cfg.run.fraction}.tsv")
    write_split(reduced, path)
    print(json.dumps({"path": str(path), **dataset_stats(reduced, kg).as_dict()}, sort_keys=True))


# -- pretraining --------------------------------------------------------------


def _pretrained(cfg):
    if cfg.run.backend in ("", "tiny"):
        return None
    backend, tok = load_pretrained(cfg.run.backend)
    cfg.train.semantic.hidden_size = backend.hidden_size
    return backend, tok


def pretrain_semantic_cmd(cfg):
    kg = _load_kg(cfg)
    train = cfg.effective_train()
    report = TrainReport()
    table = pretrain_semantic(train, kg, report, _pretrained(cfg))
    infomax.save_checkpoint(
        _out(cfg, "semantic.ckpt"),
        {"entity": table.entity_vectors, "relation": table.relation_vectors,
         "planes": table.relation_planes, "seen": table.entity_seen.astype(np.float64)},
        {"finetuned": train.use_finetuned_lm, "seed": train.seed},
    )
    report.to_csv(_out(cfg, "semantic_report.csv"))


def pretrain_structural_cmd(cfg):
    kg = _load_kg(cfg)
    report = TrainReport()
    table = pretrain_structural(cfg.effective_train(), kg, report)
    infomax.save_checkpoint(
        _out(cfg, "structural.ckpt"),
        {"entity": table.entity_vectors, "relation": table.relation_vectors,
         "seen": table.entity_seen.astype(np.float64)},
        {"seed": cfg.run.seed},
    )
    report.to_csv(_out(cfg, "structural_report.csv"))


def build_infomax_cmd(cfg):
    train = cfg.effective_train()
    sem = st = None
    sources = {}
    if train.use_semantic:
        path = _need(_out(cfg, "semantic.ckpt"), "pretrain-semantic")
        t, _ = infomax.load_checkpoint(path)
        sem = SemanticTable(t["entity"], t["relation"], t["planes"], t["seen"][:, 0] > 0)
        sources["semantic"] = infomax.file_checksum(path)
    if train.use_structural:
        path = _need(_out(cfg, "structural.ckpt"), "pretrain-structural")
        t, _ = infomax.load_checkpoint(path)
        st = StructuralTable(t["entity"], t["relation"], t["seen"][:, 0] > 0)
        sources["structural"] = infomax.file_checksum(path)
    if sem is None and st is None:
        raise InputError("ablation leaves no encoder to build an Infomax table from")
    store = infomax.build(
        st, sem, structural_dim=train.structural.dim, semantic_dim=train.semantic.hidden_size,
        seed=train.seed, sources=sources,
    )
    infomax.save(store, _out(cfg, "infomax.kirs"))
    print(json.dumps({"entities": store.n_entities, "relations": store.n_relations, "dim": store.dim}))


# -- training and evaluation ------------------------------------------------


def train_cmd(cfg):
    kg = _load_kg(cfg)
    log = _load_log(cfg, kg)
    train = cfg.effective_train()
    store = None
    if train.use_semantic or train.use_structural:
        store = infomax.load(_need(_out(cfg, "infomax.kirs"), "build-infomax"))
    model, _, report = run_pipeline(train, log, kg, store=store)
    report.to_csv(_out(cfg, "train_report.csv"))
    meta = {"n_users": log.n_users, "n_items": log.n_items, "n_preferences": kg.n_relations,
            "dim": model.dim, "float64": train.float64, "refinement": train.refinement,
            "similarity": train.similarity, "stop_epoch": report.stop_epoch}
    infomax.save_checkpoint(_out(cfg, "model.ckpt"), model.state_tables(), meta)
    print(json.dumps({"stop_epoch": report.stop_epoch, "best_epoch": report.best_epoch,
                      "stages": report.stage_order()}))


def load_model(path):
    tables, meta = infomax.load_checkpoint(path)
    dtype = torch.float64 if meta["float64"] else torch.float32
    model = PreferenceModel(meta["n_users"], meta["n_items"], meta["n_preferences"], meta["dim"], dtype,
                            meta["refinement"], meta["similarity"])
    return model.load_tables(tables)


def evaluate_cmd(cfg):
    kg = _load_kg(cfg)
    log = _load_log(cfg, kg)
    model = load_model(_need(_out(cfg, "model.ckpt"), "train"))
    report, _ = evaluate_recommendation(model, log, cfg.eval.k, policy=cfg.eval.policy)
    report.to_csv(_out(cfg, "metrics.csv"), columns=["precision", "recall", "f1", "hit", "ndcg"])
    print(report.table())
    for note in report.notes:
        print(note)


def kg_complete_cmd(cfg):
    kg = _load_kg(cfg)
    store = infomax.load(_need(_out(cfg, "infomax.kirs"), "build-infomax"))
    rows = _read_kg_rows(_need(_out(cfg, "kg_test.tsv"), "preprocess"))
    if not rows:
        raise InputError("kg_test.tsv is empty; set data.kg_test_fraction > 0 and rerun preprocess")
    ents = kg.entity_index
    rels = {r: k for k, r in enumerate(kg.relation_names)}
    triples = [kg.make_triple(ents[normalize_name(h)], rels[r], ents[normalize_name(t)]) for h, r, t in rows]
    test_kg = KnowledgeGraph(triples=triples, entity_names=kg.entity_names, relation_names=kg.relation_names)
    report, _ = evaluate_completion(
        store.entity_vectors.astype(np.float64), store.relation_vectors.astype(np.float64),
        store.plane_matrix().astype(np.float64), test_kg, np.arange(len(test_kg)),
        np.random.default_rng(cfg.run.seed), cfg.eval.missing, cfg.eval.filtered, k=10,
    )
    report.to_csv(_out(cfg, "kg_metrics.csv"), columns=["hit", "mean_rank"])
    print(report.table())


HANDLERS = {
    "preprocess": preprocess,
    "pretrain-semantic": pretrain_semantic_cmd,
    "pretrain-structural": pretrain_structural_cmd,
    "build-infomax": build_infomax_cmd,
    "train": train_cmd,
    "evaluate": evaluate_cmd,
    "kg-complete": kg_complete_cmd,
    "cold-start-split": cold_start_split,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run] [data] [train] ... sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="bound on intra-stage threads")
    common.add_argument("--ablation", choices=("se", "st", "fi", "in", "cl"))
    common.add_argument("--fraction", type=float, choices=(0.25, 0.5, 0.75))
    common.add_argument("--output", help="override run.output_dir")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="kirs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _overrides(args):
    pairs = []
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        pairs.append((key.strip(), value))
    flags = {"run.seed": args.seed, "run.workers": args.workers, "run.ablation": args.ablation,
             "run.fraction": args.fraction, "run.output_dir": args.output}
    pairs += [(k, str(v)) for k, v in flags.items() if v is not None]
    return pairs


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = load_config(args.config, _overrides(args))
        torch.set_num_threads(max(1, cfg.run.workers))
        out = _out(cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.ini").write_text(dump_config(cfg), encoding="utf-8")
        HANDLERS[args.command](cfg)
    except (InputError, ConfigError, ParseError, EmptyDatasetError, infomax.StoreFormatError) as exc:
        print(f"kirs {args.command}: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"kirs {args.command}: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"kirs {args.command}: internal error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
