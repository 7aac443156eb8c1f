"""End-to-end training: pretraining, Infomax assembly, warm-up, update, main training.

Stages run strictly in this order and are recorded in :class:`TrainReport`:

1. ``pretrain-semantic``   masked-LM + connection fine-tuning of the triple encoder
2. ``pretrain-structural`` graph-convolution triple classifier
3. ``build-infomax``       ``d = [e, s]`` table, persisted when a work dir is given
4. ``warm-up``             ``warmup_epochs`` epochs of BPR + InfoNCE
5. ``infomax-update``      items/preferences switch to ``i + d_i``, ``p + d_p`` (once)
6. ``main``                BPR epochs with early stopping on validation Precision@K
"""

from __future__ import annotations

import copy
import csv
import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import infomax
from .contrastive import DEFAULT_NEGATIVES, ContrastiveEncoder, infonce_loss, warmup_loss
from .evaluation import evaluate_recommendation
from .kg_data import TRAIN, VALID, sample_negative_items
from .optim import Adagrad
from .preference import PreferenceModel
from .semantic import SemanticConfig, build_semantic_model, export_semantic_table, fine_tune
from .structural import StructuralConfig, export_structural_table, train_structural

logger = logging.getLogger(__name__)

STAGES = ("pretrain-semantic", "pretrain-structural", "build-infomax", "warm-up", "infomax-update", "main")
ABLATIONS = {
    "se": {"use_semantic": False},
    "st": {"use_structural": False},
    "fi": {"use_finetuned_lm": False},
    "in": {"use_semantic": False, "use_structural": False, "use_contrastive": False},
    "cl": {"use_contrastive": False},
}
LR_GRID = (0.0005, 0.001, 0.005, 0.01)
L2_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    l2: float = 1e-5
    batch_size: int = 1024
    warmup_epochs: int = 2
    max_epochs: int = 30
    patience: int = 3
    margin: float = 1.0
    temperature: float = 0.3
    n_negatives: int = DEFAULT_NEGATIVES
    eval_k: int = 10
    seed: int = 0
    use_semantic: bool = True
    use_structural: bool = True
    use_finetuned_lm: bool = True
    use_contrastive: bool = True
    optimizer: str = "adagrad"
    similarity: str = "dot"
    refinement: str = "dominant"
    candidate_policy: str = "catalog"
    float64: bool = False
    # mean row norm of each Infomax half during training; sqrt(12) matches the embedding init
    infomax_norm: float = math.sqrt(12.0)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    structural: StructuralConfig = field(default_factory=StructuralConfig)

    def validate(self):
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ValueError("need 0 <= warmup_epochs < max_epochs")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if min(self.learning_rate, self.batch_size, self.temperature, self.margin) <= 0 or self.l2 < 0:
            raise ValueError("rates, batch size, temperature and margin must be positive")
        if self.optimizer != "adagrad":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        self.structural.validate()
        return self

    def with_ablation(self, name):
        """Copy with the flags of ablation ``se``, ``st``, ``fi``, ``in`` or ``cl``."""
        if name is None:
            return copy.deepcopy(self)
        return replace(copy.deepcopy(self), **ABLATIONS[name])

    @property
    def dim(self):
        return self.structural.dim + self.semantic.hidden_size

    @property
    def dtype(self):
        return torch.float64 if self.float64 else torch.float32


def early_stop(history, patience=3):
    """True once ``patience`` epochs have passed without beating the best value."""
    if not history:
        raise ValueError("empty validation history")
    best = int(np.argmax(history))
    return len(history) - 1 - best >= patience


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    wall_time: float = 0.0
    updates: int = 0

    COLUMNS = ("stage", "epoch", "L_g", "L_com", "L_w", "L_r", "L_con", "val_precision", "val_ndcg")

    def add(self, stage, epoch, **values):
        row = {c: math.nan for c in self.COLUMNS}
        row.update(stage=stage, epoch=epoch, **values)
        self.rows.append(row)

    def stage_order(self):
        return [name for name, status in self.stages if status != "skipped"]

    def epochs(self, stage):
        return [r for r in self.rows if r["stage"] == stage]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


class _Stage:
    def __init__(self, report, name):
        self.report, self.name = report, name

    def __enter__(self):
        logger.info("stage %s", self.name)
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc


def pretrain_semantic(config, kg, report, pretrained=None):
    backend, tok = pretrained if pretrained is not None else (None, None)
    model, tok = build_semantic_model(kg, config.semantic, config.seed, tokenizer=tok, backend=backend)
    if config.use_finetuned_lm:
        steps = fine_tune(model, kg, tok, config.semantic, config.seed)
        for epoch, rows in itertools.groupby(steps, key=lambda r: r["epoch"]):
            report.add("pretrain-semantic", epoch, L_g=float(np.mean([r["L_g"] for r in rows])))
    return export_semantic_table(model, kg, tok, max_length=config.semantic.max_length)


def pretrain_structural(config, kg, report):
    dtype = config.dtype
    model, graph, hist = train_structural(kg, config.structural, config.seed, dtype)
    for epoch, loss in enumerate(hist, 1):
        report.add("pretrain-structural", epoch, L_com=loss)
    return export_structural_table(model, graph)


def build_infomax_store(config, kg, report, pretrained=None):
    """Stages 1-3. Ablated encoders contribute zero halves of the usual width.

    ``pretrained`` is an optional ``(backend, tokenizer)`` pair from
    :func:`kirs.semantic.load_pretrained`; the tiny encoder is used otherwise.
    """
    sem = st = None
    with _Stage(report, "pretrain-semantic"):
        if config.use_semantic:
            sem = pretrain_semantic(config, kg, report, pretrained)
        report.stages.append(("pretrain-semantic", "done" if sem is not None else "skipped"))
    with _Stage(report, "pretrain-structural"):
        if config.use_structural:
            st = pretrain_structural(config, kg, report)
        report.stages.append(("pretrain-structural", "done" if st is not None else "skipped"))
    with _Stage(report, "build-infomax"):
        if sem is None and st is None:
            report.stages.append(("build-infomax", "skipped"))
            return None
        store = infomax.build(
            st, sem, structural_dim=config.structural.dim, semantic_dim=config.semantic.hidden_size,
            seed=config.seed,
        )
        report.stages.append(("build-infomax", "done"))
    return store


def ablate_store(store, use_semantic=True, use_structural=True):
    """Copy of ``store`` with the disabled halves zeroed; ``None`` if both are off."""
    if use_semantic and use_structural:
        return store
    if not (use_semantic or use_structural):
        return None
    cols = slice(store.structural_dim, None) if not use_semantic else slice(0, store.structural_dim)
    ent, rel = store.entity_vectors.copy(), store.relation_vectors.copy()
    ent[:, cols] = 0
    rel[:, cols] = 0
    planes = store.plane_vectors if use_semantic else np.zeros_like(store.plane_vectors)
    meta = dict(store.metadata, ablated="semantic" if not use_semantic else "structural")
    return infomax.InfomaxStore(
        store.structural_dim, store.semantic_dim, store.entity_ids, ent,
        store.relation_ids, rel, planes, meta,
    )


def _epoch(model, log, opt, rng, config, encoder=None, item_infomax=None, contrast_ok=None):
    """One pass over training pairs; returns mean ``(L_r, L_con)``."""
    users, items = log.pairs(TRAIN)
    order = rng.permutation(len(users))
    tot_r = tot_c = 0.0
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        u, i = users[idx], items[idx]
        j = sample_negative_items(log, u, rng)
        l_r = model.bpr_loss(torch.from_numpy(u), torch.from_numpy(i), torch.from_numpy(j))
        loss, l_c = l_r, torch.zeros(())
        if encoder is not None:
            uniq = np.unique(i)
            uniq = uniq[contrast_ok[uniq]]
            if len(uniq) >= 2:
                t = torch.from_numpy(uniq)
                l_c = infonce_loss(model.item[t], encoder(item_infomax[t]), config.temperature, config.n_negatives)
                loss = warmup_loss(l_r, l_c)
        opt.zero_grad()
        loss.backward()
        opt.step()
        tot_r += l_r.item() * len(idx)
        tot_c += l_c.item() * len(idx)
    return tot_r / len(order), tot_c / len(order)


def _validate(model, log, config):
    if not (log.split == VALID).any():
        return math.nan, math.nan
    rep, _ = evaluate_recommendation(model, log, config.eval_k, VALID, config.candidate_policy)
    return rep.precision, rep.ndcg


def run_pipeline(config, log, kg, workdir=None, store=None, pretrained=None, resume=False):
    """Train the full model; returns ``(model, store, report)``.

    ``store`` skips stages 1-3 with a prebuilt Infomax table (they are then
    reported as ``loaded``), as does ``resume`` when ``workdir`` already holds
    ``infomax.kirs``.
    """
    config.validate()
    t0 = time.perf_counter()
    report = TrainReport()
    workdir = Path(workdir) if workdir is not None else None
    saved = workdir / "infomax.kirs" if workdir is not None else None
    if store is None and resume and saved is not None and saved.exists():
        store = infomax.load(saved)
    if store is not None:
        report.stages += [(s, "loaded") for s in STAGES[:3]]
        store = ablate_store(store, config.use_semantic, config.use_structural)
    else:
        store = build_infomax_store(config, kg, report, pretrained)
        if store is not None and saved is not None:
            workdir.mkdir(parents=True, exist_ok=True)
            infomax.save(store, saved)

    # the persisted table stays raw; training sees each half at a fixed mean norm
    table = store
    if store is not None and config.infomax_norm > 0:
        table = store.rescaled(config.infomax_norm)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    dtype = config.dtype
    model = PreferenceModel(
        log.n_users, log.n_items, kg.n_relations, config.dim, dtype, config.refinement, config.similarity
    )
    encoder = item_infomax = contrast_ok = None
    named = list(model.named_parameters())
    if table is not None and config.use_contrastive:
        item_infomax = torch.as_tensor(table.entity_matrix(log.item_to_entity), dtype=dtype)
        contrast_ok = (item_infomax != 0).any(dim=1).numpy()
        encoder = ContrastiveEncoder(table.dim, model.dim, dtype=dtype)
        named += [(f"encoder.{n}", p) for n, p in encoder.named_parameters()]
    opt = Adagrad(named, lr=config.learning_rate, l2=config.l2)

    epoch = 0
    with _Stage(report, "warm-up"):
        for _ in range(config.warmup_epochs):
            epoch += 1
            l_r, l_c = _epoch(model, log, opt, rng, config, encoder, item_infomax, contrast_ok)
            p, n = _validate(model, log, config)
            report.add("warm-up", epoch, L_r=l_r, L_con=l_c, L_w=l_r + l_c, val_precision=p, val_ndcg=n)
        report.stages.append(("warm-up", "done" if config.warmup_epochs else "skipped"))

    with _Stage(report, "infomax-update"):
        if table is not None:
            model.apply_infomax_update(table, log.item_to_entity)
            report.updates += 1
        report.stages.append(("infomax-update", "done" if table is not None else "skipped"))
    # contrastive learning is switched off after the warm-up; accumulators carry over
    warm = opt
    opt = Adagrad(model.named_parameters(), lr=config.learning_rate, l2=config.l2)
    opt.state = {k: v for k, v in warm.state.items() if k in opt.params}

    history, best_state = [], None
    with _Stage(report, "main"):
        while epoch < config.max_epochs:
            epoch += 1
            l_r, _ = _epoch(model, log, opt, rng, config)
            p, n = _validate(model, log, config)
            report.add("main", epoch, L_r=l_r, val_precision=p, val_ndcg=n)
            if math.isnan(p):
                continue
            if p > max(history, default=-math.inf):
                best_state = copy.deepcopy(model.state_dict())
                report.best_epoch = epoch
            history.append(p)
            if early_stop(history, config.patience):
                break
        if best_state is not None:
            model.load_state_dict(best_state)
        report.stages.append(("main", "done"))
    report.stop_epoch = epoch
    report.wall_time = time.perf_counter() - t0
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
        report.to_csv(workdir / "train_report.csv")
        infomax.save_checkpoint(workdir / "model.ckpt", model.state_tables(), {"config": asdict(config)})
    return model, store, report


def grid_search(config, log, kg, learning_rates=LR_GRID, l2s=L2_GRID, store=None, pretrained=None):
    """Global search over ``(learning_rate, l2)`` on validation Precision@K.

    The Infomax table is built once and shared by every grid point. Returns
    ``(best_config, rows)`` where rows hold each point's best validation score.
    """
    if store is None and (config.use_semantic or config.use_structural):
        store = build_infomax_store(config, kg, TrainReport(), pretrained)
    rows, best = [], None
    for lr, l2 in itertools.product(learning_rates, l2s):
        cfg = replace(config, learning_rate=lr, l2=l2)
        _, _, rep = run_pipeline(cfg, log, kg, store=store)
        score = max((r["val_precision"] for r in rep.rows if not math.isnan(r["val_precision"])),
                    default=math.nan)
        rows.append({"learning_rate": lr, "l2": l2, "val_precision": score})
        if best is None or score > best[0]:
            best = (score, cfg)
    return best[1], rows
