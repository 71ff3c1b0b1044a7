"""Learned hypothesis/evidence proposal and its training loops.

Hypothesis proposal compares all support graphs pairwise with the
encoder/decoder: every graph decodes a candidate mask from every other
graph's masked encoding and keeps the elementwise minimum.  Scoring
encodes the query under the decoded evidence mask and takes cosine
similarity with the mean support embedding.

Training is self-supervised: reconstruct randomly sampled path masks
through the encode/decode round trip, plus a contrastive margin that
keeps reconstructions on the same graph closer than on a graph of a
different relation.  Optional finetuning adds margin ranking of positive
over negative query scores on tasks sampled from the background KG.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .context import ContextConfig, ContextGraph, contextualize_pair
from .kg import KnowledgeGraph
from .model import Model, cosine, decode, encode
from .seeding import derive_rng
from .tasks import FewShotTask, Query


@dataclass
class TrainConfig:
    lambda1: float = 0.7
    lambda2: float = 0.1
    gamma: float = 1.0
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    epochs: int = 5000
    batch_size: int = 8
    rng_seed: int = 0
    proposal_iters: int = 2
    n_pretrain_samples: int = 256
    n_finetune_tasks: int = 32
    shots: int = 3
    max_walks: int = 4
    max_walk_len: int = 3

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.proposal_iters < 1:
            raise ValueError("proposal_iters must be >= 1")


@dataclass
class PretrainSample:
    graph: ContextGraph
    contrast_graph: ContextGraph
    mask: np.ndarray


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    diverged: bool = False


class AdamW:
    """Decoupled-weight-decay adaptive gradient updates."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            step = self.lr * lr_scale * (mhat / (np.sqrt(vhat) + self.eps))
            p.data = p.data - step - self.lr * lr_scale * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"t": np.array([float(self.t)])}
        for i in range(len(self.params)):
            out[f"m{i}"] = self.m[i]
            out[f"v{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for i in range(len(self.params)):
            self.m[i] = arrays[f"m{i}"].reshape(self.m[i].shape).copy()
            self.v[i] = arrays[f"v{i}"].reshape(self.v[i].shape).copy()


def propose_hypothesis_tensors(
    model: Model, support_graphs: list[ContextGraph], iters: int = 2
) -> list[Tensor]:
    """Iterative pairwise decode-and-min mask proposal (differentiable).

    Starting from all-ones masks, each iteration decodes every graph
    against every graph's masked encoding and keeps the elementwise
    minimum.  All of an iteration's decodes read the previous iteration's
    masks, so the result does not depend on support order.
    """
    if not support_graphs:
        raise ValueError("need at least one support graph")
    masks: list[Tensor] = [Tensor(np.ones(g.n_edges)) for g in support_graphs]
    n = len(support_graphs)
    for _ in range(iters):
        encodings = [encode(model, g, m) for g, m in zip(support_graphs, masks)]
        new_masks = []
        for j in range(n):
            candidates = [decode(model, support_graphs[j], encodings[k]) for k in range(n)]
            merged = candidates[0]
            for cand in candidates[1:]:
                merged = ad.minimum(merged, cand)
            new_masks.append(merged)
        masks = new_masks
    return masks


def propose_hypothesis(
    model: Model, support_graphs: list[ContextGraph], iters: int = 2
) -> list[np.ndarray]:
    """Final per-support-graph masks as plain arrays."""
    return [m.data.copy() for m in propose_hypothesis_tensors(model, support_graphs, iters)]


def hypothesis_embedding(
    model: Model, support_graphs: list[ContextGraph], masks: list[Tensor]
) -> Tensor:
    embeddings = [encode(model, g, m) for g, m in zip(support_graphs, masks)]
    total = embeddings[0]
    for e in embeddings[1:]:
        total = total + e
    return total * (1.0 / len(embeddings))


def score_query_tensor(
    model: Model,
    support_graphs: list[ContextGraph],
    query_graph: ContextGraph,
    iters: int = 2,
) -> Tensor:
    masks = propose_hypothesis_tensors(model, support_graphs, iters)
    b = hypothesis_embedding(model, support_graphs, masks)
    m_q = decode(model, query_graph, b)
    g_q = encode(model, query_graph, m_q)
    return cosine(g_q, b)


def score_query(
    model: Model,
    support_graphs: list[ContextGraph],
    query_graph: ContextGraph,
    iters: int = 2,
) -> float:
    """Cosine between the decoded-evidence query encoding and the hypothesis."""
    return score_query_tensor(model, support_graphs, query_graph, iters).item()


def sample_pretrain_mask(
    ctx: ContextGraph,
    rng: np.random.Generator,
    max_walks: int = 4,
    max_walk_len: int = 3,
) -> np.ndarray:
    """Binary mask of 1-4 random walks of length <= 3 from head or tail."""
    if ctx.n_edges == 0:
        raise ValueError("graph has no edges")
    incident: list[list[int]] = [[] for _ in range(ctx.n_nodes)]
    for e, (u, _, v, _) in enumerate(ctx.edges):
        incident[u].append(e)
        if v != u:
            incident[v].append(e)
    mask = np.zeros(ctx.n_edges)
    n_walks = int(rng.integers(1, max_walks + 1))
    terminals = [ctx.head_idx, ctx.tail_idx]
    for _ in range(n_walks):
        node = terminals[int(rng.integers(2))]
        if not incident[node]:
            node = terminals[1] if node == terminals[0] else terminals[0]
        length = int(rng.integers(1, max_walk_len + 1))
        for _ in range(length):
            if not incident[node]:
                break
            e = incident[node][int(rng.integers(len(incident[node])))]
            mask[e] = 1.0
            u, _, v, _ = ctx.edges[e]
            node = v if node == u else u
    return mask


def pretrain_losses(model: Model, sample: PretrainSample, gamma: float) -> tuple[Tensor, Tensor]:
    """(reconstruction BCE, contrastive margin) for one sample.

    The margin penalizes the positive reconstruction failing to beat the
    different-relation reconstruction by gamma.
    """
    g_t = encode(model, sample.graph, Tensor(sample.mask))
    decoded = decode(model, sample.graph, g_t)
    from .synth import supervised_mask_loss

    loss_recon = supervised_mask_loss(decoded, sample.mask)
    g_pos = encode(model, sample.graph, decoded)
    decoded_neg = decode(model, sample.contrast_graph, g_t)
    g_neg = encode(model, sample.contrast_graph, decoded_neg)
    margin = cosine(g_neg, g_t) - cosine(g_pos, g_t) + gamma
    loss_contrast = ad.maximum(margin, Tensor(0.0))
    for name, loss in (("loss_recon", loss_recon), ("loss_contrast", loss_contrast)):
        if not np.isfinite(float(loss.data)):
            raise RuntimeError(f"non-finite {name}")
    return loss_recon, loss_contrast


def sample_training_task(
    kg: KnowledgeGraph, rng: np.random.Generator, k: int, n_queries: int = 1
) -> FewShotTask:
    """A task from a uniformly chosen relation with enough triplets."""
    needed = k + n_queries
    eligible = []
    for r in range(kg.n_relations):
        count = sum(1 for _, rel, _ in kg.triplets if rel == r)
        if count >= needed:
            eligible.append(r)
    if not eligible:
        raise ValueError(f"no relation has at least {needed} triplets")
    rel = int(rng.choice(eligible))
    triplets = [t for t in kg.triplets if t[1] == rel and t[0] != t[2]]
    if len(triplets) < needed:
        raise ValueError(f"relation {kg.relation_names[rel]} has too few usable triplets")
    picks = rng.choice(len(triplets), size=needed, replace=False)
    chosen = [triplets[i] for i in picks]
    support = [(kg.entity_names[h], kg.entity_names[t]) for h, _, t in chosen[:k]]
    queries = [Query(kg.entity_names[h], kg.entity_names[t]) for h, _, t in chosen[k:]]
    return FewShotTask(kg.relation_names[rel], support, queries)


def build_pretrain_samples(
    kg: KnowledgeGraph, cfg: TrainConfig, context_cfg: ContextConfig
) -> list[PretrainSample]:
    """Contextualize random triplets of distinct relation pairs."""
    rng = derive_rng(cfg.rng_seed, "pretrain-samples")
    by_relation: dict[int, list[tuple[int, int, int]]] = {}
    for h, r, t in kg.triplets:
        if h != t:
            by_relation.setdefault(r, []).append((h, r, t))
    relations = sorted(by_relation)
    if len(relations) < 2:
        raise ValueError("need at least two relations with usable triplets for pretraining")
    samples: list[PretrainSample] = []
    attempts = 0
    while len(samples) < cfg.n_pretrain_samples and attempts < cfg.n_pretrain_samples * 20:
        attempts += 1
        r1, r2 = rng.choice(relations, size=2, replace=False)
        h1, _, t1 = by_relation[r1][int(rng.integers(len(by_relation[r1])))]
        h2, _, t2 = by_relation[r2][int(rng.integers(len(by_relation[r2])))]
        g1 = contextualize_pair(kg, h1, t1, context_cfg, exclude_relation=int(r1))
        g2 = contextualize_pair(kg, h2, t2, context_cfg, exclude_relation=int(r2))
        if g1.n_edges == 0 or g2.n_edges == 0:
            continue
        mask = sample_pretrain_mask(g1, rng, cfg.max_walks, cfg.max_walk_len)
        if mask.sum() == 0:
            continue
        samples.append(PretrainSample(graph=g1, contrast_graph=g2, mask=mask))
    if len(samples) < cfg.n_pretrain_samples:
        raise ValueError(
            f"could only build {len(samples)} of {cfg.n_pretrain_samples} pretrain samples"
        )
    return samples


def _clone_params(model: Model) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _restore_params(model: Model, snapshot: list[np.ndarray]) -> None:
    for p, data in zip(model.parameters(), snapshot):
        p.data = data.copy()


def train(
    model: Model,
    kg: KnowledgeGraph,
    cfg: TrainConfig,
    context_cfg: ContextConfig | None = None,
    mode: str = "pretrain",
    optimizer: AdamW | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> TrainResult:
    """Optimize lambda1*recon + lambda2*contrast (+ finetune ranking).

    mode is "pretrain" or "pretrain+finetune".  The learning rate decays
    linearly to zero over `cfg.epochs`.  On a non-finite loss the last
    finished epoch's parameters are restored and training stops with
    `diverged=True`.
    """
    if mode not in ("pretrain", "pretrain+finetune"):
        raise ValueError(f"unknown training mode {mode!r}")
    context_cfg = context_cfg or ContextConfig(rng_seed=cfg.rng_seed)
    samples = build_pretrain_samples(kg, cfg, context_cfg)
    finetune_tasks: list[tuple[list[ContextGraph], ContextGraph, ContextGraph]] = []
    if mode == "pretrain+finetune":
        finetune_tasks = _build_finetune_tasks(kg, cfg, context_cfg)

    params = model.parameters()
    opt = optimizer or AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = derive_rng(cfg.rng_seed, "train-order")
    log: list[dict] = []
    snapshot = _clone_params(model)

    for epoch in range(start_epoch, cfg.epochs):
        lr_scale = 1.0 - epoch / cfg.epochs
        order = rng.permutation(len(samples))
        epoch_recon, epoch_contrast, epoch_ft, n_batches = 0.0, 0.0, 0.0, 0
        diverged = False
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            total = Tensor(0.0)
            batch_recon = batch_contrast = 0.0
            for idx in batch:
                loss_recon, loss_contrast = pretrain_losses(model, samples[idx], cfg.gamma)
                total = total + (cfg.lambda1 * loss_recon + cfg.lambda2 * loss_contrast) * (
                    1.0 / len(batch)
                )
                batch_recon += float(loss_recon.data) / len(batch)
                batch_contrast += float(loss_contrast.data) / len(batch)
            batch_ft = 0.0
            if finetune_tasks:
                ft_idx = int(rng.integers(len(finetune_tasks)))
                support, pos_g, neg_g = finetune_tasks[ft_idx]
                pos_score = score_query_tensor(model, support, pos_g, cfg.proposal_iters)
                neg_score = score_query_tensor(model, support, neg_g, cfg.proposal_iters)
                ft_loss = ad.maximum(neg_score - pos_score + cfg.gamma, Tensor(0.0))
                total = total + ft_loss
                batch_ft = float(ft_loss.data)
            if not np.isfinite(float(total.data)):
                diverged = True
                break
            opt.zero_grad()
            ad.backward(total)
            opt.step(lr_scale=lr_scale)
            epoch_recon += batch_recon
            epoch_contrast += batch_contrast
            epoch_ft += batch_ft
            n_batches += 1
        if diverged:
            _restore_params(model, snapshot)
            log.append({"epoch": epoch, "event": "diverged; restored last checkpoint"})
            return TrainResult(model=model, log=log, diverged=True)
        snapshot = _clone_params(model)
        record = {
            "epoch": epoch,
            "loss_recon": epoch_recon / max(n_batches, 1),
            "loss_contrast": epoch_contrast / max(n_batches, 1),
            "loss_finetune": epoch_ft / max(n_batches, 1),
            "lr": cfg.learning_rate * lr_scale,
        }
        log.append(record)
        if on_epoch is not None:
            on_epoch(epoch, record, opt)
    return TrainResult(model=model, log=log)


def _build_finetune_tasks(
    kg: KnowledgeGraph, cfg: TrainConfig, context_cfg: ContextConfig
) -> list[tuple[list[ContextGraph], ContextGraph, ContextGraph]]:
    """Sampled tasks contextualized once: (support graphs, positive, negative)."""
    from .evaluation import sample_negatives

    rng = derive_rng(cfg.rng_seed, "finetune-tasks")
    tasks = []
    attempts = 0
    while len(tasks) < cfg.n_finetune_tasks and attempts < cfg.n_finetune_tasks * 20:
        attempts += 1
        try:
            task = sample_training_task(kg, rng, cfg.shots, n_queries=1)
        except ValueError:
            break
        rel = kg.relation_id(task.relation)
        support = [
            contextualize_pair(kg, kg.entity_id(h), kg.entity_id(t), context_cfg, rel)
            for h, t in task.support
        ]
        q = task.queries[0]
        head = kg.entity_id(q.head)
        pos_tail = kg.entity_id(q.positive_tail)
        if head == pos_tail:
            continue
        neg_tail = sample_negatives(kg, head, rel, pos_tail, 1, rng)[0]
        if neg_tail == head:
            continue
        pos_g = contextualize_pair(kg, head, pos_tail, context_cfg, rel)
        neg_g = contextualize_pair(kg, head, neg_tail, context_cfg, rel)
        tasks.append((support, pos_g, neg_g))
    if not tasks:
        raise ValueError("could not sample any finetuning tasks from the KG")
    return tasks


def evaluate_synthetic(model: Model, tasks: list, iters: int = 2) -> dict:
    """Held-out mask recovery and score separation on synthetic tasks.

    Returns mean support IOU (proposed vs planted masks), mean evidence
    IOU (decoded query mask vs planted), and the fraction of (positive,
    negative) query pairs ranked correctly (ties count half).
    """
    from .synth import iou

    support_ious: list[float] = []
    evidence_ious: list[float] = []
    pair_wins: list[float] = []
    for task in tasks:
        masks = propose_hypothesis_tensors(model, task.support_graphs, iters)
        support_ious.extend(
            iou(m.data, gt) for m, gt in zip(masks, task.support_masks)
        )
        b = hypothesis_embedding(model, task.support_graphs, masks)
        pos_scores = []
        for g, gt in zip(task.pos_query_graphs, task.pos_query_masks):
            m_q = decode(model, g, b)
            evidence_ious.append(iou(m_q.data, gt))
            g_q = encode(model, g, m_q)
            pos_scores.append(cosine(g_q, b).item())
        neg_scores = []
        for g in task.neg_query_graphs:
            m_q = decode(model, g, b)
            g_q = encode(model, g, m_q)
            neg_scores.append(cosine(g_q, b).item())
        for p in pos_scores:
            for n in neg_scores:
                pair_wins.append(1.0 if p > n else (0.5 if p == n else 0.0))
    return {
        "support_iou": float(np.mean(support_ious)) if support_ious else 0.0,
        "evidence_iou": float(np.mean(evidence_ious)) if evidence_ious else 0.0,
        "auc": float(np.mean(pair_wins)) if pair_wins else 0.0,
    }


def _supervised_task_loss(model: Model, task, rng: np.random.Generator) -> Tensor:
    """Ground-truth supervision of the decode steps the proposal performs.

    Teacher-forces the pairwise comparisons: decoding any support graph
    against another graph's full-mask encoding (proposal iteration 1) or
    true-mask encoding (later iterations) should produce the planted
    mask, and decoding a positive query against the mean true-mask
    embedding should produce the query's planted mask.  One random
    counterpart k is sampled per graph per stage.
    """
    from .synth import supervised_mask_loss

    graphs = task.support_graphs
    truths = task.support_masks
    n = len(graphs)
    terms: list[Tensor] = []
    for j in range(n):
        k = int(rng.integers(n))
        enc_full = encode(model, graphs[k], Tensor(np.ones(graphs[k].n_edges)))
        terms.append(supervised_mask_loss(decode(model, graphs[j], enc_full), truths[j]))
        k = int(rng.integers(n))
        enc_true = encode(model, graphs[k], Tensor(truths[k]))
        terms.append(supervised_mask_loss(decode(model, graphs[j], enc_true), truths[j]))
    b_true = hypothesis_embedding(model, graphs, [Tensor(m) for m in truths])
    for g, truth in zip(task.pos_query_graphs, task.pos_query_masks):
        terms.append(supervised_mask_loss(decode(model, g, b_true), truth))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def train_supervised(
    model: Model,
    train_tasks: list,
    cfg: TrainConfig,
    on_epoch=None,
) -> TrainResult:
    """Supervise proposal and evidence masks with synthetic ground truth."""
    params = model.parameters()
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = derive_rng(cfg.rng_seed, "train-supervised")
    log: list[dict] = []
    snapshot = _clone_params(model)
    for epoch in range(cfg.epochs):
        lr_scale = 1.0 - epoch / cfg.epochs
        order = rng.permutation(len(train_tasks))
        epoch_loss, n_batches = 0.0, 0
        diverged = False
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            total = Tensor(0.0)
            for idx in batch:
                total = total + _supervised_task_loss(model, train_tasks[idx], rng) * (
                    1.0 / len(batch)
                )
            if not np.isfinite(float(total.data)):
                diverged = True
                break
            opt.zero_grad()
            ad.backward(total)
            opt.step(lr_scale=lr_scale)
            epoch_loss += float(total.data)
            n_batches += 1
        if diverged:
            _restore_params(model, snapshot)
            log.append({"epoch": epoch, "event": "diverged; restored last checkpoint"})
            return TrainResult(model=model, log=log, diverged=True)
        snapshot = _clone_params(model)
        record = {
            "epoch": epoch,
            "loss_supervised": epoch_loss / max(n_batches, 1),
            "lr": cfg.learning_rate * lr_scale,
        }
        log.append(record)
        if on_epoch is not None:
            on_epoch(epoch, record, opt)
    return TrainResult(model=model, log=log)
