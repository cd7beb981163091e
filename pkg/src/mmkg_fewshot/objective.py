"""Diversity loss, margin ranking loss and the meta-train / meta-test objectives."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .kgdata import Task, TripleStore, sample_negatives
from .model import (AdapterParams, ModelState, adapt_modality, fuse, margin_hinge,
                    refine_relation_meta, relation_meta, score_rows)
from .numkernel import ContractError, Node


@dataclass(frozen=True)
class Episode:
    """A task with its corrupted tails fixed: (n, n_neg) arrays of entity ids."""

    task: Task
    support_neg: np.ndarray
    query_neg: np.ndarray

    @property
    def n_neg(self) -> int:
        return self.support_neg.shape[1]


def sample_episode(task: Task, store: TripleStore, n_neg: int, rng) -> Episode:
    r = task.relation
    sup = sample_negatives(store, task.support[:, 0], r, n_neg, rng)
    qry = sample_negatives(store, task.query[:, 0], r, n_neg, rng) if len(task.query) \
        else np.zeros((0, n_neg), dtype=np.int64)
    return Episode(task, sup, qry)


@dataclass
class LossBreakdown:
    task_loss: float
    diversity_loss: float
    total: float
    node: Node | None = field(default=None, compare=False, repr=False)


def entity_bag(triples: np.ndarray) -> np.ndarray:
    """Entity ids of every head and tail slot, with multiplicity."""
    return np.concatenate([triples[:, 0], triples[:, 2]])


def diversity_loss(bag: Sequence[int], e_S: Node, e_T: Node, e_V: Node, gamma: float) -> Node:
    """Mean over the bag of ``[cos(e'_V, e_S) - gamma]_+ + [cos(e'_T, e_S) - gamma]_+``.

    ``e_S``, ``e_T`` and ``e_V`` are row tables (structural, adapted textual,
    adapted visual) indexed by the ids in ``bag``.
    """
    bag = np.asarray(bag, dtype=np.int64)
    if bag.size == 0:
        raise ContractError("diversity_loss: empty entity bag")
    s = nk.take_rows(e_S, bag)
    v_term = nk.hinge(nk.shift(nk.cosine_rows(nk.take_rows(e_V, bag), s), -gamma))
    t_term = nk.hinge(nk.shift(nk.cosine_rows(nk.take_rows(e_T, bag), s), -gamma))
    return nk.add(nk.mean_all(v_term), nk.mean_all(t_term))


def ranking_loss(fused: Node, triples: np.ndarray, negatives: np.ndarray, R: Node,
                 epsilon: float) -> Node:
    """Mean of ``[s(h,r,t) - s(h,r,t') + epsilon]_+``.

    ``triples`` and ``negatives`` hold row indices into ``fused``; with several
    negatives per positive the hinge is averaged over negatives, then positives
    (equal counts make this the flat mean).
    """
    if len(triples) == 0:
        raise ContractError("ranking_loss: empty triple list")
    n_neg = negatives.shape[1]
    h = np.repeat(triples[:, 0], n_neg)
    t = np.repeat(triples[:, 2], n_neg)
    heads = nk.take_rows(fused, h)
    pos = score_rows(heads, R, nk.take_rows(fused, t))
    neg = score_rows(heads, R, nk.take_rows(fused, negatives.reshape(-1)))
    return margin_hinge(pos, neg, epsilon)


class _Local:
    """Maps global entity ids onto rows of the episode's local fused table."""

    def __init__(self, ids: np.ndarray):
        self.ids = np.unique(ids)

    def __call__(self, arr: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.ids, arr)

    def triples(self, tr: np.ndarray) -> np.ndarray:
        out = tr.copy()
        out[:, 0] = self(tr[:, 0])
        out[:, 2] = self(tr[:, 2])
        return out


def fused_rows(state: ModelState, ids: np.ndarray, adapters: tuple | None,
               frozen: bool) -> tuple[Node, Node | None, Node | None, Node]:
    """Structural, adapted textual, adapted visual and fused rows for ``ids``.

    ``adapters`` is ``(adapter_T, adapter_V)`` or None for a structural-only
    model. ``frozen`` cuts gradient flow into the embedding tables.
    """
    tables = state.embedding_params()
    if frozen:
        tables = [nk.detach(t) for t in tables]
    E_S, E_T, E_V = tables
    s = nk.take_rows(E_S, ids)
    if adapters is None:
        return s, None, None, s
    ad_T, ad_V = adapters
    t = adapt_modality(nk.take_rows(E_T, ids), ad_T)
    v = adapt_modality(nk.take_rows(E_V, ids), ad_V)
    return s, t, v, fuse(s, t, v)


def refined_relation(state: ModelState, fused: Node, support: np.ndarray,
                     support_neg: np.ndarray, frozen: bool) -> Node:
    """Relation meta from the support pairs, refined on the support loss."""
    hp = state.hyper
    R = relation_meta(nk.take_rows(fused, support[:, 0]), nk.take_rows(fused, support[:, 2]),
                      state.meta_learner, frozen=frozen)
    n_neg = support_neg.shape[1]
    heads = nk.take_rows(fused, np.repeat(support[:, 0], n_neg))
    tails = nk.take_rows(fused, np.repeat(support[:, 2], n_neg))
    negs = nk.take_rows(fused, support_neg.reshape(-1))
    return refine_relation_meta(R, heads, tails, negs, hp.beta, hp.epsilon,
                                steps=hp.refine_steps, higher_order=hp.higher_order)


def _objective(ep: Episode, state: ModelState, adapters, stage: str) -> LossBreakdown:
    hp = state.hyper
    task = ep.task
    frozen = stage == "test"
    if stage == "train":
        ids = np.concatenate([task.support[:, [0, 2]].ravel(), ep.support_neg.ravel(),
                              task.query[:, [0, 2]].ravel(), ep.query_neg.ravel()])
    else:
        ids = np.concatenate([task.support[:, [0, 2]].ravel(), ep.support_neg.ravel()])
    local = _Local(ids)
    s, t, v, fused = fused_rows(state, local.ids, adapters, frozen)
    support = local.triples(task.support)
    R = refined_relation(state, fused, support, local(ep.support_neg), frozen)
    if stage == "train":
        if len(task.query) == 0:
            raise ContractError("meta_train_objective: task has an empty query set")
        task_loss = ranking_loss(fused, local.triples(task.query), local(ep.query_neg), R,
                                 hp.epsilon)
        bag = local(np.concatenate([entity_bag(task.support), entity_bag(task.query)]))
    else:
        task_loss = ranking_loss(fused, support, local(ep.support_neg), R, hp.epsilon)
        bag = local(entity_bag(task.support))
    if adapters is None:
        total = task_loss
        div_value = 0.0
    else:
        div = diversity_loss(bag, s, t, v, hp.gamma)
        div_value = float(div.value)
        total = nk.add(task_loss, nk.scale(div, hp.alpha)) if hp.alpha else task_loss
    return LossBreakdown(float(task_loss.value), div_value, float(total.value), total)


def _adapters_for(state: ModelState, adapters) -> tuple[AdapterParams, AdapterParams] | None:
    if not state.hyper.use_adapters:
        return None
    return adapters if adapters is not None else (state.adapter_T, state.adapter_V)


def meta_train_objective(ep: Episode, state: ModelState, adapters=None) -> LossBreakdown:
    """Query ranking loss plus ``alpha`` times the diversity loss over support and query entities.

    Gradients reach the meta learner, the adapters and all embedding tables.
    """
    return _objective(ep, state, _adapters_for(state, adapters), "train")


def meta_test_objective(ep: Episode, state: ModelState, adapters=None) -> LossBreakdown:
    """Support ranking loss plus ``alpha`` times the diversity loss over support entities.

    Embedding tables and the meta learner enter as constants; only adapter
    parameters can receive gradient. ``adapters`` overrides the state's
    adapters (for per-task clones).
    """
    return _objective(ep, state, _adapters_for(state, adapters), "test")
