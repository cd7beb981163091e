"""Link-prediction metrics: filtered/raw tail ranking, MRR, Hit@N and reports."""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import metalearn
from .kgdata import (ConfigError, ModalityEmbeddings, Task, TripleStore, mask_modality,
                     rng_stream, sample_task)
from .numkernel import ContractError

HITS = (1, 5, 10)


@dataclass(frozen=True)
class RankRecord:
    triple: tuple[int, int, int]
    rank: int
    n_candidates: int

    def __post_init__(self):
        if not 1 <= self.rank <= self.n_candidates:
            raise ContractError(f"rank {self.rank} outside [1, {self.n_candidates}]")


@dataclass
class MetricsReport:
    mrr: float
    hit1: float
    hit5: float
    hit10: float
    n_queries: int
    per_relation: list[dict] = field(default_factory=list)
    raw: dict = field(default_factory=dict)
    seed: int | None = None
    config_fingerprint: str = ""

    def metrics(self) -> dict:
        return {"mrr": self.mrr, "hit1": self.hit1, "hit5": self.hit5, "hit10": self.hit10}


def rank_true_tail(scores, true_tail: int, known_tails=(), mode: str = "filtered",
                   triple: tuple | None = None) -> RankRecord:
    """Rank of ``true_tail`` among candidates sorted by ascending score.

    ``scores`` maps entity id to score (a mapping, or an array indexed by id).
    Ties go to the smaller entity id. In filtered mode the other known true
    tails leave the candidate pool.
    """
    if mode not in ("raw", "filtered"):
        raise ConfigError(f"unknown ranking mode {mode!r}")
    if isinstance(scores, Mapping):
        if true_tail not in scores:
            raise ContractError(f"true tail {true_tail} has no score")
        ids = np.fromiter(scores.keys(), dtype=np.int64, count=len(scores))
        vals = np.fromiter(scores.values(), dtype=np.float64, count=len(scores))
    else:
        vals = np.asarray(scores, dtype=np.float64)
        if not 0 <= true_tail < len(vals):
            raise ContractError(f"true tail {true_tail} has no score")
        ids = np.arange(len(vals))
    keep = np.ones(len(ids), dtype=bool)
    if mode == "filtered":
        others = [k for k in known_tails if k != true_tail]
        if others:
            keep &= ~np.isin(ids, others)
    s = vals[ids == true_tail][0]
    ids, vals = ids[keep], vals[keep]
    better = np.count_nonzero(vals < s) + np.count_nonzero((vals == s) & (ids < true_tail))
    return RankRecord(triple if triple is not None else (-1, -1, true_tail), int(better) + 1,
                      int(keep.sum()))


def _ranks(records: Sequence) -> np.ndarray:
    if len(records) == 0:
        raise ContractError("empty rank list")
    return np.array([r.rank if isinstance(r, RankRecord) else int(r) for r in records],
                    dtype=np.float64)


def mrr(records: Sequence) -> float:
    return float(np.mean(1.0 / _ranks(records)))


def hits_at(records: Sequence, N: int) -> float:
    if N < 1:
        raise ContractError("N must be >= 1")
    return float(np.mean(_ranks(records) <= N))


def summarize(records: Sequence) -> dict:
    out = {"mrr": mrr(records)}
    for n in HITS:
        out[f"hit{n}"] = hits_at(records, n)
    return out


def make_tasks(store: TripleStore, relations, K: int, seed: int, stream: str,
               n_query: int | None = None) -> list[Task]:
    """One evaluation task per relation: K support triples, the rest as queries."""
    tasks = []
    for r in relations:
        nq = n_query or max(1, store.count(r) - K)
        tasks.append(sample_task(store, r, K, nq, rng_stream(seed, f"tasks.{stream}", r)))
    return tasks


def config_fingerprint(cfg) -> str:
    """Short hash of a config with its seed removed (seeds are reported separately)."""
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg)
    d.pop("seed", None)
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def masked_state(state, fraction: float, seed: int):
    """Copy of ``state`` with floor(fraction * n) textual and visual rows zeroed.

    Each table draws its rows from its own ``masking`` stream.
    """
    out = state.copy()
    emb = ModalityEmbeddings(out.E_S.value, out.E_T.value, out.E_V.value)
    for i, mod in enumerate(("textual", "visual")):
        emb = mask_modality(emb, mod, fraction, rng_stream(seed, "masking", i))
    out.E_T.value = emb.textual.copy()
    out.E_V.value = emb.visual.copy()
    return out


def _task_records(task: Task, state, cfg, store: TripleStore):
    from .objective import sample_episode

    ep = sample_episode(task, store, cfg.n_neg,
                        rng_stream(cfg.seed, "negatives.eval", task.relation))
    adapted = metalearn.meta_test_adapt(ep, state, cfg)
    pred = metalearn.predict(task, state, adapted)
    filt, raw = [], []
    for q, (h, r, t) in enumerate(task.query.tolist()):
        known = store.true_tails(h, r)
        filt.append(rank_true_tail(pred.scores[q], t, known, "filtered", (h, r, t)))
        raw.append(rank_true_tail(pred.scores[q], t, known, "raw", (h, r, t)))
    return filt, raw


def evaluate(tasks: Sequence[Task], state, cfg, store: TripleStore,
             threads: int = 1) -> MetricsReport:
    """Meta-test every task (adapt, predict, rank) and micro-average over queries."""
    tasks = [t for t in tasks if len(t.query)]
    if not tasks:
        raise ContractError("evaluate: no queries")
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda t: _task_records(t, state, cfg, store), tasks))
    else:
        results = [_task_records(t, state, cfg, store) for t in tasks]
    all_f = [r for f, _ in results for r in f]
    all_r = [r for _, rr in results for r in rr]
    per_rel = []
    for task, (f, _) in zip(tasks, results):
        per_rel.append({"relation": store.relation_names[task.relation], "n_queries": len(f),
                        **summarize(f)})
    head = summarize(all_f)
    return MetricsReport(head["mrr"], head["hit1"], head["hit5"], head["hit10"], len(all_f),
                         per_rel, summarize(all_r), cfg.seed, config_fingerprint(cfg))


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """report.json payload: per-seed metrics, their mean and (sample) std."""
    if not reports:
        raise ContractError("aggregate: no reports")
    keys = ("mrr", "hit1", "hit5", "hit10")
    table = np.array([[getattr(r, k) for k in keys] for r in reports])
    raw = np.array([[r.raw[k] for k in keys] for r in reports])
    ddof = 1 if len(reports) > 1 else 0
    out = {
        "config_fingerprint": reports[0].config_fingerprint,
        "seeds": [r.seed for r in reports],
        "n_queries": reports[0].n_queries,
        "rank_mode": "filtered",
        "metrics": dict(zip(keys, table.mean(axis=0).tolist())),
        "metrics_raw": dict(zip(keys, raw.mean(axis=0).tolist())),
        "per_relation": _mean_per_relation(reports),
        "per_seed": [{"seed": r.seed, **r.metrics()} for r in reports],
    }
    if len(reports) > 1:
        out["std"] = dict(zip(keys, table.std(axis=0, ddof=ddof).tolist()))
        out["std_raw"] = dict(zip(keys, raw.std(axis=0, ddof=ddof).tolist()))
    return out


def _mean_per_relation(reports: Sequence[MetricsReport]) -> list[dict]:
    acc: dict[str, list[dict]] = {}
    for rep in reports:
        for row in rep.per_relation:
            acc.setdefault(row["relation"], []).append(row)
    out = []
    for rel, rows in acc.items():
        merged = {"relation": rel, "n_queries": rows[0]["n_queries"]}
        for k in ("mrr", "hit1", "hit5", "hit10"):
            merged[k] = float(np.mean([r[k] for r in rows]))
        out.append(merged)
    return out
