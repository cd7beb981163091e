"""Meta-training with early stopping, per-task adapter adaptation and ranking."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import evaluation
from . import numkernel as nk
from .kgdata import (ConfigError, ModalityEmbeddings, RelationSplits, Task,
                     TripleStore, rng_stream, sample_task)
from .model import AdapterParams, Hyper, ModelState, init_state
from .objective import (Episode, _Local, fused_rows, meta_test_objective,
                        meta_train_objective, refined_relation, sample_episode)

log = logging.getLogger(__name__)

ABLATION_MODES = ("full", "no_div", "no_adapters", "frozen_adapters", "random_init_adapters")


# Shorter schedule, smaller adapters and a faster adapter learning rate; the
# remaining fields keep their defaults.
DESK_PRESET = dict(max_epochs=3000, eval_every=250, patience=4, batch_size=48,
                   lr_main=1e-3, lr_adapter=1e-3, m=16)


class TrainingError(RuntimeError):
    """Meta-training diverged."""


@dataclass
class TrainConfig:
    max_epochs: int = 100_000
    eval_every: int = 1_000
    patience: int = 30
    batch_size: int = 1024
    lr_main: float = 1e-3
    lr_adapter: float = 1e-4
    lr_adapt: float | None = None
    K: int = 5
    n_query: int = 3
    n_neg: int = 3
    alpha: float = 1.0
    gamma: float = 0.0
    epsilon: float = 1.0
    beta: float = 5.0
    m: int = 50
    h_meta: int | None = None
    refine_steps: int = 1
    higher_order: bool = False
    max_adapt_steps: int = 100
    adapt_tol: float = 1e-5
    train_inner_adapt_steps: int = 0
    n_eval_query: int | None = None
    seed: int = 0
    ablation_mode: str = "full"

    def validate(self) -> None:
        for name in ("max_epochs", "eval_every", "batch_size", "K", "n_query", "n_neg", "m",
                     "refine_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("patience", "max_adapt_steps", "train_inner_adapt_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr_main <= 0 or self.lr_adapter <= 0 or (self.lr_adapt is not None and self.lr_adapt <= 0):
            raise ConfigError("learning rates must be positive")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation_mode {self.ablation_mode!r}; expected one of {ABLATION_MODES}")
        try:
            self.hyper().validate()
        except nk.ContractError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def tasks_per_batch(self) -> int:
        return max(1, self.batch_size // (self.n_query * (1 + self.n_neg)))

    @property
    def adapt_lr(self) -> float:
        return self.lr_adapt if self.lr_adapt is not None else self.lr_adapter

    def hyper(self) -> Hyper:
        no_div = self.ablation_mode in ("no_div", "no_adapters")
        return Hyper(alpha=0.0 if no_div else self.alpha, gamma=self.gamma, epsilon=self.epsilon,
                     beta=self.beta, m=self.m, lr_main=self.lr_main, lr_adapter=self.lr_adapter,
                     refine_steps=self.refine_steps, higher_order=self.higher_order,
                     use_adapters=self.ablation_mode != "no_adapters")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Schedule sized for the synthetic generator on one CPU (minutes, not hours)."""
        return cls(**{**DESK_PRESET, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdaptResult:
    adapters: tuple[AdapterParams, AdapterParams] | None
    steps_taken: int
    initial_loss: float
    final_loss: float
    duration: float
    episode: Episode = field(repr=False, default=None)
    n_registered: int = 0  # scalars in the adaptation optimizer's registry


@dataclass
class Prediction:
    """Scores (n_query, n_entities) and candidate ids sorted best-first."""

    scores: np.ndarray
    ranking: np.ndarray


@dataclass
class TrainResult:
    state: ModelState
    history: list[dict]
    best_epoch: int
    best_val_mrr: float


# ------------------------------------------------------------------ training

def _check_relations(store: TripleStore, relations, K: int, split: str) -> None:
    for r in relations:
        if store.count(r) < K + 1:
            raise ConfigError(
                f"{split} relation {store.relation_names[r]!r} has {store.count(r)} triples; "
                f"K={K} needs at least {K + 1}")


def _mean_node(nodes: list) -> nk.Node:
    acc = nodes[0]
    for n in nodes[1:]:
        acc = nk.add(acc, n)
    return nk.scale(acc, 1.0 / len(nodes))


def _inner_adapted(ep: Episode, state: ModelState, steps: int, lr: float):
    """Adapter clones fine-tuned on the support set (first-order inner loop)."""
    clones = (state.adapter_T.clone(), state.adapter_V.clone())
    opt = nk.Adam({"adapters": (clones[0].params() + clones[1].params(), lr)})
    for _ in range(steps):
        with nk.GradTape() as tape:
            lb = meta_test_objective(ep, state, clones)
        opt.step(nk.backward(tape, lb.node, opt.params))
    return clones


def meta_train(data: tuple[TripleStore, ModalityEmbeddings, RelationSplits], cfg: TrainConfig,
               threads: int = 1) -> TrainResult:
    """Minimise the meta-training objective over training relations with Adam.

    Every ``eval_every`` epochs the validation relations are meta-tested; the
    best-MRR state is kept and training stops once ``patience`` evaluations in
    a row fail to improve on it.
    """
    cfg.validate()
    store, emb, splits = data
    if not splits.train:
        raise ConfigError("training split is empty")
    _check_relations(store, splits.train, cfg.K, "train")
    _check_relations(store, splits.valid, cfg.K, "valid")

    state = init_state(emb, cfg.hyper(), cfg.seed, cfg.h_meta)
    groups = {"main": (state.embedding_params() + state.prior_params(), cfg.lr_main)}
    if state.hyper.use_adapters:
        groups["adapters"] = (state.adapter_params(), cfg.lr_adapter)
    opt = nk.Adam(groups)

    sampler = rng_stream(cfg.seed, "sampling")
    neg_rng = rng_stream(cfg.seed, "negatives")
    train_rels = list(splits.train)
    val_tasks = evaluation.make_tasks(store, splits.valid, cfg.K, cfg.seed, "valid",
                                      cfg.n_eval_query)
    inner = cfg.train_inner_adapt_steps if state.hyper.use_adapters else 0

    history: list[dict] = []
    best = (-math.inf, 0, state.copy())
    since_best = 0
    window: list[float] = []
    for epoch in range(1, cfg.max_epochs + 1):
        with nk.GradTape() as tape:
            totals = []
            clone_map = []
            for _ in range(cfg.tasks_per_batch):
                r = train_rels[int(sampler.integers(len(train_rels)))]
                task = sample_task(store, r, cfg.K, cfg.n_query, sampler)
                ep = sample_episode(task, store, cfg.n_neg, neg_rng)
                if inner:
                    with _suspended():
                        clones = _inner_adapted(ep, state, inner, cfg.adapt_lr)
                    clone_map.append(clones)
                    totals.append(meta_train_objective(ep, state, clones).node)
                else:
                    totals.append(meta_train_objective(ep, state).node)
            loss = _mean_node(totals)
        grads = nk.backward(tape, loss, opt.params + [p for c in clone_map for a in c for p in a.params()])
        for clones in clone_map:
            for orig, cl in zip(state.adapter_params(), clones[0].params() + clones[1].params()):
                grads[orig] = grads[orig] + grads.pop(cl)
        lv = float(loss.value)
        if not math.isfinite(lv) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        opt.step(grads)
        window.append(lv)

        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            if val_tasks:
                val = evaluation.evaluate(val_tasks, state, cfg, store, threads=threads).mrr
            else:
                val = float("nan")
            history.append({"epoch": epoch, "train_loss": float(np.mean(window)), "val_mrr": val})
            log.info("epoch %d train_loss %.6f val_mrr %.4f", epoch, history[-1]["train_loss"], val)
            window = []
            if not val_tasks:
                best = (val, epoch, state.copy())
            elif val > best[0]:
                best = (val, epoch, state.copy())
                since_best = 0
            else:
                since_best += 1
            if val_tasks and since_best >= cfg.patience:
                break
    return TrainResult(best[2], history, best[1], best[0])


class _suspended:
    """Temporarily hide the active tape (inner-loop work must not be recorded)."""

    def __enter__(self):
        self._stack = getattr(nk._local, "stack", [])
        nk._local.stack = []

    def __exit__(self, *exc):
        nk._local.stack = self._stack


# ------------------------------------------------------------------ meta-test


def meta_test_adapt(ep: Episode, state: ModelState, cfg: TrainConfig,
                    mode: str | None = None) -> AdaptResult:
    """Fine-tune cloned adapters on the support set; nothing else is touched."""
    mode = mode or cfg.ablation_mode
    start = time.perf_counter()
    if not state.hyper.use_adapters:
        lb = meta_test_objective(ep, state)
        return AdaptResult(None, 0, lb.total, lb.total, time.perf_counter() - start, ep)
    if mode == "random_init_adapters":
        rng = rng_stream(cfg.seed, "init.random_adapters", ep.task.relation)
        clones = tuple(AdapterParams.init(a.d_in, a.m, a.d_out, rng, f"adapter.{tag}")
                       for tag, a in (("T", state.adapter_T), ("V", state.adapter_V)))
    else:
        clones = (state.adapter_T.clone(), state.adapter_V.clone())
    max_steps = 0 if mode == "frozen_adapters" else cfg.max_adapt_steps
    opt = nk.Adam({"adapters": (clones[0].params() + clones[1].params(), cfg.adapt_lr)})

    initial = prev = None
    steps = 0
    for _ in range(max_steps):
        with nk.GradTape() as tape:
            lb = meta_test_objective(ep, state, clones)
        if initial is None:
            initial = lb.total
        if prev is not None and abs(lb.total - prev) <= cfg.adapt_tol * abs(prev):
            break
        opt.step(nk.backward(tape, lb.node, opt.params))
        steps += 1
        prev = lb.total
    final = meta_test_objective(ep, state, clones).total
    if initial is None:
        initial = final
    return AdaptResult(clones, steps, initial, final, time.perf_counter() - start, ep,
                       opt.n_scalars)


def all_fused(state: ModelState, adapters) -> np.ndarray:
    ids = np.arange(state.E_S.shape[0])
    return fused_rows(state, ids, adapters, frozen=True)[3].value


def predict(task: Task, state: ModelState, adapted: AdaptResult,
            fused: np.ndarray | None = None) -> Prediction:
    """Score every entity as the tail of each query; rank ascending, ties by id."""
    ep = adapted.episode
    if ep is None or ep.task.relation != task.relation:
        raise ConfigError("predict: adapted result belongs to a different task")
    F = all_fused(state, adapted.adapters) if fused is None else fused
    local = _Local(np.concatenate([task.support[:, [0, 2]].ravel(), ep.support_neg.ravel()]))
    with _suspended():
        sub = nk.const(F[local.ids])
        R = refined_relation(state, sub, local.triples(task.support), local(ep.support_neg),
                             frozen=True).value
    heads = F[task.query[:, 0]] + R
    diff = heads[:, None, :] - F[None, :, :]
    scores = np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))
    ids = np.arange(F.shape[0])
    ranking = np.stack([np.lexsort((ids, s)) for s in scores]) if len(scores) \
        else np.zeros((0, F.shape[0]), dtype=np.int64)
    return Prediction(scores, ranking)


# ------------------------------------------------------------------ ablations

def training_regime(mode: str) -> str:
    """Ablations that share a trained model map to the same regime."""
    return {"frozen_adapters": "full", "random_init_adapters": "full"}.get(mode, mode)


def run_ablation(data, cfg: TrainConfig, modes=ABLATION_MODES, split: str = "test",
                 threads: int = 1, trained: dict | None = None) -> dict:
    """Train once per distinct regime, then evaluate every mode on identical tasks."""
    store, emb, splits = data
    for m in modes:
        if m not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {m!r}")
    trained = {} if trained is None else trained
    tasks = evaluation.make_tasks(store, splits.of(split), cfg.K, cfg.seed, split,
                                  cfg.n_eval_query)
    reports = {}
    for m in modes:
        regime = training_regime(m)
        if regime not in trained:
            trained[regime] = meta_train(data, replace(cfg, ablation_mode=regime), threads).state
        reports[m] = evaluation.evaluate(tasks, trained[regime], replace(cfg, ablation_mode=m),
                                         store, threads=threads)
    return reports
