import hashlib

import numpy as np
import pytest

from mmkg_fewshot import numkernel as nk
from mmkg_fewshot.kgdata import SyntheticConfig, generate_synthetic, sample_task
from mmkg_fewshot.model import Hyper, init_state, refine_relation_meta, relation_meta
from mmkg_fewshot.numkernel import ContractError, GradTape, const
from mmkg_fewshot.objective import (diversity_loss, entity_bag, meta_test_objective,
                                    meta_train_objective, ranking_loss, sample_episode)


def unit(theta):
    return np.array([np.cos(theta), np.sin(theta)])


# ----------------------------------------------------------------- diversity

def test_diversity_gamma_one_is_zero():
    rng = np.random.default_rng(0)
    S, T, V = (const(rng.normal(size=(5, 3))) for _ in range(3))
    assert float(diversity_loss([0, 1, 2, 2], S, T, V, 1.0).value) == 0.0


def test_diversity_aligned_orthogonal():
    S = const([[1.0, 0.0]])
    assert float(diversity_loss([0], S, const([[0.0, 2.0]]), const([[3.0, 0.0]]), 0.0).value) == 1.0


def test_diversity_two_entity_mean():
    # per-entity terms 0.3 and 0.7 via cosines against e_S = x-axis; e'_T orthogonal
    S = const([[1.0, 0.0], [1.0, 0.0]])
    T = const([[0.0, 1.0], [0.0, 1.0]])
    V = const(np.vstack([unit(np.arccos(0.3)), unit(np.arccos(0.7))]))
    assert float(diversity_loss([0, 1], S, T, V, 0.0).value) == pytest.approx(0.5, abs=1e-12)


def test_diversity_multiplicity_counts():
    S = const([[1.0, 0.0], [1.0, 0.0]])
    T = const([[0.0, 1.0], [0.0, 1.0]])
    V = const([[1.0, 0.0], [0.0, 1.0]])
    # entity 0 contributes 1, entity 1 contributes 0; bag [0, 0, 1] -> 2/3
    assert float(diversity_loss([0, 0, 1], S, T, V, 0.0).value) == pytest.approx(2 / 3)


def test_diversity_scale_invariance_and_gamma_monotone():
    rng = np.random.default_rng(1)
    S, T, V = (rng.normal(size=(6, 4)) for _ in range(3))
    bag = [0, 1, 2, 3, 4, 5, 5]
    base = float(diversity_loss(bag, const(S), const(T), const(V), 0.0).value)
    T2 = T.copy()
    T2[2] *= 3.0
    assert abs(float(diversity_loss(bag, const(S), const(T2), const(V), 0.0).value) - base) < 1e-12
    vals = [float(diversity_loss(bag, const(S), const(T), const(V), g).value)
            for g in np.linspace(-1, 1, 21)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_diversity_empty_bag():
    S = const(np.ones((1, 2)))
    with pytest.raises(ContractError):
        diversity_loss([], S, S, S, 0.0)


def test_entity_bag_multiplicity():
    tr = np.array([[0, 0, 1], [0, 0, 2]])
    assert sorted(entity_bag(tr).tolist()) == [0, 0, 1, 2]


# ------------------------------------------------------------------- ranking

def _rank1d(pos_tail, neg_tail, eps):
    # fused rows: 0 = head at origin, 1 = positive tail, 2 = negative tail
    F = const([[0.0], [pos_tail], [neg_tail]])
    return float(ranking_loss(F, np.array([[0, 0, 1]]), np.array([[2]]), const([0.0]), eps).value)


def test_ranking_examples():
    assert _rank1d(0.0, 2.0, 1.0) == 0.0
    assert _rank1d(1.0, 0.5, 1.0) == 1.5
    F = const([[0.0], [0.0], [2.0], [1.0], [0.5]])
    tr = np.array([[0, 0, 1], [0, 0, 3]])
    neg = np.array([[2], [4]])
    assert float(ranking_loss(F, tr, neg, const([0.0]), 1.0).value) == 0.75


def test_ranking_margin_monotone_and_translation_invariant():
    rng = np.random.default_rng(2)
    F = rng.normal(size=(8, 3))
    tr = np.array([[0, 0, 1], [2, 0, 3], [4, 0, 5]])
    neg = rng.integers(0, 8, size=(3, 2))
    R = const(rng.normal(size=3))
    vals = [float(ranking_loss(const(F), tr, neg, R, e).value) for e in (0, 0.5, 1, 2, 4)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    shifted = float(ranking_loss(const(F + rng.normal(size=3)), tr, neg, R, 1.0).value)
    assert shifted == pytest.approx(float(ranking_loss(const(F), tr, neg, R, 1.0).value), abs=1e-12)
    with pytest.raises(ContractError):
        ranking_loss(const(F), tr[:0], neg[:0], R, 1.0)


# --------------------------------------------------------------- objectives

@pytest.fixture(scope="module")
def setting():
    store, emb, splits = generate_synthetic(SyntheticConfig(n_entities=60, n_relations=6,
                                                            triples_per_relation=12, d_S=4,
                                                            d_T=6, d_V=5, latent_dim=4, seed=1))
    return store, emb, splits


def _episode(setting, seed=0, K=3, n_query=3):
    store, _, splits = setting
    task = sample_task(store, splits.train[0], K, n_query, seed)
    return sample_episode(task, store, 2, np.random.default_rng(seed))


def _state(setting, **hyper):
    return init_state(setting[1], Hyper(m=3, **hyper), 0)


def _digest(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.value.tobytes())
    return h.hexdigest()


def test_breakdown_identity(setting):
    ep = _episode(setting)
    for alpha in (0.0, 0.3, 1.0):
        st = _state(setting, alpha=alpha)
        for fn in (meta_train_objective, meta_test_objective):
            lb = fn(ep, st)
            assert lb.total == pytest.approx(lb.task_loss + alpha * lb.diversity_loss, abs=1e-12)
            assert lb.task_loss >= 0 and lb.diversity_loss >= 0
    st = _state(setting, alpha=0.0)
    lb = meta_test_objective(ep, st)
    assert lb.total == lb.task_loss


def test_objective_deterministic(setting):
    st = _state(setting)
    a = meta_test_objective(_episode(setting, 4), st)
    b = meta_test_objective(_episode(setting, 4), st)
    assert a == b


def _structural_only_train_loss(ep, st):
    """MetaR on structural embeddings alone, assembled directly from the model ops."""
    task, hp = ep.task, st.hyper
    E = const(st.E_S.value)
    R = relation_meta(nk.take_rows(E, task.support[:, 0]), nk.take_rows(E, task.support[:, 2]),
                      st.meta_learner)
    n = ep.n_neg
    heads = nk.take_rows(E, np.repeat(task.support[:, 0], n))
    tails = nk.take_rows(E, np.repeat(task.support[:, 2], n))
    negs = nk.take_rows(E, ep.support_neg.reshape(-1))
    Rp = refine_relation_meta(R, heads, tails, negs, hp.beta, hp.epsilon)
    return float(ranking_loss(E, task.query, ep.query_neg, Rp, hp.epsilon).value)


def test_zero_adapters_match_structural_only(setting):
    ep = _episode(setting, 2)
    st = _state(setting, alpha=0.0)
    for p in st.adapter_params():
        p.value[:] = 0
    got = meta_train_objective(ep, st)
    assert got.total == _structural_only_train_loss(ep, st)
    st.hyper.use_adapters = False
    assert meta_train_objective(ep, st).total == got.total


def test_meta_test_gradients_reach_only_adapters(setting):
    st = _state(setting)
    ep = _episode(setting)
    everything = st.embedding_params() + st.prior_params() + st.adapter_params()
    with GradTape() as tape:
        lb = meta_test_objective(ep, st)
    g = nk.backward(tape, lb.node, everything)
    for p in st.embedding_params() + st.prior_params():
        assert not np.any(g[p]), p.name
    assert any(np.any(g[p]) for p in st.adapter_params())


def test_meta_train_gradients_reach_everything(setting):
    st = _state(setting)
    for p in st.adapter_params():
        p.value[:] = np.random.default_rng(0).normal(size=p.value.shape)
    ep = _episode(setting)
    with GradTape() as tape:
        lb = meta_train_objective(ep, st)
    g = nk.backward(tape, lb.node, st.embedding_params() + st.prior_params() + st.adapter_params())
    for p in (st.E_S, st.E_T, st.E_V, st.meta_learner.W1, st.adapter_T.W_down):
        assert np.any(g[p]), p.name


def test_adapt_step_leaves_prior_hash(setting):
    st = _state(setting)
    ep = _episode(setting)
    before = _digest(st.embedding_params() + st.prior_params())
    opt = nk.Adam({"adapters": (st.adapter_params(), 1e-2)})
    with GradTape() as tape:
        lb = meta_test_objective(ep, st)
    opt.step(nk.backward(tape, lb.node, opt.params))
    assert _digest(st.embedding_params() + st.prior_params()) == before
