"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
collected into the terminal summary.
"""
import functools
import hashlib
import json
import time

import numpy as np
import pytest

from mmkg_fewshot import evaluation
from mmkg_fewshot import numkernel as nk
from mmkg_fewshot.cli import main as cli_main
from mmkg_fewshot.kgdata import (SyntheticConfig, TripleStore, generate_synthetic, load_triples,
                                 prune_rare_relations, sample_task)
from mmkg_fewshot.metalearn import (TrainConfig, meta_test_adapt, meta_train, predict,
                                    run_ablation)
from mmkg_fewshot.model import (Hyper, count_adapter_params, init_state, refine_relation_meta,
                                relation_meta)
from mmkg_fewshot.numkernel import GradTape, const
from mmkg_fewshot.objective import (diversity_loss, meta_test_objective, meta_train_objective,
                                    ranking_loss, sample_episode)
from oracles import brute_metrics, brute_rank, small_kg_cases

SEEDS = (0, 1, 2, 3, 4)
ABLATION_DATA = SyntheticConfig(complementarity=0.8)
MASKS = (0.0, 0.25, 0.5, 0.75, 1.0)


def digest(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.value.tobytes())
    return h.hexdigest()


# ------------------------------------------------------------ 1. gradients

def _grad_instance(seed):
    data = generate_synthetic(SyntheticConfig(n_entities=8, n_relations=2, triples_per_relation=6,
                                              d_S=4, d_T=6, d_V=5, latent_dim=4, seed=seed))
    store, emb, _ = data
    st = init_state(emb, Hyper(m=3, alpha=0.7, gamma=0.1, higher_order=True), seed)
    rng = np.random.default_rng(seed)
    for p in st.adapter_params():
        p.value[:] = rng.normal(0.0, 0.5, p.value.shape)
    task = sample_task(store, 0, 2, 3, seed)
    return st, sample_episode(task, store, 2, rng)


def _fd_check(fn, params, h=1e-6):
    with GradTape() as tape:
        total = fn().node
    grads = nk.backward(tape, total, params)
    worst = 0.0
    for p in params:
        fd = np.zeros_like(p.value)
        for i in np.ndindex(p.value.shape):
            orig = p.value[i]
            p.value[i] = orig + h
            up = fn().total
            p.value[i] = orig - h
            dn = fn().total
            p.value[i] = orig
            fd[i] = (up - dn) / (2 * h)
        err = np.abs(grads[p] - fd)
        tol = np.maximum(1e-4 * np.abs(fd), 1e-7)
        worst = max(worst, float(np.max(err / tol)))
    return worst


def test_criterion_01_gradient_oracle(criterion):
    with criterion(1, "analytic gradients of both objectives match central differences") as notes:
        start = time.perf_counter()
        worst, n_scalars = 0.0, 0
        for seed in range(20):
            st, ep = _grad_instance(seed)
            learn_train = st.embedding_params() + st.prior_params() + st.adapter_params()
            worst = max(worst, _fd_check(lambda: meta_train_objective(ep, st), learn_train))
            worst = max(worst, _fd_check(lambda: meta_test_objective(ep, st), st.adapter_params()))
            n_scalars += sum(p.value.size for p in learn_train)
        elapsed = time.perf_counter() - start
        notes.append(f"20 instances, {n_scalars} scalars, worst error/tolerance {worst:.3f}")
        assert worst <= 1.0, f"gradient mismatch, worst ratio {worst:.3f}"
        assert elapsed < 10, f"took {elapsed:.1f}s"


# ----------------------------------------------------- 2. frozen parameters

def test_criterion_02_frozen_parameters(criterion):
    with criterion(2, "meta-test adaptation leaves prior and embeddings untouched") as notes:
        start = time.perf_counter()
        store, emb, splits = generate_synthetic(SyntheticConfig())
        cfg = TrainConfig.desk(max_adapt_steps=100, adapt_tol=0.0)
        st = init_state(emb, cfg.hyper(), 0)
        frozen = st.embedding_params() + st.prior_params()
        before = digest(frozen)
        expected = count_adapter_params(st.adapter_T) + count_adapter_params(st.adapter_V)
        for r in splits.test[:2]:
            task = sample_task(store, r, cfg.K, cfg.n_query, r)
            res = meta_test_adapt(sample_episode(task, store, cfg.n_neg, np.random.default_rng(r)),
                                  st, cfg)
            assert res.steps_taken == 100
            assert res.n_registered == expected, (res.n_registered, expected)
        assert digest(frozen) == before, "frozen parameters changed"
        elapsed = time.perf_counter() - start
        notes.append(f"registry {expected} scalars")
        assert elapsed < 5, f"took {elapsed:.1f}s"


# ------------------------------------------------------- 3. loss identities

def test_criterion_03_loss_identities(criterion):
    with criterion(3, "diversity loss identities"):
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        for _ in range(50):
            S, T, V = (rng.normal(size=(6, 4)) for _ in range(3))
            bag = rng.integers(0, 6, size=9)
            assert float(diversity_loss(bag, const(S), const(T), const(V), 1.0).value) == 0.0
            base = float(diversity_loss(bag, const(S), const(T), const(V), 0.0).value)
            for table in (S, T, V):
                i = int(rng.integers(6))
                keep = table[i].copy()
                table[i] *= float(rng.uniform(0.01, 100))
                scaled = float(diversity_loss(bag, const(S), const(T), const(V), 0.0).value)
                table[i] = keep
                assert abs(scaled - base) < 1e-12
        one = diversity_loss([0], const([[1.0, 0.0]]), const([[0.0, 1.0]]), const([[2.0, 0.0]]), 0.0)
        assert float(one.value) == 1.0
        assert time.perf_counter() - start < 1


# ---------------------------------------------------- 4. baseline equivalence

def _metar_structural(task, ep, st):
    """Structural-only MetaR assembled from the model and objective ops."""
    hp = st.hyper
    E = const(st.E_S.value)
    R = relation_meta(nk.take_rows(E, task.support[:, 0]), nk.take_rows(E, task.support[:, 2]),
                      st.meta_learner, frozen=True)
    n = ep.n_neg
    heads = nk.take_rows(E, np.repeat(task.support[:, 0], n))
    tails = nk.take_rows(E, np.repeat(task.support[:, 2], n))
    Rp = refine_relation_meta(R, heads, tails, nk.take_rows(E, ep.support_neg.reshape(-1)),
                              hp.beta, hp.epsilon)
    loss = float(ranking_loss(E, task.support, ep.support_neg, Rp, hp.epsilon).value)
    train_loss = float(ranking_loss(E, task.query, ep.query_neg, Rp, hp.epsilon).value)
    diff = st.E_S.value[task.query[:, 0]][:, None, :] + Rp.value - st.E_S.value[None]
    scores = np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))
    ids = np.arange(len(st.E_S.value))
    ranking = np.stack([np.lexsort((ids, s)) for s in scores])
    return loss, train_loss, ranking


def test_criterion_04_baseline_equivalence(criterion):
    with criterion(4, "no_adapters with alpha=0 equals structural-only MetaR bitwise"):
        start = time.perf_counter()
        data = generate_synthetic(SyntheticConfig())
        store, _, splits = data
        cfg = TrainConfig.desk(ablation_mode="no_adapters", alpha=0.0, max_epochs=200,
                               eval_every=100)
        st = meta_train(data, cfg).state
        rels = list(splits.test) + list(splits.valid)
        for i in range(10):
            r = rels[i % len(rels)]
            task = sample_task(store, r, cfg.K, cfg.n_query, 100 + i)
            ep = sample_episode(task, store, cfg.n_neg, np.random.default_rng(i))
            adapted = meta_test_adapt(ep, st, cfg)
            pred = predict(task, st, adapted)
            loss, train_loss, ranking = _metar_structural(task, ep, st)
            assert adapted.final_loss == loss
            assert meta_train_objective(ep, st).total == train_loss
            assert np.array_equal(pred.ranking, ranking)
        assert time.perf_counter() - start < 30


# -------------------------------------------------------- 5. ranking oracle

def test_criterion_05_ranking_oracle(criterion):
    with criterion(5, "ranking and metrics agree with a brute-force sort") as notes:
        n_cases = 0
        ranks = {"raw": [], "filtered": []}
        for n, triples, scores, (h, r, t) in small_kg_cases(2024, 1500):
            known = {tt for hh, rr, tt in triples if hh == h and rr == r}
            for mode in ranks:
                got = evaluation.rank_true_tail(scores, t, known, mode).rank
                assert got == brute_rank(scores, t, known, mode), (scores, t, known, mode)
                ranks[mode].append(got)
            n_cases += 1
        for mode, rs in ranks.items():
            # ranks and hit rates must match exactly; the MRR sums floats in a
            # different order, so it is held to round-off
            for chunk in range(0, len(rs), 50):
                part = rs[chunk:chunk + 50]
                m, hits = brute_metrics(part)
                assert evaluation.mrr(part) == pytest.approx(m, rel=1e-12)
                for N, v in hits.items():
                    assert evaluation.hits_at(part, N) == v
            assert evaluation.mrr(rs) == pytest.approx(brute_metrics(rs)[0], rel=1e-12)
        notes.append(f"{n_cases} cases")
        assert n_cases >= 1000


# ------------------------------------------------------ shared ablation runs

@functools.lru_cache(maxsize=None)
def ablation_suite():
    """Per seed: reports for every mode and the trained states, on c=0.8 data."""
    data = generate_synthetic(ABLATION_DATA)
    out = {}
    for s in SEEDS:
        trained: dict = {}
        reports = run_ablation(data, TrainConfig.desk(seed=s), trained=trained)
        out[s] = (reports, trained)
    return data, out


def test_criterion_06_ablation_ordering(criterion):
    with criterion(6, "ablation ordering on c=0.8 synthetic data, gaps above paired SE") as notes:
        start = time.perf_counter()
        _, runs = ablation_suite()
        mrr = {m: np.array([runs[s][0][m].mrr for s in SEEDS]) for m in runs[0][0]}
        notes.append("mean MRR " + ", ".join(f"{m} {v.mean():.4f}" for m, v in mrr.items()))
        failed = []
        for a, b in [("full", "no_div"), ("no_div", "no_adapters"), ("full", "frozen_adapters"),
                     ("frozen_adapters", "random_init_adapters")]:
            d = mrr[a] - mrr[b]
            se = d.std(ddof=1) / np.sqrt(len(d))
            notes.append(f"{a}-{b} {d.mean():+.4f} (se {se:.4f})")
            if not d.mean() > se:
                failed.append(f"{a} > {b}")
        elapsed = time.perf_counter() - start
        assert not failed, "ordering not reproduced: " + ", ".join(failed)
        assert elapsed < 15 * 60, f"took {elapsed:.0f}s"


def test_criterion_07_few_shot_monotone(criterion):
    with criterion(7, "mean MRR non-decreasing over K in {1, 3, 5}") as notes:
        data = generate_synthetic(SyntheticConfig())
        store, _, splits = data
        means = []
        for K in (1, 3, 5):
            vals = []
            for s in SEEDS:
                cfg = TrainConfig.desk(K=K, seed=s)
                st = meta_train(data, cfg).state
                tasks = evaluation.make_tasks(store, splits.test, K, s, "test")
                vals.append(evaluation.evaluate(tasks, st, cfg, store).mrr)
            means.append(float(np.mean(vals)))
        notes.append("K=1,3,5: " + ", ".join(f"{m:.4f}" for m in means))
        assert means[0] <= means[1] <= means[2], means


def test_criterion_08_masking_robustness(criterion):
    with criterion(8, "MRR non-increasing under masking; full degrades less than no_div") as notes:
        data, runs = ablation_suite()
        store, _, splits = data
        curves = {}
        for mode in ("full", "no_div"):
            per_mask = []
            for f in MASKS:
                vals = []
                for s in SEEDS:
                    cfg = TrainConfig.desk(seed=s, ablation_mode=mode)
                    st = evaluation.masked_state(runs[s][1][mode], f, s)
                    tasks = evaluation.make_tasks(store, splits.test, cfg.K, s, "test")
                    vals.append(evaluation.evaluate(tasks, st, cfg, store).mrr)
                per_mask.append(float(np.mean(vals)))
            curves[mode] = per_mask
            notes.append(f"{mode} " + ", ".join(f"{v:.4f}" for v in per_mask))
        drop = {m: c[0] - c[2] for m, c in curves.items()}
        notes.append(f"drop at 0.5: full {drop['full']:.4f}, no_div {drop['no_div']:.4f}")
        full = curves["full"]
        assert all(a >= b for a, b in zip(full, full[1:])), "full curve increases"
        assert drop["full"] < drop["no_div"], "full model degrades at least as much as no_div"


# ------------------------------------------------------------ 9. determinism

TINY = ["--n-entities", "60", "--n-relations", "10", "--triples-per-relation", "15",
        "--d-S", "8", "--d-T", "8", "--d-V", "8", "--latent-dim", "6", "--seed", "7"]
FAST = ["--max-epochs", "10", "--eval-every", "5", "--batch-size", "24", "--m", "4", "--K", "3",
        "--max-adapt-steps", "3"]


def _run_all(root):
    argv = {
        "synth": ["synth", "--out", root / "data", *TINY],
        "train": ["train", "--data", root / "data", "--out", root / "run", *FAST],
        "test": ["test", "--checkpoint", root / "run" / "checkpoint.bin", "--seeds", "7,8"],
        "ablate": ["ablate", "--out", root / "ablate", "--seeds", "7,8", *TINY, *FAST],
        "sweep": ["sweep", "--axis", "alpha", "--values", "0,1", "--out", root / "sweep",
                  "--seeds", "7,8", *TINY, *FAST],
    }
    for name, args in argv.items():
        assert cli_main([str(a) for a in args]) == 0, name
    files = sorted(p for p in root.rglob("*") if p.is_file())
    return {str(p.relative_to(root)): p.read_bytes() for p in files}


def test_criterion_09_determinism(criterion, tmp_path, capsys):
    with criterion(9, "CLI reruns produce byte-identical outputs") as notes:
        # same paths both times, so the resolved configs are identical
        a = _run_all(tmp_path)
        b = _run_all(tmp_path)
        assert sorted(a) == sorted(b)
        differ = [k for k in a if a[k] != b[k]]
        report = json.loads(a["run/report.json"])
        assert report["seeds"] == [7, 8]
        for key in ("run/history.csv", "run/report.json", "ablate/report.json", "sweep/sweep.csv"):
            assert key in a
        notes.append(f"{len(a)} files compared")
        assert not differ, f"outputs differ: {differ}"


# ---------------------------------------------------------- 10. statistics

def test_criterion_10_dataset_statistics(criterion, tmp_path):
    with criterion(10, "dataset statistics and rare-relation pruning") as notes:
        rng = np.random.default_rng(10)
        n_ent, n_trip, n_rel = 6555, 14399, 9
        # every entity appears at least once; the remainder are random distinct triples
        rows = set()
        perm = rng.permutation(n_ent)
        for i in range(0, n_ent - 1, 2):
            rows.add((int(perm[i]), int(i // 2 % n_rel), int(perm[i + 1])))
        rows.add((int(perm[-1]), 0, int(perm[0])))
        while len(rows) < n_trip:
            h, t = rng.integers(n_ent, size=2)
            rows.add((int(h), int(rng.integers(n_rel)), int(t)))
        path = tmp_path / "wn9.tsv"
        with open(path, "w") as fh:
            for h, r, t in sorted(rows):
                fh.write(f"e{h}\tr{r}\te{t}\n")
        store = load_triples(path)
        notes.append(f"{store.n_entities} entities / {store.n_triples} triples / "
                     f"{store.n_relations} relations")
        assert (store.n_entities, store.n_triples, store.n_relations) == (n_ent, n_trip, n_rel)

        planted = [(i, 0, i + 1) for i in range(19)] + [(i, 1, i + 2) for i in range(20)]
        small = TripleStore([f"e{i}" for i in range(30)], ["rare", "kept"], planted)
        pruned = prune_rare_relations(small, 20)
        assert [pruned.relation_names[r] for r in pruned.relations] == ["kept"]
        assert pruned.n_triples == 20
