"""Multimodal KG data: triple storage, splits, episodic sampling, file IO and a
planted synthetic generator."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MODALITIES = ("structural", "textual", "visual")
_MODALITY_ALIASES = {"S": "structural", "T": "textual", "V": "visual",
                     "structural": "structural", "textual": "textual", "visual": "visual",
                     "struct": "structural", "text": "textual", "image": "visual"}
SPLIT_NAMES = ("train", "valid", "test")


class DataError(ValueError):
    """Malformed input file or inconsistent data."""


class SamplingError(ValueError):
    """A sampler's precondition cannot be met."""


class ConfigError(ValueError):
    """Invalid configuration value."""


def rng_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for the named stream under a root seed."""
    key = (zlib.crc32(name.encode()),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# ---------------------------------------------------------------------- store

class TripleStore:
    """Immutable set of (head, relation, tail) id triples with lookup indexes.

    ``entity_names`` and ``relation_names`` are the vocabularies; ``relations``
    lists the relation ids that currently own at least one triple.
    """

    def __init__(self, entity_names: Sequence[str], relation_names: Sequence[str],
                 triples: Iterable[tuple[int, int, int]]):
        self.entity_names = list(entity_names)
        self.relation_names = list(relation_names)
        seen = set()
        rows = []
        n_e, n_r = len(self.entity_names), len(self.relation_names)
        for h, r, t in triples:
            h, r, t = int(h), int(r), int(t)
            if not (0 <= h < n_e and 0 <= t < n_e and 0 <= r < n_r):
                raise DataError(f"triple ({h}, {r}, {t}) references an unknown id")
            if (h, r, t) in seen:
                continue
            seen.add((h, r, t))
            rows.append((h, r, t))
        self.triples = np.array(rows, dtype=np.int64).reshape(-1, 3)
        self.triples.setflags(write=False)
        by_rel: dict[int, list[int]] = {}
        tails: dict[tuple[int, int], set] = {}
        for i, (h, r, t) in enumerate(rows):
            by_rel.setdefault(r, []).append(i)
            tails.setdefault((h, r), set()).add(t)
        self._by_relation = {r: self.triples[np.array(ix)] for r, ix in by_rel.items()}
        self._true_tails = {k: frozenset(v) for k, v in tails.items()}
        self.entity_index = {n: i for i, n in enumerate(self.entity_names)}
        self.relation_index = {n: i for i, n in enumerate(self.relation_names)}

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_triples(self) -> int:
        return len(self.triples)

    @property
    def relations(self) -> list[int]:
        return sorted(self._by_relation)

    @property
    def n_relations(self) -> int:
        return len(self._by_relation)

    def triples_of(self, relation: int) -> np.ndarray:
        return self._by_relation.get(relation, np.zeros((0, 3), dtype=np.int64))

    def count(self, relation: int) -> int:
        return len(self.triples_of(relation))

    def true_tails(self, head: int, relation: int) -> frozenset:
        return self._true_tails.get((head, relation), frozenset())

    def stats(self) -> dict:
        return {"entities": self.n_entities, "triples": self.n_triples,
                "relations": self.n_relations}

    def __repr__(self) -> str:
        return (f"TripleStore(entities={self.n_entities}, relations={self.n_relations}, "
                f"triples={self.n_triples})")


@dataclass(frozen=True)
class ModalityEmbeddings:
    """Row ``i`` of every table belongs to entity id ``i``."""

    structural: np.ndarray
    textual: np.ndarray
    visual: np.ndarray

    def __post_init__(self):
        n = {len(self.structural), len(self.textual), len(self.visual)}
        if len(n) != 1:
            raise DataError(f"modality tables disagree on entity count: {sorted(n)}")
        for t in (self.structural, self.textual, self.visual):
            if t.ndim != 2:
                raise DataError(f"modality table must be 2-D, got shape {t.shape}")

    @property
    def n_entities(self) -> int:
        return len(self.structural)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.structural.shape[1], self.textual.shape[1], self.visual.shape[1]

    def table(self, modality: str) -> np.ndarray:
        return getattr(self, _modality(modality))


@dataclass(frozen=True)
class RelationSplits:
    train: tuple[int, ...]
    valid: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.valid), set(self.test)
        if a & b or a & c or b & c:
            raise DataError("relation splits overlap")

    def of(self, name: str) -> tuple[int, ...]:
        if name not in SPLIT_NAMES:
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    def restrict(self, relations: Iterable[int]) -> "RelationSplits":
        keep = set(relations)
        return RelationSplits(*(tuple(r for r in self.of(s) if r in keep) for s in SPLIT_NAMES))


@dataclass(frozen=True)
class Task:
    relation: int
    support: np.ndarray
    query: np.ndarray

    def __post_init__(self):
        if len(self.support) == 0:
            raise SamplingError("task support set is empty")
        for arr in (self.support, self.query):
            if len(arr) and np.any(arr[:, 1] != self.relation):
                raise SamplingError("task triple carries a different relation")
        s = {tuple(x) for x in self.support.tolist()}
        if any(tuple(x) in s for x in self.query.tolist()):
            raise SamplingError("support and query overlap")

    @property
    def K(self) -> int:
        return len(self.support)


def _modality(name: str) -> str:
    try:
        return _MODALITY_ALIASES[name]
    except KeyError:
        raise ConfigError(f"unknown modality {name!r}; expected one of {MODALITIES}") from None


# ------------------------------------------------------------------------- IO

def load_triples(path) -> TripleStore:
    """Read ``head<TAB>relation<TAB>tail`` lines; ids assigned by first appearance."""
    path = Path(path)
    ents: dict[str, int] = {}
    rels: dict[str, int] = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise DataError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail, got {line!r}")
            h, r, t = (p.strip() for p in parts)
            rows.append((ents.setdefault(h, len(ents)), rels.setdefault(r, len(rels)),
                         ents.setdefault(t, len(ents))))
    return TripleStore(list(ents), list(rels), rows)


def load_embeddings(path, entity_names: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Read ``entity<TAB>f1 f2 ... fd`` rows into a table aligned with ``entity_names``.

    Entities absent from the file get an all-zero row; their names are returned.
    Rows for entities outside ``entity_names`` are ignored.
    """
    path = Path(path)
    index = {n: i for i, n in enumerate(entity_names)}
    rows: dict[int, np.ndarray] = {}
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            name, sep, rest = line.partition("\t")
            if not sep:
                name, _, rest = line.partition(" ")
            toks = rest.split()
            vec = np.empty(len(toks))
            for j, tok in enumerate(toks):
                try:
                    vec[j] = float(tok)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: token {j + 1} {tok!r} is not a number") from None
            if width is None:
                width = len(toks)
                if width == 0:
                    raise DataError(f"{path}:{lineno}: row has no values")
            elif len(toks) != width:
                raise DataError(f"{path}:{lineno}: row width {len(toks)} != {width}")
            if name in index:
                rows[index[name]] = vec
    if width is None:
        raise DataError(f"{path}: no embedding rows")
    table = np.zeros((len(entity_names), width))
    for i, v in rows.items():
        table[i] = v
    missing = [n for n, i in index.items() if i not in rows]
    if missing:
        log.warning("%s: %d entities have no row; zero-filled", path, len(missing))
    return table, missing


def load_splits(path, store: TripleStore) -> RelationSplits:
    path = Path(path)
    buckets: dict[str, list[int]] = {s: [] for s in SPLIT_NAMES}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in buckets:
                raise DataError(f"{path}:{lineno}: expected relation<TAB>train|valid|test, got {line!r}")
            if parts[0] not in store.relation_index:
                raise DataError(f"{path}:{lineno}: unknown relation {parts[0]!r}")
            buckets[parts[1]].append(store.relation_index[parts[0]])
    return RelationSplits(*(tuple(buckets[s]) for s in SPLIT_NAMES))


def load_dataset(triples, structural, textual, visual, splits):
    store = load_triples(triples)
    tables = [load_embeddings(p, store.entity_names)[0] for p in (structural, textual, visual)]
    return store, ModalityEmbeddings(*tables), load_splits(splits, store)


def write_triples(path, store: TripleStore) -> None:
    E, R = store.entity_names, store.relation_names
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in store.triples.tolist():
            fh.write(f"{E[h]}\t{R[r]}\t{E[t]}\n")


def write_embeddings(path, names: Sequence[str], table: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name, row in zip(names, table):
            fh.write(name + "\t" + " ".join(repr(float(x)) for x in row) + "\n")


def write_splits(path, store: TripleStore, splits: RelationSplits) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in SPLIT_NAMES:
            for r in splits.of(s):
                fh.write(f"{store.relation_names[r]}\t{s}\n")


# ------------------------------------------------------------------ filtering

def prune_rare_relations(store: TripleStore, min_count: int,
                         min_candidates: int = 0) -> TripleStore:
    """Drop relations with fewer than ``min_count`` triples (and, optionally,
    fewer than ``min_candidates`` distinct tails). Entities are kept."""
    if min_count < 0 or min_candidates < 0:
        raise ConfigError("pruning thresholds must be non-negative")
    keep = set()
    for r in store.relations:
        rows = store.triples_of(r)
        if len(rows) >= min_count and len(set(rows[:, 2].tolist())) >= min_candidates:
            keep.add(r)
    if len(keep) == store.n_relations:
        return store
    rows = [tuple(x) for x in store.triples.tolist() if x[1] in keep]
    return TripleStore(store.entity_names, store.relation_names, rows)


# ------------------------------------------------------------------- sampling

def sample_task(store: TripleStore, relation: int, K: int, n_query: int, rng_seed) -> Task:
    """K support triples plus up to ``n_query`` disjoint query triples."""
    if K < 1 or n_query < 1:
        raise SamplingError(f"K and n_query must be positive (got K={K}, n_query={n_query})")
    rows = store.triples_of(relation)
    if len(rows) < K + 1:
        raise SamplingError(
            f"relation {store.relation_names[relation]!r} has {len(rows)} triples; "
            f"needs at least K+1={K + 1}")
    rng = _as_rng(rng_seed)
    order = rng.permutation(len(rows))
    nq = min(n_query, len(rows) - K)
    return Task(relation, rows[order[:K]], rows[order[K:K + nq]])


def sample_negative(store: TripleStore, head: int, relation: int, rng) -> int:
    """A tail drawn uniformly from entities that are not true tails of (head, relation)."""
    return int(sample_negatives(store, [head], relation, 1, rng)[0, 0])


def sample_negatives(store: TripleStore, heads: Sequence[int], relation: int, n: int,
                     rng) -> np.ndarray:
    """(len(heads), n) array of corrupted tails, uniform over each head's complement."""
    rng = _as_rng(rng)
    n_e = store.n_entities
    out = np.empty((len(heads), n), dtype=np.int64)
    for i, h in enumerate(heads):
        bad = store.true_tails(int(h), relation)
        if len(bad) >= n_e:
            raise SamplingError(
                f"no valid negative tail for head {store.entity_names[h]!r} "
                f"under relation {store.relation_names[relation]!r}")
        if len(bad) * 2 > n_e:
            pool = np.array([e for e in range(n_e) if e not in bad])
            out[i] = pool[rng.integers(len(pool), size=n)]
            continue
        for j in range(n):
            t = int(rng.integers(n_e))
            while t in bad:
                t = int(rng.integers(n_e))
            out[i, j] = t
    return out


def mask_modality(emb: ModalityEmbeddings, modality: str, fraction: float,
                  rng) -> ModalityEmbeddings:
    """Zero exactly floor(fraction * n_entities) uniformly chosen rows of one table."""
    name = _modality(modality)
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"mask fraction must be in [0, 1], got {fraction}")
    n = emb.n_entities
    k = int(math.floor(fraction * n + 1e-9))
    table = emb.table(name).copy()
    if k:
        table[_as_rng(rng).choice(n, size=k, replace=False)] = 0.0
    return replace(emb, **{name: table})


# ------------------------------------------------------------------ synthetic

@dataclass(frozen=True)
class SyntheticConfig:
    n_entities: int = 200
    n_relations: int = 20
    triples_per_relation: int = 60
    d_S: int = 16
    d_T: int = 16
    d_V: int = 16
    noise_scale: float = 0.1
    complementarity: float = 0.5
    seed: int = 0
    latent_dim: int = 10
    offset_scale: float = 1.0
    relation_dims: float = 1.0
    redundancy: float = 0.0
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def validate(self) -> None:
        for name in ("n_entities", "n_relations", "triples_per_relation", "d_S", "d_T",
                     "d_V", "latent_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if not 0.0 <= self.complementarity <= 1.0:
            raise ConfigError("complementarity must be in [0, 1]")
        if not 0.0 < self.relation_dims <= 1.0:
            raise ConfigError("relation_dims must be in (0, 1]")
        if self.redundancy < 0:
            raise ConfigError("redundancy must be >= 0")
        if self.triples_per_relation > self.n_entities * (self.n_entities - 1):
            raise ConfigError(
                f"triples_per_relation={self.triples_per_relation} exceeds the "
                f"{self.n_entities * (self.n_entities - 1)} distinct head/tail pairs")
        n_s, n_t, n_v = latent_allocation(self)
        echo = n_s if self.redundancy * self.complementarity > 0 else 0
        if n_s > self.d_S or n_t + echo > self.d_T or n_v + echo > self.d_V:
            raise ConfigError("a modality width is smaller than the latent dims it carries")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ConfigError("split_fractions must be three values summing to 1")


def latent_allocation(cfg: SyntheticConfig) -> tuple[int, int, int]:
    """How many latent dims the structural, textual and visual channels carry."""
    n_comp = int(round(cfg.complementarity * cfg.latent_dim))
    n_s = cfg.latent_dim - n_comp
    n_t = (n_comp + 1) // 2
    return n_s, n_t, n_comp - n_t


@dataclass
class PlantedMMKG:
    store: TripleStore
    embeddings: ModalityEmbeddings
    splits: RelationSplits
    latent: np.ndarray
    offsets: np.ndarray
    relation_dims: list
    channel_dims: dict = field(default_factory=dict)
    projections: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)


def _isometry(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    """(k, d) matrix with orthonormal rows."""
    if k == 0:
        return np.zeros((0, d))
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return (q * np.sign(np.diag(r))).T


def split_relations(relations: Sequence[int], fractions, rng) -> RelationSplits:
    rels = list(relations)
    order = [rels[i] for i in _as_rng(rng).permutation(len(rels))]
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return RelationSplits(tuple(sorted(order[:n_train])),
                          tuple(sorted(order[n_train:n_train + n_valid])),
                          tuple(sorted(order[n_train + n_valid:])))


def generate_planted(cfg: SyntheticConfig) -> PlantedMMKG:
    """Planted MMKG: relations are translations in a latent space.

    Each entity has a standard-normal latent vector. Relation ``r`` acts on a
    subset ``D_r`` of the latent dims with offset ``o_r``: head ``h`` links to
    the entity nearest ``z_h + o_r`` measured on ``D_r`` only. The latent dims
    are partitioned: the first ``(1-c)`` share is visible to the structural
    channel, the rest is split between the textual and visual channels, which
    also echo the structural dims at strength ``redundancy * c``. Each channel
    is an isometric projection of what it sees plus Gaussian noise.
    """
    cfg.validate()
    n, L = cfg.n_entities, cfg.latent_dim
    z = rng_stream(cfg.seed, "synth.latent").standard_normal((n, L))
    offsets = cfg.offset_scale * rng_stream(cfg.seed, "synth.offsets").standard_normal(
        (cfg.n_relations, L))
    drng = rng_stream(cfg.seed, "synth.reldims")
    k = max(1, int(round(cfg.relation_dims * L)))
    rel_dims = [np.sort(drng.choice(L, size=k, replace=False)) for _ in range(cfg.n_relations)]

    trng = rng_stream(cfg.seed, "synth.triples")
    T = cfg.triples_per_relation
    rows = []
    for r in range(cfg.n_relations):
        d = rel_dims[r]
        target = z[:, None, d] + offsets[r][None, None, d]
        dist = np.linalg.norm(z[None, :, d] - target, axis=2)
        np.fill_diagonal(dist, np.inf)
        ranked = np.argsort(dist, axis=1, kind="stable")
        reps = -(-T // n)
        picked = []
        for rep in range(reps):
            heads = trng.permutation(n)
            picked.extend((int(h), int(ranked[h, rep])) for h in heads)
        rows.extend((h, r, t) for h, t in picked[:T])

    store = TripleStore([f"e{i}" for i in range(n)], [f"r{j}" for j in range(cfg.n_relations)],
                        rows)

    n_s, n_t, n_v = latent_allocation(cfg)
    dims = {"structural": np.arange(0, n_s),
            "textual": np.arange(n_s, n_s + n_t),
            "visual": np.arange(n_s + n_t, L)}
    echo = cfg.redundancy * cfg.complementarity
    widths = {"structural": cfg.d_S, "textual": cfg.d_T, "visual": cfg.d_V}
    projections, noise, tables = {}, {}, {}
    for m in MODALITIES:
        seen = z[:, dims[m]]
        if m != "structural" and echo > 0:
            seen = np.hstack([seen, echo * z[:, dims["structural"]]])
        P = _isometry(rng_stream(cfg.seed, f"synth.proj.{m}"), seen.shape[1], widths[m])
        eps = cfg.noise_scale * rng_stream(cfg.seed, f"synth.noise.{m}").standard_normal((n, widths[m]))
        projections[m], noise[m] = P, eps
        tables[m] = seen @ P + eps

    splits = split_relations(range(cfg.n_relations), cfg.split_fractions,
                             rng_stream(cfg.seed, "synth.splits"))
    return PlantedMMKG(store, ModalityEmbeddings(tables["structural"], tables["textual"],
                                                 tables["visual"]),
                       splits, z, offsets, rel_dims, dims, projections, noise)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[TripleStore, ModalityEmbeddings, RelationSplits]:
    p = generate_planted(cfg)
    return p.store, p.embeddings, p.splits
