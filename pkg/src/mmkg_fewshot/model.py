"""Forward model: modality adapters, additive fusion, relation meta and the
translational scorer, plus checkpoint IO."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .kgdata import ModalityEmbeddings, rng_stream
from .numkernel import ContractError, Node, Param, ShapeError

CHECKPOINT_MAGIC = b"MMFSCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is unreadable or has an unsupported version."""


@dataclass
class AdapterParams:
    """Bottleneck FFN ``W_up @ relu(W_down @ e + b_down) + b_up``."""

    W_down: Param
    b_down: Param
    W_up: Param
    b_up: Param

    @property
    def d_in(self) -> int:
        return self.W_down.shape[1]

    @property
    def m(self) -> int:
        return self.W_down.shape[0]

    @property
    def d_out(self) -> int:
        return self.W_up.shape[0]

    def params(self) -> list[Param]:
        return [self.W_down, self.b_down, self.W_up, self.b_up]

    def clone(self) -> "AdapterParams":
        return AdapterParams(*(Param(p.value.copy(), p.name) for p in self.params()))

    @classmethod
    def init(cls, d_in: int, m: int, d_out: int, rng: np.random.Generator,
             prefix: str = "adapter", up_scale: float = 1e-3) -> "AdapterParams":
        bound = np.sqrt(6.0 / (d_in + m))
        return cls(Param(rng.uniform(-bound, bound, (m, d_in)), f"{prefix}.W_down"),
                   Param(np.zeros(m), f"{prefix}.b_down"),
                   Param(rng.uniform(-up_scale, up_scale, (d_out, m)), f"{prefix}.W_up"),
                   Param(np.zeros(d_out), f"{prefix}.b_up"))


@dataclass
class RelationMetaLearner:
    """Two-layer FFN from concat(e_h, e_t) to a relation vector."""

    W1: Param
    b1: Param
    W2: Param
    b2: Param
    slope: float = 0.01

    def params(self) -> list[Param]:
        return [self.W1, self.b1, self.W2, self.b2]

    @classmethod
    def init(cls, d_S: int, hidden: int, rng: np.random.Generator,
             slope: float = 0.01) -> "RelationMetaLearner":
        s1 = np.sqrt(2.0 / (2 * d_S + hidden))
        s2 = np.sqrt(2.0 / (hidden + d_S))
        return cls(Param(rng.normal(0.0, s1, (hidden, 2 * d_S)), "meta_learner.W1"),
                   Param(np.zeros(hidden), "meta_learner.b1"),
                   Param(rng.normal(0.0, s2, (d_S, hidden)), "meta_learner.W2"),
                   Param(np.zeros(d_S), "meta_learner.b2"),
                   slope)


@dataclass
class Hyper:
    alpha: float = 1.0
    gamma: float = 0.0
    epsilon: float = 1.0
    beta: float = 5.0
    m: int = 50
    lr_main: float = 1e-3
    lr_adapter: float = 1e-4
    refine_steps: int = 1
    higher_order: bool = False
    use_adapters: bool = True

    def validate(self) -> None:
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")
        if self.epsilon < 0:
            raise ContractError("epsilon must be >= 0")
        if self.beta <= 0:
            raise ContractError("beta must be > 0")
        if not -1.0 <= self.gamma <= 1.0:
            raise ContractError("gamma must lie in [-1, 1]")
        if self.m < 1 or self.refine_steps < 1:
            raise ContractError("m and refine_steps must be positive")


@dataclass
class ModelState:
    E_S: Param
    E_T: Param
    E_V: Param
    adapter_T: AdapterParams
    adapter_V: AdapterParams
    meta_learner: RelationMetaLearner
    hyper: Hyper = field(default_factory=Hyper)

    @property
    def d_S(self) -> int:
        return self.E_S.shape[1]

    def embedding_params(self) -> list[Param]:
        return [self.E_S, self.E_T, self.E_V]

    def adapter_params(self) -> list[Param]:
        return self.adapter_T.params() + self.adapter_V.params()

    def prior_params(self) -> list[Param]:
        return self.meta_learner.params()

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"embeddings.S": self.E_S.value, "embeddings.T": self.E_T.value,
               "embeddings.V": self.E_V.value}
        for tag, ad in (("T", self.adapter_T), ("V", self.adapter_V)):
            for key, p in zip(("W_down", "b_down", "W_up", "b_up"), ad.params()):
                out[f"adapter.{tag}.{key}"] = p.value
        for key, p in zip(("W1", "b1", "W2", "b2"), self.meta_learner.params()):
            out[f"meta_learner.{key}"] = p.value
        return out

    def copy(self) -> "ModelState":
        ml = self.meta_learner
        return ModelState(Param(self.E_S.value.copy(), "embeddings.S"),
                          Param(self.E_T.value.copy(), "embeddings.T"),
                          Param(self.E_V.value.copy(), "embeddings.V"),
                          self.adapter_T.clone(), self.adapter_V.clone(),
                          RelationMetaLearner(*(Param(p.value.copy(), p.name) for p in ml.params()),
                                              slope=ml.slope),
                          Hyper(**vars(self.hyper)))


def init_state(emb: ModalityEmbeddings, hyper: Hyper, seed: int,
               h_meta: int | None = None) -> ModelState:
    hyper.validate()
    d_S, d_T, d_V = emb.dims
    return ModelState(
        Param(emb.structural.copy(), "embeddings.S"),
        Param(emb.textual.copy(), "embeddings.T"),
        Param(emb.visual.copy(), "embeddings.V"),
        AdapterParams.init(d_T, hyper.m, d_S, rng_stream(seed, "init.adapter", 0), "adapter.T"),
        AdapterParams.init(d_V, hyper.m, d_S, rng_stream(seed, "init.adapter", 1), "adapter.V"),
        RelationMetaLearner.init(d_S, h_meta or 2 * d_S, rng_stream(seed, "init.meta_learner")),
        hyper)


def count_adapter_params(p: AdapterParams) -> int:
    return p.d_in * p.m + p.m + p.m * p.d_out + p.d_out


# ------------------------------------------------------------------ forward

def adapt_modality(e: Node, p: AdapterParams) -> Node:
    """Map a textual/visual embedding (vector or rows) into the structural space."""
    if e.value.ndim == 1:
        if e.shape[0] != p.d_in:
            raise ShapeError(f"adapt_modality: input width {e.shape[0]} != adapter d_in {p.d_in}")
        hidden = nk.relu(nk.linear_forward(e, p.W_down, p.b_down))
        return nk.linear_forward(hidden, p.W_up, p.b_up)
    if e.shape[1] != p.d_in:
        raise ShapeError(f"adapt_modality: input width {e.shape[1]} != adapter d_in {p.d_in}")
    hidden = nk.relu(nk.linear_rows(e, p.W_down, p.b_down))
    return nk.linear_rows(hidden, p.W_up, p.b_up)


def fuse(e_S: Node, e_T: Node, e_V: Node) -> Node:
    if not (e_S.shape == e_T.shape == e_V.shape):
        raise ShapeError(f"fuse: widths differ {e_S.shape}, {e_T.shape}, {e_V.shape}")
    return nk.add(nk.add(e_S, e_T), e_V)


def _learner_rows(X: Node, learner: RelationMetaLearner, frozen: bool) -> Node:
    W1, b1, W2, b2 = learner.params()
    if frozen:
        W1, b1, W2, b2 = (nk.detach(p) for p in (W1, b1, W2, b2))
    hidden = nk.leaky_relu(nk.linear_rows(X, W1, b1), learner.slope)
    return nk.linear_rows(hidden, W2, b2)


def relation_meta(heads: Node, tails: Node, learner: RelationMetaLearner,
                  frozen: bool = False) -> Node:
    """Mean over support pairs of ``learner(concat(e_h, e_t))``.

    ``heads`` and ``tails`` are (K, d_S) fused embeddings.
    """
    if heads.value.ndim != 2 or heads.shape[0] == 0:
        raise ContractError("relation_meta: support must be a nonempty (K, d) array")
    if heads.shape != tails.shape:
        raise ShapeError(f"relation_meta: heads {heads.shape} vs tails {tails.shape}")
    return nk.mean_rows(_learner_rows(nk.concat_cols(heads, tails), learner, frozen))


def margin_hinge(pos: Node, neg: Node, epsilon: float) -> Node:
    """Mean of ``[pos - neg + epsilon]_+`` over paired scores."""
    return nk.mean_all(nk.hinge(nk.shift(nk.sub(pos, neg), epsilon)))


def score_rows(heads: Node, R: Node, tails: Node) -> Node:
    """``||e_h + R - e_t||`` for each row pair; lower is better."""
    if heads.shape != tails.shape:
        raise ShapeError(f"score: heads {heads.shape} vs tails {tails.shape}")
    return nk.row_norms(nk.add_row(nk.sub(heads, tails), R))


def score(e_h: Node, R: Node, e_t: Node) -> float:
    if not (e_h.shape == R.shape == e_t.shape):
        raise ShapeError(f"score: widths differ {e_h.shape}, {R.shape}, {e_t.shape}")
    return float(np.linalg.norm(e_h.value + R.value - e_t.value))


def support_loss(R: Node, heads: Node, tails: Node, negatives: Node, epsilon: float) -> Node:
    """Margin ranking loss of the support pairs at relation vector ``R``."""
    return margin_hinge(score_rows(heads, R, tails), score_rows(heads, R, negatives), epsilon)


def support_loss_grad(R: Node, heads: Node, tails: Node, negatives: Node,
                      epsilon: float) -> Node:
    """Closed-form gradient of :func:`support_loss` with respect to ``R``.

    Built from differentiable ops, so it can itself be differentiated; the
    hinge indicator is piecewise constant and enters as a fixed mask.
    """
    u = nk.add_row(nk.sub(heads, tails), R)
    v = nk.add_row(nk.sub(heads, negatives), R)
    du = np.linalg.norm(u.value, axis=1)
    dv = np.linalg.norm(v.value, axis=1)
    active = (du - dv + epsilon > 0).astype(np.float64)
    diff = nk.sub(nk.normalize_rows(u), nk.normalize_rows(v))
    return nk.mean_rows(nk.mask(diff, np.repeat(active[:, None], diff.shape[1], axis=1)))


def refine_relation_meta(R: Node, heads: Node, tails: Node, negatives: Node, beta: float,
                         epsilon: float, steps: int = 1, higher_order: bool = False) -> Node:
    """``R - beta * grad_R L_S(R)``, repeated ``steps`` times.

    With ``higher_order`` False the gradient term is a constant (stop-gradient),
    so downstream gradients see ``dR'/dR = I`` only.
    """
    if beta <= 0:
        raise ContractError(f"refine_relation_meta: beta must be > 0, got {beta}")
    for _ in range(steps):
        g = support_loss_grad(R, heads, tails, negatives, epsilon)
        if not higher_order:
            g = nk.detach(g)
        R = nk.sub(R, nk.scale(g, beta))
    return R


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path, state: ModelState, meta: dict | None = None) -> None:
    arrays = state.named_arrays()
    hyper = vars(state.hyper)
    for k, v in hyper.items():
        arrays[f"hyper.{k}"] = np.asarray(float(v))
    sections, offset = [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        sections.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({"version": CHECKPOINT_VERSION, "dtype": "<f8",
                         "leaky_slope": state.meta_learner.slope,
                         "sections": sections, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelState, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    base = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[base:base + hlen].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    data = base + hlen
    arrays = {}
    for sec in header["sections"]:
        n = int(np.prod(sec["shape"])) if sec["shape"] else 1
        start = data + sec["offset"]
        arrays[sec["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=start) \
            .reshape(sec["shape"]).astype(np.float64)
    defaults = Hyper()
    hyper_kwargs = {}
    for k, default in vars(defaults).items():
        key = f"hyper.{k}"
        if key in arrays:
            val = float(arrays[key].reshape(-1)[0])
            hyper_kwargs[k] = type(default)(val) if not isinstance(default, bool) else bool(val)
    try:
        state = ModelState(
            Param(arrays["embeddings.S"], "embeddings.S"),
            Param(arrays["embeddings.T"], "embeddings.T"),
            Param(arrays["embeddings.V"], "embeddings.V"),
            *(AdapterParams(*(Param(arrays[f"adapter.{tag}.{k}"], f"adapter.{tag}.{k}")
                              for k in ("W_down", "b_down", "W_up", "b_up")))
              for tag in ("T", "V")),
            RelationMetaLearner(*(Param(arrays[f"meta_learner.{k}"], f"meta_learner.{k}")
                                  for k in ("W1", "b1", "W2", "b2")),
                                slope=header.get("leaky_slope", 0.01)),
            Hyper(**hyper_kwargs))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing section {exc}") from None
    return state, header.get("meta", {})
