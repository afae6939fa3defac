"""Deterministic toy decoder-only transformer with activation capture.

Activations are row-major (tokens x features); a weight ``W`` (d_out x d_in)
maps rows as ``x @ W.T``. Each weight slot holds a dense array or a
:class:`~mgaa.decompose.FactorPair`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .allocate import ImportanceAccumulator, MatrixStats, SublayerId, SublayerStats
from .decompose import FactorPair, PreparedMatrix, prepare_matrix, split_joint, stack_qk
from .errors import (
    EmptyDatasetError,
    InvalidConfigError,
    MissingStatsError,
    PlanModelMismatchError,
    TokenOutOfRangeError,
)

MHA_MATRICES = ("wq", "wk", "wv", "wo")
FFN_MATRICES = ("wg", "wu", "wd")
SUBLAYER_MATRICES = {"mha": MHA_MATRICES, "ffn": FFN_MATRICES}

Slot = Union[np.ndarray, FactorPair]


@dataclass(frozen=True)
class ToyModelConfig:
    vocab: int = 256
    hidden: int = 64
    heads: int = 4
    ffn: int = 172
    layers: int = 4
    seed: int = 0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("vocab", "hidden", "heads", "ffn", "layers"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise InvalidConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.norm_eps <= 0:
            raise InvalidConfigError("norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def matrix_shape(self, name: str) -> Tuple[int, int]:
        d, f = self.hidden, self.ffn
        return {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
                "wg": (f, d), "wu": (f, d), "wd": (d, f)}[name]

    def sublayer_ids(self) -> List[SublayerId]:
        return [(i, kind) for i in range(self.layers) for kind in ("mha", "ffn")]

    def sublayer_params(self, kind: str) -> int:
        return sum(a * b for a, b in map(self.matrix_shape, SUBLAYER_MATRICES[kind]))


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    ffn_norm: np.ndarray
    slots: Dict[str, Slot]


@dataclass
class ToyModel:
    cfg: ToyModelConfig
    embedding: np.ndarray  # V x d
    layers: List[LayerWeights]
    final_norm: np.ndarray
    head: np.ndarray  # d x V, never compressed

    def slot(self, layer: int, name: str) -> Slot:
        return self.layers[layer].slots[name]

    def dense_weight(self, layer: int, name: str) -> np.ndarray:
        s = self.slot(layer, name)
        return s.dense() if isinstance(s, FactorPair) else s

    def scope_param_count(self) -> int:
        """Parameters held by the decomposable matrices; shared ``R`` factors count once."""
        total = 0
        for lw in self.layers:
            seen = set()
            for s in lw.slots.values():
                if isinstance(s, FactorPair):
                    total += s.rank * s.d_out
                    if s.bias_correction is not None:
                        total += s.d_out
                    if id(s.r_mat) not in seen:
                        seen.add(id(s.r_mat))
                        total += s.r_mat.size
                else:
                    total += s.size
        return total

    def dense_scope_param_count(self) -> int:
        per_layer = self.cfg.sublayer_params("mha") + self.cfg.sublayer_params("ffn")
        return per_layer * self.cfg.layers


def init_toy_model(cfg: ToyModelConfig) -> ToyModel:
    """Gaussian weights scaled by 1/sqrt(fan_in), drawn in a fixed order from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.hidden
    emb = rng.standard_normal((cfg.vocab, d)) / np.sqrt(d)
    layers = []
    for _ in range(cfg.layers):
        slots = {}
        for name in MHA_MATRICES + FFN_MATRICES:
            d_out, d_in = cfg.matrix_shape(name)
            slots[name] = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        layers.append(LayerWeights(attn_norm=np.ones(d), ffn_norm=np.ones(d), slots=slots))
    head = rng.standard_normal((d, cfg.vocab)) / np.sqrt(d)
    return ToyModel(cfg=cfg, embedding=emb, layers=layers, final_norm=np.ones(d), head=head)


@dataclass
class CaptureRequest:
    """What to record during :func:`forward`.

    ``mode`` is ``"none"``, ``"importance_pass"``, ``"stats_pass"`` or
    ``"loss_pass"``. Accumulators are sized from ``cfg`` up front. In
    loss-pass mode ``targets`` maps ``(layer, name)`` to a factor pair whose
    output is compared against the dense output at the same site.
    """

    cfg: ToyModelConfig
    mode: str = "none"
    sublayers: Optional[frozenset] = None
    matrices: Optional[frozenset] = None
    targets: Dict[Tuple[int, str], FactorPair] = field(default_factory=dict)
    importance: Dict[SublayerId, ImportanceAccumulator] = field(default_factory=dict)
    stats: Dict[Tuple[int, str], MatrixStats] = field(default_factory=dict)
    joint_qk: Dict[int, np.ndarray] = field(default_factory=dict)
    losses: Dict[Tuple[int, str], float] = field(default_factory=dict)
    macs: Dict[Tuple[int, str], int] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("none", "importance_pass", "stats_pass", "loss_pass"):
            raise ValueError(f"unknown capture mode {self.mode!r}")
        for sid in self.cfg.sublayer_ids():
            if not self._wants_sublayer(sid):
                continue
            if self.mode == "importance_pass":
                self.importance[sid] = ImportanceAccumulator()
            elif self.mode == "stats_pass":
                for name in SUBLAYER_MATRICES[sid[1]]:
                    if self._wants_matrix(sid[0], name):
                        d_out, d_in = self.cfg.matrix_shape(name)
                        self.stats[(sid[0], name)] = MatrixStats.zeros(d_in, d_out)
                if sid[1] == "mha":
                    d = self.cfg.hidden
                    self.joint_qk[sid[0]] = np.zeros((2 * d, 2 * d))
        if self.mode == "loss_pass":
            self.losses = {k: 0.0 for k in self.targets}

    def _wants_sublayer(self, sid) -> bool:
        return self.sublayers is None or sid in self.sublayers

    def _wants_matrix(self, layer, name) -> bool:
        return self.matrices is None or (layer, name) in self.matrices or name in self.matrices

    def record_sublayer(self, sid, x, y):
        acc = self.importance.get(sid)
        if acc is not None:
            acc.update(x, y)

    def record_matmul(self, layer, name, x, y):
        key = (layer, name)
        st = self.stats.get(key)
        if st is not None:
            st.update(x, y)
        if self.mode == "loss_pass" and key in self.targets:
            err = y - self.targets[key].apply_rows(x)
            self.losses[key] += float(np.einsum("ij,ij->", err, err))

    def record_qk(self, layer, q, k):
        g = self.joint_qk.get(layer)
        if g is not None:
            qk = np.hstack([q, k])
            g += qk.T @ qk


def _rmsnorm(x, gain, eps):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def _silu(x):
    # sigmoid via tanh avoids exp overflow for large |x|
    return x * 0.5 * (1.0 + np.tanh(0.5 * x))


def _linear(slot: Slot, x, layer, name, capture):
    if isinstance(slot, FactorPair):
        y = slot.apply_rows(x)
        cost = slot.rank * (slot.d_in + slot.d_out) * x.shape[0]
    else:
        y = x @ slot.T
        cost = slot.shape[0] * slot.shape[1] * x.shape[0]
    if capture is not None:
        capture.macs[(layer, name)] = capture.macs.get((layer, name), 0) + cost
        capture.record_matmul(layer, name, x, y)
    return y


def _attention(q, k, v, heads):
    n, d = q.shape
    hd = d // heads
    q = q.reshape(n, heads, hd).transpose(1, 0, 2)
    k = k.reshape(n, heads, hd).transpose(1, 0, 2)
    v = v.reshape(n, heads, hd).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(hd)
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    return (p @ v).transpose(1, 0, 2).reshape(n, d)


def _check_tokens(model: ToyModel, tokens) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim != 1 or t.size < 1:
        raise TokenOutOfRangeError("token sequence must be 1-D and non-empty")
    if t.min() < 0 or t.max() >= model.cfg.vocab:
        raise TokenOutOfRangeError(f"token ids must lie in [0, {model.cfg.vocab})")
    return t.astype(np.int64)


def run(model: ToyModel, tokens, capture: Optional[CaptureRequest] = None):
    """Forward pass returning ``(logits, final_hidden)``; hidden is the pre-norm residual stream."""
    cfg = model.cfg
    t = _check_tokens(model, tokens)
    x = model.embedding[t]
    for i, lw in enumerate(model.layers):
        s = lw.slots
        h = _rmsnorm(x, lw.attn_norm, cfg.norm_eps)
        q = _linear(s["wq"], h, i, "wq", capture)
        k = _linear(s["wk"], h, i, "wk", capture)
        v = _linear(s["wv"], h, i, "wv", capture)
        if capture is not None:
            capture.record_qk(i, q, k)
        a = _attention(q, k, v, cfg.heads)
        y = x + _linear(s["wo"], a, i, "wo", capture)
        if capture is not None:
            capture.record_sublayer((i, "mha"), x, y)
        x = y
        u = _rmsnorm(x, lw.ffn_norm, cfg.norm_eps)
        g = _linear(s["wg"], u, i, "wg", capture)
        up = _linear(s["wu"], u, i, "wu", capture)
        y = x + _linear(s["wd"], _silu(g) * up, i, "wd", capture)
        if capture is not None:
            capture.record_sublayer((i, "ffn"), x, y)
        x = y
    logits = _rmsnorm(x, model.final_norm, cfg.norm_eps) @ model.head
    return logits, x


def forward(model: ToyModel, tokens, capture: Optional[CaptureRequest] = None):
    """Run the model; returns ``(logits, capture)`` with the capture's accumulators filled."""
    logits, _ = run(model, tokens, capture)
    return logits, capture


def _check_dataset(dataset: Sequence) -> List[np.ndarray]:
    seqs = [np.asarray(s) for s in dataset]
    if not seqs:
        raise EmptyDatasetError("calibration dataset is empty")
    return seqs


def collect_calibration(model: ToyModel, dataset: Sequence) -> Dict[SublayerId, SublayerStats]:
    """Two forward sweeps over ``dataset`` in index order: importances, then matrix statistics."""
    seqs = _check_dataset(dataset)
    cfg = model.cfg
    imp = CaptureRequest(cfg, mode="importance_pass")
    for seq in seqs:
        run(model, seq, imp)
    st = CaptureRequest(cfg, mode="stats_pass")
    for seq in seqs:
        run(model, seq, st)
    out = {}
    for sid in cfg.sublayer_ids():
        layer, kind = sid
        acc = imp.importance[sid]
        out[sid] = SublayerStats(
            sublayer_id=sid,
            importance=acc.value(),
            param_count=cfg.sublayer_params(kind),
            matrix_stats={n: st.stats[(layer, n)] for n in SUBLAYER_MATRICES[kind]},
            degenerate_columns=acc.skipped,
            joint_gram_qk=st.joint_qk.get(layer) if kind == "mha" else None,
        )
    return out


def replace_slots(model: ToyModel, replacements: Dict[Tuple[int, str], Slot]) -> ToyModel:
    """Copy of ``model`` with the given slots swapped; the input model is not touched."""
    new = copy.copy(model)
    new.layers = [
        LayerWeights(attn_norm=lw.attn_norm, ffn_norm=lw.ffn_norm, slots=dict(lw.slots))
        for lw in model.layers
    ]
    for (layer, name), slot in replacements.items():
        new.layers[layer].slots[name] = slot
    return new


RUN_METHODS = ("svd", "asvd", "awsvd", "pca", "afm", "joint_pca")


def unit_names(kind: str, method: str) -> Tuple[str, ...]:
    if kind == "mha" and method == "joint_pca":
        return ("wqk", "wv", "wo")
    return SUBLAYER_MATRICES[kind]


def unit_dims(cfg: ToyModelConfig, name: str) -> Tuple[int, int]:
    """``(d_in, d_out)`` of an allocation unit."""
    if name == "wqk":
        return cfg.hidden, 2 * cfg.hidden
    d_out, d_in = cfg.matrix_shape(name)
    return d_in, d_out


def prepare_sublayer(model: ToyModel, stats: SublayerStats, method: str) -> Dict[str, PreparedMatrix]:
    """Full spectra for every allocation unit of one sublayer under ``method``."""
    if method not in RUN_METHODS:
        raise ValueError(f"unknown method {method!r}")
    layer, kind = stats.sublayer_id
    out = {}
    for name in unit_names(kind, method):
        if name == "wqk":
            if stats.joint_gram_qk is None:
                raise MissingStatsError(f"no joint Q/K Gram for layer {layer}")
            w = stack_qk(model.dense_weight(layer, "wq"), model.dense_weight(layer, "wk"))
            n = stats.matrix_stats["wq"].token_count
            out[name] = prepare_matrix("pca", w, gram_y=stats.joint_gram_qk, token_count=n)
            continue
        ms = stats.matrix_stats.get(name)
        if ms is None:
            raise MissingStatsError(f"no statistics for layer {layer} matrix {name}")
        w = model.dense_weight(layer, name)
        base = "pca" if method == "joint_pca" else method
        if base == "pca":
            out[name] = prepare_matrix("pca", w, gram_y=ms.gram_y, token_count=ms.token_count)
        elif base == "afm":
            out[name] = prepare_matrix("afm", w, gram_y=ms.gram_y, mean_y=ms.mean_y, token_count=ms.token_count)
        elif base == "asvd":
            out[name] = prepare_matrix("asvd", w, scales=ms.scale_abs)
        elif base == "awsvd":
            out[name] = prepare_matrix("awsvd", w, scales=ms.scale_l2)
        else:
            out[name] = prepare_matrix("svd", w)
    return out


def factor_units(prepared: Dict[str, PreparedMatrix], ranks: Dict[str, int], layer: int, hidden: int):
    """Factor pairs keyed by ``(layer, slot_name)``; a ``wqk`` unit yields ``wq`` and ``wk``."""
    out = {}
    for name in sorted(ranks):
        pair = prepared[name].factor(ranks[name])
        if name == "wqk":
            out[(layer, "wq")], out[(layer, "wk")] = split_joint(pair, hidden)
        else:
            out[(layer, name)] = pair
    return out


def apply_plan(model: ToyModel, plan, stats: Dict[SublayerId, SublayerStats], method: str,
               prepared: Optional[Dict[SublayerId, Dict[str, PreparedMatrix]]] = None) -> ToyModel:
    """New model with every planned slot replaced by its factor pair; ``model`` is untouched."""
    cfg = model.cfg
    valid = set(cfg.sublayer_ids())
    repl = {}
    for sid in sorted(plan.ranks):
        if sid not in valid:
            raise PlanModelMismatchError(f"plan references sublayer {sid} absent from the model")
        layer, kind = sid
        names = set(unit_names(kind, method))
        if set(plan.ranks[sid]) != names:
            raise PlanModelMismatchError(
                f"plan units {sorted(plan.ranks[sid])} for {sid} do not match {sorted(names)}"
            )
        for name, r in plan.ranks[sid].items():
            d_in, d_out = unit_dims(cfg, name)
            if not 1 <= r <= min(d_in, d_out):
                raise PlanModelMismatchError(f"rank {r} invalid for {sid} {name}")
        if prepared is not None and sid in prepared:
            prep = prepared[sid]
        else:
            if sid not in stats:
                raise MissingStatsError(f"no calibration statistics for sublayer {sid}")
            prep = prepare_sublayer(model, stats[sid], method)
        repl.update(factor_units(prep, plan.ranks[sid], layer, cfg.hidden))
    return replace_slots(model, repl)


def measure_losses(model: ToyModel, dataset: Sequence, targets: Dict[Tuple[int, str], FactorPair]):
    """Sum over ``dataset`` of ``||y - y_hat||^2`` at each target site, inputs from ``model``."""
    seqs = _check_dataset(dataset)
    cap = CaptureRequest(model.cfg, mode="loss_pass", targets=dict(targets))
    for seq in seqs:
        run(model, seq, cap)
    return cap.losses
