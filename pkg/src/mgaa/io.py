"""On-disk formats: tensor container (MGT1), token file (TOK1), run config, plans, reports.

All writers are atomic: data goes to a temporary file in the destination
directory which is then renamed over the target.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Tuple

import jsonschema
import numpy as np

from .allocate import AllocationConfig, AllocationPlan, MatrixStats, SublayerStats, parse_sid, sid_str
from .decompose import FactorPair
from .errors import FormatError, InvalidAllocationConfigError, RunConfigError
from .harness import (
    FFN_MATRICES,
    MHA_MATRICES,
    RUN_METHODS,
    SUBLAYER_MATRICES,
    LayerWeights,
    ToyModel,
    ToyModelConfig,
)

TENSOR_MAGIC = b"MGT1"
TOKEN_MAGIC = b"TOK1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


@contextmanager
def atomic_open(path, mode="wb"):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    umask = os.umask(0)
    os.umask(umask)
    os.chmod(tmp, 0o666 & ~umask)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with _suppress():
            os.unlink(tmp)
        raise


@contextmanager
def _suppress():
    try:
        yield
    except OSError:
        pass


# tensor container

def encode_tensors(tensors: Dict[str, np.ndarray], dtype=np.float64) -> bytes:
    dt = np.dtype(dtype).newbyteorder("<")
    code = DTYPE_CODES[dt]
    parts = [TENSOR_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        a = np.array(arr, dtype=dt, order="C")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    return b"".join(parts)


def write_tensors(path, tensors: Dict[str, np.ndarray], dtype=np.float64):
    data = encode_tensors(tensors, dtype)
    with atomic_open(path) as fh:
        fh.write(data)


def decode_tensors(buf: bytes, path="<memory>") -> Dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated while reading {what}", path, pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != TENSOR_MAGIC:
        raise FormatError(f"bad magic, expected {TENSOR_MAGIC!r}", path, 0)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8", path, start) from exc
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", path, start)
        code_at = pos
        code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code}", path, code_at)
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        dt = DTYPES[code]
        n = int(np.prod(dims, dtype=np.uint64)) if ndim else 1
        payload = take(n * dt.itemsize, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dt).reshape(dims).astype(np.float64)
        out[name] = arr
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last tensor", path, pos)
    return out


def read_tensors(path) -> Dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror}", path) from exc
    return decode_tensors(buf, path)


# token file

def write_tokens(path, sequences):
    parts = [TOKEN_MAGIC, struct.pack("<I", len(sequences))]
    for seq in sequences:
        a = np.asarray(seq)
        if a.size and (a.min() < 0 or a.max() > 0xFFFFFFFF):
            raise FormatError("token ids must fit in u32")
        parts.append(struct.pack("<I", a.size))
        parts.append(a.astype("<u4").tobytes())
    with atomic_open(path) as fh:
        fh.write(b"".join(parts))


def read_tokens(path, vocab=None) -> List[np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror}", path) from exc
    if buf[:4] != TOKEN_MAGIC:
        raise FormatError(f"bad magic, expected {TOKEN_MAGIC!r}", path, 0)
    if len(buf) < 8:
        raise FormatError("truncated header", path, 4)
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    seqs = []
    for _ in range(count):
        if pos + 4 > len(buf):
            raise FormatError("truncated sequence length", path, pos)
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + 4 * n > len(buf):
            raise FormatError("truncated token payload", path, pos)
        ids = np.frombuffer(buf, dtype="<u4", count=n, offset=pos).astype(np.int64)
        if vocab is not None and n and ids.max() >= vocab:
            raise FormatError(f"token id {int(ids.max())} >= vocab {vocab}", path, pos)
        seqs.append(ids)
        pos += 4 * n
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", path, pos)
    return seqs


# models

_CONFIG_FIELDS = ("vocab", "hidden", "heads", "ffn", "layers", "seed", "norm_eps")


def model_to_tensors(model: ToyModel) -> Dict[str, np.ndarray]:
    cfg = model.cfg
    t = {"config": np.array([float(getattr(cfg, f)) for f in _CONFIG_FIELDS])}
    t["embedding"] = model.embedding
    for i, lw in enumerate(model.layers):
        t[f"layers.{i}.attn_norm"] = lw.attn_norm
        t[f"layers.{i}.ffn_norm"] = lw.ffn_norm
        for name in MHA_MATRICES + FFN_MATRICES:
            s = lw.slots[name]
            key = f"layers.{i}.{name}"
            if isinstance(s, FactorPair):
                t[key + ".L"] = s.l
                t[key + ".R"] = s.r_mat
                if s.bias_correction is not None:
                    t[key + ".bias"] = s.bias_correction
            else:
                t[key] = s
    t["final_norm"] = model.final_norm
    t["head"] = model.head
    return t


def _config_from_tensor(vec, path) -> ToyModelConfig:
    if vec.shape != (len(_CONFIG_FIELDS),):
        raise FormatError("config tensor has wrong shape", path)
    vals = dict(zip(_CONFIG_FIELDS, vec.tolist()))
    try:
        return ToyModelConfig(**{k: (v if k == "norm_eps" else int(v)) for k, v in vals.items()})
    except Exception as exc:
        raise FormatError(f"invalid model config: {exc}", path) from exc


def _need(t, key, shape, path):
    if key not in t:
        raise FormatError(f"missing tensor {key!r}", path)
    if shape is not None and t[key].shape != tuple(shape):
        raise FormatError(f"tensor {key!r} has shape {t[key].shape}, expected {tuple(shape)}", path)
    return t[key]


def tensors_to_model(t: Dict[str, np.ndarray], path="<memory>") -> ToyModel:
    cfg = _config_from_tensor(_need(t, "config", None, path), path)
    d = cfg.hidden
    layers = []
    for i in range(cfg.layers):
        slots = {}
        for name in MHA_MATRICES + FFN_MATRICES:
            key = f"layers.{i}.{name}"
            shape = cfg.matrix_shape(name)
            if key + ".L" in t:
                l = _need(t, key + ".L", None, path)
                r = _need(t, key + ".R", None, path)
                if l.ndim != 2 or r.ndim != 2 or l.shape[0] != shape[0] or r.shape[1] != shape[1] \
                        or l.shape[1] != r.shape[0]:
                    raise FormatError(f"factor shapes for {key!r} do not match {shape}", path)
                bias = t.get(key + ".bias")
                if bias is not None and bias.shape != (shape[0],):
                    raise FormatError(f"bias for {key!r} has shape {bias.shape}", path)
                slots[name] = FactorPair(l=np.ascontiguousarray(l), r_mat=np.ascontiguousarray(r),
                                         rank=l.shape[1], bias_correction=bias)
            else:
                slots[name] = _need(t, key, shape, path)
        q, k = slots["wq"], slots["wk"]
        if isinstance(q, FactorPair) and isinstance(k, FactorPair) and q.r_mat.shape == k.r_mat.shape \
                and np.array_equal(q.r_mat, k.r_mat):
            # jointly factored pair: restore the shared R
            k.r_mat = q.r_mat
            q.method = k.method = "joint_qk"
        layers.append(LayerWeights(
            attn_norm=_need(t, f"layers.{i}.attn_norm", (d,), path),
            ffn_norm=_need(t, f"layers.{i}.ffn_norm", (d,), path),
            slots=slots,
        ))
    return ToyModel(
        cfg=cfg,
        embedding=_need(t, "embedding", (cfg.vocab, d), path),
        layers=layers,
        final_norm=_need(t, "final_norm", (d,), path),
        head=_need(t, "head", (d, cfg.vocab), path),
    )


def save_model(path, model: ToyModel):
    write_tensors(path, model_to_tensors(model))


def load_model(path) -> ToyModel:
    return tensors_to_model(read_tensors(path), path)


# calibration statistics

def stats_to_tensors(stats: Dict[tuple, SublayerStats], cfg: ToyModelConfig) -> Dict[str, np.ndarray]:
    t = {"config": np.array([float(getattr(cfg, f)) for f in _CONFIG_FIELDS])}
    for sid in sorted(stats):
        st = stats[sid]
        pre = sid_str(sid)
        t[f"{pre}.importance"] = np.array([st.importance])
        t[f"{pre}.degenerate_columns"] = np.array([float(st.degenerate_columns)])
        for name in SUBLAYER_MATRICES[sid[1]]:
            ms = st.matrix_stats[name]
            key = f"layers.{sid[0]}.{name}"
            t[key + ".gram_y"] = ms.gram_y
            t[key + ".sum_y"] = ms.sum_y
            t[key + ".sum_abs_x"] = ms.sum_abs_x
            t[key + ".sum_sq_x"] = ms.sum_sq_x
            t[key + ".token_count"] = np.array([float(ms.token_count)])
        if st.joint_gram_qk is not None:
            t[f"layers.{sid[0]}.qk.joint_gram"] = st.joint_gram_qk
    return t


def save_stats(path, stats, cfg: ToyModelConfig):
    write_tensors(path, stats_to_tensors(stats, cfg))


def load_stats(path) -> Tuple[Dict[tuple, SublayerStats], ToyModelConfig]:
    t = read_tensors(path)
    cfg = _config_from_tensor(_need(t, "config", None, path), path)
    out = {}
    for sid in cfg.sublayer_ids():
        pre = sid_str(sid)
        mats = {}
        for name in SUBLAYER_MATRICES[sid[1]]:
            d_out, d_in = cfg.matrix_shape(name)
            key = f"layers.{sid[0]}.{name}"
            mats[name] = MatrixStats(
                d_in=d_in,
                d_out=d_out,
                gram_y=_need(t, key + ".gram_y", (d_out, d_out), path).copy(),
                sum_y=_need(t, key + ".sum_y", (d_out,), path).copy(),
                sum_abs_x=_need(t, key + ".sum_abs_x", (d_in,), path).copy(),
                sum_sq_x=_need(t, key + ".sum_sq_x", (d_in,), path).copy(),
                token_count=int(_need(t, key + ".token_count", (1,), path)[0]),
            )
        joint = t.get(f"layers.{sid[0]}.qk.joint_gram")
        out[sid] = SublayerStats(
            sublayer_id=sid,
            importance=float(_need(t, f"{pre}.importance", (1,), path)[0]),
            param_count=cfg.sublayer_params(sid[1]),
            matrix_stats=mats,
            degenerate_columns=int(_need(t, f"{pre}.degenerate_columns", (1,), path)[0]),
            joint_gram_qk=joint.copy() if joint is not None and sid[1] == "mha" else None,
        )
    return out, cfg


# run config

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "method": {"enum": list(RUN_METHODS)},
        "target_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "alpha": {"type": "number", "minimum": 0},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "rank_floor_ratio": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "clamp": {
            "type": "array", "minItems": 2, "maxItems": 2,
            "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        },
        "clamp_policy": {"enum": ["report", "redistribute"]},
        "budget_rounding": {"enum": ["carry", "floor"]},
        "skip_sublayers": {"type": "array", "items": {"type": "string", "pattern": r"^L\d+\.(mha|ffn)$"}},
        "seed": {"type": "integer", "minimum": 0},
        "model": {"type": "string"},
        "calib": {"type": "string"},
        "output": {"type": "string"},
        "workers": {"type": "integer", "minimum": 1},
        "toy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "vocab": {"type": "integer", "minimum": 1},
                "hidden": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "ffn": {"type": "integer", "minimum": 1},
                "layers": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "norm_eps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "calib_sequences": {"type": "integer", "minimum": 1},
        "calib_length": {"type": "integer", "minimum": 1},
    },
}

RUN_CONFIG_DEFAULTS = {
    "method": "pca",
    "target_ratio": 0.5,
    "alpha": 0.35,
    "epsilon": 1e-3,
    "rank_floor_ratio": 0.1,
    "clamp": [0.01, 0.95],
    "clamp_policy": "report",
    "budget_rounding": "carry",
    "skip_sublayers": [],
    "seed": 0,
    "workers": 1,
    "toy": {},
    "calib_sequences": 16,
    "calib_length": 128,
}


def parse_run_config(data: dict) -> dict:
    try:
        jsonschema.validate(data, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise RunConfigError(f"invalid run config at {where}: {exc.message}") from exc
    cfg = dict(RUN_CONFIG_DEFAULTS)
    cfg.update(data)
    return cfg


def load_run_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise RunConfigError(f"{path}: cannot read: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"{path}: not valid JSON: {exc}") from exc
    return parse_run_config(data)


def allocation_config(run_cfg: dict) -> AllocationConfig:
    try:
        return AllocationConfig(
            target_ratio=run_cfg["target_ratio"],
            alpha=run_cfg["alpha"],
            epsilon=run_cfg["epsilon"],
            rank_floor_ratio=run_cfg["rank_floor_ratio"],
            skip_sublayers=frozenset(parse_sid(s) for s in run_cfg["skip_sublayers"]),
            clamp_range=tuple(run_cfg["clamp"]),
            budget_rounding=run_cfg["budget_rounding"],
            clamp_policy=run_cfg["clamp_policy"],
        )
    except (ValueError, InvalidAllocationConfigError) as exc:
        raise RunConfigError(str(exc)) from exc


def toy_config(run_cfg: dict) -> ToyModelConfig:
    toy = dict(run_cfg.get("toy", {}))
    toy.setdefault("seed", run_cfg.get("seed", 0))
    return ToyModelConfig(**toy)


# plans and reports

def plan_to_dict(plan: AllocationPlan) -> dict:
    def by_sid(d):
        return {sid_str(k): v for k, v in sorted(d.items())}

    return {
        "target_ratio": plan.target_ratio,
        "method": plan.method,
        "ratios": by_sid(plan.ratios),
        "ranks": by_sid(plan.ranks),
        "budgets": by_sid(plan.budgets),
        "unit_costs": by_sid(plan.unit_costs),
        "unit_params": by_sid(plan.unit_params),
        "retained": by_sid(plan.retained),
        "tau": by_sid(plan.tau),
        "spread": by_sid(plan.spread),
        "epsilon": plan.epsilon,
        "achieved_global_ratio": plan.achieved_global_ratio,
        "skipped": [sid_str(s) for s in plan.skipped],
        "clamp_events": plan.clamp_events,
        "floor_events": plan.floor_events,
        "importances": by_sid(plan.importances),
        "realized_mean": plan.realized_mean,
        "shift": plan.shift,
    }


def plan_from_dict(d: dict) -> AllocationPlan:
    def by_sid(m):
        return {parse_sid(k): v for k, v in m.items()}

    return AllocationPlan(
        target_ratio=d["target_ratio"],
        method=d["method"],
        ratios=by_sid(d["ratios"]),
        ranks={k: {n: int(r) for n, r in v.items()} for k, v in by_sid(d["ranks"]).items()},
        budgets=by_sid(d["budgets"]),
        unit_costs=by_sid(d["unit_costs"]),
        unit_params=by_sid(d["unit_params"]),
        retained=by_sid(d["retained"]),
        tau=by_sid(d["tau"]),
        spread=by_sid(d["spread"]),
        epsilon=d["epsilon"],
        achieved_global_ratio=d["achieved_global_ratio"],
        skipped=[parse_sid(s) for s in d["skipped"]],
        clamp_events=d["clamp_events"],
        floor_events=d["floor_events"],
        importances=by_sid(d.get("importances", {})),
        realized_mean=d.get("realized_mean", 0.0),
        shift=d.get("shift", 0.0),
    )


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(path, obj):
    with atomic_open(path, "w") as fh:
        fh.write(dumps_json(obj))
