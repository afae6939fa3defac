"""End-to-end compression: calibrate, allocate, factor, measure, report."""

from __future__ import annotations

import contextlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .allocate import (
    AllocationConfig,
    AllocationPlan,
    RatioAllocation,
    SublayerUnits,
    build_plan,
    ratio_allocation,
    sid_str,
)
from .decompose import rank_for_ratio
from .errors import MGAAError, ShapeMismatchError
from .harness import (
    RUN_METHODS,
    SUBLAYER_MATRICES,
    ToyModel,
    apply_plan,
    collect_calibration,
    measure_losses,
    prepare_sublayer,
    run,
    unit_dims,
    unit_names,
)


class StageError(MGAAError):
    """Non-library failure inside a pipeline stage."""


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except MGAAError as exc:
        exc.pipeline_stage = name
        raise
    except Exception as exc:  # noqa: BLE001 - re-tagged with the stage name
        raise StageError(f"{type(exc).__name__}: {exc}", stage=name) from exc


@dataclass
class CompressionReport:
    method: str
    config: dict
    sublayers: Dict[str, dict]
    matrices: Dict[str, dict]
    target_ratio: float
    achieved_ratio: float
    planned_ratio: float
    clamp_events: list
    floor_events: list
    original_params: int
    compressed_params: int
    wall_time: float = 0.0
    stage_times: Dict[str, float] = field(default_factory=dict)

    @property
    def total_predicted_loss(self) -> float:
        return sum(m["predicted_loss"] for m in self.matrices.values())

    @property
    def total_measured_loss(self) -> float:
        return sum(m["measured_loss"] for m in self.matrices.values())

    def to_dict(self, timings: bool = False) -> dict:
        out = {
            "method": self.method,
            "config": self.config,
            "sublayers": self.sublayers,
            "matrices": self.matrices,
            "global": {
                "target_ratio": self.target_ratio,
                "achieved_ratio": self.achieved_ratio,
                "planned_ratio": self.planned_ratio,
                "original_params": self.original_params,
                "compressed_params": self.compressed_params,
                "clamp_events": self.clamp_events,
                "floor_events": self.floor_events,
                "max_energy_spread": max((s["energy_spread"] for s in self.sublayers.values()
                                          if s["energy_spread"] is not None), default=0.0),
            },
        }
        # wall-clock numbers would break byte-identical reports, so they are opt-in
        if timings:
            out["global"]["wall_time"] = self.wall_time
            out["global"]["stage_times"] = self.stage_times
        return out


def _prepare_all(model, stats, method, workers):
    sids = sorted(stats)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: prepare_sublayer(model, stats[s], method), sids))
    else:
        results = [prepare_sublayer(model, stats[s], method) for s in sids]
    return dict(zip(sids, results))


def build_units(model: ToyModel, prepared, method: str) -> Dict[tuple, SublayerUnits]:
    cfg = model.cfg
    units = {}
    for sid, prep in prepared.items():
        names = unit_names(sid[1], method)
        units[sid] = SublayerUnits(
            dims={n: unit_dims(cfg, n) for n in names},
            profiles={n: prep[n].profile for n in names},
            original_dims={n: unit_dims(cfg, n) for n in SUBLAYER_MATRICES[sid[1]]},
            fixed_params=sum(
                unit_dims(cfg, n)[1] for n in names
                if prep[n].mean_y is not None and np.any(prep[n].mean_y != 0.0)
            ),
        )
    return units


def _unit_key(sid, name):
    return f"layers.{sid[0]}.{name}"


def _measured(model, compressed, plan, dataset):
    targets = {}
    for sid in sorted(plan.ranks):
        layer = sid[0]
        for name in plan.ranks[sid]:
            slots = ("wq", "wk") if name == "wqk" else (name,)
            for s in slots:
                targets[(layer, s)] = compressed.slot(layer, s)
    losses = measure_losses(model, dataset, targets)
    out = {}
    for sid in sorted(plan.ranks):
        for name in plan.ranks[sid]:
            slots = ("wq", "wk") if name == "wqk" else (name,)
            out[(sid, name)] = sum(losses[(sid[0], s)] for s in slots)
    return out


def compress_with_plan(model, dataset, stats, plan: AllocationPlan, method, prepared=None, measure=True):
    """Apply an existing plan and assemble the report pieces shared by every entry point."""
    with _stage("apply"):
        compressed = apply_plan(model, plan, stats, method, prepared=prepared)
    measured = {}
    if measure:
        with _stage("measure"):
            measured = _measured(model, compressed, plan, dataset)
    return compressed, measured


def _report(model, compressed, plan, ratio_alloc, prepared, measured, cfg, method, stats):
    sublayers = {}
    for sid in sorted(stats):
        entry = {
            "importance": stats[sid].importance,
            "ratio": plan.ratios[sid],
            "skipped": sid in plan.skipped,
            "budget": plan.budgets.get(sid),
            "tau": plan.tau.get(sid),
            "energy_spread": plan.spread.get(sid),
            "spread_exceeds_epsilon": (plan.spread[sid] > cfg.epsilon) if sid in plan.spread else None,
            "z_score": ratio_alloc.z_scores.get(sid) if ratio_alloc else None,
            "degenerate_columns": stats[sid].degenerate_columns,
        }
        sublayers[sid_str(sid)] = entry
    matrices = {}
    for sid in sorted(plan.ranks):
        for name in sorted(plan.ranks[sid]):
            r = plan.ranks[sid][name]
            prep = prepared[sid][name]
            matrices[_unit_key(sid, name)] = {
                "rank": r,
                "retained_energy": prep.profile.retained(r),
                "predicted_loss": prep.predicted_loss(r),
                "measured_loss": measured.get((sid, name), float("nan")),
                "energy_kind": prep.profile.kind,
            }
    original = model.dense_scope_param_count()
    kept = compressed.scope_param_count()
    return CompressionReport(
        method=method,
        config={
            "target_ratio": cfg.target_ratio,
            "alpha": cfg.alpha,
            "epsilon": cfg.epsilon,
            "rank_floor_ratio": cfg.rank_floor_ratio,
            "clamp": list(cfg.clamp_range),
            "skip_sublayers": sorted(sid_str(s) for s in cfg.skip_sublayers),
            "budget_rounding": cfg.budget_rounding,
            "clamp_policy": cfg.clamp_policy,
        },
        sublayers=sublayers,
        matrices=matrices,
        target_ratio=cfg.target_ratio,
        achieved_ratio=1.0 - kept / original,
        planned_ratio=plan.achieved_global_ratio,
        clamp_events=list(plan.clamp_events),
        floor_events=list(plan.floor_events),
        original_params=original,
        compressed_params=kept,
    )


def plan_from_stats(model, stats, cfg: AllocationConfig, method: str, prepared=None):
    """Ratio allocation plus rank allocation; returns ``(plan, ratio_alloc, prepared)``."""
    if method not in RUN_METHODS:
        raise ValueError(f"unknown method {method!r}")
    with _stage("allocate_ratios"):
        ra = ratio_allocation(
            {s: st.importance for s, st in stats.items()},
            {s: st.param_count for s, st in stats.items()},
            cfg,
        )
    with _stage("decompose"):
        if prepared is None:
            prepared = _prepare_all(model, stats, method, None)
    with _stage("balance_ranks"):
        units = build_units(model, prepared, method)
        plan = build_plan(ra, units, cfg, method)
        plan.importances = {s: st.importance for s, st in stats.items()}
    return plan, ra, prepared


def mgaa_compress(model: ToyModel, calib_dataset: Sequence, cfg: AllocationConfig, method: str = "pca",
                  stats=None, workers: Optional[int] = None, measure: bool = True):
    """Full two-pass calibration and adaptive compression; returns ``(compressed, report)``."""
    times = {}
    t0 = time.perf_counter()
    if stats is None:
        with _stage("calibrate"):
            stats = collect_calibration(model, calib_dataset)
    times["calibrate"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    with _stage("decompose"):
        prepared = _prepare_all(model, stats, method, workers)
    times["decompose"] = time.perf_counter() - t1
    t1 = time.perf_counter()
    plan, ra, prepared = plan_from_stats(model, stats, cfg, method, prepared)
    times["allocate"] = time.perf_counter() - t1
    t1 = time.perf_counter()
    compressed, measured = compress_with_plan(model, calib_dataset, stats, plan, method, prepared, measure)
    times["apply"] = time.perf_counter() - t1
    with _stage("report"):
        report = _report(model, compressed, plan, ra, prepared, measured, cfg, method, stats)
    report.wall_time = time.perf_counter() - t0
    report.stage_times = times
    return compressed, report


def uniform_plan(model, stats, p: float, method: str, prepared, balanced: bool = False,
                 cfg: Optional[AllocationConfig] = None) -> AllocationPlan:
    """Same ratio ``p`` for every sublayer; ranks either uniform per matrix or energy-balanced."""
    ratios = {s: p for s in stats}
    if balanced:
        cfg = cfg or AllocationConfig(target_ratio=p, clamp_range=(0.0, 0.95))
        ra = RatioAllocation(ratios, {}, dict(ratios), p, p, 0.0, [], p)
        units = build_units(model, prepared, method)
        plan = build_plan(ra, units, cfg, method)
        return plan
    ranks, retained = {}, {}
    cfgm = model.cfg
    for sid in sorted(stats):
        names = unit_names(sid[1], method)
        ranks[sid] = {n: rank_for_ratio(*unit_dims(cfgm, n), p) for n in names}
        retained[sid] = {n: prepared[sid][n].profile.retained(r) for n, r in ranks[sid].items()}
    kept = sum(r * sum(unit_dims(cfgm, n)) for sid in ranks for n, r in ranks[sid].items())
    return AllocationPlan(
        target_ratio=p, method=method, ratios=ratios, ranks=ranks, budgets={}, unit_costs={},
        unit_params={}, retained=retained, tau={}, spread={
            s: max(v.values()) - min(v.values()) for s, v in retained.items()},
        epsilon=1e-3, achieved_global_ratio=1.0 - kept / model.dense_scope_param_count(),
    )


@dataclass
class EvalMetrics:
    hidden_error: float  # Frobenius norm of final-hidden-state difference
    hidden_error_rel: float
    kl_to_reference: float  # mean per-token cross-entropy excess over the reference


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def eval_model(model: ToyModel, reference: ToyModel, dataset: Sequence) -> EvalMetrics:
    if model.cfg != reference.cfg:
        raise ShapeMismatchError("candidate and reference configurations differ", stage="eval")
    err_sq = 0.0
    ref_sq = 0.0
    kl = 0.0
    tokens = 0
    for seq in dataset:
        lc, hc = run(model, seq)
        lr, hr = run(reference, seq)
        d = hc - hr
        err_sq += float(np.einsum("ij,ij->", d, d))
        ref_sq += float(np.einsum("ij,ij->", hr, hr))
        lpr = _log_softmax(lr)
        lpc = _log_softmax(lc)
        kl += float(np.sum(np.exp(lpr) * (lpr - lpc)))
        tokens += lr.shape[0]
    err = float(np.sqrt(err_sq))
    return EvalMetrics(
        hidden_error=err,
        hidden_error_rel=err / np.sqrt(ref_sq) if ref_sq > 0 else 0.0,
        kl_to_reference=kl / max(tokens, 1),
    )


@dataclass
class UniformComparison:
    target_ratio: float
    uniform_error: float
    mgaa_error: float
    energy_only_error: float
    uniform_min_energy: Dict[str, float]
    balanced_min_energy: Dict[str, float]
    dominance_holds: bool
    uniform_loss_dispersion: float
    balanced_loss_dispersion: float
    mgaa_clamp_events: int = 0


def _mha_loss_dispersion(plan, prepared, measured) -> float:
    """Mean over MHA sublayers of the std of per-matrix loss ratios (loss / total energy)."""
    stds = []
    for sid in sorted(plan.ranks):
        if sid[1] != "mha":
            continue
        ratios = []
        for name in sorted(plan.ranks[sid]):
            total = prepared[sid][name].profile.total
            ratios.append(measured[(sid, name)] / total)
        stds.append(float(np.std(ratios)))
    return float(np.mean(stds)) if stds else 0.0


def compare_uniform(model: ToyModel, calib: Sequence, p_t: float, method: str = "pca",
                    cfg: Optional[AllocationConfig] = None, stats=None) -> UniformComparison:
    """Uniform-rank baseline vs energy-balanced-only vs full adaptive allocation on the same inputs."""
    if p_t == 0.0:
        empty = {sid_str(s): 1.0 for s in model.cfg.sublayer_ids()}
        return UniformComparison(0.0, 0.0, 0.0, 0.0, empty, dict(empty), True, 0.0, 0.0)
    if stats is None:
        stats = collect_calibration(model, calib)
    prepared = _prepare_all(model, stats, method, None)
    cfg = cfg or AllocationConfig(target_ratio=p_t)

    uni = uniform_plan(model, stats, p_t, method, prepared)
    bal = uniform_plan(model, stats, p_t, method, prepared, balanced=True,
                       cfg=AllocationConfig(target_ratio=p_t, epsilon=cfg.epsilon,
                                            rank_floor_ratio=cfg.rank_floor_ratio, clamp_range=(0.0, 0.95),
                                            budget_rounding="floor"))
    uni_model, uni_loss = compress_with_plan(model, calib, stats, uni, method, prepared)
    bal_model, bal_loss = compress_with_plan(model, calib, stats, bal, method, prepared)
    mgaa_model, _ = mgaa_compress(model, calib, cfg, method, stats=stats, measure=False)

    def min_energy(plan):
        return {sid_str(s): min(plan.retained[s].values()) for s in sorted(plan.retained)}

    ue, be = min_energy(uni), min_energy(bal)
    plan_m, _, _ = plan_from_stats(model, stats, cfg, method, prepared)
    return UniformComparison(
        target_ratio=p_t,
        uniform_error=eval_model(uni_model, model, calib).hidden_error,
        mgaa_error=eval_model(mgaa_model, model, calib).hidden_error,
        energy_only_error=eval_model(bal_model, model, calib).hidden_error,
        uniform_min_energy=ue,
        balanced_min_energy=be,
        dominance_holds=all(be[k] >= ue[k] for k in ue),
        uniform_loss_dispersion=_mha_loss_dispersion(uni, prepared, uni_loss),
        balanced_loss_dispersion=_mha_loss_dispersion(bal, prepared, bal_loss),
        mgaa_clamp_events=len(plan_m.clamp_events),
    )
