"""Sublayer ratio allocation and energy-balanced rank allocation.

Two granularities:

* sublayer level: cosine-similarity importance -> z-score -> ratio, then a
  single translation so the parameter-weighted mean ratio hits the target;
* matrix level: inside one sublayer, ranks are chosen so every matrix keeps
  roughly the same fraction of its spectral energy under a shared budget.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from . import kernels
from .decompose import EnergyProfile, ScaleVector, rank_for_ratio
from .errors import (
    AllDegenerateColumnsError,
    EmptyBatchError,
    HeterogeneousRankCostError,
    InfeasibleBudgetError,
    InvalidAllocationConfigError,
    SearchSpaceTooLargeError,
    TooFewSublayersError,
)

log = logging.getLogger(__name__)

SublayerId = Tuple[int, str]
DEGENERATE_NORM = 1e-12
BRUTE_FORCE_LIMIT = 10**6


def sid_str(sid: SublayerId) -> str:
    return f"L{sid[0]}.{sid[1]}"


def parse_sid(text: str) -> SublayerId:
    layer, kind = text.split(".")
    if not layer.startswith("L") or kind not in ("mha", "ffn"):
        raise ValueError(f"bad sublayer id {text!r}")
    return int(layer[1:]), kind


@dataclass
class MatrixStats:
    """Streaming calibration statistics for one weight matrix."""

    d_in: int
    d_out: int
    gram_y: np.ndarray
    sum_y: np.ndarray
    sum_abs_x: np.ndarray
    sum_sq_x: np.ndarray
    token_count: int = 0

    @classmethod
    def zeros(cls, d_in: int, d_out: int) -> "MatrixStats":
        return cls(
            d_in=d_in,
            d_out=d_out,
            gram_y=np.zeros((d_out, d_out)),
            sum_y=np.zeros(d_out),
            sum_abs_x=np.zeros(d_in),
            sum_sq_x=np.zeros(d_in),
        )

    def update(self, x: np.ndarray, y: np.ndarray):
        """Add a batch of row-major inputs ``x`` (L x d_in) and outputs ``y`` (L x d_out)."""
        self.gram_y += y.T @ y
        self.sum_y += y.sum(axis=0)
        self.sum_abs_x += np.abs(x).sum(axis=0)
        self.sum_sq_x += (x * x).sum(axis=0)
        self.token_count += x.shape[0]

    @property
    def mean_y(self) -> np.ndarray:
        return self.sum_y / max(self.token_count, 1)

    @property
    def scale_abs(self) -> ScaleVector:
        return ScaleVector(self.sum_abs_x / max(self.token_count, 1), kind="mean_abs")

    @property
    def scale_l2(self) -> ScaleVector:
        return ScaleVector(np.sqrt(self.sum_sq_x), kind="l2_norm")


@dataclass
class SublayerStats:
    sublayer_id: SublayerId
    importance: float
    param_count: int
    matrix_stats: Dict[str, MatrixStats] = field(default_factory=dict)
    degenerate_columns: int = 0
    joint_gram_qk: Optional[np.ndarray] = None


@dataclass
class AllocationConfig:
    target_ratio: float
    alpha: float = 0.35
    epsilon: float = 1e-3
    rank_floor_ratio: float = 0.1
    skip_sublayers: frozenset = frozenset()
    clamp_range: Tuple[float, float] = (0.01, 0.95)
    budget_rounding: str = "carry"  # or "floor"
    clamp_policy: str = "report"  # or "redistribute"

    def __post_init__(self):
        self.skip_sublayers = frozenset(tuple(s) for s in self.skip_sublayers)
        self.clamp_range = tuple(float(v) for v in self.clamp_range)
        lo, hi = self.clamp_range
        if not 0.0 < self.target_ratio < 1.0:
            raise InvalidAllocationConfigError(f"target_ratio {self.target_ratio} not in (0, 1)")
        if self.alpha < 0.0:
            raise InvalidAllocationConfigError("alpha must be >= 0")
        if self.epsilon <= 0.0:
            raise InvalidAllocationConfigError("epsilon must be > 0")
        if not 0.0 <= self.rank_floor_ratio < 1.0:
            raise InvalidAllocationConfigError("rank_floor_ratio must be in [0, 1)")
        if not (0.0 <= lo <= self.target_ratio <= hi < 1.0):
            raise InvalidAllocationConfigError(
                f"clamp range {self.clamp_range} must satisfy 0 <= lo <= target <= hi < 1"
            )
        if self.budget_rounding not in ("carry", "floor"):
            raise InvalidAllocationConfigError(f"unknown budget_rounding {self.budget_rounding!r}")
        if self.clamp_policy not in ("report", "redistribute"):
            raise InvalidAllocationConfigError(f"unknown clamp_policy {self.clamp_policy!r}")


class ImportanceAccumulator:
    """Running mean of token-wise cosine similarity between sublayer input and output."""

    def __init__(self):
        self.cos_sum = 0.0
        self.count = 0
        self.skipped = 0

    def update(self, x: np.ndarray, y: np.ndarray):
        # rows are tokens here
        nx = np.sqrt(np.einsum("ij,ij->i", x, x))
        ny = np.sqrt(np.einsum("ij,ij->i", y, y))
        ok = (nx >= DEGENERATE_NORM) & (ny >= DEGENERATE_NORM)
        self.skipped += int(np.count_nonzero(~ok))
        if np.any(ok):
            dots = np.einsum("ij,ij->i", x[ok], y[ok])
            cos = np.clip(dots / (nx[ok] * ny[ok]), -1.0, 1.0)
            self.cos_sum += float(np.sum(cos))
            self.count += int(np.count_nonzero(ok))

    def value(self) -> float:
        if self.count == 0:
            if self.skipped == 0:
                raise EmptyBatchError("no tokens were recorded")
            raise AllDegenerateColumnsError(f"all {self.skipped} columns have near-zero norm")
        return self.cos_sum / self.count


def sublayer_importance(x, y) -> float:
    """Mean cosine similarity between matching columns of ``x`` and ``y`` (d x L)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise EmptyBatchError(f"x {x.shape} and y {y.shape} must be equal-shape 2-D arrays")
    if x.shape[1] == 0:
        raise EmptyBatchError("empty batch")
    acc = ImportanceAccumulator()
    acc.update(x.T, y.T)
    return acc.value()


@dataclass
class RatioAllocation:
    ratios: Dict[SublayerId, float]
    z_scores: Dict[SublayerId, float]
    pre_adjust: Dict[SublayerId, float]
    realized_mean: float  # parameter-weighted mean before translation
    effective_target: float
    shift: float
    clamp_events: List[dict]
    achieved_mean: float  # parameter-weighted mean over all sublayers, skipped included
    degenerate: bool = False


def ratio_allocation(
    importances: Mapping[SublayerId, float],
    param_counts: Mapping[SublayerId, int],
    cfg: AllocationConfig,
) -> RatioAllocation:
    keys = sorted(importances)
    active = [k for k in keys if k not in cfg.skip_sublayers]
    if len(active) < 2:
        raise TooFewSublayersError(f"need at least 2 non-skipped sublayers, got {len(active)}")
    total_params = float(sum(param_counts[k] for k in keys))
    active_params = float(sum(param_counts[k] for k in active))
    p_eff = cfg.target_ratio * total_params / active_params
    if p_eff >= 1.0:
        raise InvalidAllocationConfigError(
            f"skipping {len(keys) - len(active)} sublayers needs an effective ratio {p_eff:.4f} >= 1"
        )

    imp = np.array([importances[k] for k in active], dtype=np.float64)
    weights = np.array([param_counts[k] for k in active], dtype=np.float64)
    var = float(np.mean((imp - imp.mean()) ** 2))
    # identical importances can leave roundoff-sized variance
    degenerate = not var > (1e-12 * max(1.0, float(np.abs(imp).max()))) ** 2
    if degenerate:
        log.warning("importance variance is zero; using uniform ratios")
        z = np.zeros_like(imp)
    else:
        z = (imp - imp.mean()) / math.sqrt(var)
    pre = cfg.alpha * z + cfg.target_ratio
    realized = float(np.dot(weights, pre) / weights.sum())
    shift = p_eff - realized
    adjusted = pre + shift

    lo, hi = cfg.clamp_range
    clipped = np.clip(adjusted, lo, hi)
    events = [
        {"sublayer": sid_str(k), "unclamped": float(a), "clamped": float(c)}
        for k, a, c in zip(active, adjusted, clipped)
        if c != a
    ]
    if events and cfg.clamp_policy == "redistribute":
        clipped = _redistribute(clipped, adjusted, weights, p_eff, lo, hi)
    ratios: Dict[SublayerId, float] = {k: 0.0 for k in keys}
    for k, c in zip(active, clipped):
        ratios[k] = float(c)
    achieved = sum(ratios[k] * param_counts[k] for k in keys) / total_params
    if events:
        log.warning(
            "%d sublayer ratios clamped; weighted ratio %.6f vs target %.6f",
            len(events), achieved, cfg.target_ratio,
        )
    return RatioAllocation(
        ratios=ratios,
        z_scores={k: float(v) for k, v in zip(active, z)},
        pre_adjust={k: float(v) for k, v in zip(active, pre)},
        realized_mean=realized,
        effective_target=p_eff,
        shift=shift,
        clamp_events=events,
        achieved_mean=float(achieved),
        degenerate=degenerate,
    )


def _redistribute(clipped, adjusted, weights, target, lo, hi):
    """Shift the unclamped ratios so the weighted mean hits ``target`` again."""
    out = clipped.copy()
    pinned = out != adjusted
    for _ in range(len(out)):
        free = ~pinned
        if not free.any():
            break
        gap = target * weights.sum() - float(np.dot(weights, out))
        if abs(gap) <= 1e-15 * weights.sum():
            break
        out[free] += gap / weights[free].sum()
        hit = free & ((out < lo) | (out > hi))
        out = np.clip(out, lo, hi)
        if not hit.any():
            break
        pinned |= hit
    return out


def allocate_ratios(importances, param_counts, cfg: AllocationConfig) -> Dict[SublayerId, float]:
    return ratio_allocation(importances, param_counts, cfg).ratios


def sublayer_rank_budget(matrix_dims: Iterable[Tuple[int, int]], p: float) -> int:
    dims = list(matrix_dims)
    if len({d_in + d_out for d_in, d_out in dims}) > 1:
        raise HeterogeneousRankCostError(f"per-rank costs differ across {dims}")
    return sum(rank_for_ratio(d_in, d_out, p) for d_in, d_out in dims)


def rank_unit_costs(dims: Mapping[str, Tuple[int, int]]) -> Dict[str, int]:
    """Per-rank parameter cost of each matrix divided by their common gcd."""
    raw = {k: d_in + d_out for k, (d_in, d_out) in dims.items()}
    g = reduce(math.gcd, raw.values())
    return {k: v // g for k, v in raw.items()}


def floor_rank(d_in: int, d_out: int, floor_ratio: float) -> int:
    exact = floor_ratio * d_in * d_out / (d_in + d_out)
    return min(max(1, math.ceil(exact - 1e-9)), min(d_in, d_out))


@dataclass
class RankSolution:
    ranks: Dict[str, int]
    tau: float
    spread: float  # max - min retained energy
    spread_exceeds_epsilon: bool
    used: int
    budget: int
    floors: Dict[str, int]
    bisect_iterations: int = 0

    def retained(self, profiles: Mapping[str, EnergyProfile]) -> Dict[str, float]:
        return {k: profiles[k].retained(r) for k, r in self.ranks.items()}


def _pack(profiles, dims, floor_ratio, costs):
    names = sorted(profiles)
    flat, offsets, floors, rmax, unit = [], [0], [], [], []
    for k in names:
        c = np.asarray(profiles[k].cumulative, dtype=np.float64)
        d_in, d_out = dims[k]
        flat.append(c)
        offsets.append(offsets[-1] + len(c))
        rmax.append(min(d_in, d_out, len(c)))
        floors.append(min(floor_rank(d_in, d_out, floor_ratio), rmax[-1]))
        unit.append(1 if costs is None else int(costs[k]))
    return (
        names,
        np.concatenate(flat),
        np.asarray(offsets, dtype=np.int64),
        np.asarray(floors, dtype=np.int64),
        np.asarray(rmax, dtype=np.int64),
        np.asarray(unit, dtype=np.int64),
    )


def solve_balanced_ranks(
    profiles: Mapping[str, EnergyProfile],
    dims: Mapping[str, Tuple[int, int]],
    budget: int,
    epsilon: float = 1e-3,
    floor_ratio: float = 0.1,
    costs: Optional[Mapping[str, int]] = None,
) -> RankSolution:
    names, flat, offsets, floors, rmax, unit = _pack(profiles, dims, floor_ratio, costs)
    floor_cost = int(np.dot(floors, unit))
    if budget < floor_cost:
        raise InfeasibleBudgetError(f"budget {budget} below floor requirement {floor_cost}")
    ranks, tau, iters = kernels.balanced_solve(flat, offsets, floors, rmax, unit, int(budget))
    out = {k: int(r) for k, r in zip(names, ranks)}
    kept = [profiles[k].retained(out[k]) for k in names]
    spread = max(kept) - min(kept)
    return RankSolution(
        ranks=out,
        tau=float(tau),
        spread=spread,
        spread_exceeds_epsilon=spread > epsilon,
        used=int(np.dot(ranks, unit)),
        budget=int(budget),
        floors={k: int(f) for k, f in zip(names, floors)},
        bisect_iterations=int(iters),
    )


def balanced_ranks(profiles, dims, budget, epsilon=1e-3, floor_ratio=0.1, costs=None) -> Dict[str, int]:
    return solve_balanced_ranks(profiles, dims, budget, epsilon, floor_ratio, costs).ranks


def brute_force_ranks(profiles, dims, budget, epsilon=1e-3, floor_ratio=0.1, costs=None) -> Dict[str, int]:
    """Exhaustive oracle for :func:`balanced_ranks` (tests only).

    ``epsilon`` is accepted for signature parity; balance is enforced through
    the discrete one-rank-step rule described in ``_kernels_py``.
    """
    names, flat, offsets, floors, rmax, unit = _pack(profiles, dims, floor_ratio, costs)
    space = int(np.prod(rmax.astype(object)))
    if space > BRUTE_FORCE_LIMIT:
        raise SearchSpaceTooLargeError(f"search space {space} exceeds {BRUTE_FORCE_LIMIT}")
    if budget < int(np.dot(floors, unit)):
        raise InfeasibleBudgetError(f"budget {budget} below floor requirement")
    ranks, _ = kernels.brute_force_solve(flat, offsets, floors, rmax, unit, int(budget))
    if ranks is None:
        raise InfeasibleBudgetError("no feasible rank tuple")
    return {k: int(r) for k, r in zip(names, ranks)}


def objective(profiles: Mapping[str, EnergyProfile], ranks: Mapping[str, int]) -> float:
    return sum(profiles[k].retained(ranks[k]) for k in sorted(ranks))


def uniform_ranks(dims: Mapping[str, Tuple[int, int]], p: float) -> Dict[str, int]:
    return {k: rank_for_ratio(d_in, d_out, p) for k, (d_in, d_out) in dims.items()}


@dataclass
class SublayerUnits:
    """Allocation units of one sublayer.

    ``dims``/``profiles`` describe the units that receive ranks (for joint
    Q/K the stacked pair is one unit); ``original_dims`` are the dense
    matrices whose parameters the budget is measured against.
    """

    dims: Dict[str, Tuple[int, int]]
    profiles: Dict[str, EnergyProfile]
    original_dims: Dict[str, Tuple[int, int]]
    fixed_params: int = 0  # rank-independent extras such as bias vectors

    @property
    def original_params(self) -> int:
        return sum(a * b for a, b in self.original_dims.values())


@dataclass
class AllocationPlan:
    target_ratio: float
    method: str
    ratios: Dict[SublayerId, float]
    ranks: Dict[SublayerId, Dict[str, int]]
    budgets: Dict[SublayerId, int]  # weighted rank units
    unit_costs: Dict[SublayerId, Dict[str, int]]
    unit_params: Dict[SublayerId, int]  # parameters per weighted rank unit
    retained: Dict[SublayerId, Dict[str, float]]
    tau: Dict[SublayerId, float]
    spread: Dict[SublayerId, float]
    epsilon: float
    achieved_global_ratio: float
    skipped: List[SublayerId] = field(default_factory=list)
    clamp_events: List[dict] = field(default_factory=list)
    floor_events: List[dict] = field(default_factory=list)
    importances: Dict[SublayerId, float] = field(default_factory=dict)
    realized_mean: float = 0.0
    shift: float = 0.0

    def planned_params(self, units: Mapping[SublayerId, SublayerUnits]) -> int:
        total = 0
        for sid, su in units.items():
            if sid in self.ranks:
                total += sum(self.ranks[sid][k] * (d_in + d_out) for k, (d_in, d_out) in su.dims.items())
                total += su.fixed_params
            else:
                total += su.original_params
        return total


def build_plan(
    ratio_alloc: RatioAllocation,
    units: Mapping[SublayerId, SublayerUnits],
    cfg: AllocationConfig,
    method: str = "pca",
) -> AllocationPlan:
    """Turn sublayer ratios into per-matrix ranks.

    With ``budget_rounding="carry"`` the fractional part of each sublayer's
    exact retained-parameter budget is carried to the next sublayer (in
    sorted id order) so rounding error does not accumulate over the model.
    ``"floor"`` uses the per-matrix floor of the rank formula instead.
    """
    ranks, budgets, costs_out, unit_params, retained, taus, spreads = {}, {}, {}, {}, {}, {}, {}
    floor_events = []
    skipped = []
    wanted = 0.0
    placed = 0
    total = 0
    for sid in sorted(units):
        su = units[sid]
        total += su.original_params
        if sid in cfg.skip_sublayers:
            skipped.append(sid)
            continue
        p = ratio_alloc.ratios[sid]
        costs = rank_unit_costs(su.dims)
        name0 = next(iter(su.dims))
        g = (su.dims[name0][0] + su.dims[name0][1]) // costs[name0]
        placed += su.fixed_params
        if cfg.budget_rounding == "floor":
            budget = (sum(
                rank_for_ratio(d_in, d_out, p) * (d_in + d_out) for d_in, d_out in su.original_dims.values()
            ) - su.fixed_params) // g
        else:
            wanted += (1.0 - p) * su.original_params
            budget = int(math.floor((wanted - placed) / g + 0.5))
        floor_cost = sum(
            floor_rank(d_in, d_out, cfg.rank_floor_ratio) * costs[k] for k, (d_in, d_out) in su.dims.items()
        )
        if budget < floor_cost:
            floor_events.append({"sublayer": sid_str(sid), "budget": budget, "raised_to": floor_cost})
            budget = floor_cost
        sol = solve_balanced_ranks(su.profiles, su.dims, budget, cfg.epsilon, cfg.rank_floor_ratio, costs)
        placed += sol.used * g
        ranks[sid] = sol.ranks
        budgets[sid] = budget
        costs_out[sid] = costs
        unit_params[sid] = g
        retained[sid] = sol.retained(su.profiles)
        taus[sid] = sol.tau
        spreads[sid] = sol.spread
    kept = placed + sum(units[s].original_params for s in skipped)
    return AllocationPlan(
        target_ratio=cfg.target_ratio,
        method=method,
        ratios=dict(ratio_alloc.ratios),
        ranks=ranks,
        budgets=budgets,
        unit_costs=costs_out,
        unit_params=unit_params,
        retained=retained,
        tau=taus,
        spread=spreads,
        epsilon=cfg.epsilon,
        achieved_global_ratio=1.0 - kept / total,
        skipped=skipped,
        clamp_events=list(ratio_alloc.clamp_events),
        floor_events=floor_events,
        importances={},
        realized_mean=ratio_alloc.realized_mean,
        shift=ratio_alloc.shift,
    )
