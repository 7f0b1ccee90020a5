"""Brute-force reference solvers for the combinatorial layer of the certificates.

They enumerate every subset, so they are exponential by design and only meant
for small instances. Costs are the already-scaled p-th powers of radii.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_KNAPSACK_ITEMS = 20
MAX_IOU_ITEMS = 16


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class AttackAllocation:
    flipped: tuple[int, ...]
    tn_flipped: tuple[int, ...]
    spend: float


def subset_table(costs):
    """Cost and cardinality of every subset; entry ``m`` is the subset of set bits of ``m``."""
    sums = np.zeros(1)
    sizes = np.zeros(1, dtype=np.int64)
    for c in costs:
        sums = np.concatenate([sums, sums + float(c)])
        sizes = np.concatenate([sizes, sizes + 1])
    return sums, sizes


def _members(mask: int, n: int) -> tuple[int, ...]:
    return tuple(i for i in range(n) if mask >> i & 1)


def _check_size(n, cap):
    if n > cap:
        raise InstanceTooLarge(f"{n} items exceed the enumeration cap of {cap}")


def exact_max_flips(costs, budget: float) -> int:
    """Largest subset whose cost fits the budget."""
    costs = list(costs)
    _check_size(len(costs), MAX_KNAPSACK_ITEMS)
    sums, sizes = subset_table(costs)
    return int(sizes[sums <= budget].max())


def exact_min_budget(costs, n_target: int) -> float:
    """Cheapest subset with at least ``n_target`` members."""
    costs = list(costs)
    _check_size(len(costs), MAX_KNAPSACK_ITEMS)
    if not 1 <= n_target <= len(costs):
        raise ValueError(f"n_target={n_target} outside [1, {len(costs)}]")
    sums, sizes = subset_table(costs)
    return float(sums[sizes >= n_target].min())


def exact_worst_allocation(tp_costs, tn_costs, s_k_size: int, clean_fp: int, budget: float):
    """Minimum IoU over every affordable (TP subset, TN subset) pair.

    Returns ``(iou, AttackAllocation)``.
    """
    tp_costs, tn_costs = list(tp_costs), list(tn_costs)
    _check_size(len(tp_costs) + len(tn_costs), MAX_IOU_ITEMS)
    if s_k_size <= 0:
        raise ValueError("s_k_size must be positive")
    if len(tp_costs) > s_k_size:
        raise ValueError("more TP costs than ground-truth pixels")
    tp_sums, tp_sizes = subset_table(tp_costs)
    tn_sums, tn_sizes = subset_table(tn_costs)
    spend = tp_sums[:, None] + tn_sums[None, :]
    iou = (s_k_size - tp_sizes[:, None]) / (s_k_size + clean_fp + tn_sizes[None, :])
    iou = np.where(spend <= budget, iou, np.inf)
    i, j = np.unravel_index(np.argmin(iou), iou.shape)
    alloc = AttackAllocation(_members(i, len(tp_costs)), _members(j, len(tn_costs)), float(spend[i, j]))
    return float(iou[i, j]), alloc


def exact_worst_iou(tp_costs, tn_costs, s_k_size: int, clean_fp: int, budget: float) -> float:
    return exact_worst_allocation(tp_costs, tn_costs, s_k_size, clean_fp, budget)[0]
