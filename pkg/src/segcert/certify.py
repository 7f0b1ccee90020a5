"""Worst-case certificates for segmentation metrics from a global Lipschitz bound.

Every certificate reduces to per-pixel radii: the smallest input perturbation
(in l_p) that could change a pixel's decision is at least
``2^((1-p)/p) * margin / L``. Attacks on distinct pixels need disjoint output
perturbations, so their p-th powers add up against the budget ``eps^p``; the
worst case is a unit-profit knapsack solved exactly by cheapest-first greedy.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from segcert.tensor import TopTwo, class_margins, top_two

METRICS = ("pixel-acc", "fnr", "stability", "class-iou")
DEFAULT_IGNORE = 255
# relative slack when comparing cumulative costs against eps^p
BUDGET_RTOL = 1e-12


class CertError(ValueError):
    pass


class InvalidConfig(CertError):
    pass


class ShapeMismatch(CertError):
    pass


class UndefinedMetric(CertError):
    pass


class MissingLabels(CertError):
    pass


@dataclass(frozen=True)
class CertConfig:
    lipschitz: float = 1.0
    norm_order: float = 2.0
    epsilons: tuple[float, ...] = (0.0,)
    gammas: tuple[float, ...] = ()
    class_index: int | None = None
    ignore_label: int | None = DEFAULT_IGNORE

    def __post_init__(self):
        object.__setattr__(self, "epsilons", tuple(float(e) for e in self.epsilons))
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        L, p = self.lipschitz, self.norm_order
        if not (math.isfinite(L) and L > 0):
            raise InvalidConfig(f"Lipschitz constant must be finite and > 0, got {L}")
        if not math.isfinite(p):
            raise InvalidConfig("p = inf is not supported")
        if p < 1:
            raise InvalidConfig(f"norm order must be >= 1, got {p}")
        for eps in self.epsilons:
            if not (math.isfinite(eps) and eps >= 0):
                raise InvalidConfig(f"budgets must be finite and >= 0, got {eps}")
        for g in self.gammas:
            if not 0 < g <= 1:
                raise InvalidConfig(f"gamma must lie in (0, 1], got {g}")

    @property
    def radius_scale(self) -> float:
        """Factor turning a logit margin into an input-space radius."""
        p = self.norm_order
        return 2.0 ** ((1.0 - p) / p) / self.lipschitz


@dataclass(frozen=True)
class RadiusMap:
    radius: np.ndarray  # H x W float64, zero outside ``mask``
    mask: np.ndarray  # H x W bool, pixels belonging to the set
    kind: str

    def values(self) -> np.ndarray:
        """Radii of the member pixels in row-major order."""
        return self.radius[self.mask]


@dataclass
class SortedRadii:
    """Ascending p-th powers of radii with their running sums.

    ``prefix[n]`` is the cost of the ``n`` cheapest pixels; ``prefix[0] == 0``.
    """

    costs: np.ndarray
    prefix: np.ndarray
    p: float
    radii: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_costs(cls, costs, p: float) -> SortedRadii:
        """Build directly from p-th powers, skipping the radius -> cost step."""
        costs = np.sort(np.asarray(costs, dtype=np.float64).ravel())
        prefix = np.concatenate([[0.0], np.cumsum(costs)])
        return cls(costs, prefix, float(p))

    @property
    def size(self) -> int:
        return self.costs.size

    def order(self) -> np.ndarray:
        """Permutation of the member pixels by ascending radius, row-major on ties."""
        if self.radii is None:
            raise ValueError("radii were not kept; build with keep_radii=True")
        return np.argsort(self.radii, kind="stable")


def _pow(values: np.ndarray, p: float) -> np.ndarray:
    if p == 1.0:
        return np.asarray(values, dtype=np.float64)
    if p == 2.0:
        return np.square(values, dtype=np.float64)
    return np.power(values, p, dtype=np.float64)


def sort_radii(radii, p: float, keep_radii: bool = False) -> SortedRadii:
    radii = np.asarray(radii, dtype=np.float64).ravel()
    costs = np.sort(_pow(radii, p))
    prefix = np.empty(costs.size + 1)
    prefix[0] = 0.0
    np.cumsum(costs, out=prefix[1:])
    return SortedRadii(costs, prefix, float(p), radii if keep_radii else None)


def _sorted_from_costs(costs) -> np.ndarray:
    costs = np.sort(np.asarray(costs, dtype=np.float64).ravel())
    prefix = np.empty(costs.size + 1)
    prefix[0] = 0.0
    np.cumsum(costs, out=prefix[1:])
    return prefix


def budget_threshold(budget_p):
    """Capacity ``eps^p`` widened by a relative 1e-12; zero budgets stay exact."""
    budget_p = np.asarray(budget_p, dtype=np.float64)
    slack = BUDGET_RTOL * np.maximum(1.0, budget_p)
    return np.where(budget_p > 0, budget_p + slack, 0.0)


def _budget_p(epsilons, p):
    eps = np.asarray(epsilons, dtype=np.float64)
    if np.any(eps < 0) or not np.all(np.isfinite(eps)):
        raise InvalidConfig("budgets must be finite and >= 0")
    return _pow(eps, p)


def n_sup_from_prefix(prefix: np.ndarray, budget_p) -> np.ndarray:
    """Largest n with ``prefix[n] <= capacity`` for each capacity."""
    return np.searchsorted(prefix[1:], budget_threshold(budget_p), side="right")


def n_sup(sorted_radii: SortedRadii, epsilon):
    """Maximum number of pixels an ``epsilon`` budget can flip.

    Accepts a scalar or an array of budgets.
    """
    out = n_sup_from_prefix(sorted_radii.prefix, _budget_p(epsilon, sorted_radii.p))
    return int(out) if np.ndim(out) == 0 else out


def generalized_radius(sorted_radii: SortedRadii, n_gamma: int) -> float:
    """Smallest budget that could flip ``n_gamma`` pixels: (sum of n cheapest)^(1/p)."""
    if not 1 <= n_gamma <= sorted_radii.size:
        raise InvalidConfig(f"n_gamma={n_gamma} outside [1, {sorted_radii.size}]")
    total = float(sorted_radii.prefix[n_gamma])
    return total ** (1.0 / sorted_radii.p)


def n_gamma_for(gamma: float, size: int) -> int:
    """ceil(gamma * size), robust to products like 0.7 * 10 landing one ulp high."""
    if not 0 < gamma <= 1:
        raise InvalidConfig(f"gamma must lie in (0, 1], got {gamma}")
    n = math.ceil(gamma * size - 1e-9)
    if n < 1:
        raise InvalidConfig(f"gamma={gamma} selects no pixel out of {size}")
    return min(n, size)


# --- per-pixel radii -----------------------------------------------------


def _check_labels(labels, shape) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != tuple(shape):
        raise ShapeMismatch(f"labels shape {labels.shape} != logits grid {tuple(shape)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeMismatch("labels must be integer class indices")
    return labels


def valid_pixels(labels, n_classes: int, ignore_label: int | None) -> np.ndarray:
    """Non-ignored pixels; raises if a remaining label is out of range."""
    if ignore_label is None:
        mask = np.ones(labels.shape, dtype=bool)
    else:
        mask = labels != ignore_label
    kept = labels[mask]
    if kept.size and (kept.min() < 0 or kept.max() >= n_classes):
        raise ShapeMismatch(f"labels outside [0, {n_classes}) on non-ignored pixels")
    return mask


def pixel_radii(margin, preds, labels, cfg: CertConfig) -> RadiusMap:
    margin = np.asarray(margin, dtype=np.float64)
    preds = np.asarray(preds)
    labels = _check_labels(labels, margin.shape)
    if preds.shape != margin.shape:
        raise ShapeMismatch("predictions and margins differ in shape")
    mask = np.ones(margin.shape, bool) if cfg.ignore_label is None else labels != cfg.ignore_label
    correct = (preds == labels) & mask
    radius = np.where(correct, margin * cfg.radius_scale, 0.0)
    return RadiusMap(radius, mask, "accuracy")


def stability_radii(margin, cfg: CertConfig, mask=None) -> RadiusMap:
    margin = np.asarray(margin, dtype=np.float64)
    if mask is None:
        mask = np.ones(margin.shape, dtype=bool)
    radius = np.where(mask, margin * cfg.radius_scale, 0.0)
    return RadiusMap(radius, np.asarray(mask, bool), "stability")


# --- Q1 / Q2 certificates ------------------------------------------------


@dataclass
class SetCertificate:
    """Flip counts per budget and radii per flip fraction over one pixel set."""

    size: int
    clean_flipped: int
    n_flippable: list[int]
    gamma_counts: list[int]
    gamma_radii: list[float]

    def fractions(self) -> list[float]:
        """Share of the set an attacker can flip, per budget."""
        return [n / self.size for n in self.n_flippable]

    def survivors(self) -> list[float]:
        """Share guaranteed to keep its decision; (|S| - N) / |S| so that a
        zero budget reproduces clean accuracy bit for bit."""
        return [(self.size - n) / self.size for n in self.n_flippable]


def certify_set(radii: RadiusMap, cfg: CertConfig, zero_flipped=None) -> SetCertificate:
    values = radii.values()
    if values.size == 0:
        raise UndefinedMetric(f"empty pixel set for {radii.kind} certificate")
    sr = sort_radii(values, cfg.norm_order)
    counts = n_sup_from_prefix(sr.prefix, _budget_p(cfg.epsilons, cfg.norm_order))
    g_counts = [n_gamma_for(g, sr.size) for g in cfg.gammas]
    g_radii = [generalized_radius(sr, n) for n in g_counts]
    if zero_flipped is None:
        zero_flipped = int(np.count_nonzero(values == 0))
    return SetCertificate(sr.size, int(zero_flipped), [int(c) for c in counts], g_counts, g_radii)


def _logit_inputs(logits, labels, cfg, top=None, threads=1):
    logits = np.asarray(logits)
    if top is None:
        top = top_two(logits, threads)
    mask = None
    if labels is not None:
        labels = _check_labels(labels, logits.shape[1:])
        mask = valid_pixels(labels, logits.shape[0], cfg.ignore_label)
    return top, labels, mask


def crpa(logits, labels, cfg: CertConfig, subset=None, top: TopTwo | None = None) -> list[float]:
    """Certified pixel accuracy on ``subset`` for every budget in ``cfg``."""
    top, labels, mask = _logit_inputs(logits, labels, cfg, top)
    rm = pixel_radii(top.margin, top.preds, labels, cfg)
    if subset is not None:
        rm = RadiusMap(rm.radius, rm.mask & np.asarray(subset, bool), rm.kind)
    cert = certify_set(rm, cfg)
    return cert.survivors()


def _positive_class(logits, cfg) -> int:
    k = 1 if cfg.class_index is None else cfg.class_index
    if not 0 <= k < np.shape(logits)[0]:
        raise InvalidConfig(f"class index {k} outside [0, {np.shape(logits)[0]})")
    return k


def _fnr_set(logits, labels, cfg, top):
    top, labels, mask = _logit_inputs(logits, labels, cfg, top)
    k = _positive_class(logits, cfg)
    rm = pixel_radii(top.margin, top.preds, labels, cfg)
    positives = mask & (labels == k)
    if not positives.any():
        raise UndefinedMetric(f"no ground-truth pixels of class {k}; FNR undefined")
    return RadiusMap(rm.radius, positives, "accuracy"), top, labels, positives, k


def fnr_certificate(logits, labels, cfg: CertConfig, top: TopTwo | None = None) -> list[float]:
    """Upper bound on the false negative rate for every budget."""
    rm, *_ = _fnr_set(logits, labels, cfg, top)
    return certify_set(rm, cfg).fractions()


def fnr_radius(logits, labels, cfg: CertConfig, gamma: float, top: TopTwo | None = None) -> float:
    """Budget below which the FNR provably stays under ``gamma``."""
    rm, *_ = _fnr_set(logits, labels, cfg, top)
    sr = sort_radii(rm.values(), cfg.norm_order)
    return generalized_radius(sr, n_gamma_for(gamma, sr.size))


def stability_certificate(logits, cfg: CertConfig, subset=None, top: TopTwo | None = None):
    """Certified stability per budget, and stability radii per flip fraction.

    Returns ``(crs, radii)``; no ground truth is consulted.
    """
    if top is None:
        top = top_two(logits)
    rm = stability_radii(top.margin, cfg, subset)
    cert = certify_set(rm, cfg)
    return cert.survivors(), cert.gamma_radii


# --- class IoU -----------------------------------------------------------


@dataclass(frozen=True)
class IoUBound:
    iou: float
    tp_flipped: int
    tn_flipped: int


def worst_iou_from_costs(tp_costs, tn_costs, s_k_size: int, clean_fp: int, budgets) -> list[IoUBound]:
    """Two-stage greedy lower bound on class IoU.

    ``tp_costs`` holds one p-th power radius per ground-truth pixel of the class
    that an attacker may push out (already-missed pixels cost 0); ``tn_costs``
    holds the costs of pulling other pixels into the class; ``clean_fp`` pixels
    already inflate the union. For each number ``a`` of cheapest TP flips the
    leftover budget buys the largest affordable count of cheapest TN flips.
    """
    if s_k_size <= 0:
        raise UndefinedMetric("class has no ground-truth pixel; IoU undefined")
    tp_prefix = _sorted_from_costs(tp_costs)
    tn_prefix = _sorted_from_costs(tn_costs)
    if tp_prefix.size - 1 > s_k_size:
        raise InvalidConfig("more TP costs than ground-truth pixels")
    caps = budget_threshold(np.asarray(budgets, dtype=np.float64))
    out = []
    a = np.arange(tp_prefix.size)
    for cap in np.atleast_1d(caps):
        n_a = int(np.searchsorted(tp_prefix[1:], cap, side="right")) + 1
        residual = cap - tp_prefix[:n_a]
        b = np.searchsorted(tn_prefix[1:], residual, side="right")
        ratio = (s_k_size - a[:n_a]) / (s_k_size + clean_fp + b)
        best = int(np.argmin(ratio))
        out.append(IoUBound(float(ratio[best]), best, int(b[best])))
    return out


def class_iou_costs(logits, labels, cfg: CertConfig, k: int, top: TopTwo | None = None):
    """Split pixels into the cost lists consumed by the IoU greedy.

    Returns ``(tp_costs, tn_costs, s_k_size, clean_fp, clean_tp)``.
    """
    top, labels, mask = _logit_inputs(logits, labels, cfg, top)
    tp_raw, tn_raw = class_margins(logits, k, top)
    scale = cfg.radius_scale
    p = cfg.norm_order
    in_k = mask & (labels == k)
    pred_k = top.preds == k
    s_k_size = int(np.count_nonzero(in_k))
    if s_k_size == 0:
        raise UndefinedMetric(f"no ground-truth pixels of class {k}; IoU undefined")
    tp = in_k & pred_k
    tp_costs = np.zeros(s_k_size)
    tp_costs[: int(np.count_nonzero(tp))] = _pow(tp_raw[tp] * scale, p)
    others = mask & ~in_k
    clean_fp = int(np.count_nonzero(others & pred_k))
    tn_costs = _pow(tn_raw[others & ~pred_k] * scale, p)
    return tp_costs, tn_costs, s_k_size, clean_fp, int(np.count_nonzero(tp))


def class_iou_worst_case(logits, labels, cfg: CertConfig, k: int | None = None,
                         top: TopTwo | None = None) -> list[IoUBound]:
    if k is None:
        k = _positive_class(logits, cfg)
    elif not 0 <= k < np.shape(logits)[0]:
        raise InvalidConfig(f"class index {k} outside [0, {np.shape(logits)[0]})")
    tp_costs, tn_costs, s_k, fp, _ = class_iou_costs(logits, labels, cfg, k, top)
    return worst_iou_from_costs(tp_costs, tn_costs, s_k, fp,
                                _budget_p(cfg.epsilons, cfg.norm_order))


# --- report --------------------------------------------------------------


@dataclass
class CertificateReport:
    metric: str
    epsilons: list[dict]
    gammas: list[dict]
    clean: dict
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "epsilons": self.epsilons,
            "gammas": self.gammas,
            "clean": self.clean,
            "metadata": self.metadata,
        }


def certify_report(logits, labels, cfg: CertConfig, metric: str, threads: int = 1) -> CertificateReport:
    """Run one metric's certificates on one image and collect them."""
    if metric not in METRICS:
        raise InvalidConfig(f"unknown metric {metric!r}; choose from {METRICS}")
    if labels is None and metric != "stability":
        raise MissingLabels(f"metric {metric!r} needs ground-truth labels")
    start = time.perf_counter()
    logits = np.asarray(logits)
    top, labels, mask = _logit_inputs(logits, labels, cfg, threads=threads)
    eps_records: list[dict] = []
    gamma_records: list[dict] = []
    clean: dict = {}
    extra: dict = {}

    if metric == "class-iou":
        k = _positive_class(logits, cfg)
        tp_costs, tn_costs, s_k, fp, n_tp = class_iou_costs(logits, labels, cfg, k, top)
        bounds = worst_iou_from_costs(tp_costs, tn_costs, s_k, fp,
                                      _budget_p(cfg.epsilons, cfg.norm_order))
        for eps, b in zip(cfg.epsilons, bounds):
            eps_records.append({
                "epsilon": eps,
                "n_flippable": b.tp_flipped + b.tn_flipped,
                "worst_class_iou": b.iou,
                "tp_flipped": b.tp_flipped,
                "tn_flipped": b.tn_flipped,
            })
        clean["class_iou"] = n_tp / (s_k + fp)
        n_set = s_k
        extra["class_index"] = k
    else:
        if metric == "pixel-acc":
            rm = pixel_radii(top.margin, top.preds, labels, cfg)
            key, clean_key = "crpa", "pixel_accuracy"
        elif metric == "fnr":
            rm, _, _, _, k = _fnr_set(logits, labels, cfg, top)
            key, clean_key = "fnr_bound", "fnr"
            extra["class_index"] = k
        else:
            rm = stability_radii(top.margin, cfg, mask)
            key, clean_key = "crs", "stability"
        cert = certify_set(rm, cfg)
        n_set = cert.size
        for eps, n in zip(cfg.epsilons, cert.n_flippable):
            value = (n if metric == "fnr" else cert.size - n) / cert.size
            eps_records.append({"epsilon": eps, "n_flippable": n, key: value})
        for g, n, r in zip(cfg.gammas, cert.gamma_counts, cert.gamma_radii):
            gamma_records.append({"gamma": g, "n_gamma": n, "radius_lower_bound": r})
        if metric == "pixel-acc":
            correct = np.count_nonzero((top.preds == labels) & rm.mask)
            clean[clean_key] = correct / cert.size
        elif metric == "fnr":
            missed = np.count_nonzero((top.preds != labels) & rm.mask)
            clean[clean_key] = missed / cert.size
        else:
            clean[clean_key] = 1.0

    elapsed = (time.perf_counter() - start) * 1e3
    metadata = {
        "lipschitz": cfg.lipschitz,
        "p": cfg.norm_order,
        "n_pixels": n_set,
        "elapsed_ms": elapsed,
        **extra,
    }
    return CertificateReport(metric, eps_records, gamma_records, clean, metadata)


def certify_batch(logits_batch: Sequence, labels_batch, cfg: CertConfig, metric: str,
                  threads: int = 1) -> list[CertificateReport]:
    """Certify several images; output order follows input order."""
    labels_batch = labels_batch if labels_batch is not None else [None] * len(logits_batch)
    if len(labels_batch) != len(logits_batch):
        raise ShapeMismatch("different number of logit maps and label masks")
    jobs = list(zip(logits_batch, labels_batch))
    if threads <= 1 or len(jobs) <= 1:
        return [certify_report(lg, lb, cfg, metric) for lg, lb in jobs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: certify_report(job[0], job[1], cfg, metric), jobs))
