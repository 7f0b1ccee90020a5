"""Randomised equivalence sweeps between the engine and the brute-force oracles,
plus empirical checks of the toy network's Lipschitz bound and gradients.

Engine functions are looked up through their module at call time so a patched
engine is what gets exercised.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from segcert import certify as engine
from segcert import lipnet, oracle

P_CHOICES = (1.0, 1.5, 2.0, 3.0)


@dataclass
class SuiteResult:
    name: str
    instances: int
    failures: int = 0
    max_error: float = 0.0
    seconds: float = 0.0
    first_failure: dict | None = None
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_dict(self) -> dict:
        return {
            "suite": self.name,
            "instances": self.instances,
            "failures": self.failures,
            "passed": self.passed,
            "max_error": self.max_error,
            "seconds": round(self.seconds, 3),
            "first_failure": self.first_failure,
            **self.details,
        }


def random_costs(rng, n, p, zero_prob=0.2):
    """p-th powers of U[0,1] radii; some items are free (already misclassified)."""
    radii = rng.uniform(0.0, 1.0, size=n)
    radii[rng.random(n) < zero_prob] = 0.0
    return radii ** p


def knapsack_sweep(instances: int, seed: int = 0, max_items: int = 12) -> SuiteResult:
    """n_sup vs exact_max_flips (exact) and generalized_radius^p vs exact_min_budget (1e-9)."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("knapsack", instances)
    start = time.perf_counter()
    for i in range(instances):
        n = int(rng.integers(1, max_items + 1))
        p = float(rng.choice(P_CHOICES))
        costs = random_costs(rng, n, p)
        total = float(costs.sum())
        budget = 0.0 if i % 10 == 0 else float(rng.uniform(0.0, total * 1.05))
        sr = engine.SortedRadii.from_costs(costs, p)
        got = engine.n_sup(sr, budget ** (1.0 / p))
        want = oracle.exact_max_flips(costs, budget)
        n_target = int(rng.integers(1, n + 1))
        radius_p = engine.generalized_radius(sr, n_target) ** p
        min_budget = oracle.exact_min_budget(costs, n_target)
        err = abs(radius_p - min_budget)
        res.max_error = max(res.max_error, err)
        if got != want or err > 1e-9:
            res.failures += 1
            if res.first_failure is None:
                res.first_failure = {"costs": costs.tolist(), "budget": budget, "p": p,
                                     "n_sup": got, "oracle": want, "n_target": n_target,
                                     "radius_p": radius_p, "min_budget": min_budget}
    res.seconds = time.perf_counter() - start
    return res


def iou_sweep(instances: int, seed: int = 0, max_items: int = 16) -> SuiteResult:
    """Greedy worst-case IoU vs full enumeration of (TP, TN) subsets, within 1e-9."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("class_iou", instances)
    start = time.perf_counter()
    for i in range(instances):
        p = float(rng.choice(P_CHOICES))
        n_tp = int(rng.integers(0, max_items // 2 + 1))
        n_tn = int(rng.integers(0, max_items - n_tp + 1))
        tp = random_costs(rng, n_tp, p)
        tn = random_costs(rng, n_tn, p, zero_prob=0.1)
        s_k = n_tp + int(rng.integers(0, 3)) if n_tp else int(rng.integers(1, 4))
        fp = int(rng.integers(0, 4))
        total = float(tp.sum() + tn.sum())
        budget = 0.0 if i % 10 == 0 else float(rng.uniform(0.0, total * 1.05))
        got = engine.worst_iou_from_costs(tp, tn, s_k, fp, [budget])[0].iou
        want = oracle.exact_worst_iou(tp, tn, s_k, fp, budget)
        err = abs(got - want)
        res.max_error = max(res.max_error, err)
        if err > 1e-9:
            res.failures += 1
            if res.first_failure is None:
                res.first_failure = {"tp": tp.tolist(), "tn": tn.tolist(), "s_k": s_k, "fp": fp,
                                     "budget": budget, "greedy": got, "oracle": want}
    res.seconds = time.perf_counter() - start
    return res


def _random_model(seed, size=8, classes=3, width=6):
    """Toy model with perturbed (not renormalised) weights, bounds recomputed."""
    rng = np.random.default_rng(seed + 1000)
    model = lipnet.build_toy_model(1, classes, width, blocks=1, size=(size, size), seed=seed)
    for layer in lipnet.iter_layers(model.layers):
        if layer.weight is not None:
            layer.weight = layer.weight * rng.uniform(0.5, 2.0) + 0.05 * rng.standard_normal(layer.weight.shape)
            layer.bias = 0.1 * rng.standard_normal(layer.bias.shape)
        if layer.running_mean is not None:
            layer.running_mean = 0.1 * rng.standard_normal(layer.running_mean.shape)
    lipnet.refresh_bounds(model)
    return model


def lipschitz_pairs(model, pairs: int, seed: int = 0, rtol: float = 1e-6) -> SuiteResult:
    """||f(x1) - f(x2)|| <= L ||x1 - x2|| (1 + rtol) over random pairs, near and far."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("lipschitz", pairs)
    start = time.perf_counter()
    L = lipnet.lipschitz_upper_bound(model)
    h, w = model.size
    shape = (model.input_channels, h, w)
    x1 = rng.uniform(0, 1, size=(pairs,) + shape)
    scales = 10.0 ** rng.uniform(-4, 0, size=(pairs, 1, 1, 1))
    x2 = np.clip(x1 + scales * rng.standard_normal(x1.shape), 0, 1)
    far = rng.random(pairs) < 0.3
    x2[far] = rng.uniform(0, 1, size=(int(far.sum()),) + shape)
    worst = 0.0
    for lo in range(0, pairs, 100):
        f1 = lipnet.forward(model, x1[lo:lo + 100])
        f2 = lipnet.forward(model, x2[lo:lo + 100])
        dout = np.sqrt(((f1 - f2) ** 2).sum(axis=(1, 2, 3)))
        din = np.sqrt(((x1[lo:lo + 100] - x2[lo:lo + 100]) ** 2).sum(axis=(1, 2, 3)))
        ratio = dout / (L * din)
        worst = max(worst, float(ratio.max()))
        bad = dout > L * din * (1 + rtol)
        res.failures += int(bad.sum())
    res.max_error = worst
    res.details = {"lipschitz_bound": L, "max_ratio_to_bound": worst}
    res.seconds = time.perf_counter() - start
    return res


def gradient_check(model, seed: int, h: float = 1e-4, objective: str = "masked_ce") -> float:
    """Relative error between the analytic input gradient and central differences.

    Compared along 8 random unit directions: max |fd - g.v| / max(|g|, tiny).
    """
    rng = np.random.default_rng(seed)
    hh, ww = model.size
    x = rng.uniform(0.1, 0.9, size=(model.input_channels, hh, ww))
    labels = rng.integers(0, model.classes, size=(hh, ww))
    if objective == "masked_ce":
        mask = rng.random((hh, ww)) < 0.7
        obj = lipnet.CrossEntropy(labels, temperature=3.0, mask=mask)
    else:
        obj = lipnet.SumMargin(labels)
    g = lipnet.input_gradient(model, x, obj)
    scale = max(float(np.sqrt((g ** 2).sum())), 1e-12)
    worst = 0.0
    for _ in range(8):
        v = rng.standard_normal(x.shape)
        v /= np.sqrt((v ** 2).sum())
        plus, _ = obj(lipnet.forward(model, x + h * v)[None])
        minus, _ = obj(lipnet.forward(model, x - h * v)[None])
        fd = (plus - minus) / (2 * h)
        worst = max(worst, abs(fd - float((g * v).sum())) / scale)
    return worst


def gradient_sweep(seeds, tol: float = 1e-3) -> SuiteResult:
    res = SuiteResult("gradient", len(seeds))
    start = time.perf_counter()
    errors = []
    for s in seeds:
        err = gradient_check(_random_model(s), s)
        errors.append(err)
        if err > tol:
            res.failures += 1
            if res.first_failure is None:
                res.first_failure = {"seed": s, "relative_error": err}
    res.max_error = max(errors) if errors else 0.0
    res.seconds = time.perf_counter() - start
    return res


def run_all(instances: int = 1000, seed: int = 0) -> list[SuiteResult]:
    return [
        knapsack_sweep(instances, seed),
        iou_sweep(max(1, instances // 2), seed + 1),
        lipschitz_pairs(_random_model(seed), 500, seed + 2),
        gradient_sweep([seed + i for i in range(5)]),
    ]
