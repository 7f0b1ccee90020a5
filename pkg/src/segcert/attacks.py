"""l2 projected gradient attacks on the toy network.

They give empirical upper bounds on worst-case pixel accuracy, to be read
against the certified lower bounds.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from segcert.lipnet import CrossEntropy, SumMargin, ToyModel, forward, value_and_input_gradient

OBJECTIVES = ("maximize_misclassified", "untargeted_margin")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    steps: int = 100
    step_size: float | None = None  # defaults to 2.5 * epsilon / steps
    restarts: int = 3
    objective: str = "maximize_misclassified"
    temperature: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    @property
    def step(self) -> float:
        return 2.5 * self.epsilon / self.steps if self.step_size is None else self.step_size


def _accuracy(logits, labels, valid):
    preds = logits.argmax(axis=1)
    hits = (preds == labels) & valid
    return hits.sum(axis=(1, 2)) / valid.sum()


def project(x, origin, epsilon, rounds: int = 2):
    """Clip to [0, 1] then pull back into the l2 ball, twice.

    Each row of ``x`` is one candidate around the single ``origin``.
    """
    for _ in range(rounds):
        x = np.clip(x, 0.0, 1.0)
        delta = x - origin
        norms = np.sqrt((delta ** 2).sum(axis=tuple(range(1, x.ndim))))
        scale = np.minimum(1.0, epsilon / np.maximum(norms, 1e-300))
        x = origin + delta * scale.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.clip(x, 0.0, 1.0)


def _random_ball(rng, n, shape, epsilon):
    d = rng.standard_normal((n,) + shape)
    d /= np.sqrt((d ** 2).sum(axis=tuple(range(1, d.ndim)), keepdims=True))
    radius = epsilon * rng.uniform(0, 1, size=(n,) + (1,) * len(shape))
    return d * radius


def pgd_l2(model: ToyModel, image, labels, cfg: AttackConfig, init=None, ignore_label=None):
    """Best adversarial image found by normalised-gradient PGD.

    Restarts run as one batch: the first starts at ``init`` (or the clean
    image), the others at random points of the ball. Returns
    ``(adversarial, attacked_accuracy)``.
    """
    x0 = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels)
    if x0.ndim != 3 or labels.shape != x0.shape[1:]:
        raise ValueError(f"image {x0.shape} and labels {labels.shape} do not match")
    valid = np.ones(labels.shape, bool) if ignore_label is None else labels != ignore_label
    safe_labels = np.where(valid, labels, 0)
    if cfg.epsilon == 0:
        acc = float(_accuracy(forward(model, x0[None]), safe_labels, valid)[0])
        return x0.copy(), acc

    rng = np.random.default_rng(cfg.seed)
    start = x0 if init is None else np.asarray(init, dtype=np.float64)
    x = np.repeat(x0[None], cfg.restarts, axis=0)
    x[0] = start
    if cfg.restarts > 1:
        x[1:] = x0 + _random_ball(rng, cfg.restarts - 1, x0.shape, cfg.epsilon)
    x = project(x, x0, cfg.epsilon)

    best_x, best_acc = x0.copy(), np.inf
    for it in range(cfg.steps + 1):
        logits = forward(model, x)
        preds = logits.argmax(axis=1)
        acc = _accuracy(logits, safe_labels, valid)
        i = int(np.argmin(acc))
        if acc[i] < best_acc:
            best_acc, best_x = float(acc[i]), x[i].copy()
        if it == cfg.steps:
            break
        still = (preds == safe_labels) & valid
        if cfg.objective == "maximize_misclassified":
            objective = CrossEntropy(safe_labels, cfg.temperature, mask=still)
            sign = 1.0
        else:
            objective = SumMargin(safe_labels, mask=still)
            sign = -1.0
        _, _, grad = value_and_input_gradient(model, x, objective)
        norms = np.sqrt((grad ** 2).sum(axis=(1, 2, 3), keepdims=True))
        x = x + sign * cfg.step * grad / np.maximum(norms, 1e-12)
        x = project(x, x0, cfg.epsilon)
    return best_x, best_acc


@dataclass
class AttackSweep:
    epsilons: list[float]
    per_sample: np.ndarray  # (n_samples, n_eps) attacked pixel accuracy
    adversarial: list[list[np.ndarray]] | None = None

    @property
    def mean(self) -> list[float]:
        return [float(v) for v in self.per_sample.mean(axis=0)]


def attack_sample(model, image, labels, epsilons, cfg: AttackConfig, ignore_label=None, keep=False):
    """Attack one image over a budget grid, warm-starting each budget from the last.

    A solution for a smaller budget stays feasible for a larger one, so the
    reported accuracy never rises with epsilon.
    """
    x0 = np.asarray(image, dtype=np.float64)
    order = np.argsort(epsilons, kind="stable")
    accs = np.empty(len(epsilons))
    advs: list = [None] * len(epsilons)
    prev_x, prev_eps, prev_acc = None, 0.0, np.inf
    for j in order:
        eps = float(epsilons[j])
        init = None
        if prev_x is not None and prev_eps > 0:
            init = x0 + (prev_x - x0) * (eps / prev_eps)
        run = AttackConfig(eps, cfg.steps, cfg.step_size, cfg.restarts, cfg.objective,
                           cfg.temperature, cfg.seed)
        x, acc = pgd_l2(model, x0, labels, run, init=init, ignore_label=ignore_label)
        if prev_x is not None and prev_acc <= acc:
            x, acc = prev_x, prev_acc
        accs[j], advs[j] = acc, x
        prev_x, prev_eps, prev_acc = x, eps, acc
    return accs, (advs if keep else None)


def empirical_accuracy_under_attack(model: ToyModel, dataset, epsilons, cfg: AttackConfig,
                                    ignore_label=None, keep_adversarial=False) -> AttackSweep:
    """Mean attacked pixel accuracy per budget over a list of samples."""
    samples = list(dataset)
    if not samples:
        raise ValueError("empty dataset")
    rows, advs = [], []
    for s in samples:
        accs, adv = attack_sample(model, s.image, s.mask, epsilons, cfg, ignore_label, keep_adversarial)
        rows.append(accs)
        advs.append(adv)
    return AttackSweep([float(e) for e in epsilons], np.array(rows),
                       advs if keep_adversarial else None)
