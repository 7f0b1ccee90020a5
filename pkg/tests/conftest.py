import time

import numpy as np
import pytest

from segcert import attacks, certify, lipnet

# seeded toy pipeline shared by the lipnet, attack and acceptance tests
TRAIN_SEED = 0
TEST_SEED = 1
TRAIN_COUNT = 200
TEST_COUNT = 50
STEPS = 500


@pytest.fixture(scope="session")
def toy_data():
    train = lipnet.generate_synthetic_dataset(TRAIN_SEED, TRAIN_COUNT, 16, 2)
    test = lipnet.generate_synthetic_dataset(TEST_SEED, TEST_COUNT, 16, 2)
    return train, test


@pytest.fixture(scope="session")
def trained_model(toy_data):
    train, _ = toy_data
    model = lipnet.build_toy_model(1, 2, width=8, blocks=2, size=(16, 16), seed=TRAIN_SEED)
    return lipnet.train_toy(model, train, STEPS, lr=0.01, temperature=5.0, seed=TRAIN_SEED)


SANDWICH_EPS = (0.0, 0.05, 0.1, 0.2, 0.4)


@pytest.fixture(scope="session")
def sandwich(toy_data):
    """Train, attack every test sample over the budget grid and certify it.

    Returns ``(crpa, attacked, seconds)`` with per-sample rows; the timing
    covers training, attack and certification.
    """
    start = time.perf_counter()
    train, test = toy_data
    model = lipnet.build_toy_model(1, 2, width=8, blocks=2, size=(16, 16), seed=TRAIN_SEED)
    model = lipnet.train_toy(model, train, STEPS, lr=0.01, temperature=5.0, seed=TRAIN_SEED)
    sweep = attacks.empirical_accuracy_under_attack(model, test, SANDWICH_EPS, attacks.AttackConfig(seed=0))
    xs, ys = lipnet.stack_dataset(test)
    logits = lipnet.forward(model, xs)
    cfg = certify.CertConfig(model.global_lip, 2.0, SANDWICH_EPS)
    crpa = np.array([certify.crpa(lg, y, cfg) for lg, y in zip(logits, ys)])
    return crpa, sweep.per_sample, time.perf_counter() - start
