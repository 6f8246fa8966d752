"""Shared benchmark runs for the acceptance suite.

The headline, heterogeneity, and threshold-sweep criteria all exercise the
same blobs benchmark (logistic regression, K=5, b=32, target 0.95), so the
underlying runs are session-scoped fixtures computed once.
"""

import pytest

from dynavg import cluster_sim as cs
from dynavg.fda_core import LinearFda, SketchFda, Synchronous

BLOBS_D = 20 * 3 + 3
THETA_B = 3.89e-5 * BLOBS_D
BENCH_LR = 0.003
BENCH_SEED = 101
BENCH_SKETCH = {"rows": 3, "cols": 1, "seed": 2}


def bench_config(strategy, scheme=None, audit=False):
    return cs.RunConfig(
        dataset=cs.BlobsSpec(n=6000, p=20, num_classes=3, test_n=2000),
        strategy=strategy,
        workers=5,
        batch_size=32,
        optimizer=cs.OptimizerSpec(kind="sgd", lr=BENCH_LR),
        partition_scheme=scheme or cs.Iid(),
        accuracy_target=0.95,
        max_epochs=600,
        seed=BENCH_SEED,
        audit_variance=audit)


def bench_linear(theta=THETA_B):
    return LinearFda(theta=theta)


def bench_sketch(theta=THETA_B):
    return SketchFda(theta=theta, **BENCH_SKETCH)


@pytest.fixture(scope="session")
def sync_run():
    return cs.run(bench_config(Synchronous()))


@pytest.fixture(scope="session")
def linear_run():
    return cs.run(bench_config(bench_linear(), audit=True))


@pytest.fixture(scope="session")
def sketch_run():
    return cs.run(bench_config(bench_sketch(), audit=True))
