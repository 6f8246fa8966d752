"""Variance monitoring: drifts, local states, overestimators, sync policies.

The monitored quantity is the model variance across workers,

    Var = (1/K) sum_k ||w_k - w_bar||^2,

which decomposes over drifts u_k = w_k - w_sync into
mean(||u_k||^2) - ||u_bar||^2.  Each worker ships a small local state
(its squared drift norm plus a low-dimensional summary of the drift); an
H function computed from the averaged states overestimates the variance,
deterministically for the scalar-projection summary and probabilistically
for the sketch summary.  Synchronization fires when H exceeds the
threshold.  Baseline policies (every step, fixed period, periodic server
optimization) share the same strategy interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import sketch as sk
from .learner import OptimizerState, apply_gradient, make_optimizer
from .vecmath import ParamVector, average, dot, norm_sq

Drift = ParamVector

# Unit direction used by the scalar-projection summary; None until two
# synchronization points exist (initialization counts as the first).
Xi = Optional[ParamVector]

XI_DEGENERATE_NORM = 1e-12


@dataclass
class LocalState:
    """Per-worker pair (||u||^2, summary); mergeable by averaging."""

    drift_norm_sq: float
    summary: Union[sk.AmsSketch, float]

    @property
    def is_sketch(self) -> bool:
        return isinstance(self.summary, sk.AmsSketch)


@dataclass
class AveragedState:
    mean_drift_norm_sq: float
    mean_summary: Union[sk.AmsSketch, float]

    @property
    def is_sketch(self) -> bool:
        return isinstance(self.mean_summary, sk.AmsSketch)


def variance_exact(models: list[ParamVector]) -> float:
    """Mean squared distance of the vectors from their average."""
    if len(models) == 0:
        raise ValueError("variance of an empty list")
    mean = average(models)
    total = 0.0
    for w in models:
        total += norm_sq(w - mean)
    return total / len(models)


def variance_from_drifts(mean_drift_norm_sq: float,
                         mean_drift: ParamVector) -> float:
    """Variance via the drift decomposition: mean||u||^2 - ||u_bar||^2."""
    return mean_drift_norm_sq - norm_sq(mean_drift)


def make_local_state_sketch(u: Drift, t: sk.SketchTransform) -> LocalState:
    return LocalState(drift_norm_sq=norm_sq(u), summary=sk.apply(t, u))


def make_local_state_linear(u: Drift, xi: Xi) -> LocalState:
    summary = 0.0 if xi is None else dot(xi, u)
    return LocalState(drift_norm_sq=norm_sq(u), summary=summary)


def average_states(states: list[LocalState]) -> AveragedState:
    """Elementwise mean of same-kind states, in ascending list order."""
    if len(states) == 0:
        raise ValueError("average of an empty state list")
    kinds = {s.is_sketch for s in states}
    if len(kinds) != 1:
        raise ValueError("cannot average sketch and scalar states together")
    k = len(states)
    mean_norm = sum(s.drift_norm_sq for s in states) / k
    if states[0].is_sketch:
        acc = states[0].summary
        for s in states[1:]:
            acc = sk.sketch_add(acc, s.summary)
        mean_summary: Union[sk.AmsSketch, float] = sk.sketch_scale(1.0 / k, acc)
    else:
        mean_summary = sum(s.summary for s in states) / k
    return AveragedState(mean_drift_norm_sq=mean_norm, mean_summary=mean_summary)


def h_sketch(avg: AveragedState, eps: float) -> float:
    """Sketch-based overestimate: mean||u||^2 - M2(mean sketch)/(1+eps)."""
    if not avg.is_sketch:
        raise ValueError("h_sketch needs sketch-kind averaged state")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return avg.mean_drift_norm_sq - sk.m2_estimate(avg.mean_summary) / (1.0 + eps)


def h_linear(avg: AveragedState) -> float:
    """Projection-based overestimate: mean||u||^2 - (mean <xi,u>)^2."""
    if avg.is_sketch:
        raise ValueError("h_linear needs scalar-kind averaged state")
    return avg.mean_drift_norm_sq - avg.mean_summary ** 2


def compute_xi(w_sync_now: ParamVector, w_sync_prev: ParamVector) -> Xi:
    """Unit vector along the last synchronization displacement.

    Returns None when the displacement is numerically zero.
    """
    diff = w_sync_now - w_sync_prev
    norm = float(np.sqrt(norm_sq(diff)))
    if norm < XI_DEGENERATE_NORM:
        return None
    return diff / norm


# --- synchronization strategies -------------------------------------------

@dataclass(frozen=True)
class SketchFda:
    theta: float
    rows: int = 5
    cols: int = 250
    seed: int = 0

    @property
    def eps(self) -> float:
        return sk.relative_error(self.cols)


@dataclass(frozen=True)
class LinearFda:
    theta: float


@dataclass(frozen=True)
class Synchronous:
    pass


@dataclass(frozen=True)
class LocalSgd:
    tau: int


@dataclass(frozen=True)
class FedOpt:
    """Periodic rounds: E local epochs, then a server-side optimizer step
    on the pseudo-gradient (the negated mean client delta)."""

    server_kind: str = "sgd-momentum"   # sgd-momentum | adam
    server_lr: float = 0.316
    server_momentum: float = 0.9
    server_beta1: float = 0.9
    server_beta2: float = 0.999
    server_eps: float = 1e-7
    local_epochs: int = 1


SyncStrategy = Union[SketchFda, LinearFda, Synchronous, LocalSgd, FedOpt]


def validate_strategy(strategy: SyncStrategy) -> None:
    if isinstance(strategy, (SketchFda, LinearFda)):
        if strategy.theta < 0:
            raise ValueError("theta must be >= 0")
        if isinstance(strategy, SketchFda) and (strategy.rows < 1 or strategy.cols < 1):
            raise ValueError("sketch dimensions must be positive")
    elif isinstance(strategy, LocalSgd):
        if strategy.tau < 1:
            raise ValueError("tau must be >= 1")
    elif isinstance(strategy, FedOpt):
        if strategy.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if strategy.server_kind not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown server optimizer {strategy.server_kind!r}")


@dataclass
class StepContext:
    """Per-step facts a strategy may condition on."""

    h_value: Optional[float] = None
    steps_since_sync: int = 0
    local_epoch_steps: int = 0   # steps making up one local epoch


def should_sync(strategy: SyncStrategy, ctx: StepContext) -> bool:
    """Decide synchronization for this step.

    Variance-monitoring strategies fire on strict H > theta (ties keep
    training locally); the fixed-period baselines fire on their counters.
    """
    if isinstance(strategy, Synchronous):
        return True
    if isinstance(strategy, (SketchFda, LinearFda)):
        if ctx.h_value is None:
            raise ValueError("variance-monitoring strategy needs an H value")
        return ctx.h_value > strategy.theta
    if isinstance(strategy, LocalSgd):
        return ctx.steps_since_sync == strategy.tau
    if isinstance(strategy, FedOpt):
        return ctx.steps_since_sync == strategy.local_epochs * ctx.local_epoch_steps
    raise TypeError(f"unknown strategy {strategy!r}")


def make_server_optimizer(strategy: FedOpt, d: int) -> OptimizerState:
    if strategy.server_kind == "sgd-momentum":
        return make_optimizer("sgd-momentum", d, strategy.server_lr,
                              momentum=strategy.server_momentum)
    return make_optimizer("adam", d, strategy.server_lr,
                          beta1=strategy.server_beta1,
                          beta2=strategy.server_beta2, eps=strategy.server_eps)


def fedopt_server_update(global_params: ParamVector,
                         mean_client_delta: ParamVector,
                         server_opt: OptimizerState) -> ParamVector:
    """Apply the server optimizer to the pseudo-gradient -mean_client_delta.

    With a plain SGD server at lr 1 this reduces to averaging the client
    models (global + mean delta).
    """
    return apply_gradient(server_opt, global_params, -mean_client_delta)
