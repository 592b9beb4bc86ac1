"""Training-step machinery.

Newly added ("candidate") experts take a damped SGD step

    delta_w = -lr * g / (1 + 2 * lr * penalty * n * pi)

where pi is the expert's routing mass on the batch and n counts the
candidates actually changing this step.  That scalar damping is the exact
minimiser of the local quadratic model with a routing-weighted displacement
penalty; `proximal_argmin` solves the same quadratic generically (assemble
the Hessian, solve the stationarity system) and exists to validate the
closed form.  Routers and any other plain block take an undamped step.

The damping factors form a diagonal soft projection of the concatenated
gradient: identity on old blocks, 1/(1 + 2*lr*penalty*n*pi_j) on new block
j.  With penalty == 0 every factor is exactly 1.0 and the step is plain SGD
bit for bit.

An AdamW variant is provided for end-to-end runs; the equivalence claims
above are only asserted for SGD.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

_METHODS = ("sgd", "adamw")


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float
    penalty: float = 0.0
    method: str = "sgd"
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0.0:
            raise ConfigError(f"optimizer.learning_rate: must be positive, got {self.learning_rate}")
        if not np.isfinite(self.penalty) or self.penalty < 0.0:
            raise ConfigError(f"optimizer.penalty: must be >= 0, got {self.penalty}")
        if self.method not in _METHODS:
            raise ConfigError(f"optimizer.method: unknown method {self.method!r}")
        if not np.isfinite(self.weight_decay) or self.weight_decay < 0.0:
            raise ConfigError(f"optimizer.weight_decay: must be >= 0, got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("optimizer.beta1/beta2: must lie in [0, 1)")


def step_scale(pi: float, n: int, cfg: OptimConfig) -> float:
    """Damping factor applied to a candidate block's step; lies in (0, 1]."""
    if pi < 0.0 or pi > 1.0 + 1e-12:
        raise NumericError(f"routing mass must lie in [0, 1], got {pi}")
    if n < 0:
        raise NumericError(f"change count must be >= 0, got {n}")
    return 1.0 / (1.0 + 2.0 * cfg.learning_rate * cfg.penalty * n * pi)


@dataclass
class SoftProjection:
    """Diagonal block form of the damped step: identity on the old/plain
    block, per-candidate scale on each new block."""

    new_scales: np.ndarray  # one scale per candidate block

    def apply(self, plain_grads: list[np.ndarray],
              new_grads: list[list[np.ndarray]]) -> tuple[list[np.ndarray], list[list[np.ndarray]]]:
        if len(new_grads) != self.new_scales.size:
            raise DimensionError(
                f"{len(new_grads)} new blocks but {self.new_scales.size} scales"
            )
        proj_plain = [g.copy() for g in plain_grads]
        proj_new = [[self.new_scales[j] * g for g in grads] for j, grads in enumerate(new_grads)]
        return proj_plain, proj_new


def soft_projection(pis, n: int, cfg: OptimConfig) -> SoftProjection:
    scales = np.array([step_scale(float(p), n, cfg) for p in pis])
    return SoftProjection(new_scales=scales)


def block_dot(old_block: np.ndarray, new_block: np.ndarray) -> float:
    """Inner product of the two step components embedded in the concatenated
    parameter space: [old, 0] against [0, new].  Identically zero; kept as a
    checkable witness that the blocks never mix."""
    a = np.concatenate([np.ravel(old_block), np.zeros(np.size(new_block))])
    b = np.concatenate([np.zeros(np.size(old_block)), np.ravel(new_block)])
    return float(a @ b)


@dataclass
class PenaltyState:
    """Snapshots of candidate parameters after the previous step, plus the
    change count of that step; feeds the displacement penalty value."""

    prev: list[list[np.ndarray]]
    change_count: int = 0


def init_penalty_state(candidates: list[list[np.ndarray]]) -> PenaltyState:
    return PenaltyState(prev=[[p.copy() for p in group] for group in candidates])


def penalty_value(pis, live: list[list[np.ndarray]], state: PenaltyState) -> float:
    """Displacement penalty n * sum_j pi_j * ||w_j - w_j_prev||^2 for one layer."""
    if len(live) != len(state.prev) or len(live) != len(pis):
        raise DimensionError("candidate count mismatch between live params, state, and pis")
    total = 0.0
    for pi, group, prev_group in zip(pis, live, state.prev):
        sq = 0.0
        for p, q in zip(group, prev_group):
            d = p - q
            sq += float((d * d).sum())
        total += float(pi) * sq
    return state.change_count * total


def total_loss(contrastive: float, aux: float, cfg: OptimConfig) -> float:
    val = contrastive + cfg.penalty * aux
    if not np.isfinite(val):
        raise NumericError(f"total loss is non-finite ({contrastive} + {cfg.penalty} * {aux})")
    return val


@dataclass
class StepReport:
    change_count: int
    scales: list[float]


def _any_nonzero(grads: list[np.ndarray]) -> bool:
    return any(np.any(g != 0.0) for g in grads)


def apply_step(candidates: list[list[np.ndarray]],
               candidate_grads: list[list[np.ndarray]],
               pis,
               plain: list[np.ndarray],
               plain_grads: list[np.ndarray],
               state: PenaltyState,
               cfg: OptimConfig) -> StepReport:
    """One SGD step, in place: damped on candidate blocks, plain elsewhere.

    The change count n is established before any update: a candidate counts
    as changing when it carries routing mass and a nonzero gradient.  State
    snapshots are refreshed to the post-step values.
    """
    if len(candidates) != len(candidate_grads) or len(candidates) != len(pis):
        raise DimensionError("candidate params, grads, and pis must align")
    if len(plain) != len(plain_grads):
        raise DimensionError("plain params and grads must align")
    n = sum(
        1 for pi, grads in zip(pis, candidate_grads)
        if pi > 0.0 and _any_nonzero(grads)
    )
    scales = []
    for pi, group, grads in zip(pis, candidates, candidate_grads):
        s = step_scale(float(pi), n, cfg)
        scales.append(s)
        coef = cfg.learning_rate * s
        for p, g in zip(group, grads):
            p -= coef * g
    for p, g in zip(plain, plain_grads):
        p -= cfg.learning_rate * g
    state.prev = [[p.copy() for p in group] for group in candidates]
    state.change_count = n
    return StepReport(change_count=n, scales=scales)


def proximal_argmin(g: np.ndarray, w_prev: np.ndarray, pi: float, n: int,
                    cfg: OptimConfig) -> np.ndarray:
    """Independent oracle for the damped step.

    Minimises  g . (w - w_prev) + ||w - w_prev||^2 / (2 lr)
               + penalty * n * pi * ||w - w_prev||^2
    by assembling the quadratic's Hessian and solving the stationarity
    system, rather than using the closed-form scalar damping.
    """
    gv = np.asarray(g, dtype=np.float64)
    wv = np.asarray(w_prev, dtype=np.float64)
    if gv.shape != wv.shape:
        raise DimensionError(f"gradient shape {gv.shape} vs parameter shape {wv.shape}")
    dim = gv.size
    hess = (1.0 / cfg.learning_rate + 2.0 * cfg.penalty * n * pi) * np.eye(dim)
    delta = np.linalg.solve(hess, -gv.ravel())
    return wv + delta.reshape(wv.shape)


@dataclass
class AdamWState:
    """First/second moments per parameter array, keyed by array identity order."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def init_adamw_state(params: list[np.ndarray]) -> AdamWState:
    return AdamWState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def apply_step_adamw(params: list[np.ndarray], grads: list[np.ndarray],
                     scales: list[float], state: AdamWState, cfg: OptimConfig) -> None:
    """AdamW with decoupled weight decay; each block's step is additionally
    multiplied by its damping scale (1.0 for plain blocks).  Heuristic
    extension of the SGD damping; not covered by the equivalence oracle."""
    if len(params) != len(grads) or len(params) != len(scales):
        raise DimensionError("params, grads, and scales must align")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, s, m, v in zip(params, grads, scales, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p -= cfg.learning_rate * s * step
        if cfg.weight_decay > 0.0:
            p -= cfg.learning_rate * cfg.weight_decay * p
