"""Transition kernels and schedules for absorbing-state categorical diffusion.

All matrices use the column convention: entry (i, j) is the probability of
moving to state i given previous state j, so every column sums to 1 and a
forward marginal is ``cum[t] @ onehot(x0)``.  The absorbing state is always
the last index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .cadseq import CadSequence, ParamKind
from .config import ScheduleConfig

N_COMMAND_STATES = 6
COMMAND_ABSORB = 6          # state index of the command absorbing symbol
N_VALUE_STATES = 256
VALUE_ABSORB = 256          # state index of the parameter absorbing symbol

COLUMN_TOL = 1e-9

PARAM_KINDS = (ParamKind.COORDINATE, ParamKind.DIMENSIONAL, ParamKind.BOOLEAN)


class KernelError(ValueError):
    pass


class NegativeMass(KernelError):
    pass


class NonStochasticBase(KernelError):
    pass


class DimensionMismatch(KernelError):
    pass


class InfeasibleSchedule(KernelError):
    pass


class EmptyValidSet(KernelError):
    pass


def _check_column_stochastic(entries: np.ndarray, what: str) -> None:
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise DimensionMismatch(f"{what}: expected a square matrix, got {entries.shape}")
    if entries.min() < -COLUMN_TOL or entries.max() > 1 + COLUMN_TOL:
        raise NonStochasticBase(f"{what}: entries outside [0, 1]")
    sums = entries.sum(axis=0)
    err = np.abs(sums - 1.0).max()
    if err > COLUMN_TOL:
        raise NonStochasticBase(f"{what}: column sums deviate from 1 by {err:.3e}")


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Column-stochastic transition operator with a terminal absorbing state."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        _check_column_stochastic(entries, "transition matrix")
        absorb = entries.shape[0] - 1
        col = entries[:, absorb]
        if col[absorb] != 1.0 or np.any(col[:absorb] != 0.0):
            raise NonStochasticBase("absorbing column must be the unit vector")
        entries = entries.copy()
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def n_states(self) -> int:
        return self.entries.shape[0]

    @property
    def absorb(self) -> int:
        return self.entries.shape[0] - 1


@dataclass(frozen=True)
class EmpiricalPrior:
    """Token frequencies over the observed valid set of a parameter kind."""

    valid_set: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if not self.valid_set:
            raise EmptyValidSet("empirical prior needs at least one valid token")
        if len(self.valid_set) != len(self.probs):
            raise KernelError("valid_set and probs must align")
        if len(set(self.valid_set)) != len(self.valid_set):
            raise KernelError("valid_set has duplicates")
        total = float(sum(self.probs))
        if not np.isclose(total, 1.0, atol=1e-9):
            raise KernelError(f"probs sum to {total}, expected 1")
        if min(self.probs) < 0:
            raise KernelError("probs must be nonnegative")

    @classmethod
    def from_counts(cls, counts: dict[int, int]) -> "EmpiricalPrior":
        items = sorted((tok, c) for tok, c in counts.items() if c > 0)
        if not items:
            raise EmptyValidSet("no observed tokens")
        total = sum(c for _, c in items)
        return cls(
            tuple(tok for tok, _ in items),
            tuple(c / total for _, c in items),
        )

    @classmethod
    def from_sequences(cls, seqs: Iterable[CadSequence]) -> "EmpiricalPrior":
        """Count boolean-kind tokens across a corpus."""
        counts: dict[int, int] = {}
        for seq in seqs:
            for _, slot in seq.slots():
                if slot.kind == ParamKind.BOOLEAN:
                    counts[slot.value] = counts.get(slot.value, 0) + 1
        return cls.from_counts(counts)


def build_command_matrix(
    alpha: float, beta: float, gamma: float | None = None, k: int = N_COMMAND_STATES
) -> TransitionMatrix:
    """Uniform-mixing absorbing matrix over k command states plus absorbing.

    Valid columns keep their state with alpha + beta, move to any valid
    state with beta, and absorb with gamma = 1 - alpha - k*beta.
    """
    if alpha < 0 or beta < 0:
        raise NegativeMass("alpha and beta must be nonnegative")
    derived = 1.0 - alpha - k * beta
    if derived < -1e-12:
        raise NegativeMass(f"absorbing mass 1 - alpha - k*beta = {derived:.3e} < 0")
    derived = max(derived, 0.0)
    if gamma is not None and abs(gamma - derived) > 1e-9:
        raise KernelError(f"gamma={gamma} inconsistent with 1 - alpha - k*beta={derived}")
    m = np.full((k + 1, k + 1), beta, dtype=np.float64)
    np.fill_diagonal(m, alpha + beta)
    m[k, :] = derived
    m[:, k] = 0.0
    m[k, k] = 1.0
    return TransitionMatrix(m)


def build_gaussian_base(k: int = N_VALUE_STATES, sigma: float = 1.0,
                        alpha: float = 0.0) -> np.ndarray:
    """Locality-preserving kernel: column j is a discrete Gaussian around j.

    Column j = (1 - alpha) * softmax_i(-(i-j)^2 / (2 sigma^2)) + alpha * I.
    """
    if sigma <= 0:
        raise KernelError("sigma must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise KernelError("alpha must be in [0, 1]")
    idx = np.arange(k, dtype=np.float64)
    logw = -((idx[:, None] - idx[None, :]) ** 2) / (2.0 * sigma * sigma)
    w = np.exp(logw)
    w /= w.sum(axis=0, keepdims=True)
    return (1.0 - alpha) * w + alpha * np.eye(k)


def build_uniform_base(k: int = N_VALUE_STATES, alpha: float = 0.0) -> np.ndarray:
    """Structure-free ablation kernel: (1 - alpha)/k everywhere plus alpha * I."""
    if not 0.0 <= alpha <= 1.0:
        raise KernelError("alpha must be in [0, 1]")
    return np.full((k, k), (1.0 - alpha) / k) + alpha * np.eye(k)


def build_scale_base(k: int = N_VALUE_STATES, mu: float = 1.0,
                     alpha: float = 0.0) -> np.ndarray:
    """Relative-perturbation kernel: proximity measured by (i-j)/(i+j).

    Token v is treated as the 1-based value v+1 so the ratio is defined
    everywhere; the unnormalized weight is invariant under (i, j) -> (ci, cj).
    """
    if mu <= 0:
        raise KernelError("mu must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise KernelError("alpha must be in [0, 1]")
    val = np.arange(1, k + 1, dtype=np.float64)
    ratio = (val[:, None] - val[None, :]) / (val[:, None] + val[None, :])
    w = np.exp(-mu * ratio**2)
    w /= w.sum(axis=0, keepdims=True)
    return (1.0 - alpha) * w + alpha * np.eye(k)


def build_prior_base(prior: EmpiricalPrior, alpha: float,
                     k: int = N_VALUE_STATES) -> np.ndarray:
    """Prior-preserving kernel over a restricted valid set.

    Within the valid set a token survives with alpha + (1-alpha)*p[i] and
    moves to token i with (1-alpha)*p[i]; columns outside the valid set
    project straight onto the prior; rows outside the valid set are zero.
    """
    if not 0.0 <= alpha <= 1.0:
        raise KernelError("alpha must be in [0, 1]")
    if max(prior.valid_set) >= k or min(prior.valid_set) < 0:
        raise KernelError("valid_set exceeds the state space")
    p = np.zeros(k)
    for tok, prob in zip(prior.valid_set, prior.probs):
        p[tok] = prob
    valid = np.zeros(k, dtype=bool)
    valid[list(prior.valid_set)] = True
    m = np.zeros((k, k))
    m[valid, :] = p[valid, None]                       # project onto the prior
    m[np.ix_(valid, valid)] *= (1.0 - alpha)           # scaled within valid columns
    m[np.ix_(valid, valid)] += alpha * np.eye(int(valid.sum()))
    return m


def wrap_absorbing(base: np.ndarray, gamma: float) -> TransitionMatrix:
    """Attach an absorbing state: [[(1-gamma) base, 0], [gamma 1^T, 1]]."""
    base = np.asarray(base, dtype=np.float64)
    _check_column_stochastic(base, "base kernel")
    if not 0.0 <= gamma <= 1.0:
        raise KernelError("gamma must be in [0, 1]")
    k = base.shape[0]
    m = np.zeros((k + 1, k + 1))
    m[:k, :k] = (1.0 - gamma) * base
    m[k, :k] = gamma
    m[k, k] = 1.0
    return TransitionMatrix(m)


def accumulate(steps: Sequence[TransitionMatrix]) -> list[TransitionMatrix]:
    """Cumulative operators cum[t] = step[t] @ cum[t-1], cum[0] = step[0]."""
    if not steps:
        return []
    n = steps[0].n_states
    out: list[TransitionMatrix] = []
    acc = steps[0].entries
    out.append(steps[0])
    for q in steps[1:]:
        if q.n_states != n:
            raise DimensionMismatch(f"matrix sizes differ: {q.n_states} vs {n}")
        acc = q.entries @ acc
        out.append(TransitionMatrix(acc))
    return out


@dataclass(frozen=True, eq=False)
class ChainMatrices:
    """Per-step and cumulative operators of one corruption chain."""

    steps: tuple[TransitionMatrix, ...]
    cum: tuple[TransitionMatrix, ...]

    @property
    def n_states(self) -> int:
        return self.steps[0].n_states

    def step_stack(self) -> np.ndarray:
        return np.stack([m.entries for m in self.steps])

    def cum_stack(self) -> np.ndarray:
        return np.stack([m.entries for m in self.cum])


@dataclass(frozen=True, eq=False)
class TransitionSchedule:
    """All per-step coefficients and matrix chains of a forward process."""

    steps: int
    config: ScheduleConfig
    prior: EmpiricalPrior | None
    alpha_cmd: np.ndarray
    beta_cmd: np.ndarray
    gamma_cmd: np.ndarray
    alpha_param: np.ndarray
    gamma_param: np.ndarray
    gamma_bar: np.ndarray
    command: ChainMatrices
    coordinate: ChainMatrices
    dimensional: ChainMatrices
    boolean: ChainMatrices

    def param_chain(self, kind: ParamKind) -> ChainMatrices:
        if kind == ParamKind.COORDINATE:
            return self.coordinate
        if kind == ParamKind.DIMENSIONAL:
            return self.dimensional
        if kind == ParamKind.BOOLEAN:
            return self.boolean
        raise KeyError(f"no chain for {kind}")


def _check_unit_interval(name: str, arr: np.ndarray) -> None:
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise InfeasibleSchedule(f"{name} leaves [0, 1]")


def _param_base(kernel: str, alpha: float, cfg: ScheduleConfig,
                prior: EmpiricalPrior | None, k: int) -> np.ndarray:
    if kernel == "gaussian":
        return build_gaussian_base(k, sigma=float(np.sqrt(cfg.sigma2)), alpha=alpha)
    if kernel == "scale":
        return build_scale_base(k, mu=cfg.mu, alpha=alpha)
    if kernel == "uniform":
        return build_uniform_base(k, alpha=alpha)
    if kernel == "prior":
        if prior is None:
            raise KernelError("prior kernel requested but no empirical prior given")
        return build_prior_base(prior, alpha=alpha, k=k)
    raise KernelError(f"unknown kernel {kernel!r}")


def make_schedule(
    config: ScheduleConfig,
    prior: EmpiricalPrior | None = None,
    n_value_states: int = N_VALUE_STATES,
    n_command_states: int = N_COMMAND_STATES,
) -> TransitionSchedule:
    """Derive per-step coefficients and build all four matrix chains.

    The cumulative absorbing mass is pinned to (t/T)**gamma_exponent, so the
    per-step absorbing rate is gamma_t = 1 - surv_t / surv_{t-1} and the final
    step absorbs everything exactly.  Base-kernel self-preservation decays
    linearly from 1 to alpha_min.  The command chain spends beta_ratio *
    gamma_t on uniform mixing, capped so its diagonal mass stays nonnegative.
    """
    T = config.steps
    t = np.arange(1, T + 1, dtype=np.float64)
    gamma_bar = (t / T) ** config.gamma_exponent
    surv = 1.0 - gamma_bar
    surv_prev = np.concatenate(([1.0], surv[:-1]))
    if np.any(surv_prev <= 0):
        raise InfeasibleSchedule("cumulative absorbing mass reaches 1 before t=T")
    gamma_step = 1.0 - surv / surv_prev
    alpha_param = 1.0 - (1.0 - config.alpha_min) * t / T
    k = n_command_states
    beta_cmd = np.minimum(config.beta_ratio * gamma_step, (1.0 - gamma_step) / k)
    alpha_cmd = np.maximum(1.0 - gamma_step - k * beta_cmd, 0.0)

    _check_unit_interval("gamma", gamma_step)
    _check_unit_interval("alpha (parameters)", alpha_param)
    _check_unit_interval("alpha (commands)", alpha_cmd)
    _check_unit_interval("beta (commands)", beta_cmd)
    if abs(gamma_bar[-1] - 1.0) != 0.0:
        raise InfeasibleSchedule("cumulative absorbing mass must reach exactly 1 at t=T")

    cmd_steps = tuple(
        build_command_matrix(alpha_cmd[i], beta_cmd[i], k=k) for i in range(T)
    )
    command = ChainMatrices(cmd_steps, tuple(accumulate(cmd_steps)))

    kernels = {
        ParamKind.COORDINATE: config.coordinate_kernel,
        ParamKind.DIMENSIONAL: config.dimensional_kernel,
        ParamKind.BOOLEAN: config.boolean_kernel,
    }
    chains: dict[ParamKind, ChainMatrices] = {}
    for kind, kernel in kernels.items():
        steps = tuple(
            wrap_absorbing(
                _param_base(kernel, alpha_param[i], config, prior, n_value_states),
                gamma_step[i],
            )
            for i in range(T)
        )
        chains[kind] = ChainMatrices(steps, tuple(accumulate(steps)))

    return TransitionSchedule(
        steps=T,
        config=config,
        prior=prior,
        alpha_cmd=alpha_cmd,
        beta_cmd=beta_cmd,
        gamma_cmd=gamma_step,
        alpha_param=alpha_param,
        gamma_param=gamma_step,
        gamma_bar=gamma_bar,
        command=command,
        coordinate=chains[ParamKind.COORDINATE],
        dimensional=chains[ParamKind.DIMENSIONAL],
        boolean=chains[ParamKind.BOOLEAN],
    )
