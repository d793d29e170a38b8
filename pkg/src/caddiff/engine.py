"""Forward corruption, exact posteriors, reverse sampling, losses, training.

Scalar reference operations are numpy/float64; the batched paths used by the
training and sampling loops run in torch with the same matrices, promoting
probability algebra to float64 regardless of the network dtype.
"""

from __future__ import annotations

import logging
import time
import weakref
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import torch

from . import denoiser as dn
from .cadseq import (
    MAX_PARAM_TOKENS,
    PAD_CMD,
    PAD_OWNER,
    CadSequence,
    CommandKind,
    ParamKind,
    SLOT_TABLE,
)
from .config import TrainConfig
from .denoiser import CascadeNets
from .kernels import (
    COMMAND_ABSORB,
    VALUE_ABSORB,
    ChainMatrices,
    TransitionSchedule,
)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class EngineError(ValueError):
    pass


class StepOutOfRange(EngineError):
    pass


class ZeroMass(EngineError):
    pass


class NonFiniteLoss(EngineError):
    pass


class NonFiniteGradient(EngineError):
    pass


class DecodeFailure(EngineError):
    pass


class PositionKind(IntEnum):
    """Per-position chain selector; values 0..3 align with ParamKind."""

    COORDINATE = 0
    DIMENSIONAL = 1
    BOOLEAN = 2
    CLAMPED = 3
    COMMAND = 4


PARAM_POSITION_KINDS = (
    PositionKind.COORDINATE,
    PositionKind.DIMENSIONAL,
    PositionKind.BOOLEAN,
)


@dataclass(frozen=True, eq=False)
class TokenSeq:
    """States of one diffusing sequence plus per-position chain selectors."""

    states: np.ndarray
    kinds: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        kinds = np.asarray(self.kinds, dtype=np.int64)
        if states.shape != kinds.shape or states.ndim != 1:
            raise EngineError("states and kinds must be parallel 1-d arrays")
        for i, (s, k) in enumerate(zip(states, kinds)):
            if k == PositionKind.COMMAND and not 0 <= s <= COMMAND_ABSORB:
                raise EngineError(f"position {i}: command state {s} outside 0..6")
            if k in (0, 1, 2) and not 0 <= s <= VALUE_ABSORB:
                raise EngineError(f"position {i}: value state {s} outside 0..256")
        states.setflags(write=False)
        kinds.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "kinds", kinds)

    def __len__(self) -> int:
        return len(self.states)


def _chain_for(schedule: TransitionSchedule, kind: int) -> ChainMatrices:
    if kind == PositionKind.COMMAND:
        return schedule.command
    return schedule.param_chain(ParamKind(int(kind)))


def _check_step(t: int, schedule: TransitionSchedule) -> None:
    if not 1 <= t <= schedule.steps:
        raise StepOutOfRange(f"t={t} outside 1..{schedule.steps}")


# ---------------------------------------------------------------------------
# Scalar reference operations (numpy, float64)

def forward_sample(x0: TokenSeq, t: int, schedule: TransitionSchedule,
                   rng: np.random.Generator) -> TokenSeq:
    """Draw x_t ~ q(x_t | x_0) independently per unclamped position."""
    _check_step(t, schedule)
    out = np.array(x0.states)
    for kind in (PositionKind.COMMAND,) + PARAM_POSITION_KINDS:
        sel = np.flatnonzero(x0.kinds == kind)
        if sel.size == 0:
            continue
        cum = _chain_for(schedule, kind).cum[t - 1].entries
        probs = cum[:, out[sel]].T          # (P, K)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(sel.size) * cdf[:, -1]
        out[sel] = np.minimum(
            (u[:, None] >= cdf).sum(axis=1), cum.shape[0] - 1
        )
    return TokenSeq(out, x0.kinds)


def posterior(x_t: int, x0: int, t: int, kind: PositionKind,
              schedule: TransitionSchedule) -> np.ndarray:
    """Exact q(x_{t-1} | x_t, x_0) for one chain; the point mass on x0 at t=1."""
    _check_step(t, schedule)
    chain = _chain_for(schedule, kind)
    k_total = chain.n_states
    if t == 1:
        out = np.zeros(k_total)
        out[x0] = 1.0
        return out
    row = chain.steps[t - 1].entries[x_t, :]
    col = chain.cum[t - 2].entries[:, x0]
    unnorm = row * col
    z = unnorm.sum()
    if z <= 0.0:
        raise ZeroMass(f"impossible triple (x_t={x_t}, x0={x0}, t={t})")
    return unnorm / z


def _mixture_dist(x_t: int, p0: np.ndarray, t: int, chain: ChainMatrices) -> np.ndarray:
    """Reverse-step distribution: posterior mixed under the model's x0 belief.

    p0 is a probability vector over the valid (non-absorbing) states.
    """
    k_total = chain.n_states
    k_valid = k_total - 1
    if t == 1:
        out = np.zeros(k_total)
        out[:k_valid] = p0
        return out
    marg = chain.cum[t - 1].entries[x_t, :k_valid]       # q(x_t | x0) per x0
    # weights p0 / marg, with survival probabilities floored like the KL
    # probabilities; truly unreachable clean states contribute nothing
    w = np.where(marg > 0, p0 / np.maximum(marg, PROB_FLOOR), 0.0)
    mix = chain.cum[t - 2].entries[:, :k_valid] @ w
    unnorm = chain.steps[t - 1].entries[x_t, :] * mix
    z = unnorm.sum()
    if z <= 0.0:
        raise ZeroMass(f"no clean state can explain x_t={x_t} at t={t}")
    return unnorm / z


def reverse_step(x_t: TokenSeq, x0_logits: np.ndarray, t: int,
                 schedule: TransitionSchedule, rng: np.random.Generator) -> TokenSeq:
    """Sample x_{t-1} per position from the posterior mixture.

    x0_logits has one row per position over that position's valid states;
    clamped positions are copied and their logits ignored.
    """
    _check_step(t, schedule)
    out = np.array(x_t.states)
    for i, kind in enumerate(x_t.kinds):
        if kind == PositionKind.CLAMPED:
            continue
        chain = _chain_for(schedule, int(kind))
        k_valid = chain.n_states - 1
        logits = np.asarray(x0_logits[i], dtype=np.float64)[:k_valid]
        p0 = np.exp(logits - logits.max())
        p0 /= p0.sum()
        dist = _mixture_dist(int(x_t.states[i]), p0, t, chain)
        cdf = np.cumsum(dist)
        out[i] = min(int((rng.random() * cdf[-1] >= cdf).sum()), len(dist) - 1)
    return TokenSeq(out, x_t.kinds)


# ---------------------------------------------------------------------------
# Torch chain tensors

@dataclass(eq=False)
class _ChainTensors:
    qt: torch.Tensor          # (T, K, K)
    qbar: torch.Tensor        # (T, K, K)
    qbar_prev: torch.Tensor   # (T, K, K); identity at index 0


_TORCH_CACHE: "weakref.WeakKeyDictionary[TransitionSchedule, dict]" = (
    weakref.WeakKeyDictionary()
)


def _chain_tensors(schedule: TransitionSchedule, kind: int) -> _ChainTensors:
    per_sched = _TORCH_CACHE.setdefault(schedule, {})
    key = int(kind)
    if key not in per_sched:
        chain = _chain_for(schedule, kind)
        qt = torch.from_numpy(chain.step_stack())
        qbar = torch.from_numpy(chain.cum_stack())
        eye = torch.eye(chain.n_states, dtype=qbar.dtype)
        qbar_prev = torch.cat([eye[None], qbar[:-1]], dim=0)
        per_sched[key] = _ChainTensors(qt, qbar, qbar_prev)
    return per_sched[key]


def _posterior_probs(ct: _ChainTensors, x_t: torch.Tensor, x0: torch.Tensor,
                     t: int) -> torch.Tensor:
    """(P, K) posterior target rows; t is shared by all positions."""
    k_total = ct.qt.shape[1]
    if t == 1:
        return torch.nn.functional.one_hot(x0, k_total).to(ct.qt.dtype)
    rows = ct.qt[t - 1][x_t, :]
    cols = ct.qbar_prev[t - 1][:, x0].T
    unnorm = rows * cols
    z = unnorm.sum(dim=-1, keepdim=True)
    if torch.any(z <= 0):
        raise ZeroMass(f"impossible (x_t, x0) pair at t={t}")
    return unnorm / z


def _mixture_probs(ct: _ChainTensors, x_t: torch.Tensor, p0: torch.Tensor,
                   t: int) -> torch.Tensor:
    """(P, K) model reverse distribution from valid-state beliefs p0 (P, K-1).

    Survival probabilities q(x_t | x0) are floored at PROB_FLOOR inside the
    mixture weights (mirroring the KL floor) so that near-unreachable clean
    states cannot overflow the weights; exactly unreachable states are
    dropped.
    """
    k_total = ct.qt.shape[1]
    k_valid = k_total - 1
    if t == 1:
        pad = torch.zeros(p0.shape[0], 1, dtype=p0.dtype)
        return torch.cat([p0, pad], dim=-1)
    marg = ct.qbar[t - 1][x_t, :k_valid]                 # (P, Kv)
    w = torch.where(marg > 0, p0 / marg.clamp_min(PROB_FLOOR), torch.zeros_like(p0))
    mix = w @ ct.qbar_prev[t - 1][:, :k_valid].T         # (P, K)
    unnorm = ct.qt[t - 1][x_t, :] * mix
    z = unnorm.sum(dim=-1, keepdim=True)
    if torch.any(z <= 0):
        raise ZeroMass(f"no clean state can explain some position at t={t}")
    return unnorm / z


def _kl_rows(target: torch.Tensor, model: torch.Tensor) -> torch.Tensor:
    t = target.clamp_min(PROB_FLOOR)
    m = model.clamp_min(PROB_FLOOR)
    return (target * (torch.log(t) - torch.log(m))).sum(dim=-1)


def _kl_mean(schedule: TransitionSchedule, kind: int, x0: torch.Tensor,
             x_t: torch.Tensor, t: int, logits: torch.Tensor) -> torch.Tensor:
    """Mean KL between exact posteriors and the model mixture, one chain."""
    ct = _chain_tensors(schedule, kind)
    p0 = torch.softmax(logits.to(torch.float64), dim=-1)
    target = _posterior_probs(ct, x_t, x0, t)
    model = _mixture_probs(ct, x_t, p0, t)
    return _kl_rows(target, model).mean()


def kl_loss(x0: TokenSeq, t: int, x_t: TokenSeq, x0_logits,
            schedule: TransitionSchedule) -> torch.Tensor:
    """Mean over unclamped positions of KL(posterior || model reverse step).

    x0_logits: tensor or array, one row per position over valid states
    (rows of clamped positions are ignored).
    """
    _check_step(t, schedule)
    if len(x0) != len(x_t):
        raise EngineError("x0 and x_t must have equal length")
    if not np.array_equal(x0.kinds, x_t.kinds):
        raise EngineError("x0 and x_t must share position kinds")
    logits = torch.as_tensor(x0_logits)
    total = None
    count = 0
    for kind in (PositionKind.COMMAND,) + PARAM_POSITION_KINDS:
        sel = np.flatnonzero(x0.kinds == kind)
        if sel.size == 0:
            continue
        chain = _chain_for(schedule, kind)
        k_valid = chain.n_states - 1
        part = _kl_mean(
            schedule, kind,
            torch.from_numpy(x0.states[sel].copy()),
            torch.from_numpy(x_t.states[sel].copy()),
            t,
            logits[torch.from_numpy(sel), :k_valid],
        ) * sel.size
        total = part if total is None else total + part
        count += sel.size
    if count == 0:
        return torch.zeros((), dtype=torch.float64)
    return total / count


def backprop_and_update(loss: torch.Tensor, nets: CascadeNets,
                        optimizer: torch.optim.Optimizer) -> None:
    """Reverse-mode gradients of the loss, then one optimizer step."""
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for name, p in nets.named_parameters():
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    optimizer.step()


# ---------------------------------------------------------------------------
# Corpus encoding

@dataclass(eq=False)
class EncodedCorpus:
    """Tensor views of a corpus: EOS-padded commands plus flattened slots."""

    cmd_tokens: torch.Tensor   # (N, Lc) int64
    cmd_lengths: torch.Tensor  # (N,) command count incl. the terminal EOS
    par_tokens: torch.Tensor   # (N, Lp) value tokens, 0 on PAD positions
    par_kinds: torch.Tensor    # (N, Lp) ParamKind codes, PAD for filler
    par_owners: torch.Tensor   # (N, Lp) PAD_OWNER on filler
    par_cmds: torch.Tensor     # (N, Lp) repeated command ids, PAD_CMD on filler
    par_eff: torch.Tensor      # (N, Lp) bool

    def __len__(self) -> int:
        return self.cmd_tokens.shape[0]


def layout_from_commands(commands) -> tuple[list[int], list[int], list[int]]:
    """Per-slot (kind, owner, repeated command id) lists for a command list."""
    kinds: list[int] = []
    owners: list[int] = []
    rep: list[int] = []
    for i, cmd in enumerate(commands):
        for _, kind in SLOT_TABLE[CommandKind(cmd)]:
            kinds.append(int(kind))
            owners.append(i)
            rep.append(int(cmd))
    return kinds, owners, rep


def encode_corpus(seqs: list[CadSequence], max_cmd_len: int,
                  max_param_len: int | None = None) -> EncodedCorpus:
    if not seqs:
        raise EngineError("corpus is empty")
    n = len(seqs)
    for i, s in enumerate(seqs):
        if len(s.commands) > max_cmd_len:
            raise EngineError(
                f"sequence {i} has {len(s.commands)} commands > max_cmd_len={max_cmd_len}"
            )
    lp = max(max(s.n_param_tokens for s in seqs), 1)
    if max_param_len is not None:
        if lp > max_param_len:
            raise EngineError(f"corpus needs {lp} slots > max_param_len={max_param_len}")
    cmd = torch.full((n, max_cmd_len), int(CommandKind.EOS), dtype=torch.int64)
    lengths = torch.zeros(n, dtype=torch.int64)
    par_tok = torch.zeros((n, lp), dtype=torch.int64)
    par_kind = torch.full((n, lp), int(ParamKind.PAD), dtype=torch.int64)
    par_owner = torch.full((n, lp), PAD_OWNER, dtype=torch.int64)
    par_cmd = torch.full((n, lp), PAD_CMD, dtype=torch.int64)
    par_eff = torch.zeros((n, lp), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids = [int(c) for c in s.commands]
        cmd[i, : len(ids)] = torch.tensor(ids, dtype=torch.int64)
        lengths[i] = len(ids)
        kinds, owners, rep = layout_from_commands(s.commands)
        toks = [tok for p in s.params for tok in p]
        m = len(toks)
        if m:
            par_tok[i, :m] = torch.tensor(toks, dtype=torch.int64)
            par_kind[i, :m] = torch.tensor(kinds, dtype=torch.int64)
            par_owner[i, :m] = torch.tensor(owners, dtype=torch.int64)
            par_cmd[i, :m] = torch.tensor(rep, dtype=torch.int64)
            par_eff[i, :m] = True
    return EncodedCorpus(cmd, lengths, par_tok, par_kind, par_owner, par_cmd, par_eff)


def _corrupt_batch(states: torch.Tensor, kinds: torch.Tensor, t: int,
                   schedule: TransitionSchedule, gen: torch.Generator) -> torch.Tensor:
    """Forward-corrupt a (B, L) batch at shared step t; clamped rows copied."""
    out = states.clone()
    for kind in (PositionKind.COMMAND,) + PARAM_POSITION_KINDS:
        sel = kinds == kind
        if not torch.any(sel):
            continue
        ct = _chain_tensors(schedule, kind)
        probs = ct.qbar[t - 1][:, states[sel]].T
        out[sel] = torch.multinomial(probs, 1, generator=gen).squeeze(-1)
    return out


def _net_param_inputs(tokens: torch.Tensor, eff: torch.Tensor,
                      rep_cmds: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Map chain states / sentinels onto embedding rows."""
    tok_rows = torch.where(eff, tokens, torch.full_like(tokens, dn.VAL_PAD_EMB))
    cmd_rows = torch.where(
        rep_cmds == PAD_CMD, torch.full_like(rep_cmds, dn.CMD_PAD_EMB), rep_cmds
    )
    return tok_rows, cmd_rows


def _param_kl(schedule: TransitionSchedule, x0: torch.Tensor, x_t: torch.Tensor,
              kinds: torch.Tensor, eff: torch.Tensor, t: int,
              logits: torch.Tensor) -> torch.Tensor:
    """KL averaged over all effective parameter positions in a batch."""
    total = None
    count = 0
    for kind in PARAM_POSITION_KINDS:
        sel = (kinds == kind) & eff
        m = int(sel.sum())
        if m == 0:
            continue
        part = _kl_mean(schedule, kind, x0[sel], x_t[sel], t, logits[sel]) * m
        total = part if total is None else total + part
        count += m
    if count == 0:
        return torch.zeros((), dtype=torch.float64)
    return total / count


def _aux_ce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.cross_entropy(
        logits.to(torch.float64), target, reduction="mean"
    )


# ---------------------------------------------------------------------------
# Training

class Trainer:
    """Joint training of both stages with a single replayable RNG stream."""

    def __init__(self, nets: CascadeNets, schedule: TransitionSchedule,
                 corpus: list[CadSequence], cfg: TrainConfig):
        self.nets = nets
        self.schedule = schedule
        self.cfg = cfg
        self.data = encode_corpus(
            corpus, nets.config.max_cmd_len, nets.config.max_param_len
        )
        self.optimizer = torch.optim.Adam(
            nets.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8
        )
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.iteration = 0

    def _batch_indices(self) -> torch.Tensor:
        n = len(self.data)
        b = min(self.cfg.batch_size, n)
        return torch.randint(0, n, (b,), generator=self.gen)

    def step(self) -> dict:
        nets, data, sched = self.nets, self.data, self.schedule
        idx = self._batch_indices()
        t = int(torch.randint(1, sched.steps + 1, (1,), generator=self.gen))

        cmd0 = data.cmd_tokens[idx]
        cmd_kinds = torch.full_like(cmd0, int(PositionKind.COMMAND))
        cmd_t = _corrupt_batch(cmd0, cmd_kinds, t, sched, self.gen)
        cond = None
        if nets.length_cond is not None:
            cond = nets.condition_features(data.cmd_lengths[idx])
        t_vec = torch.full((cmd0.shape[0],), t, dtype=torch.int64)
        cmd_logits = nets.cmd(cmd_t, t_vec, cond)
        loss_cmd = _kl_mean(
            sched, PositionKind.COMMAND,
            cmd0.reshape(-1), cmd_t.reshape(-1), t,
            cmd_logits.reshape(-1, dn.N_COMMANDS),
        )

        par0 = data.par_tokens[idx]
        kinds = data.par_kinds[idx]
        eff = data.par_eff[idx]
        owners = data.par_owners[idx]
        rep = data.par_cmds[idx]
        par_t = _corrupt_batch(par0, kinds, t, sched, self.gen)
        tok_rows, cmd_rows = _net_param_inputs(par_t, eff, rep)
        par_logits = nets.par(tok_rows, t_vec, cmd_rows, owners, eff)
        loss_par = _param_kl(sched, par0, par_t, kinds, eff, t, par_logits)

        loss = loss_cmd + loss_par
        if self.cfg.aux_ce_weight > 0:
            aux = _aux_ce(cmd_logits.reshape(-1, dn.N_COMMANDS), cmd0.reshape(-1))
            if torch.any(eff):
                aux = aux + _aux_ce(par_logits[eff], par0[eff])
            loss = loss + self.cfg.aux_ce_weight * aux
        backprop_and_update(loss, nets, self.optimizer)
        self.iteration += 1
        return {
            "iter": self.iteration,
            "t_mean": float(t),
            "loss_cmd": float(loss_cmd.detach()),
            "loss_param": float(loss_par.detach()),
            "wallclock": time.time(),
        }

    def run(self, n_iters: int) -> list[dict]:
        records = []
        self.nets.train()
        for _ in range(n_iters):
            records.append(self.step())
        self.nets.eval()
        return records

    def rng_state(self) -> np.ndarray:
        return self.gen.get_state().numpy()

    def set_rng_state(self, state: np.ndarray) -> None:
        self.gen.set_state(torch.from_numpy(np.asarray(state, dtype=np.uint8)))


def train(dataset: list[CadSequence], nets: CascadeNets,
          schedule: TransitionSchedule, cfg: TrainConfig) -> list[dict]:
    """Run cfg.iterations of joint gradient-descent training; return the log."""
    trainer = Trainer(nets, schedule, dataset, cfg)
    return trainer.run(cfg.iterations)


# ---------------------------------------------------------------------------
# Sampling

def decode_commands(states: np.ndarray) -> tuple[tuple[CommandKind, ...], bool]:
    """Truncate at the first EOS; returns (commands, decode_ok).

    An absorbing symbol before the EOS cannot be represented: decoding stops
    there and the sample is left grammar-invalid.
    """
    out: list[CommandKind] = []
    for s in states:
        if s == COMMAND_ABSORB:
            return tuple(out), False
        out.append(CommandKind(int(s)))
        if out[-1] == CommandKind.EOS:
            break
    return tuple(out), True


def _fit_param_budget(commands: tuple[CommandKind, ...],
                      budget: int = MAX_PARAM_TOKENS) -> tuple[CommandKind, ...]:
    """Drop trailing commands until the slot layout fits the budget."""
    cmds = list(commands)
    while cmds and sum(len(SLOT_TABLE[c]) for c in cmds) > budget:
        cmds.pop()
    return tuple(cmds)


def sample(nets: CascadeNets, schedule: TransitionSchedule, n: int,
           condition: int | None = None, seed: int = 0) -> list[CadSequence]:
    """Cascade sampling: commands from all-absorbing, then parameters.

    Stage one reverses the command chain from a fully absorbing sequence;
    its decoded output fixes the slot layout, and stage two reverses the
    per-kind parameter chains conditioned on the repeated command tokens.
    """
    if n == 0:
        return []
    if condition is not None and nets.length_cond is None:
        raise dn.ConditionOutOfRange(
            "length condition given but the network is unconditioned"
        )
    nets.eval()
    gen = torch.Generator().manual_seed(seed)
    T = schedule.steps
    lc = nets.config.max_cmd_len
    cond = None
    if condition is not None:
        cond = nets.condition_features(torch.full((n,), condition, dtype=torch.int64))

    states = torch.full((n, lc), COMMAND_ABSORB, dtype=torch.int64)
    ct_cmd = _chain_tensors(schedule, PositionKind.COMMAND)
    with torch.no_grad():
        for t in range(T, 0, -1):
            t_vec = torch.full((n,), t, dtype=torch.int64)
            logits = nets.cmd(states, t_vec, cond)
            p0 = torch.softmax(logits.to(torch.float64), dim=-1)
            dist = _mixture_probs(
                ct_cmd, states.reshape(-1), p0.reshape(-1, dn.N_COMMANDS), t
            )
            states = torch.multinomial(dist, 1, generator=gen).reshape(n, lc)

    budget = min(MAX_PARAM_TOKENS, nets.config.max_param_len)
    decoded = []
    for i in range(n):
        cmds, ok = decode_commands(states[i].numpy())
        if not ok:
            log.warning("sample %d: absorbing command survived decoding", i)
        decoded.append(_fit_param_budget(cmds, budget))

    layouts = [layout_from_commands(c) for c in decoded]
    n_eff = [len(k) for k, _, _ in layouts]
    rows = [i for i in range(n) if n_eff[i] > 0]
    params: list[tuple[tuple[int, ...], ...]] = [()] * n
    if rows:
        lp = max(n_eff[i] for i in rows)
        b = len(rows)
        par = torch.zeros((b, lp), dtype=torch.int64)
        kinds = torch.full((b, lp), int(ParamKind.PAD), dtype=torch.int64)
        owners = torch.full((b, lp), PAD_OWNER, dtype=torch.int64)
        rep = torch.full((b, lp), PAD_CMD, dtype=torch.int64)
        eff = torch.zeros((b, lp), dtype=torch.bool)
        for j, i in enumerate(rows):
            k, o, r = layouts[i]
            m = len(k)
            par[j, :m] = VALUE_ABSORB
            kinds[j, :m] = torch.tensor(k, dtype=torch.int64)
            owners[j, :m] = torch.tensor(o, dtype=torch.int64)
            rep[j, :m] = torch.tensor(r, dtype=torch.int64)
            eff[j, :m] = True
        with torch.no_grad():
            for t in range(T, 0, -1):
                t_vec = torch.full((b,), t, dtype=torch.int64)
                tok_rows, cmd_rows = _net_param_inputs(par, eff, rep)
                logits = nets.par(tok_rows, t_vec, cmd_rows, owners, eff)
                p0 = torch.softmax(logits.to(torch.float64), dim=-1)
                nxt = par.clone()
                for kind in PARAM_POSITION_KINDS:
                    sel = (kinds == kind) & eff
                    if not torch.any(sel):
                        continue
                    ctk = _chain_tensors(schedule, kind)
                    dist = _mixture_probs(ctk, par[sel], p0[sel], t)
                    nxt[sel] = torch.multinomial(dist, 1, generator=gen).squeeze(-1)
                par = nxt
        for j, i in enumerate(rows):
            toks = par[j][eff[j]].tolist()
            groups: dict[int, list[int]] = {}
            for tok, owner in zip(toks, layouts[i][1]):
                groups.setdefault(owner, []).append(int(tok))
            params[i] = tuple(
                tuple(groups.get(ci, ())) for ci in range(len(decoded[i]))
            )

    out = []
    for i in range(n):
        if not decoded[i]:
            out.append(CadSequence((), ()))
        else:
            if not params[i]:
                params[i] = tuple(() for _ in decoded[i])
            out.append(CadSequence(decoded[i], params[i]))
    return out
