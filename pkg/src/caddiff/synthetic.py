"""Random grammatically valid toy models for smoke experiments and tests."""

from __future__ import annotations

import numpy as np

from .cadseq import CadSequence, CommandKind, ParamKind, SLOT_TABLE

_CURVES = (CommandKind.LINE, CommandKind.ARC, CommandKind.CIRCLE)


def _random_params(rng: np.random.Generator, cmd: CommandKind) -> tuple[int, ...]:
    toks = []
    for _, kind in SLOT_TABLE[cmd]:
        if kind == ParamKind.BOOLEAN:
            toks.append(int(rng.integers(0, 2)))
        elif kind == ParamKind.DIMENSIONAL:
            # keep radii/sweeps/scales away from degenerate zero
            toks.append(int(rng.integers(32, 224)))
        else:
            toks.append(int(rng.integers(0, 256)))
    return tuple(toks)


def _group_plan(rng: np.random.Generator, n_commands: int) -> list[int]:
    """Curve counts per single-loop group so that sum(c_i + 3) + 1 == n."""
    budget = n_commands - 1          # minus the terminal EOS
    plan: list[int] = []
    while budget >= 3:
        hi = budget - 2              # SOL + curves + Extrude per group
        # leave room to either close exactly or fit another 3+ command group
        choices = [c for c in range(1, hi + 1)
                   if (budget - (c + 2) == 0) or (budget - (c + 2) >= 3)]
        c = int(rng.choice(choices))
        plan.append(c)
        budget -= c + 2
    if budget != 0:
        raise ValueError(f"cannot build a valid model with {n_commands} commands")
    return plan


def random_valid_sequence(rng: np.random.Generator, n_commands: int) -> CadSequence:
    """A random valid model with exactly n_commands commands (incl. EOS)."""
    if n_commands < 4:
        raise ValueError("a valid model needs at least 4 commands")
    plan = _group_plan(rng, n_commands)
    commands: list[CommandKind] = []
    params: list[tuple[int, ...]] = []
    for n_curves in plan:
        commands.append(CommandKind.SOL)
        params.append(())
        for _ in range(n_curves):
            if n_curves == 1:
                # a lone line/arc starts at its own endpoint and degenerates
                cmd = CommandKind.CIRCLE
            else:
                cmd = _CURVES[int(rng.integers(0, len(_CURVES)))]
            commands.append(cmd)
            params.append(_random_params(rng, cmd))
        commands.append(CommandKind.EXTRUDE)
        params.append(_random_params(rng, CommandKind.EXTRUDE))
    commands.append(CommandKind.EOS)
    params.append(())
    return CadSequence(tuple(commands), tuple(params))


def random_corpus(seed: int, n: int, min_commands: int = 4,
                  max_commands: int = 8) -> list[CadSequence]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(min_commands, max_commands + 1))
        out.append(random_valid_sequence(rng, length))
    return out
