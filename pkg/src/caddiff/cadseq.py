"""CAD sequence data model: commands, quantized parameters, grammar, serialization.

A model is an ordered list of commands, each carrying a fixed set of
parameter slots holding 8-bit quantized tokens.  Slot layout and the
coordinate/dimensional/boolean typing of each slot are fixed by
``SLOT_TABLE``.  All types here are immutable and all functions pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Iterator

MAX_COMMANDS = 60
MAX_PARAM_TOKENS = 280
N_VALUE_TOKENS = 256
PAD_TOKEN = 256    # flattened-sequence filler, outside the 0..255 value range
PAD_OWNER = -1     # owner sentinel for PAD positions
PAD_CMD = -1       # repeated-command sentinel for PAD positions
ROW_WIDTH = 17     # 1 command cell + 16 parameter cells


class CadSeqError(ValueError):
    """Base class for sequence construction/parsing failures."""


class UnknownCommandId(CadSeqError):
    pass


class MissingParameter(CadSeqError):
    pass


class OutOfRange(CadSeqError):
    pass


class OutOfDomain(CadSeqError):
    pass


class TooLong(CadSeqError):
    pass


class TooManyParams(CadSeqError):
    pass


class MalformedJson(CadSeqError):
    pass


class SchemaViolation(CadSeqError):
    pass


class CommandKind(IntEnum):
    SOL = 0
    LINE = 1
    ARC = 2
    CIRCLE = 3
    EXTRUDE = 4
    EOS = 5


class ParamKind(IntEnum):
    COORDINATE = 0
    DIMENSIONAL = 1
    BOOLEAN = 2
    PAD = 3


_C = ParamKind.COORDINATE
_D = ParamKind.DIMENSIONAL
_B = ParamKind.BOOLEAN

# Slot layout per command: (name, kind), in emission order.
SLOT_TABLE: dict[CommandKind, tuple[tuple[str, ParamKind], ...]] = {
    CommandKind.SOL: (),
    CommandKind.LINE: (("x", _C), ("y", _C)),
    CommandKind.ARC: (("x", _C), ("y", _C), ("alpha", _D), ("f", _B)),
    CommandKind.CIRCLE: (("x", _C), ("y", _C), ("r", _D)),
    CommandKind.EXTRUDE: (
        ("theta", _C), ("phi", _C), ("gamma", _C),
        ("px", _C), ("py", _C), ("pz", _C),
        ("s", _D), ("e1", _D), ("e2", _D),
        ("b", _B), ("u", _B),
    ),
    CommandKind.EOS: (),
}

CURVE_KINDS = (CommandKind.LINE, CommandKind.ARC, CommandKind.CIRCLE)

# Fixed-width row format: cell 0 is the command id, cells 1..16 are the
# parameter cells below; a command reads only its own slots, every other
# cell holds -1.
ROW_PARAM_NAMES = (
    "x", "y", "alpha", "f", "r",
    "theta", "phi", "gamma", "px", "py", "pz", "s", "e1", "e2", "b", "u",
)
_ROW_CELL = {name: i + 1 for i, name in enumerate(ROW_PARAM_NAMES)}


def slot_names(kind: CommandKind) -> tuple[str, ...]:
    return tuple(name for name, _ in SLOT_TABLE[kind])


def slot_kinds(kind: CommandKind) -> tuple[ParamKind, ...]:
    return tuple(k for _, k in SLOT_TABLE[kind])


@dataclass(frozen=True)
class ParamSlot:
    name: str
    kind: ParamKind
    value: int


@dataclass(frozen=True)
class CadSequence:
    """Ordered commands with per-command parameter token tuples."""

    commands: tuple[CommandKind, ...]
    params: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.commands) > MAX_COMMANDS:
            raise TooLong(
                f"{len(self.commands)} commands exceeds the maximum of {MAX_COMMANDS}"
            )
        if len(self.params) != len(self.commands):
            raise MissingParameter("params must align 1:1 with commands")
        object.__setattr__(
            self, "commands", tuple(CommandKind(c) for c in self.commands)
        )
        object.__setattr__(self, "params", tuple(tuple(p) for p in self.params))
        total = 0
        for i, (cmd, toks) in enumerate(zip(self.commands, self.params)):
            layout = SLOT_TABLE[cmd]
            if len(toks) != len(layout):
                raise MissingParameter(
                    f"command {i} ({cmd.name}) expects {len(layout)} parameters, "
                    f"got {len(toks)}"
                )
            for (name, _), tok in zip(layout, toks):
                if not isinstance(tok, int) or isinstance(tok, bool):
                    raise OutOfRange(f"command {i} slot {name}: token must be int")
                if not 0 <= tok < N_VALUE_TOKENS:
                    raise OutOfRange(
                        f"command {i} slot {name}: token {tok} outside 0..255"
                    )
            total += len(layout)
        if total > MAX_PARAM_TOKENS:
            raise TooManyParams(
                f"{total} parameter tokens exceeds the maximum of {MAX_PARAM_TOKENS}"
            )

    @property
    def n_param_tokens(self) -> int:
        return sum(len(p) for p in self.params)

    def slots(self) -> Iterator[tuple[int, ParamSlot]]:
        """Yield (command_index, slot) for every effective parameter slot."""
        for i, (cmd, toks) in enumerate(zip(self.commands, self.params)):
            for (name, kind), tok in zip(SLOT_TABLE[cmd], toks):
                yield i, ParamSlot(name, kind, tok)

    def param_dict(self, index: int) -> dict[str, int]:
        cmd = self.commands[index]
        return {name: tok for (name, _), tok in zip(SLOT_TABLE[cmd], self.params[index])}


@dataclass(frozen=True)
class FlatParamSeq:
    """Parameters flattened across commands, padded to MAX_PARAM_TOKENS.

    Parallel tuples: token values (or PAD_TOKEN), slot kinds (ParamKind.PAD
    for filler), owning command-instance indices (PAD_OWNER for filler) and
    the owning command id repeated once per slot (PAD_CMD for filler).
    """

    tokens: tuple[int, ...]
    kinds: tuple[ParamKind, ...]
    owners: tuple[int, ...]
    repeated_cmds: tuple[int, ...]

    def __post_init__(self):
        n = len(self.tokens)
        if not (len(self.kinds) == len(self.owners) == len(self.repeated_cmds) == n):
            raise CadSeqError("parallel fields must share one length")
        prev = None
        for owner in self.owners:
            if owner == PAD_OWNER:
                continue
            if prev is not None and owner < prev:
                raise CadSeqError("owners must be non-decreasing")
            prev = owner

    @property
    def n_effective(self) -> int:
        return sum(1 for k in self.kinds if k != ParamKind.PAD)


@dataclass(frozen=True)
class Violation:
    rule: str
    position: int
    message: str


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    violations: tuple[Violation, ...]


def quantize(v: float) -> int:
    """Map a real in [0, 1] to a token in 0..255, rounding half up."""
    if not 0.0 <= v <= 1.0:
        raise OutOfDomain(f"value {v} outside [0, 1]")
    return min(int(v * (N_VALUE_TOKENS - 1) + 0.5), N_VALUE_TOKENS - 1)


def dequantize(token: int) -> float:
    if not 0 <= token < N_VALUE_TOKENS:
        raise OutOfRange(f"token {token} outside 0..255")
    return token / (N_VALUE_TOKENS - 1)


def parse_rows(rows: Iterable[Iterable[int]]) -> CadSequence:
    """Build a sequence from fixed-width 17-cell integer rows.

    Cell 0 is the command id; the command's slots are read from their fixed
    cells (see ROW_PARAM_NAMES), all other cells are ignored filler (-1).
    """
    rows = [list(r) for r in rows]
    if len(rows) > MAX_COMMANDS:
        raise TooLong(f"{len(rows)} rows exceeds the maximum of {MAX_COMMANDS}")
    commands: list[CommandKind] = []
    params: list[tuple[int, ...]] = []
    for i, row in enumerate(rows):
        if len(row) != ROW_WIDTH:
            raise CadSeqError(f"row {i}: expected {ROW_WIDTH} cells, got {len(row)}")
        cmd_id = row[0]
        try:
            cmd = CommandKind(cmd_id)
        except ValueError:
            raise UnknownCommandId(f"row {i}: command id {cmd_id} outside 0..5") from None
        toks = []
        for name, _ in SLOT_TABLE[cmd]:
            cell = row[_ROW_CELL[name]]
            if cell == -1:
                raise MissingParameter(f"row {i} ({cmd.name}): slot {name} is -1")
            if not 0 <= cell < N_VALUE_TOKENS:
                raise OutOfRange(f"row {i} ({cmd.name}): slot {name}={cell} outside 0..255")
            toks.append(int(cell))
        commands.append(cmd)
        params.append(tuple(toks))
    return CadSequence(tuple(commands), tuple(params))


def to_rows(seq: CadSequence) -> list[list[int]]:
    rows = []
    for i, cmd in enumerate(seq.commands):
        row = [int(cmd)] + [-1] * (ROW_WIDTH - 1)
        for (name, _), tok in zip(SLOT_TABLE[cmd], seq.params[i]):
            row[_ROW_CELL[name]] = tok
        rows.append(row)
    return rows


def rows_from_text(text: str) -> list[list[int]]:
    rows = []
    for ln, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            rows.append([int(c) for c in line.split()])
        except ValueError as exc:
            raise CadSeqError(f"line {ln + 1}: non-integer cell") from exc
    return rows


def rows_to_text(rows: list[list[int]]) -> str:
    return "\n".join(" ".join(str(c) for c in row) for row in rows) + "\n"


def validate(seq: CadSequence) -> ValidityReport:
    """Check the sketch-then-extrude grammar.

    A valid model is one or more (sketch, extrude) groups followed by a
    single terminal EOS, where each sketch is one or more loops and each
    loop is an SOL followed by at least one curve.
    """
    violations: list[Violation] = []
    cmds = seq.commands
    if not cmds:
        return ValidityReport(False, (Violation("empty-model", 0, "no commands"),))

    NEED_SOL, LOOP_OPEN, LOOP_BODY = 0, 1, 2
    state = NEED_SOL
    n_extrudes = 0
    eos_at: int | None = None
    for i, c in enumerate(cmds):
        if eos_at is not None:
            violations.append(
                Violation("extra-after-eos", i, f"{c.name} after terminal EOS")
            )
            break
        if state == NEED_SOL:
            if c == CommandKind.SOL:
                state = LOOP_OPEN
            elif c in CURVE_KINDS:
                violations.append(
                    Violation("curve-outside-loop", i, f"{c.name} without an open loop")
                )
                state = LOOP_BODY
            elif c == CommandKind.EXTRUDE:
                violations.append(
                    Violation("extrude-without-sketch", i, "extrude with no sketch to consume")
                )
                n_extrudes += 1
            else:  # EOS
                if n_extrudes == 0:
                    violations.append(Violation("empty-model", i, "EOS with no geometry"))
                eos_at = i
        elif state == LOOP_OPEN:
            if c in CURVE_KINDS:
                state = LOOP_BODY
            elif c == CommandKind.SOL:
                violations.append(Violation("empty-loop", i, "loop closed with zero curves"))
            elif c == CommandKind.EXTRUDE:
                violations.append(Violation("empty-loop", i, "loop closed with zero curves"))
                n_extrudes += 1
                state = NEED_SOL
            else:  # EOS
                violations.append(Violation("empty-loop", i, "loop closed with zero curves"))
                violations.append(
                    Violation("sketch-never-extruded", i, "open sketch not extruded")
                )
                eos_at = i
        else:  # LOOP_BODY
            if c in CURVE_KINDS:
                pass
            elif c == CommandKind.SOL:
                state = LOOP_OPEN
            elif c == CommandKind.EXTRUDE:
                n_extrudes += 1
                state = NEED_SOL
            else:  # EOS
                violations.append(
                    Violation("sketch-never-extruded", i, "open sketch not extruded")
                )
                eos_at = i
    if eos_at is None:
        violations.append(
            Violation("missing-eos", len(cmds) - 1, "sequence does not end with EOS")
        )
        if state != NEED_SOL:
            violations.append(
                Violation(
                    "sketch-never-extruded", len(cmds) - 1, "open sketch not extruded"
                )
            )
    for i, slot in seq.slots():  # structurally guaranteed, kept for defense in depth
        if not 0 <= slot.value < N_VALUE_TOKENS:
            violations.append(
                Violation("token-out-of-range", i, f"slot {slot.name}={slot.value}")
            )
    return ValidityReport(not violations, tuple(violations))


def flatten(seq: CadSequence) -> FlatParamSeq:
    """Flatten parameters across commands, in command then slot order."""
    tokens: list[int] = []
    kinds: list[ParamKind] = []
    owners: list[int] = []
    repeated: list[int] = []
    for i, slot in seq.slots():
        tokens.append(slot.value)
        kinds.append(slot.kind)
        owners.append(i)
        repeated.append(int(seq.commands[i]))
    if len(tokens) > MAX_PARAM_TOKENS:
        raise TooManyParams(f"{len(tokens)} effective slots exceed {MAX_PARAM_TOKENS}")
    fill = MAX_PARAM_TOKENS - len(tokens)
    tokens += [PAD_TOKEN] * fill
    kinds += [ParamKind.PAD] * fill
    owners += [PAD_OWNER] * fill
    repeated += [PAD_CMD] * fill
    return FlatParamSeq(tuple(tokens), tuple(kinds), tuple(owners), tuple(repeated))


def group_by_owner(flat: FlatParamSeq) -> dict[int, tuple[int, ...]]:
    """Regroup flattened tokens into per-command tuples keyed by owner index."""
    groups: dict[int, list[int]] = {}
    for tok, owner in zip(flat.tokens, flat.owners):
        if owner == PAD_OWNER:
            continue
        groups.setdefault(owner, []).append(tok)
    return {k: tuple(v) for k, v in groups.items()}


def unflatten(flat: FlatParamSeq, commands: tuple[CommandKind, ...]) -> CadSequence:
    """Reassemble a sequence from a command list plus a flattened layout."""
    groups = group_by_owner(flat)
    params = tuple(groups.get(i, ()) for i in range(len(commands)))
    return CadSequence(tuple(commands), params)


# ---------------------------------------------------------------------------
# JSON serialization

_CMD_NAME = {
    CommandKind.SOL: "SOL",
    CommandKind.LINE: "Line",
    CommandKind.ARC: "Arc",
    CommandKind.CIRCLE: "Circle",
    CommandKind.EXTRUDE: "Extrude",
    CommandKind.EOS: "EOS",
}
_CMD_BY_NAME = {n: k for k, n in _CMD_NAME.items()}


def seq_to_obj(seq: CadSequence) -> dict:
    out = []
    for i, cmd in enumerate(seq.commands):
        out.append({"cmd": _CMD_NAME[cmd], "params": seq.param_dict(i)})
    return {"commands": out}


def seq_from_obj(obj: dict) -> CadSequence:
    if not isinstance(obj, dict) or "commands" not in obj:
        raise SchemaViolation("sequence object must contain a 'commands' list")
    items = obj["commands"]
    if not isinstance(items, list):
        raise SchemaViolation("'commands' must be a list")
    commands: list[CommandKind] = []
    params: list[tuple[int, ...]] = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or "cmd" not in item:
            raise SchemaViolation(f"command {i}: expected an object with 'cmd'")
        name = item["cmd"]
        if name not in _CMD_BY_NAME:
            raise SchemaViolation(f"command {i}: unknown command name {name!r}")
        cmd = _CMD_BY_NAME[name]
        given = item.get("params", {})
        if not isinstance(given, dict):
            raise SchemaViolation(f"command {i}: 'params' must be an object")
        layout = SLOT_TABLE[cmd]
        expected = {n for n, _ in layout}
        extra = set(given) - expected
        if extra:
            raise SchemaViolation(f"command {i} ({name}): unknown slots {sorted(extra)}")
        toks = []
        for slot_name, _ in layout:
            if slot_name not in given:
                raise SchemaViolation(f"command {i} ({name}): missing slot {slot_name}")
            val = given[slot_name]
            if not isinstance(val, int) or isinstance(val, bool):
                raise SchemaViolation(f"command {i} ({name}): slot {slot_name} must be int")
            toks.append(val)
        commands.append(cmd)
        params.append(tuple(toks))
    try:
        return CadSequence(tuple(commands), tuple(params))
    except CadSeqError as exc:
        raise SchemaViolation(str(exc)) from exc


def to_json(seq: CadSequence) -> str:
    return json.dumps(seq_to_obj(seq))


def from_json(text: str) -> CadSequence:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(str(exc)) from exc
    return seq_from_obj(obj)


def sequences_to_json(seqs: Iterable[CadSequence]) -> str:
    return json.dumps({"sequences": [seq_to_obj(s) for s in seqs]})


def sequences_from_json(text: str) -> list[CadSequence]:
    """Load a corpus file: {"sequences": [...]}, a bare list, or one object."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(str(exc)) from exc
    if isinstance(obj, dict) and "sequences" in obj:
        items = obj["sequences"]
        if not isinstance(items, list):
            raise SchemaViolation("'sequences' must be a list")
    elif isinstance(obj, dict) and "commands" in obj:
        items = [obj]
    elif isinstance(obj, list):
        items = obj
    else:
        raise SchemaViolation("expected a sequence object, a list, or {'sequences': []}")
    return [seq_from_obj(it) for it in items]
