"""SG / VC / DB hammer programs as command-trace generators.

Row layouts relative to the window anchor ``r`` (P = data pattern,
~P = its complement, * = hammered):

    SG (listing):  r: P          r+1: ~P *     victim r
    SG (figure):   r: P *        r+1: ~P       victim r+1
    VC:            r: P *        r+1: ~P       r+2: ~P *   victim r+1
    DB:            r: P *        r+1: ~P       r+2: P *    victim r+1

The victim row is written last and read back first, so the disturbance it
carries at read-back comes from exactly ``hc`` activations per aggressor.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np

from .commands import (
    BURST_BITS,
    CCD_CYCLES,
    CommandTrace,
    ExecutionLog,
    Kind,
    TimingParams,
    hammer_budget,
)
from .errors import AddressingError, BudgetError

ORIENTATIONS = ("listing", "figure")
# ACTs each aggressor receives outside the hammer loop (one write, one read).
SETUP_ACTS = 2


class AttackModel(str, enum.Enum):
    SG = "SG"
    VC = "VC"
    DB = "DB"

    def __str__(self):
        return self.value


MODELS = (AttackModel.SG, AttackModel.VC, AttackModel.DB)


@dataclass(frozen=True)
class PatternSpec:
    initial_row: int
    data_pattern: tuple[int, ...]
    hc: int
    data_pattern_inv: tuple[int, ...] | None = None

    def __post_init__(self):
        pat = tuple(int(b) for b in self.data_pattern)
        if not pat or any(b not in (0, 1) for b in pat):
            raise ValueError("data_pattern must be a nonempty 0/1 vector")
        inv = tuple(1 - b for b in pat)
        if self.data_pattern_inv is not None and tuple(self.data_pattern_inv) != inv:
            raise ValueError("data_pattern_inv must be the bitwise complement of data_pattern")
        object.__setattr__(self, "data_pattern", pat)
        object.__setattr__(self, "data_pattern_inv", inv)
        if self.hc < 0:
            raise ValueError("hc must be >= 0")
        if self.initial_row < 0:
            raise AddressingError(f"initial_row {self.initial_row} is negative")

    @classmethod
    def uniform(cls, initial_row: int, cols: int, hc: int, fill: int = 1) -> "PatternSpec":
        """All-``fill`` pattern; the default all-ones matches the usual setup."""
        return cls(initial_row, (fill,) * cols, hc)

    @property
    def cols(self) -> int:
        return len(self.data_pattern)


def _layout(model: AttackModel, orientation: str):
    """(writes as (offset, inverted?), hammered offsets, victim offset)."""
    model = AttackModel(model)
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}")
    if model is AttackModel.SG:
        if orientation == "listing":
            return [(1, True), (0, False)], [1], 0
        return [(0, False), (1, True)], [0], 1
    if model is AttackModel.VC:
        return [(0, False), (2, True), (1, True)], [0, 2], 1
    return [(0, False), (2, False), (1, True)], [0, 2], 1


def victim_row(model: AttackModel, spec: PatternSpec, orientation: str = "listing") -> int:
    return spec.initial_row + _layout(model, orientation)[2]


def anchor_for_victim(model: AttackModel, victim: int, orientation: str = "listing") -> int:
    return victim - _layout(model, orientation)[2]


def aggressor_rows(model: AttackModel, spec: PatternSpec, orientation: str = "listing") -> list[int]:
    return [spec.initial_row + o for o in _layout(model, orientation)[1]]


def expected_victim_data(model: AttackModel, spec: PatternSpec, orientation: str = "listing") -> np.ndarray:
    writes, _, vic = _layout(model, orientation)
    inverted = dict(writes)[vic]
    return np.array(spec.data_pattern_inv if inverted else spec.data_pattern, dtype=np.uint8)


class _Builder:
    def __init__(self, timing: TimingParams):
        self.t = timing
        self.parts: list[CommandTrace] = []
        self.next_act = 0

    def row_access(self, row: int, col_cmds):
        """ACT row, issue column commands, PRE. ``col_cmds`` = [(kind, col, data)]."""
        t = self.t
        act = self.next_act
        n = len(col_cmds)
        col_cycles = act + CCD_CYCLES * np.arange(1, n + 1)
        pre = max(act + t.t_ras, int(col_cycles[-1]) + CCD_CYCLES if n else 0)
        kinds = [Kind.ACT] + [c[0] for c in col_cmds] + [Kind.PRE]
        cycles = [act] + col_cycles.tolist() + [pre]
        rows = [row] + [-1] * (n + 1)
        cols = [-1] + [c[1] for c in col_cmds] + [-1]
        data = {i + 1: c[2] for i, c in enumerate(col_cmds) if c[2] is not None}
        self.parts.append(CommandTrace(kinds, cycles, rows, cols, data, t))
        self.next_act = pre + t.t_rp

    def hammer(self, aggressors: list[int], hc: int):
        if hc == 0:
            return
        t = self.t
        n = hc * len(aggressors)
        # One hammer = ACT, sleep, PRE inside tRAS, then tRP before the next ACT.
        gap = max(t.t_ras, t.sleep + 1)
        acts = self.next_act + np.arange(n, dtype=np.int64) * (gap + t.t_rp)
        cycles = np.empty(2 * n, np.int64)
        cycles[0::2] = acts
        cycles[1::2] = acts + gap
        kinds = np.empty(2 * n, np.uint8)
        kinds[0::2] = Kind.ACT
        kinds[1::2] = Kind.PRE
        rows = np.full(2 * n, -1, np.int64)
        rows[0::2] = np.tile(np.asarray(aggressors, np.int64), hc)
        self.parts.append(CommandTrace(kinds, cycles, rows, None, None, t))
        self.next_act = int(acts[-1]) + gap + t.t_rp

    def build(self) -> CommandTrace:
        return CommandTrace.concat(self.parts, self.t)


def _bursts(bits):
    return [(c, bits[c : c + BURST_BITS]) for c in range(0, len(bits), BURST_BITS)]


@functools.lru_cache(maxsize=4)
def build_program(
    model: AttackModel,
    spec: PatternSpec,
    timing: TimingParams,
    *,
    rows: int | None = None,
    orientation: str = "listing",
    convention: str = "tras",
) -> CommandTrace:
    """Write the model's data layout, hammer ``spec.hc`` times, read the window back."""
    model = AttackModel(model)
    writes, hammered, vic = _layout(model, orientation)
    if rows is not None and spec.initial_row + 2 >= rows:
        raise AddressingError(
            f"window at row {spec.initial_row} needs rows up to {spec.initial_row + 2}, bank has {rows}"
        )
    budget = hammer_budget(timing, convention)
    if spec.hc + SETUP_ACTS > budget:
        raise BudgetError(
            f"hc {spec.hc} plus {SETUP_ACTS} setup/read-back ACTs exceeds the budget of {budget}"
        )

    r = spec.initial_row
    b = _Builder(timing)
    for off, inverted in writes:
        bits = spec.data_pattern_inv if inverted else spec.data_pattern
        b.row_access(r + off, [(Kind.WR, c, chunk) for c, chunk in _bursts(bits)])
    b.hammer([r + o for o in hammered], spec.hc)
    read_order = [vic] + [o for o, _ in writes if o != vic]
    for off in read_order:
        b.row_access(r + off, [(Kind.RD, c, None) for c, _ in _bursts(spec.data_pattern)])
    return b.build()


def detect_bitflips(
    log: ExecutionLog, spec: PatternSpec, model: AttackModel, orientation: str = "listing"
) -> set[tuple[int, int]]:
    """Cells of the victim row whose read-back differs from what was written."""
    v = victim_row(model, spec, orientation)
    got = log.row_readback(v, spec.cols)
    want = expected_victim_data(model, spec, orientation)
    return {(v, int(c)) for c in np.flatnonzero(got != want)}
