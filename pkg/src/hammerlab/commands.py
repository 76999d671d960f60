"""DDR4 command traces: timing bookkeeping, validation and execution.

Traces are stored column-wise (numpy arrays) because a single hammer
program at 1M activations holds millions of commands.

Trace text format, one command per line::

    # timing t_ck=<ns> t_ras=<cyc> t_rp=<cyc> t_refw=<ns> sleep=<cyc> strict=<0|1>
    <cycle> ACT <row>
    <cycle> PRE
    <cycle> RD <col>
    <cycle> WR <col> <nbits>'h<hex>
    <cycle> REF

A RD/WR moves one burst of up to ``BURST_BITS`` columns starting at ``col``.
WR data is written MSB-first: the first column is the most significant bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .device import Device, HammerContext, flips_for
from .errors import (
    AddressingError,
    ConfigurationError,
    ProtocolError,
    TraceValidationError,
    UnsupportedPatternError,
)

BURST_BITS = 64
# Column-command spacing (tCCD) used by generated programs; not validated.
CCD_CYCLES = 4


class Kind(enum.IntEnum):
    ACT = 0
    PRE = 1
    RD = 2
    WR = 3
    REF = 4


BUDGET_CONVENTIONS = ("tras", "tras+trp")


@dataclass(frozen=True)
class TimingParams:
    t_ck: float = 1 / 1.2  # ns; DDR4-2400 runs a 1200 MHz clock
    t_ras: int = 39
    t_rp: int = 16
    t_refw: float = 64e6  # ns
    sleep: int = 5
    strict: bool = True  # enforce the 36..48 cycle DDR4 tRAS range

    def __post_init__(self):
        if not self.t_ck > 0:
            raise ConfigurationError("t_ck must be > 0")
        if self.strict and not 36 <= self.t_ras <= 48:
            raise ConfigurationError(f"t_ras {self.t_ras} outside 36..48 cycles (set strict=False)")
        if self.t_ras <= 0:
            raise ConfigurationError("t_ras must be > 0")
        if not self.t_rp > 0:
            raise ConfigurationError("t_rp must be > 0")
        if self.t_refw < 0:
            raise ConfigurationError("t_refw must be >= 0")
        if not 0 <= self.sleep < self.t_ras:
            raise ConfigurationError("sleep must lie in [0, t_ras)")

    def hammer_period_ns(self, convention: str = "tras") -> float:
        if convention == "tras":
            return self.t_ras * self.t_ck
        if convention == "tras+trp":
            return (self.t_ras + self.t_rp) * self.t_ck
        raise ValueError(f"unknown budget convention {convention!r}; use one of {BUDGET_CONVENTIONS}")

    def header(self) -> str:
        return (
            f"# timing t_ck={self.t_ck!r} t_ras={self.t_ras} t_rp={self.t_rp} "
            f"t_refw={self.t_refw!r} sleep={self.sleep} strict={int(self.strict)}"
        )


DDR4_2400 = TimingParams()


def hammer_budget(timing: TimingParams, convention: str = "tras") -> int:
    """Most activations one row can receive inside one refresh window.

    The default convention divides the window by tRAS alone; ``"tras+trp"``
    uses the full close-to-open cycle instead.
    """
    period = timing.hammer_period_ns(convention)
    if timing.t_refw == 0:
        return 0
    # The relative guard absorbs representation error in t_ck (e.g. 1/1.2).
    return int(math.floor(timing.t_refw / period * (1 + 1e-12)))


@dataclass(frozen=True)
class Command:
    kind: Kind
    cycle: int
    row: int | None = None
    col: int | None = None
    data: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.ACT and self.row is None:
            raise ValueError("ACT needs a row")
        if self.kind in (Kind.RD, Kind.WR) and self.col is None:
            raise ValueError(f"{self.kind.name} needs a column")
        if self.kind is Kind.WR and not self.data:
            raise ValueError("WR needs data")


def _format_data(bits: np.ndarray) -> str:
    n = int(bits.size)
    value = int("".join(map(str, bits.tolist())), 2)
    return f"{n}'h{value:0{(n + 3) // 4}x}"


def _parse_data(token: str) -> np.ndarray:
    width, _, hexpart = token.partition("'h")
    n = int(width)
    if n <= 0 or not hexpart:
        raise ValueError(f"bad data literal {token!r}")
    value = int(hexpart, 16)
    if value >> n:
        raise ValueError(f"data literal {token!r} wider than {n} bits")
    return np.array([(value >> (n - 1 - i)) & 1 for i in range(n)], dtype=np.uint8)


class CommandTrace:
    """Ordered, cycle-stamped command sequence plus its timing parameters."""

    def __init__(self, kinds, cycles, rows=None, cols=None, data=None, timing: TimingParams = DDR4_2400):
        self.kinds = np.array(kinds, dtype=np.uint8)
        n = self.kinds.size
        self.cycles = np.array(cycles, dtype=np.int64)
        self.rows = np.full(n, -1, np.int64) if rows is None else np.array(rows, dtype=np.int64)
        self.cols = np.full(n, -1, np.int64) if cols is None else np.array(cols, dtype=np.int64)
        if not (self.cycles.size == self.rows.size == self.cols.size == n):
            raise ValueError("trace columns must have equal length")
        self.data: dict[int, np.ndarray] = {
            int(i): np.array(d, dtype=np.uint8) for i, d in (data or {}).items()
        }
        for arr in (self.kinds, self.cycles, self.rows, self.cols, *self.data.values()):
            arr.flags.writeable = False  # analyses are cached on the trace
        self.timing = timing
        self._violations: dict[str, list] = {}
        self._episodes: dict[int, list] = {}

    @classmethod
    def from_commands(cls, commands: Iterable[Command], timing: TimingParams = DDR4_2400) -> "CommandTrace":
        commands = list(commands)
        kinds = [int(c.kind) for c in commands]
        cycles = [c.cycle for c in commands]
        rows = [-1 if c.row is None else c.row for c in commands]
        cols = [-1 if c.col is None else c.col for c in commands]
        data = {i: c.data for i, c in enumerate(commands) if c.data is not None}
        return cls(kinds, cycles, rows, cols, data, timing)

    @classmethod
    def concat(cls, parts: Sequence["CommandTrace"], timing: TimingParams) -> "CommandTrace":
        data, offset = {}, 0
        for p in parts:
            data.update({i + offset: d for i, d in p.data.items()})
            offset += len(p)
        return cls(
            np.concatenate([p.kinds for p in parts]),
            np.concatenate([p.cycles for p in parts]),
            np.concatenate([p.rows for p in parts]),
            np.concatenate([p.cols for p in parts]),
            data,
            timing,
        )

    def __len__(self) -> int:
        return int(self.kinds.size)

    def __getitem__(self, i: int) -> Command:
        kind = Kind(int(self.kinds[i]))
        d = self.data.get(int(i) % len(self))
        return Command(
            kind=kind,
            cycle=int(self.cycles[i]),
            row=int(self.rows[i]) if kind is Kind.ACT else None,
            col=int(self.cols[i]) if kind in (Kind.RD, Kind.WR) else None,
            data=None if d is None else tuple(int(b) for b in d),
        )

    def __iter__(self) -> Iterator[Command]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, CommandTrace):
            return NotImplemented
        return (
            self.timing == other.timing
            and np.array_equal(self.kinds, other.kinds)
            and np.array_equal(self.cycles, other.cycles)
            and np.array_equal(self._canon_rows(), other._canon_rows())
            and np.array_equal(self._canon_cols(), other._canon_cols())
            and self.data.keys() == other.data.keys()
            and all(np.array_equal(self.data[k], other.data[k]) for k in self.data)
        )

    def _canon_rows(self):
        return np.where(self.kinds == Kind.ACT, self.rows, -1)

    def _canon_cols(self):
        return np.where((self.kinds == Kind.RD) | (self.kinds == Kind.WR), self.cols, -1)

    def act_counts(self) -> dict[int, int]:
        rows, counts = np.unique(self.rows[self.kinds == Kind.ACT], return_counts=True)
        return {int(r): int(c) for r, c in zip(rows, counts)}

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        out = [self.timing.header()]
        kinds, cycles, rows, cols = (a.tolist() for a in (self.kinds, self.cycles, self.rows, self.cols))
        for i, (k, c) in enumerate(zip(kinds, cycles)):
            if k == Kind.ACT:
                out.append(f"{c} ACT {rows[i]}")
            elif k == Kind.PRE:
                out.append(f"{c} PRE")
            elif k == Kind.RD:
                out.append(f"{c} RD {cols[i]}")
            elif k == Kind.WR:
                out.append(f"{c} WR {cols[i]} {_format_data(self.data[i])}")
            else:
                out.append(f"{c} REF")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CommandTrace":
        timing = DDR4_2400
        kinds, cycles, rows, cols, data = [], [], [], [], {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].split()
                if body and body[0] == "timing":
                    timing = _parse_timing(body[1:], lineno)
                continue
            parts = line.split()
            try:
                cycle, kind = int(parts[0]), Kind[parts[1]]
                row = col = -1
                if kind is Kind.ACT:
                    (row,) = map(int, parts[2:3])
                    extra = parts[3:]
                elif kind is Kind.RD:
                    (col,) = map(int, parts[2:3])
                    extra = parts[3:]
                elif kind is Kind.WR:
                    col = int(parts[2])
                    data[len(kinds)] = _parse_data(parts[3])
                    extra = parts[4:]
                else:
                    extra = parts[2:]
                if extra:
                    raise ValueError(f"unexpected fields {extra}")
            except (IndexError, KeyError, ValueError) as exc:
                raise ValueError(f"line {lineno}: cannot parse {raw!r}: {exc}") from None
            kinds.append(int(kind))
            cycles.append(cycle)
            rows.append(row)
            cols.append(col)
        return cls(kinds, cycles, rows, cols, data, timing)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CommandTrace":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _parse_timing(tokens, lineno) -> TimingParams:
    kv = dict(t.split("=", 1) for t in tokens)
    try:
        return TimingParams(
            t_ck=float(kv["t_ck"]),
            t_ras=int(kv["t_ras"]),
            t_rp=int(kv["t_rp"]),
            t_refw=float(kv["t_refw"]),
            sleep=int(kv["sleep"]),
            strict=bool(int(kv.get("strict", "1"))),
        )
    except KeyError as exc:
        raise ValueError(f"line {lineno}: timing header lacks {exc}") from None


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True, order=True)
class Violation:
    index: int
    rule: str
    detail: str = field(default="", compare=False)

    def __str__(self):
        return f"{self.rule} at command {self.index}" + (f" ({self.detail})" if self.detail else "")


def _bank_events(trace: CommandTrace):
    """Indices of ACT/PRE events and whether the bank was open before each."""
    k = trace.kinds
    ev = np.flatnonzero((k == Kind.ACT) | (k == Kind.PRE))
    is_act = k[ev] == Kind.ACT
    open_before = np.concatenate([[False], is_act[:-1]]) if ev.size else np.zeros(0, bool)
    return ev, is_act, open_before


def _count_keys(window: np.ndarray, rows: np.ndarray):
    """Occurrences of each (window, row) pair; bincount when the key space is small."""
    lo = int(rows.min())
    span = int(rows.max()) - lo + 1
    nwin = int(window.max()) + 1
    if span * nwin <= 1 << 24:
        counts = np.bincount(window * span + (rows - lo), minlength=span * nwin)
        nz = np.flatnonzero(counts)
        return np.stack([nz // span, nz % span + lo], axis=1), counts[nz]
    pairs, counts = np.unique(np.stack([window, rows]), axis=1, return_counts=True)
    return pairs.T, counts


def validate_trace(trace: CommandTrace, convention: str = "tras") -> list[Violation]:
    """Return every timing/protocol/budget violation; an empty list means ok.

    Rules: ``cycle-order`` (strictly increasing cycles), ``tRAS``
    (ACT->PRE gap), ``tRP`` (PRE->ACT gap), ``bank-open`` (ACT while a row
    is open), ``ref-open`` (REF while a row is open), ``rw-closed`` (RD/WR
    with no open row) and ``budget`` (more ACTs to one row between REFs
    than ``hammer_budget`` allows).
    """
    cached = trace._violations.get(convention)
    if cached is not None:
        return list(cached)
    t = trace.timing
    k, cyc = trace.kinds, trace.cycles
    out: list[Violation] = []

    bad = np.flatnonzero(np.diff(cyc) <= 0) + 1
    out += [Violation(int(i), "cycle-order") for i in bad]

    ev, is_act, open_before = _bank_events(trace)
    if ev.size:
        ev_cyc = cyc[ev]
        prev_cyc = np.concatenate([[0], ev_cyc[:-1]])
        has_prev = np.arange(ev.size) > 0
        prev_is_act = np.concatenate([[False], is_act[:-1]])
        prev_is_pre = has_prev & ~prev_is_act

        m = ~is_act & open_before & (ev_cyc - prev_cyc < t.t_ras)
        out += [Violation(int(i), "tRAS", f"gap {int(g)} < {t.t_ras}") for i, g in zip(ev[m], (ev_cyc - prev_cyc)[m])]
        m = is_act & prev_is_pre & (ev_cyc - prev_cyc < t.t_rp)
        out += [Violation(int(i), "tRP", f"gap {int(g)} < {t.t_rp}") for i, g in zip(ev[m], (ev_cyc - prev_cyc)[m])]
        m = is_act & open_before
        out += [Violation(int(i), "bank-open") for i in ev[m]]

    state_after = is_act  # bank open after each event
    for kind, rule in ((Kind.RD, "rw-closed"), (Kind.WR, "rw-closed"), (Kind.REF, "ref-open")):
        idx = np.flatnonzero(k == kind)
        if not idx.size:
            continue
        pos = np.searchsorted(ev, idx) - 1
        is_open = np.where(pos >= 0, state_after[np.maximum(pos, 0)] if ev.size else False, False)
        bad = idx[~is_open] if kind is not Kind.REF else idx[is_open]
        out += [Violation(int(i), rule) for i in bad]

    budget = hammer_budget(t, convention)
    act_idx = np.flatnonzero(k == Kind.ACT)
    if act_idx.size:
        window = np.cumsum(k == Kind.REF)[act_idx]
        rows = trace.rows[act_idx]
        keys, counts = _count_keys(window, rows)
        for (w, r), c in zip(keys[counts > budget], counts[counts > budget]):
            hits = act_idx[(window == w) & (rows == r)]
            out.append(Violation(int(hits[budget]), "budget", f"row {int(r)}: {int(c)} ACTs > {budget}"))

    out.sort()
    trace._violations[convention] = out
    return list(out)


# ---------------------------------------------------------------------------
# Execution


@dataclass
class ReadRecord:
    index: int
    row: int
    col: int
    bits: np.ndarray


@dataclass
class ExecutionLog:
    act_counts: dict[int, int]
    flips: list[tuple[int, int]]
    reads: list[ReadRecord]
    episodes: list[tuple[int, HammerContext]] = field(default_factory=list)

    def row_readback(self, row: int, cols: int) -> np.ndarray:
        """The row as seen by its most recent reads; raises if a column was never read."""
        from .errors import MalformedLogError

        out = np.zeros(cols, dtype=np.uint8)
        seen = np.zeros(cols, dtype=bool)
        for rec in reversed(self.reads):
            if rec.row != row:
                continue
            sl = slice(rec.col, rec.col + rec.bits.size)
            fresh = ~seen[sl]
            out[sl][fresh] = rec.bits[fresh]
            seen[sl] = True
            if seen.all():
                return out
        raise MalformedLogError(f"log has no complete read-back of row {row}")


def _episodes(trace: CommandTrace, nrows: int):
    """Disturbance episodes: (position, victim, count from row-1, count from row+1).

    A row's charge is restored whenever it is activated, so the activations
    its neighbors received since its own previous ACT are evaluated just
    before that ACT. Outstanding counts are evaluated at trace end
    (position ``len(trace)``). Cached on the trace per bank height.
    """
    cached = trace._episodes.get(nrows)
    if cached is not None:
        return cached
    act_idx = np.flatnonzero(trace.kinds == Kind.ACT)
    act_rows = trace.rows[act_idx]
    if act_rows.size:
        order = np.argsort(act_rows, kind="stable")
        keys, counts = _count_keys(np.zeros_like(act_rows), act_rows)
        split = np.split(act_idx[order], np.cumsum(counts)[:-1])
        by_row = {int(r): pos for r, pos in zip(keys[:, 1], split)}
    else:
        by_row = {}
    candidates = set()
    for r in by_row:
        candidates.update(v for v in (r - 1, r + 1) if 0 <= v < nrows)
    empty = np.zeros(0, np.int64)
    end = len(trace)
    events = []
    for v in sorted(candidates):
        own = by_row.get(v, empty)
        bounds = np.concatenate([[-1], own, [end]])
        counts = []
        for u in (v - 1, v + 1):
            pos = by_row.get(u)
            if pos is None:
                counts.append(np.zeros(bounds.size - 1, np.int64))
            else:
                counts.append(np.diff(np.searchsorted(pos, bounds)))
        lo, hi = counts
        hot = np.flatnonzero((lo > 0) | (hi > 0))
        for j in hot:
            events.append((int(bounds[j + 1]), v, int(lo[j]), int(hi[j])))
    events.sort()
    trace._episodes[nrows] = events
    return events


def execute(device: Device, trace: CommandTrace, trial_seed: int, convention: str = "tras") -> ExecutionLog:
    """Replay ``trace`` against ``device`` and log reads and flips."""
    violations = validate_trace(trace, convention)
    if violations:
        raise TraceValidationError(violations)
    k = trace.kinds
    act_idx = np.flatnonzero(k == Kind.ACT)
    act_rows = trace.rows[act_idx]
    if act_rows.size and (act_rows.min() < 0 or act_rows.max() >= device.rows):
        bad = int(act_rows[(act_rows < 0) | (act_rows >= device.rows)][0])
        raise AddressingError(f"ACT to row {bad} outside bank of {device.rows} rows")

    rw_idx = np.flatnonzero((k == Kind.RD) | (k == Kind.WR))
    rw_cols = trace.cols[rw_idx]
    if rw_cols.size and (rw_cols.min() < 0 or rw_cols.max() >= device.cols):
        raise AddressingError(f"column command outside row of {device.cols} columns")
    slot = np.searchsorted(act_idx, rw_idx) - 1
    if np.any(slot < 0):
        raise ProtocolError(f"{Kind(int(k[rw_idx[slot < 0][0]])).name} with no open row")
    open_rows = act_rows[slot]

    # (position, tag, payload); tag 0 = disturbance episode, 1 = RD/WR.
    steps = [(int(i), 1, None) for i in rw_idx]
    steps += [(pos, 0, (v, lo, hi)) for pos, v, lo, hi in _episodes(trace, device.rows)]
    steps.sort(key=lambda s: (s[0], s[1]))

    open_row_of = dict(zip(rw_idx.tolist(), open_rows.tolist()))
    flips: set[tuple[int, int]] = set()
    reads: list[ReadRecord] = []
    episodes = []
    for pos, tag, ev in steps:
        if tag == 0:
            v, lo, hi = ev
            if lo and hi and lo != hi:
                raise UnsupportedPatternError(
                    f"row {v} saw unequal two-sided hammering ({lo} vs {hi} ACTs) before command {pos}"
                )
            neighbors = tuple(u for u, c in ((v - 1, lo), (v + 1, hi)) if c)
            ctx = HammerContext(v, neighbors, max(lo, hi))
            episodes.append((pos, ctx))
            flips.update(flips_for(device, ctx, trial_seed))
            continue
        row, col = open_row_of[pos], int(trace.cols[pos])
        if k[pos] == Kind.WR:
            bits = trace.data[pos]
            end = min(col + bits.size, device.cols)
            device.bits[row, col:end] = bits[: end - col]
        else:
            end = min(col + BURST_BITS, device.cols)
            reads.append(ReadRecord(pos, row, col, device.bits[row, col:end].copy()))

    if act_rows.size:
        keys, counts = _count_keys(np.zeros_like(act_rows), act_rows)
        act_counts = {int(r): int(c) for r, c in zip(keys[:, 1], counts)}
    else:
        act_counts = {}
    return ExecutionLog(
        act_counts=act_counts,
        flips=sorted(flips),
        reads=reads,
        episodes=episodes,
    )
