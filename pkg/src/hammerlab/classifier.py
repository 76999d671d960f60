"""Per-cell security levels from SG/VC/DB flip sets, plus their exports.

Level 4 cells flip under SG, level 3 under VC but not SG, level 2 under DB
but not VC, and level 1 cells withstand DB. Vendors whose VC and DB sets
coincide collapse to three levels. Vendors whose sets do not nest collapse
to two.

Bitmap layout (little-endian)::

    magic   4s   b"RHLM"
    version u16  1
    scheme  u8   0 = FOUR_LEVEL, 1 = THREE_LEVEL, 2 = TWO_LEVEL
    pad     u8
    cols    u32
    n_rows  u32
    rows    n_rows x u32     DRAM row index of each bitmap row
    codes   ceil(n_rows*cols/4) bytes

Cell ``k`` (row-major over the listed rows) is stored in byte ``k // 4`` at
bits ``2*(k % 4)`` .. ``2*(k % 4) + 1`` as ``level - 1``.
"""

from __future__ import annotations

import configparser
import csv
import enum
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Mapping

import numpy as np

from .errors import ConfigurationError, DomainError, FileFormatError

BITMAP_MAGIC = b"RHLM"
BITMAP_VERSION = 1
_HEADER = struct.Struct("<4sHBxII")
DEFAULT_OVERLAP_EPSILON = 0.02


class Scheme(str, enum.Enum):
    FOUR_LEVEL = "FOUR_LEVEL"
    THREE_LEVEL = "THREE_LEVEL"
    TWO_LEVEL = "TWO_LEVEL"

    def __str__(self):
        return self.value


_SCHEME_CODES = {Scheme.FOUR_LEVEL: 0, Scheme.THREE_LEVEL: 1, Scheme.TWO_LEVEL: 2}
SCHEME_LEVELS = {
    Scheme.FOUR_LEVEL: (1, 2, 3, 4),
    Scheme.THREE_LEVEL: (1, 3, 4),
    Scheme.TWO_LEVEL: (1, 4),
}


@dataclass(frozen=True)
class SecurityLevelMap:
    levels: Mapping[Hashable, int]
    scheme: Scheme

    def __post_init__(self):
        allowed = SCHEME_LEVELS[self.scheme]
        bad = {lv for lv in self.levels.values() if lv not in allowed}
        if bad:
            raise ValueError(f"{self.scheme} map holds levels {sorted(bad)}")

    def __getitem__(self, cell) -> int:
        return self.levels[cell]

    def __len__(self) -> int:
        return len(self.levels)

    def cells_at_least(self, level: int) -> set:
        return {c for c, lv in self.levels.items() if lv >= level}


def classify(
    flips_sg: Iterable,
    flips_vc: Iterable,
    flips_db: Iterable,
    universe: Iterable | int,
    overlap_epsilon: float = DEFAULT_OVERLAP_EPSILON,
) -> SecurityLevelMap:
    """Assign every cell of ``universe`` one level and pick the scheme.

    ``universe`` may be an int ``n``, meaning cells ``0 .. n-1``.
    """
    cells = list(range(universe)) if isinstance(universe, int) else list(universe)
    members = set(cells)
    if len(members) != len(cells):
        raise DomainError("universe lists a cell twice")
    sg, vc, db = set(flips_sg), set(flips_vc), set(flips_db)
    for name, s in (("SG", sg), ("VC", vc), ("DB", db)):
        stray = s - members
        if stray:
            raise DomainError(f"{name} flips reference {len(stray)} cells outside the universe, e.g. {min(stray)}")
    if not 0 <= overlap_epsilon < 1:
        raise ConfigurationError("overlap_epsilon must lie in [0, 1)")

    if not (sg <= vc <= db):
        scheme = Scheme.TWO_LEVEL
        level_of = lambda c: 4 if c in sg else 1  # noqa: E731
    elif len(db - vc) <= overlap_epsilon * len(db):
        scheme = Scheme.THREE_LEVEL
        level_of = lambda c: 4 if c in sg else 3 if c in db else 1  # noqa: E731
    else:
        scheme = Scheme.FOUR_LEVEL
        level_of = lambda c: 4 if c in sg else 3 if c in vc else 2 if c in db else 1  # noqa: E731
    return SecurityLevelMap({c: level_of(c) for c in cells}, scheme)


def level_counts(level_map: SecurityLevelMap) -> dict[int, int]:
    counts = {1: 0, 2: 0, 3: 0, 4: 0}
    for lv in level_map.levels.values():
        counts[lv] += 1
    return counts


# ---------------------------------------------------------------------------
# Defense recommendation


@dataclass(frozen=True)
class DefenseThresholds:
    """``scarce``: level 4 holds less than this share of flipped cells.
    ``balanced``: no level holds more than this share of all cells."""

    scarce: float = 0.01
    balanced: float = 0.50

    @classmethod
    def from_config(cls, parser: configparser.ConfigParser) -> "DefenseThresholds":
        if not parser.has_section("defense"):
            return cls()
        sec = parser["defense"]
        try:
            return cls(sec.getfloat("scarce", cls.scarce), sec.getfloat("balanced", cls.balanced))
        except ValueError as exc:
            raise ConfigurationError(f"[defense]: {exc}") from None


NO_ACTION = "no action needed"
DOUBLE_SIDED = "double-sided-focused"
COUNTER_BASED = "counter-based"
UPPER_LEVELS = "upper-level-targeted"


def recommend_defense(counts: Mapping[int, int], thresholds: DefenseThresholds = DefenseThresholds()) -> str:
    """Rule table, first match wins:

    1. nothing flipped                               -> no action needed
    2. level 4 scarce among flipped cells            -> double-sided-focused
    3. no level dominates the universe               -> counter-based
    4. otherwise (a dominant level, usually level 1) -> upper-level-targeted
    """
    n = {lv: int(counts.get(lv, 0)) for lv in (1, 2, 3, 4)}
    total = sum(n.values())
    flipped = n[2] + n[3] + n[4]
    if flipped == 0:
        return NO_ACTION
    if n[4] < thresholds.scarce * flipped:
        return DOUBLE_SIDED
    if max(n.values()) <= thresholds.balanced * total:
        return COUNTER_BASED
    return UPPER_LEVELS


# ---------------------------------------------------------------------------
# Exports


def levels_csv(level_map: SecurityLevelMap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "level"])
    for (r, c), lv in sorted(level_map.levels.items()):
        w.writerow([r, c, lv])
    return buf.getvalue()


def to_bitmap(level_map: SecurityLevelMap) -> bytes:
    """Pack a map over full DRAM rows; every listed row must carry all its columns."""
    rows = sorted({r for r, _ in level_map.levels})
    cols = 1 + max((c for _, c in level_map.levels), default=-1)
    if len(level_map) != len(rows) * cols:
        raise DomainError("bitmap needs every column of every listed row")
    grid = np.zeros((len(rows), cols), np.uint8)
    index = {r: i for i, r in enumerate(rows)}
    for (r, c), lv in level_map.levels.items():
        grid[index[r], c] = lv - 1
    flat = grid.ravel()
    flat = np.concatenate([flat, np.zeros(-flat.size % 4, np.uint8)]).reshape(-1, 4)
    packed = (flat << np.array([0, 2, 4, 6], np.uint8)).sum(axis=1, dtype=np.uint8)
    head = _HEADER.pack(BITMAP_MAGIC, BITMAP_VERSION, _SCHEME_CODES[level_map.scheme], cols, len(rows))
    return head + np.asarray(rows, "<u4").tobytes() + packed.tobytes()


def from_bitmap(blob: bytes) -> SecurityLevelMap:
    if len(blob) < _HEADER.size:
        raise FileFormatError("bitmap shorter than its header")
    magic, version, code, cols, n_rows = _HEADER.unpack_from(blob)
    if magic != BITMAP_MAGIC or version != BITMAP_VERSION:
        raise FileFormatError("not a level bitmap (bad magic or version)")
    schemes = {v: k for k, v in _SCHEME_CODES.items()}
    if code not in schemes:
        raise FileFormatError(f"unknown scheme code {code}")
    n = n_rows * cols
    nbytes = (n + 3) // 4
    off = _HEADER.size + 4 * n_rows
    if len(blob) != off + nbytes:
        raise FileFormatError(f"bitmap is {len(blob)} bytes, header implies {off + nbytes}")
    rows = np.frombuffer(blob, "<u4", n_rows, _HEADER.size)
    packed = np.frombuffer(blob, np.uint8, nbytes, off)
    codes = ((packed[:, None] >> np.array([0, 2, 4, 6], np.uint8)) & 3).ravel()[:n] + 1
    grid = codes.reshape(n_rows, cols)
    levels = {(int(r), c): int(lv) for r, line in zip(rows, grid) for c, lv in enumerate(line.tolist())}
    return SecurityLevelMap(levels, schemes[code])


def save_bitmap(level_map: SecurityLevelMap, path: str | Path) -> None:
    Path(path).write_bytes(to_bitmap(level_map))


def load_bitmap(path: str | Path) -> SecurityLevelMap:
    return from_bitmap(Path(path).read_bytes())
