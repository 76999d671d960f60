"""Simulated DRAM bank with a parametric per-cell RowHammer disturbance model.

Each cell has a flip threshold drawn once per device from a lognormal
distribution. Hammering a neighbor row ``hc`` times adds ``hc * w`` units of
disturbance to every cell of the victim row, where ``w`` is ``w_diff`` when
the neighbor's bit at that column differs from the victim's and ``w_same``
otherwise. A cell flips when at least one hammered neighbor differs from it
and the accumulated disturbance reaches its (jittered) threshold.

Only cells whose threshold is reachable at ``DeviceConfig.hc_max`` are kept
in memory; the rest can never flip.
"""

from __future__ import annotations

import configparser
import enum
import functools
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Mapping

import numpy as np

from .errors import AddressingError, ConfigurationError

_SCORE_CHUNK_ROWS = 64
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class BehaviorClass(str, enum.Enum):
    OVERLAP = "OVERLAP"  # VC and DB flip the same cells
    REDUCED = "REDUCED"  # VC flips fewer cells than DB
    INVERTED = "INVERTED"  # VC flips more cells than DB

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class DeviceConfig:
    rows: int
    cols: int
    seed: int = 0
    # Largest hammer count the sparse threshold index must support.
    # None keeps every cell (dense), which small test devices use.
    hc_max: int | None = 2_000_000

    def __post_init__(self):
        if self.rows < 3:
            raise ConfigurationError(f"rows must be >= 3, got {self.rows}")
        if self.cols < 1:
            raise ConfigurationError(f"cols must be >= 1, got {self.cols}")
        if not 0 <= self.seed <= _MASK64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.hc_max is not None and self.hc_max < 0:
            raise ConfigurationError("hc_max must be >= 0")

    @property
    def cells(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class ThresholdDist:
    """Per-cell flip-threshold distribution, in disturbance units."""

    median: float
    sigma: float
    family: str = "lognormal"

    def __post_init__(self):
        if self.family != "lognormal":
            raise ConfigurationError(f"unsupported threshold family {self.family!r}")
        if not (self.median > 0 and math.isfinite(self.median)):
            raise ConfigurationError("threshold median must be positive and finite")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ConfigurationError("threshold sigma must be positive and finite")

    def cdf(self, x: float) -> float:
        if x <= 0:
            return 0.0
        if math.isinf(x):
            return 1.0
        return NormalDist().cdf((math.log(x) - math.log(self.median)) / self.sigma)

    def from_scores(self, z: np.ndarray) -> np.ndarray:
        """Map standard-normal scores onto thresholds."""
        return self.median * np.exp(self.sigma * z)


@dataclass(frozen=True)
class VendorProfile:
    name: str
    w_diff: float
    w_same: float
    threshold: ThresholdDist
    noise_amp: float
    behavior_class: BehaviorClass

    def __post_init__(self):
        object.__setattr__(self, "behavior_class", BehaviorClass(self.behavior_class))
        if not self.w_diff > 0:
            raise ConfigurationError(f"{self.name}: w_diff must be > 0")
        if not self.w_same >= 0:
            raise ConfigurationError(f"{self.name}: w_same must be >= 0")
        if not 0 <= self.noise_amp <= 0.5:
            raise ConfigurationError(f"{self.name}: noise_amp must lie in [0, 0.5]")
        cls = self.behavior_class
        if cls is BehaviorClass.OVERLAP and self.w_same != self.w_diff:
            raise ConfigurationError(f"{self.name}: OVERLAP requires w_same == w_diff")
        if cls is BehaviorClass.REDUCED and not self.w_same < self.w_diff:
            raise ConfigurationError(f"{self.name}: REDUCED requires w_same < w_diff")
        if cls is BehaviorClass.INVERTED and not self.w_same > self.w_diff:
            raise ConfigurationError(f"{self.name}: INVERTED requires w_same > w_diff")

    def replace(self, **changes) -> "VendorProfile":
        fields = dict(
            name=self.name,
            w_diff=self.w_diff,
            w_same=self.w_same,
            threshold=self.threshold,
            noise_amp=self.noise_amp,
            behavior_class=self.behavior_class,
        )
        fields.update(changes)
        return VendorProfile(**fields)

    def max_disturbance(self, hc: float) -> float:
        # The charge-difference gate needs one differing neighbor, so the
        # strongest context is one differing plus the stronger second weight.
        return hc * (self.w_diff + max(self.w_diff, self.w_same))


@dataclass(frozen=True)
class HammerContext:
    victim_row: int
    hammered_neighbors: tuple[int, ...]
    hc: int

    def __post_init__(self):
        neighbors = tuple(sorted(set(self.hammered_neighbors)))
        object.__setattr__(self, "hammered_neighbors", neighbors)
        if not neighbors:
            raise ValueError("hammered_neighbors must be nonempty")
        allowed = {self.victim_row - 1, self.victim_row + 1}
        if not set(neighbors) <= allowed:
            raise ValueError(
                f"hammered neighbors {neighbors} are not adjacent to row {self.victim_row}"
            )
        if self.hc < 0:
            raise ValueError("hc must be >= 0")


def disturbance(cell_bit: int, neighbor_bits: Iterable[int], profile: VendorProfile, hc: int) -> float:
    """Accumulated disturbance on one cell from its hammered neighbors."""
    if hc < 0:
        raise ValueError("hc must be >= 0")
    weight = sum(profile.w_diff if nb != cell_bit else profile.w_same for nb in neighbor_bits)
    return hc * weight


# ---------------------------------------------------------------------------
# Deterministic randomness


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(_GOLDEN)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _splitmix64_int(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def trial_key(device_seed: int, trial_seed: int) -> int:
    return _splitmix64_int(_splitmix64_int(device_seed & _MASK64) ^ (trial_seed & _MASK64))


def cell_jitter(device_seed: int, trial_seed: int, cell_index: np.ndarray, amp: float) -> np.ndarray:
    """Uniform multiplicative threshold jitter in [-amp, amp) per (cell, trial)."""
    if amp == 0:
        return np.zeros(np.shape(cell_index))
    key = np.uint64(trial_key(device_seed, trial_seed))
    z = _splitmix64(np.asarray(cell_index, dtype=np.uint64) ^ key)
    u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return amp * (2.0 * u - 1.0)


def standard_scores(config: DeviceConfig, rows: Iterable[int] | None = None):
    """Yield ``(row_start, z)`` chunks of the device's per-cell normal scores.

    The stream depends only on geometry and seed, so thresholds for any
    profile are a monotone transform of the same scores.
    """
    wanted = None if rows is None else set(rows)
    rng = np.random.default_rng(config.seed)
    for start in range(0, config.rows, _SCORE_CHUNK_ROWS):
        n = min(_SCORE_CHUNK_ROWS, config.rows - start)
        z = rng.standard_normal((n, config.cols))
        if wanted is None:
            yield start, z
        else:
            for r in range(start, start + n):
                if r in wanted:
                    yield r, z[r - start : r - start + 1]


def threshold_cutoff(config: DeviceConfig, profile: VendorProfile) -> float:
    if config.hc_max is None:
        return math.inf
    if profile.noise_amp >= 1:
        return math.inf
    return profile.max_disturbance(config.hc_max) / (1.0 - profile.noise_amp)


@functools.lru_cache(maxsize=16)
def _vulnerable_index(config: DeviceConfig, profile: VendorProfile):
    cutoff = threshold_cutoff(config, profile)
    counts = np.zeros(config.rows, dtype=np.int64)
    cols_parts, thr_parts = [], []
    for start, z in standard_scores(config):
        thr = profile.threshold.from_scores(z)
        keep = thr <= cutoff
        counts[start : start + z.shape[0]] = keep.sum(axis=1)
        r_idx, c_idx = np.nonzero(keep)
        cols_parts.append(c_idx.astype(np.int32))
        thr_parts.append(thr[r_idx, c_idx])
    row_ptr = np.concatenate([[0], np.cumsum(counts)])
    vcols = np.concatenate(cols_parts) if cols_parts else np.zeros(0, np.int32)
    vthr = np.concatenate(thr_parts) if thr_parts else np.zeros(0)
    for arr in (row_ptr, vcols, vthr):
        arr.setflags(write=False)
    return row_ptr, vcols, vthr


class Device:
    """One simulated bank. Single-writer: do not share across threads."""

    def __init__(self, config: DeviceConfig, profile: VendorProfile):
        self.config = config
        self.profile = profile
        self.bits = np.zeros((config.rows, config.cols), dtype=np.uint8)
        self._row_ptr, self._vcols, self._vthr = _vulnerable_index(config, profile)

    @property
    def rows(self) -> int:
        return self.config.rows

    @property
    def cols(self) -> int:
        return self.config.cols

    @property
    def n_vulnerable(self) -> int:
        return int(self._vthr.size)

    @property
    def cutoff(self) -> float:
        return threshold_cutoff(self.config, self.profile)

    def check_row(self, row: int) -> None:
        if not 0 <= row < self.config.rows:
            raise AddressingError(f"row {row} outside bank of {self.config.rows} rows")

    def vulnerable_cells(self, row: int) -> tuple[np.ndarray, np.ndarray]:
        """Columns and thresholds of the materialized cells of ``row``."""
        self.check_row(row)
        lo, hi = self._row_ptr[row], self._row_ptr[row + 1]
        return self._vcols[lo:hi], self._vthr[lo:hi]

    def threshold_at(self, row: int, col: int) -> float:
        """Threshold of one cell; ``inf`` stands for 'beyond the cutoff'."""
        cols, thr = self.vulnerable_cells(row)
        pos = np.searchsorted(cols, col)
        if pos < cols.size and cols[pos] == col:
            return float(thr[pos])
        return math.inf

    def thresholds_bytes(self) -> bytes:
        return self._row_ptr.tobytes() + self._vcols.tobytes() + self._vthr.tobytes()

    def read_row(self, row: int) -> np.ndarray:
        self.check_row(row)
        return self.bits[row].copy()

    def write_row(self, row: int, pattern) -> None:
        self.check_row(row)
        pattern = np.asarray(pattern, dtype=np.uint8)
        if pattern.shape != (self.config.cols,):
            raise ValueError(f"pattern length {pattern.size} != cols {self.config.cols}")
        if np.any(pattern > 1):
            raise ValueError("pattern must contain only 0/1 bits")
        self.bits[row] = pattern

    def copy(self) -> "Device":
        other = Device.__new__(Device)
        other.config = self.config
        other.profile = self.profile
        other.bits = self.bits.copy()
        other._row_ptr, other._vcols, other._vthr = self._row_ptr, self._vcols, self._vthr
        return other


def new_device(config: DeviceConfig, profile: VendorProfile) -> Device:
    return Device(config, profile)


def flips_for(device: Device, ctx: HammerContext, trial_seed: int) -> set[tuple[int, int]]:
    """Apply one hammering episode to ``ctx.victim_row`` and return the flipped cells."""
    cfg = device.config
    device.check_row(ctx.victim_row)
    for nb in ctx.hammered_neighbors:
        if not 0 <= nb < cfg.rows:
            raise AddressingError(
                f"victim row {ctx.victim_row} has no neighbor row {nb} in a {cfg.rows}-row bank"
            )
    if cfg.hc_max is not None and ctx.hc > cfg.hc_max:
        raise ValueError(f"hc {ctx.hc} exceeds the device's hc_max {cfg.hc_max}")
    if ctx.hc == 0:
        return set()

    prof = device.profile
    cols, thr = device.vulnerable_cells(ctx.victim_row)
    if cols.size == 0:
        return set()
    victim_bits = device.bits[ctx.victim_row, cols]
    weight = np.zeros(cols.size)
    differs_any = np.zeros(cols.size, dtype=bool)
    for nb in ctx.hammered_neighbors:
        differs = device.bits[nb, cols] != victim_bits
        differs_any |= differs
        weight += np.where(differs, prof.w_diff, prof.w_same)
    dist = ctx.hc * weight
    jitter = cell_jitter(
        cfg.seed, trial_seed, ctx.victim_row * cfg.cols + cols.astype(np.int64), prof.noise_amp
    )
    flip = differs_any & (dist >= thr * (1.0 + jitter))
    flipped_cols = cols[flip]
    device.bits[ctx.victim_row, flipped_cols] ^= 1
    return {(ctx.victim_row, int(c)) for c in flipped_cols}


# ---------------------------------------------------------------------------
# Vendor profiles

# Reference campaign used to calibrate the built-in profiles: the device
# geometry/seed and the victim rows below, hammered at 1M.
REFERENCE_CONFIG = DeviceConfig(rows=1024, cols=8192, seed=2024)
REFERENCE_VICTIMS = tuple(range(64, 1024, 128))
REFERENCE_HC = 1_000_000

# Produced by ``hammerlab calibrate`` against the reference campaign; see
# CALIBRATION_TARGETS in profiler.py. Regenerated values are checked in tests.
_BUILTIN = {
    "mf-A": (BehaviorClass.OVERLAP, 1.0, 1.0, 17028046.02468814, 1.8440821698965233, 0.01),
    "mf-B": (BehaviorClass.REDUCED, 1.0, 0.7562934290282888, 3468580.1720338706, 0.6665112920286588, 0.01),
    "mf-C": (BehaviorClass.INVERTED, 1.0, 1.3523763188092257, 7878396.771335709, 1.3427162903226044, 0.01),
    "mf-D": (BehaviorClass.OVERLAP, 1.0, 1.0, 14687709.484623149, 1.3475792015674506, 0.2),
    "mf-E": (BehaviorClass.REDUCED, 1.0, 0.768829963869311, 3985234.8478551437, 0.6635862613505088, 0.01),
    "mf-F": (BehaviorClass.REDUCED, 1.0, 0.7587613182930795, 4046752.5913790558, 0.7302395025831565, 0.01),
    "mf-G": (BehaviorClass.OVERLAP, 1.0, 1.0, 14409364.219118915, 1.5106335812352756, 0.2),
}


def builtin_profiles() -> dict[str, VendorProfile]:
    return {
        name: VendorProfile(
            name=name,
            w_diff=w_diff,
            w_same=w_same,
            threshold=ThresholdDist(median=median, sigma=sigma),
            noise_amp=noise,
            behavior_class=cls,
        )
        for name, (cls, w_diff, w_same, median, sigma, noise) in _BUILTIN.items()
    }


PROFILE_KEYS = ("class", "w_diff", "w_same", "median", "sigma", "noise_amp")


def profiles_from_config(parser: configparser.ConfigParser) -> dict[str, VendorProfile]:
    """Build profiles from an INI document, one section per profile.

    Keys per section: ``class`` (OVERLAP/REDUCED/INVERTED), ``w_diff``,
    ``w_same``, ``median``, ``sigma``, ``noise_amp`` and optionally
    ``family`` (only ``lognormal``).
    """
    out = {}
    for name in parser.sections():
        sec = parser[name]
        missing = [k for k in PROFILE_KEYS if k not in sec]
        if missing:
            raise ConfigurationError(f"profile {name!r} missing keys: {', '.join(missing)}")
        try:
            out[name] = VendorProfile(
                name=name,
                w_diff=sec.getfloat("w_diff"),
                w_same=sec.getfloat("w_same"),
                threshold=ThresholdDist(
                    median=sec.getfloat("median"),
                    sigma=sec.getfloat("sigma"),
                    family=sec.get("family", "lognormal"),
                ),
                noise_amp=sec.getfloat("noise_amp"),
                behavior_class=BehaviorClass(sec.get("class").strip().upper()),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"profile {name!r}: {exc}") from exc
    return out


def load_profiles(path: str | Path) -> dict[str, VendorProfile]:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return profiles_from_config(parser)


def dump_profiles(profiles: Mapping[str, VendorProfile]) -> str:
    lines = []
    for name, p in profiles.items():
        lines += [
            f"[{name}]",
            f"class = {p.behavior_class.value}",
            f"w_diff = {p.w_diff!r}",
            f"w_same = {p.w_same!r}",
            f"family = {p.threshold.family}",
            f"median = {p.threshold.median!r}",
            f"sigma = {p.threshold.sigma!r}",
            f"noise_amp = {p.noise_amp!r}",
            "",
        ]
    return "\n".join(lines)


def resolve_profile(name: str, extra: Mapping[str, VendorProfile] | None = None) -> VendorProfile:
    table = dict(builtin_profiles())
    if extra:
        table.update(extra)
    try:
        return table[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown vendor profile {name!r}; known: {', '.join(sorted(table))}"
        ) from None
