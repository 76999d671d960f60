"""Hammer-count sweeps over SG/VC/DB programs and what is derived from them.

A sweep runs every (model, hc, trial) grid point on a freshly built device,
so points never share accumulated damage. Trials differ only in the seed
that drives per-trial threshold jitter.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .commands import DDR4_2400, TimingParams, execute
from .device import (
    REFERENCE_CONFIG,
    REFERENCE_HC,
    REFERENCE_VICTIMS,
    BehaviorClass,
    DeviceConfig,
    ThresholdDist,
    VendorProfile,
    new_device,
    standard_scores,
)
from .errors import CalibrationError, ConfigurationError, HammerLabError, UndefinedMetricError, attach_context
from .patterns import (
    MODELS,
    AttackModel,
    PatternSpec,
    anchor_for_victim,
    build_program,
    detect_bitflips,
)

HC_CAP = 1_000_000
DEFAULT_HC_LEVELS = tuple(int(round(x)) for x in np.geomspace(1e4, 1e6, 8))
DEFAULT_TRIALS = 5
MIN_STABILITY_TRIALS = 10

Cell = tuple[int, int]


@dataclass(frozen=True)
class SweepPlan:
    profile: VendorProfile
    config: DeviceConfig = REFERENCE_CONFIG
    hc_levels: tuple[int, ...] = DEFAULT_HC_LEVELS
    models: tuple[AttackModel, ...] = MODELS
    trials: int = DEFAULT_TRIALS
    victim_rows: tuple[int, ...] = REFERENCE_VICTIMS
    timing: TimingParams = DDR4_2400
    trial_seed: int = 0
    fill: int = 1
    orientation: str = "listing"
    convention: str = "tras"

    def __post_init__(self):
        levels = tuple(int(h) for h in self.hc_levels)
        object.__setattr__(self, "hc_levels", levels)
        object.__setattr__(self, "models", tuple(AttackModel(m) for m in self.models))
        object.__setattr__(self, "victim_rows", tuple(int(v) for v in self.victim_rows))
        if not levels:
            raise ConfigurationError("hc_levels must be nonempty")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ConfigurationError("hc_levels must be strictly ascending")
        if levels[0] < 0 or levels[-1] > HC_CAP:
            raise ConfigurationError(f"hc_levels must lie in [0, {HC_CAP}]")
        if not self.models or len(set(self.models)) != len(self.models):
            raise ConfigurationError("models must be a nonempty set of SG/VC/DB")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if not self.victim_rows:
            raise ConfigurationError("victim_rows must be nonempty")
        if self.fill not in (0, 1):
            raise ConfigurationError("fill must be 0 or 1")
        for v in self.victim_rows:
            for m in self.models:
                r = anchor_for_victim(m, v, self.orientation)
                if r < 0 or r + 2 >= self.config.rows:
                    raise ConfigurationError(
                        f"victim row {v} leaves the {m} window outside a {self.config.rows}-row bank"
                    )

    def spec(self, model: AttackModel, victim: int, hc: int) -> PatternSpec:
        anchor = anchor_for_victim(model, victim, self.orientation)
        return PatternSpec.uniform(anchor, self.config.cols, hc, fill=self.fill)


@dataclass
class ProfileResult:
    plan: SweepPlan
    flips: dict[tuple[AttackModel, int, int], frozenset[Cell]]

    def __post_init__(self):
        want = {(m, h, t) for m in self.plan.models for h in self.plan.hc_levels for t in range(self.plan.trials)}
        if set(self.flips) != want:
            raise HammerLabError("profile result grid is incomplete")

    def count(self, model, hc: int, trial: int) -> int:
        return len(self.flips[(AttackModel(model), hc, trial)])

    def counts(self, model, hc: int) -> list[int]:
        model = self._model(model)
        return [len(self.flips[(model, hc, t)]) for t in range(self.plan.trials)]

    def union(self, model, hc: int) -> frozenset[Cell]:
        model = self._model(model)
        return frozenset().union(*(self.flips[(model, hc, t)] for t in range(self.plan.trials)))

    def universe(self) -> list[Cell]:
        return [(v, c) for v in sorted(set(self.plan.victim_rows)) for c in range(self.plan.config.cols)]

    def _model(self, model) -> AttackModel:
        try:
            model = AttackModel(model)
        except ValueError:
            raise KeyError(f"unknown attack model {model!r}") from None
        if model not in self.plan.models:
            raise KeyError(f"model {model} not present in this result")
        return model

    # -- persistence -------------------------------------------------------

    def to_jsonl(self) -> str:
        """One metadata line, then one line per grid point (model, hc, trial order)."""
        p = self.plan
        meta = {
            "type": "meta",
            "profile": _profile_dict(p.profile),
            "config": asdict(p.config),
            "timing": asdict(p.timing),
            "hc_levels": list(p.hc_levels),
            "models": [m.value for m in p.models],
            "trials": p.trials,
            "victim_rows": list(p.victim_rows),
            "trial_seed": p.trial_seed,
            "fill": p.fill,
            "orientation": p.orientation,
            "convention": p.convention,
        }
        lines = [json.dumps(meta, sort_keys=True)]
        for m in p.models:
            for h in p.hc_levels:
                for t in range(p.trials):
                    cells = sorted(self.flips[(m, h, t)])
                    rec = {"type": "point", "model": m.value, "hc": h, "trial": t, "count": len(cells),
                           "flips": [list(c) for c in cells]}
                    lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "ProfileResult":
        lines = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not lines or lines[0].get("type") != "meta":
            raise ConfigurationError("result file lacks a metadata record")
        meta = lines[0]
        plan = SweepPlan(
            profile=_profile_from_dict(meta["profile"]),
            config=DeviceConfig(**meta["config"]),
            hc_levels=tuple(meta["hc_levels"]),
            models=tuple(meta["models"]),
            trials=meta["trials"],
            victim_rows=tuple(meta["victim_rows"]),
            timing=TimingParams(**meta["timing"]),
            trial_seed=meta["trial_seed"],
            fill=meta["fill"],
            orientation=meta["orientation"],
            convention=meta["convention"],
        )
        flips = {}
        for rec in lines[1:]:
            cells = frozenset((int(r), int(c)) for r, c in rec["flips"])
            if len(cells) != rec["count"]:
                raise ConfigurationError(f"record {rec['model']}/{rec['hc']}/{rec['trial']}: count mismatch")
            flips[(AttackModel(rec["model"]), int(rec["hc"]), int(rec["trial"]))] = cells
        return cls(plan, flips)


def _profile_dict(p: VendorProfile) -> dict:
    return {
        "name": p.name,
        "class": p.behavior_class.value,
        "w_diff": p.w_diff,
        "w_same": p.w_same,
        "family": p.threshold.family,
        "median": p.threshold.median,
        "sigma": p.threshold.sigma,
        "noise_amp": p.noise_amp,
    }


def _profile_from_dict(d: Mapping) -> VendorProfile:
    return VendorProfile(
        name=d["name"],
        w_diff=d["w_diff"],
        w_same=d["w_same"],
        threshold=ThresholdDist(median=d["median"], sigma=d["sigma"], family=d.get("family", "lognormal")),
        noise_amp=d["noise_amp"],
        behavior_class=BehaviorClass(d["class"]),
    )


def _run_cell(plan: SweepPlan, template, victim: int, model: AttackModel, hc: int):
    spec = plan.spec(model, victim, hc)
    out = {}
    try:
        trace = build_program(
            model, spec, plan.timing, rows=plan.config.rows,
            orientation=plan.orientation, convention=plan.convention,
        )
    except HammerLabError as exc:
        raise attach_context(exc, model=model.value, hc=hc, victim=victim) from None
    for t in range(plan.trials):
        try:
            device = template.copy()
            log = execute(device, trace, plan.trial_seed + t, plan.convention)
            out[(model, hc, t)] = detect_bitflips(log, spec, model, plan.orientation)
        except (HammerLabError, ValueError) as exc:
            raise attach_context(exc, model=model.value, hc=hc, trial=t, victim=victim) from None
    return out


def run_sweep(plan: SweepPlan, workers: int = 1) -> ProfileResult:
    """Execute every grid point of ``plan``; the merge is independent of completion order."""
    jobs = [(v, m, h) for v in plan.victim_rows for m in plan.models for h in plan.hc_levels]
    # Thresholds are read-only and shared; each grid point copies the zeroed bits.
    template = new_device(plan.config, plan.profile)
    grid: dict = {(m, h, t): set() for m in plan.models for h in plan.hc_levels for t in range(plan.trials)}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda j: _run_cell(plan, template, *j), jobs))
    else:
        parts = (_run_cell(plan, template, *j) for j in jobs)
    for part in parts:
        for key, cells in part.items():
            grid[key] |= cells
    return ProfileResult(plan, {k: frozenset(v) for k, v in grid.items()})


# ---------------------------------------------------------------------------
# Derived views


@dataclass(frozen=True)
class CurvePoint:
    hc: int
    mean: float
    min: int
    max: int


def flip_curve(result: ProfileResult, model) -> list[CurvePoint]:
    out = []
    for hc in result.plan.hc_levels:
        counts = result.counts(model, hc)
        out.append(CurvePoint(hc, sum(counts) / len(counts), min(counts), max(counts)))
    return out


BUCKET_COLORS = ("none", "bright yellow", "orange", "red", "dark red")


@dataclass
class PersistenceMap:
    model: AttackModel
    n_levels: int
    persistence: dict[Cell, int] = field(default_factory=dict)
    first_tier: dict[Cell, int] = field(default_factory=dict)

    def __getitem__(self, cell: Cell) -> int:
        return self.persistence.get(cell, 0)

    def bucket(self, cell: Cell) -> int:
        """0 (never flipped) .. 4 (darkest)."""
        return math.ceil(4 * self[cell] / self.n_levels)

    def rows(self) -> list[tuple[int, int, int, int]]:
        return [(r, c, n, self.bucket((r, c))) for (r, c), n in sorted(self.persistence.items())]


def persistence_map(result: ProfileResult, model) -> PersistenceMap:
    """Per cell, the number of HC tiers at which it flipped in any trial."""
    levels = result.plan.hc_levels
    if len(levels) < 2:
        raise ValueError("persistence needs at least two hc levels")
    pm = PersistenceMap(result._model(model), len(levels))
    for tier, hc in enumerate(levels):
        for cell in result.union(model, hc):
            pm.persistence[cell] = pm.persistence.get(cell, 0) + 1
            pm.first_tier.setdefault(cell, tier)
    return pm


def stability(result: ProfileResult, model, hc: int) -> float:
    """Relative fluctuation (max - min) / mean of the flip count across trials."""
    counts = result.counts(model, hc)
    if len(counts) < 2:
        raise ValueError("stability needs at least two trials")
    mean = sum(counts) / len(counts)
    if mean == 0:
        raise UndefinedMetricError(f"no flips for {model} at hc={hc}; stability undefined")
    return (max(counts) - min(counts)) / mean


def stability_series(result: ProfileResult, model) -> list[tuple[int, float | None]]:
    out = []
    for hc in result.plan.hc_levels:
        try:
            out.append((hc, stability(result, model, hc)))
        except UndefinedMetricError:
            out.append((hc, None))
    return out


# ---------------------------------------------------------------------------
# Calibration


@dataclass(frozen=True)
class CalibrationTarget:
    """Flip-count targets at the reference hammer count.

    ``vc_db`` = count(VC)/count(DB), ``vc_sg`` = count(VC)/count(SG) and
    ``sg_count`` the SG flip count over the reference victim rows.
    """

    vc_db: float
    vc_sg: float
    sg_count: int
    noise_amp: float = 0.01

    @property
    def behavior_class(self) -> BehaviorClass:
        if self.vc_db == 1.0:
            return BehaviorClass.OVERLAP
        return BehaviorClass.REDUCED if self.vc_db < 1.0 else BehaviorClass.INVERTED

    def counts(self) -> tuple[float, float, float]:
        sg = float(self.sg_count)
        vc = sg * self.vc_sg
        return sg, vc, vc / self.vc_db


# Targets behind the built-in profiles. REDUCED vendors: VC about 25% below
# DB and several times SG; OVERLAP: VC == DB; INVERTED: VC above DB.
# mf-D and mf-G carry high per-trial jitter.
CALIBRATION_TARGETS = {
    "mf-A": CalibrationTarget(vc_db=1.0, vc_sg=2.0, sg_count=4000),
    "mf-B": CalibrationTarget(vc_db=0.75, vc_sg=5.0, sg_count=2000),
    "mf-C": CalibrationTarget(vc_db=1.2, vc_sg=3.0, sg_count=4000),
    "mf-D": CalibrationTarget(vc_db=1.0, vc_sg=3.0, sg_count=1500, noise_amp=0.2),
    "mf-E": CalibrationTarget(vc_db=0.74, vc_sg=6.0, sg_count=1200),
    "mf-F": CalibrationTarget(vc_db=0.76, vc_sg=4.6, sg_count=1800),
    "mf-G": CalibrationTarget(vc_db=1.0, vc_sg=2.5, sg_count=2500, noise_amp=0.2),
}


@dataclass
class CalibrationReport:
    profile: VendorProfile
    iterations: int
    counts: dict[str, int]
    ratios: dict[str, float]
    converged: bool


def _reference_scores(config: DeviceConfig, victims: Iterable[int]) -> np.ndarray:
    rows = dict(standard_scores(config, rows=set(victims)))
    return np.sort(np.concatenate([rows[v].ravel() for v in sorted(set(victims))]))


def calibrate(
    target: CalibrationTarget,
    name: str = "custom",
    *,
    config: DeviceConfig = REFERENCE_CONFIG,
    victim_rows: Iterable[int] = REFERENCE_VICTIMS,
    hc: int = REFERENCE_HC,
    w_diff: float = 1.0,
    tolerance: float = 0.05,
    max_iters: int = 500,
) -> CalibrationReport:
    """Fit (w_same, threshold median, sigma) so noise-free counts hit ``target``.

    Coordinate descent on the reference device's own per-cell scores: sigma
    is solved against the SG count with the median fixed, then the median
    against the DB count with sigma fixed, until both settle; w_same is then
    solved against the VC count. Each coordinate update is an exact
    one-dimensional solve placing the count boundary midway between two
    adjacent order statistics.
    """
    z = _reference_scores(config, victim_rows)
    n_sg, n_vc, n_db = target.counts()
    for label, n in (("SG", n_sg), ("VC", n_vc), ("DB", n_db)):
        if not 1 <= n < z.size:
            raise CalibrationError(f"{label} target count {n:.0f} outside 1..{z.size - 1}")

    def boundary(n: float) -> float:
        k = int(round(n))
        return 0.5 * (z[k - 1] + z[k])

    q_sg, q_db = float(boundary(n_sg)), float(boundary(n_db))
    l_sg = math.log(hc * w_diff)
    l_db = math.log(2 * hc * w_diff)
    log_median, sigma = l_db - 0.8 * q_db, 0.8
    it = 0
    for it in range(1, max_iters + 1):
        new_sigma = (l_sg - log_median) / q_sg
        new_log_median = l_db - new_sigma * q_db
        done = abs(new_sigma - sigma) <= 1e-13 * abs(sigma) and abs(new_log_median - log_median) <= 1e-13
        sigma, log_median = new_sigma, new_log_median
        if done:
            break
    if not (sigma > 0 and math.isfinite(sigma)):
        raise CalibrationError(f"no positive sigma fits these targets (got {sigma})")

    cls = target.behavior_class
    if cls is BehaviorClass.OVERLAP:
        w_same = w_diff
    else:
        w_same = math.exp(log_median + sigma * float(boundary(n_vc))) / hc - w_diff

    def count(d: float) -> int:
        return int(np.searchsorted(z, (math.log(d) - log_median) / sigma, side="right"))

    counts = {"SG": count(hc * w_diff), "VC": count(hc * (w_diff + w_same)), "DB": count(2 * hc * w_diff)}
    ratios = {
        "VC/DB": counts["VC"] / counts["DB"] if counts["DB"] else math.inf,
        "VC/SG": counts["VC"] / counts["SG"] if counts["SG"] else math.inf,
    }
    ok = (
        abs(ratios["VC/DB"] / target.vc_db - 1) <= tolerance
        and abs(ratios["VC/SG"] / target.vc_sg - 1) <= tolerance
        and abs(counts["SG"] / n_sg - 1) <= tolerance
    )
    try:
        profile = VendorProfile(
            name=name,
            w_diff=w_diff,
            w_same=w_same,
            threshold=ThresholdDist(median=math.exp(log_median), sigma=sigma),
            noise_amp=target.noise_amp,
            behavior_class=cls,
        )
    except ConfigurationError as exc:
        raise CalibrationError(f"fitted parameters violate the {cls} class: {exc}") from exc
    report = CalibrationReport(profile, it, counts, ratios, ok)
    if not ok:
        raise CalibrationError(
            f"calibration missed targets by more than {tolerance:.0%}: counts={counts} ratios={ratios}",
            best=report,
        )
    return report
