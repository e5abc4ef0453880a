"""Worst-case distance heuristics in a planar embedding, and empirical checks
of them against scenario reports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ProvenanceError

__all__ = [
    "GeometryCase",
    "Check",
    "predict_st_gray",
    "ma_whitebox_interval",
    "check_st_gray",
    "check_ma_white",
    "verify_orderings",
]

ORDER_SLACK = 0.02


@dataclass(frozen=True)
class GeometryCase:
    ell: float  # residual distance between the example and its optimisation target
    g: float  # genuine distance between the target image and an enrolled image
    tau: float = 0.5
    n_targets: int = 1

    def __post_init__(self):
        for name in ("ell", "g", "tau"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.n_targets < 1:
            raise ConfigError("n_targets must be >= 1")


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool | None  # None: not applicable to the given reports
    value: float = float("nan")
    bound: float = float("nan")
    detail: str = ""

    def line(self) -> str:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[self.passed]
        return f"{status} {self.name}: {self.value:.4f} vs {self.bound:.4f} {self.detail}".rstrip()


def predict_st_gray(case: GeometryCase) -> float:
    """Gray-box distance when the residual and the system error are orthogonal."""
    return math.hypot(case.g, case.ell)


def ma_whitebox_interval(tau: float) -> tuple[float, float]:
    """``(lower, upper]`` for the white-box distance of a two-user morph.

    The upper end is the midpoint of two antipodal users (0.5 on the unit
    diameter); a distance at or below ``tau / 2`` would mean both users sat
    within ``tau`` of each other, which contradicts the worst case.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    return tau / 2.0, 0.5


def check_st_gray(report, slack: float = 0.05, quantile: float = 0.9) -> Check:
    """Measured gray-box distance vs the planar prediction, per ST run."""
    recs = [r["mtadv"] if "mtadv" in r else r for r in report.records]
    if not recs:
        return Check("st_gray_planar", None, detail="no runs")
    ok = [r["gray_dissim"] <= predict_st_gray(GeometryCase(r["dissim"], r["g"])) + slack for r in recs]
    frac = float(np.mean(ok))
    return Check("st_gray_planar", frac >= quantile, frac, quantile, f"(slack {slack}, {len(recs)} runs)")


def check_ma_white(report, slack: float = 0.02) -> list[Check]:
    """Mean white-box MA distance against the upper bound; runs at or below the
    lower bound are counted and reported, not failed."""
    recs = report.records
    if not recs:
        return [Check("ma_white_upper", None, detail="no runs")]
    tau = report.spec.systems[0].tau
    lower, upper = ma_whitebox_interval(tau)
    dists = np.array([d for r in recs for d in r["dissim_users"]])
    below = float(np.mean(dists <= lower))
    return [
        Check("ma_white_upper", float(dists.mean()) <= upper + slack, float(dists.mean()), upper + slack),
        Check("ma_white_below_lower", True, below, lower, "(fraction of distances at or below tau/2; flagged only)"),
    ]


def _provenance(report) -> tuple:
    ds = report.dataset or {}
    return report.spec.seed, ds.get("seed"), ds.get("n_subjects"), str(ds.get("params"))


def _primary_ua_row(report):
    k = max(1, report.spec.imgs_per_target)
    return report.row(f"UA-k{k}")


def verify_orderings(reports: Sequence, slack: float = ORDER_SLACK) -> list[Check]:
    """Difficulty ordering across scenarios run on one benchmark.

    Checks gray ASR(ST) >= ASR(MA) - slack, ASR(MA) >= ASR(UA) - slack and,
    across UA reports on different systems, that a larger threshold never
    yields a lower UA rate.
    """
    reports = list(reports)
    if not reports:
        return []
    marks = {_provenance(r) for r in reports}
    if len(marks) > 1:
        raise ProvenanceError(f"reports come from different benchmarks/seeds: {sorted(map(str, marks))}")
    by_kind: dict[str, list] = {}
    for r in reports:
        by_kind.setdefault(r.spec.kind, []).append(r)
    checks = []

    def gray(kind):
        if kind == "UA":
            return _primary_ua_row(by_kind["UA"][0]).asr_gray
        return by_kind[kind][0].rows[0].asr_gray

    for hi, lo in (("ST", "MA"), ("MA", "UA")):
        name = f"gray_{hi}_ge_{lo}"
        if hi in by_kind and lo in by_kind:
            a, b = gray(hi), gray(lo)
            checks.append(Check(name, a >= b - slack, a, b - slack))
        else:
            checks.append(Check(name, None, detail="missing report"))
    uas = by_kind.get("UA", [])
    if len({u.spec.systems[0].system_id for u in uas}) >= 2:
        pts = sorted((u.spec.systems[0].tau, _primary_ua_row(u).asr_gray) for u in uas)
        ok = all(b[1] >= a[1] - slack for a, b in zip(pts, pts[1:]))
        worst = min((b[1] - a[1] for a, b in zip(pts, pts[1:])), default=0.0)
        checks.append(Check("ua_higher_tau_easier", ok, worst, -slack, f"({len(pts)} systems)"))
    else:
        checks.append(Check("ua_higher_tau_easier", None, detail="needs UA reports on >= 2 systems"))
    return checks
