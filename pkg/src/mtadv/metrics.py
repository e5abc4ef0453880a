"""Feature distances, EER calibration, ROC, attack success rate and SSIM."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CalibrationError, ConfigError, ShapeError

__all__ = [
    "DistanceKind",
    "ScorePair",
    "RocCurve",
    "dissimilarity",
    "pairwise_dissimilarity",
    "calibrate_eer",
    "roc",
    "asr",
    "verify_access",
    "ssim",
]

UNIT_TOL = 1e-6


class DistanceKind(str, Enum):
    UNIT_L2_HALVED = "unit_l2_halved"
    COS_DISSIM = "cos_dissim"


@dataclass(frozen=True)
class ScorePair:
    label: str  # "genuine" | "impostor"
    score: float

    def __post_init__(self):
        if self.label not in ("genuine", "impostor"):
            raise ValueError(f"label must be genuine or impostor, not {self.label!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def _check_unit(v: np.ndarray, name: str):
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} is not unit-norm (|norm - 1| = {np.max(np.abs(norms - 1.0)):.2e})")


def dissimilarity(u, v, kind: DistanceKind | str = DistanceKind.UNIT_L2_HALVED) -> float:
    """Distance in [0, 1] between unit vectors; 0 for identical, 1 for antipodal."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_unit(u, "u")
    _check_unit(v, "v")
    kind = DistanceKind(kind)
    if kind is DistanceKind.COS_DISSIM:
        d = 0.5 * (1.0 - float(u @ v))
    else:
        d = 0.5 * float(np.linalg.norm(u - v))
    return min(max(d, 0.0), 1.0)


def pairwise_dissimilarity(U, V, kind: DistanceKind | str = DistanceKind.UNIT_L2_HALVED) -> np.ndarray:
    """Row-wise distances between two stacks of unit vectors (broadcasting)."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if DistanceKind(kind) is DistanceKind.COS_DISSIM:
        d = 0.5 * (1.0 - np.sum(U * V, axis=-1))
    else:
        d = 0.5 * np.sqrt(np.sum((U - V) ** 2, axis=-1))
    return np.clip(d, 0.0, 1.0)


def _split_scores(scores) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, tuple) and len(scores) == 2 and not isinstance(scores[0], ScorePair):
        genuine, impostor = (np.asarray(s, dtype=np.float64).ravel() for s in scores)
    else:
        genuine = np.array([s.score for s in scores if s.label == "genuine"])
        impostor = np.array([s.score for s in scores if s.label == "impostor"])
    if genuine.size == 0 or impostor.size == 0:
        raise CalibrationError("need at least one genuine and one impostor score")
    return genuine, impostor


def _operating_points(genuine: np.ndarray, impostor: np.ndarray):
    thresholds = np.unique(np.concatenate([genuine, impostor]))
    fpr = np.searchsorted(np.sort(impostor), thresholds, side="right") / impostor.size
    fnr = 1.0 - np.searchsorted(np.sort(genuine), thresholds, side="right") / genuine.size
    return thresholds, fpr, fnr


def calibrate_eer(scores) -> tuple[float, float]:
    """Threshold and equal error rate for dissimilarity scores.

    ``scores`` is a list of :class:`ScorePair` or a ``(genuine, impostor)``
    tuple of arrays.  A comparison is accepted when its score is at most the
    threshold.  FPR and FNR are evaluated at every distinct score and joined
    linearly; the first crossing gives ``(tau, eer)``.
    """
    genuine, impostor = _split_scores(scores)
    thresholds, fpr, fnr = _operating_points(genuine, impostor)
    if thresholds.size == 1:
        raise CalibrationError("all scores identical; the EER is undefined")
    # left limit of the first threshold: nothing accepted
    t = np.concatenate([[thresholds[0]], thresholds])
    f = np.concatenate([[0.0], fpr])
    m = np.concatenate([[1.0], fnr])
    diff = f - m
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return float(t[i]), float(f[i])
    lam = -diff[i - 1] / (diff[i] - diff[i - 1])
    tau = t[i - 1] + lam * (t[i] - t[i - 1])
    eer = f[i - 1] + lam * (f[i] - f[i - 1])
    return float(tau), float(eer)


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return [(float(t), float(f), float(p)) for t, f, p in zip(self.thresholds, self.fpr, self.tpr)]

    def distance_to(self, fpr: float, tpr: float) -> float:
        """Euclidean distance from ``(fpr, tpr)`` to the curve's polyline."""
        p = np.array([fpr, tpr])
        a = np.stack([self.fpr[:-1], self.tpr[:-1]], axis=1)
        b = np.stack([self.fpr[1:], self.tpr[1:]], axis=1)
        ab = b - a
        denom = np.sum(ab * ab, axis=1)
        lam = np.clip(np.sum((p - a) * ab, axis=1) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
        proj = a + lam[:, None] * ab
        return float(np.min(np.linalg.norm(proj - p, axis=1)))


def roc(scores, n_points: int = 101, thresholds=None) -> RocCurve:
    """FPR/TPR (fraction of impostor/genuine scores <= t) on an even grid of
    ``n_points`` thresholds over [0, 1], or on explicit increasing ``thresholds``."""
    genuine, impostor = _split_scores(scores)
    if thresholds is None:
        if n_points < 2:
            raise ConfigError("n_points must be >= 2")
        t = np.linspace(0.0, 1.0, n_points)
    else:
        t = np.asarray(thresholds, dtype=np.float64).ravel()
        if t.size == 0 or np.any(np.diff(t) <= 0):
            raise ConfigError("thresholds must be non-empty and strictly increasing")
    fpr = np.searchsorted(np.sort(impostor), t, side="right") / impostor.size
    tpr = np.searchsorted(np.sort(genuine), t, side="right") / genuine.size
    return RocCurve(t, fpr, tpr)


def asr(adv_feature, enrolled_features, tau: float, kind=DistanceKind.UNIT_L2_HALVED) -> float:
    """Fraction of enrolled features within ``tau`` of the adversarial feature."""
    enrolled = np.atleast_2d(np.asarray(enrolled_features, dtype=np.float64))
    if enrolled.shape[0] == 0:
        raise ValueError("enrolled set is empty")
    d = pairwise_dissimilarity(np.asarray(adv_feature)[None, :], enrolled, kind)
    return float(np.count_nonzero(d <= tau)) / enrolled.shape[0]


def verify_access(adv_feature, enrolled_feature, tau: float | None, kind=DistanceKind.UNIT_L2_HALVED) -> bool:
    if tau is None:
        raise CalibrationError("system has no calibrated threshold")
    return dissimilarity(adv_feature, enrolled_feature, kind) <= tau


# --- SSIM -------------------------------------------------------------------

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WIN = 11
SSIM_SIGMA = 1.5


def _ssim_channel(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    x = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    w = np.outer(g, g)
    w /= w.sum()

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, (SSIM_WIN, SSIM_WIN)), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over every fully contained 11x11 Gaussian window (sigma 1.5).

    Accepts ``(H, W)`` or ``(H, W, C)``; channels are scored separately and
    averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ShapeError(f"image {a.shape[:2]} is smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], data_range) for c in range(a.shape[2])]))


def mean_or_nan(values: Iterable[float]) -> float:
    values = list(values)
    return float(np.mean(values)) if values else float("nan")
