"""Multi-task sign-gradient attack plus FGSM and PGD baselines."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .embedder import SystemProfile, embed_batch, embed_tensor
from .errors import ConfigError, ShapeError
from .metrics import DistanceKind, pairwise_dissimilarity

__all__ = [
    "AttackConfig",
    "PGD_STEPS",
    "TargetSet",
    "DeltaWindow",
    "StopReason",
    "AdversarialResult",
    "loss_multi_task",
    "objective",
    "clip_project",
    "check_stop",
    "mtadv",
    "fgsm",
    "pgd",
    "tuple_seed",
]

WINDOW = 5
PGD_STEPS = 40  # baseline step budget


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.03
    alpha: float = 0.001
    t_max: int = 1000
    tau_conv: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.epsilon > 0 and self.alpha > self.epsilon:
            raise ConfigError(f"alpha {self.alpha} exceeds epsilon {self.epsilon}")
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        if self.tau_conv <= 0:
            raise ConfigError("tau_conv must be > 0")


class StopReason(str, Enum):
    MAX_STEPS = "max_steps"
    CONVERGED = "converged"
    SETTLED = "settled"
    SUCCEEDED = "succeeded"  # PGD only: every distance reached its threshold
    SINGLE_STEP = "single_step"  # FGSM


class TargetSet:
    """Systems and, per system, the target images the example should match.

    ``targets`` is either one list of images shared by all systems or a list
    with one image list per system.  Target features are constants of the
    objective and are computed once here.
    """

    def __init__(self, systems: Sequence[SystemProfile], targets):
        systems = list(systems)
        if not systems:
            raise ConfigError("a target set needs at least one system")
        if len(targets) == 0:
            raise ConfigError("a target set needs at least one target image")
        if isinstance(targets[0], np.ndarray) and np.asarray(targets[0]).ndim == 3:
            per_system = [list(targets) for _ in systems]
        else:
            per_system = [list(t) for t in targets]
            if len(per_system) != len(systems):
                raise ConfigError(f"{len(per_system)} target lists for {len(systems)} systems")
        for s, imgs in zip(systems, per_system):
            if not imgs:
                raise ConfigError(f"system {s.system_id} has no target images")
            s.require_tau()
            for img in imgs:
                if tuple(np.shape(img)) != tuple(s.model.arch.input_shape):
                    raise ShapeError(f"target shape {np.shape(img)} incompatible with {s.system_id}")
        self.systems = systems
        self.targets = [np.stack([np.asarray(i, dtype=np.float64) for i in imgs]) for imgs in per_system]
        self.features = [embed_batch(s, t) for s, t in zip(systems, self.targets)]

    def distances(self, image: np.ndarray) -> list[np.ndarray]:
        """Per system, the distance from ``image`` to each of its targets."""
        out = []
        for s, feats in zip(self.systems, self.features):
            f = embed_batch(s, image[None])[0]
            out.append(pairwise_dissimilarity(f[None, :], feats, s.distance_kind))
        return out


def objective(ts: TargetSet):
    """The multi-task loss as a tape program of the adversarial image.

    Sum over systems of the mean distance to that system's targets,
    divided by the system's threshold.
    """

    def program(x: ad.Tensor) -> ad.Tensor:
        total = None
        for system, feats in zip(ts.systems, ts.features):
            f = embed_tensor(system, x)
            if system.distance_kind is DistanceKind.COS_DISSIM:
                d = ad.mul(ad.sub(1.0, ad.matmul(feats, f)), 0.5)
            else:
                diff = ad.sub(f, feats)
                d = ad.mul(ad.sqrt(ad.sum(ad.mul(diff, diff), axis=1)), 0.5)
            term = ad.div(ad.mean(d), system.tau)
            total = term if total is None else ad.add(total, term)
        return total

    return program


def loss_multi_task(adv: np.ndarray, ts: TargetSet) -> float:
    total = 0.0
    for s, d in zip(ts.systems, ts.distances(np.asarray(adv, dtype=np.float64))):
        total += float(np.mean(d)) / s.tau
    return total


def clip_project(candidate: np.ndarray, source: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the L-inf ball around ``source`` intersected with [0, 1]."""
    if np.shape(candidate) != np.shape(source):
        raise ShapeError(f"candidate {np.shape(candidate)} vs source {np.shape(source)}")
    lo = np.maximum(source - epsilon, 0.0)
    hi = np.minimum(source + epsilon, 1.0)
    return np.minimum(np.maximum(candidate, lo), hi)


class DeltaWindow:
    """The latest five loss decrements ``J(X^t) - J(X^{t+1})``."""

    def __init__(self, size: int = WINDOW):
        self.deltas: deque[float] = deque(maxlen=size)

    def push(self, delta: float) -> None:
        self.deltas.append(float(delta))

    @property
    def full(self) -> bool:
        return len(self.deltas) == self.deltas.maxlen

    def __len__(self):
        return len(self.deltas)

    def __iter__(self):
        return iter(self.deltas)


def check_stop(window: DeltaWindow, t: int, cfg: AttackConfig) -> StopReason | None:
    """Stop rule after update ``t``: step budget, then slim change, then
    oscillation (two or more non-positive decrements in a full window)."""
    if t >= cfg.t_max:
        return StopReason.MAX_STEPS
    if not window.full:
        return None
    if all(abs(d) <= cfg.tau_conv for d in window):
        return StopReason.CONVERGED
    if sum(1 for d in window if d <= 0) >= 2:
        return StopReason.SETTLED
    return None


@dataclass
class AdversarialResult:
    adv: np.ndarray
    loss_history: list[float]
    steps_taken: int
    stop_reason: StopReason
    final_distances: list[list[float]] = field(default_factory=list)
    window: list[float] = field(default_factory=list)


def tuple_seed(run_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, index]).generate_state(1, dtype=np.uint32)[0])


def _random_start(source, cfg: AttackConfig):
    rng = np.random.default_rng(cfg.seed)
    delta0 = rng.uniform(-cfg.epsilon, cfg.epsilon, size=source.shape)
    return clip_project(source + delta0, source, cfg.epsilon)


def _prepare(source, ts):
    source = np.asarray(source, dtype=np.float64)
    for s in ts.systems:
        if source.shape != tuple(s.model.arch.input_shape):
            raise ShapeError(f"source shape {source.shape} incompatible with {s.system_id}")
    return source


def _finish(x, history, steps, reason, ts, window=()):
    return AdversarialResult(x, history, steps, reason,
                             [d.tolist() for d in ts.distances(x)], list(window))


def mtadv(source: np.ndarray, ts: TargetSet, cfg: AttackConfig = AttackConfig()) -> AdversarialResult:
    """Random start in the ball, then projected descent steps of size
    ``alpha`` along the sign of the loss gradient until a stop rule fires."""
    source = _prepare(source, ts)
    program = objective(ts)
    x = _random_start(source, cfg)
    loss, (grad,) = ad.value_and_grad(program, [x])
    history = [loss]
    window = DeltaWindow()
    t = 0
    while True:
        t += 1
        x = clip_project(x - cfg.alpha * np.sign(grad), source, cfg.epsilon)
        new_loss, (grad,) = ad.value_and_grad(program, [x])
        window.push(loss - new_loss)
        history.append(new_loss)
        loss = new_loss
        reason = check_stop(window, t, cfg)
        if reason is not None:
            return _finish(x, history, t, reason, ts, window)


def fgsm(source: np.ndarray, ts: TargetSet, epsilon: float = 0.03) -> AdversarialResult:
    """One step of size ``epsilon`` from the clean source."""
    source = _prepare(source, ts)
    program = objective(ts)
    loss, (grad,) = ad.value_and_grad(program, [source])
    x = clip_project(source - epsilon * np.sign(grad), source, epsilon)
    return _finish(x, [loss, ad.evaluate(program, x)], 1, StopReason.SINGLE_STEP, ts)


def _all_within_threshold(ts: TargetSet, x) -> bool:
    return all(np.all(d <= s.tau) for s, d in zip(ts.systems, ts.distances(x)))


def pgd(source: np.ndarray, ts: TargetSet, cfg: AttackConfig = AttackConfig(t_max=PGD_STEPS)) -> AdversarialResult:
    """Projected sign-gradient descent from a random start that stops at
    ``t_max`` or as soon as every target distance is within its threshold."""
    source = _prepare(source, ts)
    program = objective(ts)
    x = _random_start(source, cfg)
    loss, (grad,) = ad.value_and_grad(program, [x])
    history = [loss]
    for t in range(1, cfg.t_max + 1):
        x = clip_project(x - cfg.alpha * np.sign(grad), source, cfg.epsilon)
        loss, (grad,) = ad.value_and_grad(program, [x])
        history.append(loss)
        if _all_within_threshold(ts, x):
            return _finish(x, history, t, StopReason.SUCCEEDED, ts)
    return _finish(x, history, cfg.t_max, StopReason.MAX_STEPS, ts)
