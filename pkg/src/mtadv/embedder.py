"""Feature extractors, defense transforms and calibrated system profiles."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import autodiff as ad
from .dataset import IdentityDataset, make_pairs
from .errors import (
    CalibrationError,
    ChecksumError,
    ConfigError,
    ModelFormatError,
    ShapeError,
    TrainingFailure,
    VersionError,
)
from .metrics import DistanceKind, calibrate_eer, pairwise_dissimilarity

__all__ = [
    "LayerSpec",
    "Arch",
    "EmbeddingModel",
    "DefenseTransform",
    "SystemProfile",
    "TrainConfig",
    "DEFAULT_ARCH",
    "init_model",
    "embed",
    "embed_batch",
    "embed_tensor",
    "train_model",
    "calibrate_system",
    "pair_scores",
    "save_model",
    "load_model",
    "crc64",
]

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.width < 1:
            raise ConfigError("layer width must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class Arch:
    """Input shape plus hidden layers; a bias-free projection to the
    embedding and an L2-normalisation are always appended.

    Pixels enter as ``(x - input_center) / input_scale``; training fits both
    constants to its images before the first step.
    """

    input_shape: tuple[int, int, int] = (16, 16, 1)
    hidden: tuple[LayerSpec, ...] = (LayerSpec(256), LayerSpec(128))
    input_center: float = 0.0
    input_scale: float = 1.0

    def __post_init__(self):
        if not self.input_scale > 0:
            raise ConfigError(f"input_scale must be positive, got {self.input_scale}")

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def to_json(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "hidden": [[l.width, l.activation] for l in self.hidden],
                "input_center": self.input_center,
                "input_scale": self.input_scale}

    @classmethod
    def from_json(cls, obj: dict) -> "Arch":
        return cls(tuple(obj["input_shape"]), tuple(LayerSpec(int(w), a) for w, a in obj["hidden"]),
                   float(obj.get("input_center", 0.0)), float(obj.get("input_scale", 1.0)))


DEFAULT_ARCH = Arch()


@dataclass(frozen=True, eq=False)
class EmbeddingModel:
    arch: Arch
    weights: tuple[np.ndarray, ...]  # W1, b1, ..., Wk, bk, W_out
    embed_dim: int
    seed: int
    model_id: str

    def weight_shapes(self) -> list[tuple[int, ...]]:
        return _weight_shapes(self.arch, self.embed_dim)


def _weight_shapes(arch: Arch, embed_dim: int) -> list[tuple[int, ...]]:
    shapes = []
    fan_in = arch.input_size
    for layer in arch.hidden:
        shapes += [(fan_in, layer.width), (layer.width,)]
        fan_in = layer.width
    shapes.append((fan_in, embed_dim))
    return shapes


def init_model(arch: Arch = DEFAULT_ARCH, embed_dim: int = 32, seed: int = 0,
               model_id: str | None = None) -> EmbeddingModel:
    """Seeded LeCun-normal weights, zero biases."""
    if not arch.hidden:
        raise ConfigError("arch needs at least one hidden layer")
    if embed_dim < 8:
        raise ConfigError(f"embed_dim must be >= 8, got {embed_dim}")
    if embed_dim > arch.hidden[-1].width:
        raise ConfigError(f"embed_dim {embed_dim} exceeds final hidden width {arch.hidden[-1].width}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE3BED]))
    weights = []
    for shape in _weight_shapes(arch, embed_dim):
        if len(shape) == 1:
            w = np.zeros(shape)
        else:
            w = rng.standard_normal(shape) / np.sqrt(shape[0])
        w.setflags(write=False)
        weights.append(w)
    return EmbeddingModel(arch, tuple(weights), embed_dim, seed, model_id or f"mlp-seed{seed}")


def _act_array(name, x):
    return np.tanh(x) if name == "tanh" else np.maximum(x, 0.0)


def _act_tensor(name, x):
    return ad.tanh(x) if name == "tanh" else ad.relu(x)


def forward_array(model: EmbeddingModel, images: np.ndarray) -> np.ndarray:
    """Batch forward pass, ``(B, H, W, C) -> (B, embed_dim)``."""
    arch = model.arch
    h = (np.asarray(images, dtype=np.float64).reshape(len(images), -1) - arch.input_center) / arch.input_scale
    w = model.weights
    for i, layer in enumerate(model.arch.hidden):
        h = _act_array(layer.activation, h @ w[2 * i] + w[2 * i + 1])
    z = h @ w[-1]
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ad.NumericFailure("zero feature vector before normalisation")
    return z / norm


def forward_tensor(model: EmbeddingModel, x: ad.Tensor, weights=None) -> ad.Tensor:
    """Differentiable forward pass of one image or of a batch ``(B, H, W, C)``."""
    w = model.weights if weights is None else weights
    batched = x.value.ndim == 4
    h = ad.reshape(x, (x.shape[0], -1) if batched else (-1,))
    h = ad.div(ad.sub(h, model.arch.input_center), model.arch.input_scale)
    for i, layer in enumerate(model.arch.hidden):
        h = _act_tensor(layer.activation, ad.affine(h, w[2 * i], w[2 * i + 1]))
    return ad.l2_normalize(ad.affine(h, w[-1]), axis=-1)


# --- defenses ---------------------------------------------------------------


@dataclass(frozen=True)
class DefenseTransform:
    """Differentiable input purification.

    ``gaussian_blur`` uses ``param`` as the kernel sigma (reflect padding,
    taps truncated at 3 sigma).  ``soft_quantize`` uses ``param`` as the
    sharpness beta of a sum-of-sigmoids staircase with ``levels`` levels.
    """

    kind: Literal["gaussian_blur", "soft_quantize"]
    param: float
    levels: int = 8

    def __post_init__(self):
        if self.kind not in ("gaussian_blur", "soft_quantize"):
            raise ConfigError(f"unknown defense {self.kind!r}")
        if self.param < 0:
            raise ConfigError("defense parameter must be non-negative")
        if self.kind == "soft_quantize" and (self.levels < 2 or self.param == 0):
            raise ConfigError("soft_quantize needs levels >= 2 and beta > 0")

    @property
    def label(self) -> str:
        return f"{self.kind}({self.param:g})"

    def to_json(self) -> dict:
        return {"kind": self.kind, "param": self.param, "levels": self.levels}

    def _steps(self):
        n = self.levels - 1
        return n, (np.arange(1, n + 1) - 0.5)

    def apply(self, images: np.ndarray) -> np.ndarray:
        """Numpy path for one image ``(H, W, C)`` or a batch ``(B, H, W, C)``."""
        x = np.asarray(images, dtype=np.float64)
        if self.kind == "gaussian_blur":
            taps = tuple(float(t) for t in ad.gaussian_kernel(self.param))
            kh = ad._conv_matrix(x.shape[-3], taps)
            kw = ad._conv_matrix(x.shape[-2], taps)
            return np.einsum("ij,...jkc,lk->...ilc", kh, x, kw)
        n, centers = self._steps()
        z = 0.5 * self.param * (x[..., None] * n - centers)
        return 0.5 + np.sum(np.tanh(z), axis=-1) / (2 * n)

    def apply_tensor(self, x: ad.Tensor) -> ad.Tensor:
        if self.kind == "gaussian_blur":
            return ad.conv2d(x, ad.gaussian_kernel(self.param))
        n, centers = self._steps()
        shape = x.shape
        flat = ad.reshape(x, (-1, 1))
        z = ad.sub(ad.mul(flat, 0.5 * self.param * n), 0.5 * self.param * centers[None, :])
        q = ad.add(ad.div(ad.sum(ad.tanh(z), axis=1), 2.0 * n), 0.5)
        return ad.reshape(q, shape)


# --- system profiles --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SystemProfile:
    model: EmbeddingModel
    defense: DefenseTransform | None = None
    distance_kind: DistanceKind = DistanceKind.UNIT_L2_HALVED
    tau: float | None = None
    eer: float | None = None
    system_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "distance_kind", DistanceKind(self.distance_kind))
        if self.system_id is None:
            sid = self.model.model_id + ("" if self.defense is None else "+" + self.defense.label)
            object.__setattr__(self, "system_id", sid)
        if self.tau is not None and not 0.0 < self.tau < 1.0:
            raise CalibrationError(f"tau must lie in (0, 1), got {self.tau}")

    @property
    def calibrated(self) -> bool:
        return self.tau is not None

    def require_tau(self) -> float:
        if self.tau is None:
            raise CalibrationError(f"system {self.system_id} is not calibrated")
        return self.tau

    def describe(self) -> dict:
        return {
            "system_id": self.system_id,
            "model_id": self.model.model_id,
            "model_seed": self.model.seed,
            "defense": None if self.defense is None else self.defense.to_json(),
            "distance_kind": self.distance_kind.value,
            "tau": self.tau,
            "eer": self.eer,
        }


def _check_shape(system: SystemProfile, shape):
    expected = tuple(system.model.arch.input_shape)
    if tuple(shape) != expected:
        raise ShapeError(f"image shape {tuple(shape)} does not match model input {expected}")


def embed(system: SystemProfile, image: np.ndarray) -> np.ndarray:
    """Unit-norm feature of one image (defense first, then the model)."""
    image = np.asarray(image, dtype=np.float64)
    _check_shape(system, image.shape)
    return embed_batch(system, image[None])[0]


def embed_batch(system: SystemProfile, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    _check_shape(system, images.shape[1:])
    if system.defense is not None:
        images = system.defense.apply(images)
    return forward_array(system.model, images)


def embed_tensor(system: SystemProfile, x: ad.Tensor) -> ad.Tensor:
    _check_shape(system, x.shape)
    if system.defense is not None:
        x = system.defense.apply_tensor(x)
    return forward_tensor(system.model, x)


def dataset_features(system: SystemProfile, dataset: IdentityDataset) -> list[np.ndarray]:
    """Per-subject feature stacks ``(K, D)``."""
    return [embed_batch(system, s.images) for s in dataset.subjects]


def pair_scores(system: SystemProfile, dataset: IdentityDataset, seed: int = 0,
                features=None) -> tuple[np.ndarray, np.ndarray]:
    """Genuine and impostor dissimilarities under the calibration protocol."""
    feats = dataset_features(system, dataset) if features is None else features
    genuine, impostor = make_pairs(dataset, "calibration", seed=seed)

    def score(pairs):
        a = np.array([feats[s][i] for (s, i), _ in pairs])
        b = np.array([feats[t][j] for _, (t, j) in pairs])
        return pairwise_dissimilarity(a, b, system.distance_kind)

    return score(genuine), score(impostor)


def calibrate_system(model: EmbeddingModel, dataset: IdentityDataset, defense: DefenseTransform | None = None,
                     distance_kind=DistanceKind.UNIT_L2_HALVED, seed: int = 0,
                     system_id: str | None = None) -> SystemProfile:
    """Fix ``tau`` at the EER operating point of ``defense -> model`` on ``dataset``."""
    system = SystemProfile(model, defense, distance_kind, system_id=system_id)
    tau, eer = calibrate_eer(pair_scores(system, dataset, seed))
    return replace(system, tau=tau, eer=eer)


# --- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    lr: float = 0.5
    batch_subjects: int = 24
    genuine_margin: float = 0.2
    impostor_margin: float = 0.5
    holdout_frac: float = 0.25
    eer_target: float = 0.10
    standardize: bool = True
    input_gain: float = 8.0  # pixels are scaled to this std; >1 sharpens response to fine detail
    seed: int = 0


def _margin_loss(feats: ad.Tensor, same: np.ndarray, genuine_margin: float, impostor_margin: float):
    # cos_dissim = unit_l2_halved^2, so squared margins give the same hinge points
    cos_d = ad.mul(ad.sub(1.0, ad.matmul(feats, ad.transpose(feats))), 0.5)
    n = same.shape[0]
    off_diag = ~np.eye(n, dtype=bool)
    gen_mask = (same & off_diag).astype(np.float64)
    imp_mask = (~same).astype(np.float64)
    gen = ad.sum(ad.mul(ad.relu(ad.sub(cos_d, genuine_margin ** 2)), gen_mask / gen_mask.sum()))
    imp = ad.sum(ad.mul(ad.relu(ad.sub(impostor_margin ** 2, cos_d)), imp_mask / imp_mask.sum()))
    return ad.add(gen, imp)


def split_subjects(dataset: IdentityDataset, holdout_frac: float, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    order = rng.permutation(len(dataset))
    n_hold = max(2, int(round(holdout_frac * len(dataset))))
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def train_model(model: EmbeddingModel, dataset: IdentityDataset, hyper: TrainConfig = TrainConfig(),
                *, enforce_gate: bool = True, log=None) -> EmbeddingModel:
    """Minibatch gradient descent on a pairwise hinge loss.

    Genuine pairs are pushed below ``genuine_margin`` and impostor pairs
    above ``impostor_margin`` (both as unit_l2_halved distances).  A seeded
    ``holdout_frac`` of the subjects is kept out of training; the returned
    model must reach ``eer_target`` on them, otherwise
    :class:`TrainingFailure` is raised (unless ``enforce_gate`` is False).
    """
    if len(dataset) < 20 or min(dataset.n_images) < 10:
        raise ConfigError("training needs >= 20 subjects with >= 10 images each")
    if tuple(dataset.image_shape) != tuple(model.arch.input_shape):
        raise ShapeError(f"dataset images {dataset.image_shape} do not match model input {model.arch.input_shape}")
    train_idx, hold_idx = split_subjects(dataset, hyper.holdout_frac, hyper.seed)
    if hyper.standardize:
        pixels = np.concatenate([dataset.subjects[s].images.ravel() for s in train_idx])
        model = replace(model, arch=replace(model.arch, input_center=float(pixels.mean()),
                                            input_scale=float(pixels.std()) / hyper.input_gain))
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 0x7AA1]))
    weights = [np.array(w) for w in model.weights]
    n_batch = min(hyper.batch_subjects, len(train_idx))
    for step in range(hyper.steps):
        chosen = np.sort(rng.choice(train_idx, size=n_batch, replace=False))
        imgs = np.concatenate([dataset.subjects[s].images for s in chosen])
        labels = np.repeat(np.arange(n_batch), [len(dataset.subjects[s].images) for s in chosen])
        same = labels[:, None] == labels[None, :]

        def program(x, *ws):
            return _margin_loss(forward_tensor(model, x, ws), same, hyper.genuine_margin, hyper.impostor_margin)

        loss, grads = ad.value_and_grad(program, [imgs, *weights], wrt=range(1, len(weights) + 1))
        weights = [w - hyper.lr * g for w, g in zip(weights, grads)]
        if log is not None and step % 100 == 0:
            log(f"step {step}: loss {loss:.5f}")
    for w in weights:
        w.setflags(write=False)
    trained = replace(model, weights=tuple(weights))
    eer = heldout_eer(trained, dataset.subset(hold_idx), hyper.seed)
    if enforce_gate and eer > hyper.eer_target:
        raise TrainingFailure(f"held-out EER {eer:.4f} exceeds target {hyper.eer_target:.4f}", eer=eer)
    return trained


def heldout_eer(model: EmbeddingModel, dataset: IdentityDataset, seed: int = 0) -> float:
    return calibrate_eer(pair_scores(SystemProfile(model), dataset, seed))[1]


# --- serialisation ----------------------------------------------------------

MAGIC = b"MTADVMDL"
FORMAT_VERSION = 1


def _crc64_table():
    poly = 0xC96C5795D7870F42  # ECMA-182, reflected (CRC-64/XZ)
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    """CRC-64/XZ."""
    crc = 0xFFFFFFFFFFFFFFFF
    table = _CRC64_TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def save_model(model: EmbeddingModel, path) -> None:
    payload = b"".join(np.ascontiguousarray(w, dtype="<f8").tobytes() for w in model.weights)
    header = json.dumps({
        "arch": model.arch.to_json(),
        "embed_dim": model.embed_dim,
        "seed": model.seed,
        "model_id": model.model_id,
        "payload_bytes": len(payload),
    }, sort_keys=True).encode("utf-8")
    blob = (MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", len(header)) + header
            + payload + struct.pack("<Q", crc64(payload)))
    Path(path).write_bytes(blob)


def load_model(path) -> EmbeddingModel:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic")
    if len(raw) < 16:
        raise ModelFormatError(f"{path}: truncated header")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<I", raw[12:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        arch = Arch.from_json(header["arch"])
        embed_dim = int(header["embed_dim"])
        nbytes = int(header["payload_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header ({exc})") from None
    start = 16 + hlen
    if len(raw) != start + nbytes + 8:
        raise ModelFormatError(f"{path}: truncated payload ({len(raw) - start - 8} of {nbytes} bytes)")
    payload = raw[start : start + nbytes]
    (stored,) = struct.unpack("<Q", raw[start + nbytes :])
    if crc64(payload) != stored:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    shapes = _weight_shapes(arch, embed_dim)
    if sum(int(np.prod(s)) for s in shapes) * 8 != nbytes:
        raise ModelFormatError(f"{path}: payload size does not match architecture")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    weights, offset = [], 0
    for s in shapes:
        n = int(np.prod(s))
        w = flat[offset : offset + n].reshape(s).copy()
        w.setflags(write=False)
        weights.append(w)
        offset += n
    return EmbeddingModel(arch, tuple(weights), embed_dim, int(header["seed"]), str(header["model_id"]))
