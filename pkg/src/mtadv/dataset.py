"""Synthetic identity corpus and the genuine/impostor pairing protocols."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .autodiff import gaussian_kernel, _conv_matrix
from .errors import ConfigError, ProtocolError

__all__ = [
    "Subject",
    "IdentityDataset",
    "AttackTarget",
    "AttackTuple",
    "generate_dataset",
    "make_pairs",
    "load_directory",
    "save_directory",
    "read_pgm",
    "write_pgm",
]


@dataclass(frozen=True)
class Subject:
    subject_id: str
    images: np.ndarray  # (K, H, W, C)
    latent: np.ndarray | None = None


@dataclass(frozen=True)
class IdentityDataset:
    subjects: tuple[Subject, ...]
    image_shape: tuple[int, int, int]
    seed: int | None = None
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for s in self.subjects:
            if s.images.shape[1:] != tuple(self.image_shape):
                raise ConfigError(f"subject {s.subject_id} has images of shape {s.images.shape[1:]}")

    def __len__(self):
        return len(self.subjects)

    @property
    def n_images(self) -> tuple[int, ...]:
        return tuple(len(s.images) for s in self.subjects)

    def image(self, subject: int, index: int) -> np.ndarray:
        return self.subjects[subject].images[index]

    def subset(self, indices: Sequence[int]) -> "IdentityDataset":
        return IdentityDataset(tuple(self.subjects[i] for i in indices), self.image_shape, self.seed,
                               dict(self.params, subset=list(map(int, indices))))

    def manifest(self) -> dict:
        return {
            "n_subjects": len(self.subjects),
            "imgs_per_subject": list(self.n_images),
            "image_shape": list(self.image_shape),
            "seed": self.seed,
            "params": self.params,
        }


def _render_basis(image_shape, latent_dim: int, render_seed: int, smoothness: float):
    h, w, c = image_shape
    rng = np.random.default_rng(np.random.SeedSequence([render_seed, 0x5EED]))
    fields = rng.standard_normal((latent_dim + 1, c, h, w))
    taps = tuple(gaussian_kernel(smoothness))
    if len(taps) // 2 < min(h, w):
        kh, kw = _conv_matrix(h, taps), _conv_matrix(w, taps)
        fields = np.einsum("ij,nCjk,lk->nCil", kh, fields, kw)
    fields = fields.transpose(0, 2, 3, 1).reshape(latent_dim + 1, -1)
    fields /= fields.std(axis=1, keepdims=True)
    return fields[1:], fields[0]


def generate_dataset(
    n_subjects: int = 158,
    imgs_per_subject: int = 10,
    image_shape: tuple[int, int, int] = (16, 16, 1),
    intra_noise: float = 0.05,
    seed: int = 0,
    *,
    latent_dim: int = 16,
    render_seed: int = 0,
    gain: float = 0.11,
    smoothness: float = 1.5,
    brightness: float = 0.02,
    noise_smoothness: float = 2.5,
) -> IdentityDataset:
    """Draw ``n_subjects`` random identities and render noisy views of each.

    Every identity is a standard-normal latent pushed through one fixed
    affine map (seeded by ``render_seed``, so datasets drawn with different
    ``seed`` share the same "face space") and squashed into [0, 1] with tanh.
    Views add spatially smooth Gaussian noise (correlation length
    ``noise_smoothness`` pixels, per-pixel std ``intra_noise``) and a global
    brightness offset of std ``brightness``, then clamp.  ``gain`` sets the
    contrast between identities.
    """
    if n_subjects < 2:
        raise ConfigError("need at least 2 subjects for pairing")
    if imgs_per_subject < 1:
        raise ConfigError("need at least one image per subject")
    if intra_noise < 0:
        raise ConfigError(f"intra_noise must be >= 0, got {intra_noise}")
    image_shape = tuple(int(d) for d in image_shape)
    if len(image_shape) != 3:
        raise ConfigError("image_shape must be (H, W, C)")
    basis, offset = _render_basis(image_shape, latent_dim, render_seed, smoothness)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    latents = rng.standard_normal((n_subjects, latent_dim))
    clean = 0.5 * (1.0 + np.tanh(gain * (latents @ basis) / np.sqrt(latent_dim) + 0.3 * offset))
    noise = _smooth_noise(rng, (n_subjects * imgs_per_subject,) + image_shape, noise_smoothness)
    noise = noise.reshape(n_subjects, imgs_per_subject, -1) * intra_noise
    shift = rng.standard_normal((n_subjects, imgs_per_subject, 1)) * (brightness if intra_noise > 0 else 0.0)
    views = np.clip(clean[:, None, :] + noise + shift, 0.0, 1.0)
    views = views.reshape((n_subjects, imgs_per_subject) + image_shape)
    subjects = tuple(
        Subject(f"s{i:04d}", views[i], latents[i]) for i in range(n_subjects)
    )
    params = dict(n_subjects=n_subjects, imgs_per_subject=imgs_per_subject, image_shape=list(image_shape),
                  intra_noise=intra_noise, seed=seed, latent_dim=latent_dim, render_seed=render_seed,
                  gain=gain, smoothness=smoothness, brightness=brightness,
                  noise_smoothness=noise_smoothness)
    return IdentityDataset(subjects, image_shape, seed, params)


def _smooth_noise(rng, shape, smoothness):
    # unit-variance Gaussian field with spatial correlation length ``smoothness``;
    # white noise when the kernel does not fit the image
    n, h, w, c = shape
    z = rng.standard_normal(shape)
    if smoothness <= 0:
        return z
    taps = tuple(gaussian_kernel(smoothness))
    if len(taps) // 2 >= min(h, w):
        return z
    kh, kw = _conv_matrix(h, taps), _conv_matrix(w, taps)
    z = np.einsum("ij,njkc,lk->nilc", kh, z, kw)
    return z / np.sqrt(np.sum(np.outer(taps, taps) ** 2))


@dataclass(frozen=True)
class AttackTarget:
    subject: int
    image_index: int
    enrolled_indices: tuple[int, ...]


@dataclass(frozen=True)
class AttackTuple:
    source_subject: int
    source_image_index: int
    targets: tuple[AttackTarget, ...]

    @property
    def target_subject(self) -> int:
        return self.targets[0].subject

    @property
    def target_image_index(self) -> int:
        return self.targets[0].image_index

    @property
    def enrolled_image_indices(self) -> tuple[int, ...]:
        return self.targets[0].enrolled_indices


def make_pairs(
    dataset: IdentityDataset,
    protocol: Literal["calibration", "attack"] = "calibration",
    *,
    seed: int = 0,
    n_tuples: int = 200,
    n_targets: int = 1,
    box: Literal["white", "gray"] = "gray",
):
    """Pairing protocols.

    ``calibration`` returns ``(genuine, impostor)`` lists of
    ``((subject, image), (subject, image))`` pairs: every within-subject pair
    is genuine, and an equally sized seeded sample of cross-subject pairs is
    impostor.

    ``attack`` returns ``n_tuples`` :class:`AttackTuple` objects, each with
    ``n_targets`` distinct target subjects different from the source.  Gray
    box enrols the target subject's other images; white box enrols the
    target image alone.
    """
    n = len(dataset)
    if n < 2:
        raise ProtocolError("pairing needs at least 2 subjects")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A125]))
    counts = dataset.n_images
    if protocol == "calibration":
        genuine = [
            ((s, i), (s, j))
            for s in range(n)
            for i, j in itertools.combinations(range(counts[s]), 2)
        ]
        impostor = []
        seen = set()
        while len(impostor) < len(genuine):
            s, t = rng.choice(n, size=2, replace=False)
            i, j = int(rng.integers(counts[s])), int(rng.integers(counts[t]))
            key = (min((s, i), (t, j)), max((s, i), (t, j)))
            if key in seen and len(seen) < _n_cross_pairs(counts):
                continue
            seen.add(key)
            impostor.append(((int(s), i), (int(t), j)))
        return genuine, impostor
    if protocol != "attack":
        raise ProtocolError(f"unknown protocol {protocol!r}")
    if box not in ("white", "gray"):
        raise ProtocolError(f"unknown box {box!r}")
    if not 1 <= n_targets < n:
        raise ProtocolError(f"n_targets={n_targets} needs 1 <= n_targets < {n} subjects")
    tuples = []
    for _ in range(n_tuples):
        chosen = rng.choice(n, size=n_targets + 1, replace=False)
        source = int(chosen[0])
        src_img = int(rng.integers(counts[source]))
        targets = []
        for t in chosen[1:]:
            t = int(t)
            k = int(rng.integers(counts[t]))
            if box == "white":
                enrolled = (k,)
            else:
                enrolled = tuple(j for j in range(counts[t]) if j != k)
                if not enrolled:
                    raise ProtocolError(f"subject {t} has a single image; gray box needs another")
            targets.append(AttackTarget(t, k, enrolled))
        tuples.append(AttackTuple(source, src_img, tuple(targets)))
    return tuples


def _n_cross_pairs(counts) -> int:
    total = sum(counts)
    return (total * total - sum(c * c for c in counts)) // 2


# --- PGM directory layout ---------------------------------------------------


def write_pgm(path: Path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim == 3:
        if arr.shape[2] != 1:
            raise ConfigError("PGM stores single-channel images only")
        arr = arr[:, :, 0]
    pixels = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ConfigError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ConfigError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ConfigError(f"{path}: truncated pixel data")
    return (data.reshape(h, w, 1) / float(maxval)).astype(np.float64)


def save_directory(dataset: IdentityDataset, root: Path) -> list[Path]:
    root = Path(root)
    written = []
    for s in dataset.subjects:
        d = root / s.subject_id
        d.mkdir(parents=True, exist_ok=True)
        for k, img in enumerate(s.images):
            p = d / f"{k:03d}.pgm"
            write_pgm(p, img)
            written.append(p)
    return written


def load_directory(root: Path, seed: int | None = None) -> IdentityDataset:
    """Read ``<root>/<subject_id>/<image>.pgm``; subjects and images sorted by name."""
    root = Path(root)
    subjects = []
    shape = None
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(d.glob("*.pgm"))
        if not files:
            continue
        imgs = np.stack([read_pgm(f) for f in files])
        if shape is None:
            shape = imgs.shape[1:]
        elif imgs.shape[1:] != shape:
            raise ConfigError(f"{d}: image shape {imgs.shape[1:]} differs from {shape}")
        subjects.append(Subject(d.name, imgs))
    if len(subjects) < 2:
        raise ProtocolError(f"{root}: need at least 2 subject directories")
    return IdentityDataset(tuple(subjects), tuple(shape), seed, {"root": str(root)})
