"""Procedural image tasks and the BBDS dataset file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, InvalidInputError
from ..numeric import rng_from_seed

N_SLOTS = 64
DS_MAGIC = b"BBDS"
DS_VERSION = 1


def slot_pattern(slot: int):
    """(orientation rad, frequency in cycles per image, phase rad) for a pattern slot."""
    theta = np.pi * ((slot * 0.3819660112501051) % 1.0)
    freq = 1.0 + 3.0 * ((slot * 0.7548776662466927) % 1.0)
    phase = 2.0 * np.pi * ((slot * 0.5698402909980532) % 1.0)
    return theta, freq, phase


def _wave(slot, h, w, c, angle_deg, phase_offset):
    theta, freq, phase = slot_pattern(slot)
    theta = theta + np.deg2rad(angle_deg)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    arg = 2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase + phase_offset
    return np.stack([np.sin(arg + ch * np.pi / 3) for ch in range(c)], axis=2)


def render(slot, h: int, w: int, c: int, angle_deg: float = 0.0,
           phase_offset=0.0) -> np.ndarray:
    """Noise-free ``h x w x c`` image of one slot, rotated by ``angle_deg``.

    ``slot`` may be a tuple of slots, rendered as an equal-weight plaid.
    """
    slots = slot if isinstance(slot, tuple) else (slot,)
    offsets = np.broadcast_to(np.asarray(phase_offset, dtype=np.float64), (len(slots),))
    waves = sum(_wave(s, h, w, c, angle_deg, o) for s, o in zip(slots, offsets))
    return 0.5 + (0.4 / len(slots)) * waves


@dataclass
class SyntheticTask:
    kind: str
    n_classes: int
    images: np.ndarray  # (n, H*W*C)
    labels: np.ndarray
    dims: tuple[int, int, int]
    seed: int
    shift: dict = field(default_factory=lambda: {"angle": 0.0, "sigma": 0.0})
    slots: tuple[int, ...] = ()

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "SyntheticTask":
        index = np.asarray(index)
        return SyntheticTask(self.kind, self.n_classes, self.images[index], self.labels[index],
                             self.dims, self.seed, dict(self.shift), self.slots)


def task_slots(kind: str, n_classes: int, shared_labels: bool = False,
               source_classes: int = 20, compose: str = "plaid") -> list:
    """Pattern slot (or plaid slot pair) of every class.

    Disjoint target classes are plaids of two source patterns, ``(t, t + K^S/2)``,
    so they are new classes built from primitives the source task teaches.
    """
    if n_classes < 1 or n_classes > N_SLOTS:
        raise ConfigError(f"K={n_classes} exceeds the {N_SLOTS} available pattern slots")
    if kind == "source" or shared_labels:
        return list(range(n_classes))
    if compose == "union":
        if n_classes > source_classes:
            raise ConfigError(f"at most {source_classes} union target classes")
        return [tuple(range(t, source_classes, n_classes)) for t in range(n_classes)]
    if compose != "plaid":
        raise ConfigError(f"unknown target composition {compose!r}")
    half = source_classes // 2
    if source_classes < 2 or n_classes > half:
        raise ConfigError(f"at most {half} disjoint target classes for K^S={source_classes}")
    return [(t, t + half) for t in range(n_classes)]


def generate_task(kind: str, n_classes: int, n_per_class: int, h: int, w: int, c: int,
                  seed: int, angle: float = 0.0, sigma: float = 0.0,
                  shared_labels: bool = False, phase_jitter: float = 0.0,
                  aperture: tuple[int, int] | None = None,
                  source_classes: int = 20, compose: str = "plaid",
                  brightness: float = 0.0, contrast: float = 1.0) -> SyntheticTask:
    """Sample ``n_per_class`` noisy renders of each class pattern.

    Target tasks draw from slots disjoint from the source slots (unless
    ``shared_labels``) and rotate every pattern by ``angle`` degrees.
    """
    if kind not in ("source", "target"):
        raise ConfigError(f"unknown task kind {kind!r}")
    if min(n_per_class, h, w, c) < 1 or sigma < 0:
        raise ConfigError("task dimensions must be positive")
    slots = task_slots(kind, n_classes, shared_labels, source_classes, compose)
    union = kind == "target" and not shared_labels and compose == "union"
    rot = angle if kind == "target" else 0.0
    rng = rng_from_seed(seed)
    imgs, labels = [], []
    for label, slot in enumerate(slots):
        if union:
            members = rng.choice(np.asarray(slot), size=n_per_class)
            offsets = rng.uniform(-phase_jitter, phase_jitter, size=n_per_class)
            clean = np.stack([render(int(m), h, w, c, rot, o).reshape(-1)
                              for m, o in zip(members, offsets)])
        elif phase_jitter > 0:
            n_waves = len(slot) if isinstance(slot, tuple) else 1
            offsets = rng.uniform(-phase_jitter, phase_jitter, size=(n_per_class, n_waves))
            clean = np.stack([render(slot, h, w, c, rot, o).reshape(-1) for o in offsets])
        else:
            clean = np.repeat(render(slot, h, w, c, rot).reshape(1, -1), n_per_class, axis=0)
        if kind == "target" and (brightness != 0.0 or contrast != 1.0):
            clean = 0.5 + contrast * (clean - 0.5) + brightness
        noise = rng.normal(0.0, sigma, size=(n_per_class, clean.shape[1])) if sigma > 0 else 0.0
        img = np.clip(clean + noise, 0.0, 1.0)
        if aperture is not None:
            img = img * _aperture_masks(rng, n_per_class, h, w, c, aperture)
        imgs.append(img)
        labels.append(np.full(n_per_class, label, dtype=np.int64))
    images = np.concatenate(imgs)
    y = np.concatenate(labels)
    order = rng.permutation(len(y))
    return SyntheticTask(kind, n_classes, images[order], y[order], (h, w, c), seed,
                         {"angle": float(rot), "sigma": float(sigma)}, tuple(slots))


def _aperture_masks(rng, n, h, w, c, sizes):
    """Centred square windows with side drawn uniformly from ``sizes`` (inclusive)."""
    lo, hi = sizes
    side = rng.integers(lo, hi + 1, size=n)
    masks = np.zeros((n, h, w, c))
    for i, s in enumerate(side):
        top, left = (h - s) // 2, (w - s) // 2
        masks[i, top:top + s, left:left + s, :] = 1.0
    return masks.reshape(n, -1)


def few_shot_split(task: SyntheticTask, shots: int, seed: int):
    """Split into a ``shots``-per-class train subset and the remaining test subset."""
    rng = rng_from_seed(seed)
    train = []
    for k in range(task.n_classes):
        idx = np.flatnonzero(task.labels == k)
        if len(idx) < shots:
            raise ConfigError(f"class {k} has only {len(idx)} images, needs {shots} shots")
        train.extend(rng.choice(idx, size=shots, replace=False).tolist())
    train = np.sort(np.array(train))
    test = np.setdiff1d(np.arange(len(task)), train)
    return task.subset(train), task.subset(test)


def save_dataset(path, task: SyntheticTask) -> None:
    h, w, c = task.dims
    with open(path, "wb") as fh:
        fh.write(DS_MAGIC)
        fh.write(struct.pack("<6I", DS_VERSION, task.n_classes, len(task), h, w, c))
        fh.write(np.ascontiguousarray(task.images, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(task.labels, dtype="<u4").tobytes())


def load_dataset(path, kind: str = "target") -> SyntheticTask:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DS_MAGIC:
        raise InvalidInputError(f"{path}: not a BBDS dataset")
    version, k, n, h, w, c = struct.unpack_from("<6I", raw, 4)
    if version != DS_VERSION:
        raise InvalidInputError(f"{path}: unsupported dataset version {version}")
    off = 4 + 24
    d = h * w * c
    images = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).astype(np.float64)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 8 * n * d).astype(np.int64)
    return SyntheticTask(kind, k, images.reshape(n, d), labels, (h, w, c), -1)
