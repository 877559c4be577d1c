"""Stage two: input prompts, label maps, first-order prompt training and local inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .container import read_container, write_container
from .errors import ConfigError, InfeasibleMappingError, InvalidInputError, TrainingError
from .models import LocalModel, iterate_minibatches


def _flat_size(dims):
    h, w, c = dims
    return h * w * c


def frame_layout(image_dims, canvas_dims):
    """Flat canvas indices of the centred image window and of the surrounding frame."""
    h, w, c = image_dims
    hh, ww, cc = canvas_dims
    if cc != c or hh < h or ww < w:
        raise InvalidInputError(f"cannot place {image_dims} inside {canvas_dims}")
    top, left = (hh - h) // 2, (ww - w) // 2
    grid = np.arange(hh * ww * c).reshape(hh, ww, c)
    center = grid[top:top + h, left:left + w, :].reshape(-1)
    mask = np.ones(hh * ww * c, dtype=bool)
    mask[center] = False
    return center, np.flatnonzero(mask)


class Prompt:
    """Common surface: a flat trainable vector in ``params['P']`` and an input map."""

    kind = "base"

    def __init__(self, image_dims, canvas_dims, n_params):
        self.image_dims = tuple(image_dims)
        self.canvas_dims = tuple(canvas_dims)
        self.center, self.frame = frame_layout(self.image_dims, self.canvas_dims)
        self.params = nm.ParamSet()
        self.params.add("P", np.zeros(n_params))

    @property
    def n_params(self) -> int:
        return self.params["P"].size

    def get_flat(self) -> np.ndarray:
        return self.params["P"].copy()

    def set_flat(self, vec) -> None:
        self.params["P"] = vec

    def embed(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != _flat_size(self.image_dims):
            raise InvalidInputError(f"prompt expects {self.image_dims} images, got {x.shape}")
        out = np.zeros((len(x), _flat_size(self.canvas_dims)))
        out[:, self.center] = x
        return out

    def apply(self, images, flat=None) -> np.ndarray:
        raise NotImplementedError

    def apply_graph(self, g: nm.DiffGraph, images) -> nm.Node:
        raise NotImplementedError

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = self.params.copy()
        return clone


class PaddingPrompt(Prompt):
    """Trainable frame around the centred image; the centre is never touched."""

    kind = "padding"

    def __init__(self, image_dims, canvas_dims):
        center, frame = frame_layout(image_dims, canvas_dims)
        super().__init__(image_dims, canvas_dims, frame.size)

    def apply(self, images, flat=None) -> np.ndarray:
        out = self.embed(images)
        out[:, self.frame] = self.params["P"] if flat is None else flat
        return out

    def apply_graph(self, g, images):
        border = g.scatter(g.param("P", self.params), self.frame, _flat_size(self.canvas_dims))
        return g.add_row(g.const(self.embed(images)), border)


class WatermarkPrompt(Prompt):
    """Additive program ``tanh(W) * M`` on the embedded image, clamped to [0, 1].

    The default mask is the frame around the centred image.
    """

    kind = "watermark"

    def __init__(self, image_dims, canvas_dims, mask=None):
        super().__init__(image_dims, canvas_dims, _flat_size(canvas_dims))
        if mask is None:
            mask = np.zeros(_flat_size(canvas_dims))
            mask[self.frame] = 1.0
        mask = np.asarray(mask, dtype=np.float64).reshape(-1)
        if mask.size != _flat_size(canvas_dims) or not np.all((mask == 0) | (mask == 1)):
            raise InvalidInputError("mask must be a binary canvas-sized array")
        self.mask = mask

    def apply(self, images, flat=None) -> np.ndarray:
        w = self.params["P"] if flat is None else flat
        return np.clip(self.embed(images) + np.tanh(w) * self.mask, 0.0, 1.0)

    def apply_graph(self, g, images):
        program = g.mul(g.tanh(g.param("P", self.params)), g.const(self.mask))
        return g.clamp01(g.add_row(g.const(self.embed(images)), program))


def make_prompt(kind: str, image_dims, canvas_dims) -> Prompt:
    if kind == "padding":
        return PaddingPrompt(image_dims, canvas_dims)
    if kind == "watermark":
        return WatermarkPrompt(image_dims, canvas_dims)
    raise ConfigError(f"unknown prompt kind {kind!r}")


def apply_prompt(images, prompt: Prompt) -> np.ndarray:
    return prompt.apply(images)


# ---------------------------------------------------------------------------
# Label maps
# ---------------------------------------------------------------------------

@dataclass
class LabelMap:
    kind: str  # identity | flm | blm
    n_source: int
    n_target: int
    assignment: np.ndarray | None = None  # flm: target -> source
    matrix: np.ndarray | None = None  # blm: (n_target, n_source)

    def __post_init__(self):
        if self.kind == "identity" and self.n_source != self.n_target:
            raise InvalidInputError("identity map needs equal label spaces")
        if self.kind == "flm" and len(set(self.assignment.tolist())) != self.n_target:
            raise InvalidInputError("flm assignment is not injective")

    def as_matrix(self) -> np.ndarray:
        """Row-stochastic (n_target, n_source) weights used by map_output."""
        if self.kind == "identity":
            return np.eye(self.n_target)
        if self.kind == "flm":
            m = np.zeros((self.n_target, self.n_source))
            m[np.arange(self.n_target), self.assignment] = 1.0
            return m
        return self.matrix

    def to_dict(self):
        d = {"kind": self.kind, "n_source": self.n_source, "n_target": self.n_target}
        if self.assignment is not None:
            d["assignment"] = [int(a) for a in self.assignment]
        return d


def identity_map(n: int) -> LabelMap:
    return LabelMap("identity", n, n)


def flm_fit(source_preds, labels, n_source: int, n_target: int) -> LabelMap:
    """Greedy one-to-one map from co-occurrence counts.

    Repeatedly takes the largest count among unassigned targets and unclaimed
    sources; ties go to the smallest target index, then smallest source index.
    """
    if n_target > n_source:
        raise InfeasibleMappingError(f"cannot map {n_target} targets injectively into {n_source}")
    counts = np.zeros((n_target, n_source), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels, dtype=np.int64), np.asarray(source_preds, dtype=np.int64)), 1)
    assignment = np.full(n_target, -1, dtype=np.int64)
    free_t = np.ones(n_target, dtype=bool)
    free_s = np.ones(n_source, dtype=bool)
    for _ in range(n_target):
        masked = np.where(free_t[:, None] & free_s[None, :], counts, -1)
        t, s = np.unravel_index(np.argmax(masked), masked.shape)  # row-major = tie-break rule
        assignment[t] = s
        free_t[t] = False
        free_s[s] = False
    return LabelMap("flm", n_source, n_target, assignment=assignment)


def blm_fit(source_probs, labels, n_target: int, alpha: float = 1.0) -> LabelMap:
    """Per-target conditional mean of source probabilities with Laplace smoothing ``alpha``."""
    if alpha <= 0:
        raise ConfigError("blm smoothing alpha must be positive")
    p = np.asarray(source_probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    sums = np.zeros((n_target, p.shape[1]))
    np.add.at(sums, y, p)
    m = alpha + sums
    m = m / m.sum(axis=1, keepdims=True)
    return LabelMap("blm", p.shape[1], n_target, matrix=m)


def fit_label_map(kind: str, source_probs, labels, n_target: int, alpha: float = 1.0) -> LabelMap:
    p = np.asarray(source_probs)
    if kind == "identity":
        if p.shape[1] != n_target:
            raise ConfigError(f"identity map needs shared labels, got K^S={p.shape[1]}, K^T={n_target}")
        return identity_map(n_target)
    if kind == "flm":
        return flm_fit(np.argmax(p, axis=1), labels, p.shape[1], n_target)
    if kind == "blm":
        return blm_fit(p, labels, n_target, alpha)
    raise ConfigError(f"unknown label map kind {kind!r}")


def map_output(label_map: LabelMap, source_probs) -> np.ndarray:
    """Source probabilities to a target distribution (rows renormalised)."""
    p = np.asarray(source_probs, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[1] != label_map.n_source:
        raise InvalidInputError(f"map expects width {label_map.n_source}, got {p.shape[1]}")
    if label_map.kind == "identity":
        out = p.copy()
    else:
        if label_map.kind == "flm":
            s = p[:, label_map.assignment]
        else:
            s = p @ label_map.matrix.T
        tot = s.sum(axis=1, keepdims=True)
        zero = tot[:, 0] <= 0
        s[zero] = 1.0
        tot[zero] = label_map.n_target
        out = s / tot
    return out[0] if single else out


# ---------------------------------------------------------------------------
# First-order prompt training
# ---------------------------------------------------------------------------

@dataclass
class VrConfig:
    lr: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    refresh: int = 10
    prompt: str = "padding"
    seed: int = 0
    blm_alpha: float = 1.0

    def __post_init__(self):
        if self.refresh < 1:
            raise ConfigError("label-map refresh interval must be >= 1")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("invalid VR optimisation settings")


@dataclass
class VrResult:
    prompt: Prompt
    label_map: LabelMap
    loss_curve: list[float] = field(default_factory=list)


def local_probs(local: LocalModel, prompt: Prompt, images) -> np.ndarray:
    return nm.softmax(local.logits(prompt.apply(images)))


def _vr_loss(g, local, prompt, x, y, label_map):
    logits = local.forward_graph(g, prompt.apply_graph(g, x))
    if label_map.kind == "identity":
        return g.softmax_cross_entropy(logits, y)
    q = g.normalize_rows(g.matmul_const_t(g.softmax(logits), label_map.as_matrix()))
    return g.nll_probs(q, y)


def train_prompt_foo(local: LocalModel, images, labels, n_target: int, map_kind: str,
                     prompt: Prompt, config: VrConfig) -> VrResult:
    """Prompt descent with exact gradients through the local model.

    The head stays frozen; the label map is refitted from the current prompted
    predictions every ``config.refresh`` epochs, starting at epoch 0.
    """
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    rng = nm.rng_from_seed(config.seed)
    head_flags = {n: local.head.is_trainable(n) for n in local.head.names()}
    for n in head_flags:
        local.head.set_trainable(n, False)
    label_map = fit_label_map(map_kind, local_probs(local, prompt, x), y, n_target, config.blm_alpha)
    opt = nm.Adam(prompt.params, config.lr)
    curve = []
    try:
        for epoch in range(config.epochs):
            if epoch > 0 and epoch % config.refresh == 0:
                label_map = fit_label_map(map_kind, local_probs(local, prompt, x), y, n_target,
                                          config.blm_alpha)
            total = 0.0
            for idx in iterate_minibatches(len(x), config.batch_size, rng):
                g = nm.DiffGraph()
                loss = _vr_loss(g, local, prompt, x[idx], y[idx], label_map)
                if not np.isfinite(loss.value):
                    raise TrainingError("VR loss diverged", epoch)
                prompt.params.zero_grad()
                nm.backward(g, loss)
                opt.step()
                total += float(loss.value) * len(idx)
            curve.append(total / len(x))
    finally:
        for n, flag in head_flags.items():
            local.head.set_trainable(n, flag)
    return VrResult(prompt, label_map, curve)


def vr_loss_value(local, prompt, images, labels, label_map) -> float:
    g = nm.DiffGraph()
    return float(_vr_loss(g, local, prompt, np.asarray(images), np.asarray(labels), label_map).value)


def infer(local: LocalModel, prompt: Prompt, label_map: LabelMap, images) -> np.ndarray:
    """Predicted target classes; runs entirely on the local model."""
    scores = map_output(label_map, local_probs(local, prompt, images))
    return np.argmax(np.atleast_2d(scores), axis=1)


def accuracy(pred, labels) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Artifact I/O
# ---------------------------------------------------------------------------

def save_artifact(path, prompt: Prompt, label_map: LabelMap) -> None:
    header = {"kind": "prompt", "prompt_kind": prompt.kind,
              "dims": {"image": list(prompt.image_dims), "canvas": list(prompt.canvas_dims)},
              "map_kind": label_map.kind, "map": label_map.to_dict()}
    blocks = [("P", prompt.params["P"])]
    if prompt.kind == "watermark":
        blocks.append(("mask", prompt.mask))
    if label_map.kind == "blm":
        blocks.append(("map", label_map.matrix))
    write_container(path, header, blocks)


def load_artifact(path) -> tuple[Prompt, LabelMap]:
    header, blocks = read_container(path)
    if header.get("kind") != "prompt":
        raise InvalidInputError(f"{path} is not a prompt artifact")
    dims = header["dims"]
    if header["prompt_kind"] == "watermark":
        prompt = WatermarkPrompt(dims["image"], dims["canvas"], blocks["mask"])
    else:
        prompt = make_prompt(header["prompt_kind"], dims["image"], dims["canvas"])
    prompt.set_flat(blocks["P"])
    m = header["map"]
    if m["kind"] == "blm":
        label_map = LabelMap("blm", m["n_source"], m["n_target"], matrix=blocks["map"])
    elif m["kind"] == "flm":
        label_map = LabelMap("flm", m["n_source"], m["n_target"],
                             assignment=np.array(m["assignment"], dtype=np.int64))
    else:
        label_map = identity_map(m["n_source"])
    return prompt, label_map
