"""Reference classifiers, the frozen local encoder, and the metered service facade."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .container import read_container, write_container
from .errors import CapabilityError, InvalidInputError, TrainingError

DEFAULT_PRICE = 1e-3


@dataclass(frozen=True)
class Arch:
    """MLP over flattened ``H x W x C`` inputs."""

    input_dims: tuple[int, int, int]
    hidden: tuple[int, ...]
    n_classes: int
    activation: str = "tanh"

    @property
    def input_size(self) -> int:
        h, w, c = self.input_dims
        return h * w * c

    def to_dict(self):
        return {"input_dims": list(self.input_dims), "hidden": list(self.hidden),
                "n_classes": self.n_classes, "activation": self.activation}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_dims"]), tuple(d["hidden"]), int(d["n_classes"]),
                   d.get("activation", "tanh"))


SERVICE_HIDDEN = (128, 128)
ENCODER_HIDDEN = (64,)


def _act(graph, node, kind):
    return graph.tanh(node) if kind == "tanh" else graph.relu(node)


def _act_np(x, kind):
    return np.tanh(x) if kind == "tanh" else np.maximum(x, 0.0)


class Classifier:
    """Fully connected classifier; layer ``i`` has weights ``W{i}`` (in, out) and bias ``b{i}``."""

    def __init__(self, arch: Arch, params: nm.ParamSet):
        self.arch = arch
        self.params = params

    @classmethod
    def init(cls, arch: Arch, rng: np.random.Generator) -> "Classifier":
        if arch.activation not in ("tanh", "relu"):
            raise InvalidInputError(f"unknown activation {arch.activation!r}")
        widths = [arch.input_size, *arch.hidden, arch.n_classes]
        ps = nm.ParamSet()
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / (a + b))
            ps.add(f"W{i}", rng.uniform(-bound, bound, size=(a, b)))
            ps.add(f"b{i}", np.zeros(b))
        return cls(arch, ps)

    @property
    def n_layers(self) -> int:
        return len(self.arch.hidden) + 1

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.arch.input_size:
            raise InvalidInputError(
                f"expected inputs of size {self.arch.input_size}, got shape {x.shape}")
        return x

    def features(self, x) -> np.ndarray:
        """Activations of the last hidden layer."""
        h = self._check(x)
        for i in range(self.n_layers - 1):
            h = _act_np(h @ self.params[f"W{i}"] + self.params[f"b{i}"], self.arch.activation)
        return h

    def logits(self, x) -> np.ndarray:
        last = self.n_layers - 1
        return self.features(x) @ self.params[f"W{last}"] + self.params[f"b{last}"]

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def features_graph(self, g: nm.DiffGraph, x: nm.Node) -> nm.Node:
        h = x
        for i in range(self.n_layers - 1):
            h = g.add_row(g.matmul(h, g.param(f"W{i}", self.params)), g.param(f"b{i}", self.params))
            h = _act(g, h, self.arch.activation)
        return h

    def logits_graph(self, g: nm.DiffGraph, x: nm.Node) -> nm.Node:
        last = self.n_layers - 1
        h = self.features_graph(g, x)
        return g.add_row(g.matmul(h, g.param(f"W{last}", self.params)),
                         g.param(f"b{last}", self.params))

    def save(self, path) -> None:
        write_container(path, {"kind": "classifier", "arch": self.arch.to_dict()},
                        list(self.params.items()))

    @classmethod
    def load(cls, path) -> "Classifier":
        header, blocks = read_container(path)
        if header.get("kind") != "classifier":
            raise InvalidInputError(f"{path} is not a classifier checkpoint")
        ps = nm.ParamSet()
        for name, arr in blocks.items():
            ps.add(name, arr)
        return cls(Arch.from_dict(header["arch"]), ps)


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 64


def iterate_minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_classifier(images, labels, arch: Arch, config: TrainConfig, seed: int):
    """Train a fresh classifier with Adam on cross-entropy.

    Returns ``(classifier, train_accuracy)``.  Deterministic for a given seed.
    """
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise InvalidInputError("empty training set")
    if y.max() >= arch.n_classes or y.min() < 0:
        raise InvalidInputError("label out of range")
    rng = nm.rng_from_seed(seed)
    clf = Classifier.init(arch, rng)
    x = clf._check(x)
    opt = nm.Adam(clf.params, config.lr)
    for epoch in range(config.epochs):
        for idx in iterate_minibatches(len(x), config.batch_size, rng):
            g = nm.DiffGraph()
            loss = g.softmax_cross_entropy(clf.logits_graph(g, g.const(x[idx])), y[idx])
            if not np.isfinite(loss.value):
                raise TrainingError("loss diverged", epoch)
            clf.params.zero_grad()
            nm.backward(g, loss)
            opt.step()
    acc = float((clf.predict(x) == y).mean())
    return clf, acc


class LocalModel:
    """Frozen encoder (a classifier minus its last layer) plus a trainable linear head."""

    def __init__(self, encoder: Classifier, head_width: int | None = None,
                 rng: np.random.Generator | None = None):
        """Wrap ``encoder``; with ``head_width=None`` its own final layer becomes the head."""
        enc_ps = nm.ParamSet()
        keep = 2 * (encoder.n_layers - 1)
        for name, value in list(encoder.params.items())[:keep]:
            enc_ps.add(name, value.copy(), trainable=False)
        self.encoder = Classifier(encoder.arch, enc_ps)
        self.d_enc = encoder.arch.hidden[-1]
        if head_width is None:
            last = encoder.n_layers - 1
            self.head = nm.ParamSet()
            self.head.add("W", encoder.params[f"W{last}"].copy())
            self.head.add("b", encoder.params[f"b{last}"].copy())
        else:
            self.reset_head(head_width, rng)

    @property
    def input_dims(self):
        return self.encoder.arch.input_dims

    @property
    def head_width(self) -> int:
        return self.head["b"].shape[0]

    def reset_head(self, width: int, rng: np.random.Generator | None = None) -> None:
        self.head = nm.ParamSet()
        self.head.add("W", np.zeros((self.d_enc, width)))
        self.head.add("b", np.zeros(width))
        if rng is not None:
            bound = np.sqrt(6.0 / (self.d_enc + width))
            self.head["W"] = rng.uniform(-bound, bound, size=(self.d_enc, width))

    def encoder_checksum(self) -> str:
        return self.encoder.params.checksum()

    def features(self, x) -> np.ndarray:
        return self.encoder.features(x)

    def logits(self, x) -> np.ndarray:
        return self.features(x) @ self.head["W"] + self.head["b"]

    def logits_from_features(self, feats) -> np.ndarray:
        return feats @ self.head["W"] + self.head["b"]

    def forward_graph(self, g: nm.DiffGraph, x: nm.Node) -> nm.Node:
        h = self.encoder.features_graph(g, x)
        return g.add_row(g.matmul(h, g.param("W", self.head)), g.param("b", self.head))

    def save(self, path) -> None:
        blocks = list(self.encoder.params.items()) + [("head.W", self.head["W"]),
                                                      ("head.b", self.head["b"])]
        write_container(path, {"kind": "local", "arch": self.encoder.arch.to_dict()}, blocks)

    @classmethod
    def load(cls, path) -> "LocalModel":
        header, blocks = read_container(path)
        if header.get("kind") != "local":
            raise InvalidInputError(f"{path} is not a local-model checkpoint")
        ps = nm.ParamSet()
        for name, arr in blocks.items():
            if not name.startswith("head."):
                ps.add(name, arr)
        arch = Arch.from_dict(header["arch"])
        # Stub final layer so the encoder slicing in __init__ is uniform.
        last = len(arch.hidden)
        ps.add(f"W{last}", np.zeros((arch.hidden[-1], arch.n_classes)))
        ps.add(f"b{last}", np.zeros(arch.n_classes))
        local = cls(Classifier(arch, ps), blocks["head.b"].shape[0])
        local.head["W"] = blocks["head.W"]
        local.head["b"] = blocks["head.b"]
        return local


def local_forward(local: LocalModel, images) -> np.ndarray:
    return local.logits(images)


# ---------------------------------------------------------------------------
# Closed-box service
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OutputMode:
    kind: str = "full"  # full | topk_soft | topk_hard
    k: int | None = None

    def __post_init__(self):
        if self.kind not in ("full", "topk_soft", "topk_hard"):
            raise InvalidInputError(f"unknown output mode {self.kind!r}")
        if self.kind != "full" and (self.k is None or self.k < 1):
            raise InvalidInputError("top-k modes need k >= 1")


@dataclass(frozen=True)
class Robustness:
    kind: str = "none"  # none | quantize
    levels: int | None = None

    def __post_init__(self):
        if self.kind not in ("none", "quantize"):
            raise InvalidInputError(f"unknown robustness mode {self.kind!r}")
        if self.kind == "quantize" and (self.levels is None or self.levels < 2):
            raise InvalidInputError("quantize needs levels >= 2")


def quantize(x, levels: int) -> np.ndarray:
    """Round every pixel to the nearest of ``levels`` uniform values in [0, 1]."""
    step = levels - 1
    return np.round(np.clip(x, 0.0, 1.0) * step) / step


@dataclass(frozen=True)
class ApiResponse:
    mode: str
    probs: np.ndarray | None = None
    pairs: tuple[tuple[int, float], ...] | None = None
    ranked: tuple[int, ...] | None = None


class Meter:
    """Thread-safe monotonic call counters."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = {"train": 0, "infer": 0, "debug": 0}

    def add(self, phase: str, n: int = 1) -> None:
        if phase not in self._counts:
            raise InvalidInputError(f"unknown phase {phase!r}")
        with self._lock:
            self._counts[phase] += n

    @property
    def train(self) -> int:
        return self._counts["train"]

    @property
    def infer(self) -> int:
        return self._counts["infer"]

    @property
    def debug(self) -> int:
        return self._counts["debug"]

    @property
    def total(self) -> int:
        return self._counts["train"] + self._counts["infer"]

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._counts)


class ServiceApi:
    """Probability-only facade over a hidden classifier.

    Every image sent through :meth:`predict` or :meth:`predict_batch` costs one
    metered call.  Raw logits are reachable only through :meth:`debug_logits`
    when the service was built with ``debug_logits_enabled``; those calls go
    to a separate counter and carry no price.
    """

    def __init__(self, classifier: Classifier, price_per_call: float = DEFAULT_PRICE,
                 output_mode: OutputMode = OutputMode(), robustness: Robustness = Robustness(),
                 debug_logits_enabled: bool = False):
        self.__inner = classifier
        self.input_dims = tuple(classifier.arch.input_dims)
        self.n_classes = classifier.arch.n_classes
        self.price_per_call = float(price_per_call)
        self.output_mode = output_mode
        self.robustness = robustness
        self.debug_logits_enabled = bool(debug_logits_enabled)
        self.meter = Meter()

    def _prepare(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        h, w, c = self.input_dims
        if x.ndim != 2 or x.shape[1] != h * w * c:
            raise InvalidInputError(f"service expects {h}x{w}x{c} inputs, got {x.shape}")
        if self.robustness.kind == "quantize":
            x = quantize(x, self.robustness.levels)
        return x

    def _truncate(self, p):
        mode = self.output_mode
        if mode.kind == "full":
            return ApiResponse("full", probs=p)
        k = min(mode.k, len(p))
        order = np.argsort(-p, kind="stable")[:k]
        if mode.kind == "topk_soft":
            return ApiResponse("topk_soft", pairs=tuple((int(i), float(p[i])) for i in order))
        return ApiResponse("topk_hard", ranked=tuple(int(i) for i in order))

    def predict_batch(self, images, phase: str) -> list[ApiResponse]:
        if phase not in ("train", "infer"):
            raise InvalidInputError(f"phase must be 'train' or 'infer', got {phase!r}")
        x = self._prepare(images)
        self.meter.add(phase, len(x))
        probs = nm.softmax(self.__inner.logits(x))
        return [self._truncate(p) for p in probs]

    def predict(self, image, phase: str) -> ApiResponse:
        return self.predict_batch(image, phase)[0]

    def debug_logits_batch(self, images) -> np.ndarray:
        if not self.debug_logits_enabled:
            raise CapabilityError("debug logits are disabled on this service")
        x = self._prepare(images)
        self.meter.add("debug", len(x))
        return self.__inner.logits(x)

    def debug_logits(self, image) -> np.ndarray:
        return self.debug_logits_batch(image)[0]

    @property
    def cost(self) -> float:
        return self.meter.total * self.price_per_call


def service_predict(api: ServiceApi, image, phase: str) -> ApiResponse:
    return api.predict(image, phase)


def debug_logits(api: ServiceApi, image) -> np.ndarray:
    return api.debug_logits(image)
