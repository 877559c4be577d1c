"""Zeroth-order prompt training against the metered service (RGF and SPSA-GC baselines).

Estimators only see a scalar objective ``P -> loss``; they never touch the
autodiff engine.  Every objective evaluation costs one API call per image in
the current batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import BudgetError, ConfigError, InvalidInputError
from .models import ServiceApi
from .priming import response_to_probs
from .reprogram import LabelMap, Prompt, fit_label_map, map_output

ESTIMATORS = ("rgf", "spsa_gc")


def rgf_estimate(objective, P, q: int, mu: float, rng, directions=None) -> np.ndarray:
    """(d/q) * sum_i (f(P + mu u_i) - f(P)) / mu * u_i with u_i uniform on the unit sphere.

    Exactly ``q + 1`` objective evaluations.  ``directions`` (q, d) overrides
    the random draw.
    """
    if q < 1 or mu <= 0:
        raise ConfigError("rgf needs q >= 1 and mu > 0")
    P = np.asarray(P, dtype=np.float64)
    d = P.size
    if directions is None:
        u = rng.standard_normal((q, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
    else:
        u = np.asarray(directions, dtype=np.float64).reshape(q, d)
    base = float(objective(P))
    grad = np.zeros(d)
    for i in range(q):
        try:
            val = float(objective(P + mu * u[i].reshape(P.shape)))
        except Exception as exc:
            raise type(exc)(f"direction {i}: {exc}") from exc
        grad += (val - base) / mu * u[i]
    return (d / q) * grad.reshape(P.shape)


def spsa_gc_estimate(objective, P, c: float, rng, delta=None) -> np.ndarray:
    """(f(P + c D) - f(P - c D)) / (2c) * D with Rademacher D (so D^-1 = D).

    Exactly two objective evaluations.
    """
    if c <= 0:
        raise ConfigError("spsa needs c > 0")
    P = np.asarray(P, dtype=np.float64)
    if delta is None:
        delta = rng.choice(np.array([-1.0, 1.0]), size=P.shape)
    delta = np.asarray(delta, dtype=np.float64).reshape(P.shape)
    plus = float(objective(P + c * delta))
    minus = float(objective(P - c * delta))
    return (plus - minus) / (2.0 * c) * delta


@dataclass
class ZooConfig:
    estimator: str = "spsa_gc"
    q: int = 5
    mu: float = 0.01
    c0: float = 0.01
    a0: float = 0.01
    a_offset_frac: float = 0.1
    beta: float = 0.9
    steps: int = 100
    batch_size: int = 16
    seed: int = 0
    loss: str | None = None  # None: focal for rgf, cross-entropy for spsa_gc
    gamma: float = 2.0
    refresh: int = 10
    max_calls: int | None = None

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.q < 1 or self.mu <= 0 or self.c0 <= 0 or self.a0 <= 0:
            raise ConfigError("zoo needs q >= 1, mu > 0, c0 > 0, a0 > 0")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError("beta must lie in [0, 1)")
        if self.steps < 1 or self.batch_size < 1 or self.refresh < 1:
            raise ConfigError("steps, batch_size and refresh must be >= 1")
        if self.loss not in (None, "focal", "cross_entropy"):
            raise ConfigError(f"unknown zoo loss {self.loss!r}")

    @property
    def loss_kind(self) -> str:
        if self.loss is not None:
            return self.loss
        return "focal" if self.estimator == "rgf" else "cross_entropy"

    def c_at(self, t: int) -> float:
        return self.c0 / (t + 1) ** 0.101

    def a_at(self, t: int) -> float:
        return self.a0 / (t + 1 + self.a_offset_frac * self.steps) ** 0.602

    def calls_per_step(self) -> int:
        evals = self.q + 1 if self.estimator == "rgf" else 2
        return evals * self.batch_size


@dataclass
class ZooTrace:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    cumulative_calls: list[int] = field(default_factory=list)

    def append(self, step, loss, grad_norm, calls):
        if self.cumulative_calls and calls <= self.cumulative_calls[-1]:
            raise InvalidInputError("cumulative calls must strictly increase")
        self.steps.append(int(step))
        self.loss.append(float(loss))
        self.grad_norm.append(float(grad_norm))
        self.cumulative_calls.append(int(calls))

    def __len__(self):
        return len(self.steps)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "grad_norm", "cumulative_calls"])
            for row in zip(self.steps, self.loss, self.grad_norm, self.cumulative_calls):
                w.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])


@dataclass
class ZooResult:
    prompt: Prompt
    label_map: LabelMap
    trace: ZooTrace


def _batch_stream(n, batch, rng):
    """Endless fixed-size batches drawn from successive permutations."""
    queue = np.empty(0, dtype=np.int64)
    while True:
        while len(queue) < batch:
            queue = np.concatenate([queue, rng.permutation(n)])
        yield queue[:batch]
        queue = queue[batch:]


def _service_probs(api: ServiceApi, canvases, phase):
    return np.array([response_to_probs(r, api.n_classes)[0]
                     for r in api.predict_batch(canvases, phase)])


def mapped_loss(target_probs, labels, kind: str, gamma: float = 2.0) -> float:
    """Mean cross-entropy or focal loss of mapped target probabilities."""
    logq = np.log(np.maximum(target_probs, nm.PROB_FLOOR))
    if kind == "focal":
        vals = [nm.focal_loss(z, int(y), gamma) for z, y in zip(logq, labels)]
    else:
        vals = [nm.cross_entropy(z, int(y)) for z, y in zip(logq, labels)]
    return float(np.mean(vals))


def train_prompt_zoo(api: ServiceApi, images, labels, n_target: int, map_kind: str,
                     prompt: Prompt, config: ZooConfig, blm_alpha: float = 1.0) -> ZooResult:
    """Optimise ``prompt`` from service outputs only.

    The label map is fitted from the responses of the first evaluation and
    refitted every ``refresh`` epochs from the latest response seen for each
    image, so refreshing never costs extra calls.
    """
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) != len(y) or len(x) == 0:
        raise InvalidInputError("images and labels must be nonempty and aligned")
    if map_kind == "identity" and api.n_classes != n_target:
        raise ConfigError("identity map needs matching source and target class counts")
    rng = nm.rng_from_seed(config.seed)
    batches = _batch_stream(len(x), config.batch_size, rng)
    steps_per_epoch = -(-len(x) // config.batch_size)
    refresh_every = config.refresh * steps_per_epoch
    start = api.meter.train
    seen = np.zeros((len(x), api.n_classes))
    seen_mask = np.zeros(len(x), dtype=bool)
    state = {"map": None}
    trace = ZooTrace()
    kind = config.loss_kind

    def refit():
        if seen_mask.any():
            state["map"] = fit_label_map(map_kind, seen[seen_mask], y[seen_mask], n_target,
                                         blm_alpha)

    def make_objective(idx, values):
        def objective(flat):
            used = api.meter.train - start
            if config.max_calls is not None and used + len(idx) > config.max_calls:
                raise BudgetError(f"call budget {config.max_calls} exhausted", trace)
            probs = _service_probs(api, prompt.apply(x[idx], flat), "train")
            seen[idx] = probs
            seen_mask[idx] = True
            if state["map"] is None:
                refit()
            val = mapped_loss(map_output(state["map"], probs), y[idx], kind, config.gamma)
            values.append(val)
            return val
        return objective

    P = prompt.get_flat()
    m = np.zeros_like(P)
    for t in range(config.steps):
        if t > 0 and t % refresh_every == 0:
            refit()
        idx = next(batches)
        values: list[float] = []
        objective = make_objective(idx, values)
        if config.estimator == "rgf":
            g = rgf_estimate(objective, P, config.q, config.mu, rng)
            P = P - config.a_at(t) * g
            loss = values[0]
        else:
            g = spsa_gc_estimate(objective, P, config.c_at(t), rng)
            m = config.beta * m + (1.0 - config.beta) * g
            P = P - config.a_at(t) * m
            loss = 0.5 * (values[0] + values[1])
        trace.append(t, loss, np.linalg.norm(g), api.meter.train - start)
    prompt.set_flat(P)
    return ZooResult(prompt, state["map"], trace)


def expected_calls(config: ZooConfig) -> int:
    return config.steps * config.calls_per_step()


def infer_api(api: ServiceApi, prompt: Prompt, label_map: LabelMap, images) -> np.ndarray:
    """Service-side prediction: one infer-phase call per image."""
    probs = _service_probs(api, prompt.apply(images), "infer")
    return np.argmax(map_output(label_map, probs), axis=1)
