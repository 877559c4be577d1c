"""Stage one: query the service once per image, expand partial outputs, fit the local head."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import CapabilityError, ConfigError, InvalidInputError, StateError, TrainingError
from .models import ApiResponse, LocalModel, ServiceApi, iterate_minibatches
from .reprogram import map_output


@dataclass
class PrimingConfig:
    loss: str = "kl"
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("priming needs epochs >= 1, lr > 0, batch_size >= 1")
        if self.loss not in nm.LOSS_KINDS:
            raise ConfigError(f"unknown priming loss {self.loss!r}")


@dataclass
class SoftLabelSet:
    probs: np.ndarray  # (n, K^S)
    provenance: list[str]
    logits: np.ndarray | None = None  # debug logits, only for logit-space ablations

    def __len__(self):
        return len(self.probs)

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for i, (p, prov) in enumerate(zip(self.probs, self.provenance)):
                fh.write(json.dumps({"index": i, "provenance": prov, "probs": p.tolist()}) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "SoftLabelSet":
        probs, prov = [], []
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["index"] != len(probs):
                    raise InvalidInputError(f"{path}: records out of order at {rec['index']}")
                probs.append(rec["probs"])
                prov.append(rec["provenance"])
        return cls(np.asarray(probs, dtype=np.float64), prov)


def expand_topk_soft(pairs, n_classes: int) -> np.ndarray:
    """Keep revealed probabilities; spread the leftover mass evenly over hidden classes."""
    k = len(pairs)
    if not 1 <= k <= n_classes:
        raise InvalidInputError(f"need 1 <= k <= K, got k={k}, K={n_classes}")
    idx = [int(c) for c, _ in pairs]
    if len(set(idx)) != k:
        raise InvalidInputError("duplicate class indices in top-k pairs")
    vals = np.array([float(p) for _, p in pairs])
    s = vals.sum()
    if s > 1.0 + 1e-9 or np.any(vals < 0):
        raise InvalidInputError("revealed probabilities exceed 1")
    out = np.empty(n_classes)
    if k < n_classes:
        out[:] = max(1.0 - s, 0.0) / (n_classes - k)
    out[idx] = vals
    return out


def expand_topk_hard(ranked, n_classes: int) -> np.ndarray:
    """Ranked top-k list to a distribution.

    The top-k set receives mass k/(k+1), split by rank with weights 1/r
    normalised by the k-th harmonic number; the remaining 1/(k+1) is spread
    evenly over the unranked classes.  ``k == K`` is rejected because no
    class would be left to carry the remainder.
    """
    k = len(ranked)
    if not 1 <= k < n_classes:
        raise InvalidInputError(f"hard expansion needs 1 <= k < K, got k={k}, K={n_classes}")
    idx = [int(c) for c in ranked]
    if len(set(idx)) != k:
        raise InvalidInputError("duplicate class indices in ranked list")
    if min(idx) < 0 or max(idx) >= n_classes:
        raise InvalidInputError("class index out of range")
    w = 1.0 / np.arange(1, k + 1)
    out = np.full(n_classes, (1.0 / (k + 1)) / (n_classes - k))
    out[idx] = (k / (k + 1)) * w / w.sum()
    return out


def response_to_probs(resp: ApiResponse, n_classes: int) -> tuple[np.ndarray, str]:
    if resp.mode == "full":
        return np.asarray(resp.probs, dtype=np.float64), "full"
    if resp.mode == "topk_soft":
        return expand_topk_soft(resp.pairs, n_classes), f"expanded-topk-soft({len(resp.pairs)})"
    return expand_topk_hard(resp.ranked, n_classes), f"expanded-topk-hard({len(resp.ranked)})"


def collect_soft_labels(api: ServiceApi, images, cache_path=None) -> SoftLabelSet:
    """One train-phase API call per image.

    With ``cache_path`` set, an existing cache of the right length is reused
    and the service is not queried at all.
    """
    x = np.asarray(images, dtype=np.float64)
    if len(x) == 0:
        raise InvalidInputError("no images to label")
    if cache_path is not None and os.path.exists(cache_path):
        cached = SoftLabelSet.load_jsonl(cache_path)
        if len(cached) == len(x) and cached.probs.shape[1] == api.n_classes:
            return cached
    probs, prov = [], []
    for i, img in enumerate(x):
        try:
            resp = api.predict(img, "train")
        except Exception as exc:  # re-raise with the offending index
            raise type(exc)(f"image {i}: {exc}") from exc
        p, tag = response_to_probs(resp, api.n_classes)
        probs.append(p)
        prov.append(tag)
    out = SoftLabelSet(np.array(probs), prov)
    if cache_path is not None:
        out.save_jsonl(cache_path)
    return out


@dataclass
class PrimingResult:
    loss_curve: list[float]
    encoder_checksum: str
    api_calls: int = 0


def _head_loss(g, logits, kind, probs, logits_target):
    if kind == "kl":
        return g.soft_cross_entropy(logits, probs)
    if kind == "l1_prob":
        return g.l1_to(g.softmax(logits), probs)
    if kind == "l2_prob":
        return g.l2_to(g.softmax(logits), probs)
    if kind == "l1_logit":
        return g.l1_to(logits, logits_target)
    return g.l2_to(logits, logits_target)


def prime(local: LocalModel, images, soft_labels: SoftLabelSet, config: PrimingConfig,
          features=None) -> PrimingResult:
    """Fit the head so the local distribution matches the service soft labels.

    Only the head moves; the encoder checksum is verified afterwards.  No API
    access happens here.
    """
    x = np.asarray(images, dtype=np.float64)
    if len(x) != len(soft_labels):
        raise ConfigError("images and soft labels differ in count")
    if local.head_width != soft_labels.probs.shape[1]:
        raise ConfigError(
            f"head width {local.head_width} != soft-label width {soft_labels.probs.shape[1]}")
    if config.loss.endswith("logit") and soft_labels.logits is None:
        raise CapabilityError(f"{config.loss} needs service logits")
    before = local.encoder_checksum()
    feats = local.features(x) if features is None else features
    rng = nm.rng_from_seed(config.seed)
    opt = nm.Adam(local.head, config.lr)
    curve = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in iterate_minibatches(len(x), config.batch_size, rng):
            g = nm.DiffGraph()
            logits = g.add_row(g.matmul(g.const(feats[idx]), g.param("W", local.head)),
                               g.param("b", local.head))
            tgt_logits = None if soft_labels.logits is None else soft_labels.logits[idx]
            loss = _head_loss(g, logits, config.loss, soft_labels.probs[idx], tgt_logits)
            if not np.isfinite(loss.value):
                raise TrainingError("priming loss diverged", epoch)
            local.head.zero_grad()
            nm.backward(g, loss)
            opt.step()
            total += float(loss.value) * len(idx)
        curve.append(total / len(x))
    after = local.encoder_checksum()
    if after != before:
        raise StateError("encoder parameters changed during priming")
    return PrimingResult(curve, after)


def linear_probe(local: LocalModel, images, labels, n_classes: int, config: PrimingConfig,
                 features=None) -> list[float]:
    """Train a fresh ``n_classes``-wide head on true labels with cross-entropy."""
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if y.max() >= n_classes or y.min() < 0:
        raise ConfigError("label out of range for the probe width")
    before = local.encoder_checksum()
    rng = nm.rng_from_seed(config.seed)
    local.reset_head(n_classes, rng)
    feats = local.features(x) if features is None else features
    opt = nm.Adam(local.head, config.lr)
    curve = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in iterate_minibatches(len(x), config.batch_size, rng):
            g = nm.DiffGraph()
            logits = g.add_row(g.matmul(g.const(feats[idx]), g.param("W", local.head)),
                               g.param("b", local.head))
            loss = g.softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss.value):
                raise TrainingError("probe loss diverged", epoch)
            local.head.zero_grad()
            nm.backward(g, loss)
            opt.step()
            total += float(loss.value) * len(idx)
        curve.append(total / len(x))
    if local.encoder_checksum() != before:
        raise StateError("encoder parameters changed during linear probing")
    return curve


@dataclass
class FaithfulnessReport:
    epsilon_pre: float
    epsilon_post: float | None
    n_samples: int
    space: str = "logit"

    @property
    def epsilon(self) -> float:
        """Single bound covering both stages."""
        if self.epsilon_post is None:
            return self.epsilon_pre
        return max(self.epsilon_pre, self.epsilon_post)

    def to_dict(self) -> dict:
        return {"epsilon_pre": self.epsilon_pre, "epsilon_post": self.epsilon_post,
                "epsilon": self.epsilon, "n_samples": self.n_samples, "space": self.space}


def task_logits(source_logits, label_map=None) -> np.ndarray:
    """Logits in the label space the risks are measured in, shifted to zero row mean.

    Cross-entropy ignores a constant shift, so centring leaves every risk
    unchanged while removing the shift freedom that probability-only priming
    cannot pin down.  With a non-identity map the task logits are the log of
    the mapped probabilities.
    """
    z = np.asarray(source_logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if label_map is not None and label_map.kind != "identity":
        z = np.log(np.maximum(map_output(label_map, nm.softmax(z)), nm.PROB_FLOOR))
    return z - z.mean(axis=1, keepdims=True)


def logit_pair(local: LocalModel, api: ServiceApi, images, prompt, service_prompt=None,
               label_map=None) -> tuple[np.ndarray, np.ndarray]:
    """Task logits of the local model on ``prompt`` inputs and the service on ``service_prompt``."""
    if not api.debug_logits_enabled:
        raise CapabilityError("logit comparisons need debug logits on the service")
    service_prompt = prompt if service_prompt is None else service_prompt
    z_local = task_logits(local.logits(prompt.apply(images)), label_map)
    z_service = task_logits(api.debug_logits_batch(service_prompt.apply(images)), label_map)
    return z_local, z_service


def measure_epsilon(local: LocalModel, api: ServiceApi, images, base_prompt, prompts=None,
                    label_map=None) -> FaithfulnessReport:
    """Mean L1 gap between service and local task logits.

    ``base_prompt`` only embeds the raw images (pre-VR); ``prompts`` is the
    optional (P*, Q*) pair for the local and service side after VR.  Only the
    debug counter of the service moves.
    """
    x = np.asarray(images, dtype=np.float64)
    if len(x) == 0:
        raise InvalidInputError("no images to measure on")
    zl, zs = logit_pair(local, api, x, base_prompt, None, label_map)
    pre = float(np.mean(np.abs(zs - zl).sum(axis=1)))
    post = None
    if prompts is not None:
        zl, zs = logit_pair(local, api, x, prompts[0], prompts[1], label_map)
        post = float(np.mean(np.abs(zs - zl).sum(axis=1)))
    space = "logit" if label_map is None or label_map.kind == "identity" else "log-mapped-prob"
    return FaithfulnessReport(pre, post, len(x), space)
