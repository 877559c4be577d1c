"""Empirical checks of the cross-entropy Lipschitz lemma and the priming risk sandwich."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import numeric as nm
from .errors import ConfigError, InvalidInputError
from .models import LocalModel, ServiceApi
from .priming import FaithfulnessReport, logit_pair

# Absolute slack for float round-off when comparing sums of per-sample terms.
ROUNDOFF = 1e-12


def _ce_rows(z, y) -> np.ndarray:
    return -nm.log_softmax(z)[np.arange(len(y)), y]


def verify_lipschitz(samples: int, k_range=(2, 32), rng=None, scale: float = 5.0) -> float:
    """Largest |l(z1, y) - l(z2, y)| / ||z1 - z2||_1 over random logit pairs.

    Pairs closer than 1e-12 in L1 are skipped.
    """
    if samples < 1:
        raise InvalidInputError("need at least one sample")
    rng = nm.rng_from_seed(0) if rng is None else rng
    lo, hi = k_range
    worst = 0.0
    ks = rng.integers(lo, hi + 1, size=samples)
    for k in np.unique(ks):
        n = int(np.sum(ks == k))
        z1 = rng.normal(0.0, scale, size=(n, k))
        # mix of far pairs and near pairs so both regimes are probed
        step = rng.normal(0.0, 1.0, size=(n, k)) * 10.0 ** rng.uniform(-6, 1, size=(n, 1))
        z2 = z1 + step
        y = rng.integers(0, k, size=n)
        gap = np.abs(z1 - z2).sum(axis=1)
        keep = gap >= 1e-12
        diff = np.abs(_ce_rows(z1, y) - _ce_rows(z2, y))
        if keep.any():
            worst = max(worst, float(np.max(diff[keep] / gap[keep])))
    return worst


@dataclass
class Risks:
    r_local: float
    r_service: float
    epsilon: float
    n_samples: int


def compute_risks(local: LocalModel, api: ServiceApi, images, labels, prompt,
                  service_prompt=None, label_map=None) -> Risks:
    """Mean cross-entropy of both models plus the L1 logit gap, in one pass on one sample.

    The service side reads debug logits, so the cost meter never moves.
    """
    y = np.asarray(labels, dtype=np.int64)
    zl, zs = logit_pair(local, api, images, prompt, service_prompt, label_map)
    if len(y) != len(zl):
        raise ConfigError("labels and images differ in count")
    if y.min() < 0 or y.max() >= zl.shape[1]:
        raise InvalidInputError("label outside the task label space")
    return Risks(float(np.mean(_ce_rows(zl, y))), float(np.mean(_ce_rows(zs, y))),
                 float(np.mean(np.abs(zs - zl).sum(axis=1))), len(y))


@dataclass
class BoundReport:
    R_L_pre: float
    R_S_pre: float
    R_L_post: float
    R_S_post: float
    epsilon_pre: float
    epsilon_post: float
    superiority_holds_pre: bool
    superiority_holds_post: bool
    bound_holds_pre: bool
    bound_holds_post: bool
    left_holds_pre: bool
    left_holds_post: bool
    right_status_pre: str
    right_status_post: str
    n_samples: int
    seed: int | None = None

    @property
    def epsilon(self) -> float:
        return max(self.epsilon_pre, self.epsilon_post)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epsilon"] = self.epsilon
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _sandwich(r_l, r_s, eps):
    left = r_l - eps <= r_s + ROUNDOFF
    superior = r_s <= r_l
    if not superior:
        return left, superior, left, "assumption-unmet"
    right = r_s <= r_l
    return left, superior, left and right, "holds" if right else "violated"


def verify_bound(pre: Risks, post: Risks, seed: int | None = None,
                 faithfulness: FaithfulnessReport | None = None) -> BoundReport:
    """Check R_L - eps <= R_S <= R_L before and after prompting.

    The left side must always hold; the right side is only judged when the
    service is at least as good as the local model.  If a separately measured
    ``faithfulness`` report is given it must come from the same sample and
    agree with the gaps carried by the risks.
    """
    if pre.n_samples != post.n_samples:
        raise ConfigError("pre and post risks come from different samples")
    if faithfulness is not None:
        if faithfulness.n_samples != pre.n_samples:
            raise ConfigError("epsilon measured on a different sample than the risks")
        if abs(faithfulness.epsilon_pre - pre.epsilon) > 1e-9 or (
                faithfulness.epsilon_post is not None
                and abs(faithfulness.epsilon_post - post.epsilon) > 1e-9):
            raise ConfigError("epsilon does not match the risk sample")
    lp, sp, bp, rp = _sandwich(pre.r_local, pre.r_service, pre.epsilon)
    lq, sq, bq, rq = _sandwich(post.r_local, post.r_service, post.epsilon)
    return BoundReport(pre.r_local, pre.r_service, post.r_local, post.r_service,
                       pre.epsilon, post.epsilon, sp, sq, bp, bq, lp, lq, rp, rq,
                       pre.n_samples, seed)
