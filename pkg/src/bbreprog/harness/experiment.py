"""End-to-end runs of every method, metered accounting and comparison tables."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import numeric as nm
from ..errors import GateError, LabError, StageError
from ..models import (Arch, LocalModel, OutputMode, Robustness, ServiceApi, TrainConfig,
                      train_classifier)
from ..priming import (PrimingConfig, SoftLabelSet, collect_soft_labels, linear_probe,
                       measure_epsilon, prime)
from ..reprogram import (VrConfig, accuracy, fit_label_map, identity_map, infer, make_prompt,
                         map_output, train_prompt_foo)
from ..theory import compute_risks, verify_bound
from ..zoo import ZooConfig, expected_calls, infer_api, train_prompt_zoo
from .config import ExperimentConfig
from .data import SyntheticTask, few_shot_split, generate_task

NOTES = {
    "blm": "blm is a conditional mean with Laplace smoothing (alpha), an approximation of the "
           "Bayesian mapping",
    "ares_ms": "selection compares estimates on a held-out split of the few-shot training set",
    "zero_shot_na": "zero-shot is not applicable when source and target label spaces differ",
    "epsilon": "logit gaps are measured after removing each row mean; log-mapped probabilities "
               "stand in for logits when label spaces differ",
}


def select_path(zero_shot_acc: float, primed_local_acc: float, tau: float) -> str:
    """``local`` iff the primed local model reaches the zero-shot accuracy minus ``tau``."""
    return "local" if primed_local_acc >= zero_shot_acc - tau else "api"


# ---------------------------------------------------------------------------
# Benchmark construction
# ---------------------------------------------------------------------------

@dataclass
class ModelPair:
    service: object
    encoder: object
    service_train_acc: float
    encoder_train_acc: float


@dataclass
class TargetData:
    train: SyntheticTask
    test: SyntheticTask
    extra: np.ndarray | None = None


_MODEL_CACHE: dict[str, ModelPair] = {}


def _dims(cfg):
    t = cfg.task
    return (t.image_size, t.image_size, t.channels), (t.canvas_size, t.canvas_size, t.channels)


def source_task(cfg: ExperimentConfig, per_class: int, seed: int) -> SyntheticTask:
    t = cfg.task
    _, (h, w, c) = _dims(cfg)
    return generate_task("source", t.source_classes, per_class, h, w, c, seed=seed,
                         sigma=t.sigma, phase_jitter=t.phase_jitter,
                         aperture=None if t.aperture is None else tuple(t.aperture),
                         source_classes=t.source_classes)


def build_models(cfg: ExperimentConfig) -> ModelPair:
    """Train (or fetch from the in-process cache) the service and the local encoder."""
    ms = cfg.model_seed
    key = json.dumps([cfg.task.model_dump(mode="json"), cfg.models.model_dump(mode="json"), ms],
                     sort_keys=True)
    if key in _MODEL_CACHE:
        return _MODEL_CACHE[key]
    _, canvas = _dims(cfg)
    k = cfg.task.source_classes
    tc = TrainConfig(cfg.models.epochs, cfg.models.lr, cfg.models.batch_size)
    src = source_task(cfg, cfg.task.source_per_class, ms)
    svc, svc_acc = train_classifier(src.images, src.labels,
                                    Arch(canvas, tuple(cfg.models.service_hidden), k), tc, ms)
    enc_src = source_task(cfg, cfg.task.encoder_per_class, ms + 77)
    enc, enc_acc = train_classifier(enc_src.images, enc_src.labels,
                                    Arch(canvas, tuple(cfg.models.encoder_hidden), k), tc,
                                    ms + 1000)
    pair = ModelPair(svc, enc, svc_acc, enc_acc)
    _MODEL_CACHE[key] = pair
    return pair


def build_target(cfg: ExperimentConfig) -> TargetData:
    t = cfg.task
    (h, w, c), _ = _dims(cfg)
    common = dict(angle=t.angle, sigma=t.sigma, shared_labels=t.shared_labels,
                  phase_jitter=t.phase_jitter, source_classes=t.source_classes,
                  brightness=t.brightness, contrast=t.contrast)
    task = generate_task("target", t.target_classes, t.shots + t.test_per_class, h, w, c,
                         seed=cfg.seed + 1, **common)
    train, test = few_shot_split(task, t.shots, cfg.seed)
    extra = None
    if t.extra_unlabeled_per_class > 0:
        extra = generate_task("target", t.target_classes, t.extra_unlabeled_per_class, h, w, c,
                              seed=cfg.seed + 2, **common).images
    return TargetData(train, test, extra)


def make_api(cfg: ExperimentConfig, service) -> ServiceApi:
    a = cfg.api
    mode = OutputMode(a.output_mode, a.k)
    rob = Robustness(a.robustness, a.levels if a.robustness == "quantize" else None)
    return ServiceApi(service, price_per_call=a.price_per_call, output_mode=mode,
                      robustness=rob, debug_logits_enabled=a.debug_logits)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    method: str
    accuracy: float | None
    train_calls: int
    infer_calls: int
    debug_calls: int
    price_per_call: float
    cost: float
    seeds: dict
    config: dict
    selection: dict | None = None
    curves: dict = field(default_factory=dict)
    bound: dict | None = None
    faithfulness: dict | None = None
    diagnostics: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except LabError as exc:
        raise StageError(name, exc) from exc


def _gate(cond, message):
    if not cond:
        raise GateError(message)


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------

class Pipeline:
    def __init__(self, cfg: ExperimentConfig, soft_label_cache=None):
        self.cfg = cfg
        self.models = _stage("models", build_models, cfg)
        self.data = _stage("data", build_target, cfg)
        self.api = make_api(cfg, self.models.service)
        self.image_dims, self.canvas_dims = _dims(cfg)
        self.k_src = cfg.task.source_classes
        self.k_tgt = cfg.task.target_classes
        self.cache = soft_label_cache
        self.curves: dict = {}
        self.diag: dict = {}
        self.notes: list = []
        self.selection = None
        self.bound = None
        self.faith = None
        self.zoo_result = None
        self.labels_cached = False

    def prompt(self, kind=None):
        return make_prompt(kind or self.cfg.vr.prompt, self.image_dims, self.canvas_dims)

    @property
    def map_kind(self):
        return "identity" if self.cfg.task.shared_labels else self.cfg.vr.label_map

    def vr_config(self):
        v = self.cfg.vr
        return VrConfig(v.lr, v.epochs, v.batch_size, v.refresh, v.prompt, self.cfg.seed,
                        v.blm_alpha)

    def priming_config(self):
        p = self.cfg.priming
        return PrimingConfig(p.loss, p.lr, p.epochs, p.batch_size, self.cfg.seed)

    # -- shared pieces --------------------------------------------------
    def priming_images(self):
        x = self.data.train.images
        if self.data.extra is not None:
            x = np.concatenate([x, self.data.extra])
        return x

    def collect(self) -> SoftLabelSet:
        base = self.prompt("padding")
        had_cache = self.cache is not None and os.path.exists(self.cache)
        before = self.api.meter.train
        soft = _stage("collect", collect_soft_labels, self.api,
                      base.apply(self.priming_images()), self.cache)
        self.labels_cached = had_cache and self.api.meter.train == before
        if self.labels_cached:
            self.diag["soft_labels_from_cache"] = True
        return soft

    def primed_local(self, images, soft: SoftLabelSet):
        local = LocalModel(self.models.encoder, self.k_src)
        res = _stage("prime", prime, local, self.prompt("padding").apply(images), soft,
                     self.priming_config())
        return local, res

    def reprogram(self, local, x, y):
        return _stage("reprogram", train_prompt_foo, local, x, y, self.k_tgt, self.map_kind,
                      self.prompt(), self.vr_config())

    def local_zero_prompt(self, local):
        base = self.prompt("padding")
        train = self.data.train
        m = fit_label_map(self.map_kind, nm.softmax(local.logits(base.apply(train.images))),
                          train.labels, self.k_tgt, self.cfg.vr.blm_alpha)
        return accuracy(infer(local, base, m, self.data.test.images), self.data.test.labels)

    # -- methods ----------------------------------------------------------
    def ares(self):
        train, test = self.data.train, self.data.test
        soft = self.collect()
        local, pres = self.primed_local(self.priming_images(), soft)
        self.curves["priming"] = pres.loss_curve
        self.diag["primed_zero_prompt_accuracy"] = self.local_zero_prompt(local)
        self.diag["local_zero_prompt_accuracy"] = self.local_zero_prompt(
            LocalModel(self.models.encoder))
        vr = self.reprogram(local, train.images, train.labels)
        self.curves["vr"] = vr.loss_curve
        acc = accuracy(infer(local, vr.prompt, vr.label_map, test.images), test.labels)
        self.diag["train_accuracy"] = accuracy(
            infer(local, vr.prompt, vr.label_map, train.images), train.labels)
        n_prime = 0 if self.labels_cached else len(self.priming_images())
        _gate(self.api.meter.train == n_prime,
              f"ares made {self.api.meter.train} train calls, expected {n_prime}")
        _gate(self.api.meter.infer == 0, "ares made inference API calls")
        if self.cfg.theory:
            self.theory(local, vr)
        return acc

    def theory(self, local, vr):
        test = self.data.test
        base = self.prompt("padding")
        m = vr.label_map
        pre = compute_risks(local, self.api, test.images, test.labels, base, None, m)
        post = compute_risks(local, self.api, test.images, test.labels, vr.prompt, vr.prompt, m)
        faith = measure_epsilon(local, self.api, test.images, base, (vr.prompt, vr.prompt), m)
        report = verify_bound(pre, post, self.cfg.seed, faith)
        unprimed = LocalModel(self.models.encoder)
        if unprimed.head_width == self.k_src:
            self.diag["epsilon_unprimed"] = measure_epsilon(
                unprimed, self.api, test.images, base, None, m).epsilon_pre
        self.bound = report.to_dict()
        self.faith = faith.to_dict()
        self.notes.append(NOTES["epsilon"])

    def ares_ms(self):
        train, test = self.data.train, self.data.test
        soft = self.collect()
        n = len(train)
        rng = nm.rng_from_seed(self.cfg.seed)
        order = rng.permutation(n)
        n_hold = max(1, int(round(self.cfg.select_holdout * n)))
        hold, fit = np.sort(order[:n_hold]), np.sort(order[n_hold:])
        probs = soft.probs[:n]
        zs_map = fit_label_map(self.map_kind, probs[fit], train.labels[fit], self.k_tgt,
                               self.cfg.vr.blm_alpha)
        zs_acc = accuracy(np.argmax(map_output(zs_map, probs[hold]), axis=1), train.labels[hold])
        fit_soft = SoftLabelSet(probs[fit], [soft.provenance[i] for i in fit])
        local, _ = self.primed_local(train.images[fit], fit_soft)
        vr = self.reprogram(local, train.images[fit], train.labels[fit])
        pl_acc = accuracy(infer(local, vr.prompt, vr.label_map, train.images[hold]),
                          train.labels[hold])
        decision = select_path(zs_acc, pl_acc, self.cfg.tau)
        self.selection = {"decision": decision, "zero_shot_accuracy": zs_acc,
                          "primed_local_accuracy": pl_acc, "tau": self.cfg.tau,
                          "holdout_size": int(n_hold)}
        self.notes.append(NOTES["ares_ms"])
        if decision == "local":
            local, pres = self.primed_local(self.priming_images(), soft)
            self.curves["priming"] = pres.loss_curve
            vr = self.reprogram(local, train.images, train.labels)
            self.curves["vr"] = vr.loss_curve
            acc = accuracy(infer(local, vr.prompt, vr.label_map, test.images), test.labels)
            _gate(self.api.meter.infer == 0, "local selection made inference API calls")
            return acc
        m = fit_label_map(self.map_kind, probs, train.labels, self.k_tgt, self.cfg.vr.blm_alpha)
        pred = _stage("infer", infer_api, self.api, self.prompt("padding"), m, test.images)
        _gate(self.api.meter.infer == len(test), "api selection infer calls mismatch")
        return accuracy(pred, test.labels)

    def zoo(self, estimator):
        z = self.cfg.zoo
        train, test = self.data.train, self.data.test
        zc = ZooConfig(estimator, z.q, z.mu, z.c0, z.a0, z.a_offset_frac, z.beta, z.steps,
                       z.batch_size, self.cfg.seed, z.loss, z.gamma, self.cfg.vr.refresh,
                       z.max_calls)
        kind = z.prompt or ("watermark" if estimator == "rgf" else "padding")
        res = _stage("zoo", train_prompt_zoo, self.api, train.images, train.labels, self.k_tgt,
                     self.map_kind, self.prompt(kind), zc, self.cfg.vr.blm_alpha)
        t = res.trace
        self.curves["zoo"] = {"step": t.steps, "loss": t.loss, "grad_norm": t.grad_norm,
                              "cumulative_calls": t.cumulative_calls}
        _gate(self.api.meter.train == expected_calls(zc),
              f"zoo made {self.api.meter.train} train calls, expected {expected_calls(zc)}")
        self.zoo_result = res
        self.diag["prompt_max_abs"] = float(np.max(np.abs(res.prompt.get_flat())))
        if z.report_init:
            pred0 = _stage("infer", infer_api, self.api, self.prompt(kind), res.label_map,
                           test.images)
            self.diag["init_accuracy"] = accuracy(pred0, test.labels)
        pred = _stage("infer", infer_api, self.api, res.prompt, res.label_map, test.images)
        return accuracy(pred, test.labels)

    def local_vr(self):
        train, test = self.data.train, self.data.test
        local = LocalModel(self.models.encoder)
        self.diag["local_zero_prompt_accuracy"] = self.local_zero_prompt(local)
        vr = self.reprogram(local, train.images, train.labels)
        self.curves["vr"] = vr.loss_curve
        return accuracy(infer(local, vr.prompt, vr.label_map, test.images), test.labels)

    def _probe(self):
        train = self.data.train
        local = LocalModel(self.models.encoder)
        curve = _stage("probe", linear_probe, local,
                       self.prompt("padding").apply(train.images), train.labels, self.k_tgt,
                       self.priming_config())
        self.curves["probe"] = curve
        return local

    def local_lp(self):
        local = self._probe()
        test = self.data.test
        pred = infer(local, self.prompt("padding"), identity_map(self.k_tgt), test.images)
        return accuracy(pred, test.labels)

    def local_vr_lp(self):
        local = self._probe()
        train, test = self.data.train, self.data.test
        vr = _stage("reprogram", train_prompt_foo, local, train.images, train.labels,
                    self.k_tgt, "identity", self.prompt(), self.vr_config())
        self.curves["vr"] = vr.loss_curve
        return accuracy(infer(local, vr.prompt, vr.label_map, test.images), test.labels)

    def zero_shot(self):
        if not self.cfg.task.shared_labels:
            self.notes.append(NOTES["zero_shot_na"])
            return None
        test = self.data.test
        pred = _stage("infer", infer_api, self.api, self.prompt("padding"),
                      identity_map(self.k_tgt), test.images)
        _gate(self.api.meter.infer == len(test) and self.api.meter.train == 0,
              "zero-shot call accounting mismatch")
        return accuracy(pred, test.labels)


def run_experiment(cfg: ExperimentConfig, soft_label_cache=None) -> ExperimentReport:
    """Run ``cfg.method`` end to end and return its metered report."""
    run = Pipeline(cfg, soft_label_cache)
    method = cfg.method
    if method in ("zoo_rgf", "zoo_spsa"):
        acc = run.zoo("rgf" if method == "zoo_rgf" else "spsa_gc")
    else:
        acc = getattr(run, method)()
    if run.map_kind == "blm" and method not in ("local_lp", "local_vr_lp", "zero_shot"):
        run.notes.append(NOTES["blm"])
    meter = run.api.meter
    price = run.api.price_per_call
    calls = meter.train + meter.infer
    run.diag["service_train_accuracy"] = run.models.service_train_acc
    run.diag["encoder_train_accuracy"] = run.models.encoder_train_acc
    return ExperimentReport(
        method=method, accuracy=acc, train_calls=meter.train, infer_calls=meter.infer,
        debug_calls=meter.debug, price_per_call=price, cost=calls * price,
        seeds={"run": cfg.seed, "model": cfg.model_seed},
        config=cfg.model_dump(mode="json"), selection=run.selection, curves=run.curves,
        bound=run.bound, faithfulness=run.faith, diagnostics=run.diag,
        notes=sorted(set(run.notes)))


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

SUITE_COLUMNS = ["method", "n_seeds", "n_failed", "accuracy_mean", "accuracy_std",
                 "train_calls_mean", "infer_calls_mean", "cost_mean", "status"]


def compare_suite(configs, seeds) -> list[dict]:
    """Mean/std accuracy and accounting per config over ``seeds``; failures become rows."""
    rows = []
    for cfg in configs:
        reports, failed = [], []
        for s in seeds:
            try:
                reports.append(run_experiment(cfg.with_(seed=int(s))))
            except LabError as exc:
                failed.append(f"seed {s}: {exc}")
        accs = [r.accuracy for r in reports if r.accuracy is not None]
        row = {"method": cfg.method, "n_seeds": len(seeds), "n_failed": len(failed)}
        if reports:
            row.update(
                accuracy_mean=float(np.mean(accs)) if accs else None,
                accuracy_std=float(np.std(accs)) if accs else None,
                train_calls_mean=float(np.mean([r.train_calls for r in reports])),
                infer_calls_mean=float(np.mean([r.infer_calls for r in reports])),
                cost_mean=float(np.mean([r.cost for r in reports])))
        else:
            row.update(accuracy_mean=None, accuracy_std=None, train_calls_mean=None,
                       infer_calls_mean=None, cost_mean=None)
        row["status"] = "ok" if not failed else "failed: " + "; ".join(failed)
        rows.append(row)
    return rows


def suite_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUITE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row.get(k) is None else
                        repr(row[k]) if isinstance(row[k], float) else row[k])
                    for k in SUITE_COLUMNS})
    return buf.getvalue()
