"""Command line entry point: ``bbreprog <subcommand> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from ..errors import ConfigError, GateError, LabError, StageError
from ..models import LocalModel
from ..numeric import rng_from_seed
from ..reprogram import accuracy, infer, save_artifact
from ..theory import verify_lipschitz
from .config import ExperimentConfig, load_config
from .data import save_dataset
from .experiment import (Pipeline, build_models, build_target, compare_suite, run_experiment,
                         source_task, suite_csv)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GATE = 0, 2, 3, 4
LIPSCHITZ_SAMPLES = 100_000

log = logging.getLogger("bbreprog")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _emit(args, payload: dict, name: str) -> None:
    os.makedirs(args.out, exist_ok=True)
    if args.format == "csv":
        flat = {k: v for k, v in payload.items() if not isinstance(v, (dict, list))}
        text = ",".join(flat) + "\n" + ",".join(
            repr(v) if isinstance(v, float) else str(v) for v in flat.values()) + "\n"
        path = os.path.join(args.out, name + ".csv")
    else:
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        path = os.path.join(args.out, name + ".json")
    with open(path, "w") as fh:
        fh.write(text)
    sys.stdout.write(text)


def cmd_gen_data(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    ms = cfg.model_seed
    data = build_target(cfg)
    files = {
        "source.bbds": source_task(cfg, cfg.task.source_per_class, ms),
        "encoder_source.bbds": source_task(cfg, cfg.task.encoder_per_class, ms + 77),
        "target_train.bbds": data.train,
        "target_test.bbds": data.test,
    }
    for name, task in files.items():
        save_dataset(os.path.join(args.out, name), task)
    _emit(args, {name: len(task) for name, task in files.items()}, "gen_data")
    return EXIT_OK


def cmd_train_models(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    pair = build_models(cfg)
    pair.service.save(os.path.join(args.out, "service.bbal"))
    pair.encoder.save(os.path.join(args.out, "encoder.bbal"))
    _emit(args, {"service_train_accuracy": pair.service_train_acc,
                 "encoder_train_accuracy": pair.encoder_train_acc}, "train_models")
    return EXIT_OK


def _primed(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    run = Pipeline(cfg, os.path.join(args.out, "soft_labels.jsonl"))
    soft = run.collect()
    local, res = run.primed_local(run.priming_images(), soft)
    local.save(os.path.join(args.out, "local_primed.bbal"))
    return run, local, res


def cmd_prime(args, cfg):
    run, _, res = _primed(args, cfg)
    _emit(args, {"train_calls": run.api.meter.train, "infer_calls": run.api.meter.infer,
                 "initial_loss": res.loss_curve[0], "final_loss": res.loss_curve[-1],
                 "encoder_checksum": res.encoder_checksum}, "prime")
    return EXIT_OK


def cmd_reprogram(args, cfg):
    path = os.path.join(args.out, "local_primed.bbal")
    if os.path.exists(path):
        run = Pipeline(cfg)
        local = LocalModel.load(path)
    else:
        run, local, _ = _primed(args, cfg)
    train, test = run.data.train, run.data.test
    vr = run.reprogram(local, train.images, train.labels)
    save_artifact(os.path.join(args.out, "prompt.bbal"), vr.prompt, vr.label_map)
    acc = accuracy(infer(local, vr.prompt, vr.label_map, test.images), test.labels)
    _emit(args, {"accuracy": acc, "initial_loss": vr.loss_curve[0] if vr.loss_curve else None,
                 "final_loss": vr.loss_curve[-1] if vr.loss_curve else None,
                 "infer_calls": run.api.meter.infer}, "reprogram")
    return EXIT_OK


def cmd_zoo(args, cfg):
    if cfg.method not in ("zoo_rgf", "zoo_spsa"):
        cfg = cfg.with_(method="zoo_spsa")
    os.makedirs(args.out, exist_ok=True)
    run = Pipeline(cfg)
    acc = run.zoo("rgf" if cfg.method == "zoo_rgf" else "spsa_gc")
    res = run.zoo_result
    res.trace.to_csv(os.path.join(args.out, "zoo_trace.csv"))
    save_artifact(os.path.join(args.out, "zoo_prompt.bbal"), res.prompt, res.label_map)
    _emit(args, {"method": cfg.method, "accuracy": acc, "train_calls": run.api.meter.train,
                 "infer_calls": run.api.meter.infer, "cost": run.api.cost}, "zoo")
    return EXIT_OK


def cmd_run(args, cfg):
    report = run_experiment(cfg)
    os.makedirs(args.out, exist_ok=True)
    if args.format == "csv":
        _emit(args, report.to_dict(), "report")
    else:
        text = report.to_json()
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(text)
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args, cfg):
    configs = [cfg.with_(method=m) for m in cfg.suite.methods]
    rows = compare_suite(configs, list(cfg.suite.seeds))
    os.makedirs(args.out, exist_ok=True)
    if args.format == "json":
        text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
        name = "compare.json"
    else:
        text = suite_csv(rows)
        name = "compare.csv"
    with open(os.path.join(args.out, name), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify_theory(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    worst = verify_lipschitz(LIPSCHITZ_SAMPLES, rng=rng_from_seed(cfg.seed))
    summary = {"lipschitz_max_ratio": worst, "lipschitz_ok": worst <= 1.0 + 1e-9, "runs": []}
    ok = summary["lipschitz_ok"]
    base = cfg.with_(method="ares", theory=True, api__debug_logits=True)
    for s in cfg.suite.seeds:
        report = run_experiment(base.with_(seed=int(s)))
        b = report.bound
        with open(os.path.join(args.out, f"bound_seed{s}.json"), "w") as fh:
            fh.write(json.dumps(b, indent=2, sort_keys=True) + "\n")
        run_ok = (b["left_holds_pre"] and b["left_holds_post"]
                  and "violated" not in (b["right_status_pre"], b["right_status_post"]))
        ok = ok and run_ok
        summary["runs"].append({"seed": int(s), "ok": run_ok,
                                "right_status_pre": b["right_status_pre"],
                                "right_status_post": b["right_status_post"]})
    summary["ok"] = ok
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    with open(os.path.join(args.out, "theory.json"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_GATE


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the source, encoder and target datasets (BBDS)"),
    "train-models": (cmd_train_models, "train the service and the local encoder"),
    "prime": (cmd_prime, "collect soft labels once and fit the local head"),
    "reprogram": (cmd_reprogram, "train the prompt on the primed local model"),
    "zoo": (cmd_zoo, "train a prompt through the service with RGF or SPSA-GC"),
    "run": (cmd_run, "run one method end to end and write report.json"),
    "compare": (cmd_compare, "run suite.methods over suite.seeds and write a table"),
    "verify-theory": (cmd_verify_theory, "Lipschitz check plus risk-bound reports"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbreprog",
                                     description="Closed-box reprogramming experiment lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = _config(args)
        return handler(args, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        if isinstance(exc.cause, ConfigError):
            log.error("config error: %s", exc)
            return EXIT_CONFIG
        log.error("runtime error: %s", exc)
        return EXIT_RUNTIME
    except GateError as exc:
        log.error("gate failure: %s", exc)
        return EXIT_GATE
    except (LabError, OSError, ValueError) as exc:
        log.error("runtime error: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
