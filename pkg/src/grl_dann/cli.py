"""Command-line entry point: synth, train, eval, project, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck
from .data import (
    DOMAINS, SynthConfig, load_manifest, split_source, split_target, synth_domain_pair,
    write_manifest,
)
from .errors import ConfigError, DannError, DataError, NumericError
from .evaluation import (
    evaluate, export_report, extract_penultimate, heldout_domain_loss, neighbor_mixing,
    overall_accuracy, per_class_accuracy, tsne_project,
)
from .model import TrainConfig, build_network, fit, read_checkpoint, write_checkpoint
from .optim import ScheduleConfig
from .tensor_core import make_rng

MANIFESTS = {
    ("source", "train"): "source_train.csv",
    ("source", "test"): "source_test.csv",
    ("target", "train"): "target_train.csv",
    ("target", "test"): "target_test.csv",
}
CHECKPOINT_NAME = "model.ckpt"
RECORD_NAME = "run.jsonl"
CONFIG_NAME = "config.json"


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 64
    lr_mode: str = "inverse_decay"
    mu0: float = 0.0005
    alpha: float = 10.0
    beta: float = 0.75
    momentum: float = 0.45
    lambda_mode: str = "scheduled"
    lambda_value: float = 1.0
    data: str = "data"
    out: str = "run"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be a positive even number")

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def train_config(self) -> TrainConfig:
        schedule = ScheduleConfig(mu0=self.mu0, alpha=self.alpha, beta=self.beta,
                                  lr_mode=self.lr_mode)
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                           momentum=self.momentum, lambda_mode=self.lambda_mode,
                           lambda_value=self.lambda_value, schedule=schedule)


def parse_lambda(text: str) -> tuple[str, float]:
    """``scheduled``, ``zero`` or ``fixed:<v>``."""
    if text in ("scheduled", "zero"):
        return text, 1.0
    if text.startswith("fixed:"):
        try:
            return "fixed", float(text[len("fixed:"):])
        except ValueError:
            pass
    raise ConfigError(f"bad --lambda value {text!r}; use scheduled, zero or fixed:<v>")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        values = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: config must be a flat JSON object")
    return values


def resolve_run_config(args) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values = _load_config_file(args.config)
    for key in ("seed", "epochs", "batch_size", "lr_mode", "mu0", "alpha", "beta",
                "momentum", "data", "out"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "lam", None) is not None:
        values["lambda_mode"], values["lambda_value"] = parse_lambda(args.lam)
    return RunConfig.from_mapping(values)


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _load_split(data_dir, domain: str, part: str, hide: bool = False):
    return load_manifest(Path(data_dir) / MANIFESTS[(domain, part)], hide_target_labels=hide)


def _cm_record(cm) -> dict:
    return {"counts": cm.counts.tolist(), "per_class_accuracy": per_class_accuracy(cm),
            "overall_accuracy": overall_accuracy(cm)}


# --- commands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    _prepare_out(out, args.force)
    values = _load_config_file(args.config).get("synth", {})
    for key in ("per_class", "target_per_class", "shift"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    cfg = SynthConfig(**values)
    seed = 0 if args.seed is None else args.seed
    source, target = synth_domain_pair(cfg, seed)
    parts = {"source": split_source(source, seed), "target": split_target(target, seed)}
    counts = {}
    for domain, (train, test) in parts.items():
        for part, ds in (("train", train), ("test", test)):
            write_manifest(ds, out / MANIFESTS[(domain, part)], prefix=f"{domain}_{part}_")
            counts[f"{domain}_{part}"] = len(ds)
    meta = {"seed": seed, "synth": dataclasses.asdict(cfg), "counts": counts}
    (out / "synth.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(json.dumps(counts))
    return 0


def cmd_train(args) -> int:
    rc = resolve_run_config(args)
    out = Path(rc.out)
    _prepare_out(out, args.force)
    config = rc.train_config()
    source_train = _load_split(rc.data, "source", "train")
    target_train = _load_split(rc.data, "target", "train", hide=True).unlabeled()
    source_test = _load_split(rc.data, "source", "test")
    target_test = _load_split(rc.data, "target", "test")

    (out / CONFIG_NAME).write_text(json.dumps(dataclasses.asdict(rc), indent=2) + "\n")
    started = time.perf_counter()
    net = build_network(make_rng(rc.seed))
    with open(out / RECORD_NAME, "w") as record:
        record.write(json.dumps({"kind": "config", **dataclasses.asdict(rc)}) + "\n")

        def log_step(t, report):
            record.write(json.dumps({"kind": "step", "t": t, **dataclasses.asdict(report)}) + "\n")
            if not args.quiet and t % 25 == 0:
                print(f"step {t}: L_y={report.label_loss:.4f} L_d={report.domain_loss:.4f} "
                      f"lambda={report.lam:.4f} mu={report.learning_rate:.3g}", file=sys.stderr)

        fit(net, source_train, target_train, config, callback=log_step)
        # the output location is left out so identical runs give identical bytes
        run_meta = {k: v for k, v in dataclasses.asdict(rc).items() if k != "out"}
        write_checkpoint(out / CHECKPOINT_NAME, net, {"run": run_meta})
        result = {
            "kind": "result",
            "source_test": _cm_record(evaluate(net, source_test)),
            "target_test": _cm_record(evaluate(net, target_test)),
            "heldout_domain_loss": heldout_domain_loss(net, source_test, target_test,
                                                       rc.batch_size),
            "wall_clock_s": time.perf_counter() - started,
        }
        record.write(json.dumps(result) + "\n")
    print(json.dumps({k: result[k]["overall_accuracy"] for k in ("source_test", "target_test")}))
    return 0


def cmd_eval(args) -> int:
    net = read_checkpoint(args.checkpoint)
    out = Path(args.out)
    summary = {}
    for domain in DOMAINS:
        cm = evaluate(net, _load_split(args.data, domain, "test"))
        export_report(cm, None, out, prefix=domain)
        summary[domain] = overall_accuracy(cm)
    print(json.dumps(summary))
    return 0


def _capped(ds, cap: int, rng):
    if len(ds) <= cap:
        return ds
    return ds.subset(np.sort(rng.choice(len(ds), size=cap, replace=False)))


def cmd_project(args) -> int:
    net = read_checkpoint(args.checkpoint)
    seed = 0 if args.seed is None else args.seed
    rng = make_rng(seed)
    sets = [_capped(_load_split(args.data, d, args.split), args.max_per_domain, rng)
            for d in DOMAINS]
    images = np.concatenate([s.images() for s in sets])
    domains = [s.domain for ds in sets for s in ds]
    labels = [s.label for ds in sets for s in ds]
    features = extract_penultimate(net, images)
    points = tsne_project(features, args.perplexity, seed, domains, labels)
    out = Path(args.out)
    export_report(None, points, out, prefix="projection")
    mixing = neighbor_mixing(np.array([[p.x, p.y] for p in points]), domains)
    meta = {"points": len(points), "neighbor_mixing": mixing, "seed": seed,
            "perplexity": args.perplexity}
    (out / "projection_summary.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(json.dumps(meta))
    return 0


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    seeds = range(args.seeds)
    if args.inject_fault:
        with gradcheck.injected_fault(args.inject_fault):
            results = gradcheck.run_gradcheck(seeds)
    else:
        results = gradcheck.run_gradcheck(seeds)
    failed = sorted({r.name for r in results if not r.passed})
    for name, worst in gradcheck.worst_by_check(results).items():
        status = "FAIL" if name in failed else "ok"
        print(f"{status:4} {name:18} worst relative error {worst:.3e}")
    print(f"{len(results)} checks in {time.perf_counter() - started:.1f}s")
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return 0


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grl-dann", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, out_required=True):
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="flat JSON file; flags override its values")
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("synth", help="generate the synthetic two-domain benchmark")
    shared(p)
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--target-per-class", type=int, dest="target_per_class")
    p.add_argument("--shift", type=float)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network and write a checkpoint and run record")
    shared(p, out_required=False)
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr-mode", choices=["inverse_decay", "cosine"], dest="lr_mode")
    p.add_argument("--mu0", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--lambda", dest="lam", metavar="scheduled|zero|fixed:V")
    p.add_argument("--force", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confusion matrices on both test sets")
    shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("project", help="t-SNE of penultimate features")
    shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--max-per-domain", type=int, default=500, dest="max_per_domain")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--inject-fault", choices=["conv_sign"], dest="inject_fault")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def thread_count() -> int:
    raw = os.environ.get("GRL_DANN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GRL_DANN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("GRL_DANN_THREADS must be >= 1")
    return n


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=thread_count()):
            return args.func(args)
    except DannError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
