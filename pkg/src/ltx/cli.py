"""Command-line entry point: ``ltx <command> [flags] [--config FILE]``.

Every option can also come from a flat ``key = value`` config file (keys are
the flag names with dashes as underscores); flags override the file. Each run
writes its fully resolved config next to its main output as ``<out>.cfg``,
which replays the run when passed back through ``--config``.

Exit codes: 0 success, 1 runtime or IO failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .core import LossWeights, TargetSpec
from .data import (FormatError, gen_synthetic, read_checkpoint, read_dataset, write_checkpoint,
                   write_dataset, write_map_csv, write_pgm, ensure_parent)
from .metrics import DEFAULT_FRACTIONS, METRICS, evaluate_dataset
from .models import Explained, Explainer, ModelSpec, TrainingError, train_explained
from .tensor import ContractError, ShapeError
from .training import FinetuneConfig, PretrainConfig, finetune_batch, format_log, pretrain


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Opt:
    name: str
    kind: Callable[[str], Any]
    default: Any = None
    help: str = ""
    choices: tuple | None = None
    flag: bool = False

    @property
    def key(self) -> str:
        return self.name.replace("-", "_")


_COMMON_TRAIN = (
    Opt("lambda-mask", float, 30.0, "weight of the sparsity term"),
    Opt("lambda-inv", float, 0.0, "weight of the inverse-mask term"),
    Opt("lambda-smooth", float, 0.0, "weight of the smoothness term"),
    Opt("lr", float, 2e-3, "Adam learning rate"),
)

COMMANDS: dict[str, tuple[Opt, ...]] = {
    "gen-data": (
        Opt("out", str, None, "dataset file to write"),
        Opt("n", int, 2000, "number of images"),
        Opt("classes", int, 4, "number of shape classes (1-4)"),
        Opt("size", int, 28, "image side in pixels"),
        Opt("seed", int, 0),
        Opt("two-object", _bool, False, "place a second shape of another class", flag=True),
    ),
    "train-explained": (
        Opt("data", str, None, "training dataset"),
        Opt("model", str, "patchformer", choices=("patchformer", "cnn")),
        Opt("epochs", int, 30),
        Opt("lr", float, 2e-3),
        Opt("batch", int, 32),
        Opt("seed", int, 0),
        Opt("out", str, None, "checkpoint file to write"),
    ),
    "pretrain": (
        Opt("explained", str, None, "explained-model checkpoint"),
        Opt("train", str, None, "training dataset"),
        Opt("val", str, None, "validation dataset used for monitoring"),
        *_COMMON_TRAIN,
        Opt("batch", int, 32),
        Opt("monitor", str, "pos", choices=("pos", "neg")),
        Opt("epochs", int, 20),
        Opt("target", str, "predicted", choices=("predicted", "distribution")),
        Opt("seed", int, 0),
        Opt("out", str, None, "explainer checkpoint to write; metrics.log goes beside it"),
    ),
    "explain": (
        Opt("explained", str, None),
        Opt("explainer", str, None),
        Opt("data", str, None),
        Opt("index", int, 0),
        Opt("target", str, "predicted", "predicted or class:K"),
        Opt("max-steps", int, 25),
        *_COMMON_TRAIN,
        Opt("monitor", str, "pos", choices=("pos", "neg")),
        Opt("out-map", str, None, "map CSV to write"),
        Opt("out-pgm", str, "", "optional PGM rendering"),
    ),
    "evaluate": (
        Opt("explained", str, None),
        Opt("explainer", str, None),
        Opt("data", str, None),
        Opt("metrics", str, "neg,pos,ins,del"),
        Opt("mode", str, "P", choices=("P", "T")),
        Opt("finetune", _bool, False, "finetune a map per image first", flag=True),
        Opt("max-steps", int, 25),
        *_COMMON_TRAIN,
        Opt("fractions", str, ",".join(repr(f) for f in DEFAULT_FRACTIONS)),
        Opt("out", str, None, "report CSV to write"),
    ),
}

SUMMARY = {
    "gen-data": "write a synthetic shape dataset",
    "train-explained": "train the classifier to be explained",
    "pretrain": "train an explainer over a dataset, keeping the best epoch",
    "explain": "finetune a map for one image",
    "evaluate": "score explanation maps with blackout tests",
}

OUTPUT_KEY = {"gen-data": "out", "train-explained": "out", "pretrain": "out", "explain": "out_map",
              "evaluate": "out"}


def read_config(path: str, opts: tuple[Opt, ...]) -> dict[str, Any]:
    known = {o.key: o for o in opts}
    values: dict[str, Any] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _convert(known[key], val)
    return values


def _convert(opt: Opt, text) -> Any:
    try:
        value = opt.kind(text)
    except ValueError as exc:
        raise UsageError(f"--{opt.name}: {exc}") from None
    if opt.choices and value not in opt.choices:
        raise UsageError(f"--{opt.name} must be one of {', '.join(opt.choices)}")
    return value


def config_text(command: str, cfg: dict[str, Any]) -> str:
    lines = [f"# resolved config for `ltx {command}`"]
    for opt in COMMANDS[command]:
        v = cfg[opt.key]
        text = str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{opt.key} = {text}")
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltx", description="Train and evaluate learned explainers.")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = {}
    for name, opts in COMMANDS.items():
        p = parser.commands[name] = sub.add_parser(name, help=SUMMARY[name], description=SUMMARY[name])
        p.add_argument("--config", default=None, help="key = value file; flags take precedence")
        for o in opts:
            if o.flag:
                p.add_argument(f"--{o.name}", dest=o.key, action="store_const", const="true",
                               default=argparse.SUPPRESS, help=o.help)
            else:
                p.add_argument(f"--{o.name}", dest=o.key, default=argparse.SUPPRESS, help=o.help,
                               metavar=o.key.upper() if not o.choices else "{" + ",".join(o.choices) + "}")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    opts = COMMANDS[command]
    cfg = {o.key: o.default for o in opts}
    if args.config:
        try:
            cfg.update(read_config(args.config, opts))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for o in opts:
        if hasattr(args, o.key):
            cfg[o.key] = _convert(o, getattr(args, o.key))
    missing = [f"--{o.name}" for o in opts if cfg[o.key] is None]
    if missing:
        raise UsageError(f"missing required option(s): {' '.join(missing)}")
    return cfg


def _weights(cfg) -> LossWeights:
    try:
        return LossWeights(mask=cfg["lambda_mask"], inv=cfg["lambda_inv"], smooth=cfg["lambda_smooth"])
    except ContractError as exc:
        raise UsageError(str(exc)) from None


def _write_config(command: str, cfg: dict[str, Any]):
    path = cfg[OUTPUT_KEY[command]] + ".cfg"
    ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_text(command, cfg))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg) -> int:
    if not 1 <= cfg["classes"] <= 4:
        raise UsageError("--classes must be between 1 and 4")
    if cfg["n"] < 1 or cfg["size"] < 12:
        raise UsageError("--n must be >= 1 and --size >= 12")
    if cfg["two_object"] and cfg["classes"] < 2:
        raise UsageError("--two-object needs --classes >= 2")
    samples = gen_synthetic(cfg["n"], cfg["classes"], cfg["size"], cfg["seed"], two_object=cfg["two_object"])
    write_dataset(samples, cfg["out"], cfg["classes"])
    print(f"wrote {len(samples)} samples to {cfg['out']}")
    return 0


def cmd_train_explained(cfg) -> int:
    if cfg["epochs"] < 0 or cfg["batch"] < 1 or cfg["lr"] <= 0:
        raise UsageError("--epochs must be >= 0, --batch >= 1 and --lr > 0")
    data = read_dataset(cfg["data"])
    spec = ModelSpec(family=cfg["model"], image_size=data.images.shape[-1], channels=data.images.shape[1],
                     num_classes=data.num_classes)
    ckpt, acc = train_explained(data, spec, epochs=cfg["epochs"], seed=cfg["seed"], lr=cfg["lr"],
                                batch_size=cfg["batch"])
    write_checkpoint(ckpt, cfg["out"])
    print(f"train accuracy: {acc:.4f}")
    print(f"wrote {cfg['out']}")
    return 0


def cmd_pretrain(cfg) -> int:
    if cfg["epochs"] < 0:
        raise UsageError("--epochs must be >= 0")
    explained = read_checkpoint(cfg["explained"])
    train, val = read_dataset(cfg["train"]), read_dataset(cfg["val"])
    target = "predicted_onehot" if cfg["target"] == "predicted" else "distribution"
    try:
        pcfg = PretrainConfig(cfg["lr"], cfg["batch"], cfg["epochs"], _weights(cfg), cfg["monitor"], target,
                              cfg["seed"])
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    result = pretrain(explained, train.images, val.images, pcfg)
    write_checkpoint(result.checkpoint, cfg["out"])
    log_path = os.path.join(os.path.dirname(os.path.abspath(cfg["out"])), "metrics.log")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(format_log(result.log))
    if result.best_epoch is None:
        print("no epochs run; wrote the initial explainer")
    else:
        print(f"best epoch: {result.best_epoch}")
        print(f"best val {cfg['monitor']}: {result.best_value!r}")
    print(f"wrote {cfg['out']} and {log_path}")
    return 0


def parse_target(text: str, num_classes: int) -> TargetSpec:
    if text == "predicted":
        return TargetSpec("predicted_onehot")
    if text.startswith("class:"):
        try:
            k = int(text[len("class:"):])
        except ValueError:
            raise UsageError(f"bad target {text!r}; expected predicted or class:K") from None
        if not 0 <= k < num_classes:
            raise UsageError(f"target class {k} outside [0, {num_classes})")
        return TargetSpec("class", k)
    raise UsageError(f"bad target {text!r}; expected predicted or class:K")


def _finetune_cfg(cfg, monitor: str, target: TargetSpec = TargetSpec()) -> FinetuneConfig:
    if cfg["max_steps"] < 1 or cfg["lr"] < 0:
        raise UsageError("--max-steps must be >= 1 and --lr >= 0")
    return FinetuneConfig(cfg["max_steps"], cfg["lr"], _weights(cfg), monitor, target)


def _models(cfg) -> tuple[Explained, Explainer]:
    explained = Explained.from_checkpoint(read_checkpoint(cfg["explained"]))
    explainer = Explainer.from_checkpoint(read_checkpoint(cfg["explainer"]), trainable=False)
    if explainer.spec.family != explained.spec.family:
        raise FormatError(f"explainer family {explainer.spec.family!r} does not match "
                          f"explained family {explained.spec.family!r}")
    return explained, explainer


def cmd_explain(cfg) -> int:
    explained, explainer = _models(cfg)
    target = parse_target(cfg["target"], explained.spec.num_classes)
    fcfg = _finetune_cfg(cfg, cfg["monitor"], target)
    data = read_dataset(cfg["data"])
    if not 0 <= cfg["index"] < len(data):
        raise UsageError(f"--index {cfg['index']} outside a dataset of {len(data)} images")
    res = finetune_batch(explained, explainer, data.images[cfg["index"]][None], fcfg)[fcfg.monitor][0]
    write_map_csv(res.map, cfg["out_map"])
    if cfg["out_pgm"]:
        write_pgm(res.map, cfg["out_pgm"])
    print(f"pretrained {fcfg.monitor}: {res.pretrained_value!r}")
    print(f"final {fcfg.monitor}: {res.best_value!r} (step {res.best_step})")
    print(f"reverted: {'yes' if res.reverted else 'no'}")
    if res.diverged:
        print("note: finetuning diverged; kept the best map before divergence")
    return 0


def parse_fractions(text: str) -> tuple[float, ...]:
    try:
        fr = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"bad --fractions {text!r}") from None
    if not fr or fr[0] != 0 or any(b <= a for a, b in zip(fr, fr[1:])) or fr[-1] >= 1:
        raise UsageError("--fractions must start at 0, increase strictly and stay below 1")
    return fr


def cmd_evaluate(cfg) -> int:
    names = [m.strip() for m in cfg["metrics"].split(",") if m.strip()]
    bad = [m for m in names if m not in METRICS]
    if bad or not names:
        raise UsageError(f"unknown metric(s) {', '.join(bad) or '(none)'}; choose from {', '.join(METRICS)}")
    fractions = parse_fractions(cfg["fractions"])
    explained, explainer = _models(cfg)
    data = read_dataset(cfg["data"])
    if cfg["finetune"]:
        # maps are finetuned under the monitor sharing the metric's blackout order
        monitor_of = {m: "pos" if METRICS[m][0] == "decreasing" else "neg" for m in names}
        fcfg = _finetune_cfg(cfg, "pos")
        fcfg = FinetuneConfig(fcfg.max_steps, fcfg.learning_rate, fcfg.weights, fcfg.monitor, fcfg.target, fractions)
        tuned = finetune_batch(explained, explainer, data.images, fcfg, tuple(sorted(set(monitor_of.values()))))
        map_sets = {m: np.stack([r.map for r in tuned[monitor_of[m]]]) for m in names}
    else:
        maps = explainer.predict_maps(data.images)
        map_sets = {m: maps for m in names}
    auc: dict[str, float] = {}
    for m in names:
        report = evaluate_dataset(explained, map_sets[m], data.images, m, cfg["mode"], data.labels, fractions)
        auc[m] = report.auc[m]
    report.auc = auc
    ensure_parent(cfg["out"])
    with open(cfg["out"], "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    print(f"{'metric':<8}{'mode':<6}auc")
    for m, v in auc.items():
        print(f"{m:<8}{cfg['mode']:<6}{v:.6f}")
    print(f"wrote {cfg['out']}")
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "train-explained": cmd_train_explained, "pretrain": cmd_pretrain,
            "explain": cmd_explain, "evaluate": cmd_evaluate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args.command, args)
        for key in ("out", "out_map", "out_pgm"):
            if cfg.get(key):
                ensure_parent(cfg[key])
        code = HANDLERS[args.command](cfg)
        _write_config(args.command, cfg)
        return code
    except UsageError as exc:
        parser.commands[args.command].print_usage(sys.stderr)
        print(f"ltx {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, ShapeError) as exc:
        print(f"ltx {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, TrainingError) as exc:
        print(f"ltx {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
