"""Dataset-level explainer pretraining and per-instance finetuning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .core import LossWeights, TargetSpec, ltx_loss, target_select
from .data import Checkpoint, SplitMix64
from .metrics import (DEFAULT_FRACTIONS, HIGHER_IS_BETTER, METRICS, PerturbationCurve, auc,
                      curve_probs, evaluate_dataset, perturb_curve, pixel_order, track_values)
from .models import Explained, Explainer, TrainingError, init_explainer_from_explained
from .tensor import ContractError


@dataclass
class PretrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 32
    epochs: int = 20
    weights: LossWeights = field(default_factory=LossWeights)
    monitor: str = "pos"
    target_mode: str = "predicted_onehot"
    seed: int = 0
    fractions: tuple = DEFAULT_FRACTIONS

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ContractError("learning_rate must be > 0 and batch_size >= 1")
        if self.monitor not in ("pos", "neg"):
            raise ContractError("monitor must be 'pos' or 'neg'")
        if self.target_mode not in ("predicted_onehot", "distribution"):
            raise ContractError("pretraining targets are 'predicted_onehot' or 'distribution'")


@dataclass
class FinetuneConfig:
    max_steps: int = 25
    learning_rate: float = 2e-3
    weights: LossWeights = field(default_factory=LossWeights)
    monitor: str = "pos"
    target: TargetSpec = field(default_factory=TargetSpec)
    fractions: tuple = DEFAULT_FRACTIONS

    def __post_init__(self):
        if self.max_steps < 1:
            raise ContractError("max_steps must be >= 1")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be >= 0")
        if self.monitor not in ("pos", "neg"):
            raise ContractError("monitor must be 'pos' or 'neg'")


@dataclass
class LogRow:
    index: int
    metric: str
    value: float
    is_best: bool = False
    loss: float = float("nan")
    note: str = ""

    def line(self) -> str:
        return f"{self.index},{self.metric},{self.value!r},{int(self.is_best)}"


def format_log(rows: list[LogRow]) -> str:
    return "".join(["index,metric,value,is_best\n"] + [r.line() + "\n" for r in rows])


def improves(value: float, best: float | None, metric: str) -> bool:
    """Strict improvement; ties keep the earlier candidate."""
    if best is None:
        return True
    return value > best if HIGHER_IS_BETTER[metric] else value < best


# ---------------------------------------------------------------------------
# Monitoring
# ---------------------------------------------------------------------------

def monitor_eval(explainer: Explainer, explained: Explained, images: np.ndarray, metric: str,
                 target_mode: str = "predicted_onehot", labels=None, fractions=DEFAULT_FRACTIONS,
                 maps: np.ndarray | None = None) -> float:
    """Mean ``metric`` AUC of the explainer's maps on ``images``.

    ``predicted_onehot``/``distribution`` reference the model's top class;
    ``class`` references ``labels``.
    """
    if metric not in METRICS:
        raise ContractError(f"unknown metric {metric!r}")
    if maps is None:
        maps = explainer.predict_maps(images)
    mode = "T" if target_mode == "class" else "P"
    return evaluate_dataset(explained, maps, images, metric, mode=mode, labels=labels,
                            fractions=fractions).auc[metric]


def instance_monitor(explained: Explained, x: np.ndarray, m: np.ndarray, metric: str, class_index: int,
                     fractions=DEFAULT_FRACTIONS, chosen_class: bool = False) -> float:
    """Monitored AUC of one map.

    For an explicitly chosen class the curve follows that class's probability
    instead of the top-class indicator.
    """
    direction, track = METRICS[metric]
    if chosen_class:
        track = "top_class_probability"
    curve = perturb_curve(explained, x, pixel_order(m, direction), fractions, track, class_index)
    return auc(curve)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    log: list[LogRow]
    best_epoch: int | None
    best_value: float | None
    last: Checkpoint | None = None  # snapshot after the final epoch


def pretrain(explained_ckpt: Checkpoint, train_images: np.ndarray, val_images: np.ndarray,
             cfg: PretrainConfig = PretrainConfig()) -> PretrainResult:
    """Mini-batch Adam over the explainer and ``z``; keep the best epoch on the monitor.

    Each epoch's candidate is the float32-rounded snapshot (the checkpoint
    that would be written), and the monitor is evaluated on that snapshot.
    """
    if len(train_images) == 0 or len(val_images) == 0:
        raise ContractError("pretraining needs non-empty train and validation sets")
    explained = Explained.from_checkpoint(explained_ckpt)
    family = explained.spec.family
    explainer = init_explainer_from_explained(explained_ckpt, family, seed=cfg.seed)
    base_meta = {"seed": cfg.seed, "monitor": cfg.monitor}
    if cfg.epochs == 0:
        init = explainer.checkpoint(epoch=0, **base_meta)
        return PretrainResult(init, [], None, None, init)
    y_train = target_select(explained(train_images), TargetSpec(cfg.target_mode))
    opt = T.Adam(explainer.parameters(), lr=cfg.learning_rate)
    rng = SplitMix64(cfg.seed ^ 0xE9)
    log: list[LogRow] = []
    best: Checkpoint | None = None
    best_value = best_epoch = None
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_images))
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            out = ltx_loss(train_images[idx], explainer, explained, y_train[idx], cfg.weights)
            if not np.isfinite(out.loss.item()):
                raise TrainingError(f"non-finite LTX loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            T.backward(out.loss)
            opt.step()
        snap = explainer.checkpoint(epoch=epoch, **base_meta).quantized()
        value = monitor_eval(Explainer.from_checkpoint(snap, trainable=False), explained, val_images,
                             cfg.monitor, cfg.target_mode, fractions=cfg.fractions)
        log.append(LogRow(epoch, cfg.monitor, value, loss=out.loss.item()))
        if improves(value, best_value, cfg.monitor):
            snap.meta["monitor_value"] = repr(value)
            best, best_value, best_epoch = snap, value, epoch
    log[best_epoch - 1].is_best = True
    return PretrainResult(best, log, best_epoch, best_value, snap)


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    map: np.ndarray
    log: list[LogRow]
    pretrained_value: float
    best_value: float
    best_step: int
    diverged: bool = False

    @property
    def reverted(self) -> bool:
        return self.best_step == 0


def _instance_scores(explained: Explained, images: np.ndarray, maps: np.ndarray, base: np.ndarray,
                     metric: str, ref: np.ndarray, chosen: np.ndarray, fractions) -> np.ndarray:
    direction, track = METRICS[metric]
    probs = curve_probs(explained, images, maps, direction, fractions, base)
    fr = np.asarray(fractions, dtype=np.float64)
    out = np.empty(len(images))
    for i in range(len(images)):
        kind = "top_class_probability" if chosen[i] else track
        out[i] = auc(PerturbationCurve(fr, track_values(probs[i], kind, int(ref[i])), kind))
    return out


def _attainable(metric: str, v0: float, fractions) -> float:
    """Best AUC any map can reach when the unperturbed value is ``v0``."""
    fr = np.asarray(fractions, dtype=np.float64)
    rest = 1.0 if HIGHER_IS_BETTER[metric] else 0.0
    values = np.full(len(fr), rest)
    values[0] = v0
    return auc(PerturbationCurve(fr, values, ""))


def finetune_batch(explained: Explained, pretrained: Explainer | Checkpoint, images: np.ndarray,
                   cfg: FinetuneConfig = FinetuneConfig(), monitors: tuple[str, ...] | None = None,
                   targets: list[TargetSpec] | None = None, batch: int = 32) -> dict[str, list[FinetuneResult]]:
    """Finetune an independent copy of the pretrained explainer per image.

    Copies are stacked and stepped in lockstep: the per-image losses are
    summed, so each copy receives only its own gradient and its own Adam
    moments, exactly as if it were finetuned alone. One trajectory is scored
    under every metric in ``monitors`` and each keeps its own best map.
    """
    if isinstance(pretrained, Checkpoint):
        pretrained = Explainer.from_checkpoint(pretrained)
    images = np.asarray(images, dtype=np.float64)
    spec = explained.spec
    if images.ndim != 4 or images.shape[1:] != (spec.channels, spec.image_size, spec.image_size):
        raise ContractError(f"image dims {images.shape} do not match the model")
    monitors = tuple(monitors or (cfg.monitor,))
    for name in monitors:
        if name not in METRICS:
            raise ContractError(f"unknown metric {name!r}")
    targets = list(targets) if targets is not None else [cfg.target] * len(images)
    if len(targets) != len(images):
        raise ContractError(f"{len(targets)} targets for {len(images)} images")
    results: dict[str, list[FinetuneResult]] = {name: [] for name in monitors}
    for start in range(0, len(images), batch):
        xs = images[start:start + batch]
        part = _finetune_chunk(explained, pretrained, xs, cfg, monitors, targets[start:start + batch])
        for name in monitors:
            results[name].extend(part[name])
    return results


def _finetune_chunk(explained, pretrained, xs, cfg, monitors, targets):
    n = len(xs)
    probs = explained(xs)
    y = np.stack([target_select(probs[i], t) for i, t in enumerate(targets)])
    top = probs.argmax(axis=-1)
    ref = np.array([t.class_index if t.mode == "class" else top[i] for i, t in enumerate(targets)])
    # a non-top class cannot "stay top", so its probability is tracked instead
    chosen = ref != top
    expl = pretrained.replicate(n)
    opt = T.Adam(expl.parameters(), lr=cfg.learning_rate)
    logs = {name: [[] for _ in range(n)] for name in monitors}
    best_map = {name: [None] * n for name in monitors}
    best_value = {name: [None] * n for name in monitors}
    best_step = {name: [0] * n for name in monitors}
    live = np.ones(n, dtype=bool)
    # once a candidate reaches the attainable optimum nothing later can replace it
    done = {}
    for name in monitors:
        track = METRICS[name][1]
        v0 = [probs[i, ref[i]] if chosen[i] or track == "top_class_probability" else 1.0 for i in range(n)]
        bound = np.array([_attainable(name, v, cfg.fractions) for v in v0])
        done[name] = (bound, np.zeros(n, dtype=bool))
    for step in range(cfg.max_steps + 1):
        if step < cfg.max_steps:
            out = ltx_loss(xs, expl, explained, y, cfg.weights, reduction="none")
            maps, losses = out.m.data, out.loss.data.copy()
        else:
            with T.no_grad():
                maps = expl.pixel_maps(xs).data
            losses = np.full(n, np.nan)
        if step == 0:
            # the step-0 candidate is the pretrained map itself
            maps = pretrained.predict_maps(xs)
        ok = np.all(np.isfinite(maps.reshape(n, -1)), axis=1)
        if step < cfg.max_steps:
            ok &= np.isfinite(losses)
        for i in np.flatnonzero(live & ~ok):
            for name in monitors:
                logs[name][i].append(LogRow(step, name, float("nan"), loss=losses[i], note="diverged"))
        live &= ok
        for name in monitors:
            bound, reached = done[name]
            for i in np.flatnonzero(live & reached):
                logs[name][i].append(LogRow(step, name, float("nan"), loss=losses[i], note="optimum reached"))
            idx = np.flatnonzero(live & ~reached)
            if not len(idx):
                continue
            values = _instance_scores(explained, xs[idx], maps[idx], probs[idx], name,
                                      ref[idx], chosen[idx], cfg.fractions)
            for i, v in zip(idx, values):
                logs[name][i].append(LogRow(step, name, float(v), loss=losses[i]))
                if improves(v, best_value[name][i], name):
                    best_map[name][i] = maps[i].copy()
                    best_value[name][i], best_step[name][i] = float(v), step
                    reached[i] = v == bound[i]
        if step == cfg.max_steps or all(done[name][1][live].all() for name in monitors):
            break
        opt.zero_grad()
        T.backward(T.sum(out.loss))
        opt.step()
    results = {}
    for name in monitors:
        rows = []
        for i in range(n):
            if best_map[name][i] is None:
                raise TrainingError("finetuning diverged before the pretrained map could be scored")
            log = logs[name][i]
            log[best_step[name][i]].is_best = True
            rows.append(FinetuneResult(best_map[name][i], log, log[0].value, best_value[name][i],
                                       best_step[name][i], diverged=bool(log[-1].note == "diverged")))
        results[name] = rows
    return results


def finetune_instance(explained: Explained, pretrained: Explainer | Checkpoint, x: np.ndarray,
                      cfg: FinetuneConfig = FinetuneConfig()) -> FinetuneResult:
    """Refine a fresh copy of the pretrained explainer on one image.

    The map after every update is scored with the monitor; the best one
    (step 0 being the pretrained map) is returned, so the result is never
    worse than the pretrained map on the monitored metric.
    """
    x = np.asarray(x, dtype=np.float64)
    spec = explained.spec
    if x.shape != (spec.channels, spec.image_size, spec.image_size):
        raise ContractError(f"image dims {x.shape} do not match the model")
    return finetune_batch(explained, pretrained, x[None], cfg)[cfg.monitor][0]


def class_specific_explain(explained: Explained, pretrained: Explainer | Checkpoint, x: np.ndarray,
                           class_index: int, cfg: FinetuneConfig = FinetuneConfig()) -> FinetuneResult:
    k = explained.spec.num_classes
    if not 0 <= class_index < k:
        raise ContractError(f"class_index {class_index} outside [0, {k})")
    cfg = FinetuneConfig(cfg.max_steps, cfg.learning_rate, cfg.weights, cfg.monitor,
                         TargetSpec("class", class_index), cfg.fractions)
    return finetune_instance(explained, pretrained, x, cfg)
