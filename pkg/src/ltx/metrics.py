"""Blackout perturbation tests: NEG, POS, INS and DEL.

A "model" here is any callable mapping a batch of images ``N x C x H x W``
to class probabilities ``N x k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError

Model = Callable[[np.ndarray], np.ndarray]

DEFAULT_FRACTIONS = tuple(i / 10 for i in range(10))

# metric -> (pixel order direction, tracked quantity)
METRICS = {
    "neg": ("increasing", "top_class_unchanged"),
    "pos": ("decreasing", "top_class_unchanged"),
    "ins": ("increasing", "top_class_probability"),
    "del": ("decreasing", "top_class_probability"),
}
HIGHER_IS_BETTER = {"neg": True, "pos": False, "ins": True, "del": False}


@dataclass
class PerturbationCurve:
    fractions: np.ndarray
    values: np.ndarray
    track: str


@dataclass
class MetricReport:
    auc: dict[str, float]
    mode: str
    per_image: dict[str, np.ndarray] = field(default_factory=dict)
    curves: dict[str, list[PerturbationCurve]] = field(default_factory=dict)

    def to_csv(self) -> str:
        rows = ["metric,mode,auc"] + [f"{k},{self.mode},{v!r}" for k, v in self.auc.items()]
        return "\n".join(rows) + "\n"

    def curves_csv(self, metric: str) -> str:
        rows = ["image_index,fraction,value"]
        for i, c in enumerate(self.curves[metric]):
            rows += [f"{i},{f!r},{v!r}" for f, v in zip(c.fractions.tolist(), c.values.tolist())]
        return "\n".join(rows) + "\n"


def pixel_order(m: np.ndarray, direction: str) -> np.ndarray:
    """Flat pixel indices sorted by map value; ties keep ascending row-major index."""
    flat = np.asarray(m, dtype=np.float64).reshape(-1)
    if direction == "increasing":
        return np.argsort(flat, kind="stable")
    if direction == "decreasing":
        return np.argsort(-flat, kind="stable")
    raise ContractError(f"unknown direction {direction!r}")


def blackout_counts(fractions: Sequence[float], num_pixels: int) -> list[int]:
    # rounding guards against 0.7 * 10 = 6.999... style representation error
    return [math.floor(round(f * num_pixels, 9)) for f in fractions]


def _check_fractions(fractions) -> np.ndarray:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.size == 0:
        raise ContractError("empty fraction grid")
    if fr[0] != 0 or np.any(np.diff(fr) <= 0) or fr[-1] >= 1:
        raise ContractError("fractions must start at 0, increase strictly and stay below 1")
    return fr


def perturbed_stack(x: np.ndarray, order: np.ndarray, fractions) -> np.ndarray:
    """One copy of ``x`` per fraction with the leading ``order`` pixels set to 0."""
    c, h, w = x.shape
    stack = np.repeat(x[None], len(fractions), axis=0).reshape(len(fractions), c, h * w)
    for i, n in enumerate(blackout_counts(fractions, h * w)):
        stack[i, :, order[:n]] = 0.0
    return stack.reshape(len(fractions), c, h, w)


def track_values(probs: np.ndarray, track: str, class_index: int) -> np.ndarray:
    if track == "top_class_unchanged":
        return (probs.argmax(axis=-1) == class_index).astype(np.float64)
    if track == "top_class_probability":
        return probs[..., class_index].astype(np.float64)
    raise ContractError(f"unknown track kind {track!r}")


def perturb_curve(model: Model, x: np.ndarray, order: np.ndarray, fractions=DEFAULT_FRACTIONS,
                  track: str = "top_class_unchanged", class_index: int = 0) -> PerturbationCurve:
    fr = _check_fractions(fractions)
    probs = model(perturbed_stack(np.asarray(x, dtype=np.float64), order, fr))
    return PerturbationCurve(fr, track_values(probs, track, class_index), track)


def auc(curve: PerturbationCurve) -> float:
    """Trapezoidal area divided by the span of the fraction axis."""
    f, v = np.asarray(curve.fractions), np.asarray(curve.values)
    if len(f) < 2:
        raise ContractError("AUC needs at least two points")
    area = float(np.sum((f[1:] - f[:-1]) * (v[1:] + v[:-1]) / 2.0))
    return area / float(f[-1] - f[0])


def reference_classes(model: Model, images: np.ndarray, mode: str, labels=None) -> np.ndarray:
    if mode == "P":
        return model(images).argmax(axis=-1)
    if mode == "T":
        if labels is None:
            raise ContractError("T mode needs ground-truth labels")
        return np.asarray(labels, dtype=np.int64)
    raise ContractError(f"unknown mode {mode!r}")


def curve_probs(model: Model, images: np.ndarray, maps: np.ndarray, direction: str,
                fractions=DEFAULT_FRACTIONS, base_probs: np.ndarray | None = None,
                chunk: int = 4096) -> np.ndarray:
    """Model probabilities for every (image, fraction) blackout, ``N x F x k``.

    Fractions that black out no pixel reuse ``base_probs``, the prediction on
    the untouched images (computed here when not given).
    """
    fr = _check_fractions(fractions)
    if base_probs is None:
        base_probs = model(images)
    counts = blackout_counts(fr, images.shape[-1] * images.shape[-2])
    todo = [j for j, c in enumerate(counts) if c > 0]
    out = np.repeat(np.asarray(base_probs, dtype=np.float64)[:, None], len(fr), axis=1)
    if not todo:
        return out
    per = max(1, chunk // len(todo))
    for start in range(0, len(images), per):
        stop = min(len(images), start + per)
        stack = np.concatenate([perturbed_stack(images[i], pixel_order(maps[i], direction), fr[todo])
                                for i in range(start, stop)])
        out[start:stop, todo] = model(stack).reshape(stop - start, len(todo), -1)
    return out


def evaluate_dataset(model: Model, maps: np.ndarray, images: np.ndarray,
                     metrics: Sequence[str] | str = ("neg", "pos", "ins", "del"),
                     mode: str = "P", labels=None, fractions=DEFAULT_FRACTIONS,
                     keep_curves: bool = False, classes: np.ndarray | None = None) -> MetricReport:
    """Mean AUC per metric over the dataset.

    ``classes`` overrides the per-image reference class derived from ``mode``.
    """
    if isinstance(metrics, str):
        metrics = [metrics]
    for name in metrics:
        if name not in METRICS:
            raise ContractError(f"unknown metric {name!r}")
    images = np.asarray(images, dtype=np.float64)
    maps = np.asarray(maps, dtype=np.float64)
    if len(maps) != len(images):
        raise ContractError(f"{len(maps)} maps for {len(images)} images")
    if maps.shape[1:] != images.shape[2:]:
        raise ContractError("maps must have pixel resolution")
    fr = _check_fractions(fractions)
    base = model(images)
    if classes is not None:
        ref = np.asarray(classes)
    elif mode == "P":
        ref = base.argmax(axis=-1)
    else:
        ref = reference_classes(model, images, mode, labels)
    probs = {d: curve_probs(model, images, maps, d, fr, base)
             for d in sorted({METRICS[m][0] for m in metrics})}
    report = MetricReport({}, mode)
    for name in metrics:
        d, track = METRICS[name]
        curves = [PerturbationCurve(fr, track_values(probs[d][i], track, int(ref[i])), track)
                  for i in range(len(images))]
        per = np.array([auc(c) for c in curves])
        report.per_image[name] = per
        report.auc[name] = float(per.mean())
        if keep_curves:
            report.curves[name] = curves
    return report
