"""Masking function, target selection and the LTX objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import Explained, Explainer
from .tensor import ContractError, ShapeError, Tensor

LOG_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    mask: float = 30.0
    inv: float = 0.0
    smooth: float = 0.0
    mask_kind: str = "bce_zero"
    smooth_kind: str = "l1"

    def __post_init__(self):
        if min(self.mask, self.inv, self.smooth) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass(frozen=True)
class TargetSpec:
    mode: str = "predicted_onehot"
    class_index: int | None = None

    def __post_init__(self):
        if self.mode not in ("predicted_onehot", "distribution", "class"):
            raise ContractError(f"unknown target mode {self.mode!r}")
        if self.mode == "class" and self.class_index is None:
            raise ContractError("class mode needs class_index")


def mask_blend(x, m, z) -> Tensor:
    """``x * m + z * (1 - m)`` with ``m`` shared across channels.

    ``x`` is ``(B,) C x H x W``; ``m`` is ``(B,) H x W``; ``z`` a scalar, or
    one scalar per batch instance.
    """
    x, m, z = T.as_tensor(x), T.as_tensor(m), T.as_tensor(z)
    xd, md = x.data, m.data
    if xd.ndim < 3 or md.shape != xd.shape[:-3] + xd.shape[-2:]:
        raise ShapeError(f"map dims {md.shape} do not match image dims {xd.shape}")
    per_inst = z.ndim == 1
    if per_inst and (xd.ndim != 4 or z.dims[0] != xd.shape[0]):
        raise ShapeError(f"per-instance z {z.dims} does not match batch {xd.shape}")
    if not per_inst and z.data.size != 1:
        raise ShapeError("z must be a scalar")
    zd = z.data.reshape(-1, 1, 1, 1) if per_inst else z.data
    mb = np.expand_dims(md, -3)
    out = xd * mb + zd * (1.0 - mb)

    def bw(g):
        gx = g * mb
        gm = (g * (xd - zd)).sum(axis=-3)
        gz = g * (1.0 - mb)
        gz = gz.sum(axis=(1, 2, 3)) if per_inst else np.asarray(gz.sum()).reshape(z.dims)
        return gx, gm, gz

    return T._node(out, (x, m, z), bw, "mask_blend")


def target_select(pred_dist: np.ndarray, spec: TargetSpec) -> np.ndarray:
    """Training target ``y`` for one prediction (or a batch, row-wise)."""
    pred = np.asarray(pred_dist, dtype=np.float64)
    k = pred.shape[-1]
    if spec.mode == "distribution":
        return pred.copy()
    if spec.mode == "predicted_onehot":
        return np.eye(k)[pred.argmax(axis=-1)]
    if not 0 <= spec.class_index < k:
        raise ContractError(f"class_index {spec.class_index} outside [0, {k})")
    return np.broadcast_to(np.eye(k)[spec.class_index], pred.shape).copy()


def _reduce(t: Tensor, reduction: str = "mean") -> Tensor:
    if t.ndim == 0:
        return t
    if reduction == "mean":
        return T.mean(t)
    if reduction == "sum":
        return T.sum(t)
    if reduction == "none":
        return t
    raise ContractError(f"unknown reduction {reduction!r}")


def loss_pred(logits_masked: Tensor, y: np.ndarray, reduction: str = "mean") -> Tensor:
    """Cross-entropy ``-sum y log p`` with ``p`` clamped to ``[eps, 1 - eps]``; batch mean."""
    p = T.clamp(T.softmax_rows(logits_masked), LOG_EPS, 1 - LOG_EPS)
    ce = T.mul(T.sum(T.mul(T.log(p), np.asarray(y, dtype=np.float64)), axis=-1), -1.0)
    return _reduce(ce, reduction)


def loss_mask(m: Tensor, kind: str = "bce_zero", reduction: str = "mean") -> Tensor:
    """Sparsity penalty averaged over map entries: BCE against an all-zero label, or L1.

    For a batch of maps each map is averaged first, then ``reduction`` applies.
    """
    m = T.as_tensor(m)
    if kind == "bce_zero":
        per = T.mul(T.log(T.clamp(T.sub(1.0, m), LOG_EPS, None)), -1.0)
    elif kind == "l1":
        per = T.absolute(m)
    else:
        raise ContractError(f"unknown mask loss {kind!r}")
    if m.ndim <= 2:
        return T.mean(per)
    return _reduce(T.mean(per, axis=(-2, -1)), reduction)


def _is_onehot(y: np.ndarray) -> bool:
    return bool(np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1))


def loss_inv(logits_invmasked: Tensor, y: np.ndarray, reduction: str = "mean") -> Tensor:
    """``-log(1 - p_y)`` on the inversely masked input; ``y`` must be one-hot."""
    y = np.asarray(y, dtype=np.float64)
    if not _is_onehot(y):
        raise ContractError("the inverse-mask loss needs a one-hot target")
    p = T.softmax_rows(logits_invmasked)
    py = T.sum(T.mul(p, y), axis=-1)
    term = T.mul(T.log(T.clamp(T.sub(1.0, py), LOG_EPS, 1 - LOG_EPS)), -1.0)
    return _reduce(term, reduction)


def loss_smooth(m: Tensor, kind: str = "l1", reduction: str = "mean") -> Tensor:
    """Anisotropic total variation over the last two axes; batch mean."""
    m = T.as_tensor(m)
    if m.ndim < 2:
        raise ShapeError("smoothness loss needs a 2-D map")
    dx = T.sub(T.take(m, (..., slice(None), slice(1, None))), T.take(m, (..., slice(None), slice(None, -1))))
    dy = T.sub(T.take(m, (..., slice(1, None), slice(None))), T.take(m, (..., slice(None, -1), slice(None))))
    f = T.absolute if kind == "l1" else T.square if kind == "l2" else None
    if f is None:
        raise ContractError(f"unknown smoothness loss {kind!r}")
    tv = T.add(T.sum(f(dx), axis=(-2, -1)), T.sum(f(dy), axis=(-2, -1)))
    return _reduce(tv, reduction)


@dataclass
class LtxOutput:
    loss: Tensor
    m: Tensor           # pixel-resolution maps
    x_masked: Tensor
    terms: dict[str, float | np.ndarray]


def _value(t: Tensor):
    return t.item() if t.ndim == 0 else t.data.copy()


def ltx_loss(x, explainer: Explainer, explained: Explained, y: np.ndarray,
             weights: LossWeights = LossWeights(), m: Tensor | None = None,
             reduction: str = "mean") -> LtxOutput:
    """``L_pred + w_mask L_mask + w_inv L_inv + w_smooth L_smooth``.

    ``y`` is the target from :func:`target_select`. Terms with zero weight
    are not evaluated. ``m`` overrides the explainer output (pixel maps).
    Over a batch the per-instance losses are averaged; ``reduction="sum"``
    or ``"none"`` keep each instance's gradient independent of the batch
    size (used with stacked explainers).
    """
    x = T.as_tensor(x)
    if m is None:
        m = explainer.pixel_maps(x)
    z = explainer.z
    xm = mask_blend(x, m, z)
    lp = loss_pred(explained.logits(xm), y, reduction)
    total, terms = lp, {"pred": _value(lp)}
    if weights.mask:
        lm = loss_mask(m, weights.mask_kind, reduction)
        total = T.add(total, T.mul(lm, weights.mask))
        terms["mask"] = _value(lm)
    if weights.inv:
        inv = loss_inv(explained.logits(mask_blend(x, T.sub(1.0, m), z)), y, reduction)
        total = T.add(total, T.mul(inv, weights.inv))
        terms["inv"] = _value(inv)
    if weights.smooth:
        ls = loss_smooth(m, weights.smooth_kind, reduction)
        total = T.add(total, T.mul(ls, weights.smooth))
        terms["smooth"] = _value(ls)
    return LtxOutput(total, m, xm, terms)
