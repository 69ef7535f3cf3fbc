"""Explained classifiers (patch transformer, small CNN) and their explainers.

Parameters live in plain ``dict[str, Tensor]`` maps whose names double as
checkpoint tensor names. Explainers clone every backbone tensor of the
explained model under the same name and add a fresh head plus ``mask.z``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import Checkpoint, Dataset, FormatError, SplitMix64
from .tensor import ContractError, ShapeError, Tensor


class TrainingError(RuntimeError):
    """Optimisation diverged (non-finite loss)."""


@dataclass(frozen=True)
class ModelSpec:
    family: str = "patchformer"
    image_size: int = 28
    channels: int = 1
    num_classes: int = 4
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2

    def __post_init__(self):
        if self.family not in ("patchformer", "cnn"):
            raise ContractError(f"unknown model family {self.family!r}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.family == "patchformer":
            if self.image_size % self.patch_size:
                raise ContractError("image_size must be divisible by patch_size")
            if self.embed_dim % self.heads:
                raise ContractError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        """Side of the explainer's native map (patch grid or final CNN features)."""
        if self.family == "patchformer":
            return self.image_size // self.patch_size
        return ((self.image_size - 2) // 2 - 1) // 2

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    def to_meta(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> ModelSpec:
        try:
            return cls(family=meta["family"], **{k: int(meta[k]) for k in (
                "image_size", "channels", "num_classes", "patch_size", "embed_dim", "depth", "heads")})
        except KeyError as exc:
            raise FormatError(f"checkpoint metadata lacks {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# Initialisation helpers
# ---------------------------------------------------------------------------

def _uniform(rng: SplitMix64, shape, bound: float) -> np.ndarray:
    n = int(np.prod(shape))
    return ((2.0 * rng.uniform(n) - 1.0) * bound).reshape(shape)


def _glorot(rng: SplitMix64, shape, fan_in: int, fan_out: int) -> np.ndarray:
    return _uniform(rng, shape, T.glorot_bound(fan_in, fan_out))


def init_explained(spec: ModelSpec, seed: int = 0) -> dict[str, np.ndarray]:
    rng = SplitMix64(seed)
    p: dict[str, np.ndarray] = {}
    k = spec.num_classes
    if spec.family == "patchformer":
        d, pd = spec.embed_dim, spec.channels * spec.patch_size ** 2
        p["embed.w"] = _glorot(rng, (pd, d), pd, d)
        p["embed.b"] = np.zeros(d)
        p["cls"] = _uniform(rng, (d,), 0.02)
        p["pos"] = _uniform(rng, (spec.num_patches + 1, d), 0.02)
        for layer in range(spec.depth):
            pre = f"enc{layer}."
            p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
            for name in ("q", "k", "v", "o"):
                p[pre + f"attn.w{name}"] = _glorot(rng, (d, d), d, d)
                p[pre + f"attn.b{name}"] = np.zeros(d)
            p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
            p[pre + "ff.w1"] = _glorot(rng, (d, 4 * d), d, 4 * d)
            p[pre + "ff.b1"] = np.zeros(4 * d)
            p[pre + "ff.w2"] = _glorot(rng, (4 * d, d), 4 * d, d)
            p[pre + "ff.b2"] = np.zeros(d)
        p["head.w"] = _glorot(rng, (d, k), d, k)
        p["head.b"] = np.zeros(k)
    else:
        c = spec.channels
        p["conv1.w"] = _glorot(rng, (8, c, 3, 3), c * 9, 8 * 9)
        p["conv1.b"] = np.zeros(8)
        p["conv2.w"] = _glorot(rng, (16, 8, 2, 2), 8 * 4, 16 * 4)
        p["conv2.b"] = np.zeros(16)
        feat = 16 * spec.grid ** 2
        p["fc.w"] = _glorot(rng, (feat, k), feat, k)
        p["fc.b"] = np.zeros(k)
    return p


def is_backbone(name: str) -> bool:
    return not name.startswith(("head.", "fc.", "v.", "proj.", "mask."))


# ---------------------------------------------------------------------------
# Patch transformer
# ---------------------------------------------------------------------------

def patchify(image, p: int) -> Tensor:
    """``C x S x S`` (or batched) image to ``n x (C*p*p)`` row-major patch tokens."""
    image = T.as_tensor(image)
    batched = image.ndim == 4
    x = image if batched else T.reshape(image, (1, *image.dims))
    b, c, s, s2 = x.dims
    if s != s2 or s % p:
        raise ShapeError(f"image {s}x{s2} cannot be split into {p}x{p} patches")
    g = s // p
    x = T.reshape(x, (b, c, g, p, g, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (b, g * g, c * p * p))
    return x if batched else T.reshape(x, x.dims[1:])


def unpatchify(tokens: np.ndarray, channels: int, p: int) -> np.ndarray:
    n = tokens.shape[-2]
    g = math.isqrt(n)
    x = np.asarray(tokens).reshape(-1, g, g, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    x = x.reshape(-1, channels, g * p, g * p)
    return x if np.ndim(tokens) == 3 else x[0]


@dataclass
class PatchformerActivations:
    token_states: Tensor   # (B,) n x d
    cls_state: Tensor      # (B,) d


def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b``; a 3-D ``w`` holds one weight matrix per batch instance."""
    if w.ndim == 2:
        return T.linear(x, w, b)
    if x.ndim == 2:
        y = T.reshape(T.matmul(T.reshape(x, (x.dims[0], 1, x.dims[1])), w), (x.dims[0], w.dims[-1]))
        return T.add(y, b)
    return T.add(T.matmul(x, w), T.reshape(b, (b.dims[0], 1, b.dims[1])))


def _norm(h: Tensor, g: Tensor, b: Tensor) -> Tensor:
    if g.ndim == 2:
        g, b = T.reshape(g, (g.dims[0], 1, g.dims[1])), T.reshape(b, (b.dims[0], 1, b.dims[1]))
    return T.layer_norm(h, g, b)


def _attention(x: Tensor, params, pre: str, heads: int) -> Tensor:
    b, t, d = x.dims
    dh = d // heads

    def split(name):
        y = _dense(x, params[pre + f"attn.w{name}"], params[pre + f"attn.b{name}"])
        return T.transpose(T.reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

    # the 1/sqrt(dh) score scale is applied to q, the smaller operand
    q, k, v = T.mul(split("q"), 1.0 / math.sqrt(dh)), split("k"), split("v")
    att = T.matmul(T.softmax_rows(T.matmul(q, T.transpose(k, (0, 1, 3, 2)))), v)
    att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (b, t, d))
    return _dense(att, params[pre + "attn.wo"], params[pre + "attn.bo"])


def patchformer_encode(spec: ModelSpec, params: dict[str, Tensor], images) -> PatchformerActivations:
    images = T.as_tensor(images)
    batched = images.ndim == 4
    x = images if batched else T.reshape(images, (1, *images.dims))
    if x.dims[1:] != (spec.channels, spec.image_size, spec.image_size):
        raise ShapeError(f"image dims {images.dims} do not match model spec")
    b, d = x.dims[0], spec.embed_dim
    tokens = _dense(patchify(x, spec.patch_size), params["embed.w"], params["embed.b"])
    if params["cls"].ndim == 2:
        cls = T.reshape(params["cls"], (b, 1, d))
    else:
        cls = T.broadcast_to(T.reshape(params["cls"], (1, 1, d)), (b, 1, d))
    h = T.add(T.concat([cls, tokens], axis=1), params["pos"])
    for layer in range(spec.depth):
        pre = f"enc{layer}."
        a = _norm(h, params[pre + "ln1.g"], params[pre + "ln1.b"])
        h = T.add(h, _attention(a, params, pre, spec.heads))
        f = _norm(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
        f = _dense(T.relu(_dense(f, params[pre + "ff.w1"], params[pre + "ff.b1"])),
                   params[pre + "ff.w2"], params[pre + "ff.b2"])
        h = T.add(h, f)
    states, cls_state = T.take(h, (slice(None), slice(1, None))), T.take(h, (slice(None), 0))
    if not batched:
        states, cls_state = T.take(states, 0), T.take(cls_state, 0)
    return PatchformerActivations(states, cls_state)


def patchformer_forward(spec: ModelSpec, params: dict[str, Tensor], image):
    """Returns ``(logits, activations)``."""
    acts = patchformer_encode(spec, params, image)
    return _head(acts.cls_state, params), acts


def _head(c: Tensor, params) -> Tensor:
    if c.ndim == 1:
        return T.reshape(T.linear(T.reshape(c, (1, -1)), params["head.w"], params["head.b"]), (-1,))
    return T.linear(c, params["head.w"], params["head.b"])


# ---------------------------------------------------------------------------
# CNN
# ---------------------------------------------------------------------------

def cnn_features(spec: ModelSpec, params: dict[str, Tensor], images) -> Tensor:
    images = T.as_tensor(images)
    if images.dims[-3:] != (spec.channels, spec.image_size, spec.image_size):
        raise ShapeError(f"image dims {images.dims} do not match model spec")
    h = T.maxpool2(T.relu(T.conv2d(images, params["conv1.w"], params["conv1.b"])))
    return T.maxpool2(T.relu(T.conv2d(h, params["conv2.w"], params["conv2.b"])))


def cnn_forward(spec: ModelSpec, params: dict[str, Tensor], image) -> Tensor:
    feats = cnn_features(spec, params, image)
    if feats.ndim == 3:
        return T.reshape(T.linear(T.reshape(feats, (1, -1)), params["fc.w"], params["fc.b"]), (-1,))
    return T.linear(T.reshape(feats, (feats.dims[0], -1)), params["fc.w"], params["fc.b"])


# ---------------------------------------------------------------------------
# Model wrappers
# ---------------------------------------------------------------------------

def _wrap(arrays: dict[str, np.ndarray], trainable: bool) -> dict[str, Tensor]:
    out = {}
    for name, arr in arrays.items():
        arr = np.array(arr, dtype=np.float64)
        if not trainable:
            arr.setflags(write=False)
        out[name] = Tensor(arr, requires_grad=trainable)
    return out


class Explained:
    """A classifier ``f``. Built from a checkpoint it is frozen (read-only buffers)."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray], trainable: bool = False):
        self.spec = spec
        self.params = _wrap(params, trainable)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> Explained:
        spec = ModelSpec.from_meta(ckpt.meta)
        expected = init_explained(spec)
        missing = sorted(set(expected) - set(ckpt.tensors))
        if missing:
            raise FormatError(f"not a {spec.family} classifier checkpoint; missing {', '.join(missing[:3])}")
        for name, arr in expected.items():
            if ckpt.tensors[name].shape != arr.shape:
                raise FormatError(f"tensor {name} has dims {ckpt.tensors[name].shape}, expected {arr.shape}")
        return cls(spec, {k: ckpt.tensors[k] for k in expected})

    def logits(self, images) -> Tensor:
        if self.spec.family == "patchformer":
            return patchformer_forward(self.spec, self.params, images)[0]
        return cnn_forward(self.spec, self.params, images)

    def predict_proba(self, images: np.ndarray, chunk: int = 32) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        out = []
        with T.no_grad():
            for i in range(0, len(images), chunk):
                out.append(T.softmax_rows(self.logits(images[i:i + chunk])).data)
        probs = np.concatenate(out)
        return probs[0] if single else probs

    __call__ = predict_proba

    def checkpoint(self, **meta) -> Checkpoint:
        info = self.spec.to_meta()
        info.update({k: str(v) for k, v in meta.items()})
        return Checkpoint({k: v.data.copy() for k, v in self.params.items()}, info)


class Explainer:
    """Explanation model ``e``: image(s) to maps in (0, 1) on the native grid."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray], trainable: bool = True):
        self.spec = spec
        self.params = _wrap(params, trainable)

    @property
    def z(self) -> Tensor:
        return self.params["mask.z"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, trainable: bool = True) -> Explainer:
        if "mask.z" not in ckpt.tensors:
            raise FormatError("explainer checkpoint has no 'mask.z' tensor")
        spec = ModelSpec.from_meta(ckpt.meta)
        head = "v.w1" if spec.family == "patchformer" else "proj.w"
        if head not in ckpt.tensors:
            raise FormatError(f"explainer checkpoint of family {spec.family} lacks {head!r}")
        return cls(spec, ckpt.tensors, trainable)

    def forward(self, images) -> Tensor:
        if self.spec.family == "patchformer":
            return explainer_vit_forward(self, images)
        return explainer_cnn_forward(self, images)

    def pixel_maps(self, images) -> Tensor:
        """Maps resized to the input resolution."""
        s = self.spec.image_size
        return T.bilinear_upsample(self.forward(images), s, s)

    def predict_maps(self, images: np.ndarray, chunk: int = 32) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        with T.no_grad():
            maps = np.concatenate([self.pixel_maps(images[i:i + chunk]).data
                                   for i in range(0, len(images), chunk)])
        return maps[0] if single else maps

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def checkpoint(self, **meta) -> Checkpoint:
        info = self.spec.to_meta()
        info.update({k: str(v) for k, v in meta.items()})
        return Checkpoint(self.state(), info)

    def copy(self) -> Explainer:
        return Explainer(self.spec, self.state(), trainable=True)

    @property
    def stacked(self) -> bool:
        return self.params["mask.z"].ndim == 1

    def replicate(self, n: int) -> Explainer:
        """``n`` independent copies stacked along a new leading axis.

        A stacked explainer maps a batch of ``n`` images to ``n`` maps, image
        ``i`` going through copy ``i`` only.
        """
        if self.stacked:
            raise ContractError("explainer is already stacked")
        return Explainer(self.spec, {k: np.repeat(v.data[None], n, axis=0) for k, v in self.params.items()})

    def instance(self, i: int) -> Explainer:
        return Explainer(self.spec, {k: v.data[i].copy() for k, v in self.params.items()})


def explainer_vit_forward(explainer: Explainer, image) -> Tensor:
    """Per-patch scores ``v(h_i)`` arranged on the ``S/p x S/p`` grid."""
    spec, p = explainer.spec, explainer.params
    states = patchformer_encode(spec, p, image).token_states
    hidden = T.tanh(_dense(states, p["v.w1"], p["v.b1"]))
    scores = T.sigmoid(_dense(hidden, p["v.w2"], p["v.b2"]))
    return T.reshape(scores, (*states.dims[:-2], spec.grid, spec.grid))


def explainer_cnn_forward(explainer: Explainer, image) -> Tensor:
    """Backbone features, 1x1 conv to one channel, sigmoid: an ``r x r`` map."""
    p = explainer.params
    feats = cnn_features(explainer.spec, p, image)
    out = T.sigmoid(T.conv2d(feats, p["proj.w"], p["proj.b"]))
    return T.take(out, (slice(None), 0)) if out.ndim == 4 else T.take(out, 0)


def init_explainer_from_explained(explained: Checkpoint, family: str, seed: int = 0) -> Explainer:
    """Clone the explained backbone bitwise and attach a freshly initialised head."""
    spec = ModelSpec.from_meta(explained.meta)
    if spec.family != family:
        raise FormatError(f"checkpoint family {spec.family!r} does not match requested {family!r}")
    params = {k: v.copy() for k, v in explained.tensors.items() if is_backbone(k)}
    rng = SplitMix64(seed)
    if family == "patchformer":
        d = spec.embed_dim
        params["v.w1"] = _glorot(rng, (d, d), d, d)
        params["v.b1"] = np.zeros(d)
        params["v.w2"] = _glorot(rng, (d, 1), d, 1)
        params["v.b2"] = np.zeros(1)
    else:
        params["proj.w"] = _glorot(rng, (1, 16, 1, 1), 16, 1)
        params["proj.b"] = np.zeros(1)
    params["mask.z"] = np.array(0.5)
    return Explainer(spec, params)


# ---------------------------------------------------------------------------
# Training the explained model
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    probs = T.clamp(T.softmax_rows(logits), 1e-7, 1 - 1e-7)
    onehot = np.eye(logits.dims[-1])[labels]
    return T.mul(T.sum(T.mul(T.log(probs), onehot)), -1.0 / len(labels))


def train_explained(data: Dataset, spec: ModelSpec, epochs: int = 30, seed: int = 0,
                    lr: float = 2e-3, batch_size: int = 32):
    """Adam + cross-entropy. Returns ``(checkpoint, train_accuracy)``.

    Parameters are rounded to float32 at the end so the in-memory model is
    exactly what the checkpoint file holds.
    """
    if len(data) == 0:
        raise ContractError("empty training set")
    if data.labels.max() >= spec.num_classes:
        raise ContractError("label out of range for num_classes")
    model = Explained(spec, init_explained(spec, seed), trainable=True)
    params = list(model.params.values())
    opt = T.Adam(params, lr=lr)
    rng = SplitMix64(seed ^ 0x5EED)
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        for step, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start:start + batch_size]
            loss = cross_entropy(model.logits(data.images[idx]), data.labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    ckpt = model.checkpoint(seed=seed, epoch=epochs).quantized()
    frozen = Explained.from_checkpoint(ckpt)
    acc = float(np.mean(frozen.predict_proba(data.images).argmax(axis=1) == data.labels))
    ckpt.meta["train_accuracy"] = repr(acc)
    return ckpt, acc
