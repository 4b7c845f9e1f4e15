"""Tiny segmentation network, per-location discriminator, losses and mIoU.

Everything is numpy float64 with hand-written backward passes. A forward
call returns ``(output, cache)``; ``backward(cache, d_output)`` returns a
gradient dict keyed like :meth:`params`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import blob
from . import hopfield as hf
from .errors import InvalidInputError, NumericError
from .hopfield import HopfieldMemory, softmax, uniform_init

LOG_CLAMP = 1e-12


# ---------------------------------------------------------------- layers

def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1, zero-padded 'same' convolution. ``w`` is k x k x C_in x C_out."""
    k = w.shape[0]
    h, wd, cin = x.shape
    if k == 1:
        cols = x.reshape(h * wd, cin)
    else:
        p = k // 2
        padded = np.pad(x, ((p, p), (p, p), (0, 0)))
        win = sliding_window_view(padded, (k, k), axis=(0, 1))  # h, w, cin, k, k
        cols = win.transpose(0, 1, 3, 4, 2).reshape(h * wd, k * k * cin)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(h, wd, -1), (cols, x.shape, w)


def conv_backward(cache, dout: np.ndarray, need_input_grad: bool = True):
    cols, xshape, w = cache
    k = w.shape[0]
    h, wd, cin = xshape
    d2 = dout.reshape(h * wd, -1)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    dcols = d2 @ w.reshape(-1, w.shape[-1]).T
    if k == 1:
        return dcols.reshape(xshape), dw, db
    p = k // 2
    dcols = dcols.reshape(h, wd, k, k, cin)
    dpad = np.zeros((h + 2 * p, wd + 2 * p, cin))
    for i in range(k):
        for j in range(k):
            dpad[i:i + h, j:j + wd] += dcols[:, :, i, j]
    return dpad[p:p + h, p:p + wd], dw, db


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, dout: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, dout, slope * dout)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def _conv_init(rng, k, cin, cout):
    fan_in = k * k * cin
    return uniform_init(rng, fan_in, (k, k, cin, cout)), uniform_init(rng, fan_in, (cout,))


# ---------------------------------------------------------------- models

@dataclass
class ModelConfig:
    in_channels: int = 3
    n_classes: int = 4
    enc_channels: tuple = (16, 32, 64)
    proj_dim: int = 32
    memory_size: int = 64
    tau: float = 1.0
    use_hopfield: bool = True
    slope: float = 0.1
    disc_channels: int = 16
    height: Optional[int] = None
    width: Optional[int] = None

    @property
    def feature_dim(self) -> int:
        return self.enc_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["enc_channels"] = tuple(d.get("enc_channels", (16, 32, 64)))
        return cls(**d)


class SegModel:
    """encoder (3x3 convs) -> Hopfield retrieval per location -> 1x1 classifier -> softmax."""

    initialized = True

    def __init__(self, config: ModelConfig = None, rng: Optional[np.random.Generator] = None):
        self.config = config = config or ModelConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.enc = []
        cin = config.in_channels
        for cout in config.enc_channels:
            self.enc.append(list(_conv_init(rng, 3, cin, cout)))
            cin = cout
        c_l = config.feature_dim
        self.memory = (HopfieldMemory.init(config.memory_size, c_l, config.proj_dim, config.tau, rng)
                       if config.use_hopfield else None)
        self.cls_w, self.cls_b = _conv_init(rng, 1, c_l, config.n_classes)

    # parameters --------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.enc):
            out[f"enc{i}.w"] = w
            out[f"enc{i}.b"] = b
        if self.memory is not None:
            for n, a in self.memory.params().items():
                out[f"hopfield.{n}"] = a
        out["cls.w"] = self.cls_w
        out["cls.b"] = self.cls_b
        return out

    def trainable(self) -> list[str]:
        names = list(self.params())
        if self.memory is not None and self.memory.frozen:
            fixed = {f"hopfield.{n}" for n in hf.FROZEN_NAMES}
            names = [n for n in names if n not in fixed]
        return names

    def set_param(self, name: str, value: np.ndarray) -> None:
        """Replace a parameter array in place (keeps array identity)."""
        self.params()[name][...] = value

    def load_params(self, arrays: dict) -> None:
        for name, arr in self.params().items():
            arr[...] = arrays[name]

    def copy(self) -> "SegModel":
        other = SegModel.__new__(SegModel)
        other.config = self.config
        other.enc = [[w.copy(), b.copy()] for w, b in self.enc]
        other.memory = self.memory.copy() if self.memory is not None else None
        other.cls_w, other.cls_b = self.cls_w.copy(), self.cls_b.copy()
        return other

    # forward / backward ------------------------------------------------

    def _pixels(self, image) -> np.ndarray:
        px = getattr(image, "pixels", image)
        px = np.asarray(px, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != self.config.in_channels:
            raise InvalidInputError(
                f"expected H x W x {self.config.in_channels} input, got {px.shape}")
        c = self.config
        if c.height is not None and px.shape[:2] != (c.height, c.width):
            raise InvalidInputError(f"expected {c.height}x{c.width} input, got {px.shape[:2]}")
        return px

    def forward(self, image):
        x = self._pixels(image)
        slope = self.config.slope
        caches = []
        h = x
        last = len(self.enc) - 1
        for i, (w, b) in enumerate(self.enc):
            pre, cc = conv_forward(h, w, b)
            caches.append((cc, pre))
            h = leaky_relu(pre, slope) if i < last else pre
        if not np.all(np.isfinite(h)):
            raise NumericError("encoder produced non-finite features")
        hh, ww, c_l = h.shape
        Z = h.reshape(hh * ww, c_l)
        hop_cache = None
        if self.memory is not None:
            Z, hop_cache = hf.forward(self.memory, Z)
        logits, cls_cache = conv_forward(Z.reshape(hh, ww, c_l), self.cls_w, self.cls_b)
        probs = softmax(logits)
        return probs, (caches, hop_cache, cls_cache, probs)

    def predict_proba(self, image) -> np.ndarray:
        return self.forward(image)[0]

    def predict(self, image) -> np.ndarray:
        return np.argmax(self.predict_proba(image), axis=-1)

    def backward(self, cache, dprobs: np.ndarray) -> dict[str, np.ndarray]:
        caches, hop_cache, cls_cache, probs = cache
        slope = self.config.slope
        grads = {}
        dlogits = softmax_backward(probs, dprobs)
        dz, grads["cls.w"], grads["cls.b"] = conv_backward(cls_cache, dlogits)
        hh, ww, c_l = dz.shape
        if self.memory is not None:
            dZ, hg = hf.backward(self.memory, hop_cache, dz.reshape(hh * ww, c_l))
            for n, g in hg.items():
                grads[f"hopfield.{n}"] = g
            dz = dZ.reshape(hh, ww, c_l)
        dh = dz
        last = len(self.enc) - 1
        for i in range(last, -1, -1):
            cc, pre = caches[i]
            if i < last:
                dh = leaky_relu_backward(pre, dh, slope)
            dh, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = conv_backward(cc, dh, need_input_grad=i > 0)
        return grads

    # serialization -----------------------------------------------------

    def to_bytes(self, seed: int = 0, stage: str = "init") -> bytes:
        header = {"kind": "SegModel", "config": self.config.to_dict(), "seed": seed, "stage": stage,
                  "frozen": bool(self.memory is not None and self.memory.frozen)}
        return blob.pack(header, self.params().items())

    @classmethod
    def from_bytes(cls, data: bytes) -> "SegModel":
        header, arrays = blob.unpack(data)
        model = cls(ModelConfig.from_dict(header["config"]))
        model.load_params(arrays)
        if model.memory is not None and header.get("frozen"):
            hf.freeze(model.memory)
        return model


class Discriminator:
    """Per-location source/target classifier over softmax maps.

    Channel 1 is 'source', channel 0 is 'target'.
    """

    def __init__(self, n_classes: int = 4, hidden: int = 16, slope: float = 0.1,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.slope = slope
        self.w0, self.b0 = _conv_init(rng, 3, n_classes, hidden)
        self.w1, self.b1 = _conv_init(rng, 3, hidden, 2)

    def params(self) -> dict[str, np.ndarray]:
        return {"d0.w": self.w0, "d0.b": self.b0, "d1.w": self.w1, "d1.b": self.b1}

    def trainable(self) -> list[str]:
        return list(self.params())

    def load_params(self, arrays: dict) -> None:
        for name, arr in self.params().items():
            arr[...] = arrays[name]

    def forward(self, seg_probs: np.ndarray):
        pre, c0 = conv_forward(seg_probs, self.w0, self.b0)
        logits, c1 = conv_forward(leaky_relu(pre, self.slope), self.w1, self.b1)
        probs = softmax(logits)
        return probs, (c0, pre, c1, probs)

    def backward(self, cache, dprobs: np.ndarray, need_input_grad: bool = True):
        """Returns ``(d_seg_probs, grads)``."""
        c0, pre, c1, probs = cache
        grads = {}
        dlogits = softmax_backward(probs, dprobs)
        dh, grads["d1.w"], grads["d1.b"] = conv_backward(c1, dlogits)
        dh = leaky_relu_backward(pre, dh, self.slope)
        dx, grads["d0.w"], grads["d0.b"] = conv_backward(c0, dh, need_input_grad)
        return dx, grads


# ---------------------------------------------------------------- losses

def _check_simplex(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError(f"{name} contains non-finite values")
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
        raise InvalidInputError(f"{name} is not a per-location probability simplex")
    return p


def _safe_log(p):
    return np.log(np.maximum(p, LOG_CLAMP))


def _check_labels(pred, labels):
    labels = np.asarray(labels)
    if labels.shape != pred.shape[:-1]:
        raise InvalidInputError(f"labels shape {labels.shape} != prediction {pred.shape[:-1]}")
    if labels.size and (labels.min() < 0 or labels.max() >= pred.shape[-1]):
        raise InvalidInputError(f"label ids must lie in [0, {pred.shape[-1]})")
    return labels.astype(np.int64)


def _pick(pred, labels):
    return np.take_along_axis(pred, labels[..., None], axis=-1)[..., 0]


def ce_loss(pred: np.ndarray, labels: np.ndarray) -> float:
    """Summed (not averaged) pixel-wise cross entropy.

    Loss reductions use a correctly rounded sum, so they do not depend on
    summation order and uniform maps give exactly ``N`` times the per-pixel term.
    """
    pred = _check_simplex(pred, "prediction")
    labels = _check_labels(pred, labels)
    return -math.fsum(_safe_log(_pick(pred, labels)).ravel())


def ce_loss_grad(pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = _check_labels(pred, labels)
    p = _pick(pred, labels)
    g = np.zeros_like(pred)
    val = np.where(p > LOG_CLAMP, -1.0 / np.maximum(p, LOG_CLAMP), 0.0)
    np.put_along_axis(g, labels[..., None], val[..., None], axis=-1)
    return g


def _channel_loss(d_out, channel):
    return -math.fsum(_safe_log(d_out[..., channel]).ravel())


def _channel_grad(d_out, channel):
    g = np.zeros_like(d_out)
    p = d_out[..., channel]
    g[..., channel] = np.where(p > LOG_CLAMP, -1.0 / np.maximum(p, LOG_CLAMP), 0.0)
    return g


def adv_loss_seg(d_out: np.ndarray) -> float:
    """Segmenter's adversarial loss: targets should look like source (channel 1)."""
    return _channel_loss(_check_simplex(d_out, "discriminator output"), 1)


def adv_loss_seg_grad(d_out: np.ndarray) -> np.ndarray:
    return _channel_grad(d_out, 1)


def adv_loss_disc(d_target: np.ndarray, d_fake_source: np.ndarray) -> float:
    """Discriminator loss: targets on channel 0, (fake-)source on channel 1."""
    d_target = _check_simplex(d_target, "discriminator target output")
    d_fake_source = _check_simplex(d_fake_source, "discriminator source output")
    return _channel_loss(d_target, 0) + _channel_loss(d_fake_source, 1)


def adv_loss_disc_grads(d_target: np.ndarray, d_fake_source: np.ndarray):
    return _channel_grad(d_target, 0), _channel_grad(d_fake_source, 1)


@dataclass(frozen=True)
class LossReport:
    l_ce: float
    l_adv_seg: float
    l_adv_d: float
    total: float
    lambda_adv: float

    def as_dict(self) -> dict:
        return asdict(self)


def total_loss(l_ce: float, l_adv_seg: float, l_adv_d: float, lambda_adv: float = 0.001) -> LossReport:
    vals = (l_ce, l_adv_seg, l_adv_d, lambda_adv)
    if not all(np.isfinite(v) for v in vals):
        raise NumericError(f"non-finite loss component in {vals}")
    total = l_ce + lambda_adv * (l_adv_seg + l_adv_d)
    return LossReport(float(l_ce), float(l_adv_seg), float(l_adv_d), float(total), float(lambda_adv))


def mean_reduced(report: LossReport, n_locations: int) -> dict:
    """Per-location view of a report, for diagnostics only."""
    return {k: (v / n_locations if k != "lambda_adv" else v) for k, v in report.as_dict().items()}


# ---------------------------------------------------------------- metrics

def confusion_matrix(pred_labels: np.ndarray, true_labels: np.ndarray, cls: int) -> np.ndarray:
    pred = np.asarray(pred_labels, dtype=np.int64).ravel()
    true = np.asarray(true_labels, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise InvalidInputError("prediction and ground truth differ in size")
    if pred.size and (min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= cls):
        raise InvalidInputError(f"class ids must lie in [0, {cls})")
    return np.bincount(true * cls + pred, minlength=cls * cls).reshape(cls, cls)


def iou_from_confusion(conf: np.ndarray):
    """Per-class IoU (NaN where a class is absent from both maps) and their mean."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1), np.nan)
    present = ~np.isnan(iou)
    mean = float(np.mean(iou[present])) if present.any() else float("nan")
    return iou, mean


def miou(pred_labels: np.ndarray, true_labels: np.ndarray, cls: int):
    return iou_from_confusion(confusion_matrix(pred_labels, true_labels, cls))
