"""Desk-scale residual 3D convolutional segmentation network.

Two 3x3x3 same-padded convolutions with a residual skip, a 1x1x1 head, and a
three-channel sigmoid output. Forward, exact reverse-mode gradients, Adam,
and the one-epoch local training loop all operate on float64 and are fully
deterministic given a generator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyDatasetError, ShapeMismatchError
from .metrics import mirrored_dice_loss
from .pipeline import PipelineConfig, augment, prepare_case, sample_patch
from .seeding import derive_rng
from .tensors import ParamVector

__all__ = [
    "LAYER_IDS",
    "SegNetConfig",
    "AdamState",
    "SegNet",
    "init_net",
    "forward",
    "backward",
    "adam_step",
    "train_one_epoch",
]

LAYER_IDS = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "head.w", "head.b")

KERNEL = 3

# Rows of the unfolded-window matrix processed per matmul, bounding the
# im2col buffer for large volumes.
_SLAB_VOXELS = 16384

# Logit clamp keeping sigmoid outputs strictly inside (0, 1) in float64.
_LOGIT_CLIP = 36.0


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 4
    base_filters: int = 8
    lr: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        c, f = self.in_channels, self.base_filters
        return {
            "conv1.w": (f, c, KERNEL, KERNEL, KERNEL),
            "conv1.b": (f,),
            "conv2.w": (f, f, KERNEL, KERNEL, KERNEL),
            "conv2.b": (f,),
            "head.w": (3, f),
            "head.b": (3,),
        }


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), step=0)


@dataclass(frozen=True)
class SegNet:
    params: ParamVector
    config: SegNetConfig
    adam: AdamState

    def layer(self, layer_id: str) -> np.ndarray:
        return self.params.segment(layer_id).reshape(self.config.layer_shapes()[layer_id])

    def with_params(self, params: ParamVector) -> "SegNet":
        return SegNet(params=params, config=self.config, adam=self.adam)


def init_net(cfg: SegNetConfig, seed: int) -> SegNet:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    rng = derive_rng(seed, "init")
    fan_in = {
        "conv1.w": cfg.in_channels * KERNEL**3,
        "conv1.b": cfg.in_channels * KERNEL**3,
        "conv2.w": cfg.base_filters * KERNEL**3,
        "conv2.b": cfg.base_filters * KERNEL**3,
        "head.w": cfg.base_filters,
        "head.b": cfg.base_filters,
    }
    shapes = cfg.layer_shapes()
    segments = []
    for layer_id in LAYER_IDS:
        bound = 1.0 / np.sqrt(fan_in[layer_id])
        segments.append((layer_id, rng.uniform(-bound, bound, size=shapes[layer_id])))
    params = ParamVector.from_segments(segments)
    return SegNet(params=params, config=cfg, adam=AdamState.zeros(params.data.size))


_COLS_CACHE_LIMIT = 1 << 24  # elements; larger unfolds fall back to slab chunking


def _unfold(x: np.ndarray) -> np.ndarray:
    """Strided window view [C, 3, 3, 3, D, H, W] of the same-padded input."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (KERNEL, KERNEL, KERNEL), axis=(1, 2, 3))
    return win.transpose(0, 4, 5, 6, 1, 2, 3)


def _conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded 3D cross-correlation, x: [C,D,H,W], w: [F,C,3,3,3].

    Returns (output, cols) where cols is the materialized [C*27, V] unfold for
    gradient reuse, or None when the volume is too large to keep around.
    """
    f = w.shape[0]
    c, d, h, width = x.shape
    v = d * h * width
    rows = c * KERNEL**3
    view = _unfold(x)
    wmat = w.reshape(f, rows)
    if rows * v <= _COLS_CACHE_LIMIT:
        cols = np.ascontiguousarray(view).reshape(rows, v)
        out = (wmat @ cols).reshape(f, d, h, width) + b[:, None, None, None]
        return out, cols
    out = np.empty((f, d, h, width))
    step = max(1, _SLAB_VOXELS // (h * width))
    for d0 in range(0, d, step):
        d1 = min(d, d0 + step)
        cols = np.ascontiguousarray(view[:, :, :, :, d0:d1]).reshape(rows, (d1 - d0) * h * width)
        out[:, d0:d1] = (wmat @ cols).reshape(f, d1 - d0, h, width)
    out += b[:, None, None, None]
    return out, None


def _conv3d_grads(x: np.ndarray, w: np.ndarray, g: np.ndarray, cols: np.ndarray | None = None):
    """Gradients of the same-padded conv: returns (dw, db, dx)."""
    f = w.shape[0]
    c, d, h, width = x.shape
    v = d * h * width
    rows = c * KERNEL**3
    gmat = g.reshape(f, v)
    if cols is not None:
        dw = gmat @ cols.T
    else:
        view = _unfold(x)
        dw = np.zeros((f, rows))
        step = max(1, _SLAB_VOXELS // (h * width))
        for d0 in range(0, d, step):
            d1 = min(d, d0 + step)
            slab = np.ascontiguousarray(view[:, :, :, :, d0:d1]).reshape(rows, (d1 - d0) * h * width)
            dw += g[:, d0:d1].reshape(f, -1) @ slab.T
    db = g.sum(axis=(1, 2, 3))

    # dx is the full correlation of g with the spatially flipped kernels.
    gview = _unfold(g)
    grows = f * KERNEL**3
    wflip = w[:, :, ::-1, ::-1, ::-1].transpose(0, 2, 3, 4, 1).reshape(grows, c)
    if grows * v <= _COLS_CACHE_LIMIT:
        gcols = np.ascontiguousarray(gview).reshape(grows, v)
        dx = (wflip.T @ gcols).reshape(c, d, h, width)
    else:
        dx = np.empty((c, d, h, width))
        step = max(1, _SLAB_VOXELS // (h * width))
        for d0 in range(0, d, step):
            d1 = min(d, d0 + step)
            gcols = np.ascontiguousarray(gview[:, :, :, :, d0:d1]).reshape(grows, (d1 - d0) * h * width)
            dx[:, d0:d1] = (wflip.T @ gcols).reshape(c, d1 - d0, h, width)
    return dw.reshape(w.shape), db, dx


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -_LOGIT_CLIP, _LOGIT_CLIP)))


class _ForwardParts(NamedTuple):
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    res: np.ndarray
    out: np.ndarray
    cols1: np.ndarray | None  # unfold of x, reused for conv1 weight grads
    cols2: np.ndarray | None  # unfold of a1, reused for conv2 weight grads


def _check_input(net: SegNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] != net.config.in_channels:
        raise ShapeMismatchError((net.config.in_channels, "P", "P", "P"), x.shape, "forward")
    p = x.shape[1]
    if not (x.shape[1] == x.shape[2] == x.shape[3]):
        raise ShapeMismatchError("cubic input", x.shape, "forward")
    if p < 8:
        raise ValueError(f"input extent must be >= 8, got {p}")
    return x


def _forward_parts(net: SegNet, x: np.ndarray) -> _ForwardParts:
    x = _check_input(net, x)
    z1, cols1 = _conv3d(x, net.layer("conv1.w"), net.layer("conv1.b"))
    a1 = np.maximum(z1, 0.0)
    z2, cols2 = _conv3d(a1, net.layer("conv2.w"), net.layer("conv2.b"))
    a2 = np.maximum(z2, 0.0)
    res = a2 + a1
    hw = net.layer("head.w")
    logits = np.tensordot(hw, res, axes=(1, 0)) + net.layer("head.b")[:, None, None, None]
    return _ForwardParts(x=x, z1=z1, a1=a1, z2=z2, res=res, out=_sigmoid(logits), cols1=cols1, cols2=cols2)


def forward(net: SegNet, x: np.ndarray) -> np.ndarray:
    """Probability maps [3, P, P, P], strictly inside (0, 1)."""
    return _forward_parts(net, x).out


def _backward_parts(net: SegNet, parts: _ForwardParts, grad_out: np.ndarray) -> ParamVector:
    out = parts.out
    dlogits = grad_out * out * (1.0 - out)
    hw = net.layer("head.w")
    dhead_w = np.tensordot(dlogits, parts.res, axes=([1, 2, 3], [1, 2, 3]))
    dhead_b = dlogits.sum(axis=(1, 2, 3))
    dres = np.tensordot(hw, dlogits, axes=(0, 0))
    dz2 = dres * (parts.z2 > 0.0)
    dw2, db2, da1_conv = _conv3d_grads(parts.a1, net.layer("conv2.w"), dz2, cols=parts.cols2)
    da1 = dres + da1_conv  # skip path plus conv2 path
    dz1 = da1 * (parts.z1 > 0.0)
    dw1, db1, _ = _conv3d_grads(parts.x, net.layer("conv1.w"), dz1, cols=parts.cols1)
    return ParamVector.from_segments(
        [
            ("conv1.w", dw1),
            ("conv1.b", db1),
            ("conv2.w", dw2),
            ("conv2.b", db2),
            ("head.w", dhead_w),
            ("head.b", dhead_b),
        ]
    )


def backward(net: SegNet, x: np.ndarray, grad_out: np.ndarray) -> ParamVector:
    """Exact gradient of forward w.r.t. the parameters under grad_out."""
    parts = _forward_parts(net, x)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != parts.out.shape:
        raise ShapeMismatchError(parts.out.shape, grad_out.shape, "backward")
    return _backward_parts(net, parts, grad_out)


def adam_step(net: SegNet, grad: ParamVector) -> SegNet:
    """One bias-corrected Adam update; lr=0 leaves parameters bitwise unchanged."""
    if not net.params.shape_compatible(grad):
        raise ShapeMismatchError(net.params.layer_ids, grad.layer_ids, "adam_step")
    cfg = net.config
    g = grad.data
    t = net.adam.step + 1
    m = cfg.adam_beta1 * net.adam.m + (1.0 - cfg.adam_beta1) * g
    v = cfg.adam_beta2 * net.adam.v + (1.0 - cfg.adam_beta2) * (g * g)
    m_hat = m / (1.0 - cfg.adam_beta1**t)
    v_hat = v / (1.0 - cfg.adam_beta2**t)
    theta = net.params.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return SegNet(params=net.params.replace_data(theta), config=cfg, adam=AdamState(m=m, v=v, step=t))


def train_one_epoch(
    net: SegNet,
    cases,
    pipeline_cfg: PipelineConfig,
    rng: np.random.Generator,
    loss_mode: str = "mirrored",
) -> tuple[SegNet, float]:
    """One pass over the cases in seeded shuffled order.

    Per case: crop + z-score, one random patch, augmentation, forward,
    mirrored overlap loss, backward, Adam step. Returns the updated net and
    the mean loss.
    """
    cases = list(cases)
    if not cases:
        raise EmptyDatasetError("train_one_epoch needs a nonempty train set")
    order = rng.permutation(len(cases))
    losses = []
    for idx in order:
        vol, masks = cases[int(idx)]
        vol, masks = prepare_case(vol, masks)
        pvol, pmasks = sample_patch(vol, masks, pipeline_cfg.patch, rng)
        pvol, pmasks = augment(pvol, pmasks, pipeline_cfg.augment, rng)
        parts = _forward_parts(net, pvol.channels)
        loss, gprob = mirrored_dice_loss(pmasks, parts.out, mode=loss_mode)
        grad = _backward_parts(net, parts, gprob)
        net = adam_step(net, grad)
        losses.append(loss)
    return net, float(np.mean(losses))
