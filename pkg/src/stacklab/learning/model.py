"""Small convolutional classifier with a global-average-pooling head.

Three stages of (3x3 conv, stride 1, zero pad 1) -> ReLU -> 2x2 max-pool,
then spatial averaging and a linear layer to two logits.  Class 0 is
"stable", class 1 is "unstable".
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

STABLE, UNSTABLE = 0, 1
CHECKPOINT_MAGIC = b"STKLCNN\x00"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


@dataclass
class Model:
    params: dict
    channels: tuple = (8, 16, 32)
    input_size: int = 64
    meta: dict = field(default_factory=dict)

    PARAM_ORDER = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "fc.w", "fc.b")

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** len(self.channels)

    def copy(self) -> "Model":
        return Model({k: v.copy() for k, v in self.params.items()}, self.channels, self.input_size,
                     json.loads(json.dumps(self.meta)))


def init_model(channels=(8, 16, 32), input_size: int = 64, seed: int = 0, scale: float = np.sqrt(6.0),
               zero_head: bool = False) -> Model:
    """Uniform fan-in initialization: U(-scale/sqrt(fan_in), +scale/sqrt(fan_in)), zero biases."""
    if input_size % 2 ** len(channels):
        raise ShapeMismatch("input size must be divisible by the pooling factor")
    rng = np.random.default_rng(seed)
    params = {}
    cin = 1
    for k, cout in enumerate(channels, start=1):
        fan_in = cin * 9
        params[f"conv{k}.w"] = rng.uniform(-1, 1, (cout, cin, 3, 3)) * scale / np.sqrt(fan_in)
        params[f"conv{k}.b"] = np.zeros(cout)
        cin = cout
    if zero_head:
        params["fc.w"] = np.zeros((2, cin))
    else:
        params["fc.w"] = rng.uniform(-1, 1, (2, cin)) * scale / np.sqrt(cin)
    params["fc.b"] = np.zeros(2)
    return Model(params, tuple(channels), input_size)


def _conv_forward(x, w, b):
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (n, c, h, w, 3, 3)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, x_shape, w):
    n, c, h, wd = x_shape
    f = w.shape[0]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(f, -1)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def _pool_forward(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def _pool_backward(dout, arg, x_shape):
    n, c, h, w = x_shape
    d = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(d, arg[..., None], dout[..., None], axis=-1)
    return d.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def _as_batch(model: Model, masks) -> np.ndarray:
    x = np.asarray(getattr(masks, "bits", masks), dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (model.input_size, model.input_size):
        raise ShapeMismatch(f"expected masks of {model.input_size}x{model.input_size}, got {x.shape}")
    return x


def _forward(model: Model, x):
    cache = []
    h = x
    for k in range(1, len(model.channels) + 1):
        z, cols = _conv_forward(h, model.params[f"conv{k}.w"], model.params[f"conv{k}.b"])
        a = np.maximum(z, 0.0)
        p, arg = _pool_forward(a)
        cache.append((h.shape, cols, z, a.shape, arg))
        h = p
    gap = h.mean(axis=(2, 3))
    logits = gap @ model.params["fc.w"].T + model.params["fc.b"]
    return logits, h, gap, cache


def forward(model: Model, masks):
    """Returns (logits, final-stage feature maps); single masks give shapes (2,) and (K, s, s)."""
    x = _as_batch(model, masks)
    logits, feats, _, _ = _forward(model, x)
    if np.ndim(getattr(masks, "bits", masks)) == 2:
        return logits[0], feats[0]
    return logits, feats


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_gradients(model: Model, masks, labels, class_weights=None):
    """Weighted mean cross-entropy and its gradient for every parameter."""
    x = _as_batch(model, masks)
    y = np.asarray(labels, dtype=np.int64)
    logits, feats, gap, cache = _forward(model, x)
    n = x.shape[0]
    cw = np.ones(2) if class_weights is None else np.asarray(class_weights, dtype=float)
    wi = cw[y]
    norm = wi.sum()
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-(wi * logp[np.arange(n), y]).sum() / norm)
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= (wi / norm)[:, None]
    grads = {"fc.w": dlogits.T @ gap, "fc.b": dlogits.sum(axis=0)}
    s = feats.shape[2]
    dh = np.broadcast_to((dlogits @ model.params["fc.w"])[:, :, None, None] / (s * s), feats.shape)
    for k in range(len(model.channels), 0, -1):
        x_shape, cols, z_pre, a_shape, arg = cache[k - 1]
        da = _pool_backward(dh, arg, a_shape)
        dz = da * (z_pre > 0)
        dh, grads[f"conv{k}.w"], grads[f"conv{k}.b"] = _conv_backward(dz, cols, x_shape, model.params[f"conv{k}.w"])
    return loss, grads


def gradients(model: Model, batch, class_weights=None) -> dict:
    masks, labels = batch
    return loss_and_gradients(model, masks, labels, class_weights)[1]


def predict(model: Model, masks):
    """(probability of stable, predicted class); batched input returns arrays."""
    logits, _ = forward(model, masks)
    p = softmax(logits)
    cls = np.argmax(logits, axis=-1)
    if np.ndim(logits) == 1:
        return float(p[STABLE]), int(cls)
    return p[:, STABLE], cls


def cam_raw(model: Model, mask, class_index: int) -> np.ndarray:
    """Class activation map on the final feature grid: sum_k w[c, k] * F_k."""
    _, feats = forward(model, mask)
    return np.tensordot(model.params["fc.w"][class_index], feats, axes=(0, 0))


def upsample_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center aligned bilinear resize with edge clamping."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape

    def axis_weights(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(h, out_h)
    c0, c1, fc = axis_weights(w, out_w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def cam(model: Model, mask, class_index: int) -> np.ndarray:
    raw = cam_raw(model, mask, class_index)
    return upsample_bilinear(raw, model.input_size, model.input_size)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    """magic | u32 version | u32 header length | JSON header | float32 LE params in PARAM_ORDER."""
    header = {"channels": list(model.channels), "input_size": model.input_size,
              "order": list(Model.PARAM_ORDER),
              "shapes": {k: list(model.params[k].shape) for k in Model.PARAM_ORDER},
              "meta": model.meta}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for k in Model.PARAM_ORDER:
        buf.write(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    params = {}
    for k in header["order"]:
        shape = tuple(header["shapes"][k])
        count = int(np.prod(shape))
        params[k] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(float).reshape(shape)
        pos += 4 * count
    return Model(params, tuple(header["channels"]), int(header["input_size"]), header.get("meta", {}))
