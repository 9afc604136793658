"""Stacked multi-scale dense classifier trained one layer at a time.

Each layer is a k x k tanh convolution (the encoder) followed by a 1 x 1
classifier head. Layer 1 sees the DHAC channels at its scale; every later
layer also sees the previous layer's hidden maps and class distribution,
resampled to its own scale. Training layer i freezes layers < i.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dhac import FeatureImage
from .scene import VOID_ID

logger = logging.getLogger(__name__)

N_DHAC = 4
WEIGHTS_MAGIC = b"SAESTACK"
WEIGHTS_VERSION = 1
_ACTIVATIONS = ("tanh", "linear")


class WeightsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    layers: int = 4
    hidden: int = 32
    kernel: int = 7
    classes: int = 5
    scales: tuple[int, ...] = (4, 3, 2, 1)  # coarse to fine

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning rate, epochs and batch size must be positive")
        if self.layers < 1 or self.hidden < 1 or self.classes < 2:
            raise ValueError("invalid network shape")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if len(self.scales) != self.layers or min(self.scales) < 0:
            raise ValueError("one non-negative scale per layer required")


@dataclass(eq=False)
class LayerParams:
    enc_w: np.ndarray  # (k, k, c_in, d)
    enc_b: np.ndarray  # (d,)
    cls_w: np.ndarray  # (d, K)
    cls_b: np.ndarray  # (K,)
    scale: int

    @property
    def in_channels(self) -> int:
        return self.enc_w.shape[2]

    def tensors(self) -> list[np.ndarray]:
        return [self.enc_w, self.enc_b, self.cls_w, self.cls_b]

    def copy(self, dtype=None) -> "LayerParams":
        dt = dtype or self.enc_w.dtype
        return LayerParams(*(np.array(t, dtype=dt) for t in self.tensors()), self.scale)

    def to_bytes(self) -> bytes:
        return b"".join(t.astype("<f4").tobytes() for t in self.tensors())


@dataclass(eq=False)
class ProbabilityImage:
    probs: np.ndarray  # (H, W, K) float32
    mask: np.ndarray  # (H, W) bool

    def argmax(self, void_masked: bool = True) -> np.ndarray:
        lab = self.probs.argmax(axis=-1).astype(np.uint8)
        if void_masked:
            lab[~self.mask] = VOID_ID
        return lab


def init_layer(rng: np.random.Generator, c_in: int, d: int, k: int, K: int, scale: int) -> LayerParams:
    fan_in = k * k * c_in
    return LayerParams(
        (rng.standard_normal((k, k, c_in, d)) / np.sqrt(fan_in)).astype(np.float32),
        np.zeros(d, np.float32),
        (rng.standard_normal((d, K)) / np.sqrt(d)).astype(np.float32),
        np.zeros(K, np.float32),
        scale,
    )


@dataclass(eq=False)
class AutoencoderStack:
    config: TrainConfig
    layers: list[LayerParams] = field(default_factory=list)
    activation: str = "tanh"

    @classmethod
    def initialise(cls, config: TrainConfig, activation: str = "tanh") -> "AutoencoderStack":
        stack = cls(config, [], activation)
        for i in range(config.layers):
            stack.layers.append(stack.fresh_layer(i))
        return stack

    def in_channels(self, i: int) -> int:
        return N_DHAC + (self.config.hidden + self.config.classes if i > 0 else 0)

    def fresh_layer(self, i: int) -> LayerParams:
        c = self.config
        rng = np.random.default_rng([c.seed, i])
        return init_layer(rng, self.in_channels(i), c.hidden, c.kernel, c.classes, c.scales[i])

    # -- persistence ------------------------------------------------------
    def to_bytes(self) -> bytes:
        c = self.config
        head = WEIGHTS_MAGIC + struct.pack("<I", WEIGHTS_VERSION)
        cfg = struct.pack("<iiiiiiidi", c.layers, c.classes, N_DHAC, c.hidden, c.kernel,
                          _ACTIVATIONS.index(self.activation), c.epochs, c.learning_rate,
                          c.batch_size)
        cfg += struct.pack("<Q", c.seed) + struct.pack(f"<{c.layers}i", *c.scales)
        return head + cfg + b"".join(l.to_bytes() for l in self.layers)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "AutoencoderStack":
        if data[:8] != WEIGHTS_MAGIC:
            raise WeightsFormatError("bad weights magic")
        if len(data) < 12:
            raise WeightsFormatError("truncated weights header")
        (version,) = struct.unpack("<I", data[8:12])
        if version != WEIGHTS_VERSION:
            raise WeightsFormatError(f"unsupported weights version {version}")
        fmt = "<iiiiiiidi"
        pos = 12
        n = struct.calcsize(fmt)
        if len(data) < pos + n + 8:
            raise WeightsFormatError("truncated weights header")
        L, K, c0, d, k, act, epochs, lr, bs = struct.unpack(fmt, data[pos:pos + n])
        pos += n
        (seed,) = struct.unpack("<Q", data[pos:pos + 8])
        pos += 8
        if len(data) < pos + 4 * L:
            raise WeightsFormatError("truncated weights header")
        scales = struct.unpack(f"<{L}i", data[pos:pos + 4 * L])
        pos += 4 * L
        cfg = TrainConfig(lr, epochs, bs, seed, L, d, k, K, scales)
        stack = cls(cfg, [], _ACTIVATIONS[act])
        for i in range(L):
            c_in = stack.in_channels(i)
            shapes = [(k, k, c_in, d), (d,), (d, K), (K,)]
            ts = []
            for s in shapes:
                cnt = int(np.prod(s))
                if len(data) < pos + 4 * cnt:
                    raise WeightsFormatError("truncated weight tensors")
                ts.append(np.frombuffer(data, "<f4", cnt, pos).reshape(s).astype(np.float32))
                pos += 4 * cnt
            stack.layers.append(LayerParams(*ts, scales[i]))
        if pos != len(data):
            raise WeightsFormatError("trailing bytes after weight tensors")
        return stack

    @classmethod
    def load(cls, path) -> "AutoencoderStack":
        return cls.from_bytes(Path(path).read_bytes())


def save_weights(stack: AutoencoderStack, path) -> None:
    stack.save(path)


def load_weights(path) -> AutoencoderStack:
    return AutoencoderStack.load(path)


# -- resampling ---------------------------------------------------------------

def scale_shape(shape: tuple[int, int], s: int) -> tuple[int, int]:
    h, w = shape
    for _ in range(s):
        h, w = (h + 1) // 2, (w + 1) // 2
    return h, w


def downsample2(x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masked 2 x 2 mean pooling; odd sizes are padded with masked cells."""
    h, w = mask.shape
    H, W = (h + 1) // 2, (w + 1) // 2
    xp = np.zeros((2 * H, 2 * W) + x.shape[2:], x.dtype)
    mp = np.zeros((2 * H, 2 * W), x.dtype)
    m = mask.astype(x.dtype)
    xp[:h, :w] = x * m[..., None]
    mp[:h, :w] = m
    xs = xp.reshape(H, 2, W, 2, -1).sum(axis=(1, 3))
    ms = mp.reshape(H, 2, W, 2).sum(axis=(1, 3))
    out = np.where(ms[..., None] > 0, xs / np.maximum(ms, 1)[..., None], 0).astype(x.dtype)
    return out, ms > 0


def bilinear_resize(x: np.ndarray, out_shape: tuple[int, int], factor: float) -> np.ndarray:
    """Resample (h, w, c) to ``out_shape`` where one input cell spans
    ``factor`` output cells; sample positions align cell centres."""
    h, w = x.shape[:2]
    H, W = out_shape

    def coords(n_out, n_in):
        s = (np.arange(n_out) + 0.5) / factor - 0.5
        s = np.clip(s, 0, n_in - 1)
        i0 = np.minimum(np.floor(s).astype(np.int64), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (s - i0).astype(x.dtype)

    y0, y1, fy = coords(H, h)
    x0, x1, fx = coords(W, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = x[y0][:, x0] * (1 - fx) + x[y0][:, x1] * fx
    bot = x[y1][:, x0] * (1 - fx) + x[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def pyramid(feat: FeatureImage, max_scale: int) -> list[tuple[np.ndarray, np.ndarray]]:
    out = [(feat.data, feat.mask)]
    for _ in range(max_scale):
        out.append(downsample2(*out[-1]))
    return out


def resample(x: np.ndarray, mask_from: np.ndarray, s_from: int, s_to: int,
             mask_to: np.ndarray) -> np.ndarray:
    if s_to > s_from:
        m = mask_from
        for _ in range(s_to - s_from):
            x, m = downsample2(x, m)
    elif s_to < s_from:
        x = bilinear_resize(x, mask_to.shape, 2.0 ** (s_from - s_to))
    return x * mask_to[..., None].astype(x.dtype)


def upsample_probs(p: np.ndarray, s: int, full_shape) -> np.ndarray:
    return bilinear_resize(p, full_shape, 2.0 ** s) if s else p


def nearest_labels(labels: np.ndarray, s: int, mask_s: np.ndarray) -> np.ndarray:
    """Nearest-neighbour label downsampling to scale ``s``; masked -> void."""
    f = 2 ** s
    h, w = mask_s.shape
    H, W = labels.shape
    yy = np.minimum(np.arange(h) * f + f // 2, H - 1)
    xx = np.minimum(np.arange(w) * f + f // 2, W - 1)
    out = labels[yy][:, xx].copy()
    out[~mask_s] = VOID_ID
    return out


# -- layer maths --------------------------------------------------------------

def _act(a, activation):
    return np.tanh(a) if activation == "tanh" else a


def _act_grad(h, activation):
    return 1.0 - h * h if activation == "tanh" else np.ones_like(h)


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(h, w, c) -> (h * w, k * k * c) zero-padded patches ordered (dy, dx, c)."""
    r = k // 2
    h, w, c = x.shape
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))  # (h, w, c, k, k)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, k * k * c)


def layer_forward(params: LayerParams, x: np.ndarray, activation: str = "tanh"):
    """(h, w, c_in) -> hidden (h, w, d), logits (h, w, K)."""
    if x.ndim != 3 or x.shape[2] != params.in_channels:
        raise ValueError(f"layer expects {params.in_channels} channels, got {x.shape[-1]}")
    h, w, _ = x.shape
    k = params.enc_w.shape[0]
    dt = params.enc_w.dtype
    P = im2col(x.astype(dt, copy=False), k)
    hid = _act(P @ params.enc_w.reshape(-1, params.enc_w.shape[3]) + params.enc_b, activation)
    logits = hid @ params.cls_w + params.cls_b
    return hid.reshape(h, w, -1), logits.reshape(h, w, -1)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_input(stack, i, pyr, prev):
    p = stack.layers[i]
    dh, m = pyr[p.scale]
    if i == 0:
        return dh.astype(np.float32), m
    ph, ps, pm, pscale = prev
    x = np.concatenate([dh, resample(ph, pm, pscale, p.scale, m),
                        resample(ps, pm, pscale, p.scale, m)], axis=-1)
    return x.astype(np.float32), m


def _layer_inputs(stack: AutoencoderStack, feat: FeatureImage, upto: int, run_last: bool = True):
    """Per layer up to ``upto`` inclusive: (input map, mask, hidden, softmax).
    With ``run_last`` false the final layer is not evaluated (hidden and
    softmax are None)."""
    pyr = pyramid(feat, max(stack.config.scales[: upto + 1]))
    prev = None
    out = []
    for i in range(upto + 1):
        x, m = _layer_input(stack, i, pyr, prev)
        if i == upto and not run_last:
            out.append((x, m, None, None))
            break
        hid, logits = layer_forward(stack.layers[i], x, stack.activation)
        sm = softmax(logits.astype(np.float64)).astype(np.float32)
        out.append((x, m, hid, sm))
        prev = (hid, sm, m, stack.layers[i].scale)
    return out


def stack_forward(stack: AutoencoderStack, feat: FeatureImage,
                  n_layers: int | None = None) -> list[ProbabilityImage]:
    """Full-resolution class distributions after each layer."""
    L = len(stack.layers) if n_layers is None else n_layers
    if L == 0:
        return []
    K = stack.config.classes
    full = feat.mask.shape
    results = []
    for (x, m, hid, sm), p in zip(_layer_inputs(stack, feat, L - 1), stack.layers):
        up = upsample_probs(sm.astype(np.float64), p.scale, full)
        up /= up.sum(axis=-1, keepdims=True)
        up[~feat.mask] = 1.0 / K
        results.append(ProbabilityImage(up.astype(np.float32), feat.mask.copy()))
    return results


def predict(stack: AutoencoderStack, feat: FeatureImage) -> ProbabilityImage:
    return stack_forward(stack, feat)[-1]


# -- training -----------------------------------------------------------------

@dataclass
class LayerReport:
    layer: int
    initial_loss: float
    final_loss: float
    loss_history: list[float]
    train_accuracy: float


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - np.take_along_axis(z, labels[..., None].astype(np.int64), axis=-1)[..., 0]


class _PatchSet:
    """Training pixels of one layer with on-the-fly patch extraction."""

    def __init__(self, inputs: list[np.ndarray], labels: list[np.ndarray], k: int):
        r = k // 2
        self.k = k
        self.xp = np.stack([np.pad(x, ((r, r), (r, r), (0, 0))) for x in inputs])
        lab = np.stack(labels)
        n, y, x = np.nonzero(lab != VOID_ID)
        self.index = np.stack([n, y, x], axis=1)
        self.target = lab[n, y, x].astype(np.int64)
        d = np.arange(k)
        self.dy = d[None, :, None]
        self.dx = d[None, None, :]

    def __len__(self):
        return len(self.target)

    def patches(self, sel: np.ndarray) -> np.ndarray:
        n, y, x = self.index[sel].T
        p = self.xp[n[:, None, None], y[:, None, None] + self.dy, x[:, None, None] + self.dx]
        return p.reshape(len(sel), -1)


def _batch_forward(params: LayerParams, P: np.ndarray, activation: str):
    a = P @ params.enc_w.reshape(-1, params.enc_w.shape[3]) + params.enc_b
    h = _act(a, activation)
    z = h @ params.cls_w + params.cls_b
    return h, z


def _dataset_loss(params: LayerParams, ps: _PatchSet, activation: str, chunk: int = 8192) -> float:
    total = 0.0
    for s in range(0, len(ps), chunk):
        sel = np.arange(s, min(s + chunk, len(ps)))
        _, z = _batch_forward(params, ps.patches(sel), activation)
        total += float(_cross_entropy(z.astype(np.float64), ps.target[sel]).sum())
    return total / max(len(ps), 1)


def _layer_training_data(stack, i, dataset):
    inputs, labels = [], []
    for feat, lab in dataset:
        x, m, _, _ = _layer_inputs(stack, feat, i, run_last=False)[i]
        full_lab = np.where(feat.mask, lab, VOID_ID).astype(np.uint8)
        inputs.append(x)
        labels.append(nearest_labels(full_lab, stack.layers[i].scale, m))
    return inputs, labels


def train_layer(stack: AutoencoderStack, i: int,
                dataset: Sequence[tuple[FeatureImage, np.ndarray]],
                config: TrainConfig | None = None) -> LayerReport:
    """Fit layer ``i`` (0-based) by mini-batch Adam on the mean per-pixel
    cross-entropy; layers before ``i`` are left untouched."""
    cfg = config or stack.config
    if not dataset:
        raise ValueError("empty training set")
    stack.layers[i] = stack.fresh_layer(i)
    params = stack.layers[i]
    inputs, labels = _layer_training_data(stack, i, dataset)
    ps = _PatchSet(inputs, labels, params.enc_w.shape[0])
    if len(ps) == 0:
        raise ValueError("no labelled pixels in training set")

    rng = np.random.default_rng([cfg.seed, i, 1])
    tensors = params.tensors()
    m1 = [np.zeros_like(t) for t in tensors]
    m2 = [np.zeros_like(t) for t in tensors]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    init_loss = _dataset_loss(params, ps, stack.activation)
    history = [init_loss]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ps))
        for s in range(0, len(order), cfg.batch_size):
            sel = order[s:s + cfg.batch_size]
            P = ps.patches(sel)
            y = ps.target[sel]
            h, z = _batch_forward(params, P, stack.activation)
            dz = softmax(z)
            dz[np.arange(len(sel)), y] -= 1.0
            dz /= len(sel)
            g_cw = h.T @ dz
            g_cb = dz.sum(axis=0)
            da = (dz @ params.cls_w.T) * _act_grad(h, stack.activation)
            g_ew = (P.T @ da).reshape(params.enc_w.shape)
            g_eb = da.sum(axis=0)
            step += 1
            lr_t = cfg.learning_rate * np.sqrt(1 - b2**step) / (1 - b1**step)
            for t, g, a, b in zip(tensors, (g_ew, g_eb, g_cw, g_cb), m1, m2):
                a *= b1
                a += (1 - b1) * g
                b *= b2
                b += (1 - b2) * g * g
                t -= (lr_t * a / (np.sqrt(b) + eps)).astype(t.dtype)
        history.append(_dataset_loss(params, ps, stack.activation))
        logger.info("layer %d epoch %d loss %.4f", i + 1, epoch + 1, history[-1])
    acc = layer_accuracy(stack, dataset, i + 1)
    return LayerReport(i + 1, init_loss, history[-1], history, acc)


def layer_accuracy(stack: AutoencoderStack, dataset, n_layers: int) -> float:
    """Full-resolution training pixel accuracy of layer ``n_layers``'s output."""
    correct = total = 0
    for feat, lab in dataset:
        pred = stack_forward(stack, feat, n_layers)[-1].probs.argmax(axis=-1)
        ok = feat.mask & (lab != VOID_ID)
        correct += int((pred[ok] == lab[ok]).sum())
        total += int(ok.sum())
    return correct / max(total, 1)


def train_stack(config: TrainConfig, dataset, start_layer: int = 0,
                stack: AutoencoderStack | None = None) -> tuple[AutoencoderStack, list[LayerReport]]:
    stack = stack or AutoencoderStack.initialise(config)
    reports = []
    for i in range(start_layer, config.layers):
        reports.append(train_layer(stack, i, dataset, config))
    return stack, reports


# -- gradient check -----------------------------------------------------------

def _layer_loss_and_grads(params: LayerParams, x: np.ndarray, labels: np.ndarray, activation: str):
    k = params.enc_w.shape[0]
    P = im2col(x, k)
    sel = labels.ravel() != VOID_ID
    y = labels.ravel()[sel].astype(np.int64)
    Wf = params.enc_w.reshape(-1, params.enc_w.shape[3])
    A = P @ Wf + params.enc_b
    Hh = _act(A, activation)
    Z = Hh @ params.cls_w + params.cls_b
    n = int(sel.sum())
    loss = float(_cross_entropy(Z[sel], y).mean())
    dz = np.zeros_like(Z)
    dz[sel] = softmax(Z[sel])
    dz[np.flatnonzero(sel), y] -= 1.0
    dz /= n
    g_cw = Hh.T @ dz
    g_cb = dz.sum(axis=0)
    da = (dz @ params.cls_w.T) * _act_grad(Hh, activation)
    g_ew = (P.T @ da).reshape(params.enc_w.shape)
    g_eb = da.sum(axis=0)
    return loss, (g_ew, g_eb, g_cw, g_cb), (P, A, Hh, Z, sel, y)


def analytic_gradients(params: LayerParams, x, labels, activation="tanh"):
    p = params.copy(np.float64)
    loss, grads, _ = _layer_loss_and_grads(p, np.asarray(x, np.float64), labels, activation)
    return loss, grads


def numeric_gradients(params: LayerParams, x, labels, activation="tanh", h=1e-4):
    """Central finite differences of the layer loss for every parameter.

    Perturbing one weight only changes one hidden unit (encoder) or one logit
    column (head), so each perturbed loss is re-evaluated from the affected
    pre-activations rather than from scratch.
    """
    p = params.copy(np.float64)
    _, _, (P, A, Hh, Z, sel, y) = _layer_loss_and_grads(p, np.asarray(x, np.float64), labels, activation)
    P, A, Hh, Z = P[sel], A[sel], Hh[sel], Z[sel]
    rows = np.arange(len(y))

    def ce(zs):  # zs (..., n, K) -> (...,)
        m = zs.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(zs - m).sum(axis=-1)) + m[..., 0]
        return (lse - zs[..., rows, y]).mean(axis=-1)

    d = A.shape[1]
    K = Z.shape[1]
    g_ew = np.zeros((P.shape[1], d))
    g_eb = np.zeros(d)
    for j in range(d):
        out = []
        for sgn in (1.0, -1.0):
            # (n_in, n, K) logits for every encoder weight feeding unit j
            a = A[:, j][None, :] + sgn * h * P.T
            dh = _act(a, activation) - Hh[:, j][None, :]
            out.append(ce(Z[None] + dh[..., None] * p.cls_w[j][None, None, :]))
        g_ew[:, j] = (out[0] - out[1]) / (2 * h)
        lb = [ce(Z + (_act(A[:, j] + sgn * h, activation) - Hh[:, j])[:, None] * p.cls_w[j][None, :])
              for sgn in (1.0, -1.0)]
        g_eb[j] = (lb[0] - lb[1]) / (2 * h)
    g_cw = np.zeros((d, K))
    g_cb = np.zeros(K)
    for c in range(K):
        e = np.zeros(K)
        e[c] = 1.0
        zp = Z[None] + h * Hh.T[..., None] * e
        zm = Z[None] - h * Hh.T[..., None] * e
        g_cw[:, c] = (ce(zp) - ce(zm)) / (2 * h)
        g_cb[c] = (ce(Z + h * e) - ce(Z - h * e)) / (2 * h)
    return g_ew.reshape(p.enc_w.shape), g_eb, g_cw, g_cb


def gradient_check(params: LayerParams, x, labels, activation: str = "tanh", h: float = 1e-4) -> float:
    """max |analytic - numeric| / max(1e-8, |analytic|) over all parameters."""
    x = np.asarray(x)
    if x.shape[0] > 16 or x.shape[1] > 16:
        raise ValueError("gradient check expects inputs of at most 16 x 16")
    _, ga = analytic_gradients(params, x, labels, activation)
    gn = numeric_gradients(params, x, labels, activation, h)
    worst = 0.0
    for a, n in zip(ga, gn):
        rel = np.abs(a - n) / np.maximum(1e-8, np.abs(a))
        worst = max(worst, float(rel.max()))
    return worst


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["scales"] = list(cfg.scales)
    return d
