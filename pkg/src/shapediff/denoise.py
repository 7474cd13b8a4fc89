"""Noise predictors: input assembly, a closed-form Gaussian denoiser, a small 3D conv net
with hand-written backprop, Adam, and the batch-size-one training loop."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffuse import training_batch
from .schedule import NoiseSchedule
from .voxgrid import Prior2D, Sample

CKPT_MAGIC = b"DNZ1"


class DimMismatch(ValueError):
    pass


class NonFiniteOutput(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# input assembly


def assemble_input(x_bt, prior: Prior2D, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Stack [noisy volume, mask, fluorescence, abar_t] into a (4, D, H, W) array.

    `x_bt` may also carry a leading batch axis, giving (N, 4, D, H, W).
    """
    x = np.asarray(x_bt, dtype=np.float64)
    if x.ndim not in (3, 4):
        raise DimMismatch(f"noisy volume must be 3D or batched 3D, got {x.shape}")
    if x.shape[-2:] != prior.dims:
        raise DimMismatch(f"prior dims {prior.dims} do not match volume in-plane dims {x.shape[-2:]}")
    abar = schedule.lookup(t).alpha_bar
    cond = np.empty((3,) + x.shape[-3:])
    cond[0] = prior.mask[None]
    cond[1] = prior.fluorescence[None]
    cond[2] = abar
    if x.ndim == 3:
        return np.concatenate([x[None], cond])
    cond = np.broadcast_to(cond, (x.shape[0],) + cond.shape)
    return np.concatenate([x[:, None], cond], axis=1)


# ---------------------------------------------------------------------------
# closed-form denoiser


@dataclass
class GaussianOracleDenoiser:
    """Posterior-mean noise estimate when every voxel of x0 is i.i.d. N(mean, std^2)."""

    mean: float
    std: float
    schedule: NoiseSchedule

    def predict_eps(self, x_t: np.ndarray, t: int) -> np.ndarray:
        abar = self.schedule.lookup(t).alpha_bar
        s2 = self.std**2
        return np.sqrt(1.0 - abar) * (x_t - np.sqrt(abar) * self.mean) / (abar * s2 + 1.0 - abar)

    def reverse_sigma(self, t: int) -> float:
        """Exact std of x_{t-1} given x_t for Gaussian data: posterior noise plus the
        uncertainty of x0 given x_t carried through the posterior-mean coefficient."""
        beta, _, abar, _ = self.schedule.lookup(t)
        abar_prev = self.schedule.alpha_bar_prev()[t - 1]
        s2 = self.std**2
        var_x0 = s2 * (1.0 - abar) / (abar * s2 + 1.0 - abar)
        coef = np.sqrt(abar_prev) * beta / (1.0 - abar)
        return float(np.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar) + coef**2 * var_x0))

    def __call__(self, inp: np.ndarray, t: int) -> np.ndarray:
        x_t = inp[:, 0] if inp.ndim == 5 else inp[0]
        return self.predict_eps(x_t, t)


# ---------------------------------------------------------------------------
# 3D convolution with reflect padding, channels-last: x (N, D, H, W, C)

OFFSETS = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


def _pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)), mode="reflect")


def _taps(w: np.ndarray) -> np.ndarray:
    """(O, C, 3, 3, 3) -> (27, C, O) in OFFSETS order."""
    return np.ascontiguousarray(np.transpose(w, (2, 3, 4, 1, 0))).reshape(27, w.shape[1], w.shape[0])


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-size 3x3x3 cross-correlation. x: (N, D, H, W, C), w: (O, C, 3, 3, 3)."""
    _, D, H, W, _ = x.shape
    xp = _pad(x)
    taps = _taps(w).astype(x.dtype, copy=False)
    out = np.zeros(x.shape[:4] + (w.shape[0],), dtype=x.dtype)
    for n, (i, j, k) in enumerate(OFFSETS):
        out += xp[:, i:i + D, j:j + H, k:k + W, :] @ taps[n]
    out += b.astype(x.dtype, copy=False)
    return out


def _unpad_reflect(gp: np.ndarray) -> np.ndarray:
    """Adjoint of reflect padding by one on the three spatial axes."""
    g = gp
    for axis in (1, 2, 3):
        g = np.moveaxis(g, axis, 0)
        inner = g[1:-1].copy()
        inner[1] += g[0]
        inner[-2] += g[-1]
        g = np.moveaxis(inner, 0, axis)
    return g


def conv3d_backward(x: np.ndarray, w: np.ndarray, gout: np.ndarray):
    """Gradients of conv3d w.r.t. input, weights and bias given upstream gradient `gout`."""
    _, D, H, W, C = x.shape
    O = w.shape[0]
    xp = _pad(x)
    taps_t = np.ascontiguousarray(np.swapaxes(_taps(w), 1, 2), dtype=x.dtype)
    gtaps = np.empty((27, C, O), dtype=np.float64)
    gxp = np.zeros_like(xp)
    g2 = gout.reshape(-1, O)
    for n, (i, j, k) in enumerate(OFFSETS):
        xs = xp[:, i:i + D, j:j + H, k:k + W, :]
        gtaps[n] = xs.reshape(-1, C).T @ g2
        gxp[:, i:i + D, j:j + H, k:k + W, :] += gout @ taps_t[n]
    gw = np.transpose(gtaps.reshape(3, 3, 3, C, O), (4, 3, 0, 1, 2))
    gb = gout.reshape(-1, O).sum(axis=0, dtype=np.float64)
    return _unpad_reflect(gxp), gw, gb


# ---------------------------------------------------------------------------
# conv net


LAYER_SHAPES = ((16, 4), (16, 16), (1, 16))


@dataclass
class ConvDenoiser:
    """conv(4->16) -> ReLU -> conv(16->16) -> ReLU -> conv(16->1), all 3x3x3, reflect padded.

    Parameters are kept in float64; `dtype` sets the arithmetic precision of forward/backward.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dtype: type = np.float64

    @classmethod
    def init(cls, rng=None, shapes=LAYER_SHAPES, zero=False, dtype=np.float64) -> "ConvDenoiser":
        rng = np.random.default_rng(rng)
        ws, bs = [], []
        for i, (o, c) in enumerate(shapes):
            fan_in = c * 27
            if zero:
                w = np.zeros((o, c, 3, 3, 3))
            else:
                gain = np.sqrt(2.0) if i < len(shapes) - 1 else 1.0
                w = rng.standard_normal((o, c, 3, 3, 3)) * gain / np.sqrt(fan_in)
            ws.append(w)
            bs.append(np.zeros(o))
        return cls(ws, bs, dtype)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        self.weights = [np.asarray(p, dtype=np.float64) for p in params[0::2]]
        self.biases = [np.asarray(p, dtype=np.float64) for p in params[1::2]]

    def copy(self) -> "ConvDenoiser":
        return ConvDenoiser([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.dtype)

    def forward(self, x: np.ndarray, keep: bool = False):
        """x: (N, C, D, H, W) channels-first. Returns (N, 1, D, H, W) and, with `keep`,
        the channels-last activations needed by `backward`."""
        h = np.ascontiguousarray(np.moveaxis(x, 1, -1), dtype=self.dtype)
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = conv3d(h, w, b)
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        out = np.moveaxis(h, -1, 1).astype(np.float64)
        return (out, acts) if keep else out

    def __call__(self, inp: np.ndarray, t: int | None = None) -> np.ndarray:
        batched = inp.ndim == 5
        x = inp if batched else inp[None]
        out = self.forward(x)[:, 0]
        return out if batched else out[0]

    def backward(self, acts: list[np.ndarray], gout: np.ndarray) -> list[np.ndarray]:
        """`gout` is the loss gradient w.r.t. the (N, 1, D, H, W) output."""
        grads: list[np.ndarray] = []
        g = np.ascontiguousarray(np.moveaxis(gout, 1, -1), dtype=self.dtype)
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            gx, gw, gb = conv3d_backward(acts[i], self.weights[i], g)
            grads = [gw, gb] + grads
            g = gx
        return grads


def predict(denoiser, inp: np.ndarray, t: int | None = None) -> np.ndarray:
    """Predicted noise for an assembled input; raises on non-finite output."""
    out = denoiser(inp, t)
    if not np.all(np.isfinite(out)):
        raise NonFiniteOutput("denoiser produced non-finite values")
    return out


def loss_and_grads(denoiser: ConvDenoiser, inp: np.ndarray, epsilon_true: np.ndarray):
    """Mean squared error between predicted and true noise, with exact parameter gradients."""
    x = inp if inp.ndim == 5 else inp[None]
    eps = np.asarray(epsilon_true, dtype=np.float64)
    eps = eps if eps.ndim == 4 else eps[None]
    if eps.shape != (x.shape[0],) + x.shape[2:]:
        raise DimMismatch(f"epsilon shape {eps.shape} does not match input {x.shape}")
    out, acts = denoiser.forward(x, keep=True)
    diff = out[:, 0] - eps
    loss = float(np.mean(diff**2))
    gout = (2.0 / diff.size) * diff[:, None]
    return loss, denoiser.backward(acts, gout)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Bias-corrected Adam; returns new parameter arrays and updates `state` in place."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise DimMismatch("parameter and gradient shapes differ")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.weight_decay:
            g = g + state.weight_decay * p
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class LossRecord:
    step: int
    t: int
    loss: float


def train(
    denoiser: ConvDenoiser,
    dataset: list[Sample],
    schedule: NoiseSchedule,
    epochs: int,
    rng,
    lr: float = 1e-4,
    state: AdamState | None = None,
    log_every: int = 0,
) -> tuple[ConvDenoiser, list[LossRecord]]:
    """Batch size one: each epoch visits every sample once in a shuffled order."""
    model = denoiser.copy()
    state = state or AdamState(lr=lr)
    curve: list[LossRecord] = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        for idx in order:
            (pair,) = training_batch([dataset[idx]], schedule, rng)
            inp = assemble_input(pair.x_t, pair.prior, pair.t, schedule)
            loss, grads = loss_and_grads(model, inp, pair.epsilon)
            model.set_params(adam_step(state, model.params(), grads))
            step += 1
            curve.append(LossRecord(step, pair.t, loss))
            if not np.isfinite(loss):
                raise NonFiniteOutput(f"loss diverged at step {step}")
            if log_every and step % log_every == 0:
                recent = np.mean([r.loss for r in curve[-log_every:]])
                print(f"epoch {epoch} step {step} loss {recent:.4f}", flush=True)
    return model, curve


def write_loss_csv(curve: list[LossRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write("step,t,loss\n")
        for r in curve:
            fh.write(f"{r.step},{r.t},{r.loss!r}\n")


# ---------------------------------------------------------------------------
# checkpoints: DNZ1, u32 layer count, then per layer u32 (O, C, k, k, k) and f32 weights + biases


def save_checkpoint(model: ConvDenoiser, path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", len(model.weights))]
    for w, b in zip(model.weights, model.biases):
        parts.append(struct.pack("<5I", *w.shape))
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ConvDenoiser:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    (n,) = struct.unpack_from("<I", data, 4)
    off = 8
    ws, bs = [], []
    for _ in range(n):
        shape = struct.unpack_from("<5I", data, off)
        off += 20
        count = int(np.prod(shape))
        w = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        b = np.frombuffer(data, dtype="<f4", count=shape[0], offset=off)
        off += 4 * shape[0]
        ws.append(w.astype(np.float64))
        bs.append(b.astype(np.float64))
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return ConvDenoiser(ws, bs)
