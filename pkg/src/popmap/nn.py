"""Neural-network layers, losses, Adam and checkpoint I/O on top of :mod:`popmap.tensor`."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from popmap.errors import InputError, ShapeError, StateError
from popmap.tensor import Function, Tensor, concat, sigmoid, tanh

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


# -- fused primitives ----------------------------------------------------------


class Conv2d(Function):
    """Stride-1 2-D cross-correlation with same-size zero padding.

    Two equivalent lowerings, picked by which intermediate is smaller:

    * im2col: gather ``(C_in*k*k, N*H*W)`` columns, then one matmul;
    * shift-after-multiply: one matmul on the padded input giving
      ``(C_out*k*k, N*Hp*Wp)`` tap responses, then k*k shifted adds.
      This wins when ``C_out`` is much smaller than ``C_in``.
    """

    def forward(self, x, w, b):
        n, c_in, h, wd = x.shape
        c_out, c_w, k, k2 = w.shape
        if c_w != c_in:
            raise ShapeError(f"conv2d: input has {c_in} channels, kernels expect {c_w}")
        if k != k2 or k % 2 == 0:
            raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
        if b.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({c_out},)")
        pad = k // 2
        self.x_shape, self.k, self.pad, self.w = x.shape, k, pad, w
        xt = x.transpose(1, 0, 2, 3)
        if k == 1:
            self.mode = "matmul"
            self.cols = np.ascontiguousarray(xt).reshape(c_in, -1)
            out = w.reshape(c_out, c_in) @ self.cols + b[:, None]
            return out.reshape(c_out, n, h, wd).transpose(1, 0, 2, 3)
        xp = np.zeros((c_in, n, h + 2 * pad, wd + 2 * pad))
        xp[:, :, pad : pad + h, pad : pad + wd] = xt
        if c_out < c_in:
            self.mode = "shift"
            self.xp = xp.reshape(c_in, -1)
            wt = w.transpose(0, 2, 3, 1).reshape(c_out * k * k, c_in)
            taps = (wt @ self.xp).reshape(c_out, k, k, n, h + 2 * pad, wd + 2 * pad)
            out = np.zeros((c_out, n, h, wd))
            for i in range(k):
                for j in range(k):
                    out += taps[:, i, j, :, i : i + h, j : j + wd]
            out += b[:, None, None, None]
            return out.transpose(1, 0, 2, 3)
        self.mode = "im2col"
        cols = np.empty((c_in, k, k, n, h, wd))
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i : i + h, j : j + wd]
        self.cols = cols.reshape(c_in * k * k, -1)
        out = w.reshape(c_out, -1) @ self.cols + b[:, None]
        return out.reshape(c_out, n, h, wd).transpose(1, 0, 2, 3)

    def backward(self, grad):
        n, c_in, h, wd = self.x_shape
        k, pad = self.k, self.pad
        c_out = self.w.shape[0]
        gt = np.ascontiguousarray(grad.transpose(1, 0, 2, 3))
        db = gt.reshape(c_out, -1).sum(axis=1)
        if self.mode == "matmul":
            g2 = gt.reshape(c_out, -1)
            dw = (g2 @ self.cols.T).reshape(self.w.shape)
            dxt = (self.w.reshape(c_out, c_in).T @ g2).reshape(c_in, n, h, wd)
        elif self.mode == "shift":
            hp, wp = h + 2 * pad, wd + 2 * pad
            dtaps = np.zeros((c_out, k, k, n, hp, wp))
            for i in range(k):
                for j in range(k):
                    dtaps[:, i, j, :, i : i + h, j : j + wd] = gt
            dtaps = dtaps.reshape(c_out * k * k, -1)
            wt = self.w.transpose(0, 2, 3, 1).reshape(c_out * k * k, c_in)
            dw = (dtaps @ self.xp.T).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
            dxp = (wt.T @ dtaps).reshape(c_in, n, hp, wp)
            dxt = dxp[:, :, pad : pad + h, pad : pad + wd]
        else:
            g2 = gt.reshape(c_out, -1)
            dw = (g2 @ self.cols.T).reshape(self.w.shape)
            taps = (self.w.reshape(c_out, -1).T @ g2).reshape(c_in, k, k, n, h, wd)
            dxp = np.zeros((c_in, n, h + 2 * pad, wd + 2 * pad))
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + h, j : j + wd] += taps[:, i, j]
            dxt = dxp[:, :, pad : pad + h, pad : pad + wd]
        return dxt.transpose(1, 0, 2, 3), dw, db


class BatchNorm2dFn(Function):
    """Per-channel normalisation over (N, H, W) using batch statistics."""

    def forward(self, x, gamma, beta, eps=BN_EPS):
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        self.gamma = gamma
        return gamma[None, :, None, None] * self.xhat + beta[None, :, None, None]

    def backward(self, grad):
        axes = (0, 2, 3)
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        dgamma = (grad * self.xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * self.gamma[None, :, None, None]
        dx = (
            self.inv_std
            / m
            * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - self.xhat * (dxhat * self.xhat).sum(axis=axes, keepdims=True)
            )
        )
        return dx, dgamma, dbeta


class AffineChannels(Function):
    """Eval-mode batch norm: fixed per-channel scale and shift."""

    def forward(self, x, gamma, beta, mean=None, var=None, eps=BN_EPS):
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean[None, :, None, None]) * self.inv_std[None, :, None, None]
        self.gamma = gamma
        return gamma[None, :, None, None] * self.xhat + beta[None, :, None, None]

    def backward(self, grad):
        dgamma = (grad * self.xhat).sum(axis=(0, 2, 3))
        dbeta = grad.sum(axis=(0, 2, 3))
        dx = grad * (self.gamma * self.inv_std)[None, :, None, None]
        return dx, dgamma, dbeta


class MSELoss(Function):
    def forward(self, pred, target):
        if pred.shape != target.shape:
            raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
        self.diff = pred - target
        return np.asarray(np.mean(self.diff**2))

    def backward(self, grad):
        g = grad * 2.0 * self.diff / self.diff.size
        return g, -g


# -- functional API ------------------------------------------------------------


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padded convolution; accepts (C, H, W) or (N, C, H, W) input."""
    if x.ndim == 3:
        return Conv2d.apply(x.reshape(1, *x.shape), kernels, bias).reshape(
            kernels.shape[0], *x.shape[1:]
        )
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects 3-D or 4-D input, got shape {x.shape}")
    return Conv2d.apply(x, kernels, bias)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalisation over (N, H, W) per channel.

    In ``train`` mode the running statistics arrays, when given, are updated
    in place by exponential moving average (``running = momentum * running
    + (1 - momentum) * batch``; the variance uses the unbiased estimate).
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects (N, C, H, W), got {x.shape}")
    if mode == "eval":
        if running_mean is None or running_var is None:
            raise StateError("batchnorm2d in eval mode needs running statistics")
        return AffineChannels.apply(x, gamma, beta, mean=running_mean, var=running_var, eps=eps)
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    out = BatchNorm2dFn.apply(x, gamma, beta, eps=eps)
    if running_mean is not None and running_var is not None:
        mean, var = x.data.mean(axis=(0, 2, 3)), x.data.var(axis=(0, 2, 3))
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * n / max(n - 1, 1)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` along the last axis; ``weight`` is (F_out, F_in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    lead = x.shape[:-1]
    x2 = x if x.ndim == 2 else x.reshape(-1, x.shape[-1])
    out = x2 @ weight.T
    if bias is not None:
        out = out + bias
    if x.ndim != 2:
        out = out.reshape(*lead, weight.shape[0])
    return out


def mse_loss(pred: Tensor, target) -> Tensor:
    return MSELoss.apply(pred, target)


def one_hot(index: int, n: int) -> np.ndarray:
    if not 0 <= index < n:
        raise InputError(f"index {index} outside 0..{n - 1}")
    v = np.zeros(n)
    v[index] = 1.0
    return v


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step.

    ``weight`` has shape (F + H, 4H) acting on ``concat([x, h_prev])``; the
    four column blocks are the input, forget, candidate and output gates.
    Inputs may be unbatched (1-D) or batched (B, F).
    """
    squeeze = x.ndim == 1
    if squeeze:
        x, h_prev, c_prev = x.reshape(1, -1), h_prev.reshape(1, -1), c_prev.reshape(1, -1)
    hidden = h_prev.shape[-1]
    if weight.shape != (x.shape[-1] + hidden, 4 * hidden) or bias.shape != (4 * hidden,):
        raise ShapeError(
            f"lstm_cell: weight {weight.shape} / bias {bias.shape} inconsistent with "
            f"input {x.shape[-1]} and hidden {hidden}"
        )
    z = concat([x, h_prev], axis=1) @ weight + bias
    i = sigmoid(z[:, :hidden])
    f = sigmoid(z[:, hidden : 2 * hidden])
    g = tanh(z[:, 2 * hidden : 3 * hidden])
    o = sigmoid(z[:, 3 * hidden :])
    c = f * c_prev + i * g
    h = o * tanh(c)
    if squeeze:
        return h.reshape(hidden), c.reshape(hidden)
    return h, c


# -- modules -------------------------------------------------------------------


class Module:
    """Container of named parameters; subclasses set ``Tensor`` attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.buffers(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.buffers(f"{prefix}{name}.{i}.")
        for name in getattr(self, "_buffers", ()):
            value = getattr(self, name)
            if value is not None:
                yield prefix + name, value

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, value in state.items():
            if name in params:
                if params[name].shape != value.shape:
                    raise ShapeError(f"{name}: checkpoint shape {value.shape} != {params[name].shape}")
                params[name].data = np.array(value, dtype=np.float64)
            else:
                owner, attr = self._resolve(name)
                setattr(owner, attr, np.array(value, dtype=np.float64))
        missing = set(params) - set(state)
        if missing:
            raise StateError(f"checkpoint lacks parameters: {sorted(missing)}")

    def _resolve(self, dotted: str):
        obj = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        if parts[-1] not in getattr(obj, "_buffers", ()):
            raise StateError(f"unknown checkpoint entry {dotted!r}")
        return obj, parts[-1]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2dLayer(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        self.weight = Tensor(he_normal(rng, (c_out, c_in, k, k), c_in * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(
            x,
            self.gamma,
            self.beta,
            mode="train" if self.training else "eval",
            running_mean=self.running_mean,
            running_var=self.running_var,
            momentum=self.momentum,
            eps=self.eps,
        )


class Linear(Module):
    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(he_normal(rng, (f_out, f_in), f_in), requires_grad=True)
        self.bias = Tensor(np.zeros(f_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LSTMCell(Module):
    def __init__(self, f_in: int, hidden: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.weight = Tensor(rng.uniform(-bound, bound, size=(f_in + hidden, 4 * hidden)), requires_grad=True)
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0  # forget-gate bias
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_cell(x, h, c, self.weight, self.bias)


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: list[float] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


class Adam:
    """Bias-corrected Adam with per-group learning rates.

    ``groups`` is a list of ``(params, lr)`` pairs; a bare list of tensors
    forms a single group with ``lr``.
    """

    def __init__(
        self,
        groups,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        groups = list(groups)
        if groups and isinstance(groups[0], Tensor):
            groups = [(groups, lr)]
        self.params: list[Tensor] = []
        lrs: list[float] = []
        for params, group_lr in groups:
            if group_lr <= 0:
                raise ValueError("learning rate must be positive")
            for p in params:
                self.params.append(p)
                lrs.append(float(group_lr))
        self.state = AdamState(
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
            lr=lrs,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise StateError(f"Adam.step: parameter {p.name or p.shape} has no gradient")
        adam_step(self.params, [p.grad for p in self.params], self.state)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    """In-place Adam update of ``params``; increments ``state.step_count``."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v, lr in zip(params, grads, state.first_moment, state.second_moment, state.lr):
        if g is None:
            raise StateError("adam_step: missing gradient")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"NDT1"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays in the flat ``NDT1`` binary layout.

    Per record: u64 name length, utf-8 name, u64 rank, rank x u64 dims,
    then float64 data; every integer and float little-endian.
    """
    chunks = [CHECKPOINT_MAGIC]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not an NDT1 checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = 4
    while pos < len(buf):
        (n,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    return out


def iter_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    """Endless stream of index batches drawn by reshuffled epochs."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]
