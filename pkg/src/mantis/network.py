"""Encoder-decoder mapping network driven by a flat parameter vector.

The network maps ``t`` echo-magnitude channels to two output channels
(I0 in normalized units, T2 / T2_SCALE). All weights live in one flat vector
so that the optimizer and the on-disk format see a single array; torch is
used only as the differentiation engine.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
import torch
import torch.nn.functional as F

from .core import NumericError

T2_SCALE = 100.0
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
LOG_EPS = 1e-2


@dataclass(frozen=True)
class NetSpec:
    in_channels: int = 8
    out_channels: int = 2
    levels: int = 3
    base_filters: int = 16
    log_features: bool = True

    def __post_init__(self):
        if self.levels < 1 or self.base_filters < 1 or self.in_channels < 1:
            raise ValueError("levels, base_filters and in_channels must be positive")

    @property
    def feature_channels(self) -> int:
        return 2 * self.in_channels if self.log_features else self.in_channels

    @property
    def widths(self) -> list[int]:
        return [self.base_filters * 2**lvl for lvl in range(self.levels + 1)]

    def check_input(self, shape) -> None:
        c, ny, nx = shape[-3:]
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        div = 2**self.levels
        if ny % div or nx % div:
            raise ValueError(f"spatial size {ny}x{nx} not divisible by {div}")

    @cached_property
    def layers(self) -> list[tuple[str, str, int, int]]:
        """(name, kind, in_ch, out_ch) in execution order.

        kind is 'conv' (3x3, stride 1), 'down' (3x3 stride 2), 'up' (3x3
        transposed, stride 2) or 'out' (1x1 with bias). Every layer but 'out'
        is followed by batch normalization and ReLU.
        """
        w = self.widths
        seq = [("enc0a", "conv", self.feature_channels, w[0]), ("enc0b", "conv", w[0], w[0])]
        for lvl in range(1, self.levels + 1):
            seq.append((f"down{lvl}", "down", w[lvl - 1], w[lvl]))
            seq.append((f"enc{lvl}", "conv", w[lvl], w[lvl]))
        for lvl in range(self.levels - 1, -1, -1):
            seq.append((f"up{lvl}", "up", w[lvl + 1], w[lvl]))
            seq.append((f"dec{lvl}", "conv", 2 * w[lvl], w[lvl]))
        seq.append(("out", "out", w[0], self.out_channels))
        return seq

    @cached_property
    def registry(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (parameter name, shape) list defining the flat layout."""
        reg = []
        for name, kind, cin, cout in self.layers:
            if kind == "out":
                reg += [(f"{name}.w", (cout, cin, 1, 1)), (f"{name}.b", (cout,))]
            elif kind == "up":
                reg += [(f"{name}.w", (cin, cout, 3, 3))]
            else:
                reg += [(f"{name}.w", (cout, cin, 3, 3))]
            if kind != "out":
                reg += [(f"{name}.gamma", (cout,)), (f"{name}.beta", (cout,))]
        return reg

    @cached_property
    def buffer_registry(self) -> list[tuple[str, tuple[int, ...]]]:
        reg = []
        for name, kind, _, cout in self.layers:
            if kind != "out":
                reg += [(f"{name}.mean", (cout,)), (f"{name}.var", (cout,))]
        return reg

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.registry)

    @property
    def n_buffers(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.buffer_registry)


@dataclass
class NetParams:
    """Flat parameters with gradient, ADAM moments and batch-norm running stats."""

    spec: NetSpec
    theta: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    running: np.ndarray = None
    step: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.spec.n_params
        self.theta = np.asarray(self.theta)
        if self.theta.shape != (n,):
            raise ValueError(f"theta has shape {self.theta.shape}, spec needs ({n},)")
        dt = self.theta.dtype
        for name in ("grad", "m", "v"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=dt))
        if self.running is None:
            self.running = _initial_running(self.spec, dt)

    def copy(self) -> "NetParams":
        return NetParams(self.spec, self.theta.copy(), self.grad.copy(), self.m.copy(),
                         self.v.copy(), self.running.copy(), self.step, dict(self.extra))

    def views(self) -> dict[str, np.ndarray]:
        return _split(self.theta, self.spec.registry)

    # container payload: theta | grad | m | v | running
    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.theta, self.grad, self.m, self.v, self.running])

    def header(self) -> dict:
        return {"spec": asdict(self.spec), "n_params": self.spec.n_params,
                "n_buffers": self.spec.n_buffers, "step": self.step, "info": self.extra}

    @classmethod
    def from_flat(cls, flat: np.ndarray, header: dict) -> "NetParams":
        spec = NetSpec(**header["spec"])
        n, nb = spec.n_params, spec.n_buffers
        if flat.shape != (4 * n + nb,):
            raise ValueError("netparams payload does not match embedded spec")
        parts = [flat[i * n:(i + 1) * n].copy() for i in range(4)]
        return cls(spec, *parts, running=flat[4 * n:].copy(), step=int(header["step"]),
                   extra=dict(header.get("info") or {}))


def _split(flat, registry):
    out, off = {}, 0
    for name, shape in registry:
        size = int(np.prod(shape))
        out[name] = flat[off:off + size].reshape(shape)
        off += size
    return out


def _initial_running(spec: NetSpec, dtype) -> np.ndarray:
    parts = []
    for name, shape in spec.buffer_registry:
        parts.append(np.zeros(shape, dtype) if name.endswith(".mean") else np.ones(shape, dtype))
    return np.concatenate(parts)


def init_params(spec: NetSpec, seed: int = 0, dtype=np.float32) -> NetParams:
    """He-normal convolution weights, zero biases, unit BN scale, zero BN shift."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in spec.registry:
        if name.endswith(".w"):
            # fan_in of a transposed conv is in_ch_eff * k * k with the layout (cin, cout, k, k)
            if name.startswith("up"):
                fan_in = shape[0] * shape[2] * shape[3]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).ravel())
        elif name.endswith(".gamma"):
            parts.append(np.ones(shape))
        else:
            parts.append(np.zeros(shape))
    return NetParams(spec, np.concatenate(parts).astype(dtype))


def _run(theta: torch.Tensor, running: torch.Tensor, spec: NetSpec, x: torch.Tensor, train: bool):
    """Evaluate the network. In train mode ``running`` is updated in place."""
    p = _split(theta, spec.registry)
    buf = _split(running, spec.buffer_registry)
    skips = {}
    skip_slot = {"enc0b": 0, **{f"enc{lvl}": lvl for lvl in range(1, spec.levels)}}

    def block(name, kind, h):
        w = p[f"{name}.w"]
        if kind == "conv":
            h = F.conv2d(h, w, padding=1)
        elif kind == "down":
            h = F.conv2d(h, w, stride=2, padding=1)
        else:
            h = F.conv_transpose2d(h, w, stride=2, padding=1, output_padding=1)
        # torch's momentum is the weight of the new batch statistic
        h = F.batch_norm(h, buf[f"{name}.mean"], buf[f"{name}.var"], p[f"{name}.gamma"],
                         p[f"{name}.beta"], training=train, momentum=1 - BN_MOMENTUM, eps=BN_EPS)
        return F.relu(h)

    # fixed, parameter-free features: log-magnitudes make the decay rate linear in the input
    h = torch.cat([x, torch.log(x.abs() + LOG_EPS)], dim=1) if spec.log_features else x
    for name, kind, _, _ in spec.layers:
        if kind == "out":
            h = F.conv2d(h, p["out.w"], p["out.b"])
            continue
        if name.startswith("dec"):
            h = torch.cat([skips[int(name[3:])], h], dim=1)
        h = block(name, kind, h)
        if name in skip_slot:
            skips[skip_slot[name]] = h
    return h


def _as_batch(x, dtype):
    x = np.asarray(x)
    single = x.ndim == 3
    return torch.from_numpy(np.ascontiguousarray(x[None] if single else x, dtype=dtype)), single


def forward_net(params: NetParams, spec: NetSpec, x: np.ndarray, mode: str = "infer",
                update_running: bool = False) -> np.ndarray:
    """Evaluate the network on ``x`` ([t, ny, nx] or [B, t, ny, nx]).

    In ``train`` mode batch-norm uses the statistics of this batch; with
    ``update_running`` those statistics are folded into ``params.running``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    spec.check_input(np.shape(x))
    dt = params.theta.dtype
    xb, single = _as_batch(x, dt)
    running = params.running.copy()
    with torch.no_grad():
        out = _run(torch.from_numpy(params.theta), torch.from_numpy(running),
                   spec, xb, mode == "train")
    if update_running and mode == "train":
        params.running = running
    out = out.numpy()
    return out[0] if single else out


def forward_backward(params: NetParams, spec: NetSpec, x: np.ndarray, loss_fn,
                     update_running: bool = True):
    """Train-mode forward, external loss on the output, reverse pass to theta.

    ``loss_fn(output) -> (loss, d loss / d output)`` works on numpy arrays.
    Returns (loss, flat gradient).
    """
    spec.check_input(np.shape(x))
    dt = params.theta.dtype
    xb, single = _as_batch(x, dt)
    theta = torch.from_numpy(params.theta.copy()).requires_grad_(True)
    running = params.running.copy()
    out = _run(theta, torch.from_numpy(running), spec, xb, True)
    o = out.detach().numpy()
    loss, g_out = loss_fn(o[0] if single else o)
    g_out = np.asarray(g_out, dtype=dt)
    (g,) = torch.autograd.grad(out, theta, torch.from_numpy(g_out[None] if single else g_out))
    if update_running:
        params.running = running
    return loss, g.numpy()


def backward_net(params: NetParams, spec: NetSpec, x: np.ndarray, output_grad: np.ndarray) -> np.ndarray:
    """Gradient of <output, output_grad> w.r.t. theta for a train-mode forward pass."""
    _, g = forward_backward(params, spec, x, lambda o: (0.0, output_grad), update_running=False)
    return g


def adam_step(params: NetParams, grads: np.ndarray, lr: float = 2e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, t: int | None = None) -> NetParams:
    """One bias-corrected ADAM update, in place. Returns ``params``."""
    t = params.step + 1 if t is None else t
    g = np.asarray(grads, dtype=params.theta.dtype)
    params.grad = g.copy()
    params.m = beta1 * params.m + (1 - beta1) * g
    params.v = beta2 * params.v + (1 - beta2) * g * g
    mhat = params.m / (1 - beta1**t)
    vhat = params.v / (1 - beta2**t)
    params.theta = params.theta - lr * mhat / (np.sqrt(vhat) + eps)
    params.step = t
    if not np.all(np.isfinite(params.theta)):
        raise NumericError("non-finite parameters after ADAM step")
    return params
