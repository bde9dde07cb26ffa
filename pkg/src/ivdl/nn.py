"""Minimal dense-network kernel: forward/backward, Gaussian policy head,
twin-input critic, Adam, parameter/FLOP accounting and portable checkpoints.

Everything is plain float64 numpy; reverse-mode gradients are written out
by hand (the architectures are three fixed shapes, a general autodiff
graph would be dead weight).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._accel import (ACT_RELU, ACT_TANH, adam_update, adam_update_numpy,
                     mlp_forward, pack_mlp)

_ACT_IDS = {"relu": ACT_RELU, "tanh": ACT_TANH}
_ACT_NAMES = {v: k for k, v in _ACT_IDS.items()}

LOGSTD_CLAMP = (-20.0, 2.0)
STD_FLOOR = 1e-6
_SQUASH_EPS = 1e-6
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    hidden_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer dims must be >= 1")
        if self.hidden_activation not in _ACT_IDS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


def param_count(spec: MlpSpec) -> int:
    """Deployed parameter count: dense chain through the hidden stack to a
    single output head (a policy's stochastic std head is excluded)."""
    dims = spec.dims
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


def inference_flops(spec: MlpSpec) -> int:
    """Single-pass multiply-add FLOPs (2 per MAC), activations excluded."""
    dims = spec.dims
    return 2 * sum(i * o for i, o in zip(dims[:-1], dims[1:]))


def estimated_time_us(flops: int, throughput_mflops: float = 800.0) -> float:
    """Theoretical single-inference latency on a throughput-limited DSP."""
    if throughput_mflops <= 0.0:
        raise ValueError("throughput must be > 0")
    return flops / throughput_mflops


# ---------------------------------------------------------------------------
# dense-stack primitives shared by Mlp / policy / critic
# ---------------------------------------------------------------------------


def _init_layers(dims, rng):
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return weights, biases


def _act(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else np.tanh(z)


def _act_grad_from_output(h, activation):
    # relu mask stays boolean: multiplying by it avoids an astype pass
    return h > 0.0 if activation == "relu" else 1.0 - h * h


def _stack_forward(weights, biases, x, activation, activate_last):
    """Returns (output, per-layer inputs list). Inputs are 2-D internally."""
    h = x
    inputs = []
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        inputs.append(h)
        z = h @ w
        z += b
        if i < last or activate_last:
            if activation == "relu":
                np.maximum(z, 0.0, out=z)
            else:
                np.tanh(z, out=z)
        h = z
    return h, inputs


def _stack_backward(weights, inputs, output, grad_out, activation, activate_last):
    """Gradients for a _stack_forward pass.

    `inputs` are the cached layer inputs, `output` the (possibly activated)
    final output.  Returns (weight grads, bias grads, input grad).
    grad_out is never mutated.
    """
    g_w = [None] * len(weights)
    g_b = [None] * len(weights)
    grad = grad_out
    owned = False  # whether grad is a private buffer we may update in place
    h_out = output
    last = len(weights) - 1
    for i in range(last, -1, -1):
        if i < last or activate_last:
            mask = _act_grad_from_output(h_out, activation)
            if owned:
                np.multiply(grad, mask, out=grad)
            else:
                grad = grad * mask
                owned = True
        g_w[i] = inputs[i].T @ grad
        g_b[i] = grad.sum(axis=0)
        grad = grad @ weights[i].T
        owned = True
        if i > 0:
            h_out = inputs[i]  # post-activation output of layer i-1
    return g_w, g_b, grad


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


class Mlp:
    """Plain dense network: hidden activations per spec, linear output."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        rng = rng or np.random.default_rng(0)
        self.weights, self.biases = _init_layers(spec.dims, rng)

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, x):
        """Returns (output, cache); accepts a single vector or a batch."""
        xb, single = _as_batch(x)
        if xb.shape[1] != self.spec.input_dim:
            raise ValueError(
                f"input dim {xb.shape[1]} != spec input_dim {self.spec.input_dim}")
        y, inputs = _stack_forward(self.weights, self.biases, xb,
                                   self.spec.hidden_activation, activate_last=False)
        cache = (inputs, y, single)
        return (y[0] if single else y), cache

    def backward(self, cache, grad_out):
        """Exact reverse-mode gradients; returns (param grads, input grad)."""
        inputs, y, single = cache
        grad_out = np.asarray(grad_out, dtype=float)
        if single:
            grad_out = grad_out[None, :]
        if grad_out.shape != y.shape:
            raise ValueError(f"grad shape {grad_out.shape} != output shape {y.shape}")
        g_w, g_b, g_in = _stack_backward(self.weights, inputs, y, grad_out,
                                         self.spec.hidden_activation,
                                         activate_last=False)
        grads = []
        for gw, gb in zip(g_w, g_b):
            grads.append(gw)
            grads.append(gb)
        return grads, (g_in[0] if single else g_in)

    def packed(self):
        """(flat, dims) arrays for the accelerated single-pass kernel."""
        return pack_mlp(self.weights, self.biases)


def forward(net: Mlp, x):
    return net.forward(x)


def backward(net: Mlp, cache, grad_out):
    return net.backward(cache, grad_out)


class GaussianPolicyNet:
    """Shared trunk with mean and std heads; tanh-squashed Gaussian actions.

    The std path is softplus of the (clamped) head output, floored at
    STD_FLOOR, so it is positive by construction.
    """

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None):
        if not spec.hidden:
            raise ValueError("policy trunk needs at least one hidden layer")
        self.spec = spec
        rng = rng or np.random.default_rng(0)
        trunk_dims = (spec.input_dim, *spec.hidden)
        self.trunk_w, self.trunk_b = _init_layers(trunk_dims, rng)
        head_dims = (spec.hidden[-1], spec.output_dim)
        (self.mean_w,), (self.mean_b,) = _init_layers(head_dims, rng)
        (self.std_w,), (self.std_b,) = _init_layers(head_dims, rng)

    def parameters(self):
        out = []
        for w, b in zip(self.trunk_w, self.trunk_b):
            out.append(w)
            out.append(b)
        out += [self.mean_w, self.mean_b, self.std_w, self.std_b]
        return out

    def deployed_param_count(self) -> int:
        return param_count(self.spec)

    def forward(self, x):
        """Returns (mu, std, cache)."""
        xb, single = _as_batch(x)
        h, inputs = _stack_forward(self.trunk_w, self.trunk_b, xb,
                                   self.spec.hidden_activation, activate_last=True)
        mu = h @ self.mean_w + self.mean_b
        raw = h @ self.std_w + self.std_b
        raw_clamped = np.clip(raw, *LOGSTD_CLAMP)
        soft = np.logaddexp(0.0, raw_clamped)
        std = np.maximum(soft, STD_FLOOR)
        cache = (inputs, h, raw, raw_clamped, soft, single)
        return (mu[0], std[0], cache) if single else (mu, std, cache)

    def backward(self, cache, d_mu, d_std):
        """Gradients of a scalar loss given dL/dmu and dL/dstd."""
        inputs, h, raw, raw_clamped, soft, single = cache
        d_mu = np.asarray(d_mu, dtype=float)
        d_std = np.asarray(d_std, dtype=float)
        if single:
            d_mu, d_std = d_mu[None, :], d_std[None, :]
        # std = max(softplus(clip(raw)), floor): zero slope where clamped/floored
        slope = 1.0 / (1.0 + np.exp(-raw_clamped))
        slope = slope * (raw > LOGSTD_CLAMP[0]) * (raw < LOGSTD_CLAMP[1])
        slope = slope * (soft > STD_FLOOR)
        d_raw = d_std * slope
        g_mean_w = h.T @ d_mu
        g_mean_b = d_mu.sum(axis=0)
        g_std_w = h.T @ d_raw
        g_std_b = d_raw.sum(axis=0)
        d_h = d_mu @ self.mean_w.T + d_raw @ self.std_w.T
        g_tw, g_tb, _ = _stack_backward(self.trunk_w, inputs, h, d_h,
                                        self.spec.hidden_activation,
                                        activate_last=True)
        grads = []
        for gw, gb in zip(g_tw, g_tb):
            grads.append(gw)
            grads.append(gb)
        grads += [g_mean_w, g_mean_b, g_std_w, g_std_b]
        return grads

    def sample(self, x, rng: np.random.Generator):
        """Reparameterized squashed sample: (action, log_prob, eps, cache, mu, std)."""
        mu, std, cache = self.forward(x)
        eps = rng.standard_normal(mu.shape)
        u = mu + std * eps
        a = np.tanh(u)
        logp = self.log_prob_parts(a, std, eps)
        return a, logp, eps, cache, mu, std

    @staticmethod
    def log_prob_parts(a, std, eps):
        """Log-density of the squashed sample, summed over action dims."""
        gauss = -0.5 * eps**2 - np.log(std) - 0.5 * _LOG_2PI
        squash = -np.log(1.0 - a**2 + _SQUASH_EPS)
        return (gauss + squash).sum(axis=-1)

    def log_prob(self, x, a):
        """Log-probability of given squashed actions under the current policy."""
        mu, std, _ = self.forward(x)
        a = np.asarray(a, dtype=float)
        u = np.arctanh(np.clip(a, -1.0 + 1e-12, 1.0 - 1e-12))
        gauss = -0.5 * ((u - mu) / std) ** 2 - np.log(std) - 0.5 * _LOG_2PI
        squash = -np.log(1.0 - a**2 + _SQUASH_EPS)
        return (gauss + squash).sum(axis=-1)

    def deterministic(self, x):
        mu, _, _ = self.forward(x)
        return np.tanh(mu)

    def packed_mean(self):
        """Packed trunk+mean chain for the accelerated kernel (pre-tanh)."""
        return pack_mlp(self.trunk_w + [self.mean_w], self.trunk_b + [self.mean_b])


class CriticNet:
    """Q(s, a) with separate state/action input paths fused by dense layers.

    Default widths (64-wide paths, 64/64 fusion) track the actor trunk's
    later layers and give the critic the same total capacity as the actor
    (13.1k vs 13.4k parameters).
    """

    def __init__(self, state_dim: int, action_dim: int, path_width: int = 64,
                 fusion_hidden: tuple[int, ...] = (64, 64),
                 activation: str = "relu",
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.activation = activation
        self.state_dim = state_dim
        self.action_dim = action_dim
        (self.ws,), (self.bs,) = _init_layers((state_dim, path_width), rng)
        (self.wa,), (self.ba,) = _init_layers((action_dim, path_width), rng)
        fusion_dims = (2 * path_width, *fusion_hidden, 1)
        self.fw, self.fb = _init_layers(fusion_dims, rng)

    def parameters(self):
        out = [self.ws, self.bs, self.wa, self.ba]
        for w, b in zip(self.fw, self.fb):
            out.append(w)
            out.append(b)
        return out

    def forward(self, s, a):
        """Returns (q (N,), cache)."""
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        hs = _act(s @ self.ws + self.bs, self.activation)
        ha = _act(a @ self.wa + self.ba, self.activation)
        h = np.concatenate([hs, ha], axis=1)
        q, inputs = _stack_forward(self.fw, self.fb, h, self.activation,
                                   activate_last=False)
        cache = (s, a, hs, ha, inputs, q)
        return q[:, 0], cache

    def backward(self, cache, dq):
        """Gradients given dL/dq; returns (param grads, ds, da)."""
        s, a, hs, ha, inputs, q = cache
        dq = np.asarray(dq, dtype=float)[:, None]
        g_fw, g_fb, d_h = _stack_backward(self.fw, inputs, q, dq,
                                          self.activation, activate_last=False)
        width = hs.shape[1]
        d_hs = d_h[:, :width] * _act_grad_from_output(hs, self.activation)
        d_ha = d_h[:, width:] * _act_grad_from_output(ha, self.activation)
        g_ws = s.T @ d_hs
        g_bs = d_hs.sum(axis=0)
        g_wa = a.T @ d_ha
        g_ba = d_ha.sum(axis=0)
        grads = [g_ws, g_bs, g_wa, g_ba]
        for gw, gb in zip(g_fw, g_fb):
            grads.append(gw)
            grads.append(gb)
        return grads, d_hs @ self.ws.T, d_ha @ self.wa.T

    def action_grad(self, cache, dq):
        """dL/da only (no parameter gradients): the actor-update path."""
        _, _, _, ha, inputs, q = cache
        grad = np.asarray(dq, dtype=float)[:, None]
        h_out = q
        for i in range(len(self.fw) - 1, -1, -1):
            if i < len(self.fw) - 1:
                mask = _act_grad_from_output(h_out, self.activation)
                np.multiply(grad, mask, out=grad)
            grad = grad @ self.fw[i].T
            h_out = inputs[i]
        d_ha = grad[:, ha.shape[1]:] * _act_grad_from_output(ha, self.activation)
        return d_ha @ self.wa.T


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("parameter/gradient count mismatch")
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = np.asarray(g, dtype=float)
            if p.flags["C_CONTIGUOUS"] and g.flags["C_CONTIGUOUS"]:
                adam_update(p.reshape(-1), g.reshape(-1), m.reshape(-1),
                            v.reshape(-1), self.lr, self.beta1, self.beta2,
                            self.eps, correction1, correction2)
            else:
                adam_update_numpy(p, g, m, v, self.lr, self.beta1, self.beta2,
                                  self.eps, correction1, correction2)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little endian):
#   magic "IVDL" | version u16 | kind u8 | activation u8 | dtype u8
#   | n_dims u32 | dims u32[n_dims]
# followed by each layer's weight matrix (row-major) then bias vector.
# kind 0 = plain MLP over the dims chain; kind 1 = Gaussian policy whose
# trunk runs dims[0..-2] with mean and std heads dims[-2] -> dims[-1]
# appended in that order.  dtype 0 = f32 (default), 1 = f64.
# ---------------------------------------------------------------------------

MAGIC = b"IVDL"
FORMAT_VERSION = 1
_KIND_MLP = 0
_KIND_POLICY = 1
_DTYPES = {0: "<f4", 1: "<f8"}


class CheckpointError(Exception):
    pass


class MalformedCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _net_layers(net):
    if isinstance(net, Mlp):
        return _KIND_MLP, list(zip(net.weights, net.biases))
    if isinstance(net, GaussianPolicyNet):
        layers = list(zip(net.trunk_w, net.trunk_b))
        layers.append((net.mean_w, net.mean_b))
        layers.append((net.std_w, net.std_b))
        return _KIND_POLICY, layers
    raise TypeError(f"cannot checkpoint object of type {type(net).__name__}")


def save_checkpoint(net, path, dtype: str = "f32") -> None:
    """Write the documented portable binary; default f32 storage."""
    dtype_id = {"f32": 0, "f64": 1}.get(dtype)
    if dtype_id is None:
        raise ValueError("dtype must be 'f32' or 'f64'")
    kind, layers = _net_layers(net)
    spec = net.spec
    dims = spec.dims
    act_id = _ACT_IDS[spec.hidden_activation]
    parts = [MAGIC, struct.pack("<HBBBI", FORMAT_VERSION, kind, act_id,
                                dtype_id, len(dims))]
    parts.append(struct.pack(f"<{len(dims)}I", *dims))
    np_dtype = _DTYPES[dtype_id]
    for w, b in layers:
        parts.append(np.ascontiguousarray(w, dtype=np_dtype).tobytes())
        parts.append(np.ascontiguousarray(b, dtype=np_dtype).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path, expect_spec: MlpSpec | None = None):
    """Read a checkpoint back into an Mlp or GaussianPolicyNet.

    Raises MalformedCheckpointError / CheckpointVersionError /
    ShapeMismatchError for the respective failure modes.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise MalformedCheckpointError(f"{path}: bad magic bytes")
    try:
        version, kind, act_id, dtype_id, n_dims = struct.unpack_from("<HBBBI", blob, 4)
    except struct.error as exc:
        raise MalformedCheckpointError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if kind not in (_KIND_MLP, _KIND_POLICY) or act_id not in _ACT_NAMES \
            or dtype_id not in _DTYPES or n_dims < 2:
        raise MalformedCheckpointError(f"{path}: invalid header fields")
    off = 4 + struct.calcsize("<HBBBI")
    try:
        dims = struct.unpack_from(f"<{n_dims}I", blob, off)
    except struct.error as exc:
        raise MalformedCheckpointError(f"{path}: truncated dims") from exc
    off += 4 * n_dims

    spec = MlpSpec(dims[0], tuple(dims[1:-1]), dims[-1],
                   hidden_activation=_ACT_NAMES[act_id])
    if expect_spec is not None and spec != expect_spec:
        raise ShapeMismatchError(
            f"{path}: checkpoint spec {spec.dims} does not match "
            f"expected {expect_spec.dims}")

    if kind == _KIND_MLP:
        net = Mlp(spec)
        layer_dims = list(zip(spec.dims[:-1], spec.dims[1:]))
    else:
        if not spec.hidden:
            raise MalformedCheckpointError(f"{path}: policy without hidden layers")
        net = GaussianPolicyNet(spec)
        trunk = list(zip(spec.dims[:-2], spec.dims[1:-1]))
        head = (spec.dims[-2], spec.dims[-1])
        layer_dims = trunk + [head, head]

    np_dtype = np.dtype(_DTYPES[dtype_id])
    weights, biases = [], []
    for d_in, d_out in layer_dims:
        n_w = d_in * d_out
        need = (n_w + d_out) * np_dtype.itemsize
        if off + need > len(blob):
            raise MalformedCheckpointError(f"{path}: truncated parameter data")
        w = np.frombuffer(blob, dtype=np_dtype, count=n_w, offset=off)
        off += n_w * np_dtype.itemsize
        b = np.frombuffer(blob, dtype=np_dtype, count=d_out, offset=off)
        off += d_out * np_dtype.itemsize
        weights.append(w.astype(np.float64).reshape(d_in, d_out))
        biases.append(b.astype(np.float64))
    if off != len(blob):
        raise MalformedCheckpointError(f"{path}: trailing bytes after parameters")

    if kind == _KIND_MLP:
        net.weights, net.biases = weights, biases
    else:
        net.trunk_w, net.trunk_b = weights[:-2], biases[:-2]
        net.mean_w, net.mean_b = weights[-2], biases[-2]
        net.std_w, net.std_b = weights[-1], biases[-1]
    return net
