"""Numerical backend selection and hot-loop kernels.

The simulation spends nearly all of its time in three inner loops: the
RK4 plant integrator (called once per control period, ~10^5..10^6 times
per training run), single-observation MLP inference inside closed-loop
rollouts, and Goertzel harmonic extraction for the sliding THD window.
Each kernel exists in two flavours:

* a numba ``@njit`` build (default whenever numba is importable), and
* a pure-numpy fallback.

Selection is controlled by the ``IVDL_BACKEND`` environment variable:
``auto`` (default), ``numba`` (fail if numba missing) or ``numpy``.
Both paths compute the same quantities; ``benchmarks/backend_bench.py``
compares their throughput.
"""

from __future__ import annotations

import ctypes
import math
import os
import sys

import numpy as np

# Batch-sized float64 temporaries (~100-500 KB) straddle glibc's default
# mmap threshold, so a training step otherwise spends most of its time in
# mmap/munmap page churn.  Raising the thresholds keeps them on the heap.
if sys.platform.startswith("linux") and os.environ.get("IVDL_NO_MALLOPT") != "1":
    try:
        _libc = ctypes.CDLL("libc.so.6")
        _libc.mallopt(-3, 1 << 26)  # M_MMAP_THRESHOLD
        _libc.mallopt(-1, 1 << 26)  # M_TRIM_THRESHOLD
    except OSError:  # pragma: no cover - non-glibc platforms
        pass

_VALID = ("auto", "numba", "numpy")
_requested = os.environ.get("IVDL_BACKEND", "auto").strip().lower() or "auto"
if _requested not in _VALID:
    raise RuntimeError(
        f"IVDL_BACKEND={_requested!r} not understood; expected one of {_VALID}"
    )

if _requested == "numpy":
    _numba = None
else:
    try:
        import numba as _numba
    except ImportError:
        if _requested == "numba":
            raise
        _numba = None

USE_NUMBA = _numba is not None
BACKEND_NAME = "numba" if USE_NUMBA else "numpy"

ACT_RELU = 0
ACT_TANH = 1


# ---------------------------------------------------------------------------
# RK4 plant step
#
# State layout: [i_ld, i_lq, u_bus_d, u_bus_q, i_load_d, i_load_q].
# Resistive load (l_load == 0): load current is algebraic u_bus / r and the
# trailing state slots are inert.  RL load: load current is a state.
# ---------------------------------------------------------------------------


def _rk4_step_impl(x, u_d, u_q, r_load, l_load, l_f, m_cf, omega, dt, substeps):
    i_ld = x[0]
    i_lq = x[1]
    ud = x[2]
    uq = x[3]
    io_d = x[4]
    io_q = x[5]
    h = dt / substeps
    for _ in range(substeps):
        # k1..k4 evaluated inline; scalars keep both backends allocation-free
        a_ild, a_ilq, a_ud, a_uq, a_iod, a_ioq = _deriv(
            i_ld, i_lq, ud, uq, io_d, io_q, u_d, u_q, r_load, l_load, l_f, m_cf, omega
        )
        b_ild, b_ilq, b_ud, b_uq, b_iod, b_ioq = _deriv(
            i_ld + 0.5 * h * a_ild,
            i_lq + 0.5 * h * a_ilq,
            ud + 0.5 * h * a_ud,
            uq + 0.5 * h * a_uq,
            io_d + 0.5 * h * a_iod,
            io_q + 0.5 * h * a_ioq,
            u_d, u_q, r_load, l_load, l_f, m_cf, omega,
        )
        c_ild, c_ilq, c_ud, c_uq, c_iod, c_ioq = _deriv(
            i_ld + 0.5 * h * b_ild,
            i_lq + 0.5 * h * b_ilq,
            ud + 0.5 * h * b_ud,
            uq + 0.5 * h * b_uq,
            io_d + 0.5 * h * b_iod,
            io_q + 0.5 * h * b_ioq,
            u_d, u_q, r_load, l_load, l_f, m_cf, omega,
        )
        d_ild, d_ilq, d_ud, d_uq, d_iod, d_ioq = _deriv(
            i_ld + h * c_ild,
            i_lq + h * c_ilq,
            ud + h * c_ud,
            uq + h * c_uq,
            io_d + h * c_iod,
            io_q + h * c_ioq,
            u_d, u_q, r_load, l_load, l_f, m_cf, omega,
        )
        s = h / 6.0
        i_ld += s * (a_ild + 2.0 * b_ild + 2.0 * c_ild + d_ild)
        i_lq += s * (a_ilq + 2.0 * b_ilq + 2.0 * c_ilq + d_ilq)
        ud += s * (a_ud + 2.0 * b_ud + 2.0 * c_ud + d_ud)
        uq += s * (a_uq + 2.0 * b_uq + 2.0 * c_uq + d_uq)
        io_d += s * (a_iod + 2.0 * b_iod + 2.0 * c_iod + d_iod)
        io_q += s * (a_ioq + 2.0 * b_ioq + 2.0 * c_ioq + d_ioq)
    out = np.empty(6)
    out[0] = i_ld
    out[1] = i_lq
    out[2] = ud
    out[3] = uq
    out[4] = io_d
    out[5] = io_q
    return out


def _deriv_impl(i_ld, i_lq, ud, uq, io_d, io_q, u_d, u_q, r_load, l_load, l_f, m_cf, omega):
    if l_load > 0.0:
        o_d = io_d
        o_q = io_q
        dio_d = (ud - r_load * io_d + omega * l_load * io_q) / l_load
        dio_q = (uq - r_load * io_q - omega * l_load * io_d) / l_load
    else:
        o_d = ud / r_load
        o_q = uq / r_load
        dio_d = 0.0
        dio_q = 0.0
    d_ild = (u_d - ud + omega * l_f * i_lq) / l_f
    d_ilq = (u_q - uq - omega * l_f * i_ld) / l_f
    d_ud = (i_ld - o_d + omega * m_cf * uq) / m_cf
    d_uq = (i_lq - o_q - omega * m_cf * ud) / m_cf
    return d_ild, d_ilq, d_ud, d_uq, dio_d, dio_q


# ---------------------------------------------------------------------------
# Packed MLP forward (single observation)
#
# Layout: dims = [d0, d1, ..., dk]; flat stores, per layer, the (d_in x d_out)
# weight matrix row-major followed by the d_out bias.  Hidden activations per
# act_id; the final layer is linear.
# ---------------------------------------------------------------------------


def _mlp_forward_impl(flat, dims, x, act_id):
    h = x.astype(np.float64)
    off = 0
    n_layers = dims.shape[0] - 1
    for layer in range(n_layers):
        d_in = dims[layer]
        d_out = dims[layer + 1]
        w = flat[off:off + d_in * d_out].reshape(d_in, d_out)
        off += d_in * d_out
        b = flat[off:off + d_out]
        off += d_out
        h = np.dot(h, w) + b
        if layer < n_layers - 1:
            if act_id == ACT_RELU:
                h = np.maximum(h, 0.0)
            else:
                h = np.tanh(h)
    return h


# ---------------------------------------------------------------------------
# Goertzel harmonic magnitudes
#
# Returns, for each requested integer DFT bin k, the single-sided amplitude
# (2/N)*|X_k| of the length-N window.
# ---------------------------------------------------------------------------


def _goertzel_impl(samples, bins):
    n = samples.shape[0]
    out = np.empty(bins.shape[0])
    for j in range(bins.shape[0]):
        k = bins[j]
        w = 2.0 * math.cos(2.0 * math.pi * k / n)
        s1 = 0.0
        s2 = 0.0
        for i in range(n):
            s0 = samples[i] + w * s1 - s2
            s2 = s1
            s1 = s0
        power = s1 * s1 + s2 * s2 - w * s1 * s2
        if power < 0.0:
            power = 0.0
        out[j] = 2.0 / n * math.sqrt(power)
    return out


def _goertzel_numpy(samples, bins):
    # Vectorized direct DFT at the requested bins: same quantity, no FFT.
    n = samples.shape[0]
    k = np.asarray(bins, dtype=np.float64)[:, None]
    idx = np.arange(n, dtype=np.float64)[None, :]
    basis = np.exp(-2j * np.pi * k * idx / n)
    return 2.0 / n * np.abs(basis @ samples)


# ---------------------------------------------------------------------------
# Fused Adam update over one flattened parameter tensor
# ---------------------------------------------------------------------------


def _adam_update_impl(p, g, m, v, lr, beta1, beta2, eps, corr1, corr2):
    for i in range(p.shape[0]):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / corr1) / (math.sqrt(vi / corr2) + eps)


def _adam_update_numpy(p, g, m, v, lr, beta1, beta2, eps, corr1, corr2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)


if USE_NUMBA:
    _deriv = _numba.njit(inline="always")(_deriv_impl)
    rk4_step = _numba.njit(cache=True)(_rk4_step_impl)
    mlp_forward = _numba.njit(cache=True)(_mlp_forward_impl)
    goertzel_mags = _numba.njit(cache=True)(_goertzel_impl)
    adam_update = _numba.njit(cache=True)(_adam_update_impl)
else:
    _deriv = _deriv_impl
    rk4_step = _rk4_step_impl
    mlp_forward = _mlp_forward_impl
    goertzel_mags = _goertzel_numpy
    adam_update = _adam_update_numpy

# Un-jitted references kept for the backend benchmark and equivalence tests.
rk4_step_numpy = _rk4_step_impl
mlp_forward_numpy = _mlp_forward_impl
goertzel_mags_numpy = _goertzel_numpy
adam_update_numpy = _adam_update_numpy


def pack_mlp(weights, biases):
    """Flatten (W, b) layer lists into the kernel layout.

    Returns (flat, dims) float64/int64 arrays.
    """
    dims = [weights[0].shape[0]]
    chunks = []
    for w, b in zip(weights, biases):
        if w.shape[0] != dims[-1]:
            raise ValueError("layer shapes do not chain")
        dims.append(w.shape[1])
        chunks.append(np.ascontiguousarray(w, dtype=np.float64).ravel())
        chunks.append(np.ascontiguousarray(b, dtype=np.float64).ravel())
    return np.concatenate(chunks), np.asarray(dims, dtype=np.int64)
