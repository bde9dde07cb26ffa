"""Reference-frame transforms and waveform-quality metrics.

Conventions used throughout the package:

* Park transform is amplitude-invariant (peak-preserving) with the q axis
  lagging: a balanced cosine set of peak U, sampled at theta = omega*t
  aligned with the phase-a peak, maps to (d, q) = (U, 0).
* THD and unbalance operate on windows spanning an integer number (>= 2)
  of fundamental periods; harmonic content is extracted by direct DFT
  evaluation at the harmonic bins (Goertzel), never a full FFT.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import goertzel_mags

_TWO_THIRDS = 2.0 / 3.0
_SHIFT = 2.0 * np.pi / 3.0


@dataclass
class AbcFrame:
    """Instantaneous three-phase quantities (scalars or equal-length arrays)."""

    a: float | np.ndarray
    b: float | np.ndarray
    c: float | np.ndarray


@dataclass
class DqFrame:
    """Synchronous-frame components at electrical angle theta (radians)."""

    d: float | np.ndarray
    q: float | np.ndarray
    theta: float | np.ndarray


def park_arrays(a, b, c, theta):
    """abc -> (d, q) at angle theta; amplitude-invariant, q lagging."""
    cos_t = np.cos(theta)
    cos_b = np.cos(theta - _SHIFT)
    cos_c = np.cos(theta + _SHIFT)
    sin_t = np.sin(theta)
    sin_b = np.sin(theta - _SHIFT)
    sin_c = np.sin(theta + _SHIFT)
    d = _TWO_THIRDS * (a * cos_t + b * cos_b + c * cos_c)
    q = -_TWO_THIRDS * (a * sin_t + b * sin_b + c * sin_c)
    return d, q


def inverse_park_arrays(d, q, theta):
    """(d, q) -> abc at angle theta; exact inverse of :func:`park_arrays`."""
    a = d * np.cos(theta) - q * np.sin(theta)
    b = d * np.cos(theta - _SHIFT) - q * np.sin(theta - _SHIFT)
    c = d * np.cos(theta + _SHIFT) - q * np.sin(theta + _SHIFT)
    return a, b, c


def park(abc: AbcFrame, theta) -> DqFrame:
    d, q = park_arrays(abc.a, abc.b, abc.c, theta)
    return DqFrame(d=d, q=q, theta=theta)


def inverse_park(dq: DqFrame, theta=None) -> AbcFrame:
    if theta is None:
        theta = dq.theta
    a, b, c = inverse_park_arrays(dq.d, dq.q, theta)
    return AbcFrame(a=a, b=b, c=c)


def _window_periods(n_samples: int, fundamental_hz: float, sample_hz: float) -> int:
    """Number of fundamental periods in the window; raises unless it is an
    integer count >= 2 (to within 1e-9 relative)."""
    periods = n_samples * fundamental_hz / sample_hz
    rounded = round(periods)
    if rounded < 2 or abs(periods - rounded) > 1e-9 * max(1.0, periods):
        raise ValueError(
            f"window of {n_samples} samples spans {periods:.6g} fundamental "
            "periods; an integer count >= 2 is required"
        )
    return rounded


def harmonic_amplitudes(samples, fundamental_hz, sample_hz, max_harmonic):
    """Single-sided amplitudes of harmonics 1..max_harmonic of the window."""
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if sample_hz <= 2.0 * max_harmonic * fundamental_hz:
        raise ValueError(
            f"sample rate {sample_hz} Hz cannot resolve harmonic {max_harmonic} "
            f"of {fundamental_hz} Hz"
        )
    periods = _window_periods(samples.shape[0], fundamental_hz, sample_hz)
    bins = np.arange(1, max_harmonic + 1, dtype=np.int64) * periods
    return goertzel_mags(samples, bins)


def thd(samples, fundamental_hz, sample_hz, max_harmonic=50):
    """Total harmonic distortion in percent.

    100 * sqrt(sum A_h^2, h=2..max_harmonic) / A_1, with A_h the DFT
    amplitude at harmonic h.  The window must span an integer number
    (>= 2) of fundamental periods.
    """
    amps = harmonic_amplitudes(samples, fundamental_hz, sample_hz, max_harmonic)
    a1 = amps[0]
    floor = 1e-12 * max(1.0, float(np.max(np.abs(samples))) if len(samples) else 1.0)
    if a1 <= floor:
        raise ValueError("fundamental magnitude is zero; THD undefined")
    return 100.0 * float(np.sqrt(np.sum(amps[1:] ** 2))) / float(a1)


def _fundamental_phasor(samples: np.ndarray, bin_k: int) -> complex:
    """Cosine-referenced complex phasor of the window at integer bin k."""
    n = samples.shape[0]
    idx = np.arange(n)
    return 2.0 / n * complex(np.sum(samples * np.exp(-2j * np.pi * bin_k * idx / n)))


def unbalance(a, b, c, fundamental_hz, sample_hz):
    """Voltage/current unbalance in percent: 100 * |negative| / |positive|
    sequence fundamental phasor, via symmetrical components."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    if not (a.shape == b.shape == c.shape):
        raise ValueError("phase windows must have equal length")
    periods = _window_periods(a.shape[0], fundamental_hz, sample_hz)
    pa = _fundamental_phasor(a, periods)
    pb = _fundamental_phasor(b, periods)
    pc = _fundamental_phasor(c, periods)
    alpha = np.exp(2j * np.pi / 3.0)
    pos = (pa + alpha * pb + alpha**2 * pc) / 3.0
    neg = (pa + alpha**2 * pb + alpha * pc) / 3.0
    scale = max(abs(pa), abs(pb), abs(pc), 1.0)
    if abs(pos) <= 1e-12 * scale:
        raise ValueError("positive-sequence magnitude is zero; unbalance undefined")
    return 100.0 * abs(neg) / abs(pos)
