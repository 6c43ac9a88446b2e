"""Gabor kernel synthesis and analytic parameter gradients.

A kernel is the real Gabor function

    G(x, y) = a * exp(-(xh^2 + gamma*yh^2) / (2*sigma^2)) * cos(2*pi*xh/lambda + psi)

evaluated on the integer grid x, y in {1, ..., k}, where (xh, yh) are the
coordinates rotated by ``theta`` around the center (x0, y0):

    xh =  (x - x0)*cos(theta) + (y - y0)*sin(theta)
    yh = -(x - x0)*sin(theta) + (y - y0)*cos(theta)

Kernel entry ``[x-1, y-1]`` holds G(x, y).  All math here runs in float64;
callers may down-convert.

``|sigma|`` and ``|lambda|`` are floored at ``CLAMP_FLOOR`` inside synthesis
(sign preserved) so that arbitrary unconstrained parameter values never
produce non-finite kernels; the gradient through the clamp is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DimensionError, InvalidParameterError

# Declared parameter order; checkpoints and flat-array layouts follow it.
PARAM_FIELDS = ("lam", "theta", "psi", "sigma", "gamma", "a", "x0", "y0")
AMPLITUDE_INDEX = PARAM_FIELDS.index("a")

CLAMP_FLOOR = 1e-3


@dataclass
class GaborParams:
    """The 8 scalar parameters of one Gabor kernel."""

    lam: float      # wavelength of the sinusoid (grid units)
    theta: float    # orientation (radians)
    psi: float      # phase offset (radians)
    sigma: float    # Gaussian envelope std (grid units)
    gamma: float    # spatial aspect ratio
    a: float        # amplitude (weight units)
    x0: float       # center x (grid units)
    y0: float       # center y (grid units)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in PARAM_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "GaborParams":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (8,):
            raise DimensionError(f"expected 8 parameters, got shape {arr.shape}")
        return cls(*(float(v) for v in arr))


@dataclass
class GaborParamGrads:
    """Gradient of a scalar loss w.r.t. each GaborParams field."""

    lam: float
    theta: float
    psi: float
    sigma: float
    gamma: float
    a: float
    x0: float
    y0: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in PARAM_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "GaborParamGrads":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (8,):
            raise DimensionError(f"expected 8 gradients, got shape {arr.shape}")
        return cls(*(float(v) for v in arr))


def _check_params(p8: np.ndarray) -> None:
    if not np.all(np.isfinite(p8)):
        raise InvalidParameterError("Gabor parameters must be finite")


def _check_k(k: int) -> None:
    if int(k) != k or k < 1:
        raise DimensionError(f"kernel side length must be an integer >= 1, got {k!r}")


def _clamp(v: np.ndarray) -> np.ndarray:
    """Floor |v| at CLAMP_FLOOR, keeping the sign (sign of +-0 maps to +)."""
    return np.where(np.abs(v) < CLAMP_FLOOR, np.copysign(CLAMP_FLOOR, v), v)


def _pieces(p8: np.ndarray, k: int):
    """Shared forward quantities for values and gradients.

    ``p8`` has shape (..., 8); every returned array broadcasts to (..., k, k)
    except the per-kernel scalars which stay (..., 1, 1).
    """
    lam, theta, psi, sigma, gamma, a, x0, y0 = (
        p8[..., i, None, None] for i in range(8)
    )
    x = np.arange(1, k + 1, dtype=np.float64)[:, None]
    y = np.arange(1, k + 1, dtype=np.float64)[None, :]

    lam_c = _clamp(lam)
    sig_c = _clamp(sigma)
    ct = np.cos(theta)
    st = np.sin(theta)
    u = x - x0
    v = y - y0
    xh = u * ct + v * st
    yh = -u * st + v * ct
    env = np.exp(-(xh * xh + gamma * yh * yh) / (2.0 * sig_c * sig_c))
    phase = 2.0 * np.pi * xh / lam_c + psi
    carrier = np.cos(phase)
    return lam_c, sig_c, gamma, a, ct, st, xh, yh, env, phase, carrier


def synth_bank(params: np.ndarray, k: int) -> np.ndarray:
    """Synthesize kernels for a whole parameter array.

    ``params`` has shape (..., 8) in PARAM_FIELDS order; returns (..., k, k).
    """
    p8 = np.asarray(params, dtype=np.float64)
    if p8.shape[-1] != 8:
        raise DimensionError(f"last axis must hold 8 parameters, got {p8.shape}")
    _check_k(k)
    _check_params(p8)
    _, _, _, a, _, _, _, _, env, _, carrier = _pieces(p8, k)
    return a * (env * carrier)


def synth_kernel(params: GaborParams, k: int) -> np.ndarray:
    """Synthesize one k x k kernel; entry [x-1, y-1] is G(x, y)."""
    return synth_bank(params.as_array(), k)


def param_grad_bank(params: np.ndarray, k: int, upstream: np.ndarray) -> np.ndarray:
    """Chain upstream kernel gradients into parameter gradients, vectorized.

    ``params`` is (..., 8), ``upstream`` is (..., k, k); the result is (..., 8)
    with entry p equal to sum_{x,y} upstream(x,y) * dG(x,y)/dp.
    """
    p8 = np.asarray(params, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if p8.shape[-1] != 8:
        raise DimensionError(f"last axis must hold 8 parameters, got {p8.shape}")
    _check_k(k)
    if up.shape != p8.shape[:-1] + (k, k):
        raise DimensionError(
            f"upstream shape {up.shape} does not match params {p8.shape} with k={k}"
        )
    _check_params(p8)

    lam_c, sig_c, gamma, a, ct, st, xh, yh, env, phase, carrier = _pieces(p8, k)
    sin_ph = np.sin(phase)
    inv_s2 = 1.0 / (sig_c * sig_c)
    two_pi_lam = 2.0 * np.pi / lam_c
    aE = a * env

    # Zero gradient through the clamp on sigma/lambda.
    lam_ok = (np.abs(p8[..., 0, None, None]) >= CLAMP_FLOOR).astype(np.float64)
    sig_ok = (np.abs(p8[..., 3, None, None]) >= CLAMP_FLOOR).astype(np.float64)

    d_a = env * carrier
    d_psi = -aE * sin_ph
    d_lam = aE * sin_ph * (2.0 * np.pi) * xh / (lam_c * lam_c) * lam_ok
    d_sig = aE * carrier * (xh * xh + gamma * yh * yh) / (sig_c ** 3) * sig_ok
    d_gam = -aE * carrier * yh * yh * (0.5 * inv_s2)
    d_theta = aE * yh * (xh * carrier * (gamma - 1.0) * inv_s2 - two_pi_lam * sin_ph)
    radial = xh * carrier * inv_s2 + two_pi_lam * sin_ph
    d_x0 = aE * (ct * radial - st * gamma * yh * carrier * inv_s2)
    d_y0 = aE * (st * radial + ct * gamma * yh * carrier * inv_s2)

    stacked = np.stack(
        [d_lam, d_theta, d_psi, d_sig, d_gam, d_a, d_x0, d_y0], axis=-3
    )  # (..., 8, k, k)
    return np.einsum("...pxy,...xy->...p", stacked, up)


def gabor_param_grads(params: GaborParams, k: int, upstream: np.ndarray) -> GaborParamGrads:
    """Gradients of L = <upstream, synth_kernel(params)> w.r.t. all 8 parameters."""
    g = param_grad_bank(params.as_array(), k, np.asarray(upstream, dtype=np.float64))
    return GaborParamGrads.from_array(g)


def finite_diff_grads(
    params: GaborParams, k: int, upstream: np.ndarray, h: float = 1e-4
) -> GaborParamGrads:
    """Central-difference estimate of gabor_param_grads; the verification oracle."""
    if h <= 0:
        raise InvalidParameterError(f"step h must be positive, got {h}")
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (k, k):
        raise DimensionError(f"upstream shape {up.shape} does not match k={k}")
    base = params.as_array()
    out = np.empty(8, dtype=np.float64)
    for i in range(8):
        plus = base.copy()
        minus = base.copy()
        plus[i] += h
        minus[i] -= h
        lp = float(np.sum(up * synth_bank(plus, k)))
        lm = float(np.sum(up * synth_bank(minus, k)))
        out[i] = (lp - lm) / (2.0 * h)
    return GaborParamGrads.from_array(out)
