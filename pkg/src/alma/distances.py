"""Perturbation distances D(x_tilde, x) with gradients w.r.t. x_tilde.

* ``l1`` / ``l2``: closed forms, subgradient 0 at untouched coordinates.
* ``ciede2000``: per-pixel CIEDE2000 colour difference between the CIELAB
  versions of both images, accumulated over the image (sum by default).
* ``ssim``: 1 - SSIM, SSIM computed per colour channel with a Gaussian window
  and averaged over channels.

The perceptual distances are differentiated with :mod:`alma.tape`.
"""

from __future__ import annotations

import dataclasses
import enum
import math

import numpy as np

from alma import tape
from alma.tape import Var

# sRGB (D65) linear RGB -> XYZ, applied directly to [0, 1] values
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
WHITE_D65 = np.array([95.0489, 100.0, 108.8840])
_DELTA = 6.0 / 29.0

SSIM_K1, SSIM_K2 = 0.01, 0.03


class UnsupportedShapeError(ValueError):
    pass


class DistanceKind(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"
    CIEDE2000 = "ciede2000"
    SSIM = "ssim"


ACCUMULATIONS = ("sum", "mean", "l2")


@dataclasses.dataclass(frozen=True)
class DistanceSpec:
    kind: DistanceKind = DistanceKind.L2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ciede2000_accumulation: str = "sum"

    def __post_init__(self):
        object.__setattr__(self, "kind", DistanceKind(self.kind))
        if self.ciede2000_accumulation not in ACCUMULATIONS:
            raise ValueError(f"unknown CIEDE2000 accumulation {self.ciede2000_accumulation!r}")
        if self.ssim_window < 1 or self.ssim_sigma <= 0:
            raise ValueError("SSIM window must be >= 1 and sigma > 0")

    @classmethod
    def parse(cls, spec: "DistanceSpec | str") -> "DistanceSpec":
        if isinstance(spec, DistanceSpec):
            return spec
        if isinstance(spec, DistanceKind):
            return cls(spec)
        return cls(DistanceKind(str(spec).lower()))

    @property
    def name(self) -> str:
        return self.kind.value


# --------------------------------------------------------------------------
# colour pipeline


def _lab_f(t):
    above = np.asarray(tape._value(t)) > _DELTA ** 3
    # keep the cube-root branch away from 0 so its gradient stays finite
    cube = tape.cbrt(tape.where(above, t, 1.0))
    linear = t * (1.0 / (3.0 * _DELTA ** 2)) + 4.0 / 29.0
    return tape.where(above, cube, linear)


def _rgb_to_lab(rgb):
    """Tape-compatible conversion of a (3, ...) RGB array to (L*, a*, b*)."""
    xyz = tape.linear_channels(rgb, RGB_TO_XYZ * 100.0 / WHITE_D65[:, None])
    fx, fy, fz = _lab_f(xyz[0]), _lab_f(xyz[1]), _lab_f(xyz[2])
    return fy * 116.0 - 16.0, (fx - fy) * 500.0, (fy - fz) * 200.0


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert a (3, H, W) RGB image with values in [0, 1] to CIELAB.

    The linear sRGB matrix is applied to the values as given (no gamma
    decoding); XYZ is scaled by 100 to match the D65 reference white.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim < 1 or rgb.shape[0] != 3:
        raise UnsupportedShapeError(f"expected 3 colour channels first, got shape {rgb.shape}")
    if np.any(rgb < 0) or np.any(rgb > 1) or not np.all(np.isfinite(rgb)):
        raise ValueError("RGB values must lie in [0, 1]")
    return np.stack(_rgb_to_lab(rgb))


def _ciede2000(lab1, lab2):
    """Per-element CIEDE2000. Arguments are (L, a, b) triples of arrays or Vars."""
    L1, a1, b1 = lab1
    L2, a2, b2 = lab2

    c1 = tape.sqrt(a1 * a1 + b1 * b1)
    c2 = tape.sqrt(a2 * a2 + b2 * b2)
    cbar = (c1 + c2) * 0.5
    cbar7 = cbar ** 7
    g = (1.0 - tape.sqrt(cbar7 / (cbar7 + 25.0 ** 7))) * 0.5
    a1p = a1 * (1.0 + g)
    a2p = a2 * (1.0 + g)
    c1p = tape.sqrt(a1p * a1p + b1 * b1)
    c2p = tape.sqrt(a2p * a2p + b2 * b2)

    h1 = tape.atan2(b1, a1p) * (180.0 / math.pi)
    h2 = tape.atan2(b2, a2p) * (180.0 / math.pi)
    h1 = h1 + np.where(tape._value(h1) < 0, 360.0, 0.0)
    h2 = h2 + np.where(tape._value(h2) < 0, 360.0, 0.0)

    chroma_prod = tape._value(c1p) * tape._value(c2p)
    achromatic = chroma_prod == 0
    hv1, hv2 = tape._value(h1), tape._value(h2)

    # hue difference: piecewise affine with constant offsets
    diff = hv2 - hv1
    shift = np.where(diff > 180.0, -360.0, np.where(diff < -180.0, 360.0, 0.0))
    dh = ((h2 - h1) + shift) * np.where(achromatic, 0.0, 1.0)
    dL = L2 - L1
    dC = c2p - c1p
    dH = tape.sqrt(c1p * c2p) * tape.sin(dh * (math.pi / 360.0)) * 2.0

    lbar = (L1 + L2) * 0.5
    cbarp = (c1p + c2p) * 0.5
    hsum = hv1 + hv2
    far = np.abs(hv1 - hv2) > 180.0
    hshift = np.where(far, np.where(hsum < 360.0, 360.0, -360.0), 0.0)
    hscale = np.where(achromatic, 1.0, 0.5)
    hbar = ((h1 + h2) + np.where(achromatic, 0.0, hshift)) * hscale

    rad = math.pi / 180.0
    t = (
        1.0
        - tape.cos((hbar - 30.0) * rad) * 0.17
        + tape.cos(hbar * (2.0 * rad)) * 0.24
        + tape.cos((hbar * 3.0 + 6.0) * rad) * 0.32
        - tape.cos((hbar * 4.0 - 63.0) * rad) * 0.20
    )
    dtheta = tape.exp(-(((hbar - 275.0) * (1.0 / 25.0)) ** 2)) * 30.0
    cbarp7 = cbarp ** 7
    rc = tape.sqrt(cbarp7 / (cbarp7 + 25.0 ** 7)) * 2.0
    l50 = (lbar - 50.0) ** 2
    sl = 1.0 + l50 * 0.015 / tape.sqrt(l50 + 20.0)
    sc = 1.0 + cbarp * 0.045
    sh = 1.0 + cbarp * t * 0.015
    rt = -tape.sin(dtheta * (2.0 * rad)) * rc

    tl = dL / sl
    tc = dC / sc
    th = dH / sh
    return tape.sqrt(tape.maximum(tl * tl + tc * tc + th * th + rt * tc * th, 0.0))


_K7 = 25.0 ** 7
_RAD = math.pi / 180.0
_LAB_MATRIX = RGB_TO_XYZ * 100.0 / WHITE_D65[:, None]


def _safe_div(num, den):
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def _ciede2000_rgb_grad(rgb: np.ndarray, ref_lab: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel CIEDE2000 against a fixed reference, and its hand-derived VJP.

    Returns ``(delta_e, back)`` where ``back(g)`` maps per-pixel cotangents to
    a cotangent on ``rgb``. Same formula and zero-subgradient conventions as
    the tape version, without per-node overhead.
    """
    xyz = np.tensordot(_LAB_MATRIX, rgb, axes=(1, 0))
    above = xyz > _DELTA ** 3
    root = np.cbrt(np.where(above, xyz, 1.0))
    f = np.where(above, root, xyz / (3.0 * _DELTA ** 2) + 4.0 / 29.0)
    df = np.where(above, 1.0 / (3.0 * root * root), 1.0 / (3.0 * _DELTA ** 2))
    L1, a1, b1 = 116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])
    L2, a2, b2 = ref_lab

    c1 = np.sqrt(a1 * a1 + b1 * b1)
    c2 = np.sqrt(a2 * a2 + b2 * b2)
    cbar = 0.5 * (c1 + c2)
    cb7 = cbar ** 7
    q = cb7 / (cb7 + _K7)
    G = 0.5 * (1.0 - np.sqrt(q))
    a1p, a2p = a1 * (1.0 + G), a2 * (1.0 + G)
    r1, r2 = a1p * a1p + b1 * b1, a2p * a2p + b2 * b2
    c1p, c2p = np.sqrt(r1), np.sqrt(r2)
    h1 = np.degrees(np.arctan2(b1, a1p))
    h1 = h1 + np.where(h1 < 0, 360.0, 0.0)
    h2 = np.degrees(np.arctan2(b2, a2p))
    h2 = h2 + np.where(h2 < 0, 360.0, 0.0)

    live = (c1p * c2p) != 0
    diff = h2 - h1
    shift = np.where(diff > 180.0, -360.0, np.where(diff < -180.0, 360.0, 0.0))
    dh = np.where(live, diff + shift, 0.0)
    dL = L2 - L1
    dC = c2p - c1p
    root_prod = np.sqrt(c1p * c2p)
    half = dh * (math.pi / 360.0)
    dH = 2.0 * root_prod * np.sin(half)

    lbar = 0.5 * (L1 + L2)
    cbarp = 0.5 * (c1p + c2p)
    far = np.abs(h1 - h2) > 180.0
    hshift = np.where(far, np.where(h1 + h2 < 360.0, 360.0, -360.0), 0.0)
    hscale = np.where(live, 0.5, 1.0)
    hbar = (h1 + h2 + np.where(live, hshift, 0.0)) * hscale

    T = (
        1.0
        - 0.17 * np.cos((hbar - 30.0) * _RAD)
        + 0.24 * np.cos(2.0 * hbar * _RAD)
        + 0.32 * np.cos((3.0 * hbar + 6.0) * _RAD)
        - 0.20 * np.cos((4.0 * hbar - 63.0) * _RAD)
    )
    dT = _RAD * (
        0.17 * np.sin((hbar - 30.0) * _RAD)
        - 0.48 * np.sin(2.0 * hbar * _RAD)
        - 0.96 * np.sin((3.0 * hbar + 6.0) * _RAD)
        + 0.80 * np.sin((4.0 * hbar - 63.0) * _RAD)
    )
    dtheta = 30.0 * np.exp(-(((hbar - 275.0) / 25.0) ** 2))
    cp7 = cbarp ** 7
    qp = cp7 / (cp7 + _K7)
    RC = 2.0 * np.sqrt(qp)
    l50 = (lbar - 50.0) ** 2
    SL = 1.0 + 0.015 * l50 / np.sqrt(20.0 + l50)
    SC = 1.0 + 0.045 * cbarp
    SH = 1.0 + 0.015 * cbarp * T
    RT = -np.sin(2.0 * dtheta * _RAD) * RC

    tl, tc, th = dL / SL, dC / SC, dH / SH
    E = np.sqrt(np.maximum(tl * tl + tc * tc + th * th + RT * tc * th, 0.0))

    def back(gE: np.ndarray) -> np.ndarray:
        gs = _safe_div(0.5 * gE, E)
        g_tl = 2.0 * gs * tl
        g_tc = gs * (2.0 * tc + RT * th)
        g_th = gs * (2.0 * th + RT * tc)
        g_RT = gs * tc * th

        g_dL, g_SL = g_tl / SL, -g_tl * tl / SL
        g_dC, g_SC = g_tc / SC, -g_tc * tc / SC
        g_dH, g_SH = g_th / SH, -g_th * th / SH

        g_dtheta = -g_RT * np.cos(2.0 * dtheta * _RAD) * (2.0 * _RAD) * RC
        g_RC = -g_RT * np.sin(2.0 * dtheta * _RAD)
        g_T = g_SH * 0.015 * cbarp
        g_cbarp = g_SH * 0.015 * T + g_SC * 0.045
        g_cbarp += _safe_div(g_RC, np.sqrt(qp)) * 7.0 * cbarp ** 6 * _K7 / (cp7 + _K7) ** 2
        s20 = 20.0 + l50
        dSL = 0.015 * (1.0 / np.sqrt(s20) - 0.5 * l50 / s20 ** 1.5)
        g_lbar = g_SL * dSL * 2.0 * (lbar - 50.0)
        g_hbar = g_dtheta * dtheta * (-2.0 * (hbar - 275.0) / 625.0) + g_T * dT

        g_dh = g_dH * 2.0 * root_prod * np.cos(half) * (math.pi / 360.0)
        g_prod = _safe_div(g_dH * np.sin(half), root_prod)  # d(2 sqrt(p))/dp = 1/sqrt(p)
        g_h1 = g_hbar * hscale - np.where(live, g_dh, 0.0)
        g_h2 = g_hbar * hscale + np.where(live, g_dh, 0.0)
        g_c1p = 0.5 * g_cbarp - g_dC + g_prod * c2p
        g_c2p = 0.5 * g_cbarp + g_dC + g_prod * c1p
        g_L1 = 0.5 * g_lbar - g_dL

        deg = 180.0 / math.pi
        g_a1p = _safe_div(g_c1p * a1p, c1p) - _safe_div(g_h1 * deg * b1, r1)
        g_b1 = _safe_div(g_c1p * b1, c1p) + _safe_div(g_h1 * deg * a1p, r1)
        g_a2p = _safe_div(g_c2p * a2p, c2p) - _safe_div(g_h2 * deg * b2, r2)

        g_G = g_a1p * a1 + g_a2p * a2
        g_a1 = g_a1p * (1.0 + G)
        g_cbar = -0.5 * _safe_div(g_G, 2.0 * np.sqrt(q)) * 7.0 * cbar ** 6 * _K7 / (cb7 + _K7) ** 2
        g_c1 = 0.5 * g_cbar
        g_a1 = g_a1 + _safe_div(g_c1 * a1, c1)
        g_b1 = g_b1 + _safe_div(g_c1 * b1, c1)

        g_f = np.stack([500.0 * g_a1, 116.0 * g_L1 - 500.0 * g_a1 + 200.0 * g_b1, -200.0 * g_b1])
        return np.tensordot(_LAB_MATRIX.T, g_f * df, axes=(1, 0))

    return E, back


def ciede2000(lab1: np.ndarray, lab2: np.ndarray) -> np.ndarray:
    """CIEDE2000 colour difference between CIELAB arrays of shape (3, ...)."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    if lab1.shape != lab2.shape or lab1.shape[0] != 3:
        raise UnsupportedShapeError("CIELAB inputs must share a (3, ...) shape")
    return np.asarray(_ciede2000(tuple(lab1), tuple(lab2)))


# --------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _filter_matrix(n: int, w: np.ndarray) -> np.ndarray:
    k = w.size
    m = np.zeros((n - k + 1, n))
    for r in range(n - k + 1):
        m[r, r : r + k] = w
    return m


def effective_window(spec: DistanceSpec, height: int, width: int) -> int:
    """Window side actually used: the configured size, shrunk (odd) to fit the image."""
    k = min(spec.ssim_window, height, width)
    if k % 2 == 0:
        k -= 1
    return max(k, 1)


def _ssim(x, y: np.ndarray, spec: DistanceSpec):
    _, h, w = y.shape
    k = effective_window(spec, h, w)
    win = gaussian_window(k, spec.ssim_sigma)
    left, right = _filter_matrix(h, win), _filter_matrix(w, win)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2

    mu_y = left @ y @ right.T
    syy = left @ (y * y) @ right.T - mu_y * mu_y
    mu_x = tape.filter2d(x, left, right)
    sxx = tape.filter2d(x * x, left, right) - mu_x * mu_x
    sxy = tape.filter2d(x * y, left, right) - mu_x * mu_y

    num = (mu_x * mu_y * 2.0 + c1) * (sxy * 2.0 + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return tape.mean(num / den)


def ssim(x_tilde: np.ndarray, x: np.ndarray, spec: DistanceSpec | None = None) -> float:
    """Mean SSIM over colour channels of two (C, H, W) images."""
    spec = spec or DistanceSpec(DistanceKind.SSIM)
    return float(_ssim(np.asarray(x_tilde, dtype=np.float64), np.asarray(x, dtype=np.float64), spec))


# --------------------------------------------------------------------------
# public entry point


def _accumulate(per_pixel, how: str):
    if how == "sum":
        return tape.total(per_pixel)
    if how == "mean":
        return tape.mean(per_pixel)
    return tape.sqrt(tape.total(per_pixel * per_pixel))


def distance_value_grad(spec: "DistanceSpec | str", x_tilde: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Return ``(D(x_tilde, x), dD/dx_tilde)``."""
    spec = DistanceSpec.parse(spec)
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_tilde.shape != x.shape:
        raise ValueError(f"shape mismatch: {x_tilde.shape} vs {x.shape}")

    kind = spec.kind
    if kind is DistanceKind.L1:
        delta = x_tilde - x
        return float(np.abs(delta).sum()), np.sign(delta)
    if kind is DistanceKind.L2:
        delta = x_tilde - x
        norm = float(np.sqrt(np.sum(delta * delta)))
        if norm == 0.0:
            return 0.0, np.zeros_like(delta)
        return norm, delta / norm

    if x.ndim != 3 or x.shape[0] != 3:
        raise UnsupportedShapeError(f"{kind.value} needs a (3, H, W) image, got shape {x.shape}")
    if kind is DistanceKind.CIEDE2000:
        per_pixel, back = _ciede2000_rgb_grad(x_tilde, np.stack(_rgb_to_lab(x)))
        how = spec.ciede2000_accumulation
        if how == "sum":
            return float(per_pixel.sum()), back(np.ones_like(per_pixel))
        if how == "mean":
            return float(per_pixel.mean()), back(np.full_like(per_pixel, 1.0 / per_pixel.size))
        norm = float(np.sqrt(np.sum(per_pixel * per_pixel)))
        return norm, back(per_pixel / norm) if norm > 0 else np.zeros_like(x_tilde)

    # SSIM
    value, grad = tape.value_and_grad(lambda v: _ssim(v, x, spec), x_tilde)
    return 1.0 - value, -grad


def distance(spec: "DistanceSpec | str", x_tilde: np.ndarray, x: np.ndarray) -> float:
    """Distance value only (cheaper for L1/L2; perceptual kinds skip the backward pass)."""
    spec = DistanceSpec.parse(spec)
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if spec.kind is DistanceKind.L1:
        return float(np.abs(x_tilde - x).sum())
    if spec.kind is DistanceKind.L2:
        return float(np.sqrt(np.sum((x_tilde - x) ** 2)))
    if x_tilde.shape != x.shape:
        raise ValueError(f"shape mismatch: {x_tilde.shape} vs {x.shape}")
    if x.ndim != 3 or x.shape[0] != 3:
        raise UnsupportedShapeError(f"{spec.kind.value} needs a (3, H, W) image, got shape {x.shape}")
    if spec.kind is DistanceKind.CIEDE2000:
        per_pixel = _ciede2000(_rgb_to_lab(x_tilde), _rgb_to_lab(x))
        return float(_accumulate(per_pixel, spec.ciede2000_accumulation))
    return 1.0 - float(_ssim(x_tilde, x, spec))
