"""Radial and angular basis functions and their coupling coefficients.

Conventions used throughout the package
---------------------------------------
* Complex orthonormal spherical harmonics with the Condon-Shortley phase,

  .. math::

      Y_n^m(\\theta, \\phi) = \\sqrt{\\frac{2n+1}{4\\pi}\\frac{(n-m)!}{(n+m)!}}
                             P_n^m(\\cos\\theta) e^{im\\phi}

  where ``theta`` is the polar (zenith) angle and ``phi`` the azimuth.
* Coefficients are flattened in ACN order, ``n**2 + n + m``.
* Speed of sound :data:`SPEED_OF_SOUND` = 343 m/s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SPEED_OF_SOUND = 343.0


@dataclass(frozen=True)
class SphericalCoord:
    """Point in spherical coordinates (radius, polar angle, azimuth)."""

    r: float
    theta: float
    phi: float

    def __post_init__(self):
        if self.r < 0:
            raise ValueError(f"negative radius {self.r}")
        if not 0.0 <= self.theta <= np.pi:
            raise ValueError(f"theta={self.theta} outside [0, pi]")
        object.__setattr__(self, "phi", float(np.mod(self.phi, 2 * np.pi)))

    @classmethod
    def from_cartesian(cls, xyz) -> "SphericalCoord":
        r, theta, phi = cart2sph(np.asarray(xyz, dtype=float))
        return cls(float(r), float(theta), float(phi))

    def to_cartesian(self) -> np.ndarray:
        return sph2cart(self.r, self.theta, self.phi)


@dataclass(frozen=True)
class HarmonicIndex:
    n: int
    m: int

    def __post_init__(self):
        if self.n < 0 or abs(self.m) > self.n:
            raise ValueError(f"invalid harmonic index (n={self.n}, m={self.m})")


@dataclass(frozen=True)
class Wavenumber:
    """Wavenumber of a frequency, ``k = 2 pi f / c``."""

    f: float
    c: float = SPEED_OF_SOUND

    def __post_init__(self):
        if self.f <= 0 or self.c <= 0:
            raise ValueError("frequency and speed of sound must be positive")

    @property
    def k(self) -> float:
        return 2 * np.pi * self.f / self.c


def wavenumber(freqs, c: float = SPEED_OF_SOUND) -> np.ndarray:
    return 2 * np.pi * np.asarray(freqs, dtype=float) / c


def cart2sph(xyz):
    """Cartesian ``(..., 3)`` to ``(r, theta, phi)`` with phi in [0, 2 pi)."""
    xyz = np.asarray(xyz, dtype=float)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    r = np.sqrt(x**2 + y**2 + z**2)
    theta = np.arctan2(np.sqrt(x**2 + y**2), z)
    phi = np.mod(np.arctan2(y, x), 2 * np.pi)
    return r, theta, phi


def sph2cart(r, theta, phi) -> np.ndarray:
    r, theta, phi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (r, theta, phi)))
    return np.stack(
        [r * np.sin(theta) * np.cos(phi), r * np.sin(theta) * np.sin(phi), r * np.cos(theta)],
        axis=-1,
    )


# ---------------------------------------------------------------- indexing

def acn_index(n, m: int | None = None) -> int:
    """ACN channel number ``n**2 + n + m`` of harmonic (n, m)."""
    if isinstance(n, HarmonicIndex):
        n, m = n.n, n.m
    if n < 0 or abs(m) > n:
        raise ValueError(f"invalid harmonic index (n={n}, m={m})")
    return n * n + n + m


def num_coeffs(n_max: int) -> int:
    return (n_max + 1) ** 2


def acn_orders(n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Order and degree arrays ``(n, m)`` for every ACN channel up to ``n_max``."""
    n = np.concatenate([np.full(2 * i + 1, i) for i in range(n_max + 1)])
    m = np.concatenate([np.arange(-i, i + 1) for i in range(n_max + 1)])
    return n, m


def order_from_count(count: int) -> int:
    n = math.isqrt(count) - 1
    if (n + 1) ** 2 != count:
        raise ValueError(f"{count} is not a square coefficient count")
    return n


# ---------------------------------------------------------------- bessel

def spherical_bessel_row(n_max: int, x):
    """Spherical Bessel functions ``j_0 .. j_{n_max}`` at ``x``.

    Parameters
    ----------
    n_max : int
        Highest order.
    x : float or ndarray
        Nonnegative arguments.

    Returns
    -------
    ndarray of shape ``x.shape + (n_max + 1,)``

    Notes
    -----
    Arguments with ``x >= n_max`` use upward recurrence from the closed forms
    of ``j_0`` and ``j_1``. Smaller arguments use Miller's downward recurrence
    normalised against whichever of ``j_0``, ``j_1`` is larger in magnitude,
    so a zero of one of them never enters the normalisation.
    """
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    xf = np.atleast_1d(x).ravel()
    if np.any(xf < 0) or not np.all(np.isfinite(xf)):
        raise ValueError("spherical_bessel_row requires finite x >= 0")
    out = np.zeros((xf.size, n_max + 1))

    zero = xf == 0.0
    out[zero, 0] = 1.0

    up = (~zero) & (xf >= n_max)
    if np.any(up):
        out[up] = _bessel_upward(n_max, xf[up])
    down = (~zero) & (xf < n_max)
    if np.any(down):
        out[down] = _bessel_downward(n_max, xf[down])

    out = out.reshape(x.shape + (n_max + 1,))
    return out[()] if scalar else out


def spherical_bessel_j(n: int, x):
    """Spherical Bessel function of the first kind ``j_n(x)``."""
    if n < 0:
        raise ValueError("order must be nonnegative")
    return spherical_bessel_row(n, x)[..., n]


def _bessel_upward(n_max, x):
    out = np.empty((x.size, n_max + 1))
    s, c = np.sin(x), np.cos(x)
    out[:, 0] = s / x
    if n_max >= 1:
        out[:, 1] = s / x**2 - c / x
    for n in range(1, n_max):
        out[:, n + 1] = (2 * n + 1) / x * out[:, n] - out[:, n - 1]
    return out


def _bessel_downward(n_max, x):
    start = n_max + int(math.sqrt(40.0 * (n_max + 1))) + 20
    f_next = np.zeros_like(x)
    f_cur = np.full_like(x, 1e-30)
    out = np.zeros((x.size, n_max + 1))
    for n in range(start, 0, -1):
        f_prev = (2 * n + 1) / x * f_cur - f_next
        f_next, f_cur = f_cur, f_prev
        # f_cur now holds the unnormalised j_{n-1}
        if n - 1 <= n_max:
            out[:, n - 1] = f_cur
        big = np.abs(f_cur) > 1e250
        if np.any(big):
            f_cur[big] *= 1e-250
            f_next[big] *= 1e-250
            out[big] *= 1e-250
    f1 = f_next  # unnormalised j_1
    j0 = np.sin(x) / x
    j1 = np.sin(x) / x**2 - np.cos(x) / x
    use0 = np.abs(j0) >= np.abs(j1)
    scale = np.where(use0, j0 / out[:, 0], j1 / np.where(use0, 1.0, f1))
    return out * scale[:, None]


# ---------------------------------------------------------------- harmonics

def sph_harm_row(n_max: int, theta, phi):
    """All spherical harmonics up to ``n_max`` in ACN order.

    Returns an array of shape ``theta.shape + ((n_max + 1)**2,)``.
    """
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(phi, dtype=float))
    shape = theta.shape
    ct = np.cos(theta).ravel()
    st = np.sin(theta).ravel()
    ph = phi.ravel()

    # normalised associated Legendre values, including the CS phase
    plm = np.zeros((n_max + 1, n_max + 1, ct.size))
    plm[0, 0] = 1.0 / math.sqrt(4 * math.pi)
    for m in range(1, n_max + 1):
        plm[m, m] = -math.sqrt((2 * m + 1) / (2 * m)) * st * plm[m - 1, m - 1]
    for m in range(0, n_max):
        plm[m + 1, m] = math.sqrt(2 * m + 3) * ct * plm[m, m]
    for m in range(0, n_max + 1):
        for n in range(m + 2, n_max + 1):
            a = math.sqrt((4 * n * n - 1) / (n * n - m * m))
            b = math.sqrt(((n - 1) ** 2 - m * m) / (4 * (n - 1) ** 2 - 1))
            plm[n, m] = a * (ct * plm[n - 1, m] - b * plm[n - 2, m])

    out = np.empty((ct.size, (n_max + 1) ** 2), dtype=complex)
    for n in range(n_max + 1):
        for m in range(0, n + 1):
            y = plm[n, m] * np.exp(1j * m * ph)
            out[:, n * n + n + m] = y
            if m > 0:
                out[:, n * n + n - m] = (-1) ** m * np.conj(y)
    return out.reshape(shape + ((n_max + 1) ** 2,))


def sph_harm(n: int, m: int, theta, phi):
    """Single complex spherical harmonic ``Y_n^m(theta, phi)``."""
    idx = acn_index(n, m)
    return sph_harm_row(n, theta, phi)[..., idx]


# ---------------------------------------------------------------- coupling

@lru_cache(maxsize=None)
def _log_factorial(n: int) -> float:
    return math.lgamma(n + 1)


@lru_cache(maxsize=1 << 20)
def wigner3j(j1: int, j2: int, j3: int, m1: int, m2: int, m3: int) -> float:
    """Wigner 3-j symbol for integer arguments via the Racah formula.

    Selection-rule failures return exactly 0.
    """
    if min(j1, j2, j3) < 0:
        raise ValueError("angular momenta must be nonnegative")
    if abs(m1) > j1 or abs(m2) > j2 or abs(m3) > j3:
        return 0.0
    if m1 + m2 + m3 != 0:
        return 0.0
    if j3 > j1 + j2 or j3 < abs(j1 - j2):
        return 0.0
    if m1 == m2 == m3 == 0 and (j1 + j2 + j3) % 2:
        return 0.0

    lf = _log_factorial
    log_pre = 0.5 * (
        lf(j1 + j2 - j3) + lf(j1 - j2 + j3) + lf(-j1 + j2 + j3) - lf(j1 + j2 + j3 + 1)
        + lf(j1 + m1) + lf(j1 - m1) + lf(j2 + m2) + lf(j2 - m2) + lf(j3 + m3) + lf(j3 - m3)
    )
    k_min = max(0, j2 - j3 - m1, j1 - j3 + m2)
    k_max = min(j1 + j2 - j3, j1 - m1, j2 + m2)
    total = 0.0
    for k in range(k_min, k_max + 1):
        log_den = (
            lf(k) + lf(j3 - j2 + k + m1) + lf(j3 - j1 + k - m2)
            + lf(j1 + j2 - j3 - k) + lf(j1 - k - m1) + lf(j2 - k + m2)
        )
        term = math.exp(log_pre - log_den)
        total += -term if k % 2 else term
    sign = -1.0 if (j1 - j2 - m3) % 2 else 1.0
    return sign * total


def translation_coupling(n: int, m: int, n_p: int, m_p: int, n_pp: int) -> complex:
    """Coupling coefficient of the interior addition theorem.

    Couples the global harmonic (n, m), the local harmonic (n_p, m_p) and the
    translation harmonic of order ``n_pp`` and degree ``m - m_p``::

        sqrt((2n+1)(2n'+1)(2n''+1) / 4pi) i^(n'+n''-n) (-1)^m
            * (n n' n''; 0 0 0) (n n' n''; -m m' m-m')

    The regular-to-regular translation then reads
    ``B'_{n'm'} = 4 pi sum_{n m n''} C j_{n''}(kd) Y_{n''}^{m-m'}(d) B_{nm}``.
    """
    w0 = wigner3j(n, n_p, n_pp, 0, 0, 0)
    if w0 == 0.0:
        return 0j
    w1 = wigner3j(n, n_p, n_pp, -m, m_p, m - m_p)
    if w1 == 0.0:
        return 0j
    norm = math.sqrt((2 * n + 1) * (2 * n_p + 1) * (2 * n_pp + 1) / (4 * math.pi))
    phase = 1j ** ((n_p + n_pp - n) % 4)
    sign = -1.0 if m % 2 else 1.0
    return norm * phase * sign * w0 * w1
