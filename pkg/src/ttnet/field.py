"""Analytic plane-wave sound fields in the spherical-harmonic domain.

A plane wave travelling along the unit vector ``g`` with amplitude ``A``
has interior coefficients about an origin ``d``::

    B_n^m = 4 pi A i^n conj(Y_n^m(g)) exp(i k g.d)

so that ``p(d + r) = sum_n j_n(kr) sum_m B_n^m Y_n^m(r)`` reproduces
``A exp(i k g.(d + r))``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import special
from .special import SPEED_OF_SOUND, SphericalCoord

# four order-4 local sets are the fewest that determine an order-8 global set
MIN_POINTS = 4


@dataclass(frozen=True)
class PlaneWaveSource:
    """Plane wave with unit propagation ``direction`` and real ``amplitude``."""

    direction: tuple[float, float, float]
    amplitude: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        norm = np.linalg.norm(d)
        if d.shape != (3,) or norm == 0:
            raise ValueError(f"bad direction {self.direction}")
        if abs(norm - 1.0) > 1e-12:
            d = d / norm
        object.__setattr__(self, "direction", tuple(float(v) for v in d))
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")

    @classmethod
    def from_arrival(cls, azimuth: float, elevation: float = 0.0, amplitude: float = 1.0,
                     degrees: bool = True) -> "PlaneWaveSource":
        """Source arriving *from* the given azimuth/elevation.

        The stored propagation direction points the opposite way.
        """
        if degrees:
            azimuth, elevation = math.radians(azimuth), math.radians(elevation)
        towards = np.array([
            math.cos(elevation) * math.cos(azimuth),
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
        ])
        return cls(tuple(-towards), amplitude)

    @property
    def angles(self) -> tuple[float, float]:
        _, theta, phi = special.cart2sph(np.asarray(self.direction))
        return float(theta), float(phi)


@dataclass
class ShCoeffSet:
    """Complex SH coefficients about ``origin`` for a list of frequencies.

    ``data`` has shape ``(K, (n_max + 1)**2)`` with ACN-ordered columns.
    """

    origin: np.ndarray
    n_max: int
    freqs: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.freqs = np.atleast_1d(np.asarray(self.freqs, dtype=float))
        self.data = np.atleast_2d(np.asarray(self.data, dtype=complex))
        if self.data.shape != (self.freqs.size, special.num_coeffs(self.n_max)):
            raise ValueError(
                f"data shape {self.data.shape} does not match "
                f"{self.freqs.size} freqs x {special.num_coeffs(self.n_max)} coeffs"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite coefficients")

    @property
    def wavenumbers(self) -> np.ndarray:
        return special.wavenumber(self.freqs)

    def truncated(self, n_max: int) -> "ShCoeffSet":
        if n_max > self.n_max:
            raise ValueError("cannot truncate to a higher order")
        return ShCoeffSet(self.origin, n_max, self.freqs, self.data[:, : special.num_coeffs(n_max)])

    def __add__(self, other: "ShCoeffSet") -> "ShCoeffSet":
        if other.n_max != self.n_max or not np.array_equal(other.freqs, self.freqs):
            raise ValueError("incompatible coefficient sets")
        return ShCoeffSet(self.origin, self.n_max, self.freqs, self.data + other.data)


@dataclass
class Scene:
    """Superposition of plane waves observed at ``sample_points``."""

    sources: list[PlaneWaveSource]
    sample_points: np.ndarray
    snr_db: float = math.inf
    seed: int = 0
    distance_range: tuple[float, float] | None = None

    def __post_init__(self):
        self.sample_points = np.atleast_2d(np.asarray(self.sample_points, dtype=float))
        if not self.sources:
            raise ValueError("scene needs at least one source")
        if self.sample_points.shape[1:] != (3,) or len(self.sample_points) < 1:
            raise ValueError("sample_points must have shape (Q, 3)")
        if len(self.sample_points) < MIN_POINTS:
            raise ValueError(f"a scene needs at least {MIN_POINTS} sample points")
        if self.distance_range is not None:
            lo, hi = self.distance_range
            dist = np.linalg.norm(self.sample_points, axis=1)
            if np.any(dist < lo - 1e-12) or np.any(dist > hi + 1e-12):
                raise ValueError(f"sample point distances outside [{lo}, {hi}]")

    @property
    def q(self) -> int:
        return len(self.sample_points)

    def to_dict(self) -> dict:
        return {
            "sources": [{"direction": list(s.direction), "amplitude": s.amplitude} for s in self.sources],
            "sample_points": self.sample_points.tolist(),
            "snr_db": None if math.isinf(self.snr_db) else self.snr_db,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scene":
        sources = []
        for s in doc["sources"]:
            if "direction" in s:
                sources.append(PlaneWaveSource(tuple(s["direction"]), s.get("amplitude", 1.0)))
            else:
                sources.append(PlaneWaveSource.from_arrival(
                    s["arrival_azimuth_deg"], s.get("arrival_elevation_deg", 0.0), s.get("amplitude", 1.0)))
        snr = doc.get("snr_db")
        return cls(sources, np.asarray(doc["sample_points"]), math.inf if snr is None else float(snr),
                   int(doc.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_dict(json.loads(Path(path).read_text()))


def plane_wave_coeffs(src: PlaneWaveSource, k, origin=(0.0, 0.0, 0.0), n_max: int = 4) -> np.ndarray:
    """Coefficient rows of one plane wave for each wavenumber in ``k``.

    Returns an array of shape ``(K, (n_max + 1)**2)``; a scalar ``k`` gives a
    single row of shape ``(1, ...)``.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if np.any(k <= 0):
        raise ValueError("wavenumbers must be positive")
    theta, phi = src.angles
    n, _ = special.acn_orders(n_max)
    base = 4 * np.pi * src.amplitude * (1j ** (n % 4)) * np.conj(special.sph_harm_row(n_max, theta, phi))
    shift = np.exp(1j * k * float(np.dot(src.direction, np.asarray(origin, dtype=float))))
    return shift[:, None] * base[None, :]


def scene_coeffs(scene: Scene, freqs, origin=(0.0, 0.0, 0.0), n_max: int = 4,
                 c: float = SPEED_OF_SOUND) -> ShCoeffSet:
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    k = special.wavenumber(freqs, c)
    data = np.zeros((freqs.size, special.num_coeffs(n_max)), dtype=complex)
    for src in scene.sources:
        data += plane_wave_coeffs(src, k, origin, n_max)
    return ShCoeffSet(origin, n_max, freqs, data)


def plane_wave_pressure(src: PlaneWaveSource, k: float, points) -> np.ndarray:
    """Direct evaluation ``A exp(i k g.r)`` at Cartesian ``points``."""
    points = np.asarray(points, dtype=float)
    return src.amplitude * np.exp(1j * k * (points @ np.asarray(src.direction)))


def synth_pressure_points(coeffs: ShCoeffSet, freq_index: int, points) -> np.ndarray:
    """Pressure synthesised from ``coeffs`` at Cartesian ``points`` (absolute coordinates).

    Points are taken relative to ``coeffs.origin``.
    """
    if not 0 <= freq_index < coeffs.freqs.size:
        raise IndexError(f"frequency index {freq_index} out of range")
    rel = np.atleast_2d(np.asarray(points, dtype=float)) - coeffs.origin
    r, theta, phi = special.cart2sph(rel)
    k = coeffs.wavenumbers[freq_index]
    jn = special.spherical_bessel_row(coeffs.n_max, k * r)
    n, _ = special.acn_orders(coeffs.n_max)
    ynm = special.sph_harm_row(coeffs.n_max, theta, phi)
    return np.sum(jn[:, n] * ynm * coeffs.data[freq_index][None, :], axis=-1)


def synth_pressure(coeffs: ShCoeffSet, freq_index: int, point: SphericalCoord) -> complex:
    """Pressure at ``point`` given in spherical coordinates about the set's origin."""
    rel = point.to_cartesian() + coeffs.origin
    return complex(synth_pressure_points(coeffs, freq_index, rel[None, :])[0])


def add_noise(coeffs: ShCoeffSet, snr_db: float, rng: np.random.Generator,
              per_frequency: bool = False) -> ShCoeffSet:
    """Add circular complex Gaussian noise at the requested SNR.

    The SNR is measured on squared Frobenius norms over the whole
    ``K x (n_max+1)**2`` matrix, or row by row when ``per_frequency`` is set.
    ``snr_db = inf`` returns an unchanged copy.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return ShCoeffSet(coeffs.origin, coeffs.n_max, coeffs.freqs, coeffs.data.copy())
    if not math.isfinite(snr_db):
        raise ValueError(f"invalid SNR {snr_db}")
    noise = draw_noise(coeffs.data, snr_db, rng, per_frequency)
    return ShCoeffSet(coeffs.origin, coeffs.n_max, coeffs.freqs, coeffs.data + noise)


def draw_noise(signal: np.ndarray, snr_db: float, rng: np.random.Generator,
               per_frequency: bool = False) -> np.ndarray:
    """Noise matrix whose energy sits ``snr_db`` below that of ``signal``."""
    signal = np.asarray(signal)
    axis = -1 if per_frequency else None
    energy = np.sum(np.abs(signal) ** 2, axis=axis, keepdims=per_frequency)
    if np.any(energy == 0):
        raise ValueError("SNR undefined for a zero signal")
    raw = (rng.standard_normal(signal.shape) + 1j * rng.standard_normal(signal.shape)) / math.sqrt(2)
    raw_energy = np.sum(np.abs(raw) ** 2, axis=axis, keepdims=per_frequency)
    return raw * np.sqrt(energy / raw_energy * 10 ** (-snr_db / 10))
