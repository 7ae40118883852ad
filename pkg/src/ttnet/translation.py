"""Translation matrix between global and local SH coefficients, and the
ridge-regularised least-squares (LSM) inverse.

For a global set ``b`` of order N and Q local origins of order N'', the
stacked local coefficients satisfy ``b'' = T b`` where ``T`` has shape
``Q (N''+1)**2 x (N+1)**2``. The matrix depends on the wavenumber, so every
frequency is built and solved on its own.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import special
from .field import ShCoeffSet

log = logging.getLogger(__name__)


@lru_cache(maxsize=32)
def _coupling_tables(n_local: int, n_global: int):
    """Coupling values and harmonic gather indices for one order pair.

    Returns ``(coef, harm_idx)`` of shape ``(L, G, n_local + n_global + 1)``
    where ``coef[i, j, n'']`` already includes the ``4 pi`` prefactor and
    ``harm_idx`` points into an ACN row of order ``n_local + n_global``.
    """
    n_tot = n_local + n_global
    nl, ml = special.acn_orders(n_local)
    ng, mg = special.acn_orders(n_global)
    coef = np.zeros((nl.size, ng.size, n_tot + 1), dtype=complex)
    idx = np.zeros((nl.size, ng.size, n_tot + 1), dtype=np.int64)
    for i, (n_p, m_p) in enumerate(zip(nl, ml)):
        for j, (n, m) in enumerate(zip(ng, mg)):
            dm = int(m - m_p)
            for n_pp in range(abs(int(n - n_p)), int(n + n_p) + 1):
                if abs(dm) > n_pp:
                    continue
                coef[i, j, n_pp] = 4 * np.pi * special.translation_coupling(
                    int(n), int(m), int(n_p), int(m_p), n_pp)
                idx[i, j, n_pp] = n_pp * n_pp + n_pp + dm
    coef.setflags(write=False)
    idx.setflags(write=False)
    return coef, idx


def translation_block(k: float, point, n_local: int, n_global: int) -> np.ndarray:
    """Block mapping global coefficients to the coefficients about ``point``.

    Parameters
    ----------
    k : float
        Wavenumber in rad/m.
    point : array_like of shape (3,)
        Local origin relative to the global origin, in meters.
    n_local, n_global : int
        Truncation orders of the local and the global expansion.

    Returns
    -------
    ndarray of shape ``((n_local+1)**2, (n_global+1)**2)``
    """
    if n_local < 0 or n_global < 0:
        raise ValueError("orders must be nonnegative")
    r, theta, phi = special.cart2sph(np.asarray(point, dtype=float))
    coef, idx = _coupling_tables(n_local, n_global)
    n_tot = n_local + n_global
    jn = special.spherical_bessel_row(n_tot, k * float(r))
    ynm = special.sph_harm_row(n_tot, float(theta), float(phi))
    return np.einsum("ijn,n,ijn->ij", coef, jn, ynm[idx])


@dataclass
class TranslationMatrix:
    """Stacked translation blocks for one wavenumber."""

    entries: np.ndarray
    k: float
    points: np.ndarray
    n_local: int
    n_global: int
    duplicate_points: bool = False

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        rows = len(self.points) * special.num_coeffs(self.n_local)
        cols = special.num_coeffs(self.n_global)
        if self.entries.shape != (rows, cols):
            raise ValueError(f"entries shape {self.entries.shape}, expected {(rows, cols)}")

    @property
    def q(self) -> int:
        return len(self.points)


def build_translation_matrix(k: float, points, n_local: int, n_global: int) -> TranslationMatrix:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(points) < 1:
        raise ValueError("need at least one sampling point")
    blocks = [translation_block(k, p, n_local, n_global) for p in points]
    dup = len(np.unique(np.round(points, 12), axis=0)) < len(points)
    if dup:
        log.info("translation matrix built with duplicate sampling points")
    return TranslationMatrix(np.vstack(blocks), float(k), points, n_local, n_global, dup)


def build_translation_matrices(freqs, points, n_local: int, n_global: int) -> list[TranslationMatrix]:
    """One matrix per frequency."""
    return [build_translation_matrix(k, points, n_local, n_global) for k in special.wavenumber(freqs)]


def forward_translate(mats, b_global: ShCoeffSet) -> list[ShCoeffSet]:
    """Apply the translation matrices frequency by frequency.

    ``mats`` is a single :class:`TranslationMatrix` (one-frequency sets) or a
    list with one matrix per row of ``b_global``.
    """
    if isinstance(mats, TranslationMatrix):
        mats = [mats]
    if len(mats) != b_global.freqs.size:
        raise ValueError(f"{len(mats)} matrices for {b_global.freqs.size} frequencies")
    first = mats[0]
    if b_global.n_max != first.n_global:
        raise ValueError(f"global order {b_global.n_max} != matrix order {first.n_global}")
    c_loc = special.num_coeffs(first.n_local)
    out = np.stack([T.entries @ b_global.data[i] for i, T in enumerate(mats)])
    out = out.reshape(len(mats), first.q, c_loc)
    return [
        ShCoeffSet(b_global.origin + p, first.n_local, b_global.freqs, out[:, q])
        for q, p in enumerate(first.points)
    ]


# ---------------------------------------------------------------- inverse

@dataclass(frozen=True)
class RidgeConfig:
    """Tikhonov weight for the LSM inverse.

    ``mode='relative'`` uses ``lam * s_max`` per frequency, ``'fixed'`` uses
    ``lam`` as is.
    """

    lam: float = 1e-3
    mode: str = "relative"
    rank_tol: float = 1e-12

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.mode not in ("relative", "fixed"):
            raise ValueError(f"unknown ridge mode {self.mode!r}")

    def effective(self, s_max: float) -> float:
        return self.lam * s_max if self.mode == "relative" else self.lam


@dataclass
class SolveDiagnostics:
    freqs: np.ndarray
    cond: np.ndarray
    residual: np.ndarray
    lam: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz", "cond", "residual", "lambda"])
            for row in zip(self.freqs, self.cond, self.residual, self.lam):
                w.writerow([f"{v:.10g}" for v in row])


def _stack_locals(b_locals, n_local: int) -> np.ndarray:
    """Locals as a ``(K, Q * (n_local+1)**2)`` array."""
    if isinstance(b_locals, np.ndarray):
        arr = b_locals
    else:
        arr = np.stack([b.data for b in b_locals])
    if arr.ndim != 3 or arr.shape[2] != special.num_coeffs(n_local):
        raise ValueError(f"locals have shape {arr.shape}, expected (Q, K, {special.num_coeffs(n_local)})")
    return np.transpose(arr, (1, 0, 2)).reshape(arr.shape[1], -1)


def ridge_solve(A: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """``argmin_x |A x - y|^2 + lam |x|^2`` through the SVD of ``A``."""
    u, s, vh = np.linalg.svd(A, full_matrices=False)
    filt = s / (s**2 + lam) if lam > 0 else np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return vh.conj().T @ (filt * (u.conj().T @ y))


def lsm_solve(mats, b_locals, cfg: RidgeConfig = RidgeConfig(), freqs=None,
              origin=(0.0, 0.0, 0.0)) -> tuple[ShCoeffSet, SolveDiagnostics]:
    """Estimate the global coefficients from local measurements.

    Parameters
    ----------
    mats : list of TranslationMatrix
        One matrix per frequency, all sharing the same points and orders.
    b_locals : list of ShCoeffSet or ndarray of shape (Q, K, (N''+1)**2)
        Local coefficient sets in sampling-point order.
    cfg : RidgeConfig
    freqs : array_like, optional
        Frequencies for the output set; taken from ``b_locals`` when omitted.

    Returns
    -------
    estimate : ShCoeffSet
    diagnostics : SolveDiagnostics
        Condition number, residual norm and the lambda actually used per
        frequency.
    """
    if isinstance(mats, TranslationMatrix):
        mats = [mats]
    first = mats[0]
    if freqs is None:
        if isinstance(b_locals, np.ndarray):
            raise ValueError("freqs required when locals are a bare array")
        freqs = b_locals[0].freqs
    y = _stack_locals(b_locals, first.n_local)
    if y.shape[0] != len(mats):
        raise ValueError(f"{y.shape[0]} frequency rows for {len(mats)} matrices")
    rows, cols = first.entries.shape
    if rows < cols:
        warnings.warn(f"underdetermined system ({rows} rows < {cols} unknowns)", RuntimeWarning)

    est = np.zeros((len(mats), cols), dtype=complex)
    cond = np.zeros(len(mats))
    resid = np.zeros(len(mats))
    lams = np.zeros(len(mats))
    notes = []
    for i, T in enumerate(mats):
        s = np.linalg.svd(T.entries, compute_uv=False)
        s_max = s[0] if s.size else 0.0
        s_min = s[-1] if rows >= cols else 0.0
        cond[i] = math.inf if s_min == 0 else s_max / s_min
        lam = cfg.effective(s_max)
        if lam == 0 and (s_min <= cfg.rank_tol * s_max):
            lam = RidgeConfig().effective(s_max)
            msg = f"rank-deficient system at k={T.k:.4g}; lambda raised to {lam:.3g}"
            warnings.warn(msg, RuntimeWarning)
            notes.append(msg)
        x = ridge_solve(T.entries, y[i], lam)
        est[i] = x
        resid[i] = float(np.linalg.norm(T.entries @ x - y[i]))
        lams[i] = lam
    out = ShCoeffSet(origin, first.n_global, freqs, est)
    return out, SolveDiagnostics(np.asarray(freqs, dtype=float), cond, resid, lams, notes)


def condition_number(T, freq_index: int = 0) -> float:
    """Ratio of the extreme singular values; ``inf`` for a zero matrix.

    ``T`` may be a list of per-frequency matrices, a single matrix or a bare
    array (``freq_index`` is ignored for the last two).
    """
    if isinstance(T, (list, tuple)):
        T = T[freq_index]
    A = T.entries if isinstance(T, TranslationMatrix) else np.asarray(T)
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return math.inf
    if A.shape[0] < A.shape[1] or s[-1] == 0:
        return math.inf
    return float(s[0] / s[-1])
