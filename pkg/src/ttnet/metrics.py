"""Coefficient and sound-field error metrics and grid rendering."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .field import ShCoeffSet, synth_pressure_points

SDR_CAP_DB = 300.0


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, ShCoeffSet) else np.asarray(x)


def edm(est, ref) -> float:
    """Mean squared modulus difference over every coefficient entry."""
    a, b = _data(est), _data(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b) ** 2))


def real_stack(x) -> np.ndarray:
    """Flatten a complex array into ``[real parts, imaginary parts]``."""
    x = np.asarray(x).ravel()
    return np.concatenate([x.real, x.imag])


def coss(est, ref) -> float:
    """Cosine similarity of the real-stacked coefficient vectors."""
    a, b = _data(est), _data(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    u, v = real_stack(a), real_stack(b)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


# ---------------------------------------------------------------- regions

@dataclass(frozen=True)
class DiskSpec:
    """Lattice nodes ``(i step, j step)`` inside a disk of ``radius`` in the x-y plane."""

    radius: float = 1.0
    step: float = 0.02
    ball: bool = False

    def nodes(self) -> np.ndarray:
        n = int(round(self.radius / self.step))
        ax = np.arange(-n, n + 1)
        if self.ball:
            i, j, l = np.meshgrid(ax, ax, ax, indexing="ij")
            keep = i**2 + j**2 + l**2 <= n * n
            return self.step * np.stack([i[keep], j[keep], l[keep]], axis=-1).astype(float)
        i, j = np.meshgrid(ax, ax, indexing="ij")
        keep = i**2 + j**2 <= n * n
        return self.step * np.stack([i[keep], j[keep], np.zeros(keep.sum(), dtype=int)], axis=-1).astype(float)


@dataclass(frozen=True)
class PlaneSpec:
    """Square grid centred at the origin in the plane of two axes."""

    extent: float = 2.0
    step: float = 0.02
    axes: str = "xy"
    offset: float = 0.0

    def shape(self) -> tuple[int, int]:
        n = int(round(self.extent / self.step)) + 1
        return n, n

    def nodes(self) -> np.ndarray:
        n = self.shape()[0]
        ax = np.linspace(-self.extent / 2, self.extent / 2, n)
        a, b = np.meshgrid(ax, ax, indexing="xy")
        pts = np.full((a.size, 3), float(self.offset))
        cols = {"x": 0, "y": 1, "z": 2}
        pts[:, cols[self.axes[0]]] = a.ravel()
        pts[:, cols[self.axes[1]]] = b.ravel()
        return pts


@dataclass
class FieldGrid:
    spec: object
    freq: float
    nodes: np.ndarray
    pressure: np.ndarray

    def __post_init__(self):
        if len(self.nodes) != len(self.pressure):
            raise ValueError("node count does not match pressure count")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "re", "im"])
            for (x, y, _), p in zip(self.nodes, self.pressure):
                w.writerow([f"{x:.6g}", f"{y:.6g}", repr(float(p.real)), repr(float(p.imag))])


def field_grid(coeffs: ShCoeffSet, freq_index: int, spec=None) -> FieldGrid:
    """Synthesise the pressure of ``coeffs`` at every node of ``spec``."""
    spec = PlaneSpec() if spec is None else spec
    nodes = spec.nodes()
    p = synth_pressure_points(coeffs, freq_index, nodes + coeffs.origin)
    return FieldGrid(spec, float(coeffs.freqs[freq_index]), nodes, p)


def sdr(est, ref, freq_index: int, region=None) -> float:
    """Signal-to-distortion ratio in dB of the fields synthesised from both sets.

    Identical fields give :data:`SDR_CAP_DB`.
    """
    region = DiskSpec() if region is None else region
    u = field_grid(ref, freq_index, region).pressure
    u_hat = field_grid(est, freq_index, region).pressure
    return sdr_from_fields(u_hat, u)


def sdr_from_fields(u_hat, u) -> float:
    num = float(np.sum(np.abs(u) ** 2))
    if num == 0:
        raise ValueError("zero reference energy")
    den = float(np.sum(np.abs(u - u_hat) ** 2))
    if den == 0:
        return SDR_CAP_DB
    return min(SDR_CAP_DB, 10 * math.log10(num / den))


def sdr_all_freqs(est: ShCoeffSet, ref: ShCoeffSet, region=None) -> np.ndarray:
    return np.array([sdr(est, ref, i, region) for i in range(ref.freqs.size)])


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    """Per-frequency and averaged metrics of one method on one sweep group."""

    method: str
    freqs: np.ndarray
    edm: np.ndarray
    coss: np.ndarray
    sdr: np.ndarray
    sweep_axis: str = ""
    sweep_value: object = ""
    count: int = 0
    cond: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mean_edm(self) -> float:
        return float(np.mean(self.edm))

    @property
    def mean_coss(self) -> float:
        return float(np.mean(self.coss))

    @property
    def mean_sdr(self) -> float:
        return float(np.mean(self.sdr))

    def rows(self):
        for i, f in enumerate(self.freqs):
            yield [self.method, self.sweep_axis, self.sweep_value, f, self.edm[i], self.coss[i], self.sdr[i]]
        yield [self.method, self.sweep_axis, self.sweep_value, "mean", self.mean_edm, self.mean_coss, self.mean_sdr]

    def summary(self) -> dict:
        out = {
            "method": self.method, "sweep_axis": self.sweep_axis, "sweep_value": self.sweep_value,
            "count": self.count, "edm": self.mean_edm, "coss": self.mean_coss, "sdr_db": self.mean_sdr,
        }
        if self.cond is not None:
            out["median_cond"] = float(np.median(self.cond))
        return out


REPORT_COLUMNS = ["method", "sweep_axis", "sweep_value", "freq_hz", "edm", "coss", "sdr_db"]


def write_reports(reports, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            for row in rep.rows():
                w.writerow([v if isinstance(v, str) else f"{v:.10g}" for v in row])
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump([rep.summary() for rep in reports], fh, indent=2, default=str)


def item_metrics(est: ShCoeffSet, ref: ShCoeffSet, region=None, with_sdr: bool = True):
    """Per-frequency ``(edm, coss, sdr)`` arrays for one item."""
    k = ref.freqs.size
    e = np.array([edm(est.data[i], ref.data[i]) for i in range(k)])
    c = np.array([coss(est.data[i], ref.data[i]) for i in range(k)])
    s = sdr_all_freqs(est, ref, region) if with_sdr else np.full(k, np.nan)
    return e, c, s


def evaluate_suite(estimates, references, method: str = "", sweep_values=None,
                   sweep_axis: str = "", region=None, with_sdr: bool = True, conds=None) -> list[EvalReport]:
    """Group items by sweep value and average the metrics per frequency.

    Parameters
    ----------
    estimates, references : sequence of ShCoeffSet
        Aligned collections.
    sweep_values : sequence, optional
        One label per item; items sharing a label form one report.
    """
    estimates, references = list(estimates), list(references)
    if len(estimates) != len(references):
        raise ValueError(f"{len(estimates)} estimates for {len(references)} references")
    if sweep_values is None:
        sweep_values = [""] * len(references)
    sweep_values = list(sweep_values)
    if len(sweep_values) != len(references):
        raise ValueError("sweep values not aligned with items")
    groups: dict = {}
    for i, v in enumerate(sweep_values):
        groups.setdefault(v, []).append(i)
    reports = []
    for v, idx in groups.items():
        per = [item_metrics(estimates[i], references[i], region, with_sdr) for i in idx]
        e, c, s = (np.mean([p[j] for p in per], axis=0) for j in range(3))
        cond = None
        if conds is not None:
            cond = np.concatenate([np.atleast_1d(conds[i]) for i in idx])
        reports.append(EvalReport(method, references[idx[0]].freqs, e, c, s, sweep_axis, v, len(idx), cond))
    return reports
