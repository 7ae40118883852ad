"""Randomised plane-wave scenes, training examples and the shard file format.

Shard layout (all integers little-endian)::

    b"TTSH"            4-byte magic
    uint32             format version (1)
    uint64             header length H in bytes
    H bytes            UTF-8 JSON header
    payload            little-endian float64 blob

The header carries the dataset config, the example count, the SHA-256 of
the payload and one entry per example with its Q, seeds, byte offset and
length. Each example occupies, in order: inputs ``(Q, K, C_in)`` complex,
target ``(K, C_out)`` complex, geometry ``(Q, 3)`` real and the scale
``(1,)``; complex values are stored as interleaved (re, im) pairs, row-major.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import special
from .field import MIN_POINTS, PlaneWaveSource, Scene, ShCoeffSet, draw_noise, scene_coeffs

MAGIC = b"TTSH"
VERSION = 1


class ShardError(ValueError):
    """Corrupt, truncated or inconsistent shard file."""


@dataclass
class DatasetConfig:
    n_in: int = 4
    n_out: int = 8
    freq_lo: float = 100.0
    freq_hi: float = 3000.0
    freq_step: float = 100.0
    dist_lo: float = 0.2
    dist_hi: float = 2.0
    sources_lo: int = 1
    sources_hi: int = 4
    amp_lo: float = 0.1
    amp_hi: float = 1.0
    snr_lo: float = 10.0
    snr_hi: float = 30.0
    q_lo: int = 4
    q_hi: int = 10
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 600
    seed: int = 0
    noise_per_frequency: bool = False
    fixed_distance: float | None = None
    noise_free: bool = False

    def __post_init__(self):
        if self.n_in < 0 or self.n_out < self.n_in:
            raise ValueError("need 0 <= n_in <= n_out")
        for lo, hi, name in [
            (self.freq_lo, self.freq_hi, "freq"), (self.dist_lo, self.dist_hi, "dist"),
            (self.sources_lo, self.sources_hi, "sources"), (self.amp_lo, self.amp_hi, "amp"),
            (self.snr_lo, self.snr_hi, "snr"), (self.q_lo, self.q_hi, "q"),
        ]:
            if lo > hi:
                raise ValueError(f"empty {name} range [{lo}, {hi}]")
        if self.freq_lo <= 0 or self.freq_step <= 0:
            raise ValueError("frequencies must be positive")
        span = (self.freq_hi - self.freq_lo) / self.freq_step
        if abs(span - round(span)) > 1e-9:
            raise ValueError("frequency range is not a whole number of steps")
        if self.q_lo < MIN_POINTS or self.sources_lo < 1 or self.dist_lo < 0 or self.amp_lo <= 0:
            raise ValueError("invalid lower bound")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def freqs(self) -> np.ndarray:
        k = int(round((self.freq_hi - self.freq_lo) / self.freq_step)) + 1
        return self.freq_lo + self.freq_step * np.arange(k)

    @property
    def k_bins(self) -> int:
        return self.freqs.size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "DatasetConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainingExample:
    """Normalised local inputs and global target of one scene.

    ``inputs`` has shape ``(Q, K, (n_in+1)**2)``, ``target`` ``(K, (n_out+1)**2)``.
    Both were divided by ``scale``.
    """

    inputs: np.ndarray
    target: np.ndarray
    geometry: np.ndarray
    scale: float
    scene_seed: int
    snr_db: float = math.inf
    n_sources: int = 1

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.target))):
            raise ValueError("non-finite example")

    @property
    def q(self) -> int:
        return self.inputs.shape[0]

    def local_sets(self, freqs, normalized: bool = True) -> list[ShCoeffSet]:
        s = 1.0 if normalized else self.scale
        n = special.order_from_count(self.inputs.shape[2])
        return [ShCoeffSet(p, n, freqs, self.inputs[q] * s) for q, p in enumerate(self.geometry)]

    def target_set(self, freqs, normalized: bool = True) -> ShCoeffSet:
        s = 1.0 if normalized else self.scale
        return ShCoeffSet(np.zeros(3), special.order_from_count(self.target.shape[1]), freqs, self.target * s)


def uniform_directions(rng: np.random.Generator, count: int) -> np.ndarray:
    v = rng.standard_normal((count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def scene_from_seed(cfg: DatasetConfig, seed: int, q: int | None = None,
                    n_sources: int | None = None, snr_db: float | None = None) -> Scene:
    """Scene drawn from its own seed; pinned values replace the drawn ones.

    Every draw happens in a fixed order whether or not it is pinned, so the
    stored (Q, source count, SNR) of an example are enough to rebuild it.
    """
    r = np.random.default_rng(seed)
    q_draw = int(r.integers(cfg.q_lo, cfg.q_hi + 1))
    ns_draw = int(r.integers(cfg.sources_lo, cfg.sources_hi + 1))
    q = q_draw if q is None else int(q)
    ns = ns_draw if n_sources is None else int(n_sources)
    dirs = uniform_directions(r, ns)
    amps = r.uniform(cfg.amp_lo, cfg.amp_hi, ns)
    dist = r.uniform(cfg.dist_lo, cfg.dist_hi, q)
    if cfg.fixed_distance is not None:
        dist = np.full(q, float(cfg.fixed_distance))
    points = uniform_directions(r, q) * dist[:, None]
    snr_draw = float(r.uniform(cfg.snr_lo, cfg.snr_hi))
    snr = snr_draw if snr_db is None else float(snr_db)
    if cfg.noise_free:
        snr = math.inf
    sources = [PlaneWaveSource(tuple(d), float(a)) for d, a in zip(dirs, amps)]
    return Scene(sources, points, snr, int(seed))


def sample_scene(cfg: DatasetConfig, rng: np.random.Generator, q: int | None = None,
                 n_sources: int | None = None, snr_db: float | None = None) -> Scene:
    """Draw one random scene; any of Q, source count and SNR can be pinned."""
    seed = int(rng.integers(0, 2**63 - 1))
    return scene_from_seed(cfg, seed, q, n_sources, snr_db)


def clean_locals(scene: Scene, freqs, n_in: int) -> np.ndarray:
    """Noise-free analytic local coefficients, shape ``(Q, K, (n_in+1)**2)``."""
    return np.stack([scene_coeffs(scene, freqs, p, n_in).data for p in scene.sample_points])


def make_example(scene: Scene, cfg: DatasetConfig) -> TrainingExample:
    """Analytic target and noisy normalised inputs for ``scene``.

    The noise generator is seeded from the scene seed, so an example can be
    regenerated from its scene alone.
    """
    freqs = cfg.freqs
    target = scene_coeffs(scene, freqs, (0.0, 0.0, 0.0), cfg.n_out).data
    locals_ = clean_locals(scene, freqs, cfg.n_in)
    if np.max(np.abs(locals_)) == 0:
        raise ValueError("degenerate zero-field scene")
    if math.isfinite(scene.snr_db):
        rng = np.random.default_rng([scene.seed, 1])
        locals_ = np.stack([
            loc + draw_noise(loc, scene.snr_db, rng, cfg.noise_per_frequency) for loc in locals_
        ])
    scale = float(np.max(np.abs(locals_)))
    return TrainingExample(locals_ / scale, target / scale, scene.sample_points.copy(), scale,
                           scene.seed, scene.snr_db, len(scene.sources))


def generate_split(cfg: DatasetConfig, split: str, count: int | None = None, **pins) -> list[TrainingExample]:
    """Examples of one split; content depends only on ``(cfg, split)``."""
    index = {"train": 0, "val": 1, "test": 2}[split]
    count = getattr(cfg, f"n_{split}") if count is None else count
    rng = np.random.default_rng([cfg.seed, index])
    return [make_example(sample_scene(cfg, rng, **pins), cfg) for _ in range(count)]


def batches_by_q(examples, batch_size: int, rng: np.random.Generator | None = None,
                 q_values=None) -> list[list[int]]:
    """Index batches that never mix different Q."""
    groups: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        groups.setdefault(ex.q, []).append(i)
    out = []
    for q in sorted(groups) if q_values is None else q_values:
        idx = list(groups.get(q, []))
        if rng is not None:
            rng.shuffle(idx)
        out.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
    if rng is not None:
        order = rng.permutation(len(out))
        out = [out[i] for i in order]
    return out


# ---------------------------------------------------------------- shards

def _interleave(z: np.ndarray) -> np.ndarray:
    z = np.ascontiguousarray(z, dtype=complex)
    return z.view(np.float64).ravel()


def write_shard(examples, path, cfg: DatasetConfig | None = None) -> str:
    """Write ``examples`` to ``path``; returns the payload SHA-256."""
    examples = list(examples)
    entries, chunks, offset = [], [], 0
    for ex in examples:
        blob = np.concatenate([
            _interleave(ex.inputs), _interleave(ex.target),
            np.asarray(ex.geometry, dtype=float).ravel(), np.array([ex.scale], dtype=float),
        ]).astype("<f8").tobytes()
        entries.append({
            "q": ex.q, "k": int(ex.inputs.shape[1]), "c_in": int(ex.inputs.shape[2]),
            "c_out": int(ex.target.shape[1]), "scene_seed": int(ex.scene_seed),
            "snr_db": None if math.isinf(ex.snr_db) else float(ex.snr_db),
            "n_sources": int(ex.n_sources), "offset": offset, "nbytes": len(blob),
        })
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    if len({(e["k"], e["c_in"], e["c_out"]) for e in entries}) > 1:
        raise ValueError("shard examples must share K and orders")
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "format": "ttnet-shard", "version": VERSION,
        "config": None if cfg is None else cfg.to_dict(),
        "count": len(examples), "payload_sha256": digest, "payload_bytes": len(payload),
        "examples": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return digest


def read_shard_header(path) -> tuple[dict, int]:
    raw = Path(path).read_bytes()
    return _parse_header(raw)


def _parse_header(raw: bytes) -> tuple[dict, int]:
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ShardError("not a shard file (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise ShardError(f"unsupported shard version {version}")
    if len(raw) < 16 + hlen:
        raise ShardError("truncated header")
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise ShardError(f"corrupt header: {exc}") from None
    return header, 16 + hlen


def read_shard(path) -> tuple[list[TrainingExample], DatasetConfig | None]:
    raw = Path(path).read_bytes()
    header, start = _parse_header(raw)
    payload = raw[start:]
    if len(payload) != header["payload_bytes"]:
        raise ShardError(f"payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ShardError("payload checksum mismatch")
    if len(header["examples"]) != header["count"]:
        raise ShardError("example table does not match count")
    examples = []
    for e in header["examples"]:
        q, k, ci, co = e["q"], e["k"], e["c_in"], e["c_out"]
        n_float = 2 * q * k * ci + 2 * k * co + 3 * q + 1
        if e["nbytes"] != 8 * n_float or e["offset"] + e["nbytes"] > len(payload):
            raise ShardError("example table inconsistent with payload")
        v = np.frombuffer(payload, dtype="<f8", count=n_float, offset=e["offset"]).astype(np.float64)
        a = 2 * q * k * ci
        b = a + 2 * k * co
        inputs = v[:a].copy().view(complex).reshape(q, k, ci)
        target = v[a:b].copy().view(complex).reshape(k, co)
        geom = v[b:b + 3 * q].reshape(q, 3).copy()
        snr = math.inf if e["snr_db"] is None else e["snr_db"]
        examples.append(TrainingExample(inputs, target, geom, float(v[-1]), e["scene_seed"], snr, e["n_sources"]))
    cfg = None if header.get("config") is None else DatasetConfig.from_dict(header["config"])
    return examples, cfg


def regenerate_scene(cfg: DatasetConfig, ex: TrainingExample) -> Scene:
    """Rebuild the scene of a stored example from its seed."""
    return scene_from_seed(cfg, ex.scene_seed, ex.q, ex.n_sources, ex.snr_db)
