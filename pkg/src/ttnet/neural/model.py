"""TT-Net: dual-path transformer translation network.

Data layout inside the network: complex coefficient matrices enter as real
tensors of shape ``(..., K, 2 C)`` whose last axis holds the real parts of
the ``C`` ACN coefficients followed by their imaginary parts. Batched
tensors carry leading ``(B, Q)`` axes for the example and sampling point.
"""
from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .. import special
from . import autodiff as ad
from .autodiff import Tensor


def pack_complex(z) -> np.ndarray:
    z = np.asarray(z)
    return np.concatenate([z.real, z.imag], axis=-1)


def unpack_complex(x) -> np.ndarray:
    x = np.asarray(x)
    c = x.shape[-1] // 2
    return x[..., :c] + 1j * x[..., c:]


def width(order: int) -> int:
    """Packed feature width ``2 (n+1)**2`` of an order-``n`` coefficient row."""
    return 2 * (order + 1) ** 2


def ladder(n_in: int, n_out: int, n_upscale: int) -> list[tuple[int, int]]:
    """Layer orders raising ``n_in`` to ``n_out`` in ``n_upscale`` steps, plus
    the final non-upscaling layer at ``n_out``.

    >>> ladder(4, 8, 2)
    [(4, 6), (6, 8), (8, 8)]
    """
    if n_upscale < 0 or (n_upscale == 0 and n_in != n_out):
        raise ValueError("need at least one upscaling layer when n_out > n_in")
    if n_upscale > max(n_out - n_in, 0) and n_out > n_in:
        raise ValueError("more upscaling layers than order steps")
    orders = [n_in + round(i * (n_out - n_in) / n_upscale) for i in range(n_upscale + 1)] if n_upscale else [n_in]
    layers = list(zip(orders[:-1], orders[1:]))
    return layers + [(n_out, n_out)]


@dataclass
class ModelConfig:
    n_in: int = 4
    n_out: int = 8
    k_bins: int = 30
    layers: list = field(default_factory=lambda: ladder(4, 8, 4))
    j_hidden: int = 32
    y_hidden: int = 64
    tac_hidden: int = 64
    ff_mult: int = 2
    kr_scale: float = 10.0
    freqs: list | None = None
    linear: bool = False

    def __post_init__(self):
        self.layers = [tuple(int(v) for v in pair) for pair in self.layers]
        if not self.layers:
            raise ValueError("model needs at least one layer")
        if self.layers[0][0] != self.n_in or self.layers[-1][1] != self.n_out:
            raise ValueError(f"layers {self.layers} do not chain {self.n_in} -> {self.n_out}")
        for (a, b), (c, _) in zip(self.layers[:-1], self.layers[1:]):
            if b != c:
                raise ValueError(f"layers {self.layers} are not chained")
        for a, b in self.layers:
            if b < a:
                raise ValueError("layer orders must be nondecreasing")
        if self.layers[-1][0] != self.layers[-1][1]:
            raise ValueError("the last layer does not upscale")
        if self.freqs is not None:
            self.freqs = [float(f) for f in self.freqs]
            if len(self.freqs) != self.k_bins:
                raise ValueError("freqs length must equal k_bins")

    @staticmethod
    def heads(order: int) -> int:
        return order + 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layers"] = [list(p) for p in self.layers]
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


class ParamStore(OrderedDict):
    """Named parameter tensors in creation order."""

    def add(self, name: str, value) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self[name] = t
        return t

    def flat(self) -> np.ndarray:
        return np.concatenate([t.value.ravel() for t in self.values()]) if self else np.zeros(0)

    def load_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"flat vector has {vec.size} values, store has {self.size}")
        pos = 0
        for t in self.values():
            n = t.value.size
            t.value = vec[pos:pos + n].reshape(t.shape).copy()
            pos += n

    @property
    def size(self) -> int:
        return int(sum(t.value.size for t in self.values()))

    def grads(self) -> np.ndarray:
        return np.concatenate([
            (np.zeros(t.value.size) if t.grad is None else t.grad.ravel()) for t in self.values()
        ])

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def layout(self) -> list[dict]:
        return [{"name": k, "shape": list(t.shape)} for k, t in self.items()]


# ---------------------------------------------------------------- building blocks

def _dense_params(ps: ParamStore, prefix: str, n_in: int, n_out: int, rng) -> None:
    bound = 1.0 / math.sqrt(n_in)
    ps.add(f"{prefix}.w", rng.uniform(-bound, bound, (n_in, n_out)))
    ps.add(f"{prefix}.b", np.zeros(n_out))


def dense(ps: ParamStore, prefix: str, x) -> Tensor:
    return ad.add(ad.matmul(x, ps[f"{prefix}.w"]), ps[f"{prefix}.b"])


def _act(x, linear: bool) -> Tensor:
    return x if linear else ad.relu(x)


def _prelu(ps, prefix, x, linear: bool) -> Tensor:
    return x if linear else ad.prelu(x, ps[f"{prefix}.alpha"])


def attn_width(features: int, heads: int) -> int:
    return heads * math.ceil(features / heads)


def _mhsa_params(ps, prefix, features, heads, ff_mult, rng):
    inner = attn_width(features, heads)
    for name in ("q", "k", "v"):
        _dense_params(ps, f"{prefix}.{name}", features, inner, rng)
    _dense_params(ps, f"{prefix}.o", inner, features, rng)
    _dense_params(ps, f"{prefix}.ff1", features, ff_mult * features, rng)
    _dense_params(ps, f"{prefix}.ff2", ff_mult * features, features, rng)


def mhsa_forward(ps: ParamStore, prefix: str, seq, heads: int, linear: bool = False,
                 return_weights: bool = False):
    """Multi-head self-attention over the second-to-last axis, then the
    position-wise feed-forward.

    ``seq`` has shape ``(..., L, F)``. Queries, keys and values are projected
    to ``heads * ceil(F / heads)`` features and split evenly across heads. In
    ``linear`` mode the attention weights are uniform and the feed-forward
    rectifier is the identity, which makes the block a linear map.
    """
    seq = ad.as_tensor(seq)
    *lead, length, feats = seq.shape
    if heads < 1:
        raise ValueError("need at least one head")
    inner = ps[f"{prefix}.q.w"].shape[1]
    if ps[f"{prefix}.q.w"].shape[0] != feats or inner % heads:
        raise ValueError(f"{prefix}: sequence features {feats} / heads {heads} do not match parameters")
    dh = inner // heads

    def split(t):
        t = ad.reshape(t, (*lead, length, heads, dh))
        return ad.swapaxes(t, -2, -3)  # (..., h, L, dh)

    v = split(dense(ps, f"{prefix}.v", seq))
    if linear:
        weights = Tensor(np.full((*lead, heads, length, length), 1.0 / length))
    else:
        q = split(dense(ps, f"{prefix}.q", seq))
        k = split(dense(ps, f"{prefix}.k", seq))
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        weights = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(weights, v)
    ctx = ad.reshape(ad.swapaxes(ctx, -2, -3), (*lead, length, inner))
    out = dense(ps, f"{prefix}.o", ctx)
    out = dense(ps, f"{prefix}.ff2", _act(dense(ps, f"{prefix}.ff1", out), linear))
    return (out, weights) if return_weights else out


def j_net_forward(ps: ParamStore, kr, order: int, cfg: ModelConfig | None = None) -> Tensor:
    """Radial surrogate: per-bin perceptron from ``kr`` to ``order + 1`` values.

    ``kr`` has shape ``(..., K)``; the output ``(..., K, order + 1)``.
    """
    scale = 10.0 if cfg is None else cfg.kr_scale
    linear = False if cfg is None else cfg.linear
    x = Tensor(np.asarray(kr, dtype=float)[..., None] / scale)
    h = _act(dense(ps, "j.fc1", x), linear)
    out = dense(ps, "j.fc2", h)
    if order + 1 > out.shape[-1]:
        raise ValueError(f"J network built for order {out.shape[-1] - 1}, asked for {order}")
    return ad.getitem(out, (..., slice(0, order + 1)))


def angle_features(theta, phi) -> np.ndarray:
    theta, phi = np.asarray(theta, dtype=float), np.asarray(phi, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)], axis=-1)


def y_net_forward(ps: ParamStore, angles, order: int, cfg: ModelConfig | None = None) -> Tensor:
    """Angular surrogate: perceptron from the point direction to ``(order+1)**2`` values.

    ``angles`` has shape ``(..., 2)`` holding (theta, phi); the output is a
    column ``(..., (order+1)**2, 1)``.
    """
    linear = False if cfg is None else cfg.linear
    angles = np.asarray(angles, dtype=float)
    lead = angles.shape[:-1]
    feats = angle_features(angles[..., 0], angles[..., 1]).reshape(-1, 4)
    h = _act(dense(ps, "y.fc1", Tensor(feats)), linear)
    out = dense(ps, "y.fc2", h)
    c = special.num_coeffs(order)
    if c > out.shape[-1]:
        raise ValueError(f"Y network built for fewer than {c} outputs")
    return ad.reshape(ad.getitem(out, (..., slice(0, c))), (*lead, c, 1))


def dpt_layer_forward(ps: ParamStore, prefix: str, coeffs, j_out, y_out, heads: int,
                      linear: bool = False) -> Tensor:
    """Dual-path transformer block.

    Parameters
    ----------
    coeffs : Tensor of shape (..., K, D)
        Packed coefficients, ``D = 2 (n+1)**2``.
    j_out : Tensor of shape (..., K, n+1)
    y_out : Tensor of shape (..., (n+1)**2, 1)
    heads : int

    Returns
    -------
    Tensor of shape (..., K, D)
    """
    coeffs = ad.as_tensor(coeffs)
    *lead, k, d = coeffs.shape
    c = y_out.shape[-2]
    if d != 2 * c or j_out.shape[-1] ** 2 != c or j_out.shape[-2] != k:
        raise ValueError(f"{prefix}: shapes coeffs {coeffs.shape}, J {j_out.shape}, Y {y_out.shape} disagree")
    # frequency path: attend over the K bins
    x = ad.concat([coeffs, j_out], axis=-1)
    x = mhsa_forward(ps, f"{prefix}.freq", x, heads, linear)
    x = dense(ps, f"{prefix}.freq_fc", x)  # (..., K, D)
    # order path: attend over the D coefficient rows
    x = ad.swapaxes(x, -1, -2)  # (..., D, K)
    y_rows = ad.concat([y_out, y_out], axis=-2)  # real and imaginary rows share Y
    x = ad.concat([x, y_rows], axis=-1)  # (..., D, K+1)
    x = mhsa_forward(ps, f"{prefix}.order", x, heads, linear)
    x = dense(ps, f"{prefix}.order_fc", x)  # (..., D, K)
    return ad.swapaxes(x, -1, -2)


def tac_forward(ps: ParamStore, prefix: str, per_point, linear: bool = False, point_axis: int = -3):
    """Transform-average-concatenate across sampling points.

    ``per_point`` is either a list of Q tensors ``(..., K, D)`` (a list of the
    same length is returned) or one tensor with the points on ``point_axis``.
    """
    as_list = isinstance(per_point, (list, tuple))
    if as_list:
        if not per_point:
            raise ValueError("TAC needs at least one sampling point")
        x = ad.concat([ad.reshape(ad.as_tensor(t), (1, *t.shape)) for t in per_point], axis=0)
        point_axis = 0
    else:
        x = ad.as_tensor(per_point)
    t = _prelu(ps, f"{prefix}.transform", dense(ps, f"{prefix}.transform", x), linear)
    avg = ad.broadcast_to(ad.mean(t, axis=point_axis, keepdims=True), t.shape)
    out = dense(ps, f"{prefix}.concat", ad.concat([t, avg], axis=-1))
    if as_list:
        return [ad.getitem(out, i) for i in range(len(per_point))]
    return out


def upscale_forward(ps: ParamStore, prefix: str, x) -> Tensor:
    """Affine map of every frequency row from ``2(n+1)**2`` to ``2(n'+1)**2``."""
    return dense(ps, prefix, x)


# ---------------------------------------------------------------- model

class TTNet:
    """Parameters plus forward pass of the stacked DPT/TAC/upscale layers."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params = init_params(cfg, np.random.default_rng(seed))

    @property
    def freqs(self) -> np.ndarray:
        if self.cfg.freqs is None:
            raise ValueError("model config has no frequency grid")
        return np.asarray(self.cfg.freqs)

    def geometry_features(self, geometry):
        """``kr`` values ``(B, Q, K)`` and angles ``(B, Q, 2)`` for point positions ``(B, Q, 3)``."""
        r, theta, phi = special.cart2sph(np.asarray(geometry, dtype=float))
        kr = r[..., None] * special.wavenumber(self.freqs)
        return kr, np.stack([theta, phi], axis=-1)

    def forward(self, inputs, geometry, return_points: bool = False, trace: list | None = None) -> Tensor:
        """Packed global estimate of shape ``(B, K, 2 (n_out+1)**2)``.

        ``inputs`` is complex ``(B, Q, K, (n_in+1)**2)`` or already packed
        real; ``geometry`` holds the ``(B, Q, 3)`` point positions.
        """
        cfg, ps = self.cfg, self.params
        inputs = np.asarray(inputs)
        if np.iscomplexobj(inputs):
            inputs = pack_complex(inputs)
        if inputs.ndim != 4 or inputs.shape[2] != cfg.k_bins or inputs.shape[3] != width(cfg.n_in):
            raise ValueError(
                f"input shape {inputs.shape} does not match config (K={cfg.k_bins}, n_in={cfg.n_in})")
        kr, angles = self.geometry_features(geometry)
        if kr.shape[:2] != inputs.shape[:2]:
            raise ValueError("geometry does not match inputs")
        j_full = j_net_forward(ps, kr, cfg.n_out, cfg)
        y_full = y_net_forward(ps, angles, cfg.n_out, cfg)

        record = trace.append if trace is not None else (lambda item: None)
        x = Tensor(inputs)
        record(("input", x.shape))
        last = len(cfg.layers) - 1
        for i, (n, n_next) in enumerate(cfg.layers):
            j = ad.getitem(j_full, (..., slice(0, n + 1)))
            y = ad.getitem(y_full, (..., slice(0, special.num_coeffs(n)), slice(None)))
            h = dpt_layer_forward(ps, f"L{i}.dpt", x, j, y, cfg.heads(n), cfg.linear)
            record((f"L{i}.dpt", h.shape))
            h = tac_forward(ps, f"L{i}.tac", h, cfg.linear)
            record((f"L{i}.tac", h.shape))
            if i == last:
                x = h
                break
            x = upscale_forward(ps, f"L{i}.up", ad.add(h, x))
            record((f"L{i}.up", x.shape))
        if return_points:
            return x
        out = ad.mean(x, axis=1)
        record(("output", out.shape))
        return out

    def predict(self, inputs, geometry) -> np.ndarray:
        """Complex estimate ``(B, K, (n_out+1)**2)``."""
        return unpack_complex(self.forward(inputs, geometry).value)

    def loss(self, inputs, geometry, target) -> Tensor:
        target = np.asarray(target)
        if np.iscomplexobj(target):
            target = pack_complex(target)
        return ad.mse(self.forward(inputs, geometry), target)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamStore:
    ps = ParamStore()
    _dense_params(ps, "j.fc1", 1, cfg.j_hidden, rng)
    _dense_params(ps, "j.fc2", cfg.j_hidden, cfg.n_out + 1, rng)
    _dense_params(ps, "y.fc1", 4, cfg.y_hidden, rng)
    _dense_params(ps, "y.fc2", cfg.y_hidden, special.num_coeffs(cfg.n_out), rng)
    last = len(cfg.layers) - 1
    for i, (n, n_next) in enumerate(cfg.layers):
        d, h = width(n), ModelConfig.heads(n)
        _mhsa_params(ps, f"L{i}.dpt.freq", d + n + 1, h, cfg.ff_mult, rng)
        _dense_params(ps, f"L{i}.dpt.freq_fc", d + n + 1, d, rng)
        _mhsa_params(ps, f"L{i}.dpt.order", cfg.k_bins + 1, h, cfg.ff_mult, rng)
        _dense_params(ps, f"L{i}.dpt.order_fc", cfg.k_bins + 1, cfg.k_bins, rng)
        _dense_params(ps, f"L{i}.tac.transform", d, cfg.tac_hidden, rng)
        ps.add(f"L{i}.tac.transform.alpha", np.array([0.25]))
        _dense_params(ps, f"L{i}.tac.concat", 2 * cfg.tac_hidden, d, rng)
        if i != last:
            _dense_params(ps, f"L{i}.up", d, width(n_next), rng)
    return ps


def shape_plan(cfg: ModelConfig, q: int, batch: int = 1) -> list[tuple[str, tuple]]:
    """Expected tensor shapes of every stage, derived from the config alone."""
    plan = [("input", (batch, q, cfg.k_bins, width(cfg.n_in)))]
    last = len(cfg.layers) - 1
    for i, (n, n_next) in enumerate(cfg.layers):
        d = width(n)
        plan.append((f"L{i}.dpt", (batch, q, cfg.k_bins, d)))
        plan.append((f"L{i}.tac", (batch, q, cfg.k_bins, d)))
        if i != last:
            plan.append((f"L{i}.up", (batch, q, cfg.k_bins, width(n_next))))
    plan.append(("output", (batch, cfg.k_bins, width(cfg.n_out))))
    return plan


def trace_shapes(model: TTNet, inputs, geometry) -> list[tuple[str, tuple]]:
    """Stage shapes recorded during a real forward pass (compare :func:`shape_plan`)."""
    trace: list = []
    model.forward(inputs, geometry, trace=trace)
    return trace
