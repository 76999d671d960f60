"""Bit-flip attack on a small 8-bit quantized classifier.

Inference is exact integer arithmetic: inputs are quantized to int8 with
``input_scale``, every layer multiplies by its int8 weights, and ReLU keeps
values integral. Integers are carried in float64 so BLAS does the matmuls;
every partial sum stays far below 2**53, so the results are exact. Real-valued logits are the
integer logits times the product of all scales, so the argmax never depends
on rounding.

Network file layout (little-endian)::

    magic b"QNET", version u16, n_layers u16, input_scale f64
    per layer: out u32, in u32, scale f64, activation u8 (0 none, 1 relu)
    payload:   each layer's int8 weights, row-major, in layer order
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .classifier import Scheme, SecurityLevelMap
from .errors import DomainError, FileFormatError, GenerationError, ShapeError
from .patterns import AttackModel

NET_MAGIC = b"QNET"
NET_VERSION = 1
_NET_HEADER = struct.Struct("<4sHHd")
_LAYER_HEADER = struct.Struct("<IIdB")
ACTIVATIONS = ("none", "relu")

BATCH_SIZE = 256
RANDOM_GUESS = 0.10
DEFAULT_MAX_ITERS = 200
_SCORE_CHUNK = 256

# (layer, row, col, bit); bit 7 is the sign bit.
BitRef = tuple[int, int, int, int]


@dataclass(frozen=True)
class QuantLayer:
    weights: np.ndarray  # int8, (out, in)
    scale: float
    activation: str = "relu"

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 2:
            raise ShapeError("layer weights must be a matrix")
        if w.dtype != np.int8:
            if np.any(w < -128) or np.any(w > 127):
                raise ValueError("weights must fit in int8")
            w = w.astype(np.int8)
        object.__setattr__(self, "weights", w)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not self.scale > 0:
            raise ValueError("layer scale must be positive")


@dataclass(frozen=True)
class QuantizedNetwork:
    layers: tuple[QuantLayer, ...]
    input_scale: float

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weights.shape[0] != b.weights.shape[1]:
                raise ShapeError(f"layer widths do not chain: {a.weights.shape} -> {b.weights.shape}")
        if not self.input_scale > 0:
            raise ValueError("input_scale must be positive")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    @property
    def logit_scale(self) -> float:
        return self.input_scale * math.prod(l.scale for l in self.layers)

    @property
    def n_bits(self) -> int:
        return 8 * sum(l.weights.size for l in self.layers)

    def __eq__(self, other):
        if not isinstance(other, QuantizedNetwork):
            return NotImplemented
        return (
            self.input_scale == other.input_scale
            and len(self.layers) == len(other.layers)
            and all(
                a.scale == b.scale and a.activation == b.activation and np.array_equal(a.weights, b.weights)
                for a, b in zip(self.layers, other.layers)
            )
        )

    def quantize_inputs(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.rint(x / self.input_scale), -127, 127)

    def forward_int(self, x: np.ndarray) -> np.ndarray:
        """Integer logits for float inputs ``x`` of shape (n, input_dim)."""
        h = self.quantize_inputs(x)
        for layer in self.layers:
            h = h @ layer.weights.astype(np.float64).T
            if layer.activation == "relu":
                h = np.maximum(h, 0)
        return h

    def with_flips(self, bits: Iterable[BitRef]) -> "QuantizedNetwork":
        ws = [l.weights.copy() for l in self.layers]
        for layer, r, c, b in bits:
            ws[layer][r, c] = flip_bit(int(ws[layer][r, c]), b)
        return QuantizedNetwork(
            tuple(QuantLayer(w, l.scale, l.activation) for w, l in zip(ws, self.layers)), self.input_scale
        )


def flip_bit(w: int, bit: int) -> int:
    """Toggle one bit of an int8 in two's complement."""
    if not 0 <= bit < 8:
        raise ValueError("bit index must lie in 0..7")
    u = (w & 0xFF) ^ (1 << bit)
    return u - 256 if u >= 128 else u


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ShapeError("dataset needs x of shape (n, d) and y of shape (n,)")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return int(self.y.size)

    def head(self, n: int) -> "Dataset":
        return Dataset(self.x[:n], self.y[:n])


def evaluate(network: QuantizedNetwork, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    if data.x.shape[1] != network.input_dim:
        raise ShapeError(f"dataset has {data.x.shape[1]} features, network expects {network.input_dim}")
    pred = np.argmax(network.forward_int(data.x), axis=1)
    return float(np.mean(pred == data.y))


def batch_loss(logits_int: np.ndarray, y: np.ndarray, logit_scale: float):
    """Mean cross-entropy of integer logits (..., n, k) rescaled to real units.

    Leading axes are independent batches; each mean is an exact ``fsum`` so
    the result does not depend on how batches are stacked.
    """
    z = np.ascontiguousarray(np.moveaxis(np.asarray(logits_int, dtype=np.float64), -1, 0)) * logit_scale
    # Class-by-class loops keep every per-sample value independent of stacking.
    zmax = z[0].copy()
    for zk in z[1:]:
        np.maximum(zmax, zk, out=zmax)
    total = np.zeros_like(zmax)
    for zk in z:
        total += np.exp(zk - zmax)
    picked = np.zeros_like(zmax)
    for k, zk in enumerate(z):
        np.copyto(picked, zk, where=y == k)
    per = (np.log(total) + zmax - picked).reshape(-1, y.size)
    means = np.array([math.fsum(row) / y.size for row in per.tolist()])
    return float(means[0]) if z.ndim == 2 else means.reshape(z.shape[1:-1])


# ---------------------------------------------------------------------------
# Toy task


N_CLASSES = 10
INPUT_DIM = 16
HIDDEN = 2 * N_CLASSES
EVAL_SIZE = 1000
TRAIN_SIZE = 2000
MIN_ACCURACY = 0.90


def _clusters(rng: np.random.Generator, centers: np.ndarray, n: int, spread: float) -> Dataset:
    y = np.tile(np.arange(len(centers)), n // len(centers))
    y = y[rng.permutation(y.size)]
    x = centers[y] + spread * rng.standard_normal((y.size, centers.shape[1]))
    return Dataset(x, y)


def _quantize(w: np.ndarray) -> tuple[np.ndarray, float]:
    scale = float(np.abs(w).max()) / 127.0
    return np.clip(np.rint(w / scale), -127, 127).astype(np.int8), scale


def build_toy_network(seed: int = 0) -> tuple[QuantizedNetwork, Dataset, Dataset]:
    """10-class Gaussian-cluster task and a fitted two-layer int8 network.

    The hidden ReLU units are the class-mean templates and their negations;
    the output layer is a ridge regression onto one-hot targets. Returns (network, train, eval);
    the eval set holds exactly 100 points per class.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((N_CLASSES, INPUT_DIM))
    centers *= 5.0 / np.linalg.norm(centers, axis=1, keepdims=True)
    train = _clusters(rng, centers, TRAIN_SIZE, 1.0)
    test = _clusters(rng, centers, EVAL_SIZE, 1.0)

    input_scale = float(np.abs(train.x).max()) / 127.0
    means = np.stack([train.x[train.y == k].mean(axis=0) for k in range(N_CLASSES)])
    w1, s1 = _quantize(np.concatenate([means, -means])[:HIDDEN])
    first = QuantizedNetwork((QuantLayer(w1, s1, "relu"),), input_scale)
    h = first.forward_int(train.x) * first.logit_scale
    target = np.eye(N_CLASSES)[train.y]
    w2 = np.linalg.solve(h.T @ h + 1e-2 * np.eye(HIDDEN), h.T @ target).T
    w2q, s2 = _quantize(w2)
    net = QuantizedNetwork((QuantLayer(w1, s1, "relu"), QuantLayer(w2q, s2, "none")), input_scale)
    acc = evaluate(net, test)
    if acc < MIN_ACCURACY:
        raise GenerationError(f"seed {seed}: fitted accuracy {acc:.3f} < {MIN_ACCURACY}; choose another seed")
    return net, train, test


# ---------------------------------------------------------------------------
# Weight bits -> DRAM cells


@dataclass(frozen=True)
class CellLayout:
    """Weight bit ``k`` (layer order, row-major, bit 7 first) lives at
    ``(rows[k // cols], k % cols)``."""

    shapes: tuple[tuple[int, int], ...]
    rows: tuple[int, ...]
    cols: int

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(tuple(s) for s in self.shapes))
        object.__setattr__(self, "rows", tuple(int(r) for r in self.rows))
        if len(set(self.rows)) != len(self.rows):
            raise ShapeError("layout rows must be distinct")
        if self.n_bits > len(self.rows) * self.cols:
            raise ShapeError(f"{self.n_bits} weight bits do not fit in {len(self.rows)} x {self.cols} cells")

    @classmethod
    def for_network(cls, network: QuantizedNetwork, rows: Sequence[int], cols: int) -> "CellLayout":
        return cls(tuple(l.weights.shape for l in network.layers), tuple(rows), cols)

    @property
    def n_bits(self) -> int:
        return 8 * sum(a * b for a, b in self.shapes)

    def index(self, ref: BitRef) -> int:
        layer, r, c, bit = ref
        base = 8 * sum(a * b for a, b in self.shapes[:layer])
        return base + 8 * (r * self.shapes[layer][1] + c) + (7 - bit)

    def bit_at(self, k: int) -> BitRef:
        for layer, (a, b) in enumerate(self.shapes):
            n = 8 * a * b
            if k < n:
                w, off = divmod(k, 8)
                return (layer, w // b, w % b, 7 - off)
            k -= n
        raise IndexError("bit index past the end of the layout")

    def cell(self, ref: BitRef) -> tuple[int, int]:
        k = self.index(ref)
        return self.rows[k // self.cols], k % self.cols

    def bits(self) -> Iterable[BitRef]:
        return (self.bit_at(k) for k in range(self.n_bits))


def min_level(model: AttackModel, scheme: Scheme) -> int:
    """Lowest security level a model can flip, given how the map was collapsed."""
    model = AttackModel(model)
    if scheme is Scheme.TWO_LEVEL:
        return 4
    if model is AttackModel.SG:
        return 4
    if model is AttackModel.VC or scheme is Scheme.THREE_LEVEL:
        return 3
    return 2


def allowed_bits(level_map: SecurityLevelMap, layout: CellLayout, model: AttackModel) -> list[BitRef]:
    """Weight bits whose cell the model can flip, in layout order."""
    floor = min_level(model, level_map.scheme)
    out = []
    for k in range(layout.n_bits):
        cell = (layout.rows[k // layout.cols], k % layout.cols)
        try:
            lv = level_map.levels[cell]
        except KeyError:
            raise DomainError(f"layout cell {cell} is not covered by the level map") from None
        if lv >= floor:
            out.append(layout.bit_at(k))
    return out


# ---------------------------------------------------------------------------
# Greedy attack


@dataclass
class AttackReport:
    iterations: int
    flipped: list[BitRef]
    trajectory: list[float]
    reason: str
    losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "flipped": [list(b) for b in self.flipped],
            "trajectory": self.trajectory,
            "losses": self.losses,
            "reason": self.reason,
        }


def _candidate_losses(net: QuantizedNetwork, xq: np.ndarray, y: np.ndarray, cands: list[BitRef]) -> np.ndarray:
    """Batch loss after each single candidate flip, computed incrementally."""
    ws = [l.weights.astype(np.float64) for l in net.layers]
    inputs, pre = [], []
    h = xq
    for w, l in zip(ws, net.layers):
        inputs.append(h)
        z = h @ w.T
        pre.append(z)
        h = np.maximum(z, 0) if l.activation == "relu" else z
    scale = net.logit_scale
    out = np.empty(len(cands))
    by_layer: dict[int, list[int]] = {}
    for i, (layer, *_rest) in enumerate(cands):
        by_layer.setdefault(layer, []).append(i)
    for layer, idx in by_layer.items():
        for lo in range(0, len(idx), _SCORE_CHUNK):
            part = idx[lo : lo + _SCORE_CHUNK]
            r = np.array([cands[i][1] for i in part])
            c = np.array([cands[i][2] for i in part])
            old = ws[layer][r, c]
            new = np.array([flip_bit(int(w), cands[i][3]) for w, i in zip(old, part)])
            z = np.broadcast_to(pre[layer], (len(part),) + pre[layer].shape).copy()
            z[np.arange(len(part)), :, r] += (new - old)[:, None] * inputs[layer][:, c].T
            h = np.maximum(z, 0) if net.layers[layer].activation == "relu" else z
            for w, l in zip(ws[layer + 1 :], net.layers[layer + 1 :]):
                h = h @ w.T
                if l.activation == "relu":
                    h = np.maximum(h, 0)
            out[part] = batch_loss(h, y, scale)
    return out


def attack(
    network: QuantizedNetwork,
    data: Dataset,
    allowed: Iterable[BitRef],
    max_iters: int = DEFAULT_MAX_ITERS,
    target_acc: float = RANDOM_GUESS,
    batch_size: int = BATCH_SIZE,
) -> AttackReport:
    """Greedy loss ascent: each step applies the allowed, not yet flipped bit
    whose flip maximizes batch cross-entropy (ties -> lowest layout index)."""
    layout = CellLayout(tuple(l.weights.shape for l in network.layers), (0,), network.n_bits)
    pool = sorted(set(map(tuple, allowed)), key=layout.index)
    batch = data.head(batch_size)
    xq = network.quantize_inputs(batch.x)
    net = network
    trajectory = [evaluate(net, data)]
    flipped: list[BitRef] = []
    losses: list[float] = []
    if not pool:
        return AttackReport(0, [], trajectory, "no flippable bits")
    reason = "max_iters reached"
    for _ in range(max_iters):
        if trajectory[-1] <= target_acc:
            reason = "target reached"
            break
        if not pool:
            reason = "allowed bits exhausted"
            break
        scores = _candidate_losses(net, xq, batch.y, pool)
        best = int(np.argmax(scores))
        ref = pool.pop(best)
        net = net.with_flips([ref])
        flipped.append(ref)
        losses.append(float(scores[best]))
        trajectory.append(evaluate(net, data))
    else:
        if trajectory[-1] <= target_acc:
            reason = "target reached"
    return AttackReport(len(flipped), flipped, trajectory, reason, losses)


# ---------------------------------------------------------------------------
# Persistence


def network_to_bytes(net: QuantizedNetwork) -> bytes:
    out = [_NET_HEADER.pack(NET_MAGIC, NET_VERSION, len(net.layers), net.input_scale)]
    for l in net.layers:
        o, i = l.weights.shape
        out.append(_LAYER_HEADER.pack(o, i, l.scale, ACTIVATIONS.index(l.activation)))
    out += [l.weights.tobytes(order="C") for l in net.layers]
    return b"".join(out)


def network_from_bytes(blob: bytes) -> QuantizedNetwork:
    if len(blob) < _NET_HEADER.size:
        raise FileFormatError("network file shorter than its header")
    magic, version, n_layers, input_scale = _NET_HEADER.unpack_from(blob)
    if magic != NET_MAGIC or version != NET_VERSION:
        raise FileFormatError("not a network file (bad magic or version)")
    off = _NET_HEADER.size
    if len(blob) < off + n_layers * _LAYER_HEADER.size:
        raise FileFormatError("network file truncated in layer headers")
    heads = []
    for _ in range(n_layers):
        o, i, scale, act = _LAYER_HEADER.unpack_from(blob, off)
        if act >= len(ACTIVATIONS):
            raise FileFormatError(f"unknown activation code {act}")
        heads.append((o, i, scale, ACTIVATIONS[act]))
        off += _LAYER_HEADER.size
    if len(blob) != off + sum(o * i for o, i, _, _ in heads):
        raise FileFormatError("network payload size does not match its header")
    layers = []
    for o, i, scale, act in heads:
        w = np.frombuffer(blob, np.int8, o * i, off).reshape(o, i).copy()
        layers.append(QuantLayer(w, scale, act))
        off += o * i
    return QuantizedNetwork(tuple(layers), input_scale)


def save_network(net: QuantizedNetwork, path: str | Path) -> None:
    Path(path).write_bytes(network_to_bytes(net))


def load_network(path: str | Path) -> QuantizedNetwork:
    return network_from_bytes(Path(path).read_bytes())
