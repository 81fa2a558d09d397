"""Pixel classifier network: conv+maxpool stages with maxout activations and
inverted dropout, a fully connected maxout hidden layer, and a 2-way softmax
head (class 0 = non-MA, class 1 = MA).

Dropout probabilities are DROP probabilities; masks scale retained units by
1/(1-p) so inference runs the weights unchanged. Maxout takes the max over
groups of `pieces` adjacent linear maps/units, so a conv layer with m output
maps owns m*pieces linear filter maps and an fc layer with n units owns
n*pieces linear units.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .errors import DataError, GeometryError, NumericError, ShapeMismatchError

MA = 1
NON_MA = 0

CHECKPOINT_MAGIC = b"MADNN1\x00"

_KIND_CODES = {"input": 0, "conv": 1, "maxpool": 2, "fc": 3, "softmax": 4}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0          # output maps (conv), units (fc/softmax), channels (input)
    filter_size: int = 0
    stride: int = 1
    drop_p: float = 0.0
    pieces: int = 1

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if not 0.0 <= self.drop_p < 1.0:
            raise ValueError(f"drop probability must be in [0,1), got {self.drop_p}")
        if self.pieces < 1:
            raise ValueError(f"maxout pieces must be >= 1, got {self.pieces}")
        if self.kind == "softmax" and (self.pieces != 1 or self.drop_p != 0.0):
            raise ValueError("softmax layer must have pieces=1 and drop_p=0")
        if self.kind == "maxpool" and self.drop_p != 0.0:
            raise ValueError("maxpool layer does not take dropout")


@dataclass(frozen=True)
class NetworkSpec:
    input_side: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers or self.layers[0].kind != "input":
            raise ValueError("first layer must be the input layer")
        last = self.layers[-1]
        if last.kind != "softmax" or last.units != 2:
            raise ValueError("final layer must be a 2-unit softmax")
        self.shapes()  # raises GeometryError if the stack does not chain

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (post-maxout counts for conv/fc)."""
        out: list[tuple[int, ...]] = []
        depth, side = 0, 0
        flat: int | None = None
        for i, ly in enumerate(self.layers):
            if ly.kind == "input":
                if i != 0:
                    raise GeometryError("input layer only allowed first")
                depth, side = ly.units, self.input_side
                out.append((depth, side, side))
            elif ly.kind == "conv":
                if flat is not None:
                    raise GeometryError("conv layer after flattening")
                g = tensor.ConvGeometry(side, ly.filter_size, 0, ly.stride,
                                        depth, ly.units * ly.pieces)
                side = g.output_size
                depth = ly.units
                out.append((depth, side, side))
            elif ly.kind == "maxpool":
                if flat is not None:
                    raise GeometryError("maxpool layer after flattening")
                g = tensor.PoolGeometry(side, ly.filter_size, ly.stride)
                side = g.output_size
                out.append((depth, side, side))
            elif ly.kind == "fc":
                if flat is None:
                    flat = depth * side * side
                out.append((ly.units,))
                flat = ly.units
            else:  # softmax
                if flat is None:
                    flat = depth * side * side
                out.append((ly.units,))
                flat = ly.units
        return out

    def drop_profile(self) -> list[float]:
        return [ly.drop_p for ly in self.layers]

    def fan_ins(self) -> list[int | None]:
        """Incoming connection count per parameterized layer (None otherwise)."""
        fans: list[int | None] = []
        shapes = self.shapes()
        for i, ly in enumerate(self.layers):
            if ly.kind == "conv":
                d_in = shapes[i - 1][0]
                fans.append(d_in * ly.filter_size * ly.filter_size)
            elif ly.kind in ("fc", "softmax"):
                fans.append(int(np.prod(shapes[i - 1])))
            else:
                fans.append(None)
        return fans


def build_network(input_side: int,
                  stages: tuple[tuple[int, int, int, int, int], ...],
                  fc_units: int,
                  maxout_pieces: int = 2,
                  drop_profile: tuple[float, ...] | None = None,
                  input_channels: int = 3) -> NetworkSpec:
    """Assemble a conv/maxpool stack + fc + softmax network.

    Each stage is (maps, filter_size, conv_stride, pool_extent, pool_stride).
    drop_profile lists drop probabilities for [input, conv..., fc].
    """
    if drop_profile is None:
        drop_profile = (0.0,) * (len(stages) + 2)
    if len(drop_profile) != len(stages) + 2:
        raise ValueError(
            f"drop profile needs {len(stages) + 2} entries "
            f"(input, one per conv stage, fc); got {len(drop_profile)}")
    layers = [LayerSpec("input", input_channels, drop_p=drop_profile[0])]
    for s, (maps, fsize, cstride, pext, pstride) in enumerate(stages):
        layers.append(LayerSpec("conv", maps, fsize, cstride,
                                drop_profile[1 + s], maxout_pieces))
        layers.append(LayerSpec("maxpool", 0, pext, pstride))
    layers.append(LayerSpec("fc", fc_units, drop_p=drop_profile[-1],
                            pieces=maxout_pieces))
    layers.append(LayerSpec("softmax", 2))
    return NetworkSpec(input_side, tuple(layers))


def build_detector_network(input_side: int = 129,
                           maxout_pieces: int = 2,
                           drop_profile: tuple[float, ...] = (0.1, 0.2, 0.2, 0.5, 0.5),
                           conv_maps: tuple[int, int, int] = (64, 64, 64),
                           fc_units: int = 290) -> NetworkSpec:
    """The reference detector stack: three 5x5 conv stages (strides 2,1,1),
    each followed by overlapping 3x3/stride-2 max-pooling, one fc maxout
    layer, softmax pair on top. Defaults give per-layer sizes
    3x129x129 -> 64x63x63 -> 64x31x31 -> 64x27x27 -> 64x13x13 -> 64x9x9
    -> 64x4x4 -> 290 -> 2.
    """
    stages = (
        (conv_maps[0], 5, 2, 3, 2),
        (conv_maps[1], 5, 1, 3, 2),
        (conv_maps[2], 5, 1, 3, 2),
    )
    return build_network(input_side, stages, fc_units, maxout_pieces, drop_profile)


class NetworkState:
    """Learned parameters, aligned with spec.layers (None for layers without)."""

    def __init__(self, spec: NetworkSpec, weights: list, biases: list):
        self.spec = spec
        self.weights = weights
        self.biases = biases

    def copy(self) -> "NetworkState":
        return NetworkState(self.spec,
                            [None if w is None else w.copy() for w in self.weights],
                            [None if b is None else b.copy() for b in self.biases])

    def param_arrays(self) -> list[np.ndarray]:
        """Flat parameter list in declaration order: W then b per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                out.extend((w, b))
        return out

    def maxnorm_flags(self) -> list[bool]:
        """True for weight matrices subject to the per-unit max-norm constraint
        (fully connected layers only, biases excluded)."""
        out = []
        for ly, w in zip(self.spec.layers, self.weights):
            if w is not None:
                out.extend((ly.kind in ("fc", "softmax"), False))
        return out

    def set_params(self, arrays: list[np.ndarray]) -> None:
        it = iter(arrays)
        for i, w in enumerate(self.weights):
            if w is not None:
                self.weights[i] = next(it)
                self.biases[i] = next(it)


def init_state(spec: NetworkSpec, rng: np.random.Generator) -> NetworkState:
    """Zero-mean uniform weights with half-width 1/sqrt(fan_in), zero biases."""
    shapes = spec.shapes()
    weights: list = []
    biases: list = []
    for i, ly in enumerate(spec.layers):
        if ly.kind == "conv":
            d_in = shapes[i - 1][0]
            n_lin = ly.units * ly.pieces
            half = 1.0 / np.sqrt(d_in * ly.filter_size ** 2)
            weights.append(rng.uniform(-half, half,
                                       (n_lin, d_in, ly.filter_size, ly.filter_size)))
            biases.append(np.zeros(n_lin))
        elif ly.kind in ("fc", "softmax"):
            d_in = int(np.prod(shapes[i - 1]))
            n_lin = ly.units * ly.pieces
            half = 1.0 / np.sqrt(d_in)
            weights.append(rng.uniform(-half, half, (n_lin, d_in)))
            biases.append(np.zeros(n_lin))
        else:
            weights.append(None)
            biases.append(None)
    return NetworkState(spec, weights, biases)


def maxout_forward(z: np.ndarray, pieces: int):
    """Max over groups of `pieces` consecutive entries of a flat vector.

    Returns (h, winners); winners hold the in-group index of the maximum,
    first index on ties.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeMismatchError(f"maxout_forward expects a flat vector, got {z.shape}")
    if z.size % pieces:
        raise ShapeMismatchError(
            f"unit count {z.size} not divisible by pieces {pieces}")
    grouped = z.reshape(-1, pieces)
    winners = grouped.argmax(axis=1)
    return grouped.max(axis=1), winners


def _maxout_batch(z: np.ndarray, pieces: int):
    """Grouped max over axis 1 of (B, m*pieces, ...)."""
    if z.shape[1] % pieces:
        raise ShapeMismatchError(
            f"channel count {z.shape[1]} not divisible by pieces {pieces}")
    g = z.reshape(z.shape[0], z.shape[1] // pieces, pieces, *z.shape[2:])
    winners = g.argmax(axis=2)
    return np.take_along_axis(g, np.expand_dims(winners, 2), axis=2).squeeze(2), winners


def _maxout_backward_batch(grad_h: np.ndarray, winners: np.ndarray,
                           pieces: int) -> np.ndarray:
    full = np.zeros((grad_h.shape[0], grad_h.shape[1], pieces, *grad_h.shape[2:]))
    np.put_along_axis(full, np.expand_dims(winners, 2),
                      np.expand_dims(grad_h, 2), axis=2)
    return full.reshape(grad_h.shape[0], grad_h.shape[1] * pieces, *grad_h.shape[2:])


def dropout_mask(p: float, shape, rng: np.random.Generator) -> np.ndarray:
    """Inverted-scaling dropout mask: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must be in [0,1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) * (1.0 / (1.0 - p))


@dataclass
class ForwardTrace:
    """Training-mode caches needed by the backward pass."""
    records: list = field(default_factory=list)
    probs: np.ndarray | None = None


def _check_finite(arr: np.ndarray, layer_name: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite activation in layer {layer_name}")


def forward_batch(state: NetworkState, spec: NetworkSpec, x: np.ndarray,
                  mode: str = "infer", rng: np.random.Generator | None = None):
    """Run a batch (B, C, side, side) through the network.

    Returns (probs (B, 2), trace) in train mode, (probs, None) in infer mode.
    Train mode draws one dropout mask per dropout-carrying layer per batch
    element from `rng`.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout masks")
    x = np.asarray(x, dtype=np.float64)
    shapes = spec.shapes()
    if x.ndim != 4 or x.shape[1:] != shapes[0]:
        raise ShapeMismatchError(
            f"input batch shape {x.shape} != (B, {', '.join(map(str, shapes[0]))})")
    trace = ForwardTrace() if train else None
    y = x
    for i, ly in enumerate(spec.layers):
        rec: dict = {}
        if ly.kind == "input":
            if train and ly.drop_p > 0:
                rec["mask"] = dropout_mask(ly.drop_p, y.shape, rng)
                y = y * rec["mask"]
        elif ly.kind == "conv":
            rec["x_in"] = y
            z = tensor.conv2d_forward_batch(y, state.weights[i], state.biases[i],
                                            stride=ly.stride)
            h, winners = _maxout_batch(z, ly.pieces)
            rec["winners"] = winners
            if train and ly.drop_p > 0:
                rec["mask"] = dropout_mask(ly.drop_p, h.shape, rng)
                h = h * rec["mask"]
            y = h
            _check_finite(y, f"conv[{i}]")
        elif ly.kind == "maxpool":
            rec["in_hw"] = y.shape[2:]
            y, argmax = tensor.maxpool_forward_batch(y, ly.filter_size, ly.stride)
            rec["argmax"] = argmax
        elif ly.kind == "fc":
            y = y.reshape(y.shape[0], -1)
            rec["x_in"] = y
            z = y @ state.weights[i].T + state.biases[i]
            h, winners = _maxout_batch(z, ly.pieces)
            rec["winners"] = winners
            if train and ly.drop_p > 0:
                rec["mask"] = dropout_mask(ly.drop_p, h.shape, rng)
                h = h * rec["mask"]
            y = h
            _check_finite(y, f"fc[{i}]")
        else:  # softmax
            y = y.reshape(y.shape[0], -1)
            rec["x_in"] = y
            z = y @ state.weights[i].T + state.biases[i]
            _check_finite(z, f"softmax[{i}]")
            zs = z - z.max(axis=1, keepdims=True)
            e = np.exp(zs)
            y = e / e.sum(axis=1, keepdims=True)
            rec["logits"] = z
        assert y.shape[1:] == shapes[i], (y.shape, shapes[i], ly.kind)
        if trace is not None:
            trace.records.append(rec)
    if trace is not None:
        trace.probs = y
    return y, trace


def forward(state: NetworkState, spec: NetworkSpec, window: np.ndarray,
            mode: str = "infer", rng: np.random.Generator | None = None):
    """Single-window forward pass; returns (probabilities (2,), trace or None)."""
    probs, trace = forward_batch(state, spec, np.asarray(window)[None], mode, rng)
    return probs[0], trace


def predict_proba_batch(state: NetworkState, spec: NetworkSpec,
                        windows: np.ndarray) -> np.ndarray:
    probs, _ = forward_batch(state, spec, windows, "infer")
    return probs[:, MA]


def predict_proba(state: NetworkState, spec: NetworkSpec, window: np.ndarray) -> float:
    """MA-class probability of one window at inference."""
    return float(predict_proba_batch(state, spec, np.asarray(window)[None])[0])


def loss_and_backward_batch(state: NetworkState, spec: NetworkSpec,
                            trace: ForwardTrace, labels: np.ndarray):
    """Mean negative log-likelihood over the batch plus its exact gradients.

    Returns (loss, grads) with grads aligned to state.param_arrays() and
    already averaged over the batch. Gradients flow only through retained
    dropout units and maxout/pool winners.
    """
    if trace is None or trace.probs is None or not trace.records:
        raise ValueError("loss_and_backward needs the trace of a train-mode forward")
    labels = np.asarray(labels, dtype=np.int64)
    b_ = trace.probs.shape[0]
    if labels.shape != (b_,):
        raise ShapeMismatchError(f"labels shape {labels.shape} != ({b_},)")
    logits = trace.records[-1]["logits"]
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(b_), labels]))

    grads_rev: list[np.ndarray] = []
    onehot = np.zeros_like(trace.probs)
    onehot[np.arange(b_), labels] = 1.0
    grad = (trace.probs - onehot) / b_  # d(mean loss)/d logits
    shapes = spec.shapes()
    for i in range(len(spec.layers) - 1, -1, -1):
        ly = spec.layers[i]
        rec = trace.records[i]
        if ly.kind in ("softmax", "fc"):
            if ly.kind == "fc":
                if "mask" in rec:
                    grad = grad * rec["mask"]
                grad = _maxout_backward_batch(grad, rec["winners"], ly.pieces)
            gw = grad.T @ rec["x_in"]
            gb = grad.sum(axis=0)
            grads_rev.extend((gb, gw))
            grad = grad @ state.weights[i]
            if len(shapes[i - 1]) == 3:  # un-flatten toward spatial layers
                grad = grad.reshape(b_, *shapes[i - 1])
        elif ly.kind == "maxpool":
            grad = tensor.maxpool_backward_batch(rec["argmax"], grad, *rec["in_hw"])
        elif ly.kind == "conv":
            if "mask" in rec:
                grad = grad * rec["mask"]
            grad = _maxout_backward_batch(grad, rec["winners"], ly.pieces)
            first_conv = not any(l.kind == "conv" for l in spec.layers[:i])
            gx, gw, gb = tensor.conv2d_backward_batch(
                rec["x_in"], state.weights[i], grad, stride=ly.stride,
                need_input_grad=not first_conv)
            grads_rev.extend((gb, gw))
            grad = gx
        else:  # input: nothing upstream owns parameters
            break
    return loss, list(reversed(grads_rev))


def loss_and_backward(state: NetworkState, spec: NetworkSpec,
                      trace: ForwardTrace, label: int):
    """Single-window loss and parameter gradients (see batch variant)."""
    return loss_and_backward_batch(state, spec, trace, np.asarray([label]))


def _checksum64(data: bytes) -> int:
    """64-bit checksum (first 8 bytes of SHA-256, little-endian)."""
    return struct.unpack("<Q", hashlib.sha256(data).digest()[:8])[0]


def save_checkpoint(path, spec: NetworkSpec, state: NetworkState) -> None:
    """Little-endian binary: magic, layer records as u32 fields, parameter
    tensors as float32 in declaration order, trailing 64-bit checksum."""
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<II", len(spec.layers), spec.input_side)]
    for ly in spec.layers:
        parts.append(struct.pack(
            "<8I", _KIND_CODES[ly.kind], ly.units, ly.filter_size, ly.stride,
            round(ly.drop_p * 1_000_000), ly.pieces, 0, 0))
    for arr in state.param_arrays():
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", _checksum64(body)))


def load_checkpoint(path):
    """Read a checkpoint; rejects wrong magic or checksum. Returns (spec, state)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 16:
        raise DataError(f"checkpoint {path} truncated")
    body, tail = blob[:-8], blob[-8:]
    if not body.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"checkpoint {path} has wrong magic")
    if struct.unpack("<Q", tail)[0] != _checksum64(body):
        raise DataError(f"checkpoint {path} failed checksum validation")
    off = len(CHECKPOINT_MAGIC)
    n_layers, input_side = struct.unpack_from("<II", body, off)
    off += 8
    layers = []
    for _ in range(n_layers):
        kind, units, fsize, stride, p_ppm, pieces, _, _ = struct.unpack_from(
            "<8I", body, off)
        off += 32
        if kind not in _KIND_NAMES:
            raise DataError(f"checkpoint {path} has unknown layer kind {kind}")
        layers.append(LayerSpec(_KIND_NAMES[kind], units, fsize, stride,
                                p_ppm / 1_000_000, pieces))
    spec = NetworkSpec(input_side, tuple(layers))
    rng = tensor.seeded_rng(0)
    state = init_state(spec, rng)
    arrays = []
    for ref in state.param_arrays():
        n = ref.size
        if off + 4 * n > len(body):
            raise DataError(f"checkpoint {path} parameter block truncated")
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off)
        off += 4 * n
        arrays.append(arr.astype(np.float64).reshape(ref.shape))
    if off != len(body):
        raise DataError(f"checkpoint {path} has {len(body) - off} trailing bytes")
    state.set_params(arrays)
    return spec, state
