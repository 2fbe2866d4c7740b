"""Small patch classifier: two conv/pool stages, a dense layer and a
two-way softmax, trained with ADAGRAD on categorical cross-entropy.

Everything is plain numpy. Batches are passed around as
``(batch, channels, height, width)``; for image patches the channel axis is
the slice axis of a ``pz x py x px`` patch. Internally the layers work in
NHWC so that the im2col products are contiguous.
"""
from __future__ import annotations

import copy
import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DivergenceError(FloatingPointError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class Topology:
    patch_shape: tuple[int, int, int] = (3, 33, 33)  # (pz, py, px)
    conv_filters: tuple[int, ...] = (32, 64)
    kernel_sizes: tuple[int, ...] = (5, 5)
    dense_units: int = 256
    n_classes: int = 2
    pool: int = 2

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(v) for v in self.patch_shape))
        object.__setattr__(self, "conv_filters", tuple(int(v) for v in self.conv_filters))
        object.__setattr__(self, "kernel_sizes", tuple(int(v) for v in self.kernel_sizes))

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "Topology":
        return cls(**json.loads(text))

    def shape_chain(self) -> list[tuple[int, int, int]]:
        """(height, width, channels) after the input and after every pooling stage."""
        depth, h, w = self.patch_shape
        chain = [(h, w, depth)]
        for filters in self.conv_filters:
            h, w = _ceil_div(h, self.pool), _ceil_div(w, self.pool)
            chain.append((h, w, filters))
        return chain

    def validate(self):
        if len(self.conv_filters) != len(self.kernel_sizes) or not self.conv_filters:
            raise ValueError("conv_filters and kernel_sizes must be non-empty and of equal length")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError("kernel sizes must be odd so that same-padding is symmetric")
        if self.n_classes != 2:
            raise ValueError("only two-class output is supported")
        if min(self.patch_shape) < 1 or self.dense_units < 1 or self.pool < 2:
            raise ValueError(f"invalid topology {self}")
        # ceil-mode pooling never produces 0; a stage that emits a single
        # pixel has nothing left to pool, which is the collapse we reject
        h, w = self.patch_shape[1:]
        for stage in range(len(self.conv_filters)):
            if h < self.pool or w < self.pool:
                raise ValueError(
                    f"pooling stage {stage + 1} receives a {h}x{w} map; spatial size collapsed")
            h, w = _ceil_div(h, self.pool), _ceil_div(w, self.pool)
            if h * w <= 1:
                raise ValueError(
                    f"spatial size collapses to {h}x{w} after pooling stage {stage + 1}")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass
class NetParams:
    topology: Topology
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    acc_weights: list[np.ndarray]
    acc_biases: list[np.ndarray]
    epochs_trained: int = 0
    history: list[tuple[int, float]] = field(default_factory=list)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "NetParams":
        return copy.deepcopy(self)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def equals(self, other: "NetParams") -> bool:
        """Bit-level equality of topology, parameters and accumulators."""
        if self.topology != other.topology:
            return False
        mine = self.arrays() + self.acc_weights + self.acc_biases
        theirs = other.arrays() + other.acc_weights + other.acc_biases
        return all(a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
                   for a, b in zip(mine, theirs))


@dataclass
class TrainConfig:
    learning_rate: float = 0.015
    epochs: int = 500
    patches_per_epoch: int = 100_000
    minibatch_size: int = 5000
    dropout_rate: float = 0.5
    rng_seed: int = 0
    adagrad_epsilon: float = 1e-8
    # gradient of one minibatch is accumulated over chunks of this many
    # samples, in a fixed order, to bound im2col memory
    chunk_size: int = 512


def build_network(topology: Topology | None = None, seed: int = 0, conv_std: float = 0.01,
                  dense_std: float = 0.01, dtype=np.float32) -> NetParams:
    """Gaussian-initialised weights, zero biases and zero ADAGRAD accumulators."""
    topology = topology or Topology()
    topology.validate()
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    channels = topology.patch_shape[0]
    for filters, k in zip(topology.conv_filters, topology.kernel_sizes):
        weights.append(rng.normal(0.0, conv_std, (channels, k, k, filters)).astype(dtype))
        biases.append(np.zeros(filters, dtype))
        channels = filters
    h, w, c = topology.shape_chain()[-1]
    fan_in = h * w * c
    for units in (topology.dense_units, topology.n_classes):
        weights.append(rng.normal(0.0, dense_std, (fan_in, units)).astype(dtype))
        biases.append(np.zeros(units, dtype))
        fan_in = units
    return NetParams(topology, weights, biases,
                     [np.zeros_like(w) for w in weights], [np.zeros_like(b) for b in biases])


# layers ---------------------------------------------------------------------

def _im2col(x, k):
    """``(n, h, w, c)`` -> ``(n*h*w, c*k*k)`` patches of a same-padded input."""
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    return sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(n * h * w, c * k * k)


def _conv_forward(x, w, b):
    """Same-padded stride-1 convolution on NHWC input; ``w`` is ``(c, k, k, f)``."""
    n, h, wd, _ = x.shape
    cols = _im2col(x, w.shape[1])
    out = cols @ w.reshape(-1, w.shape[3]) + b
    return out.reshape(n, h, wd, -1), cols


def _conv_backward(dout, cols, w, need_dx=True):
    f = w.shape[3]
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # input gradient is a same convolution with the spatially flipped,
    # channel-transposed kernel
    w_flip = np.ascontiguousarray(w[:, ::-1, ::-1, :].transpose(3, 1, 2, 0))
    dx, _ = _conv_forward(dout, w_flip, 0)
    return dx, dw, db


def _pool_forward(x, s):
    """Ceil-mode s x s max pooling with stride s; returns output and argmax routing."""
    n, h, w, c = x.shape
    ho, wo = _ceil_div(h, s), _ceil_div(w, s)
    if ho * s != h or wo * s != w:
        x = np.pad(x, ((0, 0), (0, ho * s - h), (0, wo * s - w), (0, 0)),
                   constant_values=-np.inf)
    win = x.reshape(n, ho, s, wo, s, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, s * s)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, x_shape, s):
    n, h, w, c = x_shape
    ho, wo = dout.shape[1:3]
    dwin = np.zeros((n, ho, wo, c, s * s), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dx = dwin.reshape(n, ho, wo, c, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * s, wo * s, c)
    return dx[:, :h, :w, :]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _dropout_mask(shape, rate, rng, dtype):
    if rate <= 0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


def _check_batch(params: NetParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != params.topology.patch_shape:
        raise ValueError(f"batch shape {batch.shape} does not match patch shape "
                         f"{params.topology.patch_shape}")
    return np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=params.dtype)


def forward(params: NetParams, batch, training_mode: bool = False, rng=None,
            dropout_rate: float = 0.5):
    """Run the network on a ``(batch, pz, py, px)`` array.

    In training mode inverted dropout is applied to the inputs of the dense
    and output layers, so inference is a plain pass with no rescaling.
    Returns ``(probs, cache)``.
    """
    if training_mode and rng is None:
        raise ValueError("training mode needs an rng for the dropout masks")
    x = _check_batch(params, batch)
    topo = params.topology
    n_conv = len(topo.conv_filters)
    cache = {"conv": [], "input_shape": x.shape}
    for i in range(n_conv):
        z, cols = _conv_forward(x, params.weights[i], params.biases[i])
        a = np.maximum(z, 0)
        pooled, arg = _pool_forward(a, topo.pool)
        cache["conv"].append((x.shape, cols, z > 0, a.shape, arg))
        x = pooled
    cache["flat_shape"] = x.shape
    h = x.reshape(x.shape[0], -1)
    dtype = params.dtype
    m1 = _dropout_mask(h.shape, dropout_rate, rng, dtype) if training_mode else None
    h_in = h * m1 if m1 is not None else h
    z1 = h_in @ params.weights[n_conv] + params.biases[n_conv]
    a1 = np.maximum(z1, 0)
    m2 = _dropout_mask(a1.shape, dropout_rate, rng, dtype) if training_mode else None
    a1_in = a1 * m2 if m2 is not None else a1
    logits = a1_in @ params.weights[n_conv + 1] + params.biases[n_conv + 1]
    probs = _softmax(logits)
    cache.update(h_in=h_in, m1=m1, z1=z1, a1_in=a1_in, m2=m2, logits=logits)
    return probs, cache


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    p = probs[np.arange(len(targets)), targets]
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(p.astype(np.float64))))


def _backward(params: NetParams, probs, targets, cache, scale):
    """Gradients of ``scale * sum_n -log p_n(target)``."""
    n_conv = len(params.topology.conv_filters)
    dW = [None] * len(params.weights)
    dB = [None] * len(params.biases)
    dlogits = probs.copy()
    dlogits[np.arange(len(targets)), targets] -= 1
    dlogits *= params.dtype.type(scale)
    dW[n_conv + 1] = cache["a1_in"].T @ dlogits
    dB[n_conv + 1] = dlogits.sum(axis=0)
    da1 = dlogits @ params.weights[n_conv + 1].T
    if cache["m2"] is not None:
        da1 *= cache["m2"]
    dz1 = da1 * (cache["z1"] > 0)
    dW[n_conv] = cache["h_in"].T @ dz1
    dB[n_conv] = dz1.sum(axis=0)
    dh = dz1 @ params.weights[n_conv].T
    if cache["m1"] is not None:
        dh *= cache["m1"]
    dx = dh.reshape(cache["flat_shape"])
    for i in reversed(range(n_conv)):
        x_shape, cols, active, a_shape, arg = cache["conv"][i]
        da = _pool_backward(dx, arg, a_shape, params.topology.pool)
        dz = da * active
        dx, dW[i], dB[i] = _conv_backward(dz, cols, params.weights[i], need_dx=i > 0)
    return dW, dB


def loss_and_grad(params: NetParams, batch, targets, rng=None, dropout_rate: float = 0.5):
    """Mean categorical cross-entropy and its gradients.

    Dropout is active only when ``rng`` is given; passing identically seeded
    generators reproduces the same masks.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() > 1):
        raise ValueError("targets must be 0 or 1")
    probs, cache = forward(params, batch, training_mode=rng is not None, rng=rng,
                           dropout_rate=dropout_rate)
    loss = cross_entropy(probs, targets)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    dW, dB = _backward(params, probs, targets, cache, 1.0 / len(targets))
    return loss, (dW, dB)


def adagrad_step(params: NetParams, gradients, learning_rate: float = 0.015,
                 epsilon: float = 1e-8) -> NetParams:
    """In-place ADAGRAD update; returns ``params`` for chaining."""
    dW, dB = gradients
    lr = params.dtype.type(learning_rate)
    eps = params.dtype.type(epsilon)
    for p, acc, g in zip(params.weights + params.biases, params.acc_weights + params.acc_biases,
                         list(dW) + list(dB)):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        acc += g * g
        p -= lr * g / np.sqrt(acc + eps)
    return params


def _minibatch_grad(params, patches, targets, rng, cfg: TrainConfig):
    """Summed gradient over fixed-order chunks, scaled to the minibatch mean."""
    n = len(targets)
    total_loss = 0.0
    dW = [np.zeros_like(w) for w in params.weights]
    dB = [np.zeros_like(b) for b in params.biases]
    for start in range(0, n, cfg.chunk_size):
        sl = slice(start, start + cfg.chunk_size)
        probs, cache = forward(params, patches[sl], training_mode=cfg.dropout_rate > 0,
                               rng=rng, dropout_rate=cfg.dropout_rate)
        t = targets[sl]
        total_loss += cross_entropy(probs, t) * len(t)
        gw, gb = _backward(params, probs, t, cache, 1.0 / n)
        for acc, g in zip(dW + dB, gw + gb):
            acc += g
    loss = total_loss / n
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} at epoch {params.epochs_trained + 1}")
    return loss, (dW, dB)


def train(params: NetParams, sampler, config: TrainConfig, epochs_to_run: int,
          rng=None) -> NetParams:
    """Minibatch ADAGRAD for ``epochs_to_run`` epochs; returns a new NetParams.

    ``sampler.sample(k, rng)`` must return ``(patches, targets)`` for one
    epoch. Without an explicit rng the stream is seeded from
    ``config.rng_seed`` and the epoch counter, so warm-started continuations
    are reproducible and do not replay earlier epochs.
    """
    params = params.copy()
    if epochs_to_run <= 0:
        return params
    if rng is None:
        rng = np.random.default_rng([config.rng_seed, params.epochs_trained])
    for _ in range(epochs_to_run):
        patches, targets = sampler.sample(config.patches_per_epoch, rng)
        order = rng.permutation(len(targets))
        patches, targets = patches[order], np.asarray(targets)[order]
        losses, counts = [], []
        for start in range(0, len(targets), config.minibatch_size):
            sl = slice(start, start + config.minibatch_size)
            loss, grads = _minibatch_grad(params, patches[sl], targets[sl], rng, config)
            adagrad_step(params, grads, config.learning_rate, config.adagrad_epsilon)
            losses.append(loss)
            counts.append(len(targets[sl]))
        params.epochs_trained += 1
        params.history.append((params.epochs_trained, float(np.average(losses, weights=counts))))
    return params


def predict(params: NetParams, patches, chunk_size: int = 2048) -> np.ndarray:
    """Inference-mode class probabilities, shape ``(n, 2)``."""
    patches = np.asarray(patches)
    if len(patches) == 0:
        return np.zeros((0, params.topology.n_classes), dtype=params.dtype)
    out = [forward(params, patches[s:s + chunk_size])[0] for s in range(0, len(patches), chunk_size)]
    return np.concatenate(out)


# serialisation ----------------------------------------------------------------

MAGIC = b"DCNN"
FORMAT_VERSION = 1


def save_params(params: NetParams, path) -> None:
    """Write the versioned ``DCNN`` container (little-endian float32 arrays)."""
    topo = params.topology.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(topo)))
        fh.write(topo)
        fh.write(struct.pack("<I", params.epochs_trained))
        for w, b, aw, ab in zip(params.weights, params.biases, params.acc_weights, params.acc_biases):
            for arr in (w, b, aw, ab):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> NetParams:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a DCNN parameter file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    (tlen,) = struct.unpack_from("<I", data, 8)
    topology = Topology.from_text(data[12:12 + tlen].decode("utf-8"))
    offset = 12 + tlen
    (epochs,) = struct.unpack_from("<I", data, offset)
    offset += 4
    template = build_network(topology, dtype=np.float32)
    arrays = []
    for w, b in zip(template.weights, template.biases):
        for shape in (w.shape, b.shape, w.shape, b.shape):
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
            arrays.append(arr.astype(np.float32))
            offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return NetParams(topology, arrays[0::4], arrays[1::4], arrays[2::4], arrays[3::4],
                     epochs_trained=epochs)


def write_training_log(params: NetParams, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in params.history:
            writer.writerow([epoch, repr(loss)])
