"""A deliberately small numpy network kernel: explicit forward/backward and ADAM.

Inputs are batch-first arrays. Every ``forward`` returns ``(output, cache)``; the
cache is handed back to ``backward`` together with the upstream gradient.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_FORMAT = "vflprecode-ckpt"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


def _check_shape(name, expected, x):
    if tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(f"layer {name!r} expects input shape (B, {', '.join(map(str, expected))}), got {x.shape}")


class Dense:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng=None, init: str = "uniform", name: str = "dense"):
        self.name = name
        self.in_shape = (n_in,)
        self.out_shape = (n_out,)
        if init == "uniform":
            bound = 1.0 / np.sqrt(n_in)
            W = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
        elif init == "identity":
            if n_in != n_out:
                raise ValueError("identity init needs a square layer")
            W, b = np.eye(n_in), np.zeros(n_out)
        elif init == "zeros":
            W, b = np.zeros((n_in, n_out)), np.zeros(n_out)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params = {"weight": W, "bias": b}

    def forward(self, x):
        _check_shape(self.name, self.in_shape, x)
        return x @ self.params["weight"] + self.params["bias"], x

    def backward(self, x, dy):
        grads = {"weight": x.T @ dy, "bias": dy.sum(axis=0)}
        return grads, dy @ self.params["weight"].T


class ReLU:
    kind = "relu"
    params: dict = {}

    def __init__(self, shape, name: str = "relu"):
        self.name = name
        self.in_shape = self.out_shape = tuple(shape)

    def forward(self, x):
        _check_shape(self.name, self.in_shape, x)
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, dy):
        return {}, dy * mask


class Flatten:
    kind = "flatten"
    params: dict = {}

    def __init__(self, shape, name: str = "flatten"):
        self.name = name
        self.in_shape = tuple(shape)
        self.out_shape = (int(np.prod(shape)),)

    def forward(self, x):
        _check_shape(self.name, self.in_shape, x)
        return x.reshape(x.shape[0], -1), None

    def backward(self, _, dy):
        return {}, dy.reshape((dy.shape[0],) + self.in_shape)


class Conv2d:
    """Square-kernel 2-D convolution on (B, C, H, W) via im2col."""

    kind = "conv2d"

    def __init__(self, in_shape, c_out: int, kernel: int = 3, stride: int = 2, padding: int = 1, rng=None, name="conv2d"):
        c_in, h, w = in_shape
        self.name = name
        self.in_shape = tuple(in_shape)
        self.kernel, self.stride, self.padding = kernel, stride, padding
        ho = (h + 2 * padding - kernel) // stride + 1
        wo = (w + 2 * padding - kernel) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {name!r}: input {in_shape} too small for kernel {kernel}")
        self.out_shape = (c_out, ho, wo)
        fan_in = c_in * kernel * kernel
        bound = 1.0 / np.sqrt(fan_in)
        self.params = {
            "weight": rng.uniform(-bound, bound, size=(c_out, fan_in)),
            "bias": rng.uniform(-bound, bound, size=c_out),
        }

    def _cols(self, x):
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        _, ho, wo = self.out_shape
        win = win[:, :, :ho, :wo]
        B, C = x.shape[:2]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * ho * wo, C * k * k)

    def forward(self, x):
        _check_shape(self.name, self.in_shape, x)
        cols = self._cols(x)
        c_out, ho, wo = self.out_shape
        out = cols @ self.params["weight"].T + self.params["bias"]
        return out.reshape(x.shape[0], ho, wo, c_out).transpose(0, 3, 1, 2), cols

    def backward(self, cols, dy):
        B = dy.shape[0]
        c_out, ho, wo = self.out_shape
        c_in, h, w = self.in_shape
        k, s, p = self.kernel, self.stride, self.padding
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grads = {"weight": dy2.T @ cols, "bias": dy2.sum(axis=0)}
        dcols = (dy2 @ self.params["weight"]).reshape(B, ho, wo, c_in, k, k)
        dxp = np.zeros((B, c_in, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return grads, dxp[:, :, p : p + h, p : p + w]


class Concat:
    """Joins per-branch feature batches along the feature axis."""

    kind = "batch-concat"
    params: dict = {}

    def __init__(self, widths, name: str = "concat"):
        self.name = name
        self.widths = tuple(widths)
        self.out_shape = (sum(self.widths),)

    def forward(self, xs):
        if len(xs) != len(self.widths):
            raise ShapeError(f"layer {self.name!r} expects {len(self.widths)} inputs, got {len(xs)}")
        for w, x in zip(self.widths, xs):
            _check_shape(self.name, (w,), x)
        return np.concatenate(xs, axis=1), None

    def backward(self, _, dy):
        cuts = np.cumsum(self.widths)[:-1]
        return {}, np.split(dy, cuts, axis=1)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: tuple = ()
    seed: int = 0
    init: str = "uniform"


@dataclass
class ForwardCache:
    owner: int
    version: int
    entries: list


class Sequential:
    def __init__(self, layers, name: str = "net"):
        self.name = name
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if tuple(a.out_shape) != tuple(b.in_shape):
                raise ShapeError(f"{name}: {a.name} outputs {a.out_shape} but {b.name} expects {b.in_shape}")
        self.version = 0

    @property
    def in_shape(self):
        return self.layers[0].in_shape

    @property
    def out_shape(self):
        return self.layers[-1].out_shape

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def forward(self, x):
        entries = []
        for layer in self.layers:
            x, c = layer.forward(x)
            entries.append(c)
        return x, ForwardCache(id(self), self.version, entries)

    def backward(self, cache: ForwardCache, dy):
        if cache.owner != id(self) or cache.version != self.version:
            raise StaleCacheError(f"{self.name}: cache does not match the current parameters")
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            g, dy = self.layers[i].backward(cache.entries[i], dy)
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return grads, dy

    def __call__(self, x):
        return self.forward(x)[0]


def build_sequential(specs, in_shape, name: str = "net") -> Sequential:
    """Assemble layers from specs, threading shapes through."""
    layers = []
    shape = tuple(in_shape)
    for i, spec in enumerate(specs):
        rng = np.random.default_rng(spec.seed)
        lname = f"{name}.{i}:{spec.kind}"
        if spec.kind == "dense":
            (n_out,) = spec.dims
            if len(shape) != 1:
                raise ShapeError(f"{lname} needs a flat input, got {shape}")
            layer = Dense(shape[0], n_out, rng, spec.init, lname)
        elif spec.kind == "relu":
            layer = ReLU(shape, lname)
        elif spec.kind == "flatten":
            layer = Flatten(shape, lname)
        elif spec.kind == "conv2d":
            c_out, kernel, stride, padding = spec.dims
            layer = Conv2d(shape, c_out, kernel, stride, padding, rng, lname)
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        layers.append(layer)
        shape = layer.out_shape
    return Sequential(layers, name)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """In-place ADAM update of ``params``; returns the advanced state."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, blocks: dict[str, np.ndarray], meta: dict | None = None, seeds: dict | None = None) -> None:
    """npz container with a JSON header recording version, shapes and seeds."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "blocks": {k: {"shape": list(np.shape(v)), "seed": (seeds or {}).get(k)} for k, v in blocks.items()},
        "meta": meta or {},
    }
    buf = io.BytesIO()
    arrays = {f"b/{k}": np.asarray(v) for k, v in blocks.items()}
    np.savez(buf, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(z["__header__"].tobytes().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        blocks = {}
        for name, info in header["blocks"].items():
            arr = z[f"b/{name}"]
            if list(arr.shape) != info["shape"]:
                raise ValueError(f"block {name} shape {arr.shape} disagrees with header {info['shape']}")
            blocks[name] = arr
    return blocks, header
