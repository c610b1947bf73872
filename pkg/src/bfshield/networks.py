"""Network constructors, the BFNet wrapper, and checkpoint IO.

A Network owns an ordered list of parameter stores plus an architecture
description; concrete graphs are built lazily per batch size (static-graph
style) and share the same parameter storage, so training state is
independent of batching. Every network exposes three heads on the same
logits: the logits themselves, a softmax (or multi-label sigmoid)
cross-entropy loss, and a bound-coefficient logit combination
sum(logits * coeff) whose input gradient drives margin-based attacks.

Checkpoints use a little-endian binary format: magic "BFT1", u32 tensor
count, then per tensor u32 rank, u32 extents, f32 row-major data. The
architecture travels in a JSON sidecar next to the checkpoint.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .bilateral import FilterParams, bilateral_filter_node
from .errors import ConfigError, DataFormatError, ShapeError

__all__ = [
    "Network",
    "ModelOutput",
    "build_mnist_cnn",
    "build_cifar_cnn",
    "build_adaptive_net",
    "build_from_arch",
    "wrap_bfnet",
    "save_tensors",
    "load_tensors",
]


@dataclass
class ModelOutput:
    logits: np.ndarray
    predicted: np.ndarray
    loss: float | None = None


def _init_params(arch: dict) -> list[ParamStore]:
    """Fan-in scaled uniform weights, zero biases, deterministic under the seed."""
    rng = np.random.default_rng(arch["seed"])
    stores = []
    cin = arch["input_shape"][2]
    h, w = arch["input_shape"][:2]
    for i, layer in enumerate(arch["layers"]):
        kind = layer["kind"]
        if kind == "conv":
            kh = kw = layer["ksize"]
            cout = layer["filters"]
            bound = 1.0 / np.sqrt(kh * kw * cin)
            stores.append(ParamStore(f"conv{i}/w", rng.uniform(-bound, bound, (kh, kw, cin, cout)).astype(np.float32)))
            stores.append(ParamStore(f"conv{i}/b", np.zeros(cout, dtype=np.float32)))
            cin = cout
        elif kind == "dense":
            fan_in = layer["in_features"]
            bound = 1.0 / np.sqrt(fan_in)
            stores.append(ParamStore(f"dense{i}/w", rng.uniform(-bound, bound, (fan_in, layer["units"])).astype(np.float32)))
            stores.append(ParamStore(f"dense{i}/b", np.zeros(layer["units"], dtype=np.float32)))
    return stores


class Network:
    """A parameterized classifier over NHWC images with cached per-batch graphs."""

    def __init__(self, arch: dict, stores: list[ParamStore] | None = None):
        self.arch = arch
        self.input_shape = tuple(arch["input_shape"])
        self.n_classes = arch["n_classes"]
        self.head = arch.get("head", "softmax")
        self.stores = stores if stores is not None else _init_params(arch)
        self.sigma_stores = None
        bf = arch.get("bilateral")
        if bf and bf.get("trainable"):
            self.sigma_stores = {
                "log_sigma_s": ParamStore("bf/log_sigma_s", np.float32(np.log(bf["sigma_s"]))),
                "log_sigma_r": ParamStore("bf/log_sigma_r", np.float32(np.log(bf["sigma_r"]))),
            }
        self._graphs: dict[int, dict] = {}

    # -- construction -------------------------------------------------------

    def _build(self, n: int) -> dict:
        h, w, c = self.input_shape
        x = ad.placeholder("x", (n, h, w, c))
        node = x
        bf = self.arch.get("bilateral")
        if bf:
            params = FilterParams(bf["k"], bf["sigma_s"], bf["sigma_r"])
            node = bilateral_filter_node(node, params, trainable_sigmas=bool(bf.get("trainable")), sigma_stores=self.sigma_stores)
        filtered = node
        store_iter = iter(self.stores)
        for layer in self.arch["layers"]:
            kind = layer["kind"]
            if kind == "conv":
                wN = ad.parameter(next(store_iter))
                bN = ad.parameter(next(store_iter))
                node = ad.conv2d(node, wN, bN, padding=layer["padding"], dilation=layer.get("dilation", 1))
            elif kind == "pool":
                node = ad.maxpool2x2(node)
            elif kind == "relu":
                node = ad.relu(node)
            elif kind == "pad_to":
                th, tw = layer["target"]
                ph, pw = th - node.shape[1], tw - node.shape[2]
                node = ad.pad_nd(node, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
            elif kind == "flatten":
                node = ad.reshape(node, (n, int(np.prod(node.shape[1:]))))
            elif kind == "dense":
                wN = ad.parameter(next(store_iter))
                bN = ad.parameter(next(store_iter))
                node = ad.dense(node, wN, bN)
            else:
                raise ConfigError(f"unknown layer kind {kind!r}")
        logits = node
        if logits.shape != (n, self.n_classes):
            raise ShapeError(f"architecture produces logits {logits.shape}, expected {(n, self.n_classes)}")
        y = ad.placeholder("y", (n, self.n_classes))
        coeff = ad.placeholder("c", (n, self.n_classes))
        loss = ad.softmax_cross_entropy(logits, y) if self.head == "softmax" else ad.sigmoid_cross_entropy(logits, y)
        combo = ad.sum_reduce(ad.mul(logits, coeff))
        return {"x": x, "y": y, "c": coeff, "logits": logits, "loss": loss, "combo": combo, "filtered": filtered}

    def graph(self, n: int) -> dict:
        g = self._graphs.get(n)
        if g is None:
            if len(self._graphs) > 8:
                self._graphs.clear()
            g = self._graphs[n] = self._build(n)
        return g

    @property
    def param_stores(self) -> list[ParamStore]:
        all_stores = list(self.stores)
        if self.sigma_stores is not None:
            all_stores += [self.sigma_stores["log_sigma_s"], self.sigma_stores["log_sigma_r"]]
        return all_stores

    def parameter_count(self) -> int:
        return int(sum(s.value.size for s in self.param_stores))

    def summary(self) -> str:
        lines = [f"input {self.input_shape}, classes {self.n_classes}, head {self.head}"]
        if self.arch.get("bilateral"):
            lines.append(f"bilateral {self.arch['bilateral']}")
        for s in self.param_stores:
            lines.append(f"  {s.name:16s} {s.value.shape}")
        lines.append(f"parameters: {self.parameter_count()}")
        return "\n".join(lines)

    # -- evaluation ---------------------------------------------------------

    def _onehot(self, labels, n):
        labels = np.asarray(labels)
        if labels.ndim == 2:
            return labels
        eye = np.eye(self.n_classes, dtype=np.float64)
        return eye[labels.astype(int)]

    def logits(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        x = np.asarray(x)
        outs = []
        for i in range(0, len(x), batch):
            chunk = x[i : i + batch]
            g = self.graph(len(chunk))
            outs.append(ad.forward(g["logits"], {"x": chunk}))
        return np.concatenate(outs)

    def predict(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        return np.argmax(self.logits(x, batch), axis=1)

    def output(self, x: np.ndarray, labels=None) -> ModelOutput:
        z = self.logits(x)
        loss = None if labels is None else self.loss(x, labels)
        return ModelOutput(logits=z, predicted=np.argmax(z, axis=1), loss=loss)

    def loss(self, x: np.ndarray, labels) -> float:
        x = np.asarray(x)
        g = self.graph(len(x))
        return float(ad.forward(g["loss"], {"x": x, "y": self._onehot(labels, len(x))}))

    def input_gradient(self, x: np.ndarray, labels) -> tuple[float, np.ndarray]:
        """Cross-entropy loss and its gradient with respect to the input batch."""
        x = np.asarray(x)
        g = self.graph(len(x))
        ctx = ad.evaluate(g["loss"], {"x": x, "y": self._onehot(labels, len(x))})
        grads = ad.backward(g["loss"], ctx, [g["x"]])
        return float(ctx.value(g["loss"])), grads[g["x"]]

    def param_gradients(self, x: np.ndarray, labels):
        """Cross-entropy loss and gradients for every parameter store."""
        x = np.asarray(x)
        g = self.graph(len(x))
        ctx = ad.evaluate(g["loss"], {"x": x, "y": self._onehot(labels, len(x))})
        wrt = self._param_nodes(g)
        grads = ad.backward(g["loss"], ctx, list(wrt.values()))
        return float(ctx.value(g["loss"])), {s: grads[node] for s, node in wrt.items()}

    def _param_nodes(self, g) -> dict[ParamStore, ad.Node]:
        found = {}
        for node in ad.topo_order(g["loss"]):
            if node.op == "param":
                found[node.attrs["store"]] = node
        return {s: found[s] for s in self.param_stores if s in found}

    def logit_combination_gradient(self, x: np.ndarray, coeff: np.ndarray):
        """Logits and the input gradient of sum(logits * coeff)."""
        x = np.asarray(x)
        g = self.graph(len(x))
        ctx = ad.evaluate(g["combo"], {"x": x, "c": np.asarray(coeff)})
        grads = ad.backward(g["combo"], ctx, [g["x"]])
        return ctx.value(g["logits"]), grads[g["x"]]

    # -- persistence --------------------------------------------------------

    def save(self, path):
        path = Path(path)
        save_tensors(path, [s.value for s in self.param_stores])
        sidecar = {"arch": self.arch, "params": [{"name": s.name, "shape": list(s.value.shape)} for s in self.param_stores]}
        path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path) -> "Network":
        path = Path(path)
        sidecar = json.loads(path.with_name(path.name + ".json").read_text())
        net = build_from_arch(sidecar["arch"])
        tensors = load_tensors(path)
        stores = net.param_stores
        if len(tensors) != len(stores):
            raise DataFormatError(f"checkpoint has {len(tensors)} tensors, architecture needs {len(stores)}")
        for s, t in zip(stores, tensors):
            if tuple(t.shape) != tuple(np.shape(s.value)):
                raise DataFormatError(f"tensor shape {t.shape} does not match parameter {s.name} {np.shape(s.value)}")
            s.value = t.astype(np.float32).reshape(np.shape(s.value))
        return net


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------


def build_mnist_cnn(seed: int = 0) -> Network:
    """28x28x1 -> conv32(5x5)->pool->relu -> conv64(5x5)->pool->relu -> dense1024 -> relu -> dense10."""
    arch = {
        "name": "mnist_cnn",
        "seed": seed,
        "input_shape": [28, 28, 1],
        "n_classes": 10,
        "head": "softmax",
        "layers": [
            {"kind": "conv", "filters": 32, "ksize": 5, "padding": "valid"},
            {"kind": "pool"},
            {"kind": "relu"},
            {"kind": "conv", "filters": 64, "ksize": 5, "padding": "valid"},
            {"kind": "pool"},
            {"kind": "relu"},
            {"kind": "flatten"},
            {"kind": "dense", "units": 1024, "in_features": 4 * 4 * 64},
            {"kind": "relu"},
            {"kind": "dense", "units": 10, "in_features": 1024},
        ],
    }
    return Network(arch)


def build_cifar_cnn(seed: int = 0) -> Network:
    """32x32x3 -> four conv(3x3,same)+pool+relu blocks (32/64/128/256) -> dense4096 -> relu -> dense10."""
    layers = []
    for filters in (32, 64, 128, 256):
        layers += [
            {"kind": "conv", "filters": filters, "ksize": 3, "padding": "same"},
            {"kind": "pool"},
            {"kind": "relu"},
        ]
    layers += [
        {"kind": "flatten"},
        {"kind": "dense", "units": 4096, "in_features": 2 * 2 * 256},
        {"kind": "relu"},
        {"kind": "dense", "units": 10, "in_features": 4096},
    ]
    arch = {
        "name": "cifar_cnn",
        "seed": seed,
        "input_shape": [32, 32, 3],
        "n_classes": 10,
        "head": "softmax",
        "layers": layers,
    }
    return Network(arch)


def build_adaptive_net(candidate_count: int, image_shape=(28, 28, 1), seed: int = 0) -> Network:
    """Filter-parameter predictor: image + luminance Sobel pair -> per-candidate probabilities.

    Input depth is C+2 (the image with its x/y Sobel maps of the luminance
    appended). Three dilation-2 convolutions (64/128/256) each followed by
    2x2 max pooling, then dense(64) and a dense multi-label head trained
    with a sigmoid. Spatial extent is padded up to a multiple of 8 so the
    poolings divide evenly.
    """
    if candidate_count < 1:
        raise ConfigError("candidate_count must be >= 1")
    h, w, c = image_shape
    th, tw = ((h + 7) // 8) * 8, ((w + 7) // 8) * 8
    layers = []
    if (th, tw) != (h, w):
        layers.append({"kind": "pad_to", "target": [th, tw]})
    for filters in (64, 128, 256):
        layers += [
            {"kind": "conv", "filters": filters, "ksize": 3, "padding": "same", "dilation": 2},
            {"kind": "relu"},
            {"kind": "pool"},
        ]
    feat = (th // 8) * (tw // 8) * 256
    layers += [
        {"kind": "flatten"},
        {"kind": "dense", "units": 64, "in_features": feat},
        {"kind": "relu"},
        {"kind": "dense", "units": candidate_count, "in_features": 64},
    ]
    arch = {
        "name": "adaptive_net",
        "seed": seed,
        "input_shape": [h, w, c + 2],
        "n_classes": candidate_count,
        "head": "sigmoid",
        "layers": layers,
    }
    return Network(arch)


def wrap_bfnet(net: Network, params: FilterParams, trainable: bool = False) -> Network:
    """Prepend a differentiable bilateral filter layer; parameters are shared with `net`."""
    if not isinstance(params, FilterParams):
        params = FilterParams(*params)
    h, w, _ = net.input_shape
    if params.k > h and params.k > w:
        raise ShapeError(f"filter window K={params.k} exceeds the network input extent {h}x{w}")
    arch = json.loads(json.dumps(net.arch))
    arch["name"] = net.arch["name"] + "_bf"
    arch["bilateral"] = {
        "k": params.k,
        "sigma_s": float(params.sigma_s),
        "sigma_r": float(params.sigma_r),
        "trainable": bool(trainable),
    }
    return Network(arch, stores=net.stores)


def build_from_arch(arch: dict) -> Network:
    return Network(arch)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = b"BFT1"


def save_tensors(path, tensors) -> None:
    """Write tensors as little-endian BFT1: magic, u32 count, per tensor rank/extents/f32 data."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            t = np.asarray(t, dtype=np.float32)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(t.astype("<f4").tobytes(order="C"))


def load_tensors(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise DataFormatError(f"{path}: bad magic {data[:4]!r}, expected {_MAGIC!r}")
    off = 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = []
    for _ in range(count):
        if off + 4 > len(data):
            raise DataFormatError(f"{path}: truncated tensor header")
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        end = off + 4 * n
        if end > len(data):
            raise DataFormatError(f"{path}: truncated tensor data, expected {4*n} bytes, have {len(data)-off}")
        out.append(np.frombuffer(data[off:end], dtype="<f4").reshape(shape).copy())
        off = end
    return out
