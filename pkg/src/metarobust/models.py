"""Small classification backbones with explicit, functional parameter sets.

Parameters are passed into every forward call instead of being stored on a
mutable module, so a fine-tuning loop can thread updated parameters through
the gradient graph. Two architectures are provided:

* ``mlp``   - flat input, ReLU hidden layers, linear head.
* ``conv4`` - four blocks of [3x3 conv (pad 1), per-channel affine, ReLU,
  2x2 max pool], then a linear head. The per-channel affine stands in for
  batch norm; running statistics interact badly with inner-loop adaptation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    broadcast_to,
    conv2d,
    flatten,
    matmul,
    maxpool2d,
    mul,
    relu,
    reshape,
    tensor,
)

__all__ = [
    "ModelSpec",
    "ParamSet",
    "init_params",
    "forward",
    "penultimate_features",
    "feature_dim",
    "as_model_batch",
    "save_params",
    "load_params",
    "write_flat_records",
    "read_flat_records",
]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; all forward passes derive from this alone."""

    arch: str                 # "mlp" | "conv4"
    input_shape: tuple        # (D,) for mlp, (C, H, W) for conv4
    n_way: int
    hidden: tuple             # layer widths (mlp) or block channels (conv4)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.arch not in ("mlp", "conv4"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.n_way < 2:
            raise ValueError("n_way must be at least 2")
        if not self.hidden:
            raise ValueError("hidden must be non-empty")
        if self.arch == "mlp" and len(self.input_shape) != 1:
            raise ValueError("mlp expects a flat input shape (D,)")
        if self.arch == "conv4":
            if len(self.input_shape) != 3:
                raise ValueError("conv4 expects an input shape (C, H, W)")
            if len(self.hidden) != 4:
                raise ValueError("conv4 takes exactly 4 block channel counts")
            _, h, w = self.input_shape
            if h // 16 < 1 or w // 16 < 1:
                raise ValueError("conv4 needs spatial extent of at least 16x16")


def feature_dim(spec: ModelSpec) -> int:
    """Width of the penultimate (pre-head) feature vector."""
    if spec.arch == "mlp":
        return spec.hidden[-1]
    _, h, w = spec.input_shape
    return spec.hidden[-1] * (h // 16) * (w // 16)


class ParamSet:
    """Ordered, name-addressed collection of parameter tensors."""

    def __init__(self, items):
        items = [(str(n), t) for n, t in items]
        names = [n for n, _ in items]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self._items = items
        self._index = {n: t for n, t in items}

    @property
    def names(self):
        return [n for n, _ in self._items]

    @property
    def values(self):
        return [t for _, t in self._items]

    def items(self):
        return list(self._items)

    def __getitem__(self, name: str) -> Tensor:
        return self._index[name]

    def __len__(self):
        return len(self._items)

    def tracked(self) -> "ParamSet":
        """Fresh tracked leaves over the same data."""
        return ParamSet([(n, tensor(t.data, track=True)) for n, t in self._items])

    def detached(self) -> "ParamSet":
        return ParamSet([(n, Tensor(t.data)) for n, t in self._items])

    def map_data(self, fn) -> "ParamSet":
        """New untracked ParamSet with ``fn(name, data)`` applied per entry."""
        return ParamSet([(n, Tensor(np.ascontiguousarray(fn(n, t.data)))) for n, t in self._items])

    def flatten(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for _, t in self._items])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        """Rebuild a ParamSet shaped like this one from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != sum(t.size for _, t in self._items):
            raise ValueError("flat vector length does not match parameter count")
        out, off = [], 0
        for n, t in self._items:
            out.append((n, Tensor(np.ascontiguousarray(vec[off:off + t.size].reshape(t.shape)))))
            off += t.size
        return ParamSet(out)

    def data_equal(self, other: "ParamSet") -> bool:
        if self.names != other.names:
            return False
        return all(np.array_equal(a.data, b.data) for a, b in zip(self.values, other.values))


def _layer_sizes(spec: ModelSpec):
    if spec.arch == "mlp":
        dims = [spec.input_shape[0], *spec.hidden]
        return list(zip(dims[:-1], dims[1:]))
    chans = [spec.input_shape[0], *spec.hidden]
    return list(zip(chans[:-1], chans[1:]))


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """Deterministic init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    biases zero, affine scales one."""
    rng = np.random.default_rng(seed)
    items = []

    def w(name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        items.append((name, Tensor(rng.uniform(-bound, bound, size=shape))))

    if spec.arch == "mlp":
        for i, (d_in, d_out) in enumerate(_layer_sizes(spec)):
            w(f"fc{i}.weight", (d_in, d_out), d_in)
            items.append((f"fc{i}.bias", Tensor(np.zeros(d_out))))
        d_feat = spec.hidden[-1]
    else:
        for i, (c_in, c_out) in enumerate(_layer_sizes(spec)):
            w(f"conv{i}.weight", (c_out, c_in, 3, 3), c_in * 9)
            items.append((f"conv{i}.scale", Tensor(np.ones(c_out))))
            items.append((f"conv{i}.shift", Tensor(np.zeros(c_out))))
        d_feat = feature_dim(spec)
    w("head.weight", (d_feat, spec.n_way), d_feat)
    items.append(("head.bias", Tensor(np.zeros(spec.n_way))))
    return ParamSet(items)


def _check_batch(spec: ModelSpec, batch: Tensor):
    if batch.ndim != len(spec.input_shape) + 1 or tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError("forward", batch.shape, (-1, *spec.input_shape))


def _affine(x: Tensor, scale_vec: Tensor, shift_vec: Tensor) -> Tensor:
    c = scale_vec.shape[0]
    s = broadcast_to(reshape(scale_vec, (1, c, 1, 1)), x.shape)
    b = broadcast_to(reshape(shift_vec, (1, c, 1, 1)), x.shape)
    return add(mul(x, s), b)


def _trunk(spec: ModelSpec, params: ParamSet, batch: Tensor) -> Tensor:
    _check_batch(spec, batch)
    x = batch
    if spec.arch == "mlp":
        for i in range(len(spec.hidden)):
            wt, b = params[f"fc{i}.weight"], params[f"fc{i}.bias"]
            z = matmul(x, wt)
            x = relu(add(z, broadcast_to(reshape(b, (1, b.size)), z.shape)))
        return x
    for i in range(4):
        x = conv2d(x, params[f"conv{i}.weight"], stride=1, padding=1)
        x = relu(_affine(x, params[f"conv{i}.scale"], params[f"conv{i}.shift"]))
        x = maxpool2d(x, 2)
    return flatten(x)


def penultimate_features(spec: ModelSpec, params: ParamSet, batch: Tensor) -> Tensor:
    """Activations feeding the classifier head, shape (B, D)."""
    return _trunk(spec, params, batch)


def forward(spec: ModelSpec, params: ParamSet, batch: Tensor) -> Tensor:
    """Class logits of shape (B, n_way)."""
    feats = _trunk(spec, params, batch)
    wt, b = params["head.weight"], params["head.bias"]
    z = matmul(feats, wt)
    return add(z, broadcast_to(reshape(b, (1, b.size)), z.shape))


def as_model_batch(spec: ModelSpec, images: np.ndarray) -> np.ndarray:
    """Adapt dataset-layout samples to the model's input layout.

    Image datasets store (n, H, W, C); conv4 wants (n, C, H, W) and mlp wants
    flat rows. Flat datasets pass through unchanged.
    """
    images = np.asarray(images, dtype=np.float64)
    if spec.arch == "mlp":
        flat = images.reshape(images.shape[0], -1)
        if flat.shape[1] != spec.input_shape[0]:
            raise ShapeError("as_model_batch", images.shape, (-1, *spec.input_shape))
        return np.ascontiguousarray(flat)
    if images.ndim == 4 and images.shape[1:] == spec.input_shape:
        return np.ascontiguousarray(images)
    if images.ndim != 4 or (images.shape[3], images.shape[1], images.shape[2]) != spec.input_shape:
        raise ShapeError("as_model_batch", images.shape, (-1, *spec.input_shape))
    return np.ascontiguousarray(np.transpose(images, (0, 3, 1, 2)))


# -- flat float64 serialization ------------------------------------------------
#
# One binary file of little-endian float64 values plus a JSON sidecar listing
# (name, shape, offset); offsets count elements, not bytes. The same container
# serves parameter checkpoints and exported feature matrices.


def write_flat_records(path, records, extra: dict | None = None):
    path = Path(path)
    entries, off = [], 0
    chunks = []
    for name, arr in records:
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": off})
        chunks.append(arr.reshape(-1))
        off += arr.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    path.write_bytes(blob.astype("<f8").tobytes())
    sidecar = {"entries": entries, "total": int(off)}
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def read_flat_records(path):
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    blob = np.frombuffer(path.read_bytes(), dtype="<f8")
    if blob.size != sidecar["total"]:
        raise ValueError(f"flat file {path} holds {blob.size} values, sidecar says {sidecar['total']}")
    out = []
    for e in sidecar["entries"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = blob[e["offset"]:e["offset"] + size].reshape(e["shape"]).copy()
        out.append((e["name"], arr))
    return out, sidecar


def save_params(params: ParamSet, path):
    write_flat_records(path, [(n, t.data) for n, t in params.items()], {"kind": "paramset"})


def load_params(path) -> ParamSet:
    records, _ = read_flat_records(path)
    return ParamSet([(n, Tensor(np.ascontiguousarray(a))) for n, a in records])
