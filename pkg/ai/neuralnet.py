# ai/neuralnet.py
"""
Multi-branch fully connected networks.

Each named input block goes through its own stack of dense layers; branch
outputs are concatenated and pass through a shared trunk, optionally followed
by a bias-free linear head (classifier scores). Gradients are written out by
hand for this one architecture family; ``gradient_check`` compares them with
central differences.
"""

from __future__ import annotations

import hashlib
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

from config.settings import AdamConfig
from services.errors import DataError, DimensionMismatchError, NumericFailureError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# fixed member timestamp so identical bundles are identical bytes
ZIP_DATE = (1980, 1, 1, 0, 0, 0)


# ---------- specs ----------

@dataclass(frozen=True)
class BranchSpec:
    name: str
    input_dim: int
    widths: tuple[int, ...] = ()

    @property
    def output_dim(self) -> int:
        return self.widths[-1] if self.widths else self.input_dim


@dataclass(frozen=True)
class LayerSpec:
    name: str
    fan_in: int
    fan_out: int
    bias: bool = True
    activated: bool = True


@dataclass(frozen=True)
class BranchMlpSpec:
    branches: tuple[BranchSpec, ...]
    trunk: tuple[int, ...] = ()
    activate_output: bool = False             # activation after the last trunk layer
    head: int = 0                             # bias-free linear scores on top, 0 = none
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return sum(b.input_dim for b in self.branches)

    @property
    def concat_dim(self) -> int:
        return sum(b.output_dim for b in self.branches)

    @property
    def output_dim(self) -> int:
        if self.head:
            return self.head
        return self.trunk[-1] if self.trunk else self.concat_dim

    def branch_layers(self, branch: BranchSpec) -> list[LayerSpec]:
        dims = (branch.input_dim,) + branch.widths
        return [
            LayerSpec(f"{branch.name}.fc{k + 1}", dims[k], dims[k + 1])
            for k in range(len(branch.widths))
        ]

    def trunk_layers(self) -> list[LayerSpec]:
        dims = (self.concat_dim,) + self.trunk
        first = 1 + max((len(b.widths) for b in self.branches), default=0)
        out = []
        for k in range(len(self.trunk)):
            last = k == len(self.trunk) - 1
            out.append(LayerSpec(
                f"trunk.fc{first + k}", dims[k], dims[k + 1],
                activated=self.activate_output or not last,
            ))
        if self.head:
            out.append(LayerSpec("head", dims[-1], self.head, bias=False, activated=False))
        return out

    def layers(self) -> list[LayerSpec]:
        out: list[LayerSpec] = []
        for b in self.branches:
            out.extend(self.branch_layers(b))
        return out + self.trunk_layers()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BranchMlpSpec":
        branches = tuple(BranchSpec(b["name"], int(b["input_dim"]), tuple(b["widths"])) for b in data["branches"])
        return cls(
            branches=branches,
            trunk=tuple(data["trunk"]),
            activate_output=bool(data["activate_output"]),
            head=int(data["head"]),
            activation=data["activation"],
        )

    def spec_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def embedding_spec(lfd_dim: int = 4704) -> BranchMlpSpec:
    """Part embedding f: five descriptor branches -> 512 concat -> 256 / 128 / 64 (last linear)."""
    return BranchMlpSpec(
        branches=(
            BranchSpec("lfd", lfd_dim, (128, 256, 256)),
            BranchSpec("pca", 9, (16, 32, 64)),
            BranchSpec("com", 3, (16, 64, 64)),
            BranchSpec("diameter", 1, (8, 32, 64)),
            BranchSpec("area", 1, (8, 32, 64)),
        ),
        trunk=(256, 128, 64),
        activate_output=False,
    )


def face_classifier_spec(n_leaves: int) -> BranchMlpSpec:
    """Face network g: eight descriptor branches -> 640 concat -> 256 / 128 / 128, then leaf scores."""
    return BranchMlpSpec(
        branches=(
            BranchSpec("curvature", 2, (32, 64, 64)),
            BranchSpec("lpca", 6, (64, 64, 64)),
            BranchSpec("lvar", 1, (32, 64, 64)),
            BranchSpec("si", 64, (128, 128, 128)),
            BranchSpec("sc", 36, (128, 128, 128)),
            BranchSpec("dd", 32, (32, 64, 64)),
            BranchSpec("pp", 3, (16, 32, 64)),
            BranchSpec("pn", 3, (16, 32, 64)),
        ),
        trunk=(256, 128, 128),
        activate_output=True,
        head=n_leaves,
    )


# ---------- activations ----------

def _relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _relu_grad(z: np.ndarray) -> np.ndarray:
    return (z > 0.0).astype(z.dtype)


def _tanh_grad(z: np.ndarray) -> np.ndarray:
    return 1.0 - np.tanh(z) ** 2


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


# ---------- parameters ----------

@dataclass
class NetParams:
    spec: BranchMlpSpec
    weights: dict[str, np.ndarray]            # (fan_in, fan_out)
    biases: dict[str, np.ndarray]             # (fan_out,), absent for bias-free layers

    @property
    def size(self) -> int:
        return sum(w.size for w in self.weights.values()) + sum(b.size for b in self.biases.values())

    def vector(self) -> np.ndarray:
        """Flat view in layer order (weights then bias of each layer)."""
        chunks = []
        for layer in self.spec.layers():
            chunks.append(self.weights[layer.name].ravel())
            if layer.bias:
                chunks.append(self.biases[layer.name])
        return np.concatenate(chunks) if chunks else np.zeros(0)

    @classmethod
    def from_vector(cls, spec: BranchMlpSpec, vec: np.ndarray) -> "NetParams":
        vec = np.asarray(vec, dtype=np.float64)
        weights, biases, pos = {}, {}, 0
        for layer in spec.layers():
            n = layer.fan_in * layer.fan_out
            weights[layer.name] = vec[pos:pos + n].reshape(layer.fan_in, layer.fan_out).copy()
            pos += n
            if layer.bias:
                biases[layer.name] = vec[pos:pos + layer.fan_out].copy()
                pos += layer.fan_out
        if pos != len(vec):
            raise DimensionMismatchError(f"parameter vector has {len(vec)} values, spec needs {pos}")
        return cls(spec, weights, biases)

    def zeros_like(self) -> "NetParams":
        return NetParams(
            self.spec,
            {k: np.zeros_like(v) for k, v in self.weights.items()},
            {k: np.zeros_like(v) for k, v in self.biases.items()},
        )


def init_glorot(spec: BranchMlpSpec, seed: int | Sequence[int] = 0) -> NetParams:
    """Weights ~ U(-sqrt(6 / (fan_in + fan_out)), +...), biases 0."""
    rng = np.random.default_rng(seed)
    weights, biases = {}, {}
    for layer in spec.layers():
        bound = np.sqrt(6.0 / (layer.fan_in + layer.fan_out))
        weights[layer.name] = rng.uniform(-bound, bound, size=(layer.fan_in, layer.fan_out))
        if layer.bias:
            biases[layer.name] = np.zeros(layer.fan_out)
    return NetParams(spec, weights, biases)


# ---------- forward / backward ----------

@dataclass
class ForwardCache:
    n: int
    layer_io: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)   # name -> (input, pre-activation)


def split_inputs(spec: BranchMlpSpec, matrix: np.ndarray) -> dict[str, np.ndarray]:
    """Columns of ``matrix`` cut into the branch blocks, in branch order."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != spec.input_dim:
        raise DimensionMismatchError(f"expected (n, {spec.input_dim}) input, got {matrix.shape}")
    out, start = {}, 0
    for b in spec.branches:
        out[b.name] = matrix[:, start:start + b.input_dim]
        start += b.input_dim
    return out


def _dense(params: NetParams, layer: LayerSpec, x: np.ndarray, cache: ForwardCache) -> np.ndarray:
    z = x @ params.weights[layer.name]
    if layer.bias:
        z = z + params.biases[layer.name]
    cache.layer_io[layer.name] = (x, z)
    if layer.activated:
        return _ACTIVATIONS[params.spec.activation][0](z)
    return z


def forward(params: NetParams, inputs: Mapping[str, np.ndarray] | np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    spec = params.spec
    if not isinstance(inputs, Mapping):
        inputs = split_inputs(spec, inputs)
    n = None
    pieces = []
    cache = ForwardCache(n=0)
    for b in spec.branches:
        if b.name not in inputs:
            raise DimensionMismatchError(f"missing input block {b.name!r}")
        x = np.asarray(inputs[b.name], dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != b.input_dim or (n is not None and x.shape[0] != n):
            raise DimensionMismatchError(f"block {b.name!r}: expected (n, {b.input_dim}), got {x.shape}")
        n = x.shape[0]
        for layer in spec.branch_layers(b):
            x = _dense(params, layer, x, cache)
        pieces.append(x)
    cache.n = n or 0
    h = np.concatenate(pieces, axis=1)
    for layer in spec.trunk_layers():
        h = _dense(params, layer, h, cache)
    return h, cache


def backward(params: NetParams, cache: ForwardCache, grad_out: np.ndarray) -> NetParams:
    """Gradient of sum(grad_out * output) with respect to every weight and bias."""
    spec = params.spec
    act_grad = _ACTIVATIONS[spec.activation][1]
    grads = params.zeros_like()

    def through(layer: LayerSpec, g: np.ndarray) -> np.ndarray:
        x, z = cache.layer_io[layer.name]
        if layer.activated:
            g = g * act_grad(z)
        grads.weights[layer.name] = x.T @ g
        if layer.bias:
            grads.biases[layer.name] = g.sum(axis=0)
        return g @ params.weights[layer.name].T

    g = np.asarray(grad_out, dtype=np.float64)
    for layer in reversed(spec.trunk_layers()):
        g = through(layer, g)

    start = 0
    for b in spec.branches:
        gb = g[:, start:start + b.output_dim]
        start += b.output_dim
        for layer in reversed(spec.branch_layers(b)):
            gb = through(layer, gb)
    return grads


# ---------- Adam ----------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, size: int, cfg: Optional[AdamConfig] = None, lr: Optional[float] = None) -> "AdamState":
        cfg = cfg or AdamConfig()
        return cls(
            m=np.zeros(size),
            v=np.zeros(size),
            lr=cfg.lr if lr is None else lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
        )


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update of a flat parameter vector; ``state`` is advanced in place."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.m.shape:
        raise DimensionMismatchError(f"gradient shape {grads.shape} != optimizer state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise NumericFailureError(f"non-finite gradient ({bad} entries) at Adam step {state.t + 1}", last_good=params.copy())
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    updated = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.all(np.isfinite(updated)):
        raise NumericFailureError(f"parameters became non-finite at Adam step {state.t}", last_good=params.copy())
    return updated


# ---------- checkpoints ----------

def save_checkpoint(
    path: str | Path,
    params: NetParams,
    arrays: Optional[Mapping[str, np.ndarray]] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> None:
    """
    ``.npz`` archive: a JSON header (version, spec, spec hash, caller meta),
    ``W:<layer>`` / ``b:<layer>`` float32 tensors, and any extra named arrays.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": params.spec.to_dict(),
        "spec_hash": params.spec.spec_hash(),
        "layers": [layer.name for layer in params.spec.layers()],
        "meta": dict(meta or {}),
    }
    payload: dict[str, np.ndarray] = {"header": np.array(json.dumps(header, sort_keys=True))}
    for name, w in params.weights.items():
        payload[f"W:{name}"] = w.astype(np.float32)
    for name, b in params.biases.items():
        payload[f"b:{name}"] = b.astype(np.float32)
    for name, arr in (arrays or {}).items():
        payload[f"x:{name}"] = np.asarray(arr)
    write_npz(path, payload)


def write_npz(path: str | Path, payload: Mapping[str, np.ndarray]) -> None:
    """Same archive ``np.savez`` writes, minus the wall-clock member dates."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED, allowZip64=True) as zf:
        for name, arr in payload.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_DATE)
            with zf.open(info, "w", force_zip64=True) as fid:
                np.lib.format.write_array(fid, np.asanyarray(arr), allow_pickle=False)


def load_checkpoint(
    path: str | Path,
    spec: Optional[BranchMlpSpec] = None,
) -> tuple[NetParams, dict[str, np.ndarray], dict[str, Any]]:
    """Params, extra arrays and caller meta; a ``spec`` whose hash differs is rejected."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        stored = BranchMlpSpec.from_dict(header["spec"])
        if spec is not None and spec.spec_hash() != header["spec_hash"]:
            raise DimensionMismatchError(
                f"{path}: checkpoint spec {header['spec_hash']} does not match {spec.spec_hash()}"
            )
        weights = {k[2:]: data[k].astype(np.float64) for k in data.files if k.startswith("W:")}
        biases = {k[2:]: data[k].astype(np.float64) for k in data.files if k.startswith("b:")}
        arrays = {k[2:]: data[k] for k in data.files if k.startswith("x:")}
    return NetParams(stored, weights, biases), arrays, header["meta"]


# ---------- finite differences ----------

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, coords: Sequence[int], h: float = 1e-4) -> np.ndarray:
    out = np.empty(len(coords))
    for n, i in enumerate(coords):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        out[n] = (f(xp) - f(xm)) / (2.0 * h)
    return out


def activation_pattern(cache: ForwardCache) -> np.ndarray:
    """Which pre-activations are positive; changes only when a ReLU kink is crossed."""
    masks = [(z > 0).ravel() for _, z in cache.layer_io.values()]
    return np.concatenate(masks) if masks else np.zeros(0, dtype=bool)


def gradient_check(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    n_coords: int = 20,
    h: float = 1e-4,
    seed: int = 0,
    pattern: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> float:
    """
    Largest relative error between ``grad(x)`` and central differences on random coordinates.

    With ``pattern`` given, a coordinate whose +h and -h steps land on different
    kink patterns (ReLU masks, L1 signs, active hinges) is skipped.
    """
    shape = np.shape(x)
    flat = np.asarray(x, dtype=np.float64).ravel().copy()
    rng = np.random.default_rng(seed)

    def f_flat(v: np.ndarray) -> float:
        return f(v.reshape(shape))

    coords: list[int] = []
    for i in rng.permutation(flat.size):
        if len(coords) >= n_coords:
            break
        if pattern is not None:
            xp, xm = flat.copy(), flat.copy()
            xp[i] += h
            xm[i] -= h
            if not np.array_equal(pattern(xp.reshape(shape)), pattern(xm.reshape(shape))):
                continue
        coords.append(int(i))
    if not coords:
        return 0.0
    analytic = np.asarray(grad(flat.reshape(shape))).ravel()[coords]
    numeric = numeric_gradient(f_flat, flat, coords, h)
    return float(relative_error(analytic, numeric).max())
