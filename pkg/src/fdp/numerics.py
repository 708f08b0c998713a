"""Dense float64 numerics: small feed-forward nets with hand-written gradients,
an Adam optimizer, and a counter-based RNG whose streams are portable.

Everything here is deliberately boring: plain numpy arrays, explicit shapes,
no autodiff graph. Networks are immutable during inference; parameter writes
go through ``load_params`` so stale backward caches can be detected.
"""

from __future__ import annotations

import base64
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class DimensionMismatchError(ValueError):
    """Input or gradient shape incompatible with a layer; names the layer."""


class StaleCacheError(RuntimeError):
    """Backward called with a cache recorded before the net's parameters changed."""


class NonFiniteError(ValueError):
    """NaN or inf encountered; message carries the offending parameter path."""


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in '{name}'")
    return arr


def as_f64(arr, name: str = "array") -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    return check_finite(name, out)


# ---------------------------------------------------------------------------
# Counter-based RNG (SplitMix64 + Box-Muller)
# ---------------------------------------------------------------------------

_SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM64_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM64_M2 = np.uint64(0x94D049BB133111EB)
_U53 = float(1 << 53)


def _mix64(x: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer (Steele, Lea & Flood 2014). Pure uint64 arithmetic,
    # so streams are bit-identical on every platform.
    x = (x ^ (x >> np.uint64(30))) * _SM64_M1
    x = (x ^ (x >> np.uint64(27))) * _SM64_M2
    return x ^ (x >> np.uint64(31))


class Rng:
    """Deterministic counter-based generator.

    The i-th raw output after seeding is ``mix64(seed + i * GAMMA)`` where mix64
    is the SplitMix64 finalizer; a call consuming n values just advances the
    counter by n. Gaussians use the Box-Muller cosine branch on two uniforms,
    so every draw is a fixed function of (seed, counter) and golden values are
    portable across machines.
    """

    def __init__(self, seed: int, _counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._counter = int(_counter)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * _SM64_GAMMA)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), 53-bit resolution."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) / _U53

    def gaussian(self, n: int) -> np.ndarray:
        """n i.i.d. standard normal samples via Box-Muller (cos branch only)."""
        if n < 1:
            raise ValueError(f"gaussian sample count must be >= 1, got {n}")
        raw = self._raw(2 * n)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1)
        u1 = ((raw[:n] >> np.uint64(11)).astype(np.float64) + 1.0) / _U53
        u2 = (raw[n:] >> np.uint64(11)).astype(np.float64) / _U53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, lo: int, hi: int, n: int = 1) -> np.ndarray:
        """n ints uniform on [lo, hi). Floor-of-uniform; bias is O(range/2^53)."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        return lo + np.minimum(
            (self.uniform(n) * (hi - lo)).astype(np.int64), hi - lo - 1
        )

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n) driven by this stream."""
        out = np.arange(n)
        if n < 2:
            return out
        draws = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(draws[n - 1 - i] * (i + 1)), i)
            out[i], out[j] = out[j], out[i]
        return out

    def child(self, *stream_ids: int) -> "Rng":
        """Derive an independent stream from (seed, stream ids), deterministically."""
        with np.errstate(over="ignore"):
            s = np.uint64(self.seed)
            for sid in stream_ids:
                s = _mix64(
                    (s + _SM64_GAMMA) ^ _mix64(np.uint64(int(sid) & 0xFFFFFFFFFFFFFFFF))
                )
        return Rng(int(s[()] if isinstance(s, np.ndarray) else s))


# ---------------------------------------------------------------------------
# Feed-forward networks with explicit backward passes
# ---------------------------------------------------------------------------


def _act_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation '{name}' (expected one of {ACTIVATIONS})")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # derivative wrt pre-activation z; a = activation(z) is reused for tanh
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation '{name}'")


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str

    def __post_init__(self):
        self.weight = as_f64(self.weight, "weight")
        self.bias = as_f64(self.bias, "bias")
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise DimensionMismatchError("layer expects 2-d weight and 1-d bias")
        if self.weight.shape[1] != self.bias.shape[0]:
            raise DimensionMismatchError(
                f"weight cols {self.weight.shape[1]} != bias length {self.bias.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")


@dataclass
class ForwardCache:
    """Activation trace from one forward pass; sufficient for exact replay."""

    version: int
    inputs: list  # per-layer input (post-activation of previous layer)
    pre_acts: list  # per-layer pre-activation z
    outputs: list  # per-layer activation(z)
    squeeze: bool  # True if the caller passed a 1-d vector


class FeedForwardNet:
    """Dense MLP over float64 with per-layer activations and exact gradients.

    Rows are samples: ``forward`` accepts (d_in,) or (batch, d_in). Parameter
    updates must go through ``load_params``, which bumps an internal version;
    ``backward`` refuses caches recorded under an older version.
    """

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("net needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].weight.shape[0] != layers[i - 1].weight.shape[1]:
                raise DimensionMismatchError(
                    f"layer {i} fan_in {layers[i].weight.shape[0]} != "
                    f"layer {i - 1} fan_out {layers[i - 1].weight.shape[1]}"
                )
        self.layers = layers
        self._version = 0

    # -- construction -------------------------------------------------------

    @classmethod
    def init(
        cls,
        widths: list[int],
        activations: list[str] | str,
        rng: Rng,
        weight_scale: float = 1.0,
    ) -> "FeedForwardNet":
        """Random init: W ~ N(0, scale^2/fan_in), b = 0. widths = [in, h1, ..., out]."""
        if len(widths) < 2:
            raise ValueError("widths must list at least input and output sizes")
        if isinstance(activations, str):
            activations = [activations] * (len(widths) - 1)
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for i, act in enumerate(activations):
            fan_in, fan_out = widths[i], widths[i + 1]
            w = rng.gaussian(fan_in * fan_out).reshape(fan_in, fan_out)
            w *= weight_scale / math.sqrt(fan_in)
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @classmethod
    def identity(cls, dim: int) -> "FeedForwardNet":
        return cls([Layer(np.eye(dim), np.zeros(dim), "identity")])

    # -- introspection ------------------------------------------------------

    @property
    def version(self) -> int:
        return self._version

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].weight.shape[0]] + [
            l.weight.shape[1] for l in self.layers
        ]

    @property
    def activations(self) -> list[str]:
        return [l.activation for l in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def param_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def params(self) -> dict[str, np.ndarray]:
        """Live parameter views keyed 'layer{i}.weight' / 'layer{i}.bias'."""
        out = {}
        for i, l in enumerate(self.layers):
            out[f"layer{i}.weight"] = l.weight
            out[f"layer{i}.bias"] = l.bias
        return out

    def load_params(self, new: dict[str, np.ndarray]) -> None:
        """Replace parameters (shape-checked) and invalidate outstanding caches."""
        for i, l in enumerate(self.layers):
            for attr in ("weight", "bias"):
                key = f"layer{i}.{attr}"
                if key not in new:
                    continue
                arr = as_f64(new[key], key)
                if arr.shape != getattr(l, attr).shape:
                    raise DimensionMismatchError(
                        f"{key}: expected shape {getattr(l, attr).shape}, got {arr.shape}"
                    )
                setattr(l, attr, arr.copy())
        self._version += 1

    def copy(self) -> "FeedForwardNet":
        net = FeedForwardNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )
        return net

    def checksum(self) -> str:
        """SHA-256 over the little-endian float64 bytes of all parameters."""
        h = hashlib.sha256()
        for l in self.layers:
            h.update(np.ascontiguousarray(l.weight, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = as_f64(x, "input")
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2:
            raise DimensionMismatchError(f"input must be 1-d or 2-d, got ndim={x.ndim}")
        if x.shape[1] != self.in_dim:
            raise DimensionMismatchError(
                f"layer 0 expects input width {self.in_dim}, got {x.shape[1]}"
            )
        inputs, pre_acts, outputs = [], [], []
        a = x
        for l in self.layers:
            inputs.append(a)
            z = a @ l.weight + l.bias
            a = _act_forward(l.activation, z)
            pre_acts.append(z)
            outputs.append(a)
        cache = ForwardCache(self._version, inputs, pre_acts, outputs, squeeze)
        return (a[0] if squeeze else a), cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(
        self, cache: ForwardCache, grad_out: np.ndarray
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Exact gradients for the recorded forward pass.

        Returns (param_grads keyed like params(), gradient wrt the input).
        Gradients are summed over the batch dimension.
        """
        if cache.version != self._version:
            raise StaleCacheError(
                "forward cache is stale: parameters changed since it was recorded"
            )
        g = as_f64(grad_out, "grad_out")
        if cache.squeeze and g.ndim == 1:
            g = g[None, :]
        if g.shape != cache.outputs[-1].shape:
            raise DimensionMismatchError(
                f"grad_out shape {g.shape} != output shape {cache.outputs[-1].shape}"
            )
        grads: dict[str, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            l = self.layers[i]
            dz = g * _act_grad(l.activation, cache.pre_acts[i], cache.outputs[i])
            grads[f"layer{i}.weight"] = cache.inputs[i].T @ dz
            grads[f"layer{i}.bias"] = dz.sum(axis=0)
            g = dz @ l.weight.T
        return grads, (g[0] if cache.squeeze else g)

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        """Checkpoint fragment: widths, activations, and parameter arrays.

        Arrays are base64 of raw little-endian float64, row-major.
        """
        return {
            "widths": self.widths,
            "activations": self.activations,
            "layers": [
                {
                    "weight": encode_f64(l.weight),
                    "bias": encode_f64(l.bias),
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeedForwardNet":
        widths = obj["widths"]
        layers = []
        for i, (rec, act) in enumerate(zip(obj["layers"], obj["activations"])):
            w = decode_f64(rec["weight"]).reshape(widths[i], widths[i + 1])
            b = decode_f64(rec["bias"])
            layers.append(Layer(w, b, act))
        return cls(layers)


def encode_f64(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
    ).decode("ascii")


def decode_f64(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s.encode("ascii")), dtype="<f8").copy()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    """Adaptive-moment optimizer over a dict of named parameter arrays.

    lr 1e-3, decays (0.9, 0.999), eps 1e-8 by default. ``step`` returns new
    arrays rather than writing in place, so callers control when nets mutate.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
    ) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for path, p in params.items():
            g = grads[path]
            if g.shape != p.shape:
                raise DimensionMismatchError(
                    f"gradient shape {g.shape} != parameter shape {p.shape} at '{path}'"
                )
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient at '{path}'")
            if path not in self.m:
                self.m[path] = np.zeros_like(p)
                self.v[path] = np.zeros_like(p)
            self.m[path] = self.beta1 * self.m[path] + (1.0 - self.beta1) * g
            self.v[path] = self.beta2 * self.v[path] + (1.0 - self.beta2) * g * g
            m_hat = self.m[path] / (1.0 - self.beta1**self.t)
            v_hat = self.v[path] / (1.0 - self.beta2**self.t)
            out[path] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out
