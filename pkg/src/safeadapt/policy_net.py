"""Fully connected ReLU networks stored as one flat float64 parameter vector.

Layer ``k`` owns a weight block ``W_k`` of shape ``(out, in)`` followed by its
bias ``b_k``; the flat layout is W_0, b_0, W_1, b_1, ... so that the certified
orthotope and the projection step can treat the actor as a single vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim <= 0 or self.output_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError(f"all layer widths must be positive: {self}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def layout(self) -> tuple["LayoutEntry", ...]:
        entries, offset = [], 0
        w = self.widths
        for k in range(self.n_layers):
            shape = (w[k + 1], w[k])
            entries.append(LayoutEntry(k, "W", shape, offset))
            offset += shape[0] * shape[1]
            entries.append(LayoutEntry(k, "b", (w[k + 1],), offset))
            offset += w[k + 1]
        return tuple(entries)

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum(w[k + 1] * (w[k] + 1) for k in range(self.n_layers))

    def to_json(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MlpSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d["output_dim"]), d["activation"])


@dataclass(frozen=True)
class LayoutEntry:
    layer: int
    kind: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def to_json(self) -> dict:
        return {"layer": self.layer, "kind": self.kind, "shape": list(self.shape),
                "offset": self.offset}


def unpack(values: np.ndarray, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``[(W_0, b_0), ...]`` into a flat vector (no copies)."""
    layers, offset = [], 0
    w = spec.widths
    for k in range(spec.n_layers):
        n_out, n_in = w[k + 1], w[k]
        W = values[offset:offset + n_out * n_in].reshape(n_out, n_in)
        offset += n_out * n_in
        b = values[offset:offset + n_out]
        offset += n_out
        layers.append((W, b))
    return layers


@dataclass
class ParamVector:
    """Flat parameters plus the MlpSpec that gives them shape."""

    spec: MlpSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.spec.n_params,):
            raise ValueError(
                f"expected {self.spec.n_params} parameters, got {self.values.shape}"
            )

    @property
    def layout(self) -> tuple[LayoutEntry, ...]:
        return self.spec.layout()

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unpack(self.values, self.spec)

    def copy(self) -> "ParamVector":
        return ParamVector(self.spec, self.values.copy())

    def to_json(self) -> dict:
        return {
            "spec": self.spec.to_json(),
            "layout": [e.to_json() for e in self.layout],
            "values": self.values.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ParamVector":
        spec = MlpSpec.from_json(d["spec"])
        layout = [LayoutEntry(e["layer"], e["kind"], tuple(e["shape"]), e["offset"])
                  for e in d["layout"]]
        if tuple(layout) != spec.layout():
            raise ValueError("checkpoint layout does not match its spec")
        return cls(spec, np.array(d["values"], dtype=np.float64))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "ParamVector":
        return cls.from_json(json.loads(Path(path).read_text()))


def orthogonal_init(spec: MlpSpec, rng: np.random.Generator,
                    hidden_gain: float = np.sqrt(2.0), output_gain: float = 0.01) -> ParamVector:
    """Orthogonal weights scaled by ``hidden_gain`` (``output_gain`` last), zero biases."""
    values = np.zeros(spec.n_params)
    for k, (W, _) in enumerate(unpack(values, spec)):
        gain = output_gain if k == spec.n_layers - 1 else hidden_gain
        rows, cols = W.shape
        a = rng.standard_normal((max(rows, cols), min(rows, cols)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        if rows < cols:
            q = q.T
        W[:] = gain * q[:rows, :cols]
    return ParamVector(spec, values)


def _check_input(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} != {spec.input_dim}")
    return x


def _values(params) -> np.ndarray:
    return params.values if isinstance(params, ParamVector) else np.asarray(params)


def forward_cache(params, spec: MlpSpec, x: np.ndarray):
    """Forward pass keeping layer inputs and pre-activations for backprop."""
    x = _check_input(spec, x)
    h = np.atleast_2d(x)
    inputs, pre = [], []
    layers = unpack(_values(params), spec)
    for k, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W.T + b
        if k < spec.n_layers - 1:
            pre.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    return h, (inputs, pre)


def forward(params, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Logits for one input ``(in,)`` or a batch ``(N, in)``."""
    out, _ = forward_cache(params, spec, x)
    return out[0] if np.ndim(x) == 1 else out


def backward(params, spec: MlpSpec, cache, upstream: np.ndarray) -> np.ndarray:
    """Flat gradient of ``sum_n <upstream_n, logits_n>`` from a forward cache."""
    inputs, pre = cache
    layers = unpack(_values(params), spec)
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    grad = np.zeros(spec.n_params)
    grads = unpack(grad, spec)
    for k in range(spec.n_layers - 1, -1, -1):
        W, _ = layers[k]
        gW, gb = grads[k]
        gW[:] = g.T @ inputs[k]
        gb[:] = g.sum(axis=0)
        if k > 0:
            g = (g @ W) * (pre[k - 1] > 0.0)
    return grad


def grad(params, spec: MlpSpec, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Exact gradient of ``<upstream, forward(params, x)>`` w.r.t. every parameter.

    ReLU uses subgradient 0 at 0. Batched inputs sum over the batch.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-1] != spec.output_dim:
        raise ValueError(f"upstream dim {upstream.shape[-1]} != {spec.output_dim}")
    _, cache = forward_cache(params, spec, x)
    return backward(params, spec, cache, upstream)


@dataclass(frozen=True)
class ActionDistribution:
    logits: np.ndarray
    probs: np.ndarray
    beta: float


def softmax(logits: np.ndarray, beta: float = 1.0) -> np.ndarray:
    z = beta * np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def action_dist(logits: np.ndarray, beta: float = 1.0) -> ActionDistribution:
    """Tempered softmax ``exp(beta*z_a) / sum exp(beta*z)`` with max subtraction."""
    if not beta > 0:
        raise ValueError(f"inverse temperature must be positive, got {beta}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    return ActionDistribution(logits, softmax(logits, beta), float(beta))


def greedy_action(logits: np.ndarray) -> int:
    """Argmax with ties broken toward the lowest index."""
    return int(np.argmax(logits))


def sample_action(dist: ActionDistribution | np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF sample from ``dist``."""
    probs = dist.probs if isinstance(dist, ActionDistribution) else np.asarray(dist)
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)
