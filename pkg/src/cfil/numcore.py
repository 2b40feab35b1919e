"""Small differentiable layer: named parameter stores, dense nets, gradients, Adam.

Gradients come from JAX reverse-mode; everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")
CHECKPOINT_MAGIC = "cfil-checkpoint 1"


class NumericError(FloatingPointError):
    """A loss or value became non-finite."""


class DimensionError(ValueError):
    """Input shape does not match the network or flow it is fed to."""


@jax.tree_util.register_pytree_node_class
class ParamStore:
    """Ordered mapping of stable parameter names to float64 tensors.

    Registered as a pytree, so it can be handed straight to ``jax.grad``;
    the gradient comes back as a ParamStore with the same keys (a GradMap).
    """

    def __init__(self, tensors: Mapping[str, object] = ()):
        self._tensors = {k: jnp.asarray(v, dtype=jnp.float64) for k, v in dict(tensors).items()}

    def tree_flatten(self):
        return tuple(self._tensors.values()), tuple(self._tensors.keys())

    @classmethod
    def tree_unflatten(cls, names, values):
        obj = object.__new__(cls)
        obj._tensors = dict(zip(names, values))
        return obj

    def __getitem__(self, name: str):
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._tensors.items())
        return f"ParamStore({shapes})"

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._tensors.items()}

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())

    def flatten(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in self._tensors.values()])

    def unflatten(self, flat) -> "ParamStore":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise DimensionError(f"flat vector has shape {flat.shape}, expected ({self.size},)")
        out, i = {}, 0
        for k, shape in self.shapes().items():
            n = int(np.prod(shape))
            out[k] = flat[i:i + n].reshape(shape)
            i += n
        return ParamStore(out)

    def replace(self, **updates) -> "ParamStore":
        merged = dict(self._tensors)
        merged.update(updates)
        return ParamStore(merged)

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v) for k, v in self._tensors.items()}

    @staticmethod
    def join(parts: Mapping[str, "ParamStore"]) -> "ParamStore":
        """Merge several stores into one, prefixing names with ``<key>/``."""
        merged = {}
        for prefix, store in parts.items():
            for k, v in store.items():
                merged[f"{prefix}/{k}"] = v
        return ParamStore(merged)

    def split(self) -> dict[str, "ParamStore"]:
        """Inverse of :meth:`join`."""
        groups: dict[str, dict] = {}
        for k, v in self._tensors.items():
            prefix, _, rest = k.partition("/")
            groups.setdefault(prefix, {})[rest] = v
        return {p: ParamStore(t) for p, t in groups.items()}


GradMap = ParamStore


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes plus one activation tag per affine layer."""

    sizes: tuple[int, ...]
    acts: tuple[str, ...]

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        if len(self.acts) != len(self.sizes) - 1:
            raise ValueError(f"need {len(self.sizes) - 1} activation tags, got {len(self.acts)}")
        bad = [a for a in self.acts if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unsupported nonlinearity {bad[0]!r}; choose from {ACTIVATIONS}")

    @classmethod
    def dense(cls, sizes: Sequence[int], hidden_act: str = "tanh", out_act: str = "identity") -> "MlpSpec":
        sizes = tuple(int(s) for s in sizes)
        return cls(sizes, (hidden_act,) * (len(sizes) - 2) + (out_act,))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1


def _act(name: str, h, xp):
    if name == "tanh":
        return xp.tanh(h)
    if name == "relu":
        return xp.maximum(h, 0.0)
    return h


def init_mlp(spec: MlpSpec, rng: np.random.Generator, zero_last: bool = False) -> ParamStore:
    """Uniform(+-1/sqrt(fan_in)) weights and biases; optionally zero the output layer."""
    tensors = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        last = i == spec.n_layers - 1
        if last and zero_last:
            tensors[f"l{i}.w"] = np.zeros((fan_in, fan_out))
            tensors[f"l{i}.b"] = np.zeros(fan_out)
        else:
            tensors[f"l{i}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            tensors[f"l{i}.b"] = rng.uniform(-bound, bound, size=fan_out)
    return ParamStore(tensors)


def eval_mlp(params, x, spec: MlpSpec, masks: Sequence[np.ndarray] | None = None, xp=jnp):
    """Forward pass of a dense net on a vector or a batch of row vectors.

    ``params`` may be a ParamStore or a plain dict of arrays (the latter lets
    callers run the same net through numpy by passing ``xp=np``). ``masks``
    multiplies each weight matrix elementwise (MADE).
    """
    if x.shape[-1] != spec.sizes[0]:
        raise DimensionError(f"input has trailing size {x.shape[-1]}, network expects {spec.sizes[0]}")
    h = x
    for i, act in enumerate(spec.acts):
        w = params[f"l{i}.w"]
        if masks is not None:
            w = w * masks[i]
        h = _act(act, h @ w + params[f"l{i}.b"], xp)
    return h


def _locate_nonfinite(loss_fn: Callable, params) -> str:
    try:
        with jax.disable_jit(), jax.debug_nans(True), jax.debug_infs(True):
            loss_fn(params)
    except FloatingPointError as err:
        return str(err).splitlines()[0]
    return "non-finite value produced (offending primitive not isolated)"


def grad_scalar(loss_fn: Callable, params, with_value: bool = False):
    """Gradient of a scalar loss with respect to every entry of ``params``.

    Raises NumericError naming the primitive that produced the first
    non-finite value when the loss or any gradient entry is not finite.
    """
    value, grads = jax.value_and_grad(loss_fn)(params)
    if not np.isfinite(float(value)):
        raise NumericError(f"loss is {float(value)}: {_locate_nonfinite(loss_fn, params)}")
    for leaf in jax.tree_util.tree_leaves(grads):
        if not bool(jnp.all(jnp.isfinite(leaf))):
            raise NumericError("non-finite gradient: " + _locate_nonfinite(jax.grad(loss_fn), params))
    return (value, grads) if with_value else grads


class AdamState(NamedTuple):
    mu: object
    nu: object
    count: jnp.ndarray


def adam_init(params) -> AdamState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(zeros, zeros, jnp.zeros((), dtype=jnp.int64))


def adam_step(params, grads, state: AdamState, lr, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; pure, so it can live inside ``jax.jit``."""
    count = state.count + 1
    mu = jax.tree_util.tree_map(lambda m, g: b1 * m + (1.0 - b1) * g, state.mu, grads)
    nu = jax.tree_util.tree_map(lambda v, g: b2 * v + (1.0 - b2) * g * g, state.nu, grads)
    c1 = 1.0 - b1 ** count
    c2 = 1.0 - b2 ** count
    new = jax.tree_util.tree_map(
        lambda p, m, v: p - lr * (m / c1) / (jnp.sqrt(v / c2) + eps), params, mu, nu
    )
    return new, AdamState(mu, nu, count)


def save_checkpoint(path, store: ParamStore) -> None:
    """Text header of (name, shape) lines, then little-endian float64 data."""
    lines = [CHECKPOINT_MAGIC, str(len(store))]
    for name, shape in store.shapes().items():
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        lines.append(f"{name} {','.join(str(d) for d in shape)}")
    lines.append("end-header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    Path(path).write_bytes(header + store.flatten().astype("<f8").tobytes())


def load_checkpoint(path) -> ParamStore:
    raw = Path(path).read_bytes()
    marker = b"end-header\n"
    cut = raw.index(marker) + len(marker)
    lines = raw[:cut].decode("ascii").splitlines()
    if lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    n = int(lines[1])
    data = np.frombuffer(raw[cut:], dtype="<f8")
    tensors, i = {}, 0
    for line in lines[2:2 + n]:
        name, _, dims = line.partition(" ")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        size = int(np.prod(shape))
        tensors[name] = data[i:i + size].reshape(shape)
        i += size
    if i != data.size:
        raise ValueError(f"{path}: payload has {data.size} values, header describes {i}")
    return ParamStore(tensors)
