"""Exact-likelihood normalizing flows: MAF (MADE conditioners) and RealNVP coupling.

Convention: a layer maps data toward the base space, ``z = f(x)``, so

    log p(x) = log N(f(x); 0, I) + sum_layers log|det df_i/df_{i-1}|

and density evaluation is one pass. Sampling runs the layers backwards; a
MAF layer inverts one autoregressive degree at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from cfil.numcore import (
    DimensionError,
    MlpSpec,
    NumericError,
    ParamStore,
    adam_init,
    adam_step,
    eval_mlp,
    init_mlp,
    load_checkpoint,
    save_checkpoint,
)

LOG_SCALE_CLAMP = 7.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MadeMaskSet:
    """Binary masks of a MADE network plus the degree of every unit.

    ``masks[i]`` has the shape of weight matrix ``i`` (fan_in x fan_out). The
    output layer holds two blocks (shift, log-scale) of ``dim`` units each.
    """

    in_degrees: np.ndarray
    hidden_degrees: tuple[np.ndarray, ...]
    masks: tuple[np.ndarray, ...]

    @property
    def dim(self) -> int:
        return len(self.in_degrees)


def build_made_masks(dim: int, hidden_sizes: Sequence[int], seed: int = 0, order: str = "natural") -> MadeMaskSet:
    """Masks under which output ``i`` sees only inputs of smaller degree.

    Hidden degrees cycle through 1..dim-1 (shuffled by ``seed``) so every
    degree is represented whenever a hidden layer has at least dim-1 units.
    """
    if dim < 1:
        raise ValueError("dim must be a positive integer")
    if order == "natural":
        in_deg = np.arange(1, dim + 1)
    elif order == "reversed":
        in_deg = np.arange(dim, 0, -1)
    elif order == "random":
        in_deg = np.random.default_rng(seed).permutation(dim) + 1
    else:
        raise ValueError(f"unknown ordering {order!r}")

    rng = np.random.default_rng(seed)
    hidden = []
    for h in hidden_sizes:
        if dim == 1:
            deg = np.zeros(h, dtype=int)
        else:
            deg = rng.permutation(np.arange(h) % (dim - 1) + 1)
        hidden.append(deg)

    masks = []
    prev = in_deg
    for deg in hidden:
        masks.append((deg[None, :] >= prev[:, None]).astype(np.float64))
        prev = deg
    out_deg = np.concatenate([in_deg, in_deg])
    masks.append((out_deg[None, :] > prev[:, None]).astype(np.float64))
    return MadeMaskSet(in_deg, tuple(hidden), tuple(masks))


class MafLayer:
    """Autoregressive affine layer: y_i = x_i * exp(s_i(x_<i)) + t_i(x_<i)."""

    kind = "maf"

    def __init__(self, dim: int, hidden: Sequence[int] = (64, 64), order: str = "natural", seed: int = 0):
        self.dim = dim
        self.hidden = tuple(hidden)
        self.order = order
        self.seed = seed
        self.made = build_made_masks(dim, self.hidden, seed=seed, order=order)
        self.spec = MlpSpec.dense((dim, *self.hidden, 2 * dim), "tanh")

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        # zero output layer: the layer starts as the identity map
        return init_mlp(self.spec, rng, zero_last=True)

    def _shift_logscale(self, params, x, xp):
        out = eval_mlp(params, x, self.spec, self.made.masks, xp=xp)
        t = out[..., : self.dim]
        s = xp.clip(out[..., self.dim:], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        return t, s

    def forward(self, params, x, xp=jnp):
        t, s = self._shift_logscale(params, x, xp)
        return x * xp.exp(s) + t, xp.sum(s, axis=-1)

    def inverse(self, params, y, xp=jnp):
        x = xp.zeros_like(y)
        deg = self.made.in_degrees
        for k in range(1, self.dim + 1):
            t, s = self._shift_logscale(params, x, xp)
            x = xp.where(deg == k, (y - t) * xp.exp(-s), x)
        return x

    def describe(self) -> str:
        return f"maf hidden={','.join(map(str, self.hidden))} order={self.order} seed={self.seed}"


class CouplingLayer:
    """RealNVP affine coupling: the first ``split`` coordinates pass through and
    condition a scale/shift of the rest. ``flip`` applies it to reversed coordinates."""

    kind = "coupling"

    def __init__(self, dim: int, split: int, hidden: Sequence[int] = (64, 64), flip: bool = False):
        if not 1 <= split < dim:
            raise ValueError(f"split index must satisfy 1 <= d < D, got d={split}, D={dim}")
        self.dim = dim
        self.split = split
        self.hidden = tuple(hidden)
        self.flip = flip
        self.s_spec = MlpSpec.dense((split, *self.hidden, dim - split), "tanh")
        self.t_spec = MlpSpec.dense((split, *self.hidden, dim - split), "tanh")

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        return ParamStore.join({
            "s": init_mlp(self.s_spec, rng, zero_last=True),
            "t": init_mlp(self.t_spec, rng, zero_last=True),
        })

    @staticmethod
    def _sub(params, prefix):
        return {k[len(prefix) + 1:]: params[k] for k in params if k.startswith(prefix + "/")}

    def scale_shift(self, params, x_fixed, xp=jnp):
        s = eval_mlp(self._sub(params, "s"), x_fixed, self.s_spec, xp=xp)
        t = eval_mlp(self._sub(params, "t"), x_fixed, self.t_spec, xp=xp)
        return xp.clip(s, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP), t

    def forward(self, params, x, xp=jnp):
        if x.shape[-1] != self.dim:
            raise DimensionError(f"coupling layer expects {self.dim} dims, got {x.shape[-1]}")
        if self.flip:
            x = x[..., ::-1]
        a, b = x[..., : self.split], x[..., self.split:]
        s, t = self.scale_shift(params, a, xp)
        y = xp.concatenate([a, b * xp.exp(s) + t], axis=-1)
        if self.flip:
            y = y[..., ::-1]
        return y, xp.sum(s, axis=-1)

    def inverse(self, params, y, xp=jnp):
        if self.flip:
            y = y[..., ::-1]
        a, b = y[..., : self.split], y[..., self.split:]
        s, t = self.scale_shift(params, a, xp)
        x = xp.concatenate([a, (b - t) * xp.exp(-s)], axis=-1)
        if self.flip:
            x = x[..., ::-1]
        return x

    def describe(self) -> str:
        return f"coupling split={self.split} hidden={','.join(map(str, self.hidden))} flip={int(self.flip)}"


def flow_forward(layers, params, x, xp=jnp):
    """Map data to base space; returns (z, accumulated log-det)."""
    logdet = xp.zeros(x.shape[:-1])
    for layer, p in zip(layers, params):
        x, ld = layer.forward(p, x, xp)
        logdet = logdet + ld
    return x, logdet


def flow_inverse(layers, params, z, xp=jnp):
    for layer, p in zip(reversed(layers), reversed(params)):
        z = layer.inverse(p, z, xp)
    return z


def base_log_prob(z, xp=jnp):
    return -0.5 * xp.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def flow_log_prob(layers, params, x, xp=jnp):
    z, logdet = flow_forward(layers, params, x, xp)
    return base_log_prob(z, xp) + logdet


def _mean_nll(layers, params, batch):
    return -jnp.mean(flow_log_prob(layers, params, batch))


class FlowModel:
    """A stack of invertible layers over a standard-normal base.

    ``params`` is a tuple with one ParamStore per layer. The model is mutable:
    :meth:`fit_step` replaces ``params`` and advances its own Adam state.
    """

    def __init__(self, dim: int, layers: Sequence, params: Sequence[ParamStore] | None = None, seed: int = 0):
        self.dim = dim
        self.layers = tuple(layers)
        self.seed = seed
        if params is None:
            rng = np.random.default_rng(seed)
            params = [layer.init_params(rng) for layer in self.layers]
        self.params = tuple(params)
        self.opt_state = None
        self._log_prob = jax.jit(partial(flow_log_prob, self.layers))
        self._forward = jax.jit(partial(flow_forward, self.layers))
        self._inverse = jax.jit(partial(flow_inverse, self.layers))
        self._mle = jax.jit(self._mle_update)

    @classmethod
    def maf(cls, dim: int, n_layers: int = 1, hidden: Sequence[int] = (64, 64), seed: int = 0) -> "FlowModel":
        layers = [
            MafLayer(dim, hidden, order="natural" if i % 2 == 0 else "reversed", seed=seed + i)
            for i in range(n_layers)
        ]
        return cls(dim, layers, seed=seed)

    @classmethod
    def realnvp(cls, dim: int, n_layers: int = 2, hidden: Sequence[int] = (64, 64),
                split: int | None = None, seed: int = 0) -> "FlowModel":
        split = dim // 2 if split is None else split
        layers = [CouplingLayer(dim, split, hidden, flip=bool(i % 2)) for i in range(n_layers)]
        return cls(dim, layers, seed=seed)

    def _check(self, x) -> jnp.ndarray:
        x = jnp.asarray(x, dtype=jnp.float64)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"flow has dimension {self.dim}, input has {x.shape[-1]}")
        if not bool(jnp.all(jnp.isfinite(x))):
            raise NumericError("non-finite input to flow")
        return x

    def log_prob(self, x):
        return self._log_prob(self.params, self._check(x))

    def forward(self, x):
        return self._forward(self.params, self._check(x))

    def inverse(self, z):
        return self._inverse(self.params, self._check(z))

    def log_prob_numpy(self, x: np.ndarray) -> np.ndarray:
        """Same density through numpy; much faster than XLA for large batches on CPU."""
        params = tuple(p.to_numpy() for p in self.params)
        return flow_log_prob(self.layers, params, np.asarray(x, dtype=np.float64), xp=np)

    def sample(self, n: int, seed: int, return_base: bool = False):
        if n < 1:
            raise ValueError("n must be >= 1")
        z = np.random.default_rng(seed).standard_normal((n, self.dim))
        x = np.asarray(self.inverse(z))
        return (x, z) if return_base else x

    def _mle_update(self, params, opt_state, batch, lr):
        loss, grads = jax.value_and_grad(partial(_mean_nll, self.layers))(params, batch)
        new_params, new_state = adam_step(params, grads, opt_state, lr)
        return loss, new_params, new_state

    def fit_step(self, batch, lr: float = 1e-3) -> float:
        """One Adam step on the mean negative log-likelihood; returns the pre-step loss."""
        batch = self._check(batch)
        if batch.ndim != 2 or batch.shape[0] == 0:
            raise ValueError("fit_step needs a non-empty 2-D batch")
        if self.opt_state is None:
            self.opt_state = adam_init(self.params)
        loss, params, state = self._mle(self.params, self.opt_state, batch, lr)
        loss = float(loss)
        if not math.isfinite(loss):
            b = np.asarray(batch)
            raise NumericError(
                f"MLE loss is {loss}; batch n={b.shape[0]} min={b.min():.4g} max={b.max():.4g} "
                f"mean={b.mean():.4g}"
            )
        self.params, self.opt_state = params, state
        return loss

    def copy(self) -> "FlowModel":
        clone = FlowModel(self.dim, self.layers, self.params, seed=self.seed)
        clone.opt_state = self.opt_state
        return clone

    def save(self, path) -> None:
        """Writes ``<path>.params`` (checkpoint format) and ``<path>.arch`` (descriptor)."""
        path = Path(path)
        save_checkpoint(path.with_suffix(".params"), ParamStore.join({f"layer{i}": p for i, p in enumerate(self.params)}))
        lines = [f"dim {self.dim}", f"seed {self.seed}", f"layers {len(self.layers)}"]
        lines += [layer.describe() for layer in self.layers]
        path.with_suffix(".arch").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "FlowModel":
        path = Path(path)
        lines = path.with_suffix(".arch").read_text().splitlines()
        dim = int(lines[0].split()[1])
        seed = int(lines[1].split()[1])
        n = int(lines[2].split()[1])
        layers = []
        for line in lines[3:3 + n]:
            kind, *fields = line.split()
            kv = dict(f.split("=") for f in fields)
            hidden = tuple(int(h) for h in kv["hidden"].split(","))
            if kind == "maf":
                layers.append(MafLayer(dim, hidden, order=kv["order"], seed=int(kv["seed"])))
            else:
                layers.append(CouplingLayer(dim, int(kv["split"]), hidden, flip=kv["flip"] == "1"))
        stores = load_checkpoint(path.with_suffix(".params")).split()
        return cls(dim, layers, [stores[f"layer{i}"] for i in range(n)], seed=seed)


def fit_mle_step(model: FlowModel, batch, lr: float = 1e-3) -> tuple[FlowModel, float]:
    loss = model.fit_step(batch, lr)
    return model, loss

