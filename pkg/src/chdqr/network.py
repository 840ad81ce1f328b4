"""Feed-forward log-density network with a resizable output layer.

The forward/backward passes are written out in numpy. The output head is
stored row-per-unit (``head_W`` has shape (K, h)) so that output units can be
deleted or duplicated when prototypes are removed or split.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    m = z.max(axis=-1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))


@dataclass
class RegionProbabilities:
    """Per-region log-densities and the probabilities they imply.

    Both arrays are (n, K); ``probs`` is the softmax of log-density + log-area.
    """

    log_density: np.ndarray
    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


class DensityNetwork:
    """ReLU MLP ``x -> f(x)`` with one output per prototype.

    Parameters
    ----------
    input_dim : int
    hidden_sizes : sequence of int
    n_outputs : int
    rng : numpy Generator used for the hidden-layer initialisation.
    zero_head : bool
        Zero the output layer so that the initial density is flat.
    """

    def __init__(self, input_dim, hidden_sizes, n_outputs, rng, zero_head=True):
        self.input_dim = int(input_dim)
        self.hidden_sizes = [int(h) for h in hidden_sizes]
        self.hidden_W = []
        self.hidden_b = []
        fan_in = self.input_dim
        for h in self.hidden_sizes:
            bound = np.sqrt(6.0 / fan_in)
            self.hidden_W.append(rng.uniform(-bound, bound, size=(fan_in, h)))
            self.hidden_b.append(np.zeros(h))
            fan_in = h
        if zero_head:
            self.head_W = np.zeros((n_outputs, fan_in))
        else:
            bound = np.sqrt(1.0 / fan_in)
            self.head_W = rng.uniform(-bound, bound, size=(n_outputs, fan_in))
        self.head_b = np.zeros(n_outputs)

    @property
    def n_outputs(self) -> int:
        return self.head_W.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.hidden_W, self.hidden_b)):
            out[f"hidden.{i}.W"] = W
            out[f"hidden.{i}.b"] = b
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        n = len(self.hidden_sizes)
        self.hidden_W = [np.array(params[f"hidden.{i}.W"], dtype=float) for i in range(n)]
        self.hidden_b = [np.array(params[f"hidden.{i}.b"], dtype=float) for i in range(n)]
        self.head_W = np.array(params["head.W"], dtype=float)
        self.head_b = np.array(params["head.b"], dtype=float)

    def copy(self) -> "DensityNetwork":
        new = object.__new__(DensityNetwork)
        new.input_dim = self.input_dim
        new.hidden_sizes = list(self.hidden_sizes)
        new.hidden_W = [w.copy() for w in self.hidden_W]
        new.hidden_b = [b.copy() for b in self.hidden_b]
        new.head_W = self.head_W.copy()
        new.head_b = self.head_b.copy()
        return new

    def forward(self, X, return_cache=False):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} input features, got {X.shape[1]}")
        acts = [X]
        h = X
        for W, b in zip(self.hidden_W, self.hidden_b):
            h = np.maximum(h @ W + b, 0.0)
            acts.append(h)
        out = h @ self.head_W.T + self.head_b
        if return_cache:
            return out, acts
        return out

    def backward(self, acts, d_out) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its gradient ``d_out`` w.r.t. the outputs."""
        grads = {
            "head.W": d_out.T @ acts[-1],
            "head.b": d_out.sum(axis=0),
        }
        delta = d_out @ self.head_W
        for i in range(len(self.hidden_W) - 1, -1, -1):
            delta = delta * (acts[i + 1] > 0)
            grads[f"hidden.{i}.W"] = acts[i].T @ delta
            grads[f"hidden.{i}.b"] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ self.hidden_W[i].T
        return grads

    def remove_output_units(self, indices) -> None:
        idx = np.asarray(indices, dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_outputs):
            raise IndexError(f"output index out of range for K={self.n_outputs}")
        self.head_W = np.delete(self.head_W, idx, axis=0)
        self.head_b = np.delete(self.head_b, idx)

    def duplicate_output_units(self, indices) -> None:
        idx = np.asarray(indices, dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_outputs):
            raise IndexError(f"output index out of range for K={self.n_outputs}")
        self.head_W = np.concatenate([self.head_W, self.head_W[idx]], axis=0)
        self.head_b = np.concatenate([self.head_b, self.head_b[idx]])


def region_probabilities(log_density, areas) -> RegionProbabilities:
    """Softmax of log-density plus log-area; areas are treated as constants."""
    areas = np.asarray(areas, dtype=float)
    if np.any(~(areas > 0)):
        raise ValueError("all region areas must be positive")
    log_density = np.atleast_2d(np.asarray(log_density, dtype=float))
    if log_density.shape[-1] != areas.size:
        raise ValueError(f"{log_density.shape[-1]} log-densities for {areas.size} areas")
    return RegionProbabilities(log_density, log_softmax(log_density + np.log(areas)))


def remove_output_unit(net: DensityNetwork, i: int, k_min: int = 2) -> DensityNetwork:
    if not 0 <= i < net.n_outputs:
        raise IndexError(f"output index {i} out of range for K={net.n_outputs}")
    if net.n_outputs <= k_min:
        raise ValueError(f"cannot shrink below K_min={k_min}")
    out = net.copy()
    out.remove_output_units([i])
    return out


def add_output_unit(net: DensityNetwork, i: int, k_max: int = 10_000) -> DensityNetwork:
    """Append a copy of output unit ``i``; the new logit equals logit ``i`` everywhere."""
    if not 0 <= i < net.n_outputs:
        raise IndexError(f"output index {i} out of range for K={net.n_outputs}")
    if net.n_outputs >= k_max:
        raise ValueError(f"cannot grow beyond K_max={k_max}")
    out = net.copy()
    out.duplicate_output_units([i])
    return out


class Adam:
    """Adam over a dict of named arrays, updated in place.

    Moments for row-indexed parameters can be deleted or appended (as zeros)
    to follow output-unit surgery.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def remove_rows(self, name: str, indices) -> None:
        if name in self.m:
            self.m[name] = np.delete(self.m[name], indices, axis=0)
            self.v[name] = np.delete(self.v[name], indices, axis=0)

    def append_rows(self, name: str, n: int) -> None:
        if name in self.m and n:
            shape = (n,) + self.m[name].shape[1:]
            self.m[name] = np.concatenate([self.m[name], np.zeros(shape)], axis=0)
            self.v[name] = np.concatenate([self.v[name], np.zeros(shape)], axis=0)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def apply_gradients(net: DensityNetwork, grads: dict[str, np.ndarray], optimizer: Adam):
    """One Adam step on ``net``; returns the (mutated) net and optimizer."""
    params = net.params()
    optimizer.step(params, grads)
    return net, optimizer
