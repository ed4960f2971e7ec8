"""Small MLP building blocks on top of :mod:`alm.diffmath`."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor


def orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    """Orthogonal matrix of shape (fan_in, fan_out), scaled by ``gain``."""
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return np.ascontiguousarray(gain * q[:fan_in, :fan_out])


class MLP:
    """ELU network with ``depth`` hidden layers.

    Several inputs are concatenated along the feature axis. With
    ``layer_norm=True`` the first hidden layer is layer-normalised before its
    activation, which is how the reward and value heads are built.
    """

    def __init__(
        self,
        in_dim: int,
        hidden: int,
        out_dim: int,
        rng: np.random.Generator,
        name: str,
        depth: int = 2,
        layer_norm: bool = False,
        zero_last: bool = False,
    ):
        self.name = name
        self.layer_norm = layer_norm
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        sizes = [in_dim] + [hidden] * depth + [out_dim]
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            w = np.zeros((fi, fo)) if (last and zero_last) else orthogonal(rng, fi, fo)
            self.weights.append(Tensor(w, requires_grad=True, name=f"{name}.l{i}.w"))
            self.biases.append(Tensor(np.zeros(fo), requires_grad=True, name=f"{name}.l{i}.b"))
        self.ln_gain = self.ln_bias = None
        if layer_norm:
            self.ln_gain = Tensor(np.ones(hidden), requires_grad=True, name=f"{name}.ln.g")
            self.ln_bias = Tensor(np.zeros(hidden), requires_grad=True, name=f"{name}.ln.b")

    @property
    def params(self) -> list[Tensor]:
        out = [t for pair in zip(self.weights, self.biases) for t in pair]
        if self.layer_norm:
            out += [self.ln_gain, self.ln_bias]
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params}

    def __call__(self, inputs: Tensor | Sequence[Tensor], frozen: bool = False) -> Tensor:
        """Forward pass. ``frozen`` evaluates with detached weights so that
        gradients reach the inputs but never this network's parameters."""
        if isinstance(inputs, Tensor):
            x = inputs
        else:
            x = inputs[0] if len(inputs) == 1 else dm.concat(list(inputs), axis=-1)
        n = len(self.weights)
        for i in range(n):
            w, b = self.weights[i], self.biases[i]
            if frozen:
                w, b = w.detach(), b.detach()
            x = dm.linear(x, w, b)
            if i == n - 1:
                break
            if i == 0 and self.layer_norm:
                g, c = self.ln_gain, self.ln_bias
                if frozen:
                    g, c = g.detach(), c.detach()
                x = dm.layer_norm(x, g, c)
            x = dm.elu(x)
        return x

    def copy_from(self, other: "MLP") -> None:
        for mine, theirs in zip(self.params, other.params, strict=True):
            mine.data[...] = theirs.data
