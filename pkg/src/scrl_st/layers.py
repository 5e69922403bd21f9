"""Two-layer perceptron with an explicit backward pass, plus its optimizer.

The policy, the regression network and both projection heads are all
``affine -> ReLU -> affine``; they share this implementation.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from .errors import DimensionError, NumericError
from .numerics import FloatArray

PARAM_NAMES = ("w1", "b1", "w2", "b2")

Params = dict[str, FloatArray]


@dataclass
class ForwardCache:
    inputs: FloatArray
    pre: FloatArray
    hidden: FloatArray


@dataclass
class Mlp:
    """``out = W2 · relu(W1 · x + b1) + b2`` applied row-wise, in float64."""

    w1: FloatArray
    b1: FloatArray
    w2: FloatArray
    b2: FloatArray

    @classmethod
    def init(
        cls, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator
    ) -> "Mlp":
        """Uniform ±1/sqrt(fan_in) weights and zero biases."""
        lim1 = 1.0 / math.sqrt(in_dim)
        lim2 = 1.0 / math.sqrt(hidden)
        return cls(
            w1=rng.uniform(-lim1, lim1, size=(hidden, in_dim)),
            b1=np.zeros(hidden),
            w2=rng.uniform(-lim2, lim2, size=(out_dim, hidden)),
            b2=np.zeros(out_dim),
        )

    @classmethod
    def zeros(cls, in_dim: int, hidden: int, out_dim: int) -> "Mlp":
        return cls(
            w1=np.zeros((hidden, in_dim)),
            b1=np.zeros(hidden),
            w2=np.zeros((out_dim, hidden)),
            b2=np.zeros(out_dim),
        )

    @property
    def in_dim(self) -> int:
        return int(self.w1.shape[1])

    @property
    def hidden_dim(self) -> int:
        return int(self.w1.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.w2.shape[0])

    def params(self) -> Params:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "Mlp":
        return Mlp(**{k: v.copy() for k, v in self.params().items()})

    def _check(self, x: FloatArray) -> None:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"network expects input width {self.in_dim}, got shape {x.shape}"
            )

    def forward(
        self, x: npt.ArrayLike, input_scale: FloatArray | None = None
    ) -> tuple[FloatArray, ForwardCache]:
        """Forward pass; ``input_scale`` multiplies the inputs (dropout masks)."""
        xs = np.asarray(x, dtype=np.float64)
        self._check(xs)
        if input_scale is not None:
            xs = xs * input_scale
        pre = xs @ self.w1.T + self.b1
        hidden = np.maximum(pre, 0.0)
        out = hidden @ self.w2.T + self.b2
        return out, ForwardCache(inputs=xs, pre=pre, hidden=hidden)

    def __call__(self, x: npt.ArrayLike) -> FloatArray:
        return self.forward(x)[0]

    def backward(
        self, cache: ForwardCache, grad_out: npt.ArrayLike
    ) -> tuple[Params, FloatArray]:
        """Parameter gradients and the gradient with respect to the inputs."""
        g = np.asarray(grad_out, dtype=np.float64)
        grads: Params = {
            "w2": g.T @ cache.hidden,
            "b2": g.sum(axis=0),
        }
        g_hidden = (g @ self.w2) * (cache.pre > 0.0)
        grads["w1"] = g_hidden.T @ cache.inputs
        grads["b1"] = g_hidden.sum(axis=0)
        return grads, g_hidden @ self.w1


def cosine_lr(epoch: int, total: int, lr0: float, lr_min: float) -> float:
    """Cosine annealing from ``lr0`` at epoch 0 to ``lr_min`` at the last epoch."""
    if total <= 1:
        return lr0
    progress = min(max(epoch, 0), total - 1) / (total - 1)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass
class SgdMomentum:
    """SGD with momentum and L2 weight decay.

    ``v <- momentum * v + g + weight_decay * theta``; ``theta <- theta - lr * v``.
    """

    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, Params] = field(default_factory=dict)

    def step(self, key: str, net: Mlp, grads: Params, lr: float) -> None:
        """Update ``net`` in place; ``key`` names the velocity slot."""
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {key}.{name}")
        slot = self.velocity.setdefault(
            key, {name: np.zeros_like(p) for name, p in net.params().items()}
        )
        for name, param in net.params().items():
            v = slot[name]
            v *= self.momentum
            v += grads[name] + self.weight_decay * param
            param -= lr * v
