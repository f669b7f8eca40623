"""
Velocity-field network for the rectified-flow engine.

A small fully connected network on flattened patches:

    h1  = tanh([x, T] W1 + b1)
    h2  = tanh([h1, emb(t)] W2 + b2)
    out = h2 W3 + b3            (W3, b3 start at zero)

All weights live in one flat float64 vector; layer matrices are views into
it, so optimizers and file I/O deal with a single array. Gradients are
computed by explicit reverse-mode accumulation.
"""

import logging
from dataclasses import dataclass, asdict
from typing import Any, Dict, List, Tuple

import numpy as np

from .utils import DimensionMismatchError, ValidationError

logger = logging.getLogger(__name__)

TIME_SCALE = 1000.0
EMBED_BASE = 10000.0


@dataclass(frozen=True)
class FieldArchitecture:
    """Layer widths of a VelocityField."""

    dim: int
    hidden: Tuple[int, int] = (128, 128)
    embed: int = 16
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))
        if self.dim < 1:
            raise ValidationError(f"dim must be positive, got {self.dim}")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ValidationError(f"hidden must be two positive widths, got {self.hidden}")
        if self.embed < 2 or self.embed % 2:
            raise ValidationError(f"embed must be an even width >= 2, got {self.embed}")
        if self.activation != "tanh":
            raise ValidationError(f"unsupported activation {self.activation!r}")

    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        h1, h2 = self.hidden
        return [
            ('W1', (2 * self.dim, h1)), ('b1', (h1,)),
            ('W2', (h1 + self.embed, h2)), ('b2', (h2,)),
            ('W3', (h2, self.dim)), ('b3', (self.dim,)),
        ]

    @property
    def n_weights(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['hidden'] = list(self.hidden)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FieldArchitecture':
        return cls(dim=int(data['dim']), hidden=tuple(data['hidden']),
                   embed=int(data['embed']), activation=data.get('activation', 'tanh'))


def time_embedding(t: np.ndarray, width: int) -> np.ndarray:
    """Sinusoidal embedding [sin(1000 t w_k), cos(1000 t w_k)], w_k = 10000^(-k / (width/2))."""
    half = width // 2
    freqs = EMBED_BASE ** (-np.arange(half) / half)
    angles = TIME_SCALE * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class VelocityField:
    """Conditional velocity field v(x, T, t) with a flat weight vector."""

    def __init__(self, arch: FieldArchitecture, weights: np.ndarray = None):
        """
        Initialize field.

        Args:
            arch: Layer widths
            weights: Flat weight vector; zeros when omitted
        """
        self.arch = arch
        if weights is None:
            weights = np.zeros(arch.n_weights)
        weights = np.asarray(weights, dtype=np.float64).ravel()
        if weights.size != arch.n_weights:
            raise DimensionMismatchError(
                f"expected {arch.n_weights} weights, got {weights.size}")
        self.weights = weights.copy()

    @classmethod
    def initialized(cls, arch: FieldArchitecture, seed: int = 0,
                    zero_head: bool = True) -> 'VelocityField':
        """Scaled-normal hidden weights, zero biases, zero output head unless told otherwise."""
        field = cls(arch)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xF1E1D])))
        for name, view in field.params().items():
            if name.startswith('W') and not (zero_head and name == 'W3'):
                view[...] = rng.standard_normal(view.shape) / np.sqrt(view.shape[0])
        return field

    @property
    def n_weights(self) -> int:
        return self.weights.size

    def params(self) -> Dict[str, np.ndarray]:
        """Named views into the flat weight vector."""
        views, offset = {}, 0
        for name, shape in self.arch.layout():
            size = int(np.prod(shape))
            views[name] = self.weights[offset:offset + size].reshape(shape)
            offset += size
        return views

    def copy(self) -> 'VelocityField':
        return VelocityField(self.arch, self.weights)

    def _inputs(self, x, T, t):
        x = np.asarray(x, dtype=np.float64)
        T = np.asarray(T, dtype=np.float64)
        if x.shape != T.shape:
            raise DimensionMismatchError(f"x {x.shape} and condition {T.shape} differ in shape")
        if x.ndim not in (1, 2) or x.shape[-1] != self.arch.dim:
            raise DimensionMismatchError(
                f"expected (..., {self.arch.dim}) inputs, got {x.shape}")
        batch = x.reshape(-1, self.arch.dim)
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64).ravel(), (batch.shape[0],))
        return batch, T.reshape(-1, self.arch.dim), tt

    def _forward(self, x, T, t):
        p = self.params()
        inp = np.concatenate([x, T], axis=1)
        h1 = np.tanh(inp @ p['W1'] + p['b1'])
        u = np.concatenate([h1, time_embedding(t, self.arch.embed)], axis=1)
        h2 = np.tanh(u @ p['W2'] + p['b2'])
        out = h2 @ p['W3'] + p['b3']
        return out, (inp, h1, u, h2)

    def evaluate(self, x, T, t) -> np.ndarray:
        """
        Velocity at state x under condition T and time t.

        Args:
            x: State, shape (dim,) or (batch, dim)
            T: Condition, same shape as x
            t: Scalar time or one time per batch row

        Returns:
            Velocity with the shape of x
        """
        xb, Tb, tt = self._inputs(x, T, t)
        out, _ = self._forward(xb, Tb, tt)
        return out.reshape(np.shape(x))

    def forward_backward(self, x, T, t, grad_fn):
        """
        Forward pass, then back-propagate ``grad_fn(out)`` (dLoss/dout).

        Returns:
            (out, loss, flat gradient) where ``grad_fn`` returns (loss, dout)
        """
        xb, Tb, tt = self._inputs(x, T, t)
        out, (inp, h1, u, h2) = self._forward(xb, Tb, tt)
        loss, g_out = grad_fn(out)
        p = self.params()
        h1_width = self.arch.hidden[0]

        g = VelocityField(self.arch).params()
        g['W3'][...] = h2.T @ g_out
        g['b3'][...] = g_out.sum(axis=0)
        g_z2 = (g_out @ p['W3'].T) * (1.0 - h2 * h2)
        g['W2'][...] = u.T @ g_z2
        g['b2'][...] = g_z2.sum(axis=0)
        g_z1 = (g_z2 @ p['W2'].T)[:, :h1_width] * (1.0 - h1 * h1)
        g['W1'][...] = inp.T @ g_z1
        g['b1'][...] = g_z1.sum(axis=0)

        return out, loss, np.concatenate([v.ravel() for v in g.values()])


def grad_check(field: VelocityField, loss_fn, eps: float = 1e-6) -> float:
    """
    Relative error between an analytic gradient and central differences.

    Args:
        field: Field whose weights are perturbed in place (and restored)
        loss_fn: Callable(field) -> (loss, flat gradient)
        eps: Finite-difference step

    Returns:
        ||g_analytic - g_numeric|| / max(||g_analytic|| + ||g_numeric||, 1e-12)
    """
    _, analytic = loss_fn(field)
    numeric = np.zeros_like(analytic)
    for i in range(field.n_weights):
        original = field.weights[i]
        field.weights[i] = original + eps
        plus, _ = loss_fn(field)
        field.weights[i] = original - eps
        minus, _ = loss_fn(field)
        field.weights[i] = original
        numeric[i] = (plus - minus) / (2.0 * eps)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)
