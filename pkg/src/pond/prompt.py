"""Common prompt, conditional prompt generators and domain-level prompt buffers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .errors import ConfigError, ShapeError

GENERATOR_KEYS = ("w1", "b1", "w2", "b2")


@dataclass
class GeneratorParams:
    """Two-layer tanh perceptron from a flattened ``(n, L)`` series to an ``(n, m)`` prompt."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    n: int
    m: int

    @property
    def L(self) -> int:
        return self.w1.shape[0] // self.n

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in GENERATOR_KEYS}

    def replace(self, arrays: dict[str, np.ndarray]) -> "GeneratorParams":
        return GeneratorParams(**{k: np.array(arrays[k]) for k in GENERATOR_KEYS}, n=self.n, m=self.m)

    def copy(self) -> "GeneratorParams":
        return self.replace(self.arrays())


def init_generator(n: int, L: int, m: int, hidden: int = 64, seed: int = 0) -> GeneratorParams:
    rng = np.random.default_rng(seed)
    return GeneratorParams(
        w1=ng.glorot(rng, n * L, hidden),
        b1=np.zeros(hidden),
        w2=ng.glorot(rng, hidden, n * m),
        b2=np.zeros(n * m),
        n=n,
        m=m,
    )


def zero_generator(n: int, L: int, m: int, hidden: int = 64) -> GeneratorParams:
    return GeneratorParams(np.zeros((n * L, hidden)), np.zeros(hidden), np.zeros((hidden, n * m)),
                           np.zeros(n * m), n, m)


def generator_graph(x: ng.Var, G: dict[str, ng.Var], n: int, m: int) -> ng.Var:
    """``(B, n, L)`` series -> ``(B, n, m)`` instance prompts."""
    B, _, L = x.shape
    flat = ng.reshape(x, (B, n * L))
    hidden = ng.tanh(flat @ G["w1"] + G["b1"])
    return ng.reshape(hidden @ G["w2"] + G["b2"], (B, n, m))


def _check_series(g: GeneratorParams, X: np.ndarray) -> None:
    if X.shape[1:] != (g.n, g.L):
        raise ShapeError(f"generator expects (n, L) = ({g.n}, {g.L}), got {X.shape[1:]}")


def generate_instance_prompt(g: GeneratorParams, x, noise_std: float = 0.0,
                             rng: np.random.Generator | None = None) -> np.ndarray:
    """Instance-level prompt for one ``(n, L)`` series or a ``(B, n, L)`` batch.

    ``noise_std > 0`` adds Gaussian noise to the hidden layer input; it is off
    by default so the map is deterministic.
    """
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    _check_series(g, X)
    flat = X.reshape(len(X), -1)
    pre = flat @ g.w1 + g.b1
    if noise_std > 0:
        pre = pre + (rng or np.random.default_rng()).normal(0.0, noise_std, size=pre.shape)
    out = (np.tanh(pre) @ g.w2 + g.b2).reshape(len(X), g.n, g.m)
    return out[0] if single else out


def aggregate_domain_prompt(prompts) -> np.ndarray:
    """Entrywise mean of instance-level prompts."""
    arr = [np.asarray(p, dtype=np.float64) for p in prompts]
    if not arr:
        raise ConfigError("cannot aggregate an empty list of prompts")
    if any(p.shape != arr[0].shape for p in arr):
        raise ShapeError("instance prompts disagree in shape")
    return np.mean(np.stack(arr), axis=0)


@dataclass(frozen=True)
class DomainPromptBuffer:
    """Exponential moving average of batch-mean instance prompts."""

    value: np.ndarray | None = None
    momentum: float = 0.9
    count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("buffer momentum must lie in [0, 1)")


def update_buffer(buffer: DomainPromptBuffer, batch_prompts) -> DomainPromptBuffer:
    batch_mean = aggregate_domain_prompt(batch_prompts)
    if buffer.value is None or buffer.count == 0:
        new = batch_mean
    else:
        new = buffer.momentum * buffer.value + (1.0 - buffer.momentum) * batch_mean
    return DomainPromptBuffer(new, buffer.momentum, buffer.count + 1)


def prepend(common, instance, x, allow_empty: bool = False) -> np.ndarray:
    """``[common + instance, x]`` along the time axis -> ``(n, m + L)``."""
    common = np.asarray(common, dtype=np.float64)
    instance = np.asarray(instance, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if common.shape != instance.shape or common.ndim != 2 or x.ndim != 2 or common.shape[0] != x.shape[0]:
        raise ShapeError(f"cannot prepend prompts {common.shape}/{instance.shape} to series {x.shape}")
    if common.shape[1] == 0 and not allow_empty:
        raise ConfigError("prompt length m must be at least 1")
    return np.concatenate([common + instance, x], axis=1)


def prepend_graph(prompt: ng.Var, x: ng.Var) -> ng.Var:
    """Graph form of :func:`prepend`; ``prompt`` is ``(n, m)`` or ``(B, n, m)``."""
    if len(prompt.shape) == 2:
        prompt = x.graph.const(np.zeros((x.shape[0],) + prompt.shape)) + prompt
    return ng.concat([prompt, x], axis=2)
