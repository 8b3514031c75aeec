"""Training, fidelity and discrimination losses plus plug-in information oracles.

The graph builders (``*_graph``) are what training differentiates; the plain
functions evaluate the same expressions on arrays for tests and reporting.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import numgrad as ng
from .errors import ConfigError
from .model import MoEModel, bind, moe_probs
from .prompt import GeneratorParams, generator_graph, prepend_graph


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # discrimination
    lambda2: float = 1.0  # fidelity

    def __post_init__(self):
        for v in (self.lambda1, self.lambda2):
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError("loss weights must be finite and non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    loss_R: float
    loss_F: float
    loss_D: float
    G: float
    fallback: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def onehot(y, K: int) -> np.ndarray:
    return np.eye(K)[np.asarray(y, dtype=np.int64)]


# --------------------------------------------------------------------------
# graph builders


def classification_ce(f_params: dict, model: MoEModel, prompt: ng.Var, X: ng.Var, Y: ng.Var) -> ng.Var:
    return ng.cross_entropy(moe_probs(prepend_graph(prompt, X), f_params, model.config), Y)


NORM_EPS = 1e-12


def discrimination_graph(prompts: list[ng.Var], similarity: str = "trace") -> tuple[ng.Var, bool]:
    """Leave-one-out bound over pairwise prompt similarities.

    ``similarity="trace"`` uses the Frobenius inner product trace(A^T B);
    ``"cosine"`` first scales every prompt to unit Frobenius norm, which keeps
    the bound from running off to minus infinity as prompt norms grow.
    Returns ``(loss, fallback)``; with exactly two domains the bound's
    denominator is empty and the raw similarity is returned instead.
    """
    if similarity not in ("trace", "cosine"):
        raise ConfigError(f"unknown similarity {similarity!r}")
    M = len(prompts)
    if M <= 1:
        raise ConfigError("discrimination loss needs at least two domains")
    size = int(np.prod(prompts[0].shape))
    F = ng.concat([ng.reshape(p, (1, size)) for p in prompts], axis=0)
    if similarity == "cosine":
        norms = ng.sqrt(ng.reduce_sum(F * F, axis=1) + NORM_EPS)
        F = ng.transpose(ng.transpose(F, (1, 0)) / norms, (1, 0))
    S = ng.reshape(F @ ng.transpose(F, (1, 0)), (M * M,))
    if M == 2:
        return ng.reshape(ng.gather(S, [1], axis=0), ()), True
    pairs = [(a, b) for a in range(M) for b in range(M) if a != b]
    num = [a * M + b for a, b in pairs]
    den = [[a * M + i for i in range(M) if i not in (a, b)] for a, b in pairs]
    terms = ng.gather(S, num, axis=0) - ng.logsumexp(ng.gather(S, den, axis=0))
    return ng.reduce_sum(terms), False


def combine(loss_R: ng.Var, loss_D: ng.Var | None, loss_F: ng.Var | None, weights: LossWeights) -> ng.Var:
    """G = l_R + lambda1 * l_D + lambda2 * l_F; zero-weighted terms are left out of the graph."""
    G = loss_R
    if weights.lambda1 != 0 and loss_D is not None:
        G = G + ng.scale(loss_D, weights.lambda1)
    if weights.lambda2 != 0 and loss_F is not None:
        G = G + ng.scale(loss_F, weights.lambda2)
    return G


# --------------------------------------------------------------------------
# array-level evaluation


def similarity(a, b) -> float:
    """trace(a^T b), i.e. the Frobenius inner product."""
    return float(np.trace(np.asarray(a, dtype=np.float64).T @ np.asarray(b, dtype=np.float64)))


def loss_R(model: MoEModel, common, generator: GeneratorParams | None, X, y) -> float:
    """Mean cross-entropy of f([P + g(x), x]) over a batch."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ConfigError("empty batch")
    g = ng.Graph()
    xv = g.const(X)
    prompt = g.const(common)
    if generator is not None:
        prompt = generator_graph(xv, bind(g, generator.arrays(), False), generator.n, generator.m) + prompt
    return float(classification_ce(bind(g, model.params, False), model, prompt, xv,
                                   g.const(onehot(y, model.config.K))).value)


def loss_F(model: MoEModel, generators: dict[str, GeneratorParams], batches: dict, common=None) -> float:
    """Sum over domains of the batch-mean cross-entropy of f([dP_j, x_j]).

    ``common`` switches the input to ``[P + dP_j, x_j]`` for comparison runs.
    """
    total, seen = 0.0, 0
    for dom, (X, y) in batches.items():
        if len(X) == 0:
            continue
        gen = generators[dom]
        base = np.zeros((gen.n, gen.m)) if common is None else common
        total += loss_R(model, base, gen, X, y)
        seen += 1
    if not seen:
        raise ConfigError("fidelity loss needs at least one non-empty batch")
    return total


def loss_D(prompts, similarity: str = "trace") -> tuple[float, bool]:
    g = ng.Graph()
    value, fallback = discrimination_graph([g.const(p) for p in prompts], similarity)
    return float(value.value), fallback


def pairwise_terms(prompts, similarity: str = "trace") -> np.ndarray:
    """Per ordered pair ``(a, b)`` term of the bound; NaN on the diagonal."""
    P = [np.asarray(p, dtype=np.float64).ravel() for p in prompts]
    if similarity == "cosine":
        P = [p / math.sqrt(p @ p + NORM_EPS) for p in P]
    elif similarity != "trace":
        raise ConfigError(f"unknown similarity {similarity!r}")
    M = len(P)
    S = np.array([[a @ b for b in P] for a in P])
    out = np.full((M, M), np.nan)
    for a, b in itertools.permutations(range(M), 2):
        rest = [S[a, i] for i in range(M) if i not in (a, b)]
        if rest:
            mx = max(rest)
            out[a, b] = S[a, b] - (mx + math.log(sum(math.exp(r - mx) for r in rest)))
        else:
            out[a, b] = S[a, b]
    return out


def total_G(loss_r: float, loss_d: float, loss_f: float, weights: LossWeights,
            fallback: bool = False) -> LossBreakdown:
    return LossBreakdown(loss_r, loss_f, loss_d,
                         loss_r + weights.lambda1 * loss_d + weights.lambda2 * loss_f, fallback)


# --------------------------------------------------------------------------
# plug-in information measures (diagnostics only)


def brute_force_entropy(samples) -> float:
    """Plug-in Shannon entropy in bits."""
    samples = [_hashable(s) for s in samples]
    if not samples:
        raise ConfigError("entropy of an empty sample")
    n = len(samples)
    return -sum((c / n) * math.log2(c / n) for c in Counter(samples).values())


def brute_force_mi(x, y) -> float:
    """Plug-in mutual information in bits from the empirical joint."""
    x = [_hashable(v) for v in x]
    y = [_hashable(v) for v in y]
    if not x or len(x) != len(y):
        raise ConfigError("mutual information needs equal-length non-empty samples")
    n = len(x)
    joint = Counter(zip(x, y))
    px, py = Counter(x), Counter(y)
    return sum((c / n) * math.log2(c * n / (px[a] * py[b])) for (a, b), c in joint.items())


def _hashable(v):
    if isinstance(v, np.ndarray):
        return tuple(v.ravel().tolist())
    if isinstance(v, list):
        return tuple(v)
    return v
