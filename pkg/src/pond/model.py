"""Mixture-of-experts patch transformer classifier and its checkpoint format.

Each expert runs patching -> linear projection -> learned position embedding
-> post-norm transformer encoder blocks -> one attention-pooling block (a
learned query cross-attending the encoded patches) -> linear head -> softmax.
A small router maps per-channel mean/std of the input to mixture weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numgrad as ng
from .data import read_container, write_container
from .errors import CompatibilityError, ConfigError, ShapeError

CHECKPOINT_MAGIC = b"PONDCK1\0"
ROUTER_EPS = 1e-5


@dataclass(frozen=True)
class PatchConfig:
    patch_len: int = 16
    stride: int = 8

    def __post_init__(self):
        if self.patch_len < 1 or not 1 <= self.stride <= self.patch_len:
            raise ConfigError(f"need 1 <= stride <= patch_len, got {self}")

    def padded_length(self, total: int) -> int:
        if total < self.patch_len:
            raise ShapeError(f"series of length {total} is shorter than patch_len {self.patch_len}")
        return self.patch_len + math.ceil((total - self.patch_len) / self.stride) * self.stride

    def count(self, total: int) -> int:
        return (self.padded_length(total) - self.patch_len) // self.stride + 1

    def time_index(self, total: int) -> np.ndarray:
        """``(patches, patch_len)`` source time step for every patch entry."""
        padded = self.padded_length(total)
        clamp = np.minimum(np.arange(padded), total - 1)
        starts = np.arange(self.count(total)) * self.stride
        return clamp[starts[:, None] + np.arange(self.patch_len)[None, :]]


def patchify(series: np.ndarray, patch: PatchConfig) -> np.ndarray:
    """Split an ``(n, T)`` series into ``(patches, n * patch_len)`` vectors.

    Ragged tails are padded by repeating the last time step.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise ShapeError(f"expected (n, T) series, got {series.shape}")
    idx = patch.time_index(series.shape[1])
    return series[:, idx].transpose(1, 0, 2).reshape(idx.shape[0], -1)


@dataclass(frozen=True)
class ModelConfig:
    n: int
    L: int
    K: int
    m: int = 5
    experts: int = 3
    d_model: int = 16
    heads: int = 4
    d_ff: int = 128
    blocks: int = 2
    router_hidden: int = 16
    patch: PatchConfig = field(default_factory=PatchConfig)

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.experts < 1 or self.blocks < 0 or self.m < 0:
            raise ConfigError("need experts >= 1, blocks >= 0, m >= 0")
        self.patch.padded_length(self.m + self.L)

    @property
    def total_length(self) -> int:
        return self.m + self.L

    @property
    def max_patches(self) -> int:
        return self.patch.count(self.total_length)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["patch"] = PatchConfig(**d.get("patch", {}))
        return cls(**d)


@dataclass
class MoEModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "MoEModel":
        return MoEModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def expert_names(self, e: int) -> list[str]:
        return [k for k in self.params if k.startswith(f"e{e}.")]

    def permute_experts(self, order: list[int]) -> "MoEModel":
        """Reorder experts (router output columns follow)."""
        params = {}
        for new, old in enumerate(order):
            for k in self.expert_names(old):
                params[f"e{new}." + k.split(".", 1)[1]] = self.params[k].copy()
        for k, v in self.params.items():
            if k.startswith("router."):
                params[k] = v.copy()
        params["router.w2"] = params["router.w2"][:, order]
        params["router.b2"] = params["router.b2"][order]
        return MoEModel(self.config, {k: params[k] for k in self.params})


def _attn_params(rng, p: dict, prefix: str, d: int) -> None:
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.w{name}"] = ng.glorot(rng, d, d)
        p[f"{prefix}.b{name}"] = np.zeros(d)


def _ffn_norm_params(rng, p: dict, prefix: str, d: int, d_ff: int) -> None:
    p[f"{prefix}.ln1.g"] = np.ones(d)
    p[f"{prefix}.ln1.b"] = np.zeros(d)
    p[f"{prefix}.ff1.w"] = ng.glorot(rng, d, d_ff)
    p[f"{prefix}.ff1.b"] = np.zeros(d_ff)
    p[f"{prefix}.ff2.w"] = ng.glorot(rng, d_ff, d)
    p[f"{prefix}.ff2.b"] = np.zeros(d)
    p[f"{prefix}.ln2.g"] = np.ones(d)
    p[f"{prefix}.ln2.b"] = np.zeros(d)


def init_model(config: ModelConfig, seed: int = 0) -> MoEModel:
    """Glorot-uniform weights, zero biases, unit layer-norm scales; seeded."""
    rng = np.random.default_rng(seed)
    c = config
    d, inp = c.d_model, c.n * c.patch.patch_len
    p: dict[str, np.ndarray] = {}
    for e in range(c.experts):
        pre = f"e{e}"
        p[f"{pre}.proj.w"] = ng.glorot(rng, inp, d)
        p[f"{pre}.proj.b"] = np.zeros(d)
        p[f"{pre}.pos"] = ng.glorot(rng, c.max_patches, d)
        for b in range(c.blocks):
            _attn_params(rng, p, f"{pre}.enc{b}.attn", d)
            _ffn_norm_params(rng, p, f"{pre}.enc{b}", d, c.d_ff)
        p[f"{pre}.pool.query"] = ng.glorot(rng, 1, d)
        _attn_params(rng, p, f"{pre}.pool.attn", d)
        _ffn_norm_params(rng, p, f"{pre}.pool", d, c.d_ff)
        p[f"{pre}.head.w"] = ng.glorot(rng, d, c.K)
        p[f"{pre}.head.b"] = np.zeros(c.K)
    p["router.w1"] = ng.glorot(rng, 2 * c.n, c.router_hidden)
    p["router.b1"] = np.zeros(c.router_hidden)
    p["router.w2"] = ng.glorot(rng, c.router_hidden, c.experts)
    p["router.b2"] = np.zeros(c.experts)
    return MoEModel(config, p)


# --------------------------------------------------------------------------
# graph construction


def bind(graph: ng.Graph, params: dict[str, np.ndarray], trainable: bool, prefix: str = "") -> dict[str, ng.Var]:
    return {k: graph.leaf(prefix + k, v, trainable=trainable) for k, v in params.items()}


def _split_heads(x: ng.Var, h: int) -> ng.Var:
    *lead, T, d = x.shape
    y = ng.reshape(x, (-1, T, h, d // h) if lead else (T, h, d // h))
    return ng.transpose(y, (0, 2, 1, 3) if lead else (1, 0, 2))


def _attention(xq: ng.Var, xkv: ng.Var, P: dict, pre: str, h: int) -> ng.Var:
    d = xkv.shape[-1]
    q = _split_heads(xq @ P[f"{pre}.wq"] + P[f"{pre}.bq"], h)
    k = _split_heads(xkv @ P[f"{pre}.wk"] + P[f"{pre}.bk"], h)
    v = _split_heads(xkv @ P[f"{pre}.wv"] + P[f"{pre}.bv"], h)
    scores = ng.scale(q @ ng.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(d // h))
    ctx = ng.softmax(scores) @ v                                  # (B, h, Tq, dh)
    B, _, Tq, _ = ctx.shape
    merged = ng.reshape(ng.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d))
    return merged @ P[f"{pre}.wo"] + P[f"{pre}.bo"]


def _ffn_residual(x: ng.Var, a: ng.Var, P: dict, pre: str) -> ng.Var:
    x = ng.layer_norm(x + a, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"])
    f = ng.relu(x @ P[f"{pre}.ff1.w"] + P[f"{pre}.ff1.b"]) @ P[f"{pre}.ff2.w"] + P[f"{pre}.ff2.b"]
    return ng.layer_norm(x + f, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"])


def patch_tokens(x: ng.Var, patch: PatchConfig) -> ng.Var:
    """``(B, n, T)`` -> ``(B, patches, n * patch_len)``."""
    B, n, T = x.shape
    idx = patch.time_index(T)
    windows = ng.gather(x, idx, axis=2)                           # (B, n, P, pl)
    return ng.reshape(ng.transpose(windows, (0, 2, 1, 3)), (B, idx.shape[0], n * patch.patch_len))


def expert_logits(x: ng.Var, P: dict, config: ModelConfig, e: int) -> ng.Var:
    pre = f"e{e}"
    tokens = patch_tokens(x, config.patch)
    n_patches = tokens.shape[1]
    if n_patches > config.max_patches:
        raise ShapeError(f"input yields {n_patches} patches, model supports {config.max_patches}")
    h = tokens @ P[f"{pre}.proj.w"] + P[f"{pre}.proj.b"]
    h = h + ng.slice_axis(P[f"{pre}.pos"], 0, n_patches, axis=0)
    for b in range(config.blocks):
        h = _ffn_residual(h, _attention(h, h, P, f"{pre}.enc{b}.attn", config.heads), P, f"{pre}.enc{b}")
    q = P[f"{pre}.pool.query"]
    z = _ffn_residual(q, _attention(q, h, P, f"{pre}.pool.attn", config.heads), P, f"{pre}.pool")
    z = ng.reshape(z, (z.shape[0], config.d_model))
    return z @ P[f"{pre}.head.w"] + P[f"{pre}.head.b"]


def expert_probs(x: ng.Var, P: dict, config: ModelConfig, e: int) -> ng.Var:
    return ng.softmax(expert_logits(x, P, config, e))


def router_probs(x: ng.Var, P: dict) -> ng.Var:
    T = x.shape[-1]
    centering = x.graph.const(np.eye(T) - 1.0 / T)
    mu = ng.mean(x, axis=-1)
    c = x @ centering
    std = ng.sqrt(ng.mean(c * c, axis=-1) + ROUTER_EPS)
    stats = ng.concat([mu, std], axis=-1)
    hidden = ng.tanh(stats @ P["router.w1"] + P["router.b1"])
    return ng.softmax(hidden @ P["router.w2"] + P["router.b2"])


def mix(router: ng.Var, experts: list[ng.Var]) -> ng.Var:
    """Convex combination: ``(B, E)`` weights times ``E`` tensors of ``(B, K)``."""
    B, K = experts[0].shape
    stacked = ng.concat([ng.reshape(p, (B, 1, K)) for p in experts], axis=1)
    return ng.reshape(ng.reshape(router, (B, 1, len(experts))) @ stacked, (B, K))


def check_input(x: ng.Var, config: ModelConfig) -> None:
    if len(x.shape) != 3 or x.shape[1] != config.n or x.shape[2] > config.total_length:
        raise ShapeError(f"expected (B, {config.n}, <= {config.total_length}) input, got {x.shape}")


def moe_probs(x: ng.Var, P: dict, config: ModelConfig, router_override=None) -> ng.Var:
    """Graph for f: ``(B, n, m + L)`` -> ``(B, K)`` class probabilities."""
    check_input(x, config)
    outs = [expert_probs(x, P, config, e) for e in range(config.experts)]
    if config.experts == 1 and router_override is None:
        return outs[0]
    if router_override is not None:
        r = x.graph.const(np.broadcast_to(np.asarray(router_override, dtype=np.float64),
                                          (x.shape[0], config.experts)))
    else:
        r = router_probs(x, P)
    return mix(r, outs)


def _as_batch(series) -> tuple[np.ndarray, bool]:
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    return arr, False


def moe_forward(model: MoEModel, series, router_override=None) -> np.ndarray:
    """Class probabilities for one ``(n, T)`` series or a ``(B, n, T)`` batch."""
    X, single = _as_batch(series)
    g = ng.Graph()
    out = moe_probs(g.const(X), bind(g, model.params, False), model.config, router_override).value
    return out[0] if single else out


def expert_forward(model: MoEModel, e: int, series) -> np.ndarray:
    X, single = _as_batch(series)
    g = ng.Graph()
    x = g.const(X)
    check_input(x, model.config)
    out = expert_probs(x, bind(g, model.params, False), model.config, e).value
    return out[0] if single else out


# --------------------------------------------------------------------------
# checkpoint container


def tensors_to_bytes(kind: str, tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    header = {
        "kind": kind,
        "meta": meta,
        "tensors": [[name, list(np.shape(v))] for name, v in tensors.items()],
    }
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in tensors.values())
    return write_container(CHECKPOINT_MAGIC, header, payload)


def tensors_from_bytes(blob: bytes) -> tuple[str, dict[str, np.ndarray], dict]:
    def need(h):
        return 8 * sum(int(np.prod(shape, dtype=np.int64)) for _, shape in h["tensors"])

    header, payload = read_container(blob, CHECKPOINT_MAGIC, need)
    tensors, pos = {}, 0
    for name, shape in header["tensors"]:
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * size
    return header["kind"], tensors, header["meta"]


def save_model(model: MoEModel, path) -> None:
    Path(path).write_bytes(tensors_to_bytes("model", model.params, {"config": model.config.to_dict()}))


def load_model(path) -> MoEModel:
    kind, tensors, meta = tensors_from_bytes(Path(path).read_bytes())
    if kind != "model":
        raise CompatibilityError(f"checkpoint holds '{kind}', expected 'model'")
    return MoEModel(ModelConfig.from_dict(meta["config"]), tensors)
