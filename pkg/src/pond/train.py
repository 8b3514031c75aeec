"""Pretraining, Reptile prompt tuning, few-shot target transfer and source selection."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numgrad as ng
from .errors import CompatibilityError, ConfigError, ShapeError
from .model import (
    MoEModel,
    ModelConfig,
    PatchConfig,
    bind,
    init_model,
    moe_probs,
    tensors_from_bytes,
    tensors_to_bytes,
)
from .objective import (
    LossBreakdown,
    LossWeights,
    classification_ce,
    combine,
    discrimination_graph,
    onehot,
)
from .prompt import (
    DomainPromptBuffer,
    GeneratorParams,
    generate_instance_prompt,
    generator_graph,
    init_generator,
    prepend_graph,
    update_buffer,
)

log = logging.getLogger(__name__)

_STREAMS = {"model": 1, "split": 2, "pretrain": 3, "tune": 4, "shots": 5, "generator": 6, "transfer": 7,
            "select": 8, "flex": 9}


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 50
    batch_size: int = 16
    steps: int = 50                 # N, global Reptile steps
    delta: float = 0.01             # global (extrapolation) rate
    eta: float = 0.001              # local gradient rate
    m: int = 5
    lambda1: float = 1.0
    lambda2: float = 1.0
    shots: int = 10
    seed: int = 0
    use_moe: bool = True
    use_common_prompt: bool = True
    use_generator: bool = True
    pretrain_lr: float = 1e-3
    pretrain_epochs: int | None = None
    transfer_epochs: int | None = None
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    buffer_momentum: float = 0.9
    generator_hidden: int = 64
    generator_noise: float = 0.0
    fidelity_with_common: bool = False
    prompt_grad: str = "G"          # objective differentiated for the common-prompt step
    discrimination_sim: str = "trace"
    experts: int = 3
    d_model: int = 16
    heads: int = 4
    d_ff: int = 128
    blocks: int = 2
    patch_len: int = 16
    stride: int = 8

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ConfigError("delta must lie in (0, 1]")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be at least 1")
        if self.epochs < 0 or self.shots < 0 or self.m < 1:
            raise ConfigError("epochs and shots must be non-negative and m at least 1")
        if self.prompt_grad not in ("G", "R"):
            raise ConfigError("prompt_grad must be 'G' or 'R'")
        if self.discrimination_sim not in ("trace", "cosine"):
            raise ConfigError("discrimination_sim must be 'trace' or 'cosine'")
        LossWeights(self.lambda1, self.lambda2)
        object.__setattr__(self, "split_ratios", tuple(float(r) for r in self.split_ratios))

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    @property
    def n_experts(self) -> int:
        return self.experts if self.use_moe else 1

    def seed_for(self, stream: str) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed, _STREAMS[stream]])

    def rng(self, stream: str) -> np.random.Generator:
        return np.random.default_rng(self.seed_for(stream))

    def model_config(self, n: int, L: int, K: int) -> ModelConfig:
        return ModelConfig(n=n, L=L, K=K, m=self.m, experts=self.n_experts, d_model=self.d_model,
                           heads=self.heads, d_ff=self.d_ff, blocks=self.blocks,
                           patch=PatchConfig(self.patch_len, self.stride))

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        return cls(**d)


# Desk-scale budget for the synthetic benchmark. RunConfig() itself keeps the
# published defaults, under which 50 steps at eta=0.001 barely move the generators.
DESK_PRESET = {"epochs": 20, "steps": 300, "eta": 0.2, "delta": 0.1, "lambda1": 0.1,
               "discrimination_sim": "cosine"}


def desk_config(**overrides) -> RunConfig:
    return RunConfig(**{**DESK_PRESET, **overrides})


@dataclass
class TrainedState:
    model: MoEModel
    config: RunConfig
    source_ids: list[str]
    common: np.ndarray
    generators: dict[str, GeneratorParams]
    buffers: dict[str, DomainPromptBuffer]
    domain_prompts: dict[str, np.ndarray] = field(default_factory=dict)
    target_generator: GeneratorParams | None = None
    target_prompt: np.ndarray | None = None
    history: dict[str, list] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.model.config.n

    @property
    def m(self) -> int:
        return self.model.config.m


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            out[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


def _batches(count: int, size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for s in range(0, count, size):
        yield order[s:s + size]


# --------------------------------------------------------------------------
# step 1: pretraining


def pretrain_loss(model: MoEModel, X: np.ndarray, y: np.ndarray, params=None) -> tuple[ng.Graph, ng.Var]:
    g = ng.Graph()
    P = bind(g, params if params is not None else model.params, params is not None, prefix="")
    xv = g.const(X)
    zero = g.const(np.zeros((model.config.n, model.config.m)))
    return g, classification_ce(P, model, zero, xv, g.const(onehot(y, model.config.K)))


def pool_loss(model: MoEModel, X: np.ndarray, y: np.ndarray) -> float:
    return float(pretrain_loss(model, X, y)[1].value)


def pretrain(model: MoEModel, X: np.ndarray, y: np.ndarray, config: RunConfig,
             epochs: int | None = None) -> tuple[MoEModel, dict]:
    """Fit experts and router jointly with Adam on f([0, x])."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ConfigError("empty pretraining pool")
    epochs = config.pretrain_epochs if epochs is None else epochs
    epochs = config.epochs if epochs is None else epochs
    rng = config.rng("pretrain")
    params = {k: v.copy() for k, v in model.params.items()}
    opt = Adam(params, lr=config.pretrain_lr)
    history = {"initial_loss": pool_loss(model, X, y), "epoch_loss": [], "optimizer_steps": 0}
    for epoch in range(epochs):
        losses = []
        for idx in _batches(len(X), config.batch_size, rng):
            g, loss = pretrain_loss(model, X[idx], y[idx], params)
            params = opt.step(params, g.backward(loss))
            losses.append(float(loss.value))
            history["optimizer_steps"] += 1
        history["epoch_loss"].append(float(np.mean(losses)))
    trained = MoEModel(model.config, params)
    history["final_loss"] = pool_loss(trained, X, y)
    return trained, history


# --------------------------------------------------------------------------
# step 2: Reptile prompt tuning


def exact_domain_prompt(gen: GeneratorParams, X: np.ndarray, config: RunConfig) -> np.ndarray:
    if not config.use_generator:
        return np.zeros((gen.n, gen.m))
    return generate_instance_prompt(gen, X).mean(axis=0)


def init_state(model: MoEModel, source_ids: list[str], config: RunConfig, L: int) -> TrainedState:
    n, m = model.config.n, model.config.m
    base = init_generator(n, L, m, config.generator_hidden, seed=config.seed_for("generator"))
    return TrainedState(
        model=model,
        config=config,
        source_ids=list(source_ids),
        common=np.zeros((n, m)),
        generators={d: base.copy() for d in source_ids},
        buffers={d: DomainPromptBuffer(momentum=config.buffer_momentum) for d in source_ids},
        history={},
    )


def tuning_graph(state: TrainedState, domain: str, X: np.ndarray, y: np.ndarray, f_trainable: bool = False):
    """Build G for one batch of ``domain``.

    The current domain's prompt is the batch mean of its instance prompts;
    every other domain enters through its buffer as a constant. Returns
    ``(graph, G, l_R, l_F, l_D, fallback, instance_prompts)``.
    """
    cfg = state.config
    model = state.model
    n, m = state.n, state.m
    g = ng.Graph()
    f = bind(g, model.params, f_trainable, prefix="f.")
    P = g.leaf("P", state.common, trainable=cfg.use_common_prompt)
    xv = g.const(X)
    Y = g.const(onehot(y, model.config.K))
    if cfg.use_generator:
        G = bind(g, state.generators[domain].arrays(), True, prefix="g.")
        dP = generator_graph(xv, G, n, m)
    else:
        dP = g.const(np.zeros((len(X), n, m)))
    l_R = classification_ce(f, model, dP + P, xv, Y)
    l_F = classification_ce(f, model, (dP + P) if cfg.fidelity_with_common else dP, xv, Y)

    current = ng.mean(dP, axis=0)
    others = [current if d == domain else g.const(state.buffers[d].value) for d in state.source_ids]
    if len(others) >= 2:
        l_D, fallback = discrimination_graph(others, cfg.discrimination_sim)
    else:
        l_D, fallback = g.const(0.0), False
    return g, combine(l_R, l_D, l_F, cfg.weights), l_R, l_F, l_D, fallback, dP


def tuning_step(state: TrainedState, domain: str, X: np.ndarray, y: np.ndarray
                ) -> tuple[dict[str, np.ndarray], LossBreakdown, np.ndarray]:
    """Gradients of G for one batch of ``domain``.

    Returns gradients keyed ``P`` and ``g.<key>``, the loss breakdown and the
    batch's instance prompts.
    """
    cfg = state.config
    g, G_total, l_R, l_F, l_D, fallback, dP = tuning_graph(state, domain, X, y)
    grads = g.backward(G_total)
    if cfg.prompt_grad == "R" and cfg.use_common_prompt:
        grads["P"] = g.backward(l_R)["P"]
    breakdown = LossBreakdown(float(l_R.value), float(l_F.value), float(l_D.value), float(G_total.value), fallback)
    return grads, breakdown, np.array(dP.value)


def reptile_tune(state: TrainedState, tune: dict[str, tuple[np.ndarray, np.ndarray]]) -> TrainedState:
    """Algorithm: pick a domain, step its generator, extrapolate the common prompt."""
    cfg = state.config
    domains = [d for d in state.source_ids if d in tune and len(tune[d][0])]
    if not domains:
        raise ConfigError("no tunable source domains")
    rng = cfg.rng("tune")
    for d in state.source_ids:
        if state.buffers[d].value is None:
            X = tune[d][0] if d in tune else np.zeros((1, state.n, state.generators[d].L))
            init = exact_domain_prompt(state.generators[d], X, cfg) if len(X) else np.zeros((state.n, state.m))
            state.buffers[d] = DomainPromptBuffer(init, cfg.buffer_momentum, 0)
    history = state.history.setdefault("tune", [])
    for step in range(cfg.steps):
        tau = domains[int(rng.integers(len(domains)))]
        X, y = tune[tau]
        idx = np.sort(rng.choice(len(X), size=min(cfg.batch_size, len(X)), replace=False))
        grads, br, prompts = tuning_step(state, tau, X[idx], y[idx])
        if cfg.use_generator:
            gen = state.generators[tau]
            arrays = gen.arrays()
            state.generators[tau] = gen.replace({k: arrays[k] - cfg.eta * grads["g." + k] for k in arrays})
        if cfg.use_common_prompt:
            Q = state.common - cfg.eta * grads["P"]
            state.common = state.common + cfg.delta * (Q - state.common)
        state.buffers[tau] = update_buffer(state.buffers[tau], list(prompts))
        history.append({"step": step + 1, "domain": tau, **br.to_dict()})
    for d in state.source_ids:
        X = tune[d][0] if d in tune else None
        if X is not None and len(X):
            state.domain_prompts[d] = exact_domain_prompt(state.generators[d], X, cfg)
    return state


# --------------------------------------------------------------------------
# step 3: target transfer, selection, prediction


def target_loss(state: TrainedState, gen_arrays: dict | None, X: np.ndarray, y: np.ndarray,
                trainable: bool = True) -> tuple[ng.Graph, ng.Var]:
    g = ng.Graph()
    f = bind(g, state.model.params, False, prefix="f.")
    xv = g.const(X)
    prompt = g.const(state.common)
    if gen_arrays is not None:
        prompt = generator_graph(xv, bind(g, gen_arrays, trainable, prefix="g."), state.n, state.m) + prompt
    return g, classification_ce(f, state.model, prompt, xv, g.const(onehot(y, state.model.config.K)))


def target_transfer(state: TrainedState, X: np.ndarray, y: np.ndarray, epochs: int | None = None) -> TrainedState:
    """Fit a fresh target generator on the shots by plain gradient descent."""
    cfg = state.config
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ConfigError("target transfer needs at least one shot")
    epochs = cfg.transfer_epochs if epochs is None else epochs
    epochs = cfg.epochs if epochs is None else epochs
    gen = init_generator(state.n, X.shape[2], state.m, cfg.generator_hidden, seed=cfg.seed_for("generator"))
    rng = cfg.rng("transfer")
    losses = []
    if cfg.use_generator:
        arrays = gen.arrays()
        for _ in range(epochs):
            for idx in _batches(len(X), cfg.batch_size, rng):
                g, loss = target_loss(state, arrays, X[idx], y[idx])
                grads = g.backward(loss)
                arrays = {k: arrays[k] - cfg.eta * grads["g." + k] for k in arrays}
                losses.append(float(loss.value))
        gen = gen.replace(arrays)
    state.target_generator = gen
    state.target_prompt = exact_domain_prompt(gen, X, cfg)
    state.history["transfer"] = losses
    return state


def shot_loss(state: TrainedState, X: np.ndarray, y: np.ndarray, gen: GeneratorParams | None) -> float:
    arrays = gen.arrays() if gen is not None and state.config.use_generator else None
    return float(target_loss(state, arrays, X, y, trainable=False)[1].value)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return -1.0
    return float(a @ b / (na * nb))


def similarity_table(source_prompts: dict[str, np.ndarray], target_prompt) -> dict[str, float]:
    return {d: cosine(p, target_prompt) for d, p in source_prompts.items()}


def select_source(state: TrainedState) -> tuple[str, dict[str, float]]:
    """Nearest source by cosine similarity of domain-level prompts (lowest index on ties)."""
    if not state.domain_prompts:
        raise ConfigError("no source prompts to select from")
    if state.target_prompt is None:
        raise ConfigError("target prompt missing; run target_transfer first")
    ids = [d for d in state.source_ids if d in state.domain_prompts]
    table = similarity_table({d: state.domain_prompts[d] for d in ids}, state.target_prompt)
    best = max(range(len(ids)), key=lambda i: (table[ids[i]], -i))
    return ids[best], table


def predict_proba(state: TrainedState, source: str | None, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.shape[1] != state.n:
        raise ShapeError(f"expected {state.n} channels, got {X.shape[1]}")
    g = ng.Graph()
    f = bind(g, state.model.params, False)
    xv = g.const(X)
    prompt = g.const(state.common)
    if state.config.use_generator and source is not None:
        gen = state.generators[source] if source != "T" else state.target_generator
        prompt = generator_graph(xv, bind(g, gen.arrays(), False, prefix="g."), state.n, state.m) + prompt
    probs = moe_probs(prepend_graph(prompt, xv), f, state.model.config).value
    return probs[0] if single else probs


def predict_target(state: TrainedState, source: str | None, X) -> tuple[np.ndarray, np.ndarray]:
    probs = predict_proba(state, source, X)
    return np.argmax(probs, axis=-1), probs


# --------------------------------------------------------------------------
# flexibility demonstration


@dataclass
class FlexOutcome:
    fitted: bool
    steps: int
    best_accuracy: float
    final_loss: float


def _fit_pair(model: MoEModel, params: dict[str, np.ndarray], X: np.ndarray, y: np.ndarray,
              use_generators: bool, budget: int, lr: float) -> FlexOutcome:
    n, m, K = model.config.n, model.config.m, model.config.K
    opt = Adam(params, lr=lr)
    best, loss_value = 0.0, math.inf
    for step in range(budget + 1):
        g = ng.Graph()
        f = bind(g, model.params, False, prefix="f.")
        v = bind(g, params, True, prefix="")
        losses, hits = [], 0
        for i in range(len(X)):
            xv = g.const(X[i:i + 1])
            prompt = v["P"]
            if use_generators:
                gen = {k: v[f"g{i}.{k}"] for k in ("w1", "b1", "w2", "b2")}
                prompt = generator_graph(xv, gen, n, m) + prompt
            probs = moe_probs(prepend_graph(prompt, xv), f, model.config)
            losses.append(ng.cross_entropy(probs, g.const(onehot(y[i:i + 1], K))))
            hits += int(np.argmax(probs.value[0]) == y[i])
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        loss_value = float(total.value)
        best = max(best, hits / len(X))
        if hits == len(X):
            return FlexOutcome(True, step, best, loss_value)
        if step == budget:
            break
        params = opt.step(params, g.backward(total))
    return FlexOutcome(False, budget, best, loss_value)


def flexibility_demo(config: RunConfig, budget: int = 2000, lr: float = 0.05, conflicting: bool = True) -> dict:
    """Two instances sharing a suffix, fitted by a single prompt vs per-domain generators.

    ``f`` is pretrained on unrelated sinusoid data and frozen. Variant ``prompt``
    tunes only P; variant ``generator`` tunes one generator per instance plus
    P. Both use Adam and stop at the first step with 2/2 training accuracy.
    """
    from .data import SyntheticSpec, generate_synthetic

    rng = config.rng("flex")
    n, L, K, m = 2, 32, 2, 4
    cfg = config.replace(m=m, patch_len=4, stride=4)
    spec = SyntheticSpec(M=2, G=1, K=K, n=n, L=L, freqs=(2, 7), sigma=0.3, per_domain=40,
                         seed=int(rng.integers(2**31)))
    sources, _ = generate_synthetic(spec)
    pool_X = np.concatenate([ds.X for ds in sources])
    pool_y = np.concatenate([ds.y for ds in sources])
    mc = cfg.model_config(n, L, K)
    model, _ = pretrain(init_model(mc, seed=cfg.seed_for("model")), pool_X, pool_y, cfg, epochs=5)

    half = L // 2
    shared = rng.normal(size=(n, L - half))
    X = np.stack([np.concatenate([rng.normal(size=(n, half)), shared], axis=1) for _ in range(2)])
    y = np.array([0, 1] if conflicting else [0, 0])

    outcomes = {}
    outcomes["prompt"] = _fit_pair(model, {"P": np.zeros((n, m))}, X, y, False, budget, lr)
    params = {"P": np.zeros((n, m))}
    for i in range(2):
        gen = init_generator(n, L, m, cfg.generator_hidden, seed=cfg.seed_for("generator").spawn(2)[i])
        params.update({f"g{i}.{k}": v for k, v in gen.arrays().items()})
    outcomes["generator"] = _fit_pair(model, params, X, y, True, budget, lr)
    return {
        "seed": config.seed,
        "conflicting": conflicting,
        "labels": y.tolist(),
        "budget": budget,
        "variants": {k: dataclasses.asdict(v) for k, v in outcomes.items()},
    }


# --------------------------------------------------------------------------
# state persistence


def state_to_bytes(state: TrainedState) -> bytes:
    tensors = {"f." + k: v for k, v in state.model.params.items()}
    tensors["P"] = state.common
    for d in state.source_ids:
        for k, v in state.generators[d].arrays().items():
            tensors[f"g.{d}.{k}"] = v
        if state.buffers[d].value is not None:
            tensors[f"buf.{d}"] = state.buffers[d].value
        if d in state.domain_prompts:
            tensors[f"dP.{d}"] = state.domain_prompts[d]
    if state.target_generator is not None:
        for k, v in state.target_generator.arrays().items():
            tensors[f"g.T.{k}"] = v
    if state.target_prompt is not None:
        tensors["dP.T"] = state.target_prompt
    meta = {
        "model_config": state.model.config.to_dict(),
        "run_config": state.config.to_dict(),
        "source_ids": state.source_ids,
        "buffer_counts": {d: state.buffers[d].count for d in state.source_ids},
        "history": state.history,
    }
    return tensors_to_bytes("state", tensors, meta)


def state_from_bytes(blob: bytes) -> TrainedState:
    kind, t, meta = tensors_from_bytes(blob)
    if kind != "state":
        raise CompatibilityError(f"checkpoint holds '{kind}', expected 'state'")
    mc = ModelConfig.from_dict(meta["model_config"])
    cfg = RunConfig.from_dict(meta["run_config"])
    model = MoEModel(mc, {k[2:]: v for k, v in t.items() if k.startswith("f.")})

    def gen(prefix):
        return GeneratorParams(*(t[f"{prefix}.{k}"] for k in ("w1", "b1", "w2", "b2")), n=mc.n, m=mc.m)

    ids = meta["source_ids"]
    return TrainedState(
        model=model,
        config=cfg,
        source_ids=ids,
        common=t["P"],
        generators={d: gen(f"g.{d}") for d in ids},
        buffers={d: DomainPromptBuffer(t.get(f"buf.{d}"), cfg.buffer_momentum, meta["buffer_counts"][d])
                 for d in ids},
        domain_prompts={d: t[f"dP.{d}"] for d in ids if f"dP.{d}" in t},
        target_generator=gen("g.T") if "g.T.w1" in t else None,
        target_prompt=t.get("dP.T"),
        history=meta["history"],
    )


def save_state(state: TrainedState, path) -> None:
    Path(path).write_bytes(state_to_bytes(state))


def load_state(path) -> TrainedState:
    return state_from_bytes(Path(path).read_bytes())
