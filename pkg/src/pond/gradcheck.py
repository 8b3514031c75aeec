"""Finite-difference checks over every primitive and over the tuning objective."""

from __future__ import annotations

import numpy as np

from . import numgrad as ng
from .model import ModelConfig, PatchConfig, init_model
from .prompt import DomainPromptBuffer, generate_instance_prompt, init_generator


def _weighted(x: ng.Var, rng) -> ng.Var:
    # a random readout keeps sum-preserving ops (softmax, mean) from having zero gradient
    w = x.graph.const(rng.normal(size=x.shape))
    return ng.reduce_sum(x * w)


def _leaf(g: ng.Graph, rng, name: str, shape, low=None) -> ng.Var:
    v = rng.normal(size=shape)
    if low is not None:
        v = low + np.abs(v)
    return g.leaf(name, v, trainable=True)


def _case(build, seed: int):
    rng = np.random.default_rng(seed)
    g = ng.Graph()
    out = build(g, rng)
    return g, _weighted(out, rng) if out.shape != () else out


def primitive_cases() -> dict:
    """name -> builder(graph, rng) returning an output whose weighted sum is checked."""
    def two(op, sa, sb):
        return lambda g, r: op(_leaf(g, r, "a", sa), _leaf(g, r, "b", sb))

    def relu_case(g, r):
        v = r.normal(size=(3, 4))
        v = np.where(np.abs(v) < 0.1, 0.5, v)      # keep away from the kink
        return ng.relu(g.leaf("a", v, trainable=True))

    def onehot_ce(g, r):
        p = ng.softmax(_leaf(g, r, "a", (4, 3)))
        return ng.cross_entropy(p, g.const(np.eye(3)[r.integers(3, size=4)]))

    return {
        "matmul": two(ng.matmul, (2, 3, 4), (4, 5)),
        "add": two(ng.add, (2, 3, 4), (3, 4)),
        "sub": two(ng.sub, (2, 3), (3,)),
        "mul": two(ng.mul, (3, 4), (3, 4)),
        "div": lambda g, r: ng.div(_leaf(g, r, "a", (3, 4)), _leaf(g, r, "b", (4,), low=0.5)),
        "relu": relu_case,
        "tanh": lambda g, r: ng.tanh(_leaf(g, r, "a", (3, 4))),
        "exp": lambda g, r: ng.exp(_leaf(g, r, "a", (3, 4))),
        "log": lambda g, r: ng.log(_leaf(g, r, "a", (3, 4), low=0.5)),
        "sqrt": lambda g, r: ng.sqrt(_leaf(g, r, "a", (3, 4), low=0.5)),
        "scale": lambda g, r: ng.scale(_leaf(g, r, "a", (3, 4)), -2.5),
        "softmax": lambda g, r: ng.softmax(_leaf(g, r, "a", (2, 3, 5))),
        "logsumexp": lambda g, r: ng.logsumexp(_leaf(g, r, "a", (3, 5))),
        "layer_norm": lambda g, r: ng.layer_norm(_leaf(g, r, "a", (2, 3, 6)), _leaf(g, r, "gamma", (6,)),
                                                 _leaf(g, r, "beta", (6,))),
        "concat": lambda g, r: ng.concat([_leaf(g, r, "a", (2, 3)), _leaf(g, r, "b", (2, 4))], axis=1),
        "mean": lambda g, r: ng.mean(_leaf(g, r, "a", (3, 4, 2)), axis=1),
        "sum": lambda g, r: ng.reduce_sum(_leaf(g, r, "a", (3, 4)), axis=0),
        "reshape": lambda g, r: ng.reshape(_leaf(g, r, "a", (3, 4)), (2, 6)),
        "transpose": lambda g, r: ng.transpose(_leaf(g, r, "a", (2, 3, 4)), (0, 2, 1)),
        "cross_entropy": onehot_ce,
        "gather": lambda g, r: ng.gather(_leaf(g, r, "a", (5, 3)), [4, 0, 4, 2], axis=0),
        "slice": lambda g, r: ng.slice_axis(_leaf(g, r, "a", (3, 6)), 1, 4, axis=1),
    }


def tiny_objective(seed: int = 0, similarity: str = "trace", f_trainable: bool = True):
    """Graph of G on a tiny MoE model (d_model 8, one block, two heads, m 3) with three sources."""
    from .train import RunConfig, init_state, tuning_graph

    n, L, K, m = 2, 16, 3, 3
    cfg = RunConfig(seed=seed, m=m, experts=2, d_model=8, heads=2, d_ff=16, blocks=1, patch_len=4, stride=4,
                    generator_hidden=8, discrimination_sim=similarity)
    mc = ModelConfig(n=n, L=L, K=K, m=m, experts=2, d_model=8, heads=2, d_ff=16, blocks=1,
                     router_hidden=8, patch=PatchConfig(4, 4))
    rng = np.random.default_rng(seed)
    model = init_model(mc, seed=seed)
    ids = ["S0", "S1", "S2"]
    state = init_state(model, ids, cfg, L)
    state.common = rng.normal(scale=0.5, size=(n, m))
    for i, d in enumerate(ids):
        state.generators[d] = init_generator(n, L, m, 8, seed=seed + 10 + i)
        state.buffers[d] = DomainPromptBuffer(
            generate_instance_prompt(state.generators[d], rng.normal(size=(4, n, L))).mean(axis=0), 0.9, 1)
    X = rng.normal(size=(4, n, L))
    y = rng.integers(K, size=4)
    g, G, *_ = tuning_graph(state, "S1", X, y, f_trainable=f_trainable)
    return g, G


def run_all(step: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> dict[str, ng.GradCheckReport]:
    reports = {}
    for name, build in primitive_cases().items():
        g, root = _case(build, seed)
        reports[name] = ng.grad_check(g, step=step, tol=tol, root=root)
    g, root = tiny_objective(seed, "trace", f_trainable=True)
    reports["objective_G"] = ng.grad_check(g, step=step, tol=tol, root=root)
    # the cosine variant only changes the prompt path, so f stays frozen there
    g, root = tiny_objective(seed, "cosine", f_trainable=False)
    reports["objective_G_cosine"] = ng.grad_check(g, step=step, tol=tol, root=root)
    return reports


def report_dict(reports: dict[str, ng.GradCheckReport]) -> dict:
    return {
        "passed": all(r.passed for r in reports.values()),
        "checks": {
            k: {"passed": r.passed, "checked": r.checked, "max_rel_error": r.max_rel_error, "tol": r.tol,
                "failures": len(r.failures)}
            for k, r in reports.items()
        },
    }
