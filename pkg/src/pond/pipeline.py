"""End-to-end run: synthetic data -> pretrain -> tune -> transfer -> select -> evaluate."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import DomainDataset, SyntheticSpec, generate_synthetic, split, target_shot_indices
from .errors import CompatibilityError, ConfigError
from .metrics import MetricsReport, evaluate
from .model import MoEModel, init_model
from .train import (
    RunConfig,
    TrainedState,
    init_state,
    predict_target,
    pretrain,
    reptile_tune,
    select_source,
    target_transfer,
)

log = logging.getLogger(__name__)


@dataclass
class Bundle:
    """Split sources plus the target, ready for a run."""

    sources: list[DomainDataset]
    target: DomainDataset

    @classmethod
    def from_spec(cls, spec: SyntheticSpec, config: RunConfig) -> "Bundle":
        sources, target = generate_synthetic(spec)
        ratios = config.split_ratios
        seeds = config.seed_for("split").spawn(len(sources))
        sources = [split(ds, ratios, seed=np.random.default_rng(s).integers(2**32)) for ds, s in zip(sources, seeds)]
        return cls(sources, target)

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for ds in self.sources:
            h.update(ds.domain_id.encode())
            h.update(ds.X.tobytes())
            h.update(ds.y.tobytes())
            h.update("|".join(ds.splits).encode())
        return h.hexdigest()

    def subset(self, count: int) -> "Bundle":
        return Bundle(self.sources[:count], self.target)

    def pool(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        parts = [ds.part(tag) for ds in self.sources]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


@dataclass
class RunResult:
    state: TrainedState
    report: MetricsReport
    selected: str | None
    similarities: dict[str, float]
    pretrain_history: dict = field(default_factory=dict)


def pretrained_model(bundle: Bundle, config: RunConfig, cache: dict | None = None) -> tuple[MoEModel, dict]:
    """Pretrain f once per (seed, geometry, sources); rows of a grid share it."""
    ds = bundle.sources[0]
    mc = config.model_config(ds.n, ds.L, ds.K)
    key = (config.seed, mc, config.epochs, config.pretrain_epochs, config.pretrain_lr, config.batch_size,
           bundle.fingerprint())
    if cache is not None and key in cache:
        model, hist = cache[key]
        return model.copy(), hist
    X, y = bundle.pool("pretrain")
    model, hist = pretrain(init_model(mc, seed=config.seed_for("model")), X, y, config)
    if cache is not None:
        cache[key] = (model.copy(), hist)
    return model, hist


def tune_sources(model: MoEModel, sources: list[DomainDataset], config: RunConfig) -> TrainedState:
    ds = sources[0]
    state = init_state(model, [s.domain_id for s in sources], config, ds.L)
    reptile_tune(state, {s.domain_id: s.part("tune") for s in sources})
    return state


def adapt(state: TrainedState, target: DomainDataset, selection: str = "nearest") -> tuple[str, dict[str, float]]:
    """Transfer to the target shots and pick a source; shots and choice go into the state history."""
    config = state.config
    shots = target_shot_indices(target, config.shots, seed=int(config.rng("shots").integers(2**32)))
    target_transfer(state, target.X[shots], target.y[shots])
    if selection == "nearest":
        chosen, table = select_source(state)
    elif selection == "random":
        table = {}
        chosen = state.source_ids[int(config.rng("select").integers(len(state.source_ids)))]
    else:
        raise ConfigError(f"unknown selection rule {selection!r}")
    state.history["shots"] = [int(i) for i in shots]
    state.history["selected"] = chosen
    state.history["similarities"] = table
    return chosen, table


def evaluate_target(state: TrainedState, target: DomainDataset, scenario: str = "default") -> MetricsReport:
    """Metrics on the target instances that were not used as shots."""
    if "selected" not in state.history or state.target_prompt is None:
        raise CompatibilityError("state has not been adapted to a target")
    chosen = state.history["selected"]
    rest = np.setdiff1d(np.arange(len(target)), np.asarray(state.history["shots"], dtype=np.int64))
    if len(rest) == 0:
        raise ConfigError("no target instances left after taking shots")
    preds, _ = predict_target(state, chosen, target.X[rest])
    tune_hist = state.history.get("tune", [])
    losses = tune_hist[-1] if tune_hist else {}
    losses = {k: v for k, v in losses.items() if k in ("loss_R", "loss_F", "loss_D", "G", "fallback")}
    return evaluate(preds, target.y[rest], target.K, scenario=scenario, seed=state.config.seed, losses=losses,
                    selected_source=chosen)


def run_pipeline(bundle: Bundle, config: RunConfig, scenario: str = "default", selection: str = "nearest",
                 cache: dict | None = None) -> RunResult:
    model, pre_hist = pretrained_model(bundle, config, cache)
    state = tune_sources(model, bundle.sources, config)
    state.history["pretrain"] = pre_hist
    chosen, table = adapt(state, bundle.target, selection)
    report = evaluate_target(state, bundle.target, scenario)
    return RunResult(state, report, chosen, table, pre_hist)
