"""Ablation grid, source-count sweep and discrimination heatmap export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .data import SyntheticSpec
from .errors import ConfigError, FormatError
from .metrics import MetricsReport, accuracy, macro_f1  # noqa: F401  (re-exported)
from .objective import pairwise_terms
from .pipeline import Bundle, run_pipeline
from .train import RunConfig, TrainedState

# (use_moe, use_common_prompt, use_generator); rows without any prompt are left out
ABLATION_ROWS = (
    (False, True, False),
    (False, False, True),
    (False, True, True),
    (True, False, True),
    (True, True, False),
    (True, True, True),
)
FULL_ROW = (True, True, True)


def flag_name(flags) -> str:
    return "+".join(n for n, on in zip(("moe", "common", "generator"), flags) if on)


@dataclass
class GridRow:
    flags: tuple[bool, bool, bool]
    seed: int
    report: MetricsReport

    def to_dict(self) -> dict:
        return {"flags": dict(zip(("use_moe", "use_common_prompt", "use_generator"), self.flags)),
                "seed": self.seed, "report": self.report.to_dict()}


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def ablation_grid(config: RunConfig, spec: SyntheticSpec, seeds, rows=ABLATION_ROWS,
                  cache: dict | None = None) -> list[GridRow]:
    """One pipeline run per flag row per seed; runs of one seed share the data and pretrained f."""
    cache = {} if cache is None else cache
    out = []
    for seed in seeds:
        base = config.replace(seed=int(seed))
        bundle = Bundle.from_spec(spec.replace(seed=int(seed)), base)
        for flags in rows:
            cfg = base.replace(use_moe=flags[0], use_common_prompt=flags[1], use_generator=flags[2])
            result = run_pipeline(bundle, cfg, scenario="ablation:" + flag_name(flags), cache=cache)
            out.append(GridRow(tuple(flags), int(seed), result.report))
    return out


def summarize_grid(rows: list[GridRow]) -> list[dict]:
    table = {}
    for r in rows:
        table.setdefault(r.flags, []).append(r.report)
    out = []
    for flags, reports in table.items():
        f1 = _mean_std([r.macro_f1 for r in reports])
        acc = _mean_std([r.accuracy for r in reports])
        out.append({"row": flag_name(flags), "use_moe": flags[0], "use_common_prompt": flags[1],
                    "use_generator": flags[2], "runs": len(reports), "macro_f1_mean": f1[0],
                    "macro_f1_std": f1[1], "accuracy_mean": acc[0], "accuracy_std": acc[1]})
    return out


def source_count_sweep(config: RunConfig, spec: SyntheticSpec, counts, seeds,
                       cache: dict | None = None) -> list[dict]:
    """Mean and spread of target metrics when tuning on the first ``count`` sources."""
    counts = [int(c) for c in counts]
    if not counts or counts != sorted(set(counts)):
        raise ConfigError("counts must be a non-empty strictly ascending list")
    if counts[0] < 2 or counts[-1] > spec.M:
        raise ConfigError(f"counts must lie in 2..{spec.M}")
    runs = {c: [] for c in counts}
    for seed in seeds:
        cfg = config.replace(seed=int(seed))
        bundle = Bundle.from_spec(spec.replace(seed=int(seed)), cfg)
        for c in counts:
            runs[c].append(run_pipeline(bundle.subset(c), cfg, scenario=f"sources:{c}", cache=cache).report)
    table = []
    for c in counts:
        f1 = _mean_std([r.macro_f1 for r in runs[c]])
        acc = _mean_std([r.accuracy for r in runs[c]])
        table.append({"count": c, "runs": len(runs[c]), "macro_f1_mean": f1[0], "macro_f1_std": f1[1],
                      "accuracy_mean": acc[0], "accuracy_std": acc[1]})
    return table


def trend(table: list[dict]) -> float:
    """Spearman rank correlation of source count against mean macro-F1."""
    f1 = [r["macro_f1_mean"] for r in table]
    if len(table) < 2 or np.ptp(f1) == 0:
        return math.nan
    rho = spearmanr([r["count"] for r in table], f1).statistic
    return float(rho)


# --------------------------------------------------------------------------
# heatmap


@dataclass
class HeatmapMatrix:
    domain_ids: list[str]
    values: np.ndarray      # NaN on the diagonal
    fallback: bool = False
    similarity: str = "trace"

    def sidecar(self) -> dict:
        return {"domain_ids": self.domain_ids, "fallback": self.fallback, "similarity": self.similarity,
                "diagonal": "absent", "entry": "exp(symmetrized pairwise discrimination term)"}


def heatmap_from_prompts(domain_ids, prompts, similarity: str = "trace") -> HeatmapMatrix:
    if len(prompts) < 2:
        raise ConfigError("heatmap needs at least two domains")
    terms = pairwise_terms(prompts, similarity)
    sym = 0.5 * (terms + terms.T)
    with np.errstate(over="ignore"):
        values = np.exp(sym)
    return HeatmapMatrix(list(domain_ids), values, len(prompts) < 3, similarity)


def discrimination_heatmap(state: TrainedState, similarity: str | None = None) -> HeatmapMatrix:
    ids = [d for d in state.source_ids if d in state.domain_prompts]
    if not ids:
        raise ConfigError("state has no exact domain prompts")
    sim = similarity or state.config.discrimination_sim
    return heatmap_from_prompts(ids, [state.domain_prompts[d] for d in ids], sim)


def heatmap_csv(hm: HeatmapMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(hm.domain_ids)
    for i, row in enumerate(hm.values):
        w.writerow(["" if i == j else repr(float(v)) for j, v in enumerate(row)])
    return buf.getvalue()


def parse_heatmap_csv(text: str) -> tuple[list[str], np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError("empty heatmap file")
    ids, body = rows[0], rows[1:]
    if len(body) != len(ids) or any(len(r) != len(ids) for r in body):
        raise FormatError("heatmap CSV is not square")
    values = np.array([[math.nan if c == "" else float(c) for c in r] for r in body])
    return ids, values


def write_heatmap(hm: HeatmapMatrix, path) -> tuple[Path, Path]:
    path = Path(path)
    path.write_text(heatmap_csv(hm))
    side = path.with_suffix(".json")
    side.write_text(json.dumps(hm.sidecar(), sort_keys=True, indent=2) + "\n")
    return path, side
