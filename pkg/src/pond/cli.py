"""Command-line entry point: ``pond <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or
compatibility error, 4 numeric fault.
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from . import eval as ev
from .data import SyntheticSpec, load_dataset, save_dataset
from .errors import CompatibilityError, ConfigError, FormatError, GraphStateError, NumericFault, ShapeError
from .gradcheck import report_dict, run_all
from .model import init_model, load_model, save_model
from .pipeline import Bundle, adapt, evaluate_target, tune_sources
from .train import DESK_PRESET, RunConfig, flexibility_demo, load_state, pretrain, save_state

log = logging.getLogger("pond")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


@functools.lru_cache(maxsize=None)
def schema(name: str) -> dict:
    text = resources.files("pond").joinpath("schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc, name: str) -> None:
    jsonschema.validate(doc, schema(name))


def dump_json(doc, path, schema_name: str | None = None) -> None:
    if schema_name:
        validate(doc, schema_name)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n")


# --------------------------------------------------------------------------
# configuration


@dataclass
class CliConfig:
    spec: SyntheticSpec
    run: RunConfig
    experiment: dict = field(default_factory=dict)

    @property
    def seeds(self) -> list[int]:
        return list(self.experiment.get("seeds", [self.run.seed]))

    @property
    def counts(self) -> list[int]:
        return list(self.experiment.get("counts", range(2, self.spec.M + 1, 2)))


def load_config(path, env=None) -> CliConfig:
    env = os.environ if env is None else env
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    try:
        validate(doc, "config")
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    base = dict(DESK_PRESET) if doc.get("preset") == "desk" else {}
    run = dict(base, **doc.get("run", {}))
    synthetic = dict(doc.get("synthetic", {}))
    experiment = dict(doc.get("experiment", {}))
    if env.get("POND_SEED", "") != "":
        try:
            seed = int(env["POND_SEED"])
        except ValueError:
            raise ConfigError("POND_SEED must be an integer") from None
        run["seed"] = synthetic["seed"] = seed
        if "seeds" in experiment:
            experiment["seeds"] = [seed + i for i in range(len(experiment["seeds"]))]
    return CliConfig(SyntheticSpec.from_dict(synthetic), RunConfig.from_dict(run), experiment)


# --------------------------------------------------------------------------
# data directory


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_data_dir(path):
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise FormatError(f"{mpath}: manifest not found")
    try:
        manifest = json.loads(mpath.read_text())
        validate(manifest, "manifest")
    except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise FormatError(f"{mpath}: malformed manifest ({exc})") from None

    def load(entry):
        file = root / entry["file"]
        if _sha256(file) != entry["sha256"]:
            raise FormatError(f"{file}: digest differs from the manifest")
        ds = load_dataset(file)
        if ds.domain_id != entry["domain_id"]:
            raise CompatibilityError(f"{file}: holds domain {ds.domain_id}, manifest says {entry['domain_id']}")
        return ds

    return [load(e) for e in manifest["sources"]], load(manifest["target"])


def _check_geometry(model_config, run: RunConfig, ds) -> None:
    expected = run.model_config(ds.n, ds.L, ds.K)
    if model_config != expected:
        raise CompatibilityError(f"checkpoint geometry {model_config} does not match data/config {expected}")


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = Bundle.from_spec(cfg.spec, cfg.run)
    entries = []
    for ds in bundle.sources + [bundle.target]:
        file = out / f"{ds.domain_id}.pondds"
        save_dataset(ds, file)
        entries.append({"domain_id": ds.domain_id, "file": file.name, "count": len(ds), "sha256": _sha256(file)})
    manifest = {"synthetic": cfg.spec.to_dict(), "split_ratios": list(cfg.run.split_ratios),
                "split_seed": cfg.run.seed, "sources": entries[:-1], "target": entries[-1]}
    dump_json(manifest, out / MANIFEST, "manifest")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    sources, target = load_data_dir(args.data)
    ds = sources[0]
    model = init_model(cfg.run.model_config(ds.n, ds.L, ds.K), seed=cfg.run.seed_for("model"))
    X, y = Bundle(sources, target).pool("pretrain")
    model, history = pretrain(model, X, y, cfg.run, args.epochs)
    save_model(model, args.out)
    dump_json({"phase": "pretrain", "history": history}, Path(args.out).with_suffix(".history.json"), "history")
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = load_config(args.config)
    sources, _ = load_data_dir(args.data)
    model = load_model(args.checkpoint)
    _check_geometry(model.config, cfg.run, sources[0])
    state = tune_sources(model, sources, cfg.run)
    save_state(state, args.out)
    dump_json({"phase": "tune", "history": state.history["tune"]}, Path(args.out).with_suffix(".history.json"),
              "history")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = load_config(args.config) if args.config else None
    state = load_state(args.state)
    target = load_dataset(args.target)
    if (target.n, target.L, target.K) != (state.model.config.n, state.model.config.L, state.model.config.K):
        raise CompatibilityError("target geometry does not match the tuned state")
    selection = cfg.experiment.get("selection", "nearest") if cfg else "nearest"
    chosen, table = adapt(state, target, selection)
    state_out = Path(args.state_out) if args.state_out else Path(args.out).with_suffix(".pondck")
    save_state(state, state_out)
    dump_json({"selected_source": chosen, "similarities": table, "shots": state.history["shots"],
               "transfer_loss": state.history["transfer"]}, args.out, "adapt")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_state(args.state)
    target = load_dataset(args.target)
    report = evaluate_target(state, target, scenario=args.scenario)
    dump_json(report.to_dict(), args.out, "metrics")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    rows = ev.ablation_grid(cfg.run, cfg.spec, cfg.seeds)
    dump_json({"rows": [r.to_dict() for r in rows], "summary": ev.summarize_grid(rows)}, args.out, "ablation")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    table = ev.source_count_sweep(cfg.run, cfg.spec, cfg.counts, cfg.seeds)
    rho = ev.trend(table)
    dump_json({"table": table, "spearman": None if math.isnan(rho) else rho, "seeds": cfg.seeds}, args.out, "sweep")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    state = load_state(args.state)
    hm = ev.discrimination_heatmap(state, args.similarity)
    validate(hm.sidecar(), "heatmap")
    ev.write_heatmap(hm, args.out)
    return EXIT_OK


def cmd_flexdemo(args) -> int:
    cfg = load_config(args.config)
    ex = cfg.experiment
    runs = [flexibility_demo(cfg.run.replace(seed=s), budget=ex.get("flex_budget", 2000), lr=ex.get("flex_lr", 0.05),
                             conflicting=ex.get("flex_conflicting", True)) for s in cfg.seeds]
    dump_json({"runs": runs,
               "generator_fitted": sum(r["variants"]["generator"]["fitted"] for r in runs),
               "prompt_fitted": sum(r["variants"]["prompt"]["fitted"] for r in runs)}, args.out, "flexdemo")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    ex = cfg.experiment
    doc = report_dict(run_all(step=ex.get("gradcheck_step", 1e-5), tol=ex.get("gradcheck_tol", 1e-4),
                              seed=cfg.run.seed))
    if args.out:
        dump_json(doc, args.out, "gradcheck")
    for name, check in doc["checks"].items():
        print(f"{'PASS' if check['passed'] else 'FAIL'} {name} max_rel_error={check['max_rel_error']:.3e}")
    return EXIT_OK if doc["passed"] else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pond", description="Multi-source prompt tuning for time-series classification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write synthetic source and target datasets plus a manifest")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = add("pretrain", cmd_pretrain, "pretrain the classifier on the sources' pretrain splits")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)

    sp = add("tune", cmd_tune, "Reptile prompt tuning over the sources' tune splits")
    sp.add_argument("--config")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("adapt", cmd_adapt, "few-shot target transfer and nearest-source selection")
    sp.add_argument("--config")
    sp.add_argument("--state", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--state-out")

    sp = add("eval", cmd_eval, "metrics on the target instances not used as shots")
    sp.add_argument("--state", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenario", default="default")

    for name, fn, text in (("ablate", cmd_ablate, "ablation grid over the component flags"),
                           ("sweep-sources", cmd_sweep, "target metrics against the number of sources"),
                           ("flexdemo", cmd_flexdemo, "conflicting-label fit: single prompt vs generators")):
        sp = add(name, fn, text)
        sp.add_argument("--config")
        sp.add_argument("--out", required=True)

    sp = add("heatmap", cmd_heatmap, "pairwise discrimination heatmap (CSV plus JSON sidecar)")
    sp.add_argument("--state", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--similarity", choices=("trace", "cosine"))

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every primitive and of G")
    sp.add_argument("--config")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, jsonschema.ValidationError) as exc:
        print(f"pond: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CompatibilityError, ShapeError, OSError) as exc:
        print(f"pond: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericFault, GraphStateError, FloatingPointError) as exc:
        print(f"pond: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
