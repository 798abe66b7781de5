"""Experiment drivers above the orchestrator: reproducible run directories.

A pretrain run writes a manifest first, then trains the paired baselines
and the merged models into the layout the orchestrator documents. A
compare pass fine-tunes every checkpoint of a finished run on the small
split and evaluates on the complement, emitting CSV / Markdown / JSON
tables plus a delta summary.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import engine as en
from .checkpoint import Checkpoint, load_checkpoint
from .engine import Tape, Tensor, grad_check
from .metrics import EvalReport, detection_loss, match_output
from .modules import AssembledModel, PipelineConfig, build_default_registry
from .orchestrator import (
    MergeStrategy,
    METHOD_LABELS,
    OrchestratorError,
    SceneDataset,
    TrainConfig,
    evaluate,
    finetune,
    run_all_baselines,
    run_mml,
)
from .registry import ModelAssembly, Registry
from .world import split_dataset


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    strategy: str
    config: TrainConfig
    pipeline: dict
    with_baseline: bool = True

    def as_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "strategy": self.strategy,
            "config": self.config.as_dict(),
            "pipeline": self.pipeline,
            "with_baseline": self.with_baseline,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunManifest":
        return cls(
            run_id=str(d["run_id"]),
            strategy=str(d["strategy"]),
            config=TrainConfig.from_dict(d["config"]),
            pipeline=dict(d.get("pipeline", {})),
            with_baseline=bool(d.get("with_baseline", True)),
        )


def pipeline_config_from_dict(d: Mapping) -> PipelineConfig:
    kwargs = dict(d)
    for key in ("anchor_heights", "kernel"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return PipelineConfig(**kwargs)


def pipeline_config_to_dict(cfg: PipelineConfig) -> dict:
    return {
        "channels": cfg.channels,
        "n_classes": cfg.n_classes,
        "n_queries": cfg.n_queries,
        "head_layers": cfg.head_layers,
        "patch": cfg.patch,
        "image_size": cfg.image_size,
        "n_points": cfg.n_points,
        "kernel": list(cfg.kernel),
        "grid_size": cfg.grid_size,
        "cell_size": cfg.cell_size,
        "anchor_heights": list(cfg.anchor_heights),
        "n_views": cfg.n_views,
    }


def default_run_id(cfg: TrainConfig, strategy: MergeStrategy) -> str:
    digest = hashlib.blake2b(
        json.dumps(cfg.as_dict(), sort_keys=True).encode(), digest_size=4
    ).hexdigest()
    return f"{strategy.value}-s{cfg.seed}-{digest}"


def make_dataset(cfg: TrainConfig, pipe: PipelineConfig) -> SceneDataset:
    return SceneDataset(cfg.seed, pipe, n_objects_range=cfg.n_objects_range)


def pretrain_run(
    cfg: TrainConfig,
    strategy: MergeStrategy,
    run_root: str | Path,
    pipe: PipelineConfig | None = None,
    run_id: str | None = None,
    with_baseline: bool = True,
    on_event: Callable[[dict], None] | None = None,
) -> Path:
    """Train baselines plus the merged models into a fresh run directory."""
    pipe = pipe or PipelineConfig()
    run_id = run_id or default_run_id(cfg, strategy)
    run_dir = Path(run_root) / run_id
    if run_dir.exists():
        raise OrchestratorError(f"run directory {run_dir} already exists")
    run_dir.mkdir(parents=True)
    manifest = RunManifest(run_id, strategy.value, cfg, pipeline_config_to_dict(pipe), with_baseline)
    (run_dir / "manifest.json").write_text(json.dumps(manifest.as_dict(), indent=2))
    registry = build_default_registry(pipe)
    dataset = make_dataset(cfg, pipe)
    if with_baseline:
        run_all_baselines(registry, dataset, cfg, run_dir, on_event)
    run_mml(registry, dataset, cfg, strategy, run_dir, on_event)
    return run_dir


def load_manifest(run_dir: str | Path) -> RunManifest:
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise OrchestratorError(f"no manifest at {path}")
    return RunManifest.from_dict(json.loads(path.read_text()))


def load_run_checkpoints(run_dir: str | Path) -> tuple[dict[str, Checkpoint], dict[str, Checkpoint]]:
    """(final merged checkpoints, baseline checkpoints) of a finished run."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    final_round = run_dir / f"round-{manifest.config.rounds}"
    if not final_round.is_dir():
        raise OrchestratorError(f"run incomplete: {final_round} missing")
    merged = {
        p.stem: load_checkpoint(p) for p in sorted(final_round.glob("*.mmlc"))
    }
    base_dir = run_dir / "baseline"
    baselines = (
        {p.stem: load_checkpoint(p) for p in sorted(base_dir.glob("*.mmlc"))}
        if base_dir.is_dir()
        else {}
    )
    return merged, baselines


def compare_run(
    run_dir: str | Path,
    finetune_fraction: float | None = None,
    finetune_passes: int | None = None,
    on_event: Callable[[dict], None] | None = None,
) -> EvalReport:
    """Fine-tune every checkpoint of a run on the small split, evaluate on
    the complement, and write the comparison tables into the run directory."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    cfg = manifest.config
    if finetune_fraction is not None:
        from dataclasses import replace

        cfg = replace(cfg, finetune_fraction=finetune_fraction)
    pipe = pipeline_config_from_dict(manifest.pipeline)
    registry = build_default_registry(pipe)
    dataset = make_dataset(cfg, pipe)
    split = split_dataset(
        cfg.eval_sequences, cfg.finetune_fraction, cfg.seed, cfg.pretrain_sequences
    )
    merged, baselines = load_run_checkpoints(run_dir)
    strategy = MergeStrategy(manifest.strategy)
    method = METHOD_LABELS[strategy]
    jobs: dict[tuple[str, str], Checkpoint] = {}
    for aid, ckpt in baselines.items():
        jobs[(aid, "Baseline")] = ckpt
    for aid, ckpt in merged.items():
        jobs[(aid, method)] = ckpt
    tuned: dict[tuple[str, str], Checkpoint] = {}
    for (aid, label), ckpt in jobs.items():
        tuned[(aid, label)] = finetune(
            registry, ckpt, dataset, split.finetune, cfg, passes=finetune_passes
        )
        if on_event:
            on_event({"type": "finetuned", "assembly": aid, "method": label})
    report = evaluate(registry, tuned, dataset, split.test, cfg)
    out_dir = run_dir / f"compare-ft{int(round(cfg.finetune_fraction * 100))}"
    out_dir.mkdir(exist_ok=True)
    report.save(out_dir / "report")
    deltas = report.deltas(method)
    summary = {
        "method": method,
        "finetune_fraction": cfg.finetune_fraction,
        "deltas": {k: {m: round(x, 6) for m, x in v.items()} for k, v in deltas.items()},
        "mean_dmAP": round(float(np.mean([v["dmAP"] for v in deltas.values()])), 6)
        if deltas
        else None,
        "mean_dDS": round(float(np.mean([v["dDS"] for v in deltas.values()])), 6)
        if deltas
        else None,
    }
    (out_dir / "delta_summary.json").write_text(json.dumps(summary, indent=2))
    return report


# ---------------------------------------------------------------------------
# Gradient-check suite
# ---------------------------------------------------------------------------


def assembly_grad_check(
    registry: Registry,
    assembly: ModelAssembly,
    dataset: SceneDataset,
    seed: int = 0,
    eps: float = 1e-4,
    tol: float = 1e-3,
    max_samples_per_param: int = 3,
):
    """Finite-difference check of the full pipeline through the loss.

    The Hungarian matching is computed once from the current weights and
    held fixed, so the checked function is differentiable.
    """
    model = AssembledModel(registry, assembly, dataset.cfg, dataset.rig, seed=seed)
    batch = dataset.batch([0])
    gts = [batch[0].seq.current_objects]
    out = model.forward(batch)
    matches = match_output(out, gts)

    def fn(tape: Tape, leaves: dict[str, Tensor]) -> Tensor:
        result = model.forward(batch, tape=tape, leaves=leaves)
        loss, _ = detection_loss(result, gts, matches)
        return loss

    return grad_check(
        fn, model.params, eps=eps, tol=tol,
        max_samples_per_param=max_samples_per_param, seed=seed,
    )


def grad_check_all_assemblies(
    pipe: PipelineConfig | None = None,
    seed: int = 0,
    eps: float = 1e-4,
    tol: float = 1e-3,
    max_samples_per_param: int = 3,
) -> dict[str, "en.GradCheckReport"]:
    pipe = pipe or PipelineConfig()
    registry = build_default_registry(pipe)
    dataset = SceneDataset(seed, pipe)
    out = {}
    for assembly in registry.enumerate_assemblies():
        out[assembly.assembly_id] = assembly_grad_check(
            registry, assembly, dataset, seed, eps, tol, max_samples_per_param
        )
    return out
