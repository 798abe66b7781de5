"""Round-based joint training of all module combinations with weight merging.

One round = every assembly trains for ``mini_epoch`` passes from its current
weights (step 1), the shared modules are merged across all models containing
them (step 2), and the merged weights are reloaded into every model
(step 3). After ``rounds`` rounds the per-module library is frozen. The
traditional baseline trains each assembly for the same total pass budget
with no merging, from the same init, consuming the same data order, so the
comparison isolates the merge effect.

Layout of a run directory:

    runs/<run-id>/
      manifest.json                resolved config, written before training
      round-<r>/<assembly>.mmlc    post-merge checkpoints per round
      baseline/<assembly>.mmlc     baseline checkpoints (when trained)
      library/<family>/<variant>.mmlc   final merged module weights
      report.json                  round reports and loss curves
      timing.json                  wall times (excluded from determinism
                                   comparisons; everything else is bit-stable)
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import engine as en
from .checkpoint import (
    Checkpoint,
    MergeEvent,
    checkpoint_from_params,
    save_checkpoint,
)
from .engine import Tape
from .metrics import (
    EvalReport,
    EvalRow,
    decode_detections,
    detection_loss,
    evaluate_model,
    match_output,
)
from .modules import (
    AssembledModel,
    PipelineConfig,
    PreparedSequence,
    prepare_sequence,
)
from .registry import Family, ModelAssembly, Registry
from .world import default_rig, rng_for, sequence_for_id, split_dataset


class OrchestratorError(Exception):
    pass


class DivergenceError(OrchestratorError):
    pass


class MergeError(OrchestratorError):
    pass


class InitializationError(OrchestratorError):
    pass


class MergeStrategy(str, Enum):
    AVERAGE = "average"
    SOFTMAX = "softmax"
    GREEDY = "greedy"


METHOD_LABELS = {
    MergeStrategy.AVERAGE: "MML-Average",
    MergeStrategy.SOFTMAX: "MML-Softmax",
    MergeStrategy.GREEDY: "MML-Greedy",
}

DIVERGENCE_LIMIT = 1e4


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    rounds: int = 8
    mini_epoch: int = 3
    lr: float = 2e-4
    weight_decay: float = 0.01
    batch_size: int = 4
    pretrain_sequences: int = 16
    eval_sequences: int = 200
    finetune_fraction: float = 0.1
    finetune_passes: int = 8
    n_objects_range: tuple[int, int] = (2, 6)
    eval_batch: int = 8

    def __post_init__(self):
        if self.mini_epoch < 1 or self.rounds < 1:
            raise OrchestratorError("rounds and mini_epoch must be >= 1")

    @property
    def total_passes(self) -> int:
        return self.rounds * self.mini_epoch

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "rounds": self.rounds,
            "mini_epoch": self.mini_epoch,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "pretrain_sequences": self.pretrain_sequences,
            "eval_sequences": self.eval_sequences,
            "finetune_fraction": self.finetune_fraction,
            "finetune_passes": self.finetune_passes,
            "n_objects_range": list(self.n_objects_range),
            "eval_batch": self.eval_batch,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise OrchestratorError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "n_objects_range" in kwargs:
            kwargs["n_objects_range"] = tuple(kwargs["n_objects_range"])
        return cls(**kwargs)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    t = min(max(step, 0), total - 1) / (total - 1)
    return base * 0.5 * (1.0 + float(np.cos(np.pi * t)))


class AdamW:
    """Adam with decoupled weight decay over a flattened parameter vector."""

    def __init__(self, shapes: Mapping[str, tuple[int, ...]], lr: float, weight_decay: float):
        self.keys = list(shapes)
        self.sizes = [int(np.prod(shapes[k])) for k in self.keys]
        self.shapes = dict(shapes)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.reset()

    def reset(self) -> None:
        n = sum(self.sizes)
        self.m = np.zeros(n, dtype=np.float32)
        self.v = np.zeros(n, dtype=np.float32)
        self.t = 0

    def _flatten(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([arrays[k].reshape(-1) for k in self.keys])

    def step(self, params: Mapping[str, en.Parameter], grads: Mapping[str, np.ndarray], lr: float) -> None:
        g = self._flatten(grads)
        p = self._flatten({k: params[k].tensor.data for k in self.keys})
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        mh = self.m / (1.0 - self.beta1**self.t)
        vh = self.v / (1.0 - self.beta2**self.t)
        p = p - lr * (mh / (np.sqrt(vh) + self.eps) + self.weight_decay * p)
        offset = 0
        for k, size in zip(self.keys, self.sizes):
            params[k].tensor.data = p[offset : offset + size].reshape(self.shapes[k]).copy()
            offset += size


class SceneDataset:
    """Lazy cache of model-ready sequences for one dataset seed."""

    def __init__(self, dataset_seed: int, cfg: PipelineConfig, rig=None, n_objects_range=(2, 6)):
        self.dataset_seed = dataset_seed
        self.cfg = cfg
        self.rig = rig if rig is not None else default_rig(cfg.n_views, cfg.image_size)
        self.grid = cfg.make_grid()
        self.n_objects_range = tuple(n_objects_range)
        self._cache: dict[int, PreparedSequence] = {}

    def prepared(self, seq_id: int) -> PreparedSequence:
        if seq_id not in self._cache:
            seq = sequence_for_id(self.dataset_seed, seq_id, self.n_objects_range)
            self._cache[seq_id] = prepare_sequence(seq, self.rig, self.grid, self.cfg)
        return self._cache[seq_id]

    def batch(self, ids: Sequence[int]) -> list[PreparedSequence]:
        return [self.prepared(i) for i in ids]

    def gts(self, ids: Sequence[int]) -> dict[int, tuple]:
        return {i: self.prepared(i).seq.current_objects for i in ids}


# ---------------------------------------------------------------------------
# Training primitives
# ---------------------------------------------------------------------------


def _shuffled(ids: Sequence[int], *seed_parts) -> list[int]:
    ids = list(ids)
    rng = rng_for(*seed_parts)
    for i in range(len(ids) - 1, 0, -1):
        j = rng.randint(i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    return ids


def _train_batch(model: AssembledModel, batch: list[PreparedSequence]) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    out = model.forward(batch, tape=tape)
    gts = [s.seq.current_objects for s in batch]
    matches = match_output(out, gts)
    loss, _ = detection_loss(out, gts, matches)
    value = loss.item()
    if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise DivergenceError(f"loss diverged to {value}")
    grads = en.backward(tape, loss)
    return value, grads


def train_pass(
    model: AssembledModel,
    dataset: SceneDataset,
    train_ids: Sequence[int],
    cfg: TrainConfig,
    opt: AdamW,
    order_seed_parts: tuple,
    lr: float,
) -> float:
    """One full pass over the training ids; returns the mean batch loss."""
    order = _shuffled(train_ids, *order_seed_parts)
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        batch = dataset.batch(order[start : start + cfg.batch_size])
        value, grads = _train_batch(model, batch)
        opt.step(model.params, grads, lr)
        losses.append(value)
    return float(np.mean(losses))


def train_mini_epoch(
    model: AssembledModel,
    dataset: SceneDataset,
    train_ids: Sequence[int],
    cfg: TrainConfig,
    opt: AdamW,
    round_index: int,
    on_pass: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Step 1 of a round: ``mini_epoch`` full passes from the current weights."""
    curve = []
    for p in range(cfg.mini_epoch):
        global_pass = (round_index - 1) * cfg.mini_epoch + p
        lr = cosine_lr(cfg.lr, global_pass, cfg.total_passes)
        mean_loss = train_pass(
            model,
            dataset,
            train_ids,
            cfg,
            opt,
            (cfg.seed, "order", model.assembly.assembly_id, round_index, p),
            lr,
        )
        curve.append(mean_loss)
        if on_pass:
            on_pass(global_pass, mean_loss)
    return curve


def predict(
    model: AssembledModel, dataset: SceneDataset, ids: Sequence[int], batch_size: int
) -> tuple[list, dict[int, tuple]]:
    """Forward (no tape) over the ids; predictions carry the sequence id."""
    preds = []
    id_list = list(ids)
    for start in range(0, len(id_list), batch_size):
        chunk = id_list[start : start + batch_size]
        out = model.forward(dataset.batch(chunk))
        for p in decode_detections(out):
            preds.append(replace(p, sample=chunk[p.sample]))
    return preds, dataset.gts(id_list)


def quick_eval(model: AssembledModel, dataset: SceneDataset, ids: Sequence[int], batch_size: int) -> tuple[float, float]:
    """(mAP, DS) of a model on the given ids."""
    preds, gts = predict(model, dataset, ids, batch_size)
    map_value, ds, *_ = evaluate_model(preds, gts, model.cfg.n_classes)
    return map_value, ds


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------


def _softmax_weights(val_maps: Sequence[float]) -> np.ndarray:
    v = np.asarray(val_maps, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def merge_modules(
    checkpoints: Sequence[Checkpoint],
    strategy: MergeStrategy,
    round_index: int = 0,
) -> tuple[dict[str, np.ndarray], list[Checkpoint]]:
    """Merge each shared module's weights across the models containing it.

    Average uses a delta-form mean so merging identical contributors is a
    bitwise no-op; softmax weights contributors by their validation mAP;
    greedy copies the best contributor's module verbatim. Returns the merged
    per-module library (full parameter keys) and the checkpoints reloaded
    with merged weights.
    """
    if not checkpoints:
        raise MergeError("no checkpoints to merge")
    if strategy in (MergeStrategy.SOFTMAX, MergeStrategy.GREEDY):
        missing = [c.assembly_id for c in checkpoints if c.val_map is None]
        if missing:
            raise en.ContractError(
                f"{strategy.value} merge requires val mAP on every checkpoint; missing: {missing}"
            )
    prefixes: list[str] = []
    for c in checkpoints:
        for p in sorted(c.module_prefixes()):
            if p not in prefixes:
                prefixes.append(p)
    library: dict[str, np.ndarray] = {}
    contributors_by_prefix: dict[str, list[Checkpoint]] = {}
    for prefix in prefixes:
        group = [c for c in checkpoints if prefix in c.module_prefixes()]
        contributors_by_prefix[prefix] = group
        keys = sorted(k for k in group[0].params if k.startswith(prefix + "/"))
        for c in group[1:]:
            for k in keys:
                if k not in c.params or c.params[k].shape != group[0].params[k].shape:
                    raise MergeError(f"shape mismatch or missing key {k!r} in {c.assembly_id}")
        if strategy is MergeStrategy.AVERAGE:
            inv_k = np.float32(1.0 / len(group))
            for k in keys:
                base = group[0].params[k]
                delta = np.zeros_like(base)
                for c in group[1:]:
                    delta += c.params[k] - base
                library[k] = base + delta * inv_k
        elif strategy is MergeStrategy.SOFTMAX:
            w = _softmax_weights([c.val_map for c in group]).astype(np.float32)
            for k in keys:
                acc = np.zeros_like(group[0].params[k])
                for wi, c in zip(w, group):
                    acc += wi * c.params[k]
                library[k] = acc
        else:  # GREEDY
            best = max(range(len(group)), key=lambda i: group[i].val_map)
            for k in keys:
                library[k] = group[best].params[k].copy()
    updated = []
    for c in checkpoints:
        nc = c.copy()
        for k in nc.params:
            if k in library:
                nc.params[k] = library[k].copy()
        nc.provenance.append(
            MergeEvent(
                round_index,
                strategy.value,
                tuple(x.assembly_id for x in checkpoints),
            )
        )
        updated.append(nc)
    return library, updated


def family_counts(registry: Registry) -> dict[str, int]:
    """Models containing a module of each family, for the full grid."""
    counts = {f: len(registry.variants(f)) for f in Family}
    total = int(np.prod(list(counts.values())))
    return {
        "N_F": total // counts[Family.FEATURE_EXTRACTOR],
        "N_P": total // counts[Family.PV2BEV],
        "N_T": total // counts[Family.TEMPORAL_FUSION],
        "N_H": total // counts[Family.HEAD],
        "N_total": total,
    }


# ---------------------------------------------------------------------------
# Round reports
# ---------------------------------------------------------------------------


@dataclass
class ModelRoundStats:
    assembly_id: str
    losses: list[float]
    pre_val_map: float
    pre_val_ds: float
    post_val_map: float
    post_val_ds: float

    def as_dict(self) -> dict:
        return {
            "assembly_id": self.assembly_id,
            "losses": [round(x, 6) for x in self.losses],
            "pre_val_map": round(self.pre_val_map, 6),
            "pre_val_ds": round(self.pre_val_ds, 6),
            "post_val_map": round(self.post_val_map, 6),
            "post_val_ds": round(self.post_val_ds, 6),
        }


@dataclass
class RoundReport:
    round_index: int
    models: list[ModelRoundStats]
    counts: dict[str, int]
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        return {
            "round": self.round_index,
            "models": [m.as_dict() for m in self.models],
            "counts": self.counts,
        }


@dataclass
class RunResult:
    run_dir: Path
    strategy: MergeStrategy
    reports: list[RoundReport]
    checkpoints: dict[str, Checkpoint]  # final post-merge, by assembly id
    library: dict[str, np.ndarray]
    baselines: dict[str, Checkpoint] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Protocol pieces
# ---------------------------------------------------------------------------


def pretrain_split(cfg: TrainConfig) -> tuple[list[int], list[int]]:
    """Held-out validation slice (10 percent, seeded) of the pretrain pool."""
    split = split_dataset(
        cfg.eval_sequences, cfg.finetune_fraction, cfg.seed, cfg.pretrain_sequences
    )
    pool = _shuffled(split.pretrain, cfg.seed, "valsplit")
    n_val = max(1, int(round(0.1 * len(pool))))
    return pool[n_val:], pool[:n_val]


def build_models(
    registry: Registry, pipe_cfg: PipelineConfig, dataset: SceneDataset, seed: int
) -> dict[str, AssembledModel]:
    models = {}
    for assembly in registry.enumerate_assemblies():
        models[assembly.assembly_id] = AssembledModel(
            registry, assembly, pipe_cfg, dataset.rig, seed=seed
        )
    return models


def run_mml(
    registry: Registry,
    dataset: SceneDataset,
    cfg: TrainConfig,
    strategy: MergeStrategy,
    run_dir: str | Path | None = None,
    on_event: Callable[[dict], None] | None = None,
) -> RunResult:
    """The full multi-round pipeline over every assembly in the registry."""
    pipe_cfg = dataset.cfg
    train_ids, val_ids = pretrain_split(cfg)
    models = build_models(registry, pipe_cfg, dataset, cfg.seed)
    order = list(models)
    opts = {
        aid: AdamW(
            {k: p.tensor.shape for k, p in models[aid].params.items()},
            cfg.lr,
            cfg.weight_decay,
        )
        for aid in order
    }
    counts = family_counts(registry)
    reports: list[RoundReport] = []
    run_path = Path(run_dir) if run_dir else None
    library: dict[str, np.ndarray] = {}
    checkpoints: dict[str, Checkpoint] = {}
    timing: dict[str, float] = {}
    try:
        for round_index in range(1, cfg.rounds + 1):
            t0 = time.monotonic()
            stats: list[ModelRoundStats] = []
            snaps: list[Checkpoint] = []
            for aid in order:
                model = models[aid]
                opts[aid].reset()  # moment estimates do not survive merging
                curve = train_mini_epoch(
                    model, dataset, train_ids, cfg, opts[aid], round_index,
                    on_pass=(
                        (lambda gp, ml, _aid=aid: on_event(
                            {"type": "pass", "assembly": _aid, "round": round_index,
                             "pass": gp, "loss": round(ml, 6)}
                        )) if on_event else None
                    ),
                )
                val_map, val_ds = quick_eval(model, dataset, val_ids, cfg.eval_batch)
                snap = checkpoint_from_params(aid, model.params, val_map=val_map)
                snaps.append(snap)
                stats.append(
                    ModelRoundStats(aid, curve, val_map, val_ds, 0.0, 0.0)
                )
            library, merged = merge_modules(snaps, strategy, round_index)
            for stat, ckpt in zip(stats, merged):
                model = models[ckpt.assembly_id]
                model.load_arrays(ckpt.params)
                post_map, post_ds = quick_eval(model, dataset, val_ids, cfg.eval_batch)
                stat.post_val_map, stat.post_val_ds = post_map, post_ds
                ckpt.val_map = post_map
                checkpoints[ckpt.assembly_id] = ckpt
            report = RoundReport(round_index, stats, counts, time.monotonic() - t0)
            reports.append(report)
            timing[f"round-{round_index}"] = report.wall_time
            if run_path:
                for ckpt in merged:
                    save_checkpoint(
                        ckpt, run_path / f"round-{round_index}" / f"{ckpt.assembly_id}.mmlc"
                    )
            if on_event:
                on_event({"type": "round", "round": round_index,
                          "models": [s.as_dict() for s in stats]})
    except DivergenceError:
        if run_path:
            _write_report(run_path, strategy, reports, timing, partial=True)
        raise
    if run_path:
        _write_library(run_path, library)
        _write_report(run_path, strategy, reports, timing, partial=False)
    return RunResult(run_path or Path("."), strategy, reports, checkpoints, library)


def _write_library(run_path: Path, library: dict[str, np.ndarray]) -> None:
    groups: dict[tuple[str, str], dict[str, np.ndarray]] = {}
    for key, arr in library.items():
        family, variant = key.split("/")[:2]
        groups.setdefault((family, variant), {})[key] = arr
    for (family, variant), params in sorted(groups.items()):
        # library entries reuse the container format; the id marks their origin
        ckpt = Checkpoint(assembly_id=f"library:{family}/{variant}", params=dict(params))
        save_checkpoint(ckpt, run_path / "library" / family / f"{variant}.mmlc")


def _write_report(run_path: Path, strategy: MergeStrategy, reports: list[RoundReport], timing: dict, partial: bool) -> None:
    doc = {
        "strategy": strategy.value,
        "partial": partial,
        "rounds": [r.as_dict() for r in reports],
    }
    run_path.mkdir(parents=True, exist_ok=True)
    (run_path / "report.json").write_text(json.dumps(doc, indent=2))
    (run_path / "timing.json").write_text(
        json.dumps({k: round(v, 3) for k, v in timing.items()}, indent=2)
    )


def run_baseline(
    registry: Registry,
    assembly: ModelAssembly,
    dataset: SceneDataset,
    cfg: TrainConfig,
    on_event: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Traditional training: same init, same data order, same step budget,
    optimizer reset at the same boundaries, no merging."""
    train_ids, val_ids = pretrain_split(cfg)
    model = AssembledModel(registry, assembly, dataset.cfg, dataset.rig, seed=cfg.seed)
    opt = AdamW({k: p.tensor.shape for k, p in model.params.items()}, cfg.lr, cfg.weight_decay)
    for round_index in range(1, cfg.rounds + 1):
        opt.reset()
        train_mini_epoch(
            model, dataset, train_ids, cfg, opt, round_index,
            on_pass=(
                (lambda gp, ml: on_event(
                    {"type": "pass", "assembly": assembly.assembly_id,
                     "round": round_index, "pass": gp, "loss": round(ml, 6)}
                )) if on_event else None
            ),
        )
    val_map, _ = quick_eval(model, dataset, val_ids, cfg.eval_batch)
    return checkpoint_from_params(assembly.assembly_id, model.params, val_map=val_map)


def run_all_baselines(
    registry: Registry,
    dataset: SceneDataset,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    on_event: Callable[[dict], None] | None = None,
) -> dict[str, Checkpoint]:
    out = {}
    for assembly in registry.enumerate_assemblies():
        ckpt = run_baseline(registry, assembly, dataset, cfg, on_event)
        out[assembly.assembly_id] = ckpt
        if run_dir:
            save_checkpoint(ckpt, Path(run_dir) / "baseline" / f"{ckpt.assembly_id}.mmlc")
    return out


def finetune(
    registry: Registry,
    ckpt: Checkpoint,
    dataset: SceneDataset,
    ids: Sequence[int],
    cfg: TrainConfig,
    passes: int | None = None,
    tag: str = "ft",
) -> Checkpoint:
    """Continue training from a checkpoint on the fine-tune split."""
    assembly = ModelAssembly.parse(ckpt.assembly_id)
    model = AssembledModel(registry, assembly, dataset.cfg, dataset.rig, seed=cfg.seed)
    expected = set(model.params)
    got = set(ckpt.params)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise InitializationError(
            f"checkpoint keys do not match assembly {ckpt.assembly_id}: "
            f"missing {missing[:4]}{'...' if len(missing) > 4 else ''}, "
            f"extra {extra[:4]}{'...' if len(extra) > 4 else ''}"
        )
    model.load_arrays(ckpt.params)
    n_passes = cfg.finetune_passes if passes is None else passes
    if n_passes == 0:
        out = ckpt.copy()
        return out
    opt = AdamW({k: p.tensor.shape for k, p in model.params.items()}, cfg.lr, cfg.weight_decay)
    for p in range(n_passes):
        lr = cosine_lr(cfg.lr, p, n_passes)
        train_pass(
            model, dataset, ids, cfg, opt,
            (cfg.seed, tag, ckpt.assembly_id, p), lr,
        )
    new = checkpoint_from_params(ckpt.assembly_id, model.params, val_map=ckpt.val_map)
    new.provenance = list(ckpt.provenance)
    return new


def evaluate(
    registry: Registry,
    checkpoints: Mapping[tuple[str, str], Checkpoint],
    dataset: SceneDataset,
    test_ids: Sequence[int],
    cfg: TrainConfig,
) -> EvalReport:
    """Metric rows for (assembly, method) checkpoint pairs on the test ids."""
    report = EvalReport()
    for (aid, method), ckpt in checkpoints.items():
        assembly = ModelAssembly.parse(aid)
        model = AssembledModel(registry, assembly, dataset.cfg, dataset.rig, seed=cfg.seed)
        model.load_arrays(ckpt.params)
        preds, gts = predict(model, dataset, test_ids, cfg.eval_batch)
        map_value, ds, ate, ase, ave, aps = evaluate_model(preds, gts, dataset.cfg.n_classes)
        report.rows.append(
            EvalRow(aid, method, map_value, ds, ate, ase, ave, aps)
        )
    return report
