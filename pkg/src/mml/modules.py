"""Runnable perception module variants and full-model assembly.

Four families compose a model: patch-MLP image encoders (enc-a, enc-b),
camera-to-BEV view transforms (sca: anchor-lifted deformable attention;
gkt: kernel-unfold attention over LUT indices), temporal fusion of the
aligned previous BEV (tsa: deformable-lite attention averaged over both
frames; rcf: concat + MLP with residual), and a query-based detection
head. Batches are folded into the row dimension everywhere: a tensor of
per-view features has rows ordered (sample, view, pixel), a BEV tensor has
rows ordered (sample, cell).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import engine as en
from .engine import Parameter, Tape, Tensor
from .geometry import (
    BevGrid,
    CameraRig,
    GridAlignment,
    ProjectionResult,
    align_history_grid,
    project_reference_points,
    unfold_kernel_indices,
)
from .registry import Family, ModelAssembly, ModuleVariant, Registry, family_prefix
from .world import FRAME_COUNT, SceneSequence, derive_seed, render_views


@dataclass(frozen=True)
class PipelineConfig:
    """Dimensions shared by every variant; defaults are the desk-scale setup."""

    channels: int = 32
    n_classes: int = 3
    n_queries: int = 20
    head_layers: int = 2
    patch: int = 4
    image_size: int = 32
    n_points: int = 4  # sampling points per deformable attention
    kernel: tuple[int, int] = (3, 3)
    grid_size: int = 16
    cell_size: float = 1.0
    anchor_heights: tuple[float, ...] = (0.0, 1.0)
    n_views: int = 4

    @property
    def feat_size(self) -> tuple[int, int]:
        f = self.image_size // self.patch
        return (f, f)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    def make_grid(self) -> BevGrid:
        return BevGrid(self.grid_size, self.grid_size, self.cell_size, self.anchor_heights)


def _linear_spec(spec: dict, block: int, name: str, n_in: int, n_out: int) -> None:
    spec[f"block-{block}/{name}_w"] = (n_in, n_out)
    spec[f"block-{block}/{name}_b"] = (n_out,)


def _ln_spec(spec: dict, block: int, name: str, width: int) -> None:
    spec[f"block-{block}/{name}_g"] = (width,)
    spec[f"block-{block}/{name}_b"] = (width,)


def _ln(tape_leaves: Mapping[str, Tensor], block: int, name: str, x: Tensor) -> Tensor:
    y = en.layer_norm(x)
    y = en.scale_cols(y, tape_leaves[f"block-{block}/{name}_g"])
    return en.add_bias(y, tape_leaves[f"block-{block}/{name}_b"])


def _lin(leaves: Mapping[str, Tensor], block: int, name: str, x: Tensor) -> Tensor:
    return en.linear(x, leaves[f"block-{block}/{name}_w"], leaves[f"block-{block}/{name}_b"])


def _one_minus(x: Tensor) -> Tensor:
    return en.add_scalar(en.scale(x, -1.0), 1.0)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


class Encoder:
    """Patchify -> linear embed -> pre-norm residual MLP blocks -> project."""

    family = Family.FEATURE_EXTRACTOR

    def __init__(self, variant_id: str, width: int, blocks: int, cfg: PipelineConfig):
        self.variant_id = variant_id
        self.width = width
        self.blocks = blocks
        self.cfg = cfg

    def param_spec(self) -> dict[str, tuple[int, ...]]:
        spec: dict[str, tuple[int, ...]] = {}
        _linear_spec(spec, 0, "embed", self.cfg.patch_dim, self.width)
        for i in range(1, self.blocks + 1):
            _ln_spec(spec, i, "ln", self.width)
            _linear_spec(spec, i, "fc1", self.width, self.width)
            _linear_spec(spec, i, "fc2", self.width, self.width)
        _linear_spec(spec, self.blocks + 1, "proj", self.width, self.cfg.channels)
        return spec

    def forward(self, leaves: Mapping[str, Tensor], patches: Tensor) -> Tensor:
        x = _lin(leaves, 0, "embed", patches)
        for i in range(1, self.blocks + 1):
            h = _ln(leaves, i, "ln", x)
            h = en.relu(_lin(leaves, i, "fc1", h))
            h = _lin(leaves, i, "fc2", h)
            x = en.add(x, h)
        return _lin(leaves, self.blocks + 1, "proj", x)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(V, h, w, 3) -> (V * (h/p) * (w/p), p*p*3) row-major over (view, py, px)."""
    v, h, w, c = images.shape
    if h % patch or w % patch:
        raise en.ShapeError(f"image dims {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(v, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # (v, gh, gw, p, p, c)
    return np.ascontiguousarray(x.reshape(v * gh * gw, patch * patch * c), dtype=en.DTYPE)


# ---------------------------------------------------------------------------
# View transform contexts (constant lookup tables, cached per batch size)
# ---------------------------------------------------------------------------


@dataclass
class _ScaViewTables:
    """Per view, restricted to the cells that view can actually see."""

    query_rows: np.ndarray  # (B*nh,) int64 rows into the (B*HW) query grid
    sample_rows: np.ndarray  # (B*nh*nr*nk,) int64 rows into per-sample expansions
    base_uv: np.ndarray  # (B*nh*nr*nk, 2) float32 projected anchor pixels
    feat_base: np.ndarray  # (B*nh*nr*nk,) int64 offsets into stacked feature rows


@dataclass
class _ScaTables:
    views: list[_ScaViewTables]
    inv_hits: np.ndarray  # (B*HW, 1) float32, 0 where no view hits
    empty_mask: np.ndarray  # (B*HW, 1) float32


@dataclass
class _GktViewTables:
    query_rows: np.ndarray  # (B*nh,) int64
    feat_idx: np.ndarray  # (B*nh*K,) int64 into stacked feature rows


@dataclass
class _GktTables:
    views: list[_GktViewTables]
    inv_hits: np.ndarray
    empty_mask: np.ndarray


@dataclass
class _TsaTables:
    base_xy: np.ndarray  # (B*HW*nk, 2) float32 cell coordinates
    row_base: np.ndarray  # (B*HW*nk,) int64 offsets b*HW


def _batched_hit_rows(hit_cells: np.ndarray, batch: int, n_cells: int) -> np.ndarray:
    return (hit_cells[None, :] + (np.arange(batch) * n_cells)[:, None]).reshape(-1)


class ViewGeometry:
    """Projection-derived constants for one (grid, rig, feature size).

    The per-batch lookup tables are hit-pruned: a view's tables cover only
    the BEV cells whose reference points land inside that view, which keeps
    the sampling work proportional to actual camera coverage.
    """

    def __init__(self, grid: BevGrid, rig: CameraRig, cfg: PipelineConfig):
        self.grid = grid
        self.cfg = cfg
        self.proj: ProjectionResult = project_reference_points(grid, rig, cfg.feat_size)
        kh, kw = cfg.kernel
        self.kernel_idx = unfold_kernel_indices(self.proj, kh, kw)  # (n, v, K)
        self._sca: dict[int, _ScaTables] = {}
        self._gkt: dict[int, _GktTables] = {}
        self._tsa: dict[int, _TsaTables] = {}

    @staticmethod
    def _coverage(counts: np.ndarray, batch: int) -> tuple[np.ndarray, np.ndarray]:
        counts = counts.astype(np.float64).reshape(-1, 1)
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0).astype(en.DTYPE)
        empty = (counts == 0).astype(en.DTYPE)
        return np.tile(inv, (batch, 1)), np.tile(empty, (batch, 1))

    def sca_tables(self, batch: int) -> _ScaTables:
        if batch not in self._sca:
            cfg, proj = self.cfg, self.proj
            n = self.grid.n_cells
            nr, nk = self.grid.n_anchors, cfg.n_points
            pix = cfg.feat_size[0] * cfg.feat_size[1]
            n_views = proj.uv.shape[1]
            views = []
            for v in range(n_views):
                hit_cells = np.flatnonzero(proj.hit_views[:, v])
                nh = hit_cells.size
                query_rows = _batched_hit_rows(hit_cells, batch, n)
                sample_rows = (
                    query_rows[:, None] * (nr * nk) + np.arange(nr * nk)[None, :]
                ).reshape(-1)
                uv = np.repeat(proj.uv[hit_cells, v].reshape(nh * nr, 2), nk, axis=0)
                base_uv = np.tile(uv, (batch, 1)).astype(en.DTYPE)
                feat_base = np.repeat(
                    (np.arange(batch) * n_views + v) * pix, nh * nr * nk
                ).astype(np.int64)
                views.append(_ScaViewTables(query_rows, sample_rows, base_uv, feat_base))
            inv, empty = self._coverage(proj.n_hit_views, batch)
            self._sca[batch] = _ScaTables(views, inv, empty)
        return self._sca[batch]

    def gkt_tables(self, batch: int) -> _GktTables:
        if batch not in self._gkt:
            cfg = self.cfg
            n = self.grid.n_cells
            pix = cfg.feat_size[0] * cfg.feat_size[1]
            n_views = self.proj.uv.shape[1]
            hit0 = self.proj.hit[:, :, 0]  # ground-anchor hits drive the kernel transform
            views = []
            for v in range(n_views):
                hit_cells = np.flatnonzero(hit0[:, v])
                query_rows = _batched_hit_rows(hit_cells, batch, n)
                flat = self.kernel_idx[hit_cells, v].astype(np.int64).reshape(-1)
                feat_idx = np.concatenate(
                    [flat + (b * n_views + v) * pix for b in range(batch)]
                )
                views.append(_GktViewTables(query_rows, feat_idx))
            inv, empty = self._coverage(hit0.sum(axis=1), batch)
            self._gkt[batch] = _GktTables(views, inv, empty)
        return self._gkt[batch]

    def tsa_tables(self, batch: int) -> _TsaTables:
        if batch not in self._tsa:
            n = self.grid.n_cells
            nk = self.cfg.n_points
            xs = np.arange(self.grid.width, dtype=en.DTYPE)
            ys = np.arange(self.grid.height, dtype=en.DTYPE)
            gx, gy = np.meshgrid(xs, ys)
            cells = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)  # (n, 2)
            base = np.tile(np.repeat(cells, nk, axis=0), (batch, 1))
            rows = np.repeat(np.arange(batch, dtype=np.int64) * n, n * nk)
            self._tsa[batch] = _TsaTables(base, rows)
        return self._tsa[batch]




class ScaTransform:
    """Anchor-lifted deformable cross attention from BEV queries into views.

    Each query is lifted to its anchor heights, projected into every hit
    view, and sampled at ``n_points`` learned offsets per anchor; the
    per-anchor softmax weights combine the samples, anchors are summed, and
    the result is averaged over hit views. Queries no view can see pass
    through unchanged.
    """

    family = Family.PV2BEV

    def __init__(self, variant_id: str, cfg: PipelineConfig):
        self.variant_id = variant_id
        self.cfg = cfg

    def param_spec(self) -> dict[str, tuple[int, ...]]:
        cfg = self.cfg
        n = cfg.grid_size * cfg.grid_size
        nr = len(cfg.anchor_heights)
        spec: dict[str, tuple[int, ...]] = {"block-0/queries": (n, cfg.channels)}
        _linear_spec(spec, 0, "off", cfg.channels, nr * cfg.n_points * 2)
        _linear_spec(spec, 0, "att", cfg.channels, nr * cfg.n_points)
        _linear_spec(spec, 0, "val", cfg.channels, cfg.channels)
        return spec

    def forward(self, leaves: Mapping[str, Tensor], feats: Tensor, geo: ViewGeometry, batch: int) -> Tensor:
        cfg = self.cfg
        fh, fw = cfg.feat_size
        n = geo.grid.n_cells
        nr, nk = geo.grid.n_anchors, cfg.n_points
        tables = geo.sca_tables(batch)
        q = en.tile_rows(leaves["block-0/queries"], batch)  # (B*n, C)
        off = en.reshape(_lin(leaves, 0, "off", q), (batch * n * nr * nk, 2))
        att = en.reshape(_lin(leaves, 0, "att", q), (batch * n * nr, nk))
        att = en.reshape(en.softmax_lastdim(att), (batch * n * nr * nk, 1))
        acc: Tensor | None = None
        for view in tables.views:
            if view.query_rows.size == 0:
                continue
            pos = en.add(en.gather_rows(off, view.sample_rows), Tensor(view.base_uv))
            u = en.clamp(en.slice_cols(pos, 0, 1), 0.0, fw - 1.0)
            vv = en.clamp(en.slice_cols(pos, 1, 2), 0.0, fh - 1.0)
            sample = en.bilinear_gather(feats, u, vv, view.feat_base, fw, fh)
            att_v = en.gather_rows(att, view.sample_rows)
            view_out = en.weighted_group_sum(sample, att_v, nr * nk)  # (B*nh, C)
            spread = en.scatter_rows(view_out, view.query_rows, batch * n)
            acc = spread if acc is None else en.add(acc, spread)
        out = _lin(leaves, 0, "val", acc)
        out = en.scale_rows(out, Tensor(tables.inv_hits))
        return en.add(out, en.scale_rows(q, Tensor(tables.empty_mask)))


class GktTransform:
    """Kernel-unfold attention over precomputed projection index tables.

    The ground-anchor projection of each cell is rounded to a pixel, the
    surrounding kernel is unfolded through the LUT, and a query-key softmax
    over the kernel convexly combines the raw unfolded features; hit views
    are averaged and unseen queries pass through.
    """

    family = Family.PV2BEV

    def __init__(self, variant_id: str, cfg: PipelineConfig):
        self.variant_id = variant_id
        self.cfg = cfg

    def param_spec(self) -> dict[str, tuple[int, ...]]:
        cfg = self.cfg
        n = cfg.grid_size * cfg.grid_size
        spec: dict[str, tuple[int, ...]] = {"block-0/queries": (n, cfg.channels)}
        _linear_spec(spec, 0, "qry", cfg.channels, cfg.channels)
        _linear_spec(spec, 0, "key", cfg.channels, cfg.channels)
        return spec

    def forward(self, leaves: Mapping[str, Tensor], feats: Tensor, geo: ViewGeometry, batch: int) -> Tensor:
        cfg = self.cfg
        n = geo.grid.n_cells
        kh, kw = cfg.kernel
        kk = kh * kw
        tables = geo.gkt_tables(batch)
        q = en.tile_rows(leaves["block-0/queries"], batch)
        qp = _lin(leaves, 0, "qry", q)  # (B*n, C)
        inv_sqrt = 1.0 / float(np.sqrt(cfg.channels))
        acc: Tensor | None = None
        for view in tables.views:
            nh = view.query_rows.size
            if nh == 0:
                continue
            values = en.gather_rows(feats, view.feat_idx)  # (B*nh*K, C)
            keys = _lin(leaves, 0, "key", values)
            qp_v = en.repeat_rows(en.gather_rows(qp, view.query_rows), kk)
            scores = en.reshape(en.scale(en.row_sum(en.mul(qp_v, keys)), inv_sqrt), (nh, kk))
            attn = en.reshape(en.softmax_lastdim(scores), (nh * kk, 1))
            view_out = en.weighted_group_sum(values, attn, kk)
            spread = en.scatter_rows(view_out, view.query_rows, batch * n)
            acc = spread if acc is None else en.add(acc, spread)
        out = en.scale_rows(acc, Tensor(tables.inv_hits))
        return en.add(out, en.scale_rows(q, Tensor(tables.empty_mask)))


# ---------------------------------------------------------------------------
# Temporal fusion
# ---------------------------------------------------------------------------


class TsaFusion:
    """Deformable-lite attention of current queries over both temporal maps.

    Offsets and weights are predicted from the current BEV once and applied
    to the current and the aligned previous map; the two branch outputs are
    arithmetically averaged.
    """

    family = Family.TEMPORAL_FUSION

    def __init__(self, variant_id: str, cfg: PipelineConfig):
        self.variant_id = variant_id
        self.cfg = cfg

    def param_spec(self) -> dict[str, tuple[int, ...]]:
        cfg = self.cfg
        spec: dict[str, tuple[int, ...]] = {}
        _linear_spec(spec, 0, "off", cfg.channels, cfg.n_points * 2)
        _linear_spec(spec, 0, "att", cfg.channels, cfg.n_points)
        _linear_spec(spec, 0, "val", cfg.channels, cfg.channels)
        return spec

    def forward(
        self,
        leaves: Mapping[str, Tensor],
        current: Tensor,
        prev_aligned: Tensor,
        geo: ViewGeometry,
        batch: int,
    ) -> Tensor:
        if current.shape != prev_aligned.shape:
            raise en.ShapeError(
                f"fusion inputs must match: {current.shape} vs {prev_aligned.shape}"
            )
        cfg = self.cfg
        n = geo.grid.n_cells
        nk = cfg.n_points
        tables = geo.tsa_tables(batch)
        off = en.reshape(_lin(leaves, 0, "off", current), (batch * n * nk, 2))
        att = en.softmax_lastdim(_lin(leaves, 0, "att", current))
        att = en.reshape(att, (batch * n * nk, 1))
        pos = en.add(off, Tensor(tables.base_xy))
        u = en.clamp(en.slice_cols(pos, 0, 1), 0.0, geo.grid.width - 1.0)
        v = en.clamp(en.slice_cols(pos, 1, 2), 0.0, geo.grid.height - 1.0)
        outs = []
        for value_map in (current, prev_aligned):
            sample = en.bilinear_gather(
                value_map, u, v, tables.row_base, geo.grid.width, geo.grid.height
            )
            branch = en.weighted_group_sum(sample, att, nk)
            outs.append(_lin(leaves, 0, "val", branch))
        return en.scale(en.add(outs[0], outs[1]), 0.5)


class RcfFusion:
    """Channel concat of the two temporal maps, two-layer MLP, residual."""

    family = Family.TEMPORAL_FUSION

    def __init__(self, variant_id: str, cfg: PipelineConfig):
        self.variant_id = variant_id
        self.cfg = cfg

    def param_spec(self) -> dict[str, tuple[int, ...]]:
        c = self.cfg.channels
        spec: dict[str, tuple[int, ...]] = {}
        _linear_spec(spec, 0, "fc1", 2 * c, c)
        _linear_spec(spec, 1, "fc2", c, c)
        return spec

    def forward(
        self,
        leaves: Mapping[str, Tensor],
        current: Tensor,
        prev_aligned: Tensor,
        geo: ViewGeometry,
        batch: int,
    ) -> Tensor:
        if current.shape != prev_aligned.shape:
            raise en.ShapeError(
                f"fusion inputs must match: {current.shape} vs {prev_aligned.shape}"
            )
        h = en.concat_cols(current, prev_aligned)
        h = en.relu(_lin(leaves, 0, "fc1", h))
        h = _lin(leaves, 1, "fc2", h)
        return en.add(current, h)


# ---------------------------------------------------------------------------
# Detection head
# ---------------------------------------------------------------------------


@dataclass
class DetectionOutput:
    """Per-query predictions; rows are ordered (sample, query)."""

    logits: Tensor  # (B*nq, n_classes + 1), last column is background
    boxes: Tensor  # (B*nq, 6) center xyz + softplus extents
    velocities: Tensor  # (B*nq, 2)
    n_queries: int
    batch: int


class DetectionHead:
    """Decoder stack of query self-attention and cross-attention into BEV."""

    family = Family.HEAD

    def __init__(self, variant_id: str, cfg: PipelineConfig):
        self.variant_id = variant_id
        self.cfg = cfg

    def param_spec(self) -> dict[str, tuple[int, ...]]:
        cfg = self.cfg
        c = cfg.channels
        spec: dict[str, tuple[int, ...]] = {"block-0/queries": (cfg.n_queries, c)}
        for layer in range(1, cfg.head_layers + 1):
            for name in ("sq", "sk", "sv", "cq", "ck", "cv"):
                _linear_spec(spec, layer, name, c, c)
            _ln_spec(spec, layer, "ln1", c)
            _ln_spec(spec, layer, "ln2", c)
            _linear_spec(spec, layer, "fc1", c, 2 * c)
            _linear_spec(spec, layer, "fc2", 2 * c, c)
            _ln_spec(spec, layer, "ln3", c)
        out_block = cfg.head_layers + 1
        _linear_spec(spec, out_block, "cls", c, cfg.n_classes + 1)
        _linear_spec(spec, out_block, "box", c, 6)
        _linear_spec(spec, out_block, "vel", c, 2)
        return spec

    def forward(self, leaves: Mapping[str, Tensor], bev: Tensor, batch: int) -> DetectionOutput:
        cfg = self.cfg
        inv_sqrt = 1.0 / float(np.sqrt(cfg.channels))
        q_all = en.tile_rows(leaves["block-0/queries"], batch)  # (B*nq, C)
        for layer in range(1, cfg.head_layers + 1):
            sa = en.batched_attention(
                _lin(leaves, layer, "sq", q_all),
                _lin(leaves, layer, "sk", q_all),
                _lin(leaves, layer, "sv", q_all),
                batch,
                inv_sqrt,
            )
            q_all = _ln(leaves, layer, "ln1", en.add(q_all, sa))
            ca = en.batched_attention(
                _lin(leaves, layer, "cq", q_all),
                _lin(leaves, layer, "ck", bev),
                _lin(leaves, layer, "cv", bev),
                batch,
                inv_sqrt,
            )
            q_all = _ln(leaves, layer, "ln2", en.add(q_all, ca))
            h = en.relu(_lin(leaves, layer, "fc1", q_all))
            h = _lin(leaves, layer, "fc2", h)
            q_all = _ln(leaves, layer, "ln3", en.add(q_all, h))
        out_block = cfg.head_layers + 1
        logits = _lin(leaves, out_block, "cls", q_all)
        box_raw = _lin(leaves, out_block, "box", q_all)
        centers = en.slice_cols(box_raw, 0, 3)
        extents = en.softplus(en.slice_cols(box_raw, 3, 6))
        boxes = en.concat_cols(centers, extents)
        velocities = _lin(leaves, out_block, "vel", q_all)
        return DetectionOutput(logits, boxes, velocities, cfg.n_queries, batch)


# ---------------------------------------------------------------------------
# Registry construction and parameter init
# ---------------------------------------------------------------------------

_ENCODER_SPECS = {"enc-a": (64, 2), "enc-b": (96, 4)}


def make_variant_module(family: Family, variant_id: str, cfg: PipelineConfig):
    if family is Family.FEATURE_EXTRACTOR:
        width, blocks = _ENCODER_SPECS[variant_id]
        return Encoder(variant_id, width, blocks, cfg)
    if family is Family.PV2BEV:
        return ScaTransform(variant_id, cfg) if variant_id == "sca" else GktTransform(variant_id, cfg)
    if family is Family.TEMPORAL_FUSION:
        return TsaFusion(variant_id, cfg) if variant_id == "tsa" else RcfFusion(variant_id, cfg)
    return DetectionHead(variant_id, cfg)


def build_default_registry(cfg: PipelineConfig | None = None) -> Registry:
    """The 2x2x2x1 grid of runnable variants."""
    cfg = cfg or PipelineConfig()
    reg = Registry()
    defs = [
        (Family.FEATURE_EXTRACTOR, "enc-a", {"width": 64, "blocks": 2, "patch": cfg.patch}),
        (Family.FEATURE_EXTRACTOR, "enc-b", {"width": 96, "blocks": 4, "patch": cfg.patch}),
        (Family.PV2BEV, "sca", {"n_points": cfg.n_points, "n_anchors": len(cfg.anchor_heights)}),
        (Family.PV2BEV, "gkt", {"kernel": list(cfg.kernel)}),
        (Family.TEMPORAL_FUSION, "tsa", {"n_points": cfg.n_points}),
        (Family.TEMPORAL_FUSION, "rcf", {"hidden": cfg.channels}),
        (Family.HEAD, "det-head", {"layers": cfg.head_layers, "queries": cfg.n_queries}),
    ]
    for family, vid, hparams in defs:
        module = make_variant_module(family, vid, cfg)
        reg.register(
            ModuleVariant(family, vid, hparams, module.param_spec())
        )
    return reg


def init_parameters(
    registry: Registry, assembly: ModelAssembly, cfg: PipelineConfig, seed: int
) -> dict[str, Parameter]:
    """Seeded init; a given (family, variant) initializes identically across
    assemblies so models sharing a module start from the same weights."""
    params: dict[str, Parameter] = {}
    for family, vid in assembly.selection().items():
        variant = registry.get(family, vid)
        rng = np.random.default_rng(derive_seed(seed, "init", family.value, vid))
        prefix = family_prefix(family, vid)
        for suffix, shape in variant.param_shapes.items():
            name = suffix.rsplit("/", 1)[-1]
            if name == "off_b":
                data = _spread_offsets(shape[0])
            elif name.endswith("_g"):
                data = np.ones(shape, dtype=en.DTYPE)
            elif name.endswith("_b"):
                data = np.zeros(shape, dtype=en.DTYPE)
            elif name == "queries":
                data = rng.normal(0.0, 0.02, size=shape).astype(en.DTYPE)
            else:
                fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape))
                data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(en.DTYPE)
            key = prefix + suffix
            params[key] = Parameter(key, Tensor(data))
    return params


def _spread_offsets(size: int) -> np.ndarray:
    """Ring pattern for sampling-offset biases: (cos, sin) pairs at staggered
    angles, strictly off the sampling lattice so interpolation starts from
    distinct, non-degenerate points."""
    m = size // 2
    angles = 2.0 * np.pi * (np.arange(m) + 0.5) / max(m, 1)
    radius = 0.35
    out = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    return out.reshape(-1).astype(en.DTYPE)[:size]


# ---------------------------------------------------------------------------
# Prepared inputs and the assembled model
# ---------------------------------------------------------------------------


@dataclass
class PreparedSequence:
    """Model-ready constants for one scene: per-frame patch matrices, the
    per-step grid alignments, and the ground truth of the current frame."""

    seq: SceneSequence
    patches: list[np.ndarray]  # FRAME_COUNT arrays (V*P, patch_dim)
    alignments: list[GridAlignment]  # FRAME_COUNT - 1


def prepare_sequence(seq: SceneSequence, rig: CameraRig, grid: BevGrid, cfg: PipelineConfig) -> PreparedSequence:
    if tuple(rig.image_size) != (cfg.image_size, cfg.image_size):
        raise en.ShapeError(
            f"rig rasters {rig.image_size} do not match pipeline image size {cfg.image_size}"
        )
    patches = [patchify(render_views(seq, rig, t), cfg.patch) for t in range(FRAME_COUNT)]
    aligns = [align_history_grid(grid, m) for m in seq.ego_motion]
    return PreparedSequence(seq, patches, aligns)


@dataclass
class _WarpTables:
    u: np.ndarray  # (B*n, 1) float32 source x cell coords, clamped
    v: np.ndarray  # (B*n, 1) float32
    row_base: np.ndarray  # (B*n,) int64 per-sample offsets
    valid: np.ndarray  # (B*n, 1) float32


def _batch_warp_tables(
    aligns: Sequence[GridAlignment], width: int, height: int
) -> _WarpTables:
    """Stack per-sample alignments, offsetting rows into the batched maps."""
    src = np.concatenate([a.source_xy for a in aligns], axis=0)
    u = np.clip(src[:, 0:1], 0.0, width - 1.0).astype(en.DTYPE)
    v = np.clip(src[:, 1:2], 0.0, height - 1.0).astype(en.DTYPE)
    n_cells = width * height
    rows = np.repeat(np.arange(len(aligns), dtype=np.int64) * n_cells, n_cells)
    valid = np.concatenate([a.valid.astype(en.DTYPE) for a in aligns]).reshape(-1, 1)
    return _WarpTables(u, v, rows, valid)


def warp_previous(prev: Tensor, tables: _WarpTables, fallback: Tensor, width: int, height: int) -> Tensor:
    """Bilinear inverse warp of the previous BEV map; cells that fall outside
    the previous grid take the fallback (current) features instead."""
    out = en.bilinear_gather(
        prev, Tensor(tables.u), Tensor(tables.v), tables.row_base, width, height
    )
    out = en.scale_rows(out, Tensor(tables.valid))
    inv = Tensor((1.0 - tables.valid).astype(en.DTYPE))
    return en.add(out, en.scale_rows(fallback, inv))


class AssembledModel:
    """A complete pipeline built from one variant per family.

    The forward pass runs encoder and view transform on all four keyframes,
    folds the temporal fusion module over them oldest to newest (the first
    frame fuses with a copy of itself), and decodes the final BEV map into
    per-query detections.
    """

    def __init__(
        self,
        registry: Registry,
        assembly: ModelAssembly,
        cfg: PipelineConfig,
        rig: CameraRig,
        params: Mapping[str, Parameter] | None = None,
        seed: int = 0,
    ):
        registry.validate_assembly(assembly)
        self.registry = registry
        self.assembly = assembly
        self.cfg = cfg
        self.grid = cfg.make_grid()
        self.geo = ViewGeometry(self.grid, rig, cfg)
        self.encoder = make_variant_module(Family.FEATURE_EXTRACTOR, assembly.feature_extractor, cfg)
        self.transform = make_variant_module(Family.PV2BEV, assembly.pv2bev, cfg)
        self.fusion = make_variant_module(Family.TEMPORAL_FUSION, assembly.temporal_fusion, cfg)
        self.head = make_variant_module(Family.HEAD, assembly.head, cfg)
        if params is None:
            params = init_parameters(registry, assembly, cfg, seed)
        self.params: dict[str, Parameter] = dict(params)

    @property
    def parameter_keys(self) -> list[str]:
        return list(self.params.keys())

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for key, arr in arrays.items():
            self.params[key].tensor.data = np.ascontiguousarray(arr, dtype=en.DTYPE)

    def export_arrays(self) -> dict[str, np.ndarray]:
        return {key: p.tensor.data.copy() for key, p in self.params.items()}

    def _sub_leaves(self, leaves: Mapping[str, Tensor], family: Family, vid: str) -> dict[str, Tensor]:
        prefix = family_prefix(family, vid)
        return {k[len(prefix):]: t for k, t in leaves.items() if k.startswith(prefix)}

    def forward(
        self,
        batch: Sequence[PreparedSequence],
        tape: Tape | None = None,
        leaves: Mapping[str, Tensor] | None = None,
    ) -> DetectionOutput:
        if leaves is None:
            if tape is not None:
                leaves = tape.watch_all(self.params)
            else:
                leaves = {k: p.tensor.detached() for k, p in self.params.items()}
        b = len(batch)
        sel = self.assembly.selection()
        enc_leaves = self._sub_leaves(leaves, Family.FEATURE_EXTRACTOR, sel[Family.FEATURE_EXTRACTOR])
        vt_leaves = self._sub_leaves(leaves, Family.PV2BEV, sel[Family.PV2BEV])
        fu_leaves = self._sub_leaves(leaves, Family.TEMPORAL_FUSION, sel[Family.TEMPORAL_FUSION])
        head_leaves = self._sub_leaves(leaves, Family.HEAD, sel[Family.HEAD])
        fused: Tensor | None = None
        for t in range(FRAME_COUNT):
            patches = Tensor(np.concatenate([s.patches[t] for s in batch], axis=0))
            feats = self.encoder.forward(enc_leaves, patches)
            bev = self.transform.forward(vt_leaves, feats, self.geo, b)
            if fused is None:
                aligned = bev  # initial frame fuses with a copy of itself
            else:
                tables = _batch_warp_tables(
                    [s.alignments[t - 1] for s in batch], self.grid.width, self.grid.height
                )
                aligned = warp_previous(fused, tables, bev, self.grid.width, self.grid.height)
            fused = self.fusion.forward(fu_leaves, bev, aligned, self.geo, b)
        return self.head.forward(head_leaves, fused, b)
