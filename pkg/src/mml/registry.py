"""Catalog of perception module families and their runnable variants.

The library covers the whole vehicle-road-cloud taxonomy as metadata; only
the four camera-pipeline families (feature extraction, view transform,
temporal fusion, detection head) are runnable in this artifact. A registry
instance maps each runnable family to concrete variants whose
hyperparameters pin every parameter shape, and enumerates complete model
assemblies as the cartesian product over families.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np


class RegistryError(Exception):
    pass


class DuplicateVariantError(RegistryError):
    pass


class UnsupportedFamilyError(RegistryError):
    pass


class UnknownVariantError(RegistryError):
    pass


class ConfigurationError(RegistryError):
    pass


class Family(str, Enum):
    """The four runnable pipeline roles, in execution order."""

    FEATURE_EXTRACTOR = "FeatureExtractor"
    PV2BEV = "PV2BEV"
    TEMPORAL_FUSION = "TemporalFusion"
    HEAD = "Head"


PIPELINE_ORDER: tuple[Family, ...] = (
    Family.FEATURE_EXTRACTOR,
    Family.PV2BEV,
    Family.TEMPORAL_FUSION,
    Family.HEAD,
)


@dataclass(frozen=True)
class ModuleFamily:
    table_index: int
    name: str
    description: str
    runnable: bool
    family_id: Family | None


def _entry(idx: int, name: str, desc: str, fam: Family | None = None) -> ModuleFamily:
    return ModuleFamily(idx, name, desc, fam is not None, fam)


# Full 39-entry taxonomy. Rows without a family_id are inert metadata: the
# sensors they serve (LiDAR, radar, maps, roadside, V2X links) are not
# simulated here.
MODULE_LIBRARY: tuple[ModuleFamily, ...] = (
    _entry(1, "Backbone_Camera", "Image Feature Extraction", Family.FEATURE_EXTRACTOR),
    _entry(2, "PV2BEV", "Image Feature Conversion from Perspective View to Bird's Eye View", Family.PV2BEV),
    _entry(3, "BFF_Camera", "Bird's Eye View Image Feature Fusion"),
    _entry(4, "TFF_Camera", "Bird's Eye View Image Temporal Feature Fusion", Family.TEMPORAL_FUSION),
    _entry(5, "Backbone_LiDAR", "LiDAR Feature Extraction"),
    _entry(6, "BFF_LIDAR", "LiDAR Feature Fusion"),
    _entry(7, "TFF_LIDAR", "LiDAR Temporal Feature Fusion"),
    _entry(8, "Backbone_Radar", "Millimeter Wave Radar Feature Extraction"),
    _entry(9, "BFF_Radar", "Millimeter Wave Radar Feature Fusion"),
    _entry(10, "TFF_Radar", "Millimeter Wave Radar Temporal Feature Fusion"),
    _entry(11, "Backbone_Map", "Lightweight Map Feature Extraction"),
    _entry(12, "BFF_Map", "Lightweight Map Feature Fusion"),
    _entry(13, "TFF_Map", "Lightweight Map Temporal Feature Fusion"),
    _entry(14, "MMF", "Multi-Modal Feature Fusion"),
    _entry(15, "OBH_Detection", "Obstacle Detection Head", Family.HEAD),
    _entry(16, "OBH_Tracking", "Obstacle Tracking Head"),
    _entry(17, "OBH_Prediction", "Obstacle Prediction Head"),
    _entry(18, "LAH_Detection", "Lane Detection Head"),
    _entry(19, "LAH_Tracking", "Lane Tracking Head"),
    _entry(20, "LAH_Prediction", "Lane Prediction Head"),
    _entry(21, "OCH_Detection", "Occupancy Grid Detection Head"),
    _entry(22, "OCH_Tracking", "Occupancy Grid Tracking Head"),
    _entry(23, "OCH_Prediction", "Occupancy Grid Prediction Head"),
    _entry(24, "FCT_Camera_Vehicle", "Bird's Eye View Image Feature Compression and Transmission"),
    _entry(25, "FCT_LiDAR_Vehicle", "LiDAR Feature Compression and Transmission"),
    _entry(26, "FCT_Radar_Vehicle", "Millimeter Wave Radar Feature Compression and Transmission"),
    _entry(27, "Backbone_Camera_Roadside", "Roadside Image Feature Extraction"),
    _entry(28, "PV2BEV_Roadside", "Roadside Image Feature Conversion from Perspective View to Bird's Eye View"),
    _entry(29, "BFF_Camera_Roadside", "Roadside Bird's Eye View Image Feature Fusion"),
    _entry(30, "TFF_Camera_Roadside", "Roadside Bird's Eye View Image Temporal Feature Fusion"),
    _entry(31, "Backbone_LiDAR_Roadside", "Roadside LiDAR Feature Extraction"),
    _entry(32, "BFF_LiDAR_Roadside", "Roadside LiDAR Feature Fusion"),
    _entry(33, "TFF_LiDAR_Roadside", "Roadside LiDAR Temporal Feature Fusion"),
    _entry(34, "Backbone_Radar_Roadside", "Roadside Millimeter Wave Radar Feature Extraction"),
    _entry(35, "BFF_Radar_Roadside", "Roadside Millimeter Wave Radar Feature Fusion"),
    _entry(36, "TFF_Radar_Roadside", "Roadside Millimeter Wave Radar Temporal Feature Fusion"),
    _entry(37, "FCT_Camera_Roadside", "Roadside Bird's Eye View Image Feature Compression and Transmission"),
    _entry(38, "FCT_LiDAR_Roadside", "Roadside LiDAR Feature Compression and Transmission"),
    _entry(39, "FCT_Radar_Roadside", "Roadside Millimeter Wave Radar Feature Compression and Transmission"),
)

_NAME_TO_ENTRY = {m.name: m for m in MODULE_LIBRARY}


def list_families(runnable_only: bool = False) -> tuple[ModuleFamily, ...]:
    if runnable_only:
        return tuple(m for m in MODULE_LIBRARY if m.runnable)
    return MODULE_LIBRARY


def resolve_family(family: Family | str) -> Family:
    """Accept a Family, its value, or a library module name; reject inert rows."""
    if isinstance(family, Family):
        return family
    try:
        return Family(family)
    except ValueError:
        pass
    entry = _NAME_TO_ENTRY.get(str(family))
    if entry is not None:
        if entry.family_id is None:
            raise UnsupportedFamilyError(f"family {family!r} is metadata-only, not runnable")
        return entry.family_id
    raise UnsupportedFamilyError(f"unknown family {family!r}")


@dataclass(frozen=True)
class ModuleVariant:
    """A concrete implementation choice for one family.

    ``param_shapes`` maps key suffixes (``block-<i>/<name>``) to shapes; the
    full parameter key is ``<family>/<variant>/<suffix>``.
    """

    family: Family
    variant_id: str
    hyperparameters: Mapping[str, object]
    param_shapes: Mapping[str, tuple[int, ...]]

    @property
    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes.values()))


@dataclass(frozen=True)
class ModelAssembly:
    """One variant per runnable family, in pipeline order."""

    feature_extractor: str
    pv2bev: str
    temporal_fusion: str
    head: str

    @property
    def assembly_id(self) -> str:
        return "+".join(self.selection().values())

    def selection(self) -> dict[Family, str]:
        return {
            Family.FEATURE_EXTRACTOR: self.feature_extractor,
            Family.PV2BEV: self.pv2bev,
            Family.TEMPORAL_FUSION: self.temporal_fusion,
            Family.HEAD: self.head,
        }

    @classmethod
    def parse(cls, assembly_id: str) -> "ModelAssembly":
        parts = assembly_id.split("+")
        if len(parts) != len(PIPELINE_ORDER) or any(not p for p in parts):
            raise ConfigurationError(f"malformed assembly id {assembly_id!r}")
        return cls(*parts)

    def __str__(self) -> str:
        return self.assembly_id


@dataclass
class Registry:
    _variants: dict[Family, dict[str, ModuleVariant]] = field(
        default_factory=lambda: {f: {} for f in PIPELINE_ORDER}
    )

    def register(self, variant: ModuleVariant) -> ModuleVariant:
        family = resolve_family(variant.family)
        table = self._variants[family]
        if variant.variant_id in table:
            raise DuplicateVariantError(
                f"variant ({family.value}, {variant.variant_id!r}) already registered"
            )
        table[variant.variant_id] = variant
        return variant

    def variants(self, family: Family | str) -> list[ModuleVariant]:
        family = resolve_family(family)
        return [self._variants[family][vid] for vid in sorted(self._variants[family])]

    def get(self, family: Family | str, variant_id: str) -> ModuleVariant:
        family = resolve_family(family)
        try:
            return self._variants[family][variant_id]
        except KeyError:
            raise UnknownVariantError(f"no variant ({family.value}, {variant_id!r})") from None

    def enumerate_assemblies(self) -> list[ModelAssembly]:
        """Cartesian product over families, lexicographic in variant ids."""
        per_family = []
        for family in PIPELINE_ORDER:
            ids = sorted(self._variants[family])
            if not ids:
                raise ConfigurationError(f"family {family.value} has no variants")
            per_family.append(ids)
        out = []
        for fe in per_family[0]:
            for pv in per_family[1]:
                for tf in per_family[2]:
                    for hd in per_family[3]:
                        out.append(ModelAssembly(fe, pv, tf, hd))
        return out

    def validate_assembly(self, assembly: ModelAssembly) -> None:
        for family, vid in assembly.selection().items():
            self.get(family, vid)

    def parameter_keys(self, assembly: ModelAssembly) -> list[str]:
        """Namespaced keys of every parameter of an assembled model."""
        self.validate_assembly(assembly)
        keys = []
        for family, vid in assembly.selection().items():
            variant = self.get(family, vid)
            keys.extend(f"{family.value}/{vid}/{suffix}" for suffix in variant.param_shapes)
        return keys

    def parameter_shapes(self, assembly: ModelAssembly) -> dict[str, tuple[int, ...]]:
        self.validate_assembly(assembly)
        shapes: dict[str, tuple[int, ...]] = {}
        for family, vid in assembly.selection().items():
            variant = self.get(family, vid)
            for suffix, shape in variant.param_shapes.items():
                shapes[f"{family.value}/{vid}/{suffix}"] = tuple(shape)
        return shapes

    def to_json(self) -> dict:
        """Registry export consumed by the CLI and the HTTP service."""
        return {
            "families": [
                {
                    "index": m.table_index,
                    "name": m.name,
                    "description": m.description,
                    "runnable": m.runnable,
                    "family_id": m.family_id.value if m.family_id else None,
                }
                for m in MODULE_LIBRARY
            ],
            "pipeline_order": [f.value for f in PIPELINE_ORDER],
            "variants": [
                {
                    "family": family.value,
                    "variant_id": v.variant_id,
                    "hyperparameters": dict(v.hyperparameters),
                    "param_count": v.param_count,
                }
                for family in PIPELINE_ORDER
                for v in self.variants(family)
            ],
        }


def family_prefix(family: Family, variant_id: str) -> str:
    return f"{family.value}/{variant_id}/"


def split_key(key: str) -> tuple[Family, str, str]:
    """Split ``family/variant/suffix`` into its parts."""
    parts = key.split("/", 2)
    if len(parts) != 3:
        raise RegistryError(f"malformed parameter key {key!r}")
    return Family(parts[0]), parts[1], parts[2]
