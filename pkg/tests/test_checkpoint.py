"""Checkpoint container: bit-exact round trips, validation, extraction."""

import json
import struct

import numpy as np
import pytest

from mml.checkpoint import (
    Checkpoint,
    CorruptionError,
    FormatError,
    MergeEvent,
    StorageError,
    checkpoint_from_params,
    extract_module_weights,
    load_checkpoint,
    save_checkpoint,
)
from mml.modules import PipelineConfig, build_default_registry, init_parameters
from mml.registry import Family, ModelAssembly


@pytest.fixture(scope="module")
def sample_ckpt():
    reg = build_default_registry(PipelineConfig())
    assembly = ModelAssembly("enc-a", "sca", "tsa", "det-head")
    params = init_parameters(reg, assembly, PipelineConfig(), seed=3)
    ckpt = checkpoint_from_params(assembly.assembly_id, params, val_map=0.123)
    ckpt.provenance.append(MergeEvent(1, "average", ("a+b+c+d", "e+f+g+h")))
    return ckpt


class TestRoundTrip:
    def test_bitwise_identity(self, sample_ckpt, tmp_path):
        path = tmp_path / "model.mmlc"
        save_checkpoint(sample_ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.assembly_id == sample_ckpt.assembly_id
        assert loaded.val_map == sample_ckpt.val_map
        assert loaded.provenance == sample_ckpt.provenance
        assert set(loaded.params) == set(sample_ckpt.params)
        for key in sample_ckpt.params:
            assert loaded.params[key].shape == sample_ckpt.params[key].shape
            assert (
                loaded.params[key].tobytes() == sample_ckpt.params[key].tobytes()
            )

    def test_double_round_trip_file_identical(self, sample_ckpt, tmp_path):
        p1, p2 = tmp_path / "a.mmlc", tmp_path / "b.mmlc"
        save_checkpoint(sample_ckpt, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_parameter_map(self, tmp_path):
        ckpt = Checkpoint("enc-a+sca+tsa+det-head", {})
        path = tmp_path / "empty.mmlc"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.params == {}


class TestGuards:
    def test_oversize_refused(self, tmp_path, monkeypatch):
        import mml.checkpoint as cp

        monkeypatch.setattr(cp, "MAX_PAYLOAD_BYTES", 64)
        ckpt = Checkpoint(
            "enc-a+sca+tsa+det-head",
            {"Head/det-head/block-0/queries": np.zeros((10, 10), dtype=np.float32)},
        )
        with pytest.raises(StorageError):
            save_checkpoint(ckpt, tmp_path / "big.mmlc")

    def test_bad_key_grammar_rejected_on_save(self, tmp_path):
        ckpt = Checkpoint("x+y+z+w", {"not a key": np.zeros(3, dtype=np.float32)})
        with pytest.raises(FormatError):
            save_checkpoint(ckpt, tmp_path / "bad.mmlc")

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "junk.mmlc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        (tmp_path / "junk.mmlc.meta.json").write_text("{}")
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_names_both(self, sample_ckpt, tmp_path):
        path = tmp_path / "v2.mmlc"
        save_checkpoint(sample_ckpt, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="2.*1"):
            load_checkpoint(path)

    def test_truncated_payload(self, sample_ckpt, tmp_path):
        path = tmp_path / "trunc.mmlc"
        save_checkpoint(sample_ckpt, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CorruptionError):
            load_checkpoint(path)

    def test_trailing_garbage(self, sample_ckpt, tmp_path):
        path = tmp_path / "trail.mmlc"
        save_checkpoint(sample_ckpt, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CorruptionError, match="trailing"):
            load_checkpoint(path)

    def test_missing_sidecar(self, sample_ckpt, tmp_path):
        path = tmp_path / "noside.mmlc"
        save_checkpoint(sample_ckpt, path)
        (tmp_path / "noside.mmlc.meta.json").unlink()
        with pytest.raises(FormatError, match="sidecar"):
            load_checkpoint(path)


class TestExtraction:
    def test_only_own_variant_extracts(self, sample_ckpt):
        gkt = extract_module_weights(sample_ckpt, Family.PV2BEV, "gkt")
        sca = extract_module_weights(sample_ckpt, Family.PV2BEV, "sca")
        assert gkt == {}
        assert sca and all(k.startswith("PV2BEV/sca/") for k in sca)

    def test_partition(self, sample_ckpt):
        union = set()
        total = 0
        for family, vid in [
            (Family.FEATURE_EXTRACTOR, "enc-a"),
            (Family.PV2BEV, "sca"),
            (Family.TEMPORAL_FUSION, "tsa"),
            (Family.HEAD, "det-head"),
        ]:
            part = extract_module_weights(sample_ckpt, family, vid)
            assert not (union & set(part))
            union |= set(part)
            total += len(part)
        assert union == set(sample_ckpt.params)
        assert total == len(sample_ckpt.params)

    def test_shared_variant_key_sets_identical_across_assemblies(self):
        reg = build_default_registry(PipelineConfig())
        cfg = PipelineConfig()
        a1 = ModelAssembly("enc-a", "sca", "tsa", "det-head")
        a2 = ModelAssembly("enc-a", "gkt", "rcf", "det-head")
        c1 = checkpoint_from_params(a1.assembly_id, init_parameters(reg, a1, cfg, 0))
        c2 = checkpoint_from_params(a2.assembly_id, init_parameters(reg, a2, cfg, 0))
        k1 = set(extract_module_weights(c1, Family.FEATURE_EXTRACTOR, "enc-a"))
        k2 = set(extract_module_weights(c2, Family.FEATURE_EXTRACTOR, "enc-a"))
        assert k1 == k2 and k1


class TestSidecar:
    def test_sidecar_is_readable_json(self, sample_ckpt, tmp_path):
        path = tmp_path / "m.mmlc"
        save_checkpoint(sample_ckpt, path)
        meta = json.loads((tmp_path / "m.mmlc.meta.json").read_text())
        assert meta["assembly_id"] == sample_ckpt.assembly_id
        assert meta["val_map"] == pytest.approx(0.123)
        assert meta["provenance"][0]["strategy"] == "average"
