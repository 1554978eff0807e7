"""Serialization round trips plus forced-failure coverage for every format gate."""

import json
import struct

import numpy as np
import pytest

from shiftquant.calibrate import CalibConfig, quantize_model
from shiftquant.engine import run_quantized
from shiftquant.errors import (
    BlobFormatError,
    DanglingRefError,
    InvalidInputError,
    ManifestParseError,
    ModelFormatError,
    VersionError,
)
from shiftquant.modelio import (
    FLOAT_BLOB_MAGIC,
    FORMAT_VERSION,
    QUANT_MODEL_FORMAT,
    TENSOR_MAGIC,
    load_model,
    load_quantized,
    read_tensor,
    save_model,
    save_quantized,
    write_tensor,
)

from graphs import build_basic_block, build_toy_resnet


@pytest.fixture
def quantized_block(tmp_path):
    rng = np.random.default_rng(101)
    model = build_basic_block(rng)
    calib = (rng.normal(0.0, 1.0, (2, 4, 6, 6)),)
    qm, _ = quantize_model(model, CalibConfig(calib_inputs=calib))
    return qm


class TestTensorBlob:
    @pytest.mark.parametrize("shape", [(5,), (3, 4), (2, 3, 4), (2, 3, 4, 5)])
    def test_float_round_trip(self, tmp_path, shape):
        rng = np.random.default_rng(1)
        arr = rng.normal(size=shape)
        p = tmp_path / "t.bin"
        write_tensor(p, arr)
        back = read_tensor(p)
        assert back.dtype == np.float32
        assert back.shape == shape
        assert np.array_equal(back, arr.astype(np.float32))

    def test_int8_and_int32_round_trip(self, tmp_path):
        for arr in (
            np.arange(-8, 8, dtype=np.int8),
            np.arange(-70000, -69990, dtype=np.int64),
        ):
            p = tmp_path / "t.bin"
            write_tensor(p, arr)
            back = read_tensor(p)
            assert np.array_equal(back, arr)
        assert back.dtype == np.int32

    def test_write_is_deterministic(self, tmp_path):
        arr = np.random.default_rng(2).normal(size=(3, 3))
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        write_tensor(a, arr)
        write_tensor(b, arr)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_bad_rank(self, tmp_path):
        with pytest.raises(InvalidInputError):
            write_tensor(tmp_path / "t.bin", np.float64(3.0).reshape(()))
        with pytest.raises(InvalidInputError):
            write_tensor(tmp_path / "t.bin", np.zeros((1, 1, 1, 1, 1)))

    def test_rejects_huge_dim(self, tmp_path):
        with pytest.raises(InvalidInputError):
            write_tensor(tmp_path / "t.bin", np.zeros(0x10000, dtype=np.int8))

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.bin"
        write_tensor(p, np.zeros((4, 4)))
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(BlobFormatError, match="payload"):
            read_tensor(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "t.bin"
        p.write_bytes(b"SQTB")
        with pytest.raises(BlobFormatError, match="truncated"):
            read_tensor(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "t.bin"
        write_tensor(p, np.zeros(3))
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(BlobFormatError, match="magic"):
            read_tensor(p)

    def test_version_gate(self, tmp_path):
        p = tmp_path / "t.bin"
        write_tensor(p, np.zeros(3))
        raw = bytearray(p.read_bytes())
        raw[4] = FORMAT_VERSION + 1
        p.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            read_tensor(p)

    def test_dims_rank_consistency(self, tmp_path):
        p = tmp_path / "t.bin"
        # rank 1 but a nonzero second dim
        hdr = struct.pack("<4sBBBB4H", TENSOR_MAGIC, FORMAT_VERSION, 0, 1, 0, 3, 7, 0, 0)
        p.write_bytes(hdr + b"\x00" * 12)
        with pytest.raises(BlobFormatError, match="dims"):
            read_tensor(p)


class TestFloatModel:
    def test_round_trip_preserves_semantics(self, tmp_path):
        rng = np.random.default_rng(5)
        model = build_toy_resnet(rng)
        save_model(model, tmp_path / "m.json", tmp_path / "m.bin")
        back = load_model(tmp_path / "m.json", tmp_path / "m.bin")
        assert back.graph == model.graph
        assert set(back.tensors) == set(model.tensors)
        for name, arr in model.tensors.items():
            assert np.array_equal(back.tensors[name], arr.astype(np.float32))

    def test_save_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(6)
        model = build_basic_block(rng)
        for d in ("a", "b"):
            (tmp_path / d).mkdir()
            save_model(model, tmp_path / d / "m.json", tmp_path / d / "m.bin")
        assert (tmp_path / "a/m.json").read_bytes() == (tmp_path / "b/m.json").read_bytes()
        assert (tmp_path / "a/m.bin").read_bytes() == (tmp_path / "b/m.bin").read_bytes()

    def test_blob_resolved_from_manifest(self, tmp_path):
        rng = np.random.default_rng(6)
        model = build_basic_block(rng)
        save_model(model, tmp_path / "m.json", tmp_path / "m.bin")
        back = load_model(tmp_path / "m.json")
        assert back.graph == model.graph

    def test_manifest_syntax_error_names_location(self, tmp_path):
        rng = np.random.default_rng(7)
        model = build_basic_block(rng)
        save_model(model, tmp_path / "m.json", tmp_path / "m.bin")
        text = (tmp_path / "m.json").read_text()
        (tmp_path / "m.json").write_text(text[:40] + "}" + text[40:])
        with pytest.raises(ManifestParseError, match=r"line \d+"):
            load_model(tmp_path / "m.json", tmp_path / "m.bin")

    def test_wrong_format_string(self, tmp_path):
        rng = np.random.default_rng(8)
        model = build_basic_block(rng)
        save_model(model, tmp_path / "m.json", tmp_path / "m.bin")
        m = json.loads((tmp_path / "m.json").read_text())
        m["format"] = "somebody-elses-model"
        (tmp_path / "m.json").write_text(json.dumps(m))
        with pytest.raises(VersionError, match="format"):
            load_model(tmp_path / "m.json", tmp_path / "m.bin")

    def test_manifest_version_gate(self, tmp_path):
        rng = np.random.default_rng(9)
        model = build_basic_block(rng)
        save_model(model, tmp_path / "m.json", tmp_path / "m.bin")
        m = json.loads((tmp_path / "m.json").read_text())
        m["version"] = FORMAT_VERSION + 1
        (tmp_path / "m.json").write_text(json.dumps(m))
        with pytest.raises(VersionError, match="version"):
            load_model(tmp_path / "m.json", tmp_path / "m.bin")

    def test_blob_magic_mismatch(self, tmp_path):
        rng = np.random.default_rng(10)
        model = build_basic_block(rng)
        save_model(model, tmp_path / "m.json", tmp_path / "m.bin")
        raw = bytearray((tmp_path / "m.bin").read_bytes())
        raw[:4] = b"SQQB"
        (tmp_path / "m.bin").write_bytes(bytes(raw))
        with pytest.raises(BlobFormatError, match=str(FLOAT_BLOB_MAGIC)[2:6]):
            load_model(tmp_path / "m.json", tmp_path / "m.bin")

    def test_missing_node_field(self, tmp_path):
        rng = np.random.default_rng(11)
        model = build_basic_block(rng)
        save_model(model, tmp_path / "m.json", tmp_path / "m.bin")
        m = json.loads((tmp_path / "m.json").read_text())
        conv = next(n for n in m["nodes"] if n["kind"] == "conv")
        del conv["stride"]
        (tmp_path / "m.json").write_text(json.dumps(m))
        with pytest.raises(ModelFormatError, match="missing"):
            load_model(tmp_path / "m.json", tmp_path / "m.bin")

    def test_tensor_offset_out_of_bounds(self, tmp_path):
        rng = np.random.default_rng(12)
        model = build_basic_block(rng)
        save_model(model, tmp_path / "m.json", tmp_path / "m.bin")
        m = json.loads((tmp_path / "m.json").read_text())
        name = next(iter(m["tensors"]))
        m["tensors"][name]["offset"] = 10**9
        (tmp_path / "m.json").write_text(json.dumps(m))
        with pytest.raises(BlobFormatError, match="payload"):
            load_model(tmp_path / "m.json", tmp_path / "m.bin")

    def test_dangling_tensor_reference(self, tmp_path):
        rng = np.random.default_rng(13)
        model = build_basic_block(rng)
        save_model(model, tmp_path / "m.json", tmp_path / "m.bin")
        m = json.loads((tmp_path / "m.json").read_text())
        del m["tensors"]["c1.w"]
        (tmp_path / "m.json").write_text(json.dumps(m))
        with pytest.raises(DanglingRefError):
            load_model(tmp_path / "m.json", tmp_path / "m.bin")


class TestQuantizedModel:
    def test_round_trip_bit_exact(self, tmp_path, quantized_block):
        save_quantized(quantized_block, tmp_path / "q.json")
        back = load_quantized(tmp_path / "q.json")
        assert back.bit_width == quantized_block.bit_width
        assert back.input_shape == quantized_block.input_shape
        assert back.input_params == quantized_block.input_params
        assert len(back.modules) == len(quantized_block.modules)
        for a, b in zip(back.modules, quantized_block.modules):
            assert a.label == b.label and a.case == b.case and a.attrs == b.attrs
            assert (a.input_ref, a.shortcut_ref) == (b.input_ref, b.shortcut_ref)
            assert np.array_equal(a.weight.ints, b.weight.ints)
            assert a.weight.params == b.weight.params
            assert np.array_equal(a.bias.ints, b.bias.ints)
            assert a.bias.params == b.bias.params
            assert a.out == b.out
            assert a.bias_align_shift == b.bias_align_shift
            assert a.requant_shift == b.requant_shift

    def test_loaded_model_infers_bit_exact(self, tmp_path, quantized_block):
        save_quantized(quantized_block, tmp_path / "q.json")
        back = load_quantized(tmp_path / "q.json")
        x = np.random.default_rng(42).normal(0.0, 1.0, (3, 4, 6, 6))
        a = run_quantized(quantized_block, x, engine="int")
        b = run_quantized(back, x, engine="int")
        assert np.array_equal(a.ints, b.ints)
        assert a.params == b.params

    def test_resave_is_byte_identical(self, tmp_path, quantized_block):
        save_quantized(quantized_block, tmp_path / "q.json")
        back = load_quantized(tmp_path / "q.json")
        save_quantized(back, tmp_path / "r.json")
        a = (tmp_path / "q.json").read_text().replace("q.bin", "X.bin")
        b = (tmp_path / "r.json").read_text().replace("r.bin", "X.bin")
        assert a == b
        assert (tmp_path / "q.bin").read_bytes() == (tmp_path / "r.bin").read_bytes()

    def test_wide_models_cannot_be_saved(self, tmp_path):
        rng = np.random.default_rng(102)
        model = build_basic_block(rng)
        calib = (rng.normal(0.0, 1.0, (2, 4, 6, 6)),)
        qm, _ = quantize_model(model, CalibConfig(bit_width=12, calib_inputs=calib))
        with pytest.raises(InvalidInputError, match="int8"):
            save_quantized(qm, tmp_path / "q.json")

    def test_missing_blob(self, tmp_path, quantized_block):
        save_quantized(quantized_block, tmp_path / "q.json")
        (tmp_path / "q.bin").unlink()
        with pytest.raises(DanglingRefError):
            load_quantized(tmp_path / "q.json")

    def test_out_of_range_int8_code(self, tmp_path):
        rng = np.random.default_rng(103)
        model = build_basic_block(rng)
        calib = (rng.normal(0.0, 1.0, (2, 4, 6, 6)),)
        qm, _ = quantize_model(model, CalibConfig(bit_width=6, calib_inputs=calib))
        save_quantized(qm, tmp_path / "q.json")
        raw = bytearray((tmp_path / "q.bin").read_bytes())
        raw[8] = 100  # first weight byte: outside the 6-bit range [-32, 31]
        (tmp_path / "q.bin").write_bytes(bytes(raw))
        with pytest.raises(BlobFormatError, match="module 0 weight"):
            load_quantized(tmp_path / "q.json")

    def test_tampered_shift_is_rejected(self, tmp_path, quantized_block):
        save_quantized(quantized_block, tmp_path / "q.json")
        m = json.loads((tmp_path / "q.json").read_text())
        m["modules"][0]["requant_shift"] += 1
        (tmp_path / "q.json").write_text(json.dumps(m))
        with pytest.raises(ModelFormatError, match="requant_shift"):
            load_quantized(tmp_path / "q.json")

    def test_forward_reference_is_rejected(self, tmp_path, quantized_block):
        save_quantized(quantized_block, tmp_path / "q.json")
        m = json.loads((tmp_path / "q.json").read_text())
        m["modules"][0]["input"] = 1
        (tmp_path / "q.json").write_text(json.dumps(m))
        with pytest.raises(ModelFormatError, match="earlier"):
            load_quantized(tmp_path / "q.json")

    def test_format_string_gate(self, tmp_path, quantized_block):
        save_quantized(quantized_block, tmp_path / "q.json")
        m = json.loads((tmp_path / "q.json").read_text())
        m["format"] = "shiftquant-float-model"
        (tmp_path / "q.json").write_text(json.dumps(m))
        with pytest.raises(VersionError, match=QUANT_MODEL_FORMAT):
            load_quantized(tmp_path / "q.json")

    def test_truncated_quant_blob(self, tmp_path, quantized_block):
        save_quantized(quantized_block, tmp_path / "q.json")
        raw = (tmp_path / "q.bin").read_bytes()
        (tmp_path / "q.bin").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(BlobFormatError, match="payload"):
            load_quantized(tmp_path / "q.json")
