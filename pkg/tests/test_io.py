"""BVTK file format and checkpoint manifests."""

import numpy as np
import pytest

from tokenbudget import bvtk
from tokenbudget.errors import FormatError
from tokenbudget.pipeline import PipelineConfig, PipelineParams


class TestTensorFiles:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("shape", [(7,), (3, 4), (2, 3, 4)])
    def test_roundtrip(self, tmp_path, dtype, shape):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal(shape).astype(dtype)
        path = tmp_path / "t.bvtk"
        bvtk.write_tensor(path, arr)
        back = bvtk.read_tensor(path)
        assert back.dtype == dtype
        np.testing.assert_array_equal(back, arr)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.bvtk"
        bvtk.write_tensor(path, np.zeros((2, 3), dtype=np.float64))
        raw = path.read_bytes()
        assert raw[:5] == bytes([0x42, 0x56, 0x54, 0x4B, 0x31])
        assert raw[5] == 1  # f64
        assert raw[6] == 2  # ndim
        assert int.from_bytes(raw[7:15], "little") == 2
        assert int.from_bytes(raw[15:23], "little") == 3
        assert len(raw) == 23 + 6 * 8

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bvtk"
        path.write_bytes(b"NOPE1" + bytes([1, 1]) + (8).to_bytes(8, "little") + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            bvtk.read_tensor(path)

    def test_bad_dtype_rejected(self, tmp_path):
        path = tmp_path / "bad.bvtk"
        path.write_bytes(bvtk.MAGIC + bytes([9, 1]) + (1).to_bytes(8, "little") + b"\x00" * 8)
        with pytest.raises(FormatError, match="dtype"):
            bvtk.read_tensor(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.bvtk"
        bvtk.write_tensor(path, np.zeros((4, 4)))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="payload"):
            bvtk.read_tensor(path)

    def test_nan_rejected_at_load(self, tmp_path):
        arr = np.zeros((2, 2))
        arr[0, 1] = np.nan
        path = tmp_path / "t.bvtk"
        bvtk.write_tensor(path, arr)
        with pytest.raises(FormatError, match="NaN or Inf"):
            bvtk.read_tensor(path)

    def test_inf_rejected_at_load(self, tmp_path):
        path = tmp_path / "t.bvtk"
        bvtk.write_tensor(path, np.array([np.inf]))
        with pytest.raises(FormatError, match="NaN or Inf"):
            bvtk.read_tensor(path)


class TestCheckpoints:
    def test_roundtrip_with_validation(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {"a.weight": rng.standard_normal((2, 3)), "b.bias": rng.standard_normal(4)}
        bvtk.save_checkpoint(tmp_path / "ckpt", tensors, {"layers": 1})
        back, meta = bvtk.load_checkpoint(
            tmp_path / "ckpt", expected_shapes={"a.weight": (2, 3), "b.bias": (4,)}
        )
        assert meta == {"layers": 1}
        for name in tensors:
            np.testing.assert_array_equal(back[name], tensors[name])

    def test_missing_tensor_detected(self, tmp_path):
        bvtk.save_checkpoint(tmp_path / "ckpt", {"a": np.zeros(2)}, {})
        with pytest.raises(FormatError, match="missing tensors"):
            bvtk.load_checkpoint(tmp_path / "ckpt", expected_shapes={"a": (2,), "b": (1,)})

    def test_unexpected_tensor_detected(self, tmp_path):
        bvtk.save_checkpoint(tmp_path / "ckpt", {"a": np.zeros(2), "junk": np.zeros(1)}, {})
        with pytest.raises(FormatError, match="unexpected"):
            bvtk.load_checkpoint(tmp_path / "ckpt", expected_shapes={"a": (2,)})

    def test_shape_mismatch_detected(self, tmp_path):
        bvtk.save_checkpoint(tmp_path / "ckpt", {"a": np.zeros((2, 2))}, {})
        with pytest.raises(FormatError, match="shape"):
            bvtk.load_checkpoint(tmp_path / "ckpt", expected_shapes={"a": (2, 3)})

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "ckpt").mkdir()
        with pytest.raises(FormatError, match="manifest"):
            bvtk.load_checkpoint(tmp_path / "ckpt")

    def test_listed_file_missing(self, tmp_path):
        bvtk.save_checkpoint(tmp_path / "ckpt", {"a": np.zeros(2)}, {})
        (tmp_path / "ckpt" / "a.bvtk").unlink()
        with pytest.raises(FormatError, match="a.bvtk is missing"):
            bvtk.load_checkpoint(tmp_path / "ckpt")


class TestParameterCheckpoints:
    def test_pipeline_params_roundtrip(self, tmp_path):
        cfg = PipelineConfig(select_frames=3, spatial_tokens=2, dim=8, llm_dim=6, layers=1, heads=2)
        params = PipelineParams.create(cfg)
        params.save(tmp_path / "params", cfg)
        loaded, loaded_cfg = PipelineParams.load(tmp_path / "params")
        assert loaded_cfg == cfg
        for name, tensor in params.named_tensors().items():
            np.testing.assert_array_equal(loaded.named_tensors()[name].data, tensor.data)

    def test_selector_and_sampler_namespaces_distinct(self, tmp_path):
        cfg = PipelineConfig(dim=8, llm_dim=8, layers=1, heads=2)
        params = PipelineParams.create(cfg)
        names = set(params.named_tensors())
        assert any(n.startswith("selector.") for n in names)
        assert any(n.startswith("sampler.") for n in names)
        assert not any(n.startswith("selector.") and n.startswith("sampler.") for n in names)
        # same architecture, never shared parameters
        sel = params.selector_stack.parameters()
        sam = params.sampler_stack.parameters()
        assert sel.keys() == sam.keys()
        assert all(sel[k] is not sam[k] for k in sel)
