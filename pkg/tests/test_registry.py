import json

import pytest

from tpfp.arch_map import ProjectionKind
from tpfp.errors import DuplicateModelId, HashMismatch
from tpfp.fingerprint import Fingerprint, write_fingerprint
from tpfp.registry import Registry

PK = ProjectionKind


def sample_fp(model_id="model-a", scale=1.0):
    return Fingerprint.from_values(
        model_id,
        {PK.Q: [scale * v for v in (1.0, 2.0, 3.0)], PK.K: [scale * v for v in (2.0, 1.0, 2.0)]},
    )


@pytest.fixture
def fp_file(tmp_path):
    path = tmp_path / "model-a.tpfp.json"
    write_fingerprint(sample_fp(), path)
    return path


class TestAddList:
    def test_add_then_list(self, tmp_path, fp_file):
        reg = Registry(tmp_path / "reg")
        dest = reg.add(fp_file)
        assert dest.read_bytes() == fp_file.read_bytes()
        entries = reg.entries()
        assert len(entries) == 1
        assert entries[0].model_id == "model-a"
        assert entries[0].num_layers == 3
        assert entries[0].kinds == ("Q", "K")
        assert entries[0].content_hash == sample_fp().content_hash

    def test_duplicate_model_id(self, tmp_path, fp_file):
        reg = Registry(tmp_path / "reg")
        reg.add(fp_file)
        with pytest.raises(DuplicateModelId):
            reg.add(fp_file)

    def test_model_id_sanitized_for_filesystem(self, tmp_path):
        path = tmp_path / "fp.tpfp.json"
        write_fingerprint(sample_fp("org/model:v1"), path)
        reg = Registry(tmp_path / "reg")
        dest = reg.add(path)
        assert dest.name == "org_model_v1.tpfp.json"
        assert reg.entries()[0].model_id == "org/model:v1"

    def test_fingerprints_round_trip(self, tmp_path, fp_file):
        reg = Registry(tmp_path / "reg")
        reg.add(fp_file)
        fps = reg.fingerprints()
        assert len(fps) == 1
        assert fps[0].kinds[PK.Q].values == (1.0, 2.0, 3.0)


class TestVerify:
    def test_verify_clean(self, tmp_path, fp_file):
        reg = Registry(tmp_path / "reg")
        reg.add(fp_file)
        assert len(reg.verify()) == 1

    def test_verify_names_tampered_file(self, tmp_path, fp_file):
        reg = Registry(tmp_path / "reg")
        dest = reg.add(fp_file)
        doc = json.loads(dest.read_text())
        doc["kinds"]["Q"][0] = 9.9
        dest.write_text(json.dumps(doc))
        with pytest.raises(HashMismatch, match=dest.name):
            reg.verify()


class TestIndexRepair:
    def test_stale_index_rewritten(self, tmp_path, fp_file):
        reg = Registry(tmp_path / "reg")
        reg.add(fp_file)
        reg.index_path.write_text('{"schema_version": 1, "entries": {}}')
        entries = reg.entries()
        assert len(entries) == 1
        index = json.loads(reg.index_path.read_text())
        assert "model-a" in index["entries"]

    def test_index_regenerable_from_scratch(self, tmp_path, fp_file):
        reg = Registry(tmp_path / "reg")
        reg.add(fp_file)
        reg.index_path.unlink()
        assert len(reg.entries()) == 1
        assert reg.index_path.is_file()

    def test_file_dropped_behind_indexs_back(self, tmp_path, fp_file):
        reg = Registry(tmp_path / "reg")
        dest = reg.add(fp_file)
        other = tmp_path / "other.tpfp.json"
        write_fingerprint(sample_fp("model-b"), other)
        reg.add(other)
        dest.unlink()  # index now stale
        entries = reg.entries()
        assert [e.model_id for e in entries] == ["model-b"]
        index = json.loads(reg.index_path.read_text())
        assert list(index["entries"]) == ["model-b"]
