"""File-format tests: bit-exact dataset round-trips, float32 checkpoint
round-trips, and strict header validation."""
import numpy as np
import pytest

from tsp_tta.decoding import decode_greedy
from tsp_tta.model import ModelConfig, init_params
from tsp_tta.persistence import (
    CorruptFileError,
    FormatError,
    IncompatibleCheckpointError,
    load_checkpoint,
    load_config_file,
    load_dataset,
    parse_key_values,
    save_checkpoint,
    save_dataset,
)
from tsp_tta.tsp import generate_instance, generate_instances

TINY = ModelConfig(
    n_cities=5, d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=16
)


class TestDataset:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        instances = generate_instances(6, 10, rng)
        path = tmp_path / "d.tspd"
        save_dataset(path, instances, seed=123)
        loaded, seed = load_dataset(path)
        assert seed == 123
        assert len(loaded) == 10
        for a, b in zip(instances, loaded):
            assert np.array_equal(a.coords, b.coords)

    def test_two_saves_identical_bytes(self, tmp_path):
        instances = generate_instances(4, 3, np.random.default_rng(1))
        p1, p2 = tmp_path / "a.tspd", tmp_path / "b.tspd"
        save_dataset(p1, instances, seed=7)
        save_dataset(p2, instances, seed=7)
        assert p1.read_bytes() == p2.read_bytes()

    def test_file_size_formula(self, tmp_path):
        instances = generate_instances(50, 100, np.random.default_rng(2))
        path = tmp_path / "d.tspd"
        save_dataset(path, instances, seed=0)
        assert path.stat().st_size == 5 + 24 + 100 * 50 * 2 * 8

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tspd"
        path.write_bytes(b"XXXX!" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_truncated_body(self, tmp_path):
        instances = generate_instances(4, 3, np.random.default_rng(3))
        path = tmp_path / "d.tspd"
        save_dataset(path, instances, seed=0)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(CorruptFileError):
            load_dataset(path)

    def test_header_size_lie(self, tmp_path):
        instances = generate_instances(4, 3, np.random.default_rng(4))
        path = tmp_path / "d.tspd"
        save_dataset(path, instances, seed=0)
        blob = bytearray(path.read_bytes())
        blob[13] = 200  # inflate the declared instance count
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptFileError):
            load_dataset(path)


class TestCheckpoint:
    def test_round_trip_within_f32_quantization(self, tmp_path):
        params = init_params(TINY, 5)
        path = tmp_path / "m.tspm"
        save_checkpoint(path, params, TINY)
        loaded, config = load_checkpoint(path)
        assert config == TINY
        for name, node in params.items():
            assert np.allclose(loaded[name].value, node.value, rtol=1e-6, atol=1e-7)

    def test_behavioral_round_trip_greedy_tours(self, tmp_path):
        params = init_params(TINY, 6)
        path = tmp_path / "m.tspm"
        save_checkpoint(path, params, TINY)
        loaded, config = load_checkpoint(path)
        rng = np.random.default_rng(7)
        mismatches = 0
        for _ in range(50):
            inst = generate_instance(5, rng)
            a = decode_greedy(inst, params, TINY).tour.order
            b = decode_greedy(inst, loaded, config).tour.order
            mismatches += 0 if np.array_equal(a, b) else 1
        assert mismatches == 0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.tspm"
        path.write_bytes(b"XXXXX" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_body(self, tmp_path):
        params = init_params(TINY, 8)
        path = tmp_path / "m.tspm"
        save_checkpoint(path, params, TINY)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(CorruptFileError):
            load_checkpoint(path)

    def test_manifest_config_mismatch(self, tmp_path):
        params = init_params(TINY, 9)
        path = tmp_path / "m.tspm"
        save_checkpoint(path, params, TINY)
        blob = path.read_bytes()
        # flip the declared city count; manifest shapes no longer fit
        tampered = blob.replace(b"n_cities=5", b"n_cities=6")
        path.write_bytes(tampered)
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    def test_save_rejects_wrong_shapes(self, tmp_path):
        params = init_params(TINY, 10)
        params["out.b"].value = np.zeros(7)
        with pytest.raises(IncompatibleCheckpointError):
            save_checkpoint(tmp_path / "m.tspm", params, TINY)


class TestConfigFiles:
    def test_parse_key_values(self):
        kv = parse_key_values(["a=1", "", "# comment", "b = two "])
        assert kv == {"a": "1", "b": "two"}

    def test_parse_rejects_bare_lines(self):
        with pytest.raises(FormatError):
            parse_key_values(["not-a-pair"])

    def test_config_file_round_trip(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("epochs=3\nn_cities=5\nlearning_rate=0.001\n")
        assert load_config_file(path) == {
            "epochs": "3",
            "n_cities": "5",
            "learning_rate": "0.001",
        }
