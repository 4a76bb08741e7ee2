import json
import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from patchwise_nerf.errors import CheckpointFormatError, InputError
from patchwise_nerf.fields.triplane import TriPlaneScene, decode, export_density_grid
from patchwise_nerf.utils.data_manager import MANIFEST_NAME, DataManager, config_hash


class TestCsv:
    def test_format(self, tmp_path):
        path = DataManager.write_csv(
            pd.DataFrame({"t": [0, 10], "s": [0.5, 1 / 3]}), str(tmp_path / "sub" / "out.csv")
        )
        raw = open(path, "rb").read()
        assert raw == b"t,s\n0,0.5\n10,0.333333333\n"


class TestPpm:
    def test_header_and_quantization(self, tmp_path):
        image = np.zeros((2, 3, 3))
        image[0, 0] = [1.0, 0.5, -0.2]
        image[1, 2] = [2.0, 0.25, 0.999]
        path = DataManager.write_ppm(image, str(tmp_path / "a.ppm"))
        raw = open(path, "rb").read()
        assert raw.startswith(b"P6\n3 2\n255\n")
        assert len(raw) == len(b"P6\n3 2\n255\n") + 2 * 3 * 3

        pixels = DataManager.read_ppm(path)
        assert pixels.shape == (2, 3, 3)
        assert_array_equal(pixels[0, 0], [255, 128, 0])
        assert_array_equal(pixels[1, 2], [255, 64, 255])

    def test_rejects_bad_shape(self, tmp_path):
        with pytest.raises(InputError):
            DataManager.write_ppm(np.zeros((4, 4, 2)), str(tmp_path / "b.ppm"))


class TestDensityGrid:
    def test_zero_scene_file(self, tmp_path):
        grid = export_density_grid(TriPlaneScene.zeros(4, 3, 5), 32)
        path = DataManager.write_density_grid(grid, str(tmp_path / "density.epgf"))
        raw = open(path, "rb").read()
        assert len(raw) == 16 + 4 * 32**3
        assert raw[:4] == b"EPGF"
        back = DataManager.read_density_grid(path)
        assert np.all(np.abs(back - math.log(2)) <= 1e-6)

    def test_x_is_fastest(self, tmp_path):
        grid = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        path = DataManager.write_density_grid(grid, str(tmp_path / "g.epgf"))
        values = np.frombuffer(open(path, "rb").read()[16:], dtype="<f4")
        assert_array_equal(values, np.arange(8))

    def test_rejects_truncated_file(self, tmp_path):
        path = tmp_path / "bad.epgf"
        path.write_bytes(b"EPGF" + (4).to_bytes(4, "little") + (1).to_bytes(4, "little") + bytes(4) + bytes(10))
        with pytest.raises(CheckpointFormatError):
            DataManager.read_density_grid(str(path))

    def test_rejects_non_cube(self, tmp_path):
        with pytest.raises(InputError):
            DataManager.write_density_grid(np.zeros((2, 3, 2)), str(tmp_path / "c.epgf"))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        scene = TriPlaneScene.initialize(6, 4, 8, np.random.default_rng(0), np.float32)
        path = DataManager.write_checkpoint(scene, str(tmp_path / "ckpt.epgc"))
        loaded = DataManager.read_checkpoint(path, np.float32)
        for name, tensor in scene.tensors().items():
            assert_array_equal(loaded.tensors()[name], tensor)
        x = np.random.default_rng(1).uniform(-1, 1, (10, 3))
        assert_array_equal(decode(loaded, x).density, decode(scene, x).density)

    def test_file_size(self, tmp_path):
        rp, f, h = 5, 3, 4
        scene = TriPlaneScene.zeros(rp, f, h)
        path = DataManager.write_checkpoint(scene, str(tmp_path / "z.epgc"))
        tensors = 3 * rp * rp * f + f * h + h + h * h + h + h * 4 + 4
        assert len(open(path, "rb").read()) == 16 + 4 * tensors

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "x.epgc"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(CheckpointFormatError):
            DataManager.read_checkpoint(str(path))

    def test_rejects_wrong_size(self, tmp_path):
        scene = TriPlaneScene.zeros(4, 2, 3)
        path = DataManager.write_checkpoint(scene, str(tmp_path / "t.epgc"))
        with open(path, "ab") as f:
            f.write(bytes(4))
        with pytest.raises(CheckpointFormatError):
            DataManager.read_checkpoint(path)


class TestManifest:
    def test_contents(self, tmp_path):
        artifact = DataManager.write_csv(pd.DataFrame({"a": [1]}), str(tmp_path / "a.csv"))
        config = {"seed": 3, "schedule": {"kind": "beta_annealed"}}
        path = DataManager.write_manifest(str(tmp_path), "schedule", config, [artifact], {"wall_seconds": 1.5})
        assert path.endswith(MANIFEST_NAME)
        manifest = json.load(open(path))
        assert manifest["subcommand"] == "schedule"
        assert manifest["config_sha256"] == config_hash(config)
        assert manifest["artifacts"] == ["a.csv"]
        assert manifest["wall_seconds"] == 1.5
        assert "numpy" in manifest["versions"]

    def test_hash_ignores_key_order(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
