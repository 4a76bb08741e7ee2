import hashlib
import json
import logging
import os
import platform
import struct
from importlib import metadata
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np
import pandas as pd

from ..errors import CheckpointFormatError, InputError
from ..fields.triplane import CHECKPOINT_TENSORS, MLP_TENSORS, MlpParams, TriPlaneScene

logger = logging.getLogger(__name__)

GRID_MAGIC = b"EPGF"
CHECKPOINT_MAGIC = b"EPGC"
HEADER = struct.Struct("<4sIII")
FLOAT = np.dtype("<f4")
MANIFEST_NAME = "manifest.json"


def _tensor_shapes(rp: int, f: int, h: int) -> Dict[str, Tuple[int, ...]]:
    shapes = {
        "mlp.w1": (f, h),
        "mlp.b1": (h,),
        "mlp.w2": (h, h),
        "mlp.b2": (h,),
        "mlp.w3": (h, 4),
        "mlp.b3": (4,),
    }
    shapes.update({name: (rp, rp, f) for name in CHECKPOINT_TENSORS if name.startswith("planes.")})
    return shapes


def canonical_json(config: Dict[str, Any]) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(config: Dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def _version(package: str) -> str:
    try:
        return metadata.version(package)
    except metadata.PackageNotFoundError:
        return "unknown"


class DataManager:
    """Reads and writes every artifact the toolkit produces."""

    @staticmethod
    def ensure_dir(path: str):
        os.makedirs(path, exist_ok=True)

    @staticmethod
    def write_csv(frame: pd.DataFrame, path: str) -> str:
        """Header row, UTF-8, LF line endings, '.' decimal."""
        DataManager.ensure_dir(os.path.dirname(os.path.abspath(path)))
        frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n", encoding="utf-8")
        return path

    @staticmethod
    def write_ppm(image: np.ndarray, path: str) -> str:
        """Binary P6, maxval 255, each value stored as round(255 * clip(v, 0, 1))."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = np.repeat(image[..., None], 3, axis=-1)
        if image.ndim != 3 or image.shape[2] != 3:
            raise InputError(f"expected an H x W x 3 image, got {image.shape}")
        data = np.round(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8)
        h, w = data.shape[:2]
        DataManager.ensure_dir(os.path.dirname(os.path.abspath(path)))
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(data.tobytes())
        return path

    @staticmethod
    def read_ppm(path: str) -> np.ndarray:
        with open(path, "rb") as f:
            raw = f.read()
        tokens = []
        pos = 0
        while len(tokens) < 4:
            while pos < len(raw) and raw[pos : pos + 1].isspace():
                pos += 1
            if raw[pos : pos + 1] == b"#":
                pos = raw.index(b"\n", pos)
                continue
            end = pos
            while end < len(raw) and not raw[end : end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
        if tokens[0] != b"P6" or int(tokens[3]) != 255:
            raise InputError(f"{path}: not an 8-bit P6 image")
        w, h = int(tokens[1]), int(tokens[2])
        pixels = np.frombuffer(raw[pos + 1 : pos + 1 + 3 * w * h], dtype=np.uint8)
        return pixels.reshape(h, w, 3)

    @staticmethod
    def write_density_grid(grid: np.ndarray, path: str) -> str:
        """16-byte header (EPGF, N, channels=1, reserved=0) then N^3 little-endian f32, x fastest."""
        grid = np.asarray(grid)
        n = grid.shape[0]
        if grid.shape != (n, n, n):
            raise InputError(f"density grid must be N x N x N, got {grid.shape}")
        DataManager.ensure_dir(os.path.dirname(os.path.abspath(path)))
        with open(path, "wb") as f:
            f.write(HEADER.pack(GRID_MAGIC, n, 1, 0))
            f.write(np.ascontiguousarray(grid, dtype=FLOAT).tobytes())
        return path

    @staticmethod
    def read_density_grid(path: str) -> np.ndarray:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < HEADER.size:
            raise CheckpointFormatError(f"{path}: truncated header")
        magic, n, channels, _ = HEADER.unpack_from(raw)
        if magic != GRID_MAGIC or channels != 1:
            raise CheckpointFormatError(f"{path}: not a density grid")
        if len(raw) != HEADER.size + FLOAT.itemsize * n**3:
            raise CheckpointFormatError(f"{path}: expected {n}^3 values, file size is {len(raw)}")
        return np.frombuffer(raw, dtype=FLOAT, offset=HEADER.size).reshape(n, n, n)

    @staticmethod
    def write_checkpoint(scene: TriPlaneScene, path: str) -> str:
        """Header (EPGC, Rp, F, H) then every tensor of CHECKPOINT_TENSORS as little-endian f32."""
        tensors = scene.tensors()
        DataManager.ensure_dir(os.path.dirname(os.path.abspath(path)))
        with open(path, "wb") as f:
            f.write(HEADER.pack(CHECKPOINT_MAGIC, scene.plane_res, scene.features, scene.hidden))
            for name in CHECKPOINT_TENSORS:
                f.write(np.ascontiguousarray(tensors[name], dtype=FLOAT).tobytes())
        logger.debug("Wrote checkpoint %s", path)
        return path

    @staticmethod
    def read_checkpoint(path: str, dtype=np.float64) -> TriPlaneScene:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < HEADER.size:
            raise CheckpointFormatError(f"{path}: truncated header")
        magic, rp, feats, hidden = HEADER.unpack_from(raw)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        shapes = _tensor_shapes(rp, feats, hidden)
        expected = HEADER.size + FLOAT.itemsize * sum(int(np.prod(shapes[n])) for n in CHECKPOINT_TENSORS)
        if len(raw) != expected:
            raise CheckpointFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")

        tensors = {}
        offset = HEADER.size
        for name in CHECKPOINT_TENSORS:
            count = int(np.prod(shapes[name]))
            values = np.frombuffer(raw, dtype=FLOAT, count=count, offset=offset)
            tensors[name] = values.reshape(shapes[name]).astype(dtype)
            offset += FLOAT.itemsize * count

        planes = np.stack([tensors[n] for n in CHECKPOINT_TENSORS if n.startswith("planes.")])
        mlp = MlpParams(**{n: tensors[f"mlp.{n}"] for n in MLP_TENSORS})
        return TriPlaneScene(planes=planes, mlp=mlp)

    @staticmethod
    def write_manifest(
        output_dir: str,
        subcommand: str,
        config: Dict[str, Any],
        artifacts: Iterable[str],
        extra: Optional[Dict[str, Any]] = None,
    ) -> str:
        """manifest.json: config hash, versions, artifact list and anything in `extra`."""
        manifest = {
            "subcommand": subcommand,
            "config_sha256": config_hash(config),
            "config": config,
            "versions": {
                "patchwise-nerf": _version("patchwise-nerf"),
                "numpy": np.__version__,
                "pandas": pd.__version__,
                "python": platform.python_version(),
            },
            "artifacts": sorted(os.path.relpath(a, output_dir) for a in artifacts),
        }
        manifest.update(extra or {})
        path = os.path.join(output_dir, MANIFEST_NAME)
        DataManager.ensure_dir(output_dir)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True, default=str)
            f.write("\n")
        return path
