"""PNG interchange, the shared cover database and run manifests."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .pipeline import cover_id, dequantize, quantize, to_planar


class ImageIOError(ValueError):
    pass


def read_pixels(path: str | Path) -> np.ndarray:
    """8-bit ``H x W x 3`` RGB pixels; alpha and palette images are converted."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc


def read_png(path: str | Path) -> np.ndarray:
    """Float64 ``3 x H x W`` in [0, 1]."""
    return to_planar(read_pixels(path))


def write_png(path: str | Path, image: np.ndarray, floor: int = 0) -> None:
    """Write a float ``3 x H x W`` image (clamped and rounded) or uint8 ``H x W x 3`` pixels."""
    image = np.asarray(image)
    if image.dtype == np.uint8 and image.ndim == 3 and image.shape[2] == 3:
        pixels = image
    else:
        pixels = quantize(image, floor).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PNG", optimize=False, compress_level=6)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class CoverDatabase:
    """PNG covers in a directory, looked up by the SHA-256 of their RGB bytes."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise ImageIOError(f"cover database {self.directory} is not a directory")
        self.index: dict[str, Path] = {}
        for path in sorted(self.directory.glob("*.png")):
            key = cover_id(read_pixels(path))
            if key in self.index:
                raise ImageIOError(f"cover database: {path.name} and {self.index[key].name} share content hash {key[:12]}")
            self.index[key] = path

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, key: str) -> bool:
        return key in self.index

    def lookup(self, key: str) -> np.ndarray:
        if key not in self.index:
            raise ImageIOError(f"cover {key[:16]} not found in database {self.directory} ({len(self)} covers indexed)")
        return read_png(self.index[key])


@dataclass
class RunManifest:
    command: str
    seed: int | None = None
    config_hash: str | None = None
    model_hash: str | None = None
    outputs: list[str] = field(default_factory=list)
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def write(self, path: str | Path) -> None:
        self.finished = time.time()
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


__all__ = [
    "CoverDatabase",
    "ImageIOError",
    "RunManifest",
    "dequantize",
    "file_digest",
    "read_pixels",
    "read_png",
    "write_png",
]
