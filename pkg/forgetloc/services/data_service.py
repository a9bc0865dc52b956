"""
Data Service Module

Handles download, caching and parsing of the MNIST / FashionMNIST IDX files.
Cache layout: <cache_dir>/<source>/<filename>, files stored decompressed.
"""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import httpx
import numpy as np

from forgetloc.config.settings import app_settings
from forgetloc.models.schemas import DataSource, FetchConfig, Split
from forgetloc.utils.exceptions import (
    ConsistencyError, FetchError, FormatError, IntegrityError
)
from forgetloc.utils.logger import logger

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# split -> (images file, labels file); identical names for both sources
FILES: Dict[Split, Tuple[str, str]] = {
    Split.TRAIN: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    Split.TEST: ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

# decompressed byte lengths: 16-byte image header + n*784, 8-byte label header + n
EXPECTED_BYTES: Dict[str, int] = {
    "train-images-idx3-ubyte": 16 + 60000 * 784,
    "train-labels-idx1-ubyte": 8 + 60000,
    "t10k-images-idx3-ubyte": 16 + 10000 * 784,
    "t10k-labels-idx1-ubyte": 8 + 10000,
}


@dataclass(frozen=True)
class Dataset:
    """uint8 images (N x 28 x 28 x 1) and uint8 labels in 0..9"""
    images: np.ndarray
    labels: np.ndarray
    split: Split
    source: DataSource

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.dtype != np.uint8 or self.labels.dtype != np.uint8:
            raise FormatError("dataset arrays must be uint8")
        if len(self.labels) and self.labels.max() > 9:
            raise FormatError(f"label {int(self.labels.max())} outside 0..9")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.split, self.source)

    def head(self, count: Optional[int]) -> "Dataset":
        if count is None or count >= len(self):
            return self
        return Dataset(self.images[:count], self.labels[:count], self.split, self.source)


def _read_header(raw: bytes, magic: int, dims: int, path: Path) -> Tuple[int, ...]:
    header_len = 4 + 4 * dims
    if len(raw) < header_len:
        raise FormatError(f"{path.name}: truncated header", offset=len(raw))
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path.name}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    return struct.unpack(">" + "I" * dims, raw[4:header_len])


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             split: Split = Split.TRAIN, source: DataSource = DataSource.MNIST) -> Dataset:
    """Parse an IDX image file (magic 0x803) and its IDX label file (magic 0x801)"""
    images_path, labels_path = Path(images_path), Path(labels_path)
    image_raw = images_path.read_bytes()
    label_raw = labels_path.read_bytes()

    count, rows, cols = _read_header(image_raw, IMAGE_MAGIC, 3, images_path)
    expected = 16 + count * rows * cols
    if len(image_raw) < expected:
        raise FormatError(f"{images_path.name}: truncated pixel data, expected {expected} bytes",
                          offset=len(image_raw))
    (label_count,) = _read_header(label_raw, LABEL_MAGIC, 1, labels_path)
    if len(label_raw) < 8 + label_count:
        raise FormatError(f"{labels_path.name}: truncated label data, expected {8 + label_count} bytes",
                          offset=len(label_raw))
    if label_count != count:
        raise ConsistencyError(f"{images_path.name} has {count} images but {labels_path.name} has {label_count} labels")

    images = np.frombuffer(image_raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    labels = np.frombuffer(label_raw, dtype=np.uint8, count=count, offset=8)
    logger.debug(f"Loaded {count} examples of {rows}x{cols} from {images_path.name}")
    return Dataset(images.reshape(count, rows, cols, 1).copy(), labels.copy(), split, source)


def _check_length(path: Path) -> None:
    expected = EXPECTED_BYTES.get(path.name)
    actual = path.stat().st_size
    if expected is not None and actual != expected:
        raise IntegrityError(f"{path} has {actual} bytes, expected {expected}")


def fetch_dataset(source: DataSource, mirror_url: str, cache_dir: Union[str, Path],
                  timeout: float = 60.0) -> Dict[str, Path]:
    """Download (if absent), decompress and length-check the four files of a source"""
    target_dir = Path(cache_dir) / DataSource(source).value
    target_dir.mkdir(parents=True, exist_ok=True)
    paths: Dict[str, Path] = {}

    for split_files in FILES.values():
        for filename in split_files:
            path = target_dir / filename
            downloaded = not path.exists()
            if downloaded:
                url = mirror_url.rstrip("/") + f"/{filename}.gz"
                logger.info(f"Downloading {url}")
                try:
                    response = httpx.get(url, timeout=timeout, follow_redirects=True)
                    response.raise_for_status()
                except httpx.HTTPError as e:
                    raise FetchError(f"could not download {filename} for {DataSource(source).value} ({e}) and it is not cached") from e
                try:
                    content = gzip.decompress(response.content)
                except (OSError, EOFError) as e:
                    raise FetchError(f"{url} did not return a gzip stream for {filename} ({e})") from e
                partial = path.with_suffix(".part")
                partial.write_bytes(content)
                partial.replace(path)
            try:
                _check_length(path)
            except IntegrityError:
                if downloaded:
                    path.unlink()
                raise
            paths[filename] = path

    logger.info(f"{DataSource(source).value} available in {target_dir}")
    return paths


class DataService:
    """Loads datasets from the cache directory, keeping parsed splits in memory"""

    def __init__(self, data_dir: Optional[Path] = None):
        self.data_dir = Path(data_dir) if data_dir is not None else app_settings.data_dir
        self._cache: Dict[Tuple[DataSource, Split], Dataset] = {}

    def fetch(self, source: DataSource, config: Optional[FetchConfig] = None) -> Dict[str, Path]:
        config = config or app_settings.get_fetch_config()
        return fetch_dataset(source, config.mirrors[source], self.data_dir, config.timeout)

    def is_cached(self, source: DataSource) -> bool:
        folder = self.data_dir / DataSource(source).value
        return all((folder / name).exists() for files in FILES.values() for name in files)

    def load(self, source: DataSource, split: Split) -> Dataset:
        key = (DataSource(source), Split(split))
        if key in self._cache:
            return self._cache[key]

        folder = self.data_dir / key[0].value
        images_file, labels_file = FILES[key[1]]
        if not (folder / images_file).exists():
            raise FetchError(f"{folder / images_file} is missing; run `forgetloc fetch --source {key[0].value}`")
        dataset = load_idx(folder / images_file, folder / labels_file, key[1], key[0])
        self._cache[key] = dataset
        return dataset

    def clear_cache(self):
        """Clear the data cache"""
        self._cache.clear()
        logger.info("Data cache cleared")

    def get_data_stats(self) -> Dict[str, object]:
        return {
            "data_directory": str(self.data_dir),
            "cached_sources": [s.value for s in DataSource if self.is_cached(s)],
            "loaded_splits": [f"{s.value}/{p.value}" for s, p in self._cache],
        }


# Create global data service instance
data_service = DataService()
