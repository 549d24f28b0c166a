"""
Dataset directories: binary PPM images plus a ``manifest.tsv`` of
``file  pid  cam`` rows (one header line).
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from ohformer.errors import DataError, OutputError
from ohformer.tensor import nearest_index, parallel_map

logger = logging.getLogger(__name__)

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = ("file", "pid", "cam")

PathLike = Union[str, Path]


def _ppm_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    while pos < len(data):
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def decode_ppm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """
    Decode a binary (P6) PPM with maxval 255 into uint8 [H, W, 3].

    Raises:
        DataError: not a P6 file, unsupported maxval, or truncated pixel data
    """
    magic, pos = _ppm_token(data, 0)
    if magic != b"P6":
        raise DataError(f"{name}: not a binary PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        token, pos = _ppm_token(data, pos)
        if not token.isdigit():
            raise DataError(f"{name}: malformed PPM header")
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255 or width < 1 or height < 1:
        raise DataError(f"{name}: unsupported PPM geometry {width}x{height} maxval {maxval}")
    pixels = data[pos + 1:pos + 1 + width * height * 3]
    if len(pixels) != width * height * 3:
        raise DataError(f"{name}: truncated PPM pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)


def encode_ppm(image: np.ndarray) -> bytes:
    height, width, _ = image.shape
    return f"P6\n{width} {height}\n255\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def read_ppm(path: PathLike) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return decode_ppm(data, str(path))


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode_ppm(image))
    except OSError as e:
        raise OutputError(f"cannot write image {path}: {e}") from e


@dataclass(frozen=True)
class ManifestEntry:
    file: str
    pid: int
    cam: int


def read_manifest(root: PathLike) -> List[ManifestEntry]:
    """
    Raises:
        DataError: missing manifest, bad header or malformed row
    """
    path = Path(root) / MANIFEST
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise DataError(f"{path}: header must be {' '.join(MANIFEST_HEADER)}")
    entries = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise DataError(f"{path}:{line}: expected 3 columns, got {len(row)}")
        try:
            entries.append(ManifestEntry(row[0], int(row[1]), int(row[2])))
        except ValueError:
            raise DataError(f"{path}:{line}: pid and cam must be integers") from None
    if not entries:
        raise DataError(f"{path}: no images listed")
    return entries


def write_manifest(root: PathLike, entries: Sequence[ManifestEntry]) -> None:
    path = Path(root) / MANIFEST
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for e in entries:
                writer.writerow((e.file, e.pid, e.cam))
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e


def normalize(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """uint8 [H, W, 3] -> float32 [3, h, w] in [-1, 1], nearest-resized to ``size`` when needed."""
    if image.shape[:2] != tuple(size):
        image = image[nearest_index(size[0], image.shape[0])][:, nearest_index(size[1], image.shape[1])]
    x = image.astype(np.float32).transpose(2, 0, 1) / 255.0
    return (x - 0.5) / 0.5


@dataclass
class ReidDataset:
    """Images of one split, decoded and normalized, with identity and camera labels."""

    root: Path
    entries: List[ManifestEntry]
    images: np.ndarray  # [N, 3, h, w] float32

    @property
    def pids(self) -> np.ndarray:
        return np.array([e.pid for e in self.entries], dtype=np.int64)

    @property
    def cams(self) -> np.ndarray:
        return np.array([e.cam for e in self.entries], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, positions: Sequence[int]) -> "ReidDataset":
        positions = list(positions)
        return ReidDataset(self.root, [self.entries[i] for i in positions], self.images[positions])

    def channel_mean(self) -> np.ndarray:
        return self.images.mean(axis=(0, 2, 3))


def load_dataset(root: PathLike, size: Tuple[int, int]) -> ReidDataset:
    """
    Raises:
        DataError: missing directory, manifest or image
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    entries = read_manifest(root)
    images = parallel_map(lambda e: normalize(read_ppm(root / e.file), size), entries)
    logger.info("loaded %d images of %d identities from %s", len(entries), len({e.pid for e in entries}), root)
    return ReidDataset(root, entries, np.stack(images))


def holdout_split(entries: Sequence[ManifestEntry], every: int) -> Tuple[List[int], List[int]]:
    """
    Hold out every ``every``-th image of each identity, ordered by (cam, file).

    Returns:
        (train positions, held-out positions); ``every == 0`` holds nothing out
    """
    if every < 0:
        raise DataError(f"holdout_every must be >= 0, got {every}")
    by_pid = {}
    for position, e in enumerate(entries):
        by_pid.setdefault(e.pid, []).append(position)
    train, held = [], []
    for pid in sorted(by_pid):
        ordered = sorted(by_pid[pid], key=lambda i: (entries[i].cam, entries[i].file))
        for rank, position in enumerate(ordered):
            (held if every and rank % every == every - 1 else train).append(position)
    return sorted(train), sorted(held)


def label_map(pids: Sequence[int]) -> dict:
    """Contiguous class index per identity, in ascending pid order."""
    return {pid: i for i, pid in enumerate(sorted(set(int(p) for p in pids)))}
