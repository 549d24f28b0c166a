"""
Procedural pedestrian dataset.

Each identity has a signature (head, torso and leg colors plus a torso
width); each camera applies a global illumination scale and a per-channel
color shift; each image adds position jitter, background noise and, with
the configured probability, a gray occluder over the lower half.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from ohformer.errors import ConfigurationError, OutputError
from ohformer.tensor import Rng
from ohformer.training.data import ManifestEntry, write_manifest, write_ppm

logger = logging.getLogger(__name__)

GENERATION_NAME = "generation.tsv"
GENERATION_HEADER = ("file", "pid", "cam", "head", "torso", "legs", "torso_width", "occluded")
OCCLUDER_GRAY = 128

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SynthSpec:
    ids: int = 8
    cams: int = 2
    per_id: int = 10
    size: Tuple[int, int] = (60, 30)
    occlude: float = 0.0
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.ids < 1 or self.cams < 1 or self.per_id < 1:
            raise ConfigurationError("ids, cams and per_id must be positive")
        if self.size[0] < 10 or self.size[1] < 10:
            raise ConfigurationError(f"image size {self.size} is below 10x10")
        if not 0.0 <= self.occlude <= 1.0:
            raise ConfigurationError(f"occlusion probability {self.occlude} outside [0, 1]")
        return self

    @property
    def count(self) -> int:
        return self.ids * self.cams * self.per_id


@dataclass(frozen=True)
class Signature:
    head: Tuple[int, int, int]
    torso: Tuple[int, int, int]
    legs: Tuple[int, int, int]
    torso_width: float


@dataclass(frozen=True)
class Camera:
    scale: float
    shift: Tuple[float, float, float]
    background: float


@dataclass
class GeneratedImage:
    entry: ManifestEntry
    signature: Signature
    occluded: bool


def _color(rng: Rng) -> Tuple[int, int, int]:
    return tuple(int(c) for c in rng.integers(256, size=3))


def _hex(color: Tuple[int, int, int]) -> str:
    return "#{:02x}{:02x}{:02x}".format(*color)


def draw_signature(rng: Rng) -> Signature:
    return Signature(_color(rng), _color(rng), _color(rng), round(float(rng.uniform(0.45, 0.85)), 4))


def draw_camera(rng: Rng) -> Camera:
    shift = tuple(float(s) for s in rng.uniform(-20.0, 20.0, size=3))
    return Camera(float(rng.uniform(0.7, 1.2)), shift, float(rng.uniform(60.0, 190.0)))


def render(signature: Signature, camera: Camera, size: Tuple[int, int], rng: Rng,
           occlude: float) -> Tuple[np.ndarray, bool]:
    """One uint8 [H, W, 3] image and whether it carries the occluder."""
    height, width = size
    image = np.full((height, width, 3), camera.background) + rng.normal(0.0, 12.0, size=(height, width, 3))
    dy = int(rng.integers(5)) - 2
    dx = int(rng.integers(5)) - 2
    center = width // 2 + dx

    def band(top: float, bottom: float, half: float, color) -> None:
        r0 = int(np.clip(round(top * height) + dy, 0, height))
        r1 = int(np.clip(round(bottom * height) + dy, 0, height))
        c0 = int(np.clip(center - round(half * width), 0, width))
        c1 = int(np.clip(center + round(half * width), 0, width))
        image[r0:r1, c0:c1] = color

    band(0.05, 0.2, 0.15, signature.head)
    band(0.2, 0.55, signature.torso_width / 2, signature.torso)
    band(0.55, 0.95, 0.2, signature.legs)

    image = image * camera.scale + np.array(camera.shift)
    occluded = bool(rng.random() < occlude)
    if occluded:
        top = height // 2 + int(rng.integers(max(1, height // 4)))
        left = int(rng.integers(max(1, width // 2)))
        image[top:, left:left + (width + 1) // 2] = OCCLUDER_GRAY
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), occluded


def image_name(pid: int, cam: int, idx: int) -> str:
    return f"{pid:04}_{cam:02}_{idx:04}.ppm"


def synth_generate(spec: SynthSpec, out_dir: PathLike) -> List[GeneratedImage]:
    """
    Write the dataset: PPM images, ``manifest.tsv`` and ``generation.tsv``.

    Raises:
        ConfigurationError: invalid spec
        OutputError: the directory or a file cannot be written
    """
    spec.validate()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create dataset directory {root}: {e}") from e
    rng = Rng(spec.seed)
    signatures = [draw_signature(rng) for _ in range(spec.ids)]
    cameras = [draw_camera(rng) for _ in range(spec.cams)]

    generated = []
    for pid, signature in enumerate(signatures):
        for cam, camera in enumerate(cameras):
            for idx in range(spec.per_id):
                image, occluded = render(signature, camera, spec.size, rng, spec.occlude)
                name = image_name(pid, cam, idx)
                write_ppm(root / name, image)
                generated.append(GeneratedImage(ManifestEntry(name, pid, cam), signature, occluded))

    write_manifest(root, [g.entry for g in generated])
    path = root / GENERATION_NAME
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(GENERATION_HEADER)
            for g in generated:
                s = g.signature
                writer.writerow((g.entry.file, g.entry.pid, g.entry.cam, _hex(s.head), _hex(s.torso),
                                 _hex(s.legs), f"{s.torso_width:.4f}", int(g.occluded)))
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    logger.info("generated %d images of %d identities under %s", len(generated), spec.ids, root)
    return generated
