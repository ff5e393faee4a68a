"""Orthogonal sectioning of volumes, section padding and random patch sampling.

Sections are 2D arrays indexed (u, v) where u is the first coordinate of the
section plane and v the second: xy sections are (x, y), xz sections are (x, z)
and yz sections are (y, z). ``pad_right`` extends u and ``pad_bottom`` extends v,
so padded content always stays at the (0, 0) corner.
"""

import enum
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from volume_io import Volume, VolumeError, quantize

logger = logging.getLogger(__name__)


class SliceAxis(enum.Enum):
    XY = "xy"
    XZ = "xz"
    YZ = "yz"

    @property
    def sliced_dim(self):
        """Index of the volume axis held fixed by sections of this kind."""
        return {SliceAxis.XY: 2, SliceAxis.XZ: 1, SliceAxis.YZ: 0}[self]

    @classmethod
    def parse(cls, text):
        try:
            return cls(str(text).lower())
        except ValueError:
            raise VolumeError(f"Unknown slice axis '{text}', expected one of xy, xz, yz")


ALL_AXES = (SliceAxis.XY, SliceAxis.XZ, SliceAxis.YZ)
PAD_MODES = ("reflect", "zero")


@dataclass(frozen=True)
class PadRecord:
    pad_right: int = 0
    pad_bottom: int = 0
    mode: str = "zero"

    def __post_init__(self):
        if self.pad_right < 0 or self.pad_bottom < 0:
            raise VolumeError(f"Pad amounts must be >= 0, got {self.pad_right}, {self.pad_bottom}")
        if self.mode not in PAD_MODES:
            raise VolumeError(f"Unknown pad mode '{self.mode}'")

    @property
    def is_zero(self):
        return self.pad_right == 0 and self.pad_bottom == 0


@dataclass(frozen=True, eq=False)
class SectionStack:
    """Sections along one axis stored as a (count, h, w) array, in index order."""

    axis: SliceAxis
    sections: np.ndarray
    pad: PadRecord = field(default_factory=PadRecord)

    def __post_init__(self):
        if self.sections.ndim != 3:
            raise VolumeError(f"Section stack must be (count, h, w), got {self.sections.shape}")

    @property
    def count(self):
        return int(self.sections.shape[0])

    @property
    def section_shape(self):
        return tuple(int(n) for n in self.sections.shape[1:])

    @property
    def content_shape(self):
        """Section dimensions once the recorded padding is removed."""
        h, w = self.section_shape
        return h - self.pad.pad_right, w - self.pad.pad_bottom


def extract_sections(volume, axis):
    """Slice a volume into its xy (by z), xz (by y) or yz (by x) sections."""
    data = volume.data
    if axis is SliceAxis.XY:
        sections = np.moveaxis(data, 2, 0)
    elif axis is SliceAxis.XZ:
        sections = np.moveaxis(data, 1, 0)
    else:
        sections = data
    return SectionStack(axis, np.ascontiguousarray(sections, dtype=np.float32))


def padded_size(n, multiple):
    return -(-n // multiple) * multiple


def pad_section(img, multiple, mode="reflect"):
    """Pad a section on the far sides to the next multiple of ``multiple``."""
    if multiple < 1:
        raise VolumeError(f"Pad multiple must be >= 1, got {multiple}")
    if mode not in PAD_MODES:
        raise VolumeError(f"Unknown pad mode '{mode}'")
    h, w = img.shape
    pad_right = padded_size(h, multiple) - h
    pad_bottom = padded_size(w, multiple) - w
    if mode == "reflect" and (pad_right >= h or pad_bottom >= w):
        raise VolumeError(
            f"Reflect padding of a {h}x{w} section by ({pad_right}, {pad_bottom}) needs pads smaller than the section"
        )
    record = PadRecord(pad_right, pad_bottom, mode)
    if record.is_zero:
        return np.array(img, copy=True), record
    np_mode = "reflect" if mode == "reflect" else "constant"
    return np.pad(img, ((0, pad_right), (0, pad_bottom)), mode=np_mode), record


def crop_padding(img, pad):
    """Remove the padding described by a PadRecord."""
    h, w = img.shape[-2:]
    return img[..., : h - pad.pad_right, : w - pad.pad_bottom]


def pad_stack(stack, multiple, mode="reflect"):
    """Pad every section of a stack; all sections share one PadRecord."""
    if not stack.pad.is_zero:
        raise VolumeError("Stack is already padded")
    padded, record = [], None
    for section in stack.sections:
        out, record = pad_section(section, multiple, mode)
        padded.append(out)
    if record is None:
        record = PadRecord(mode=mode)
    return SectionStack(stack.axis, np.stack(padded).astype(np.float32), record)


def stack_sections(stack, target_shape):
    """Inverse of extract_sections: drop padding and rebuild the (X, Y, Z) volume."""
    x, y, z = target_shape
    expected = {
        SliceAxis.XY: (z, (x, y)),
        SliceAxis.XZ: (y, (x, z)),
        SliceAxis.YZ: (x, (y, z)),
    }[stack.axis]
    count, dims = expected
    if stack.count != count:
        raise VolumeError(f"{stack.axis.value} stack has {stack.count} sections, target shape needs {count}")
    if stack.content_shape != dims:
        raise VolumeError(
            f"{stack.axis.value} sections are {stack.content_shape} after pad removal, target shape needs {dims}"
        )
    sections = crop_padding(stack.sections, stack.pad)
    if stack.axis is SliceAxis.XY:
        data = np.moveaxis(sections, 0, 2)
    elif stack.axis is SliceAxis.XZ:
        data = np.moveaxis(sections, 0, 1)
    else:
        data = sections
    return Volume(data)


@dataclass(frozen=True)
class PatchSpec:
    size: tuple
    count_per_section: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.count_per_section < 1:
            raise VolumeError("count_per_section must be >= 1")
        if len(self.size) != 2 or min(self.size) < 1:
            raise VolumeError(f"Invalid patch size {self.size}")


def check_patch_fits(stack, spec):
    h, w = stack.section_shape
    ph, pw = spec.size
    if ph > h or pw > w:
        raise VolumeError(f"Patch {ph}x{pw} does not fit in {stack.axis.value} sections of {h}x{w}")


def sample_patches(stack, spec):
    """Endless stream of random patches, one epoch at a time.

    Every epoch visits the sections in a fresh random order and emits
    ``count_per_section`` patches from each, with corners drawn uniformly.
    """
    check_patch_fits(stack, spec)
    if stack.count == 0:
        raise VolumeError("Cannot sample patches from an empty stack")
    rng = np.random.default_rng(spec.rng_seed)
    h, w = stack.section_shape
    ph, pw = spec.size
    while True:
        for index in rng.permutation(stack.count):
            for _ in range(spec.count_per_section):
                i = int(rng.integers(0, h - ph + 1))
                j = int(rng.integers(0, w - pw + 1))
                yield stack.sections[index, i:i + ph, j:j + pw].copy()


def worker_samplers(stack, spec, n_workers):
    """Independent samplers for parallel loaders, seeded from the PatchSpec seed."""
    seeds = np.random.SeedSequence(spec.rng_seed).generate_state(n_workers)
    return [
        sample_patches(stack, PatchSpec(spec.size, spec.count_per_section, int(seed)))
        for seed in seeds
    ]


def dump_sections(stack, directory, prefix=None, limit=None):
    """Write sections as 8-bit PNG files for visual debugging."""
    os.makedirs(directory, exist_ok=True)
    prefix = prefix or stack.axis.value
    count = stack.count if limit is None else min(limit, stack.count)
    for k in range(count):
        image = Image.fromarray(quantize(stack.sections[k], 8))
        image.save(os.path.join(directory, f"{prefix}_{k + 1:04d}.png"))
    logger.info(f"Dumped {count} {stack.axis.value} sections to {directory}")
