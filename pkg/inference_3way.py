"""Per-axis restoration of a test volume and voxelwise weighted fusion of the three results."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from networks import GeneratorArch
from sectioning import (
    ALL_AXES,
    PadRecord,
    SectionStack,
    SliceAxis,
    crop_padding,
    extract_sections,
    pad_section,
    padded_size,
    stack_sections,
)
from spcyclegan_core import CheckpointError, SpCycleGanModels
from volume_io import Volume

logger = logging.getLogger(__name__)

# Smallest side the default two-downsampling generator accepts with reflect padding.
MIN_GENERATOR_INPUT = 8


@dataclass(frozen=True)
class FusionWeights:
    """Weights of the xy, xz and yz restorations; normalized to sum to 1."""

    w1: float = 1.0 / 3.0
    w2: float = 1.0 / 3.0
    w3: float = 1.0 / 3.0

    def __post_init__(self):
        weights = (float(self.w1), float(self.w2), float(self.w3))
        if any(w < 0 for w in weights):
            raise ValueError(f"Fusion weights must be nonnegative, got {weights}")
        total = sum(weights)
        if total == 0:
            raise ValueError("Fusion weights must not all be zero")
        object.__setattr__(self, "w1", weights[0] / total)
        object.__setattr__(self, "w2", weights[1] / total)
        object.__setattr__(self, "w3", weights[2] / total)

    @classmethod
    def parse(cls, text):
        try:
            parts = [float(p) for p in str(text).split(",")]
        except ValueError:
            raise ValueError(f"Invalid fusion weights '{text}', expected 'w1,w2,w3'")
        if len(parts) != 3:
            raise ValueError(f"Invalid fusion weights '{text}', expected three values")
        return cls(*parts)

    def by_axis(self):
        return {SliceAxis.XY: self.w1, SliceAxis.XZ: self.w2, SliceAxis.YZ: self.w3}

    def enabled_axes(self):
        return [axis for axis, w in self.by_axis().items() if w > 0]

    def __str__(self):
        return f"{self.w1:g},{self.w2:g},{self.w3:g}"


@dataclass(frozen=True)
class TileSpec:
    size: int
    overlap: int = 32

    def __post_init__(self):
        if self.overlap < 0 or self.overlap >= self.size:
            raise ValueError(f"Tile overlap {self.overlap} must lie in [0, {self.size})")


@dataclass(frozen=True, eq=False)
class AxisGenerator:
    """A restoring generator tagged with the axis it was trained on."""

    module: nn.Module
    axis: SliceAxis = None
    arch: GeneratorArch = None

    @classmethod
    def from_models(cls, models):
        return cls(models.G_AB, models.axis, models.generator_arch)


def _resolve_generator(generator):
    if isinstance(generator, SpCycleGanModels):
        generator = AxisGenerator.from_models(generator)
    elif isinstance(generator, nn.Module):
        generator = AxisGenerator(generator)
    generator.module.eval()
    return generator


def _module_dtype(module):
    # Parameterless generators run in float64 so the [-1, 1] round trip is exact.
    for param in module.parameters():
        return param.dtype
    return torch.float64


def _pad_for_generator(img, multiple, mode):
    h, w = img.shape
    target_h = max(padded_size(h, multiple), padded_size(MIN_GENERATOR_INPUT, multiple)) if multiple > 1 else h
    target_w = max(padded_size(w, multiple), padded_size(MIN_GENERATOR_INPUT, multiple)) if multiple > 1 else w
    pad_right, pad_bottom = target_h - h, target_w - w
    if mode == "reflect" and (pad_right >= h or pad_bottom >= w):
        mode = "zero"
    if target_h == padded_size(h, multiple) and target_w == padded_size(w, multiple):
        return pad_section(img, multiple, mode)
    record = PadRecord(pad_right, pad_bottom, mode)
    np_mode = "reflect" if mode == "reflect" else "constant"
    return np.pad(img, ((0, pad_right), (0, pad_bottom)), mode=np_mode), record


def _run_generator(module, sections):
    """[0, 1] (n, h, w) sections through the generator, returned as clipped [0, 1] float64."""
    dtype = _module_dtype(module)
    device = next((p.device for p in module.parameters()), torch.device("cpu"))
    batch = torch.from_numpy(np.asarray(sections, dtype=np.float64)).to(device=device, dtype=dtype)
    with torch.no_grad():
        out = module(batch.unsqueeze(1) * 2.0 - 1.0)
    out = (out.squeeze(1).to(dtype=torch.float64).cpu().numpy() + 1.0) / 2.0
    return np.clip(out, 0.0, 1.0)


def _restore_padded(module, sections, multiple, pad_mode):
    padded, records = [], []
    for section in sections:
        out, record = _pad_for_generator(section, multiple, pad_mode)
        padded.append(out)
        records.append(record)
    restored = _run_generator(module, np.stack(padded))
    return [crop_padding(r, record) for r, record in zip(restored, records)]


def _tile_starts(n, size, overlap):
    if n <= size:
        return [0]
    step = size - overlap
    starts = list(range(0, n - size, step))
    starts.append(n - size)
    return starts


def _feather(length, overlap, lead, trail):
    ramp = np.ones(length, dtype=np.float64)
    if overlap > 0:
        edge = np.arange(1, overlap + 1, dtype=np.float64) / (overlap + 1)
        if lead:
            ramp[:overlap] = np.minimum(ramp[:overlap], edge)
        if trail:
            ramp[-overlap:] = np.minimum(ramp[-overlap:], edge[::-1])
    return ramp


def _restore_tiled(module, section, multiple, pad_mode, tile):
    h, w = section.shape
    rows = _tile_starts(h, tile.size, tile.overlap)
    cols = _tile_starts(w, tile.size, tile.overlap)
    acc = np.zeros((h, w), dtype=np.float64)
    weight = np.zeros((h, w), dtype=np.float64)
    for ri, i in enumerate(rows):
        th = min(tile.size, h)
        ramp_u = _feather(th, tile.overlap, ri > 0, ri < len(rows) - 1)
        for ci, j in enumerate(cols):
            tw = min(tile.size, w)
            ramp_v = _feather(tw, tile.overlap, ci > 0, ci < len(cols) - 1)
            mask = np.outer(ramp_u, ramp_v)
            out = _restore_padded(module, [section[i:i + th, j:j + tw]], multiple, pad_mode)[0]
            acc[i:i + th, j:j + tw] += mask * out
            weight[i:i + th, j:j + tw] += mask
    return acc / weight


def restore_sections(generator, stack, pad_mode="reflect", batch_size=4, tile=None, workers=1):
    """Restore every section of a stack; the output has the input's geometry.

    Sections are padded to the generator's size multiple (zero padding when a
    reflect pad would not fit), mapped through the generator in [-1, 1] and
    cropped back.
    """
    gen = _resolve_generator(generator)
    if gen.axis is not None and gen.axis != stack.axis:
        raise CheckpointError(
            f"Generator trained on {gen.axis.value} sections cannot restore {stack.axis.value} sections"
        )
    multiple = (gen.arch or GeneratorArch()).size_multiple
    if gen.arch is None and not list(gen.module.parameters()):
        multiple = 1
    sections = stack.sections

    use_tiles = tile is not None and max(stack.section_shape) > tile.size
    if use_tiles:
        chunks = [[k] for k in range(stack.count)]
    else:
        chunks = [list(range(k, min(k + batch_size, stack.count))) for k in range(0, stack.count, batch_size)]

    def work(indices):
        if use_tiles:
            return [_restore_tiled(gen.module, sections[indices[0]], multiple, pad_mode, tile)]
        return _restore_padded(gen.module, sections[indices], multiple, pad_mode)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(work, chunks))
    else:
        results = [work(chunk) for chunk in chunks]

    restored = np.stack([section for chunk in results for section in chunk]).astype(np.float32)
    return SectionStack(stack.axis, restored, stack.pad)


def restore_volume_axis(generator, volume, axis, **kwargs):
    """Slice along one axis, restore every section and restack into a volume of the same shape."""
    stack = extract_sections(volume, axis)
    restored = restore_sections(generator, stack, **kwargs)
    out = stack_sections(restored, volume.shape)
    logger.info(f"Restored {axis.value} sections of volume {volume.shape}")
    return out


def _zero_pad_to(data, shape):
    pads = [(0, target - n) for n, target in zip(data.shape, shape)]
    if not any(p for _, p in pads):
        return data
    return np.pad(data, pads, mode="constant")


def fuse_volumes(v_xy, v_xz, v_yz, weights=None):
    """Voxelwise convex combination w1*v_xy + w2*v_xz + w3*v_yz.

    Volumes of unequal shape are zero padded to their common bounding shape first.
    """
    weights = weights or FusionWeights()
    volumes = (v_xy, v_xz, v_yz)
    shape = tuple(max(v.shape[d] for v in volumes) for d in range(3))
    if any(v.shape != shape for v in volumes):
        logger.warning(f"Fusing volumes of shapes {[v.shape for v in volumes]}; zero padding to {shape}")
    fused = np.zeros(shape, dtype=np.float64)
    for volume, w in zip(volumes, (weights.w1, weights.w2, weights.w3)):
        if w == 0:
            continue
        fused += w * _zero_pad_to(volume.data.astype(np.float64), shape)
    return Volume(np.clip(fused, 0.0, 1.0).astype(np.float32))


def restore_volume_3way(generators_by_axis, volume, weights=None, workers=3, **kwargs):
    """Restore along every axis with nonzero weight, concurrently, and fuse.

    Returns (fused volume, {axis: restored volume}).
    """
    weights = weights or FusionWeights()
    axes = weights.enabled_axes()
    missing = [axis.value for axis in axes if generators_by_axis.get(axis) is None]
    if missing:
        raise CheckpointError(f"No generator for axes {missing} with nonzero fusion weight")

    def run(axis):
        return axis, restore_volume_axis(generators_by_axis[axis], volume, axis, **kwargs)

    if workers > 1 and len(axes) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(axes))) as executor:
            restored = dict(executor.map(run, axes))
    else:
        restored = dict(run(axis) for axis in axes)

    blank = None
    parts = []
    for axis in ALL_AXES:
        if axis in restored:
            parts.append(restored[axis])
        else:
            if blank is None:
                blank = Volume(np.zeros(volume.shape, dtype=np.float32))
            parts.append(blank)
    fused = fuse_volumes(*parts, weights)
    logger.info(f"Fused {[a.value for a in axes]} restorations with weights ({weights})")
    return fused, restored

