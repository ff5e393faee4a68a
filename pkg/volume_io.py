import os
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tifffile
from dotenv import dotenv_values

logger = logging.getLogger(__name__)

SUPPORTED_BIT_DEPTHS = (8, 16)
FORMATS = ("tiff_stack", "raw")


class VolumeError(ValueError):
    """Raised for malformed volumes, bad ranges and unreadable volume files."""


@dataclass(frozen=True, eq=False)
class Volume:
    """3D grayscale voxel grid indexed (x, y, z), intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise VolumeError(f"Volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise VolumeError(f"Volume shape components must be >= 1, got {self.data.shape}")
        data = np.array(self.data, dtype=np.float32, copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return tuple(int(n) for n in self.data.shape)

    @classmethod
    def from_array(cls, array, clip=True):
        """Build a volume from any numeric array, clipping into [0, 1]."""
        array = np.asarray(array, dtype=np.float32)
        if clip:
            array = np.clip(array, 0.0, 1.0)
        elif array.size and (array.min() < 0.0 or array.max() > 1.0):
            raise VolumeError("Voxel values must lie in [0, 1]")
        return cls(array)


@dataclass(frozen=True)
class SubvolumeRange:
    """1-based inclusive bounds per axis: x=(r_i, r_f), y=(q_i, q_f), z=(p_i, p_f)."""

    x: tuple
    y: tuple
    z: tuple

    @classmethod
    def parse(cls, text):
        """Parse 'r_i:r_f,q_i:q_f,p_i:p_f' as written in experiment configs."""
        try:
            parts = [p.strip() for p in text.split(",")]
            if len(parts) != 3:
                raise ValueError
            bounds = []
            for part in parts:
                lo, hi = part.split(":")
                bounds.append((int(lo), int(hi)))
        except ValueError:
            raise VolumeError(f"Invalid subvolume range '{text}', expected 'a:b,c:d,e:f'")
        return cls(*bounds)

    @classmethod
    def full(cls, shape):
        return cls((1, shape[0]), (1, shape[1]), (1, shape[2]))

    def bounds(self):
        return (self.x, self.y, self.z)

    def shape(self):
        return tuple(hi - lo + 1 for lo, hi in self.bounds())

    def validate(self, shape):
        """Raise VolumeError unless 1 <= lo <= hi <= extent on every axis."""
        for name, (lo, hi), extent in zip("xyz", self.bounds(), shape):
            if lo > hi:
                raise VolumeError(f"Inverted {name} bounds {lo}:{hi}")
            if lo < 1 or hi > extent:
                raise VolumeError(f"{name} bounds {lo}:{hi} outside 1:{extent}")

    def __str__(self):
        return ",".join(f"{lo}:{hi}" for lo, hi in self.bounds())


@dataclass(frozen=True)
class DatasetSplit:
    """Ranges of the blurred, clean and test subvolumes."""

    blurred_range: SubvolumeRange
    clean_range: SubvolumeRange
    test_range: SubvolumeRange

    def validate(self, shape):
        for r in (self.blurred_range, self.clean_range, self.test_range):
            r.validate(shape)
        b_lo, b_hi = self.blurred_range.z
        c_lo, c_hi = self.clean_range.z
        if b_lo <= c_hi and c_lo <= b_hi:
            raise VolumeError(
                f"Blurred z range {b_lo}:{b_hi} overlaps clean z range {c_lo}:{c_hi}"
            )


def _infer_format(path):
    suffix = Path(path).suffix.lower()
    if suffix in (".tif", ".tiff"):
        return "tiff_stack"
    if suffix in (".raw", ".bin"):
        return "raw"
    raise VolumeError(f"Cannot infer volume format from '{path}'")


def sidecar_path(path):
    """Metadata file accompanying a raw payload."""
    return Path(f"{path}.meta")


def _scale_integers(pages, bits):
    if bits not in SUPPORTED_BIT_DEPTHS:
        raise VolumeError(f"Unsupported bit depth {bits}; only 8 and 16 are accepted")
    return pages.astype(np.float32) / float(2 ** bits - 1)


def load_volume(path, format=None):
    """Load a volume from a multi-page TIFF or a raw payload with a .meta sidecar."""
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"Volume file not found: {path}")
    format = format or _infer_format(path)

    if format == "tiff_stack":
        pages = tifffile.imread(path)
        if pages.ndim == 2:
            pages = pages[np.newaxis]
        if pages.ndim != 3:
            raise VolumeError(f"Expected a grayscale page stack, got array of shape {pages.shape}")
        if pages.dtype == np.uint8:
            bits = 8
        elif pages.dtype == np.uint16:
            bits = 16
        else:
            raise VolumeError(f"Unsupported TIFF sample type {pages.dtype}; only 8 and 16 bit accepted")
    elif format == "raw":
        meta_file = sidecar_path(path)
        if not meta_file.exists():
            raise VolumeError(f"Raw volume metadata not found: {meta_file}")
        meta = dotenv_values(meta_file)
        try:
            width, height, depth = int(meta["width"]), int(meta["height"]), int(meta["depth"])
            bits = int(meta["bits"])
        except (KeyError, TypeError, ValueError) as e:
            raise VolumeError(f"Incomplete raw metadata in {meta_file}: {e}")
        if (meta.get("byte_order") or "little") != "little":
            raise VolumeError("Only little-endian raw payloads are supported")
        if bits not in SUPPORTED_BIT_DEPTHS:
            raise VolumeError(f"Unsupported bit depth {bits}; only 8 and 16 are accepted")
        dtype = np.dtype("<u1") if bits == 8 else np.dtype("<u2")
        payload = np.fromfile(path, dtype=dtype)
        expected = width * height * depth
        if payload.size != expected:
            raise VolumeError(
                f"Raw payload has {payload.size} samples, metadata declares {width}x{height}x{depth}={expected}"
            )
        pages = payload.reshape(depth, width, height)
    else:
        raise VolumeError(f"Unknown volume format '{format}'")

    data = _scale_integers(pages, bits)
    volume = Volume(np.moveaxis(data, 0, 2))
    logger.info(f"Loaded {format} volume {path} shape={volume.shape} bits={bits}")
    return volume


def probe_shape(path, format=None):
    """(X, Y, Z) of a volume file, read from its header or sidecar only."""
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"Volume file not found: {path}")
    format = format or _infer_format(path)
    if format == "tiff_stack":
        try:
            with tifffile.TiffFile(path) as tif:
                shape = tif.series[0].shape
        except Exception as e:
            raise VolumeError(f"Unreadable TIFF {path}: {e}")
        if len(shape) == 2:
            shape = (1,) + tuple(shape)
        if len(shape) != 3:
            raise VolumeError(f"Expected a grayscale page stack, got pages of shape {shape}")
        depth, x, y = shape
        return int(x), int(y), int(depth)
    if format == "raw":
        meta = dotenv_values(sidecar_path(path))
        try:
            return int(meta["width"]), int(meta["height"]), int(meta["depth"])
        except (KeyError, TypeError, ValueError) as e:
            raise VolumeError(f"Incomplete raw metadata for {path}: {e}")
    raise VolumeError(f"Unknown volume format '{format}'")


def quantize(data, bit_depth):
    """Round-half-up quantization of [0, 1] intensities to unsigned integers."""
    if bit_depth not in SUPPORTED_BIT_DEPTHS:
        raise VolumeError(f"Unsupported bit depth {bit_depth}; only 8 and 16 are accepted")
    top = 2 ** bit_depth - 1
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    scaled = np.floor(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0) * top + 0.5)
    return scaled.astype(dtype)


def save_volume(volume, path, format=None, bit_depth=8, compress=False):
    """Write xy pages ordered by z, quantized to bit_depth."""
    path = Path(path)
    format = format or _infer_format(path)
    pages = np.ascontiguousarray(np.moveaxis(quantize(volume.data, bit_depth), 2, 0))
    os.makedirs(path.parent, exist_ok=True)
    try:
        if format == "tiff_stack":
            tifffile.imwrite(
                path, pages, photometric="minisblack", compression="zlib" if compress else None
            )
        elif format == "raw":
            pages.astype(pages.dtype.newbyteorder("<")).tofile(path)
            x, y, z = volume.shape
            with open(sidecar_path(path), "w") as f:
                f.write(f"width={x}\nheight={y}\ndepth={z}\nbits={bit_depth}\nbyte_order=little\n")
        else:
            raise VolumeError(f"Unknown volume format '{format}'")
    except OSError as e:
        raise VolumeError(f"Failed to write volume to {path}: {e}")
    logger.info(f"Saved volume {path} shape={volume.shape} bits={bit_depth}")


def crop_subvolume(volume, r):
    """Crop I_(r_i:r_f, q_i:q_f, p_i:p_f) using 1-based inclusive bounds."""
    r.validate(volume.shape)
    (xi, xf), (yi, yf), (zi, zf) = r.bounds()
    return Volume(volume.data[xi - 1:xf, yi - 1:yf, zi - 1:zf])


def split_training_volumes(volume, split):
    """Return copies of the (blurred, clean, test) subvolumes for the given split."""
    split.validate(volume.shape)
    blurred = crop_subvolume(volume, split.blurred_range)
    clean = crop_subvolume(volume, split.clean_range)
    test = crop_subvolume(volume, split.test_range)
    logger.info(f"Split volume {volume.shape} into blurred={blurred.shape} clean={clean.shape} test={test.shape}")
    return blurred, clean, test
