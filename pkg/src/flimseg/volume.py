"""Multi-channel 3D volumes and the MVOL1 file format.

A volume is a (C, Z, Y, X) float32 grid with voxel spacing in mm. Every
module in the package exchanges image data through this type or through
MVOL1 files: one UTF-8 JSON header line followed by the raw little-endian
float32 payload in C-order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

MAGIC = "MVOL1"
AXES = ("z", "y", "x")


class MvolError(ValueError):
    """Malformed, truncated, or otherwise unreadable MVOL1 file."""


def _as_f32(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("volume data contains non-finite values")
    return arr


@dataclass(frozen=True)
class Volume:
    """Immutable multi-channel 3D volume, data shape (C, Z, Y, X)."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = _as_f32(self.data)
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise ValueError(f"expected (C, Z, Y, X) data, got shape {arr.shape}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing_mm must be 3 positive reals, got {self.spacing_mm}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass(frozen=True)
class LabelVolume:
    """Integer label grid of shape (Z, Y, X), values in {0=BG, 1=ED, 2=ET, 3=NC}."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"expected (Z, Y, X) labels, got shape {arr.shape}")
        if arr.dtype.kind == "f":
            rounded = np.rint(arr)
            if not np.array_equal(rounded, arr):
                raise ValueError("label volume holds non-integral values")
            arr = rounded
        arr = arr.astype(np.uint8, copy=False)
        if arr.size and arr.max() > 3:
            raise ValueError("labels must lie in {0, 1, 2, 3}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape


def write_volume(vol: Volume, path) -> None:
    """Write an MVOL1 file: JSON header line + raw f32le payload."""
    header = {
        "magic": MAGIC,
        "shape": [int(s) for s in vol.data.shape],
        "dtype": "f32le",
        "spacing_mm": [float(s) for s in vol.spacing_mm],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(vol.data.astype("<f4", copy=False).tobytes(order="C"))


def read_volume(path) -> Volume:
    """Read an MVOL1 file; byte-identical round trip with write_volume."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MvolError(f"{path}: malformed MVOL1 header: {exc}") from exc
        if not isinstance(header, dict) or header.get("magic") != MAGIC:
            raise MvolError(f"{path}: missing MVOL1 magic")
        if header.get("dtype") != "f32le":
            raise MvolError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        shape = header.get("shape")
        if (
            not isinstance(shape, list)
            or len(shape) != 4
            or any(not isinstance(s, int) or s < 1 for s in shape)
        ):
            raise MvolError(f"{path}: bad shape field {shape!r}")
        spacing = header.get("spacing_mm", [1.0, 1.0, 1.0])
        count = int(np.prod(shape))
        payload = fh.read()
    if len(payload) != 4 * count:
        raise MvolError(
            f"{path}: payload holds {len(payload) // 4} values, header declares {count}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if not np.all(np.isfinite(data)):
        raise MvolError(f"{path}: payload contains non-finite values")
    return Volume(data=data, spacing_mm=tuple(spacing))


def write_labels(labels: LabelVolume, path) -> None:
    """Store labels as a 1-channel MVOL1 with integral float values."""
    vol = Volume(
        data=labels.data.astype(np.float32)[np.newaxis],
        spacing_mm=labels.spacing_mm,
    )
    write_volume(vol, path)


def read_labels(path) -> LabelVolume:
    vol = read_volume(path)
    if vol.channels != 1:
        raise MvolError(f"{path}: label volume must have a single channel")
    return LabelVolume(data=vol.data[0], spacing_mm=vol.spacing_mm)


def slice2d(vol: Volume, axis: str, index: int, channel: int = 0) -> np.ndarray:
    """Copy one 2D slice of a channel; axis is one of 'z', 'y', 'x'."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    if not 0 <= channel < vol.channels:
        raise IndexError(f"channel {channel} out of range for C={vol.channels}")
    ax = AXES.index(axis)
    extent = vol.spatial_shape[ax]
    if not 0 <= index < extent:
        raise IndexError(f"index {index} out of range for {axis}-extent {extent}")
    chan = vol.data[channel]
    if axis == "z":
        plane = chan[index, :, :]
    elif axis == "y":
        plane = chan[:, index, :]
    else:
        plane = chan[:, :, index]
    return np.array(plane, copy=True)
