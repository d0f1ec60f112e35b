"""Binary voxel masks, multi-channel volumes, grid geometry and OMV file I/O.

Arrays are indexed ``[x, y, z]``. The center of voxel ``(i, j, k)`` sits at
``((i + 0.5) * sx, (j + 0.5) * sy, (k + 0.5) * sz)`` in millimeters.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

AXES = {"x": 0, "y": 1, "z": 2}

OMV_MAGIC = "OMV1"
# Refuse headers describing more than 2**34 payload bytes.
OMV_MAX_BYTES = 1 << 34


class Spacing(NamedTuple):
    sx: float
    sy: float
    sz: float

    @classmethod
    def of(cls, value) -> "Spacing":
        sp = cls(*(float(v) for v in value))
        if not all(math.isfinite(v) and v > 0 for v in sp):
            raise ValueError(f"spacing components must be positive, got {tuple(sp)}")
        return sp

    @property
    def voxel_volume(self) -> float:
        return self.sx * self.sy * self.sz


class BoundingBox(NamedTuple):
    """Inclusive voxel index box."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))


class EmptyForegroundError(ValueError):
    pass


def axis_index(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis.lower()]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}") from None
    if axis in (0, 1, 2):
        return int(axis)
    raise ValueError(f"unknown axis {axis!r}")


def _dims3(size) -> tuple[int, int, int]:
    dims = tuple(int(s) for s in size)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {size!r}")
    return dims


@dataclass(frozen=True, eq=False)
class VoxelMask:
    """A binary 3D mask with physical spacing."""

    data: np.ndarray
    spacing: Spacing = Spacing(1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or 0 in data.shape:
            raise ValueError(f"mask data must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype != np.uint8:
            if data.dtype != bool and not np.isin(data, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            data = data.astype(np.uint8)
        elif data.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "VoxelMask":
        return cls(np.zeros(_dims3(dims), np.uint8), spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def is_empty(self) -> bool:
        return not self.data.any()

    def with_data(self, data) -> "VoxelMask":
        return VoxelMask(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, VoxelMask):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"VoxelMask(dims={self.dims}, spacing={tuple(self.spacing)}, count={self.count()})"


@dataclass(frozen=True, eq=False)
class MultiChannelVolume:
    """Channel-stacked volume of shape ``(C, nx, ny, nz)``.

    ``uint8`` values are either binary masks or small integer label maps; floating
    values are soft probabilities in [0, 1].
    """

    channels: tuple[str, ...]
    values: np.ndarray
    spacing: Spacing = Spacing(1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values)
        names = tuple(str(c) for c in self.channels)
        if values.ndim != 4 or 0 in values.shape:
            raise ValueError(f"volume values must have shape (C, nx, ny, nz), got {values.shape}")
        if len(names) != values.shape[0]:
            raise ValueError(f"{len(names)} channel names for {values.shape[0]} channels")
        if values.dtype == bool:
            values = values.astype(np.uint8)
        if values.dtype == np.uint8:
            pass
        elif np.issubdtype(values.dtype, np.floating):
            if values.size and (values.min() < 0 or values.max() > 1):
                raise ValueError("soft volume values must lie in [0, 1]")
        else:
            raise ValueError(f"unsupported value dtype {values.dtype}")
        values.setflags(write=False)
        object.__setattr__(self, "channels", names)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))

    @classmethod
    def from_masks(cls, names: Sequence[str], masks: Sequence[VoxelMask]) -> "MultiChannelVolume":
        if not masks:
            raise ValueError("at least one channel is required")
        dims, spacing = masks[0].dims, masks[0].spacing
        for m in masks:
            if m.dims != dims or m.spacing != spacing:
                raise ValueError("all channels must share dims and spacing")
        return cls(tuple(names), np.stack([m.data for m in masks]), spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape[1:]

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def is_soft(self) -> bool:
        return self.values.dtype != np.uint8

    def is_binary(self) -> bool:
        return not self.is_soft and self.values.max(initial=0) <= 1

    def index(self, name: str) -> int:
        try:
            return self.channels.index(name)
        except ValueError:
            raise KeyError(f"no channel named {name!r}") from None

    def channel(self, key) -> VoxelMask:
        i = self.index(key) if isinstance(key, str) else int(key)
        data = self.values[i]
        if self.is_soft:
            data = data >= 0.5
        return VoxelMask(data, self.spacing)

    def masks(self) -> list[VoxelMask]:
        return [self.channel(i) for i in range(self.n_channels)]

    def union(self) -> np.ndarray:
        if self.is_soft:
            return (self.values >= 0.5).any(axis=0)
        return self.values.any(axis=0)

    def __eq__(self, other):
        if not isinstance(other, MultiChannelVolume):
            return NotImplemented
        return (
            self.channels == other.channels
            and self.spacing == other.spacing
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return (
            f"MultiChannelVolume(channels={list(self.channels)}, dims={self.dims}, "
            f"spacing={tuple(self.spacing)}, dtype={self.values.dtype})"
        )


# ---------------------------------------------------------------------------
# geometry


def resample_nearest(mask: VoxelMask, target) -> VoxelMask:
    """Nearest-neighbor resampling onto a grid with spacing ``target``.

    Output dims are ``round(n * s / t)`` (at least 1). Each output voxel copies
    the input voxel whose center is nearest to its own center; exact ties go to
    the higher input index.
    """
    target = Spacing.of(target)
    idx = []
    for n, s, t in zip(mask.dims, mask.spacing, target):
        m = max(1, int(round(n * s / t)))
        src = np.floor((np.arange(m) + 0.5) * t / s).astype(np.intp)
        idx.append(np.clip(src, 0, n - 1))
    return VoxelMask(mask.data[np.ix_(*idx)], target)


def _center_offsets(n: int, size: int) -> tuple[int, int, int]:
    """(source start, dest start, length) for centering n voxels into size."""
    if size >= n:
        return 0, (size - n) // 2, n
    return (n - size) // 2, 0, size


def _pad_or_crop_array(data: np.ndarray, size) -> np.ndarray:
    size = _dims3(size)
    lead = data.shape[:-3]
    out = np.zeros(lead + size, dtype=data.dtype)
    src, dst = [Ellipsis], [Ellipsis]
    for n, s in zip(data.shape[-3:], size):
        a, b, length = _center_offsets(n, s)
        src.append(slice(a, a + length))
        dst.append(slice(b, b + length))
    out[tuple(dst)] = data[tuple(src)]
    return out


def pad_or_crop_center(mask: VoxelMask, size) -> VoxelMask:
    """Center ``mask`` in a grid of ``size``; surplus goes to the high side."""
    return VoxelMask(_pad_or_crop_array(mask.data, size), mask.spacing)


def pad_or_crop_volume(vol: MultiChannelVolume, size) -> MultiChannelVolume:
    return MultiChannelVolume(vol.channels, _pad_or_crop_array(vol.values, size), vol.spacing)


def crop_window(vol: MultiChannelVolume, size) -> tuple[tuple[int, int], ...]:
    """Per-axis ``(start, stop)`` of the crop centered on the foreground mass."""
    size = _dims3(size)
    fg = np.argwhere(vol.union())
    if len(fg) == 0:
        raise EmptyForegroundError("cannot locate the center of an empty foreground")
    center = np.floor(fg.mean(axis=0)).astype(int)
    window = []
    for c, n, s in zip(center, vol.dims, size):
        if s >= n:
            window.append((0, n))
            continue
        start = min(max(int(c) - s // 2, 0), n - s)
        window.append((start, start + s))
    return tuple(window)


def crop_about_foreground_com(vol: MultiChannelVolume, size) -> MultiChannelVolume:
    """Crop a window of ``size`` around the union foreground's center of mass.

    The window is clamped to stay inside the volume. Axes where ``size`` exceeds
    the volume are zero-padded centrally instead.
    """
    size = _dims3(size)
    window = crop_window(vol, size)
    cropped = vol.values[(slice(None),) + tuple(slice(a, b) for a, b in window)]
    if cropped.shape[1:] != size:
        cropped = _pad_or_crop_array(cropped, size)
    return MultiChannelVolume(vol.channels, cropped, vol.spacing)


def flip_axis(vol: MultiChannelVolume, axis, channel_swap_pairs=()) -> MultiChannelVolume:
    """Mirror along ``axis`` and exchange the listed channel pairs."""
    ax = axis_index(axis)
    order = list(range(vol.n_channels))
    seen = set()
    for a, b in channel_swap_pairs:
        a = vol.index(a) if isinstance(a, str) else int(a)
        b = vol.index(b) if isinstance(b, str) else int(b)
        for i in (a, b):
            if not 0 <= i < vol.n_channels:
                raise IndexError(f"channel index {i} out of range")
            if i in seen:
                raise ValueError(f"channel {i} appears in more than one swap pair")
            seen.add(i)
        order[a], order[b] = b, a
    values = np.flip(vol.values, axis=ax + 1)[order]
    return MultiChannelVolume(vol.channels, np.ascontiguousarray(values), vol.spacing)


def flip_mask(mask: VoxelMask, axis) -> VoxelMask:
    return VoxelMask(np.ascontiguousarray(np.flip(mask.data, axis=axis_index(axis))), mask.spacing)


def rotation_matrix(axis, degrees: float) -> np.ndarray:
    """Right-handed rotation about a coordinate axis."""
    ax = axis_index(axis)
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    i, j = [(1, 2), (2, 0), (0, 1)][ax]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def rotate_mask(mask: VoxelMask, axis, degrees: float) -> VoxelMask:
    """Rotate about the grid's physical center with nearest-neighbor lookup.

    Output voxels whose pre-image falls outside the grid become 0.
    """
    if degrees % 360 == 0:
        return mask
    sp = np.asarray(mask.spacing)
    dims = np.asarray(mask.dims)
    center = dims * sp / 2.0
    grids = np.meshgrid(*(np.arange(n) for n in mask.dims), indexing="ij")
    pts = np.stack([(g.ravel() + 0.5) * s for g, s in zip(grids, sp)], axis=1) - center
    # Inverse rotation maps output centers back to source positions.
    src = pts @ rotation_matrix(axis, degrees) + center
    idx = np.floor(src / sp).astype(np.intp)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.zeros(idx.shape[0], np.uint8)
    ii = idx[inside]
    out[inside] = mask.data[ii[:, 0], ii[:, 1], ii[:, 2]]
    return VoxelMask(out.reshape(mask.dims), mask.spacing)


def center_of_mass(mask: VoxelMask) -> np.ndarray:
    """Mean foreground voxel center in millimeters."""
    fg = np.argwhere(mask.data)
    if len(fg) == 0:
        raise EmptyForegroundError("center of mass of an empty mask")
    return (fg.mean(axis=0) + 0.5) * np.asarray(mask.spacing)


def tight_bounding_box(mask: VoxelMask) -> BoundingBox:
    fg = np.argwhere(mask.data)
    if len(fg) == 0:
        raise EmptyForegroundError("bounding box of an empty mask")
    return BoundingBox(tuple(int(v) for v in fg.min(axis=0)), tuple(int(v) for v in fg.max(axis=0)))


# ---------------------------------------------------------------------------
# OMV files


class OmvFormatError(ValueError):
    pass


class OmvMagicError(OmvFormatError):
    pass


class OmvTruncatedError(OmvFormatError):
    pass


class OmvDimensionError(OmvFormatError):
    pass


def _fmt_float(v: float) -> str:
    return repr(float(v))


def omv_bytes(vol: MultiChannelVolume) -> bytes:
    for name in vol.channels:
        if not name or any(ch in name for ch in ",\n\r") or name != name.strip():
            raise ValueError(f"channel name {name!r} cannot be stored in an OMV header")
    nx, ny, nz = vol.dims
    if vol.is_soft:
        encoding = "u8soft"
        payload = np.rint(np.asarray(vol.values, np.float64) * 255.0).astype(np.uint8)
    else:
        encoding = "u8"
        payload = vol.values
    header = (
        f"{OMV_MAGIC} {nx} {ny} {nz} {vol.n_channels}\n"
        f"spacing {' '.join(_fmt_float(s) for s in vol.spacing)}\n"
        f"channels {','.join(vol.channels)}\n"
        f"encoding {encoding}\n"
        "\n"
    )
    # channel-major, x fastest within a channel
    body = b"".join(np.asarray(ch).tobytes(order="F") for ch in payload)
    return header.encode("ascii") + body


def write_omv(vol: MultiChannelVolume, path) -> None:
    data = omv_bytes(vol)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_omv(raw: bytes) -> MultiChannelVolume:
    lines = []
    pos = 0
    for _ in range(5):
        end = raw.find(b"\n", pos)
        if end < 0:
            if not lines or not lines[0].startswith(OMV_MAGIC):
                raise OmvMagicError("missing OMV1 magic")
            raise OmvTruncatedError("header ends prematurely")
        lines.append(raw[pos:end].decode("ascii", errors="replace"))
        pos = end + 1
    first = lines[0].split()
    if not first or first[0] != OMV_MAGIC:
        raise OmvMagicError(f"expected {OMV_MAGIC!r} magic, found {lines[0][:16]!r}")
    try:
        nx, ny, nz, nc = (int(v) for v in first[1:])
        key, *sp = lines[1].split()
        if key != "spacing" or len(sp) != 3:
            raise ValueError(lines[1])
        spacing = tuple(float(v) for v in sp)
        key, _, names = lines[2].partition(" ")
        if key != "channels":
            raise ValueError(lines[2])
        key, _, encoding = lines[3].partition(" ")
        if key != "encoding" or encoding not in ("u8", "u8soft"):
            raise ValueError(lines[3])
        if lines[4] != "":
            raise ValueError("missing blank separator line")
    except ValueError as exc:
        raise OmvFormatError(f"malformed OMV header: {exc}") from None
    if min(nx, ny, nz, nc) <= 0:
        raise OmvDimensionError(f"non-positive dimensions {(nx, ny, nz, nc)}")
    total = nx * ny * nz * nc
    if total > OMV_MAX_BYTES:
        raise OmvDimensionError(f"dimensions {(nx, ny, nz, nc)} overflow the payload limit")
    channels = tuple(names.split(","))
    if len(channels) != nc:
        raise OmvFormatError(f"{len(channels)} channel names for C={nc}")
    body = raw[pos:]
    if len(body) < total:
        raise OmvTruncatedError(f"payload has {len(body)} bytes, expected {total}")
    if len(body) > total:
        raise OmvFormatError(f"payload has {len(body) - total} trailing bytes")
    values = np.frombuffer(body, np.uint8).reshape((nc, nz, ny, nx)).transpose(0, 3, 2, 1)
    values = np.ascontiguousarray(values)
    if encoding == "u8soft":
        values = values.astype(np.float32) / np.float32(255.0)
    return MultiChannelVolume(channels, values, spacing)


def read_omv(path) -> MultiChannelVolume:
    with open(path, "rb") as fh:
        return parse_omv(fh.read())
