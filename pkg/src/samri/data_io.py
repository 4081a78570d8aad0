"""Volume IO (minimal NIfTI-1 + native raw format), phantoms, slice extraction."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CompressedNotSupported,
    DimMismatch,
    SpecInfeasible,
    TruncatedFile,
    UnsupportedDatatype,
    UnsupportedDim,
    ValueOutOfRange,
)
from .rng import stream_rng

HEADER_SIZE = 348
VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: "u1", DT_INT16: "i2", DT_FLOAT32: "f4"}
_BITPIX = {DT_UINT8: 8, DT_INT16: 16, DT_FLOAT32: 32}


# ------------------------------------------------------------------- types

@dataclass
class Volume:
    """3-d scalar grid; voxels indexed [x, y, z], C-order, float32."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise DimMismatch(f"volume must be 3-d, got {self.voxels.shape}")
        if any(d <= 0 for d in self.voxels.shape):
            raise DimMismatch(f"non-positive dims {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"non-positive spacing {self.spacing}")
        if not np.isfinite(self.voxels).all():
            raise ValueError("volume contains non-finite voxels")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class LabelVolume:
    """Integer label grid paired with a Volume; 0 = background."""

    labels: np.ndarray
    target_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        if self.labels.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")
        present = set(np.unique(self.labels).tolist()) - {0}
        missing = present - set(self.target_names)
        if missing:
            raise ValueError(f"labels {sorted(missing)} missing from target_names")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    byteswapped: bool


@dataclass(frozen=True)
class SliceRecord:
    image: np.ndarray  # 2-d float32
    label: np.ndarray  # 2-d integer
    axis: int
    index: int


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round halves away from zero (np.round would round halves to even)."""
    values = np.asarray(values, dtype=np.float64)
    return np.where(values >= 0, np.floor(values + 0.5), np.ceil(values - 0.5))


# ------------------------------------------------------------------- NIfTI

def _parse_header(data: bytes) -> NiftiHeader:
    if len(data) >= 2 and data[0] == 0x1F and data[1] == 0x8B:
        raise CompressedNotSupported("gzip input; decompress to a plain .nii first")
    if len(data) < VOX_OFFSET:
        raise TruncatedFile(f"need at least {VOX_OFFSET} bytes, got {len(data)}")
    (sizeof_le,) = struct.unpack_from("<i", data, 0)
    if sizeof_le == HEADER_SIZE:
        endian, swapped = "<", False
    else:
        (sizeof_be,) = struct.unpack_from(">i", data, 0)
        if sizeof_be != HEADER_SIZE:
            raise BadMagic(f"sizeof_hdr {sizeof_le} is not 348 in either byte order")
        endian, swapped = ">", True
    magic = data[344:348]
    if magic != NIFTI_MAGIC:
        raise BadMagic(f"magic {magic!r} is not {NIFTI_MAGIC!r}")
    dim = struct.unpack_from(f"{endian}8h", data, 40)
    (datatype, bitpix) = struct.unpack_from(f"{endian}2h", data, 70)
    pixdim = struct.unpack_from(f"{endian}8f", data, 76)
    (vox_offset, scl_slope, scl_inter) = struct.unpack_from(f"{endian}3f", data, 108)
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} not in {sorted(_DTYPES)}")
    if dim[0] > 3 or dim[0] < 1:
        raise UnsupportedDim(f"dim[0]={dim[0]}; only 1..3 spatial dims supported")
    if vox_offset < VOX_OFFSET:
        raise BadMagic(f"vox_offset {vox_offset} below minimum {VOX_OFFSET}")
    return NiftiHeader(HEADER_SIZE, dim, datatype, bitpix, pixdim,
                       vox_offset, scl_slope, scl_inter, magic, swapped)


def read_nifti(data: bytes) -> tuple[Volume, LabelVolume | None]:
    """Parse an uncompressed NIfTI-1 blob.

    Returns the volume plus, for unscaled integer datatypes, the same grid
    reinterpreted as labels (None otherwise).
    """
    hdr = _parse_header(data)
    ndim = hdr.dim[0]
    dims = tuple(hdr.dim[1 : 1 + ndim]) + (1,) * (3 - ndim)
    if any(d <= 0 for d in dims):
        raise UnsupportedDim(f"non-positive extent in dim {hdr.dim[:4]}")
    endian = ">" if hdr.byteswapped else "<"
    dtype = np.dtype(endian + _DTYPES[hdr.datatype])
    count = int(np.prod(dims))
    offset = int(hdr.vox_offset)
    if len(data) < offset + count * dtype.itemsize:
        raise TruncatedFile(
            f"voxel payload truncated: need {offset + count * dtype.itemsize} bytes, "
            f"got {len(data)}")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    # on disk x varies fastest; in memory we index [x, y, z] C-order
    grid = raw.reshape(dims[::-1]).transpose(2, 1, 0)
    scaled = hdr.scl_slope != 0.0 and not (hdr.scl_slope == 1.0 and hdr.scl_inter == 0.0)
    if scaled:
        voxels = (grid.astype(np.float64) * hdr.scl_slope + hdr.scl_inter).astype(np.float32)
    else:
        voxels = grid.astype(np.float32)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in hdr.pixdim[1:4])
    volume = Volume(np.ascontiguousarray(voxels), spacing, source="nifti")
    labels = None
    if hdr.datatype in (DT_UINT8, DT_INT16) and not scaled and grid.min() >= 0:
        ids = grid.astype(np.int32)
        names = {int(k): f"target_{int(k)}" for k in np.unique(ids) if k != 0}
        labels = LabelVolume(np.ascontiguousarray(ids), names)
    return volume, labels


def write_nifti(volume: Volume, datatype: int = DT_FLOAT32) -> bytes:
    """Serialize to little-endian NIfTI-1; float32 round-trips bit-exactly."""
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} not in {sorted(_DTYPES)}")
    vox = volume.voxels
    if datatype == DT_FLOAT32:
        payload = vox.astype("<f4")
    else:
        rounded = round_half_away(vox)
        info = np.iinfo(np.uint8 if datatype == DT_UINT8 else np.int16)
        if rounded.min() < info.min or rounded.max() > info.max:
            raise ValueOutOfRange(
                f"values [{rounded.min()}, {rounded.max()}] exceed "
                f"[{info.min}, {info.max}] for datatype {datatype}")
        payload = rounded.astype("<" + _DTYPES[datatype])
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    header[38] = ord("r")  # "regular" per convention
    nx, ny, nz = volume.dims
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, datatype, _BITPIX[datatype])
    sx, sy, sz = volume.spacing
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", header, 108, float(VOX_OFFSET), 0.0, 0.0)
    descrip = b"samri volume"
    struct.pack_into("80s", header, 148, descrip)
    header[344:348] = NIFTI_MAGIC
    # 4-byte extender (all zero: no extensions) pads the header to vox_offset
    body = payload.transpose(2, 1, 0).tobytes()
    return bytes(header) + b"\x00\x00\x00\x00" + body


def write_label_nifti(labels: LabelVolume, spacing=(1.0, 1.0, 1.0)) -> bytes:
    dt = DT_UINT8 if labels.labels.max(initial=0) <= 255 else DT_INT16
    vol = Volume(labels.labels.astype(np.float32), spacing, source="labels")
    return write_nifti(vol, dt)


# ----------------------------------------------------------- native format

def native_header(volume: Volume) -> str:
    return json.dumps(
        {"dims": list(volume.dims), "spacing": list(volume.spacing), "dtype": "f32le"},
        separators=(",", ":"))


def write_svol(volume: Volume, base: str | Path) -> tuple[Path, Path]:
    """Write `<base>.svol.json` + `<base>.svol.bin` (f32le, x fastest-varying in memory order)."""
    base = Path(base)
    json_path = base.with_name(base.name + ".svol.json")
    bin_path = base.with_name(base.name + ".svol.bin")
    json_path.write_text(native_header(volume))
    bin_path.write_bytes(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())
    return json_path, bin_path


def read_svol(base: str | Path) -> Volume:
    base = Path(base)
    header = json.loads(base.with_name(base.name + ".svol.json").read_text())
    blob = base.with_name(base.name + ".svol.bin").read_bytes()
    return _native_from_parts(header, blob)


def _native_from_parts(header: dict, blob: bytes) -> Volume:
    if header.get("dtype") != "f32le":
        raise UnsupportedDatatype(f"native dtype {header.get('dtype')!r} is not f32le")
    dims = tuple(int(d) for d in header["dims"])
    count = int(np.prod(dims))
    if len(blob) < 4 * count:
        raise TruncatedFile(f"native payload needs {4 * count} bytes, got {len(blob)}")
    voxels = np.frombuffer(blob, dtype="<f4", count=count).reshape(dims)
    spacing = tuple(float(s) for s in header.get("spacing", (1.0, 1.0, 1.0)))
    return Volume(np.ascontiguousarray(voxels), spacing, source="native")


def native_blob(volume: Volume) -> bytes:
    """Single-body framing for uploads: JSON header line + newline + f32le payload."""
    return native_header(volume).encode("utf-8") + b"\n" + \
        np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes()


def read_native_blob(data: bytes) -> Volume:
    newline = data.find(b"\n")
    if newline < 0:
        raise TruncatedFile("native blob missing header line")
    try:
        header = json.loads(data[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadMagic(f"native blob header is not JSON: {exc}") from exc
    return _native_from_parts(header, data[newline + 1 :])


def parse_volume_bytes(data: bytes) -> Volume:
    """Dispatch an uploaded body to the NIfTI or native parser."""
    if data[:1] == b"{":
        return read_native_blob(data)
    return read_nifti(data)[0]


# ---------------------------------------------------------------- phantoms

@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic synthetic MRI-like volume with exact labels.

    Identical spec (seed included) always generates identical output; all
    randomness flows through the package PRNG, never numpy's.
    """

    dims: tuple[int, int, int] = (64, 64, 16)
    object_count: tuple[int, int] = (2, 4)
    kinds: tuple[str, ...] = ("ellipsoid", "thin-shell", "blob")
    semiaxis_range: tuple[float, float] = (2.5, 10.0)
    fixed_semiaxes: tuple[float, float, float] | None = None
    background_intensity: float = 60.0
    object_intensity_range: tuple[float, float] = (130.0, 230.0)
    noise_sigma: float = 4.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0


_VALID_KINDS = ("ellipsoid", "thin-shell", "blob")


def _six_connected(mask: np.ndarray) -> bool:
    """Single 6-connected component check via flood fill."""
    total = int(mask.sum())
    if total == 0:
        return True
    seed_idx = np.argwhere(mask)[0]
    seen = np.zeros_like(mask, dtype=bool)
    stack = [tuple(seed_idx)]
    seen[tuple(seed_idx)] = True
    count = 0
    while stack:
        x, y, z = stack.pop()
        count += 1
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                           (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            nx, ny, nz = x + dx, y + dy, z + dz
            if (0 <= nx < mask.shape[0] and 0 <= ny < mask.shape[1]
                    and 0 <= nz < mask.shape[2] and mask[nx, ny, nz]
                    and not seen[nx, ny, nz]):
                seen[nx, ny, nz] = True
                stack.append((nx, ny, nz))
    return count == total


def _object_mask(kind: str, dims, center, axes, rng) -> np.ndarray:
    xs = np.arange(dims[0], dtype=np.float64)
    ys = np.arange(dims[1], dtype=np.float64)
    zs = np.arange(dims[2], dtype=np.float64)
    ux = (xs - center[0]) / axes[0]
    uy = (ys - center[1]) / axes[1]
    uz = (zs - center[2]) / axes[2]
    r2 = (ux[:, None, None] ** 2 + uy[None, :, None] ** 2 + uz[None, None, :] ** 2)
    if kind == "ellipsoid":
        return r2 <= 1.0
    if kind == "thin-shell":
        frac = min(0.9, max(0.35, 2.8 / min(axes)))
        inner = (1.0 - frac) ** 2
        return (r2 <= 1.0) & (r2 >= inner)
    if kind == "blob":
        amp = rng.uniform(0.10, 0.22)
        f_theta = rng.randint(2, 3)
        f_phi = rng.randint(1, 2)
        phase1 = rng.uniform(0.0, 2.0 * math.pi)
        phase2 = rng.uniform(0.0, 2.0 * math.pi)
        gx = np.broadcast_to(ux[:, None, None], dims)
        gy = np.broadcast_to(uy[None, :, None], dims)
        gz = np.broadcast_to(uz[None, None, :], dims)
        theta = np.arctan2(gy, gx)
        phi = np.arctan2(gz, np.hypot(gx, gy))
        wobble = 1.0 + amp * np.sin(f_theta * theta + phase1) * np.cos(f_phi * phi + phase2)
        return r2 <= wobble**2
    raise ValueError(f"unknown phantom kind {kind!r}")


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """Pure function of the spec: identical spec yields bit-identical output."""
    dims = spec.dims
    if any(d < 8 for d in dims):
        raise SpecInfeasible(f"dims {dims} below the 8-voxel minimum per axis")
    for k in spec.kinds:
        if k not in _VALID_KINDS:
            raise ValueError(f"unknown kind {k!r}")
    lo, hi = spec.semiaxis_range
    # per-axis semiaxis cap leaving room for blob wobble and a 1-voxel border
    caps = tuple(((d - 1) / 2.0 - 1.0) / 1.25 for d in dims)
    if spec.fixed_semiaxes is not None:
        if any(a > c for a, c in zip(spec.fixed_semiaxes, caps)):
            raise SpecInfeasible(
                f"semi-axes {spec.fixed_semiaxes} cannot fit dims {dims} (caps {caps})")
    elif lo > max(caps) or min(caps) < 1.2:
        raise SpecInfeasible(
            f"semi-axis range {spec.semiaxis_range} cannot fit dims {dims} (caps {caps})")
    rng = stream_rng(spec.seed, "phantom")
    labels = np.zeros(dims, dtype=np.int32)
    occupied = np.zeros(dims, dtype=bool)
    count = rng.randint(*spec.object_count)
    names: dict[int, str] = {}
    next_id = 1
    for _ in range(count):
        placed = False
        for _attempt in range(60):
            kind = spec.kinds[rng.randbelow(len(spec.kinds))]
            if spec.fixed_semiaxes is not None:
                axes = spec.fixed_semiaxes
            else:
                # anisotropic volumes clamp the draw per axis
                axes = tuple(max(1.2, min(rng.uniform(lo, hi), caps[i]))
                             for i in range(3))
            ext = tuple(a * 1.25 + 1.0 for a in axes)  # blob wobble margin
            ranges = [(ext[i], dims[i] - 1 - ext[i]) for i in range(3)]
            if any(r[0] > r[1] for r in ranges):
                continue
            center = tuple(rng.uniform(*ranges[i]) for i in range(3))
            mask = _object_mask(kind, dims, center, axes, rng)
            if not mask.any() or (mask & occupied).any():
                continue
            if not _six_connected(mask):
                continue
            labels[mask] = next_id
            occupied |= mask
            names[next_id] = f"{kind}_{next_id}"
            next_id += 1
            placed = True
            break
        if not placed:
            break  # volume too crowded for another object; keep what fits
    intensity = np.full(dims, spec.background_intensity, dtype=np.float64)
    for target_id in names:
        base = rng.uniform(*spec.object_intensity_range)
        intensity[labels == target_id] = base
    noise = np.array(rng.normals(int(np.prod(dims)), 0.0, spec.noise_sigma),
                     dtype=np.float64).reshape(dims)
    voxels = (intensity + noise).astype(np.float32)
    volume = Volume(voxels, spec.spacing, source=f"phantom(seed={spec.seed})")
    return volume, LabelVolume(labels, names)


# ------------------------------------------------------------------ slices

def slicing_axis(dims: tuple[int, int, int]) -> int:
    """Axis with the lowest extent; ties go to the lowest axis index."""
    return int(np.argmin(dims))


def extract_slices(volume: Volume, labels: LabelVolume) -> list[SliceRecord]:
    """2-d sections along the lowest-extent axis, ordered by index."""
    if volume.dims != labels.dims:
        raise DimMismatch(f"volume {volume.dims} vs labels {labels.dims}")
    axis = slicing_axis(volume.dims)
    records = []
    for k in range(volume.dims[axis]):
        records.append(SliceRecord(
            image=np.ascontiguousarray(volume.voxels.take(k, axis=axis)),
            label=np.ascontiguousarray(labels.labels.take(k, axis=axis)),
            axis=axis,
            index=k,
        ))
    return records
