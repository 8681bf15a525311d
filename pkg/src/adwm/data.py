"""Synthetic dataset generation and bit-exact tensor file I/O.

Scenes are procedural stand-ins for satellite ground truth: random blobs,
gratings, and rectangles, each with a spectral signature drawn from an
AR(1) chain so adjacent bands are strongly correlated (the redundancy
structure the weighting mechanism exploits). Degradation follows the
reduced-resolution protocol: the scene is both the ground truth and the
source of the simulated inputs (per-band Gaussian blur + 4x decimation
for the low-res bands, a fixed spectral average for the panchromatic
band).

File formats:
  TNSR  magic "TNSR", u32 version=1, u32 rank, u32 dims[rank], u8 dtype
        (1 = float32, 2 = float64), payload little-endian row-major.
  manifest.txt  one line per sample, tab-separated: id seed H W c.
"""

import hashlib
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError
from .tensor import Tensor

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES_BY_NAME = {"f4": 1, "f8": 2}


# ----------------------------------------------------------------------
# TNSR records

def tensor_to_bytes(t, dtype="f8"):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim == 0:
        raise FormatError("rank-0 tensors are not representable", offset=8)
    if dtype not in _CODES_BY_NAME:
        raise FormatError(f"unsupported dtype {dtype!r}")
    code = _CODES_BY_NAME[dtype]
    head = bytearray()
    head += TNSR_MAGIC
    head += struct.pack("<I", TNSR_VERSION)
    head += struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<B", code)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    return bytes(head) + payload


def tensor_from_bytes(buf, offset=0):
    """Decode one TNSR record starting at `offset`.

    Returns (Tensor, next_offset). Raises FormatError carrying the byte
    offset of whichever field is malformed or truncated.
    """
    start = offset
    if len(buf) < offset + 4 or buf[offset:offset + 4] != TNSR_MAGIC:
        raise FormatError("bad magic, expected TNSR", offset=start)
    offset += 4
    if len(buf) < offset + 4:
        raise FormatError("truncated version field", offset=offset)
    (version,) = struct.unpack_from("<I", buf, offset)
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported version {version}", offset=offset)
    offset += 4
    if len(buf) < offset + 4:
        raise FormatError("truncated rank field", offset=offset)
    (rank,) = struct.unpack_from("<I", buf, offset)
    if rank == 0:
        raise FormatError("rank-0 tensors are forbidden", offset=offset)
    if rank > 32:
        raise FormatError(f"implausible rank {rank}", offset=offset)
    offset += 4
    if len(buf) < offset + 4 * rank:
        raise FormatError("truncated dims", offset=offset)
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    if len(buf) < offset + 1:
        raise FormatError("truncated dtype byte", offset=offset)
    code = buf[offset]
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset=offset)
    offset += 1
    dt = _DTYPE_CODES[code]
    need = int(np.prod(dims)) * dt.itemsize
    if len(buf) < offset + need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(buf) - offset}",
            offset=offset,
        )
    arr = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims)), offset=offset)
    return Tensor(arr.reshape(dims).astype(np.float64)), offset + need


def write_tensor(path, t, dtype="f8"):
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t, dtype=dtype))


def read_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", offset=end)
    return t


# ----------------------------------------------------------------------
# scene synthesis

_BLOBS = 8
_GRATINGS = 8
_RECTS = 8
_SPECTRAL_RHO = 0.93


def _spectral_signature(rng, c):
    """AR(1) chain across bands: adjacent bands get correlated loadings."""
    a = np.empty(c)
    a[0] = rng.standard_normal()
    for j in range(1, c):
        a[j] = _SPECTRAL_RHO * a[j - 1] + np.sqrt(1 - _SPECTRAL_RHO**2) * rng.standard_normal()
    return a


def generate_scene(seed, H, W, c):
    """Deterministic procedural ground truth, (H, W, c) in [0, 1]."""
    if H % 4 or W % 4:
        raise ConfigurationError(f"H and W must be divisible by 4, got {H}x{W}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    patterns = []
    for _ in range(_BLOBS):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        sig = rng.uniform(min(H, W) / 16, min(H, W) / 4)
        patterns.append(np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2)))
    for _ in range(_GRATINGS):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 8.0)
        phase = rng.uniform(0, 2 * np.pi)
        axis = (xx * np.cos(theta) + yy * np.sin(theta)) / max(H, W)
        patterns.append(0.5 * (1 + np.sin(2 * np.pi * freq * axis + phase)))
    for _ in range(_RECTS):
        y0, x0 = rng.integers(0, H), rng.integers(0, W)
        hh = int(rng.integers(H // 8, H // 2 + 1))
        ww = int(rng.integers(W // 8, W // 2 + 1))
        box = np.zeros((H, W))
        box[y0:y0 + hh, x0:x0 + ww] = 1.0
        patterns.append(box)

    amplitudes = rng.uniform(0.3, 1.0, size=len(patterns))
    signatures = np.stack([_spectral_signature(rng, c) for _ in patterns])
    raw = np.einsum("k,kc,khw->hwc", amplitudes, signatures, np.stack(patterns))
    raw += 0.01 * rng.standard_normal((H, W, c))

    # per-band affine rescale into [0.05, 0.95]: positive affine maps keep
    # the inter-band correlation structure intact
    lo = raw.min(axis=(0, 1), keepdims=True)
    hi = raw.max(axis=(0, 1), keepdims=True)
    span = np.where(hi - lo < 1e-12, 1.0, hi - lo)
    scene = 0.05 + 0.9 * (raw - lo) / span
    return Tensor(np.clip(scene, 0.0, 1.0))


# ----------------------------------------------------------------------
# reduced-resolution degradation

_MTF_SIGMA = 1.6
_MTF_SIZE = 7
_SCALE = 4


def _gaussian_kernel1d(sigma, size):
    r = np.arange(size) - size // 2
    k = np.exp(-(r**2) / (2 * sigma**2))
    return k / k.sum()


def _blur_reflect(band, k1d):
    """Separable blur with reflect padding on a single 2-D band."""
    p = len(k1d) // 2
    padded = np.pad(band, p, mode="reflect")
    tmp = np.zeros((band.shape[0], padded.shape[1]))
    for i, w in enumerate(k1d):
        tmp += w * padded[i:i + band.shape[0], :]
    out = np.zeros(band.shape)
    for j, w in enumerate(k1d):
        out += w * tmp[:, j:j + band.shape[1]]
    return out


def blur_bands(gt):
    """Per-band Gaussian blur standing in for the sensor transfer function."""
    arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    k1d = _gaussian_kernel1d(_MTF_SIGMA, _MTF_SIZE)
    return np.stack([_blur_reflect(arr[:, :, b], k1d) for b in range(arr.shape[2])], axis=2)


def wald_degrade(gt, pan_weights=None):
    """Ground truth -> (pan, lrms) simulated acquisition pair.

    lrms is the blurred scene decimated 4x; pan is a fixed positive
    spectral average of the unblurred scene (uniform weights by default).
    """
    arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if arr.ndim != 3:
        raise DimensionError(f"ground truth must be (H, W, c), got {arr.shape}")
    c = arr.shape[2]
    if pan_weights is None:
        pan_weights = np.full(c, 1.0 / c)
    else:
        pan_weights = np.asarray(pan_weights, dtype=np.float64)
        if pan_weights.shape != (c,):
            raise DimensionError(
                f"pan weights shape {pan_weights.shape} does not match {c} bands"
            )
    blurred = blur_bands(arr)
    lrms = blurred[::_SCALE, ::_SCALE, :]
    pan = arr @ pan_weights
    return Tensor(pan), Tensor(lrms)


# ----------------------------------------------------------------------
# datasets

@dataclass
class SamplePair:
    id: str
    pan: np.ndarray    # (H, W)
    lrms: np.ndarray   # (H/4, W/4, c)
    gt: np.ndarray     # (H, W, c)


def _thread_count():
    raw = os.environ.get("ADWM_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return max(1, n) if n else 1


def build_dataset(seed, count, H, W, c, out_dir):
    """Write `count` samples plus manifest.txt; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    sample_seeds = np.random.SeedSequence(seed).generate_state(count)

    def emit(i):
        sid = f"sample_{i:05d}"
        sdir = os.path.join(out_dir, sid)
        os.makedirs(sdir, exist_ok=True)
        gt = generate_scene(int(sample_seeds[i]), H, W, c)
        pan, lrms = wald_degrade(gt)
        write_tensor(os.path.join(sdir, "gt.tnsr"), gt)
        write_tensor(os.path.join(sdir, "pan.tnsr"), pan)
        write_tensor(os.path.join(sdir, "lrms.tnsr"), lrms)
        return sid

    threads = _thread_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ids = list(pool.map(emit, range(count)))
    else:
        ids = [emit(i) for i in range(count)]

    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as f:
        for i, sid in enumerate(ids):
            f.write(f"{sid}\t{int(sample_seeds[i])}\t{H}\t{W}\t{c}\n")
    return manifest


def read_manifest(data_dir):
    manifest = os.path.join(data_dir, "manifest.txt")
    if not os.path.isfile(manifest):
        raise ConfigurationError(f"no manifest.txt under {data_dir}")
    rows = []
    with open(manifest) as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise FormatError(f"malformed manifest line: {line!r}")
            rows.append(
                {"id": parts[0], "seed": int(parts[1]), "H": int(parts[2]),
                 "W": int(parts[3]), "c": int(parts[4])}
            )
    return rows


def load_sample(data_dir, sample_id):
    sdir = os.path.join(data_dir, sample_id)
    return SamplePair(
        id=sample_id,
        pan=read_tensor(os.path.join(sdir, "pan.tnsr")).data,
        lrms=read_tensor(os.path.join(sdir, "lrms.tnsr")).data,
        gt=read_tensor(os.path.join(sdir, "gt.tnsr")).data,
    )


def load_dataset(data_dir):
    return [load_sample(data_dir, row["id"]) for row in read_manifest(data_dir)]


def split_ids(ids, test_count):
    """Deterministic hash split: disjoint, exhaustive, order-independent.

    Samples are ranked by the SHA-256 of their id; the first `test_count`
    become the held-out set.
    """
    if not 0 <= test_count <= len(ids):
        raise ConfigurationError(
            f"test_count {test_count} out of range for {len(ids)} samples"
        )
    ranked = sorted(ids, key=lambda s: (hashlib.sha256(s.encode()).hexdigest(), s))
    test = set(ranked[:test_count])
    return [s for s in ids if s not in test], [s for s in ids if s in test]
