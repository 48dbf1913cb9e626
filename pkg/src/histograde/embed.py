"""Patch feature vectors: a deterministic 64-d reference embedder and the HGE1 store.

HGE1 layout (little-endian)::

    b"HGE1" | u32 schema=1 | u32 dim | u64 n_rows
    | u32 len + slide_id utf-8 | u32 len + embedder_id utf-8
    | n_rows*dim float32 | u32 CRC32 of everything before it
"""
from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, ShapeError
from .preprocess import read_patch, tissue_pixels

REFERENCE_DIM = 64
REFERENCE_ID = "reference-v1"
MAGIC = b"HGE1"
SCHEMA = 1


@dataclass
class EmbeddingMatrix:
    slide_id: str
    rows: np.ndarray
    embedder_id: str = REFERENCE_ID

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ShapeError(f"embedding rows must be 2-D, got shape {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise FormatError(f"{self.slide_id}: non-finite embedding values")

    @property
    def dim(self):
        return self.rows.shape[1]

    def __len__(self):
        return self.rows.shape[0]


def _block_edges(n, k):
    return np.linspace(0, n, k + 1).round().astype(int)


def embed_patch_reference(patch, patch_size_px=224):
    """64 features in [0, 1].

    24 per-channel 8-bin histograms, 6 channel mean/std, 8-bin gradient
    magnitude histogram, 25 block mean luminances on a 5x5 grid, 1 tissue
    fraction.
    """
    patch = np.asarray(patch)
    if patch.shape != (patch_size_px, patch_size_px, 3):
        raise ShapeError(f"expected ({patch_size_px}, {patch_size_px}, 3) patch, got {patch.shape}")
    px = patch.astype(np.float64)
    n = patch_size_px * patch_size_px
    feats = []
    for c in range(3):
        hist = np.bincount(patch[..., c].reshape(-1) >> 5, minlength=8)
        feats.append(hist / n)
    flat = px.reshape(-1, 3)
    feats.append(flat.mean(axis=0) / 255.0)
    feats.append(flat.std(axis=0) / 127.5)

    lum = (px @ np.array([0.299, 0.587, 0.114])) / 255.0
    gy, gx = np.gradient(lum)
    mag = np.clip(np.hypot(gx, gy), 0.0, 1.0)
    ghist, _ = np.histogram(mag, bins=8, range=(0.0, 1.0))
    feats.append(ghist / n)

    ey = _block_edges(patch_size_px, 5)
    blocks = [lum[ey[i]:ey[i + 1], ey[j]:ey[j + 1]].mean() for i in range(5) for j in range(5)]
    feats.append(np.array(blocks))
    feats.append(np.array([tissue_pixels(patch).mean()]))
    out = np.concatenate(feats)
    return np.clip(out, 0.0, 1.0)


def embed_slide(slide, grid, workers=1):
    def one(rec):
        return embed_patch_reference(read_patch(slide, rec), grid.patch_size_px)

    if not grid.records:
        return EmbeddingMatrix(grid.slide_id, np.zeros((0, REFERENCE_DIM)), REFERENCE_ID)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, grid.records))
    else:
        rows = [one(r) for r in grid.records]
    return EmbeddingMatrix(grid.slide_id, np.stack(rows), REFERENCE_ID)


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def write_embeddings(m, path):
    data = np.ascontiguousarray(m.rows, dtype="<f4")
    body = (MAGIC + struct.pack("<IIQ", SCHEMA, data.shape[1], data.shape[0])
            + _pack_str(m.slide_id) + _pack_str(m.embedder_id) + data.tobytes())
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def decode_embeddings(blob, expected_rows=None, expected_dim=None):
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("bad magic: not an HGE1 embedding store")
    if len(blob) < 24:
        raise ChecksumError("file truncated before end of header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 mismatch (truncated or corrupted file)")
    schema, dim, n_rows = struct.unpack_from("<IIQ", body, 4)
    if schema != SCHEMA:
        raise FormatError(f"unsupported schema {schema}")
    off = 20
    strings = []
    for _ in range(2):
        (ln,) = struct.unpack_from("<I", body, off)
        strings.append(body[off + 4:off + 4 + ln].decode("utf-8"))
        off += 4 + ln
    payload = body[off:]
    if len(payload) != 4 * dim * n_rows:
        raise FormatError(f"payload holds {len(payload)} bytes, expected {4 * dim * n_rows}")
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"dim {dim} does not match expected {expected_dim}")
    if expected_rows is not None and n_rows != expected_rows:
        raise FormatError(f"{n_rows} rows do not match {expected_rows} patch records")
    rows = np.frombuffer(payload, dtype="<f4").reshape(n_rows, dim).astype(np.float64)
    return EmbeddingMatrix(strings[0], rows, strings[1])


def import_embeddings(path, grid=None, expected_dim=None):
    """Load an HGE1 file; ``grid`` pins the row count to its record count."""
    blob = Path(path).read_bytes()
    return decode_embeddings(blob, None if grid is None else len(grid.records), expected_dim)
