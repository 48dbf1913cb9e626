"""Region encoder: a pre-norm ViT with a CLS token over patch embeddings.

Each region is a square window of patch-grid cells. Patch embeddings are
projected to ``d_model``, get a fixed 2-D sinusoidal position code, and are
prefixed with a learned CLS token. The slide representation is the mean of
its regions' final CLS vectors; a linear head maps it to four grade logits.

Regions of different sizes are batched by padding to the longest member list
and masking padded keys out of every attention softmax.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .errors import ChecksumError, ConfigError, ContractError, FormatError, ShapeError

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    mlp_ratio: float = 2.0
    dropout: float = 0.1
    n_classes: int = 4
    region_side: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 4:
            raise ConfigError(f"d_model {self.d_model} must be divisible by 4 for 2-D position codes")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} not in [0, 1)")
        if self.n_classes != 4:
            raise ConfigError("n_classes is fixed at 4")
        if min(self.input_dim, self.d_model, self.n_heads, self.n_layers, self.region_side) <= 0:
            raise ConfigError("model dimensions must be positive")

    @property
    def hidden_dim(self):
        return int(round(self.d_model * self.mlp_ratio))

    @classmethod
    def desk(cls, input_dim=64, **kw):
        return cls(input_dim=input_dim, **{"d_model": 64, "n_heads": 4, "n_layers": 2, **kw})

    @classmethod
    def full(cls, input_dim=512, **kw):
        return cls(input_dim=input_dim, **{"d_model": 512, "n_heads": 8, "n_layers": 12,
                                           "mlp_ratio": 4.0, "dropout": 0.1, **kw})


@dataclass(frozen=True)
class Region:
    slide_id: str
    origin: tuple  # (grid_x, grid_y) of the window's top-left cell
    members: tuple  # indices into PatchGrid.records
    rel_coords: tuple  # (dx, dy) of each member inside the window
    region_side: int = 4
    patch_size_px: int = 224
    downsample: float = 2.0

    def __post_init__(self):
        if not self.members:
            raise ContractError("a region needs at least one member patch")
        if len(self.members) != len(self.rel_coords):
            raise ContractError("members and rel_coords differ in length")
        for dx, dy in self.rel_coords:
            if not (0 <= dx < self.region_side and 0 <= dy < self.region_side):
                raise ContractError(f"member offset ({dx}, {dy}) outside the {self.region_side}-cell window")


@dataclass
class AttentionMap:
    region: Region
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict  # name -> ndarray
    adam: AdamState | None = None
    metadata: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)  # non-trainable arrays, e.g. input normalization

    def validate(self):
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise FormatError(f"checkpoint lacks parameter {name}")
            if tuple(self.params[name].shape) != shape:
                raise FormatError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        extra = set(self.params) - set(expected)
        if extra:
            raise FormatError(f"unexpected parameters {sorted(extra)}")
        return self


# --------------------------------------------------------------------------
# parameters

def param_shapes(cfg):
    d, h = cfg.d_model, cfg.hidden_dim
    shapes = {
        "input.w": (cfg.input_dim, d),
        "input.b": (d,),
        "cls": (d,),
    }
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "qkv.w": (d, 3 * d), p + "qkv.b": (3 * d,),
            p + "proj.w": (d, d), p + "proj.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "fc1.w": (d, h), p + "fc1.b": (h,),
            p + "fc2.w": (h, d), p + "fc2.b": (d,),
        })
    shapes.update({"final_ln.g": (d,), "final_ln.b": (d,), "head.w": (d, cfg.n_classes),
                   "head.b": (cfg.n_classes,)})
    return shapes


def init_params(cfg, seed=0):
    """Xavier-uniform weights, zero biases, unit norm gains; returns name -> Tensor."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name == "cls":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif len(shape) == 2:
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-lim, lim, size=shape)
        else:
            arr = np.zeros(shape)
        out[name] = Tensor(arr, requires_grad=True, name=name)
    return out


def as_param_tensors(arrays):
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in arrays.items()}


# --------------------------------------------------------------------------
# forward

def positional_encode(rel_coords, d_model):
    """Fixed 2-D sinusoidal code: first half of channels encodes x, second half y.

    Within each half, channel ``2i`` is ``sin(c * w_i)`` and ``2i + 1`` is
    ``cos(c * w_i)`` with ``w_i = 10000 ** (-2i / (d_model / 2))``.
    """
    if d_model % 4:
        raise ConfigError(f"d_model {d_model} must be divisible by 4")
    coords = np.asarray(rel_coords, dtype=np.float64).reshape(-1, 2)
    half = d_model // 2
    freqs = 10000.0 ** (-np.arange(0, half, 2) / half)
    out = np.empty((coords.shape[0], d_model))
    for axis in range(2):
        ang = coords[:, axis:axis + 1] * freqs
        block = out[:, axis * half:(axis + 1) * half]
        block[:, 0::2] = np.sin(ang)
        block[:, 1::2] = np.cos(ang)
    return out


def pack_regions(embedding_rows, regions):
    """Stack member embeddings into padded arrays.

    ``embedding_rows`` is one 2-D array per region (the slide's matrix).
    Returns ``(x, coords, valid)`` of shapes (R, T, in), (R, T, 2), (R, T).
    """
    t = max(len(r.members) for r in regions)
    dim = embedding_rows[0].shape[1]
    x = np.zeros((len(regions), t, dim))
    coords = np.zeros((len(regions), t, 2))
    valid = np.zeros((len(regions), t), dtype=bool)
    for i, (rows, reg) in enumerate(zip(embedding_rows, regions)):
        n = len(reg.members)
        x[i, :n] = rows[list(reg.members)]
        coords[i, :n] = reg.rel_coords
        valid[i, :n] = True
    return x, coords, valid


def encode_batch(x, coords, valid, cfg, params, train=False, seed=0, step=0):
    """Run the encoder on packed regions.

    Returns ``(cls, attn)``: ``cls`` is a Tensor (R, d_model) and ``attn`` an
    array (R, n_layers, n_heads, T + 1) holding the CLS query's attention row
    (column 0 is CLS itself).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
        raise ShapeError(f"region inputs {x.shape} do not match input_dim {cfg.input_dim}")
    r, t, _ = x.shape
    d, nh = cfg.d_model, cfg.n_heads
    dh = d // nh
    p = params
    drop = cfg.dropout if train else 0.0

    pe = positional_encode(np.asarray(coords).reshape(-1, 2), d).reshape(r, t, d)
    h = ad.embedding_add(ad.linear(Tensor(x), p["input.w"], p["input.b"]), pe)
    h = ad.dropout(h, drop, seed, train, key=1, step=step)
    cls = ad.broadcast_to(ad.reshape(p["cls"], (1, 1, d)), (r, 1, d))
    h = ad.concat([cls, h], axis=1)
    t1 = t + 1
    keymask = np.where(np.concatenate([np.ones((r, 1), bool), np.asarray(valid, bool)], axis=1),
                       0.0, MASK_VALUE)[:, None, None, :]

    attn_rows = []
    for l in range(cfg.n_layers):
        pre = f"layer{l}."
        a = ad.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = ad.linear(a, p[pre + "qkv.w"], p[pre + "qkv.b"])
        qkv = ad.transpose(ad.reshape(qkv, (r, t1, 3, nh, dh)), (2, 0, 3, 1, 4))
        q, k, v = (ad.index(qkv, i) for i in range(3))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = ad.softmax(ad.add_constant(scores, keymask), axis=-1)
        attn_rows.append(att.data[:, :, 0, :].copy())
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (r, t1, d))
        o = ad.dropout(ad.linear(o, p[pre + "proj.w"], p[pre + "proj.b"]), drop, seed, train,
                       key=100 + 2 * l, step=step)
        h = ad.add(h, o)
        m = ad.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        m = ad.linear(ad.gelu(ad.linear(m, p[pre + "fc1.w"], p[pre + "fc1.b"])), p[pre + "fc2.w"], p[pre + "fc2.b"])
        m = ad.dropout(m, drop, seed, train, key=101 + 2 * l, step=step)
        h = ad.add(h, m)
    cls_out = ad.layer_norm(ad.index(h, (slice(None), 0)), p["final_ln.g"], p["final_ln.b"])
    return cls_out, np.stack(attn_rows, axis=1)


def encode_region(embeddings, region, cfg, params, train=False, seed=0, step=0):
    """Encode one region; returns ``(cls_vector (d,) Tensor, attention (L, H, 1 + n))``."""
    rows = embeddings.rows if hasattr(embeddings, "rows") else np.asarray(embeddings)
    x, coords, valid = pack_regions([rows], [region])
    cls, attn = encode_batch(x, coords, valid, cfg, params, train, seed, step)
    return ad.reshape(cls, (cfg.d_model,)), attn[0]


def fuse_and_classify(cls_vectors, cfg, params):
    """Average-pool region CLS vectors and apply the linear head.

    ``cls_vectors`` may be a list of (d,) Tensors, an (n, d) Tensor for one
    slide (returns logits (4,)), or an (S, n, d) Tensor for a batch of slides
    (returns (S, 4)).
    """
    if isinstance(cls_vectors, (list, tuple)):
        if not cls_vectors:
            raise ContractError("fuse_and_classify needs at least one region vector")
        cls_vectors = ad.concat([ad.reshape(c, (1, cfg.d_model)) for c in cls_vectors], axis=0)
    if cls_vectors.shape[-2] == 0:
        raise ContractError("fuse_and_classify needs at least one region vector")
    slide_vec = ad.mean(cls_vectors, axis=-2)
    return ad.linear(slide_vec, params["head.w"], params["head.b"])


def extract_cls_attention(attention, region=None, aggregation="last"):
    """Collapse CLS attention (L, H, 1 + n) into per-patch weights summing to 1.

    ``aggregation`` is ``"last"`` (final layer, mean over heads) or
    ``"mean_layers"`` (mean over all layers and heads). The CLS->CLS entry is
    dropped before renormalizing.
    """
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim != 3:
        raise ShapeError(f"attention must be (layers, heads, 1 + n), got {attention.shape}")
    n = attention.shape[-1] - 1 if region is None else len(region.members)
    if aggregation == "last":
        row = attention[-1].mean(axis=0)
    elif aggregation == "mean_layers":
        row = attention.mean(axis=(0, 1))
    else:
        raise ConfigError(f"unknown attention aggregation {aggregation!r}")
    w = row[1:1 + n]
    total = w.sum()
    w = w / total if total > 0 else np.full(n, 1.0 / n)
    return AttentionMap(region, w)


# --------------------------------------------------------------------------
# checkpoint store
#
# b"HGC1" | u32 len + config JSON | u32 n_entries
# | per entry: u32 len + name | u32 ndim | u32 * ndim shape | float32 data
# | u32 CRC32 of everything before it

CKPT_MAGIC = b"HGC1"


def _entries(ckpt):
    for k in sorted(ckpt.params):
        yield k, ckpt.params[k]
    for k in sorted(ckpt.buffers):
        yield "buffer." + k, ckpt.buffers[k]
    if ckpt.adam is not None:
        for k in sorted(ckpt.adam.m):
            yield "adam.m." + k, ckpt.adam.m[k]
            yield "adam.v." + k, ckpt.adam.v[k]


def save_checkpoint(ckpt, path):
    ckpt.validate()
    header = {"model": asdict(ckpt.config), "metadata": ckpt.metadata}
    if ckpt.adam is not None:
        a = ckpt.adam
        header["adam"] = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps,
                          "weight_decay": a.weight_decay, "t": a.t}
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", len(hb)), hb]
    entries = list(_entries(ckpt))
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError("bad magic: not an HGC1 checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    (hl,) = struct.unpack_from("<I", body, 4)
    header = json.loads(body[8:8 + hl])
    off = 8 + hl
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    params, buffers, m, v = {}, {}, {}, {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", body, off)
        name = body[off + 4:off + 4 + ln].decode()
        off += 4 + ln
        (nd,) = struct.unpack_from("<I", body, off)
        shape = struct.unpack_from(f"<{nd}I", body, off + 4)
        off += 4 + 4 * nd
        count = int(np.prod(shape)) if nd else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 4 * count
        if name.startswith("buffer."):
            buffers[name[7:]] = arr
        elif name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
        else:
            params[name] = arr
    adam = None
    if "adam" in header:
        adam = AdamState(**header["adam"], m=m, v=v)
    return ModelCheckpoint(ModelConfig(**header["model"]), params, adam, header["metadata"], buffers).validate()
