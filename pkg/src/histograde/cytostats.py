"""Cell counting on synthetic slides and rank statistics across activity grades.

The detector is a palette matcher standing in for a nuclei network: pixels
within +-12 of a cell color are grouped into connected components and every
component of at least 20 px counts as one cell. Counts from any external
detector can be ingested through the CellCountTable JSONL format instead.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import ConfigError, ContractError, ParseError
from .slides import CELL_TYPES, CLASS_NAMES, read_level

EXACT_LIMIT = 10_000
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
N_BINS = 32


@dataclass(frozen=True)
class CellCountRow:
    slide_id: str
    class_label: int
    epithelial: int = 0
    lymphocyte: int = 0
    macrophage: int = 0
    neutrophil: int = 0

    def count(self, cell_type):
        if cell_type not in CELL_TYPES:
            raise ConfigError(f"unknown cell type {cell_type!r}")
        return getattr(self, cell_type)


class CellCountTable(list):
    """List of CellCountRow, one per slide."""

    def values(self, cell_type, class_label):
        return np.array([r.count(cell_type) for r in self if r.class_label == class_label], dtype=np.float64)


def detect_cells(slide, palette, tolerance=12, min_size=20, level=0):
    """Count palette-colored connected components per cell type."""
    unknown = set(palette) - set(CELL_TYPES)
    if unknown:
        raise ConfigError(f"unknown palette keys {sorted(unknown)}")
    rgb = read_level(slide, level)
    types = [t for t in CELL_TYPES if t in palette]
    # per-channel lookup of which palette colors each 8-bit value is within tolerance of
    v = np.arange(256)
    bits = None
    for ch in range(3):
        lut = np.zeros(256, dtype=np.uint8)
        for i, ctype in enumerate(types):
            lut |= ((np.abs(v - int(palette[ctype][ch])) <= tolerance) << i).astype(np.uint8)
        plane = lut[rgb[..., ch]]
        bits = plane if bits is None else bits & plane
    structure = np.ones((3, 3), dtype=bool)
    counts = dict.fromkeys(CELL_TYPES, 0)
    for i, ctype in enumerate(types):
        hit = (bits & (1 << i)) != 0
        labels, n = ndimage.label(hit, structure=structure)
        if n:
            sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
            counts[ctype] = int((sizes >= min_size).sum())
    return counts


def save_cell_counts(table, path):
    with open(path, "w") as fh:
        for r in table:
            fh.write(json.dumps(asdict(r)) + "\n")


def load_cell_counts(path):
    table = CellCountTable()
    seen = set()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
            for name in ("slide_id", "class_label", *CELL_TYPES):
                if name not in rec:
                    raise ParseError(f"missing field '{name}'", line=lineno, field=name)
            counts = {t: rec[t] for t in CELL_TYPES}
            if any(not isinstance(v, int) or v < 0 for v in counts.values()):
                raise ParseError("cell counts must be nonnegative integers", line=lineno)
            if rec["slide_id"] in seen:
                raise ParseError(f"duplicate slide_id {rec['slide_id']!r}", line=lineno)
            seen.add(rec["slide_id"])
            table.append(CellCountRow(rec["slide_id"], int(rec["class_label"]), **counts))
    return table


# --------------------------------------------------------------------------
# Mann-Whitney

@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    z: float
    p_one_sided: float
    r_rank_biserial: float
    ps: float
    n1: int
    n2: int
    method: str  # "exact" or "normal-approx"

    def to_dict(self):
        return asdict(self)


def u_statistic(x, y):
    """Pairs with x > y plus half the ties, via midranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ranks = rankdata(np.concatenate([x, y]))
    return float(ranks[:x.size].sum() - x.size * (x.size + 1) / 2.0)


def u_distribution(n1, n2):
    """Exact null frequencies of U for tie-free samples: ``counts[u]`` for u = 0..n1*n2.

    These are the coefficients of the Gaussian binomial [n1 + n2 choose n1]_q,
    built as a product of (1 - q^(n-m+i)) / (1 - q^i) with exact integers.
    """
    m, n = min(n1, n2), n1 + n2
    size = n1 * n2 + 1
    poly = np.zeros(size, dtype=object)
    poly[0] = 1
    for i in range(1, m + 1):
        a = n - m + i
        if a < size:
            shifted = np.zeros(size, dtype=object)
            shifted[a:] = poly[:size - a]
            poly = poly - shifted
        # divide by (1 - q^i): new[j] = poly[j] + new[j - i]
        pad = (-size) % i
        blocks = np.concatenate([poly, np.zeros(pad, dtype=object)]).reshape(-1, i)
        poly = np.cumsum(blocks, axis=0).reshape(-1)[:size]
    return [int(v) for v in poly]


def exact_upper_tail(u, n1, n2):
    """P(U >= u) under H0 for tie-free samples, as (count, total) integers."""
    counts = u_distribution(n1, n2)
    k = int(math.ceil(u - 1e-9))
    return sum(counts[max(k, 0):]), math.comb(n1 + n2, n1)


def probability_of_superiority(u, n1, n2):
    if n1 < 1 or n2 < 1:
        raise ContractError("sample sizes must be positive")
    if not 0 <= u <= n1 * n2:
        raise ContractError(f"U={u} outside [0, {n1 * n2}]")
    return u / (n1 * n2)


def rank_biserial(u, n1, n2):
    return 2.0 * probability_of_superiority(u, n1, n2) - 1.0


def mann_whitney_one_sided(x, y, exact_limit=EXACT_LIMIT):
    """One-sided test that ``x`` tends to exceed ``y``.

    Tie-free samples with ``n1 * n2 <= exact_limit`` get the exact null
    distribution; otherwise the normal approximation with tie-corrected
    variance and no continuity correction. When every value is tied the
    variance is zero and the result is z = 0, p = 1.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n1, n2 = x.size, y.size
    if n1 == 0 or n2 == 0:
        raise ContractError("both samples must be nonempty")
    u = u_statistic(x, y)
    n = n1 + n2
    _, tie_counts = np.unique(np.concatenate([x, y]), return_counts=True)
    tie_term = float(((tie_counts ** 3) - tie_counts).sum())
    var = (n1 * n2 / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    z = (u - n1 * n2 / 2.0) / math.sqrt(var) if var > 0 else 0.0
    has_ties = bool((tie_counts > 1).any())
    if not has_ties and n1 * n2 <= exact_limit:
        count, total = exact_upper_tail(u, n1, n2)
        p, method = count / total, "exact"
    else:
        p = float(ndtr(-z)) if var > 0 else 1.0
        p, method = max(p, np.finfo(float).tiny), "normal-approx"
    ps = probability_of_superiority(u, n1, n2)
    return MannWhitneyResult(u, float(z), float(p), 2.0 * ps - 1.0, ps, n1, n2, method)


DEFAULT_PAIRS = ((1, 0), (2, 1), (3, 2))


def pair_key(higher, lower):
    return f"{CLASS_NAMES[higher]}_vs_{CLASS_NAMES[lower]}"


def parse_pairs(text):
    """``"mild:inactive,moderate:mild"`` -> ((1, 0), (2, 1))."""
    out = []
    for part in text.split(","):
        hi, _, lo = part.strip().partition(":")
        try:
            out.append((CLASS_NAMES.index(hi), CLASS_NAMES.index(lo)))
        except ValueError:
            raise ConfigError(f"bad class pair {part!r}; use names from {CLASS_NAMES}") from None
    return tuple(out)


def compare_classes(table, cell_type="neutrophil", pairs=DEFAULT_PAIRS):
    out = {}
    for hi, lo in pairs:
        out[pair_key(hi, lo)] = mann_whitney_one_sided(table.values(cell_type, hi), table.values(cell_type, lo))
    return out


def write_stats_report(results, path):
    Path(path).write_text(json.dumps({k: v.to_dict() for k, v in results.items()}, indent=2) + "\n")


# --------------------------------------------------------------------------
# violin export

def _smooth(h):
    return np.convolve(h, np.array([1.0, 2.0, 3.0, 2.0, 1.0]) / 9.0, mode="same")


def class_distribution_export(table, cell_type="neutrophil"):
    """Per-class sorted counts, quantiles and a 32-bin histogram, plus an SVG violin plot.

    Quantiles use linear interpolation between closest ranks. Returns
    ``(data_dict, svg_text)``.
    """
    if cell_type not in CELL_TYPES:
        raise ConfigError(f"unknown cell type {cell_type!r}")
    if len(table) == 0:
        raise ContractError("empty cell count table")
    allv = np.array([r.count(cell_type) for r in table], dtype=np.float64)
    lo, hi = float(allv.min()), float(allv.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, N_BINS + 1)
    data = {"cell_type": cell_type, "bin_edges": [round(float(e), 6) for e in edges], "classes": {}}
    for c, name in enumerate(CLASS_NAMES):
        v = np.sort(table.values(cell_type, c))
        if v.size == 0:
            continue
        hist, _ = np.histogram(v, bins=edges)
        data["classes"][name] = {
            "n": int(v.size),
            "sorted_counts": [int(x) for x in v],
            "quantiles": [float(q) for q in np.quantile(v, QUANTILES, method="linear")],
            "histogram": [int(h) for h in hist],
            "degenerate": bool(v[0] == v[-1]),
        }
    return data, _violin_svg(data, lo, hi)


def _violin_svg(data, lo, hi, width=120, height=300, margin=40):
    classes = data["classes"]
    total_w = margin * 2 + width * len(CLASS_NAMES)
    total_h = height + margin * 2

    def ypos(v):
        return margin + height * (1.0 - (v - lo) / (hi - lo))

    dens = {k: _smooth(np.asarray(c["histogram"], dtype=float)) for k, c in classes.items()}
    peak = max((d.max() for d in dens.values()), default=1.0) or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" '
             f'viewBox="0 0 {total_w} {total_h}">',
             f'<text x="{total_w / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
             f'{data["cell_type"]} count by class</text>']
    edges = np.asarray(data["bin_edges"])
    centers = (edges[:-1] + edges[1:]) / 2
    for i, name in enumerate(CLASS_NAMES):
        cx = margin + width * (i + 0.5)
        parts.append(f'<text x="{cx:.1f}" y="{total_h - 10}" text-anchor="middle" font-size="12">{name}</text>')
        if name not in classes:
            continue
        c = classes[name]
        if c["degenerate"]:
            y = ypos(c["sorted_counts"][0])
            parts.append(f'<rect x="{cx - 2:.2f}" y="{y - 4:.2f}" width="4" height="8" fill="#7f7fbf"/>')
        else:
            half = dens[name] / peak * (width * 0.45)
            right = [(cx + hw, ypos(v)) for hw, v in zip(half, centers)]
            left = [(cx - hw, ypos(v)) for hw, v in zip(half[::-1], centers[::-1])]
            pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in right + left)
            parts.append(f'<polygon points="{pts}" fill="#7f7fbf" fill-opacity="0.6" stroke="#333"/>')
        q = c["quantiles"]
        parts.append(f'<line x1="{cx:.2f}" y1="{ypos(q[1]):.2f}" x2="{cx:.2f}" y2="{ypos(q[3]):.2f}" '
                     f'stroke="#000" stroke-width="3"/>')
        parts.append(f'<circle cx="{cx:.2f}" cy="{ypos(q[2]):.2f}" r="3" fill="#fff" stroke="#000"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_distribution_export(table, out_dir, cell_type="neutrophil"):
    data, svg = class_distribution_export(table, cell_type)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{cell_type}_distribution.json").write_text(json.dumps(data, indent=1) + "\n")
    (out_dir / f"{cell_type}_violin.svg").write_text(svg)
    return data
