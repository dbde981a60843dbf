"""Image ingestion, resampling, normalization, and the synthetic dataset
generator used for desk-scale runs.

Images travel as [1, H, W] float64 tensors with values in [0, 1].
Ingestion reads portable graymaps (P2 ascii / P5 binary, 8- or 16-bit),
resampling is area-average downsampling, and normalization is a
per-image z-score clamped to [-3, 3] and rescaled by 1/3 so values land
in [-1, 1], matching the reconstruction network's tanh output range.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import AnnotationTable
from .errors import ConfigError, DataError, ShapeError
from .tensor import DTYPE, Rng


class ConstantImageWarning(UserWarning):
    """Raised when a constant image is normalized (result is all zeros)."""


@dataclass
class GeneRecord:
    gene_id: str
    image: np.ndarray  # [1, H, W] grayscale in [0, 1]


# ---------------------------------------------------------------------------
# portable graymap ingestion

def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise DataError("truncated graymap header")
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def load_pgm(path) -> np.ndarray:
    """Read an 8- or 16-bit portable graymap into [1, H, W] scaled to
    [0, 1] by the file's maxval. 16-bit binary samples are big-endian."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    try:
        magic, pos = _next_token(data, 0)
        if magic not in (b"P2", b"P5"):
            raise DataError(f"{path}: unsupported raster magic {magic!r}")
        fields = []
        for _ in range(3):
            tok, pos = _next_token(data, pos)
            try:
                fields.append(int(tok))
            except ValueError:
                raise DataError(f"{path}: non-numeric header token {tok!r}") from None
        width, height, maxval = fields
        if width < 1 or height < 1:
            raise DataError(f"{path}: bad dimensions {width}x{height}")
        if not 0 < maxval < 65536:
            raise DataError(f"{path}: unsupported maxval {maxval}")
        if magic == b"P5":
            pos += 1  # single whitespace byte after maxval
            bpp = 1 if maxval < 256 else 2
            need = width * height * bpp
            raster = data[pos:pos + need]
            if len(raster) < need:
                raise DataError(f"{path}: truncated raster "
                                f"({len(raster)} of {need} bytes)")
            dt = np.uint8 if bpp == 1 else np.dtype(">u2")
            values = np.frombuffer(raster, dtype=dt).astype(DTYPE)
        else:
            tokens = data[pos:].split()
            if len(tokens) < width * height:
                raise DataError(f"{path}: truncated raster "
                                f"({len(tokens)} of {width * height} samples)")
            try:
                values = np.array([int(t) for t in tokens[:width * height]],
                                  dtype=DTYPE)
            except ValueError:
                raise DataError(f"{path}: non-numeric raster sample") from None
        if values.max(initial=0.0) > maxval:
            raise DataError(f"{path}: sample exceeds maxval {maxval}")
    except DataError:
        raise
    except Exception as exc:  # malformed beyond specific checks
        raise DataError(f"{path}: malformed graymap ({exc})") from exc
    return (values / maxval).reshape(1, height, width)


def save_pgm(path, image, maxval: int = 255) -> None:
    """Write a [1, H, W] tensor in [0, 1] as a binary (P5) graymap."""
    from .ioutil import atomic_write_bytes

    img = np.asarray(image, dtype=DTYPE)
    if img.ndim != 3 or img.shape[0] != 1:
        raise ShapeError(f"expected [1, H, W] image, got shape {img.shape}")
    if not 0 < maxval < 65536:
        raise ConfigError(f"unsupported maxval {maxval}")
    quant = np.clip(np.rint(img[0] * maxval), 0, maxval)
    header = f"P5\n{img.shape[2]} {img.shape[1]}\n{maxval}\n".encode("ascii")
    if maxval < 256:
        raster = quant.astype(np.uint8).tobytes()
    else:
        raster = quant.astype(">u2").tobytes()
    atomic_write_bytes(path, header + raster)


# ---------------------------------------------------------------------------
# resampling and normalization

def _overlap_weights(target: int, source: int) -> np.ndarray:
    """[target, source] matrix of fractional footprint weights; each row
    sums to 1, so the product with a value vector is the area average."""
    w = np.zeros((target, source), dtype=DTYPE)
    factor = source / target
    for i in range(target):
        lo = i * factor
        hi = (i + 1) * factor
        j0 = int(np.floor(lo))
        j1 = min(int(np.ceil(hi)), source)
        for j in range(j0, j1):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / factor


def resample(image, target_h: int, target_w: int) -> np.ndarray:
    """Area-average downsampling: each output pixel is the mean of its
    (possibly fractional) source footprint. Upsampling is rejected."""
    x = np.asarray(image, dtype=DTYPE)
    if x.ndim != 3:
        raise ShapeError(f"expected [C, H, W] image, got shape {x.shape}")
    _, h, w = x.shape
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target size must be positive, got {target_h}x{target_w}")
    if target_h > h or target_w > w:
        raise ShapeError(f"upsampling not supported: source {h}x{w}, "
                         f"target {target_h}x{target_w}")
    if (target_h, target_w) == (h, w):
        return x.copy()
    rows = _overlap_weights(target_h, h)
    cols = _overlap_weights(target_w, w)
    out = np.stack([rows @ x[c] @ cols.T for c in range(x.shape[0])])
    return np.clip(out, 0.0, 1.0)


def normalize(image) -> np.ndarray:
    """Per-image z-score (population std), clamped to [-3, 3] and scaled
    by 1/3 into [-1, 1]. A constant image has no scale to divide by; it
    maps to all zeros with a ConstantImageWarning."""
    x = np.asarray(image, dtype=DTYPE)
    sd = float(x.std())
    if sd == 0.0:
        warnings.warn("constant image normalizes to all zeros",
                      ConstantImageWarning, stacklevel=2)
        return np.zeros_like(x)
    z = (x - x.mean()) / sd
    np.clip(z, -3.0, 3.0, out=z)
    return z / 3.0


# ---------------------------------------------------------------------------
# synthetic dataset

@dataclass
class PatternSpec:
    """One category's additive spatial signature, confined to a tile so
    different categories never overlap."""
    kind: str               # "band" or "blob"
    row0: int
    row1: int
    col0: int
    col1: int
    offset: float
    sigma: float = 0.0      # blob width; unused for bands


@dataclass
class SyntheticSpec:
    """Recipe for a desk-scale dataset: each gene's image is a fixed base
    texture plus the additive pattern of every category it belongs to,
    plus seeded pixel noise."""
    num_genes: int = 400
    height: int = 96
    width: int = 48
    num_categories: int = 6
    positives_min: int = 30
    positives_max: int = 60
    noise_level: float = 0.05
    seed: int = 0
    base_intensity: float = 0.35
    pattern_offset: float = 0.25
    patterns: list[PatternSpec] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.validate()
        if not self.patterns:
            self.patterns = _auto_patterns(self.num_categories, self.height,
                                           self.width, self.pattern_offset)

    def validate(self) -> None:
        if self.num_genes < 1 or self.num_categories < 1:
            raise ConfigError("need at least one gene and one category")
        if self.height < 4 or self.width < 4:
            raise ConfigError(f"image dims too small: {self.height}x{self.width}")
        if self.positives_min < 5:
            raise ConfigError(f"positives per category must be >= 5, "
                              f"got {self.positives_min}")
        if self.positives_max < self.positives_min:
            raise ConfigError("positives_max below positives_min")
        if self.positives_max > self.num_genes:
            raise ConfigError(f"positives_max {self.positives_max} exceeds "
                              f"num_genes {self.num_genes}")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")


def _auto_patterns(num_categories: int, height: int, width: int,
                   offset: float) -> list[PatternSpec]:
    """Lay categories out on a tile grid, alternating horizontal bands
    and centered blobs. Tiles are disjoint, which keeps every category
    linearly separable in pixel space at zero noise."""
    grid_rows = int(np.ceil(np.sqrt(num_categories)))
    grid_cols = int(np.ceil(num_categories / grid_rows))
    tile_h = height // grid_rows
    tile_w = width // grid_cols
    if tile_h < 3 or tile_w < 3:
        raise ConfigError(f"too many categories ({num_categories}) for "
                          f"{height}x{width} images")
    patterns = []
    for c in range(num_categories):
        r0 = (c // grid_cols) * tile_h
        c0 = (c % grid_cols) * tile_w
        if c % 2 == 0:
            patterns.append(PatternSpec(
                kind="band", offset=offset,
                row0=r0 + tile_h // 3, row1=r0 + max(2 * tile_h // 3, tile_h // 3 + 1),
                col0=c0, col1=c0 + tile_w))
        else:
            patterns.append(PatternSpec(
                kind="blob", offset=offset,
                row0=r0, row1=r0 + tile_h, col0=c0, col1=c0 + tile_w,
                sigma=min(tile_h, tile_w) / 5.0))
    return patterns


def _pattern_field(p: PatternSpec, height: int, width: int) -> np.ndarray:
    out = np.zeros((height, width), dtype=DTYPE)
    if p.kind == "band":
        out[p.row0:p.row1, p.col0:p.col1] = p.offset
    elif p.kind == "blob":
        rr = np.arange(p.row0, p.row1, dtype=DTYPE)
        cc = np.arange(p.col0, p.col1, dtype=DTYPE)
        cy = (p.row0 + p.row1 - 1) / 2.0
        cx = (p.col0 + p.col1 - 1) / 2.0
        d2 = (rr[:, None] - cy) ** 2 + (cc[None, :] - cx) ** 2
        out[p.row0:p.row1, p.col0:p.col1] = p.offset * np.exp(-d2 / (2 * p.sigma ** 2))
    else:
        raise ConfigError(f"unknown pattern kind {p.kind!r}")
    return out


def synthesize(spec: SyntheticSpec) -> tuple[list[GeneRecord], AnnotationTable]:
    """Generate gene records and a matching annotation table.

    Deterministic from the spec's seed: category membership, noise, and
    pattern placement all derive from it. With noise_level 0, genes in
    the same categories get identical images.
    """
    spec.validate()
    root = Rng(spec.seed).derive("synthetic")
    gene_ids = [f"g{i:05d}" for i in range(spec.num_genes)]

    fields = [_pattern_field(p, spec.height, spec.width) for p in spec.patterns]
    membership: dict[str, frozenset[str]] = {}
    per_gene: list[list[int]] = [[] for _ in range(spec.num_genes)]
    for c in range(spec.num_categories):
        arng = root.derive("assign", c)
        count = arng.integers(spec.positives_min, spec.positives_max + 1)
        chosen = arng.choice(spec.num_genes, size=count)
        membership[f"cat{c:03d}"] = frozenset(gene_ids[g] for g in chosen)
        for g in chosen:
            per_gene[g].append(c)

    # fixed horizontal ramp keeps even pattern-free images non-constant
    base = (spec.base_intensity
            + 0.08 * np.linspace(0.0, 1.0, spec.width, dtype=DTYPE)[None, :]
            * np.ones((spec.height, 1), dtype=DTYPE))
    records = []
    for g, gid in enumerate(gene_ids):
        img = base.copy()
        for c in per_gene[g]:
            img += fields[c]
        if spec.noise_level > 0:
            img += spec.noise_level * root.derive("noise", g).normal(
                size=(spec.height, spec.width))
        np.clip(img, 0.0, 1.0, out=img)
        records.append(GeneRecord(gene_id=gid, image=img[None]))

    table = AnnotationTable(categories=membership, universe=tuple(gene_ids))
    return records, table


# ---------------------------------------------------------------------------
# manifest / annotation files

def load_manifest(path) -> list[tuple[str, Path]]:
    """Read a ``gene_id<TAB>image_path`` manifest; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    entries: list[tuple[str, Path]] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'gene_id<TAB>path'")
        gid, rel = parts
        if gid in seen:
            raise DataError(f"{path}:{lineno}: duplicate gene id {gid!r}")
        seen.add(gid)
        img = Path(rel)
        if not img.is_absolute():
            img = path.parent / img
        entries.append((gid, img))
    if not entries:
        raise DataError(f"{path}: empty manifest")
    return entries


def load_records(manifest_path) -> list[GeneRecord]:
    return [GeneRecord(gene_id=gid, image=load_pgm(p))
            for gid, p in load_manifest(manifest_path)]


def read_annotation_pairs(path) -> list[tuple[str, str]]:
    """Read ``category_id<TAB>gene_id`` pairs; '#' lines are comments."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read annotations {path}: {exc}") from exc
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'category_id<TAB>gene_id'")
        pairs.append((parts[0], parts[1]))
    if not pairs:
        raise DataError(f"{path}: no annotation pairs")
    return pairs


def write_annotation_pairs(path, table: AnnotationTable) -> None:
    from .ioutil import atomic_write_text

    lines = []
    for cat in sorted(table.categories):
        for gid in sorted(table.categories[cat]):
            lines.append(f"{cat}\t{gid}")
    atomic_write_text(path, "\n".join(lines) + "\n")
