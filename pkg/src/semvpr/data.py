"""Dataset manifests, PGM label maps and the procedural fixture generator."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .formats import load_tensor, save_tensor
from .losses import IGNORE_LABEL
from .retrieval import geo_distance

PathLike = Union[str, Path]

ROLES = ("gallery", "query", "train")
DOMAINS = ("source", "target")
HEADER = ["id", "path", "coord_a", "coord_b", "role", "domain"]
NUM_CLASSES = 17
# class ids below this are static scenery; the rest are movable objects
FIRST_DYNAMIC_CLASS = 11


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    id: int
    path: str
    coord: Tuple[float, float]
    role: str
    domain: str
    labels: Optional[str] = None


@dataclass
class DatasetManifest:
    records: List[Record]
    convention: str = "utm"
    root: Path = field(default_factory=Path)
    _images: Dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        seen = set()
        for i, r in enumerate(self.records):
            if r.id in seen:
                raise ManifestError(f"record {i}: duplicate id {r.id}")
            seen.add(r.id)
            if r.role not in ROLES:
                raise ManifestError(f"record {i}: unknown role {r.role!r}")
            if r.domain not in DOMAINS:
                raise ManifestError(f"record {i}: unknown domain {r.domain!r}")
            labelled = r.domain == "source" and r.role == "train"
            if labelled != (r.labels is not None):
                raise ManifestError(f"record {i}: label map must be present iff domain=source and role=train")
        if self.convention not in ("utm", "latlon"):
            raise ManifestError(f"unknown coordinate convention {self.convention!r}")

    def __len__(self) -> int:
        return len(self.records)

    def select(self, role: Optional[str] = None, domain: Optional[str] = None) -> "DatasetManifest":
        recs = [r for r in self.records
                if (role is None or r.role == role) and (domain is None or r.domain == domain)]
        return DatasetManifest(recs, self.convention, self.root, self._images)

    @property
    def ids(self) -> np.ndarray:
        return np.array([r.id for r in self.records], dtype=np.int64)

    @property
    def coords(self) -> np.ndarray:
        return np.array([r.coord for r in self.records], dtype=np.float64).reshape(-1, 2)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_image(self, rec: Record) -> np.ndarray:
        """Image tensor for ``rec``; files are read once and kept in memory."""
        if rec.path not in self._images:
            self._images[rec.path] = load_tensor(self.resolve(rec.path))
        return self._images[rec.path]

    def load_labels(self, rec: Record, num_classes: int = NUM_CLASSES) -> np.ndarray:
        if rec.labels is None:
            raise ManifestError(f"record {rec.id} has no label map")
        return load_label_map(self.resolve(rec.labels), num_classes)


def _parse_coord(text: str, line: int) -> Tuple[float, str]:
    text = text.strip()
    conv = "utm"
    if text.endswith("deg"):
        conv, text = "latlon", text[:-3]
    try:
        return float(text), conv
    except ValueError:
        raise ManifestError(f"line {line}: bad coordinate {text!r}") from None


def _format_coord(value: float, convention: str) -> str:
    return repr(float(value)) + ("deg" if convention == "latlon" else "")


def load_manifest(path: PathLike) -> DatasetManifest:
    """Read ``id,path,coord_a,coord_b,role,domain[,labels]``.

    Plain coordinates are UTM easting/northing in meters; a ``deg`` suffix
    marks latitude/longitude in degrees. Relative paths resolve against the
    manifest's directory.
    """
    path = Path(path)
    records: List[Record] = []
    conventions = set()
    seen: Dict[int, int] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:6] != HEADER or len(header) > 7 or (len(header) == 7 and header[6] != "labels"):
            raise ManifestError(f"line 1: expected header {','.join(HEADER)}[,labels], got {header}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            try:
                rid = int(row[0])
            except ValueError:
                raise ManifestError(f"line {line}: id must be an integer, got {row[0]!r}") from None
            if rid < 0:
                raise ManifestError(f"line {line}: id must be nonnegative")
            if rid in seen:
                raise ManifestError(f"line {line}: duplicate id {rid} (first seen on line {seen[rid]})")
            seen[rid] = line
            a, ca = _parse_coord(row[2], line)
            b, cb = _parse_coord(row[3], line)
            conventions.update((ca, cb))
            if len(conventions) > 1:
                raise ManifestError(f"line {line}: mixed coordinate conventions")
            role, domain = row[4].strip(), row[5].strip()
            if role not in ROLES:
                raise ManifestError(f"line {line}: unknown role {role!r}")
            if domain not in DOMAINS:
                raise ManifestError(f"line {line}: unknown domain {domain!r}")
            labels = row[6].strip() or None if len(row) == 7 else None
            if (domain == "source" and role == "train") != (labels is not None):
                raise ManifestError(f"line {line}: label map must be present iff domain=source and role=train")
            records.append(Record(rid, row[1], (a, b), role, domain, labels))
    return DatasetManifest(records, conventions.pop() if conventions else "utm", path.parent)


def write_manifest(path: PathLike, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HEADER + ["labels"])
        for r in manifest.records:
            w.writerow([r.id, r.path, _format_coord(r.coord[0], manifest.convention),
                        _format_coord(r.coord[1], manifest.convention), r.role, r.domain, r.labels or ""])


def subsample_queries(manifest: DatasetManifest, spacing_m: float) -> DatasetManifest:
    """Keep a query only if it is at least ``spacing_m`` from every kept query."""
    kept: List[Record] = []
    for r in manifest.records:
        if r.role == "query":
            if any(geo_distance(r.coord, k.coord, manifest.convention) < spacing_m
                   for k in kept if k.role == "query"):
                continue
        kept.append(r)
    return DatasetManifest(kept, manifest.convention, manifest.root)


# -- PGM label maps ---------------------------------------------------------------------

def _pgm_tokens(buf: bytes):
    """Yield header tokens and the offset just past the single whitespace byte."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(buf)
    if tokens[0] != b"P5":
        raise ManifestError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ManifestError(f"{path}: only 8-bit PGM supported")
    data = buf[offset:offset + w * h]
    if len(data) != w * h:
        raise ManifestError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: PathLike, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim != 2 or array.min() < 0 or array.max() > 255:
        raise ValueError("PGM payload must be a 2-D array of values in [0, 255]")
    h, w = array.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(array.astype(np.uint8).tobytes())


def load_label_map(path: PathLike, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = read_pgm(path).astype(np.int64)
    bad = (labels >= num_classes) & (labels != IGNORE_LABEL)
    if bad.any():
        raise ManifestError(f"{path}: class id {int(labels[bad][0])} outside [0, {num_classes}) and not {IGNORE_LABEL}")
    return labels


# -- synthetic fixture ------------------------------------------------------------------------

@dataclass
class FixtureSpec:
    places: int = 32
    views: int = 4
    shape: Tuple[int, int, int] = (3, 64, 64)
    domain_shift: float = 0.3
    grid: int = 4
    place_spacing_m: float = 100.0
    view_radius_m: float = 4.0
    jitter_px: int = 4
    distractors: Tuple[int, int] = (0, 1)
    illumination: float = 0.1
    noise: float = 0.1
    texture: float = 0.0
    contrast: float = 0.4


def _palette(rng: np.random.Generator, channels: int, min_gap: float = 0.6) -> Tuple[np.ndarray, np.ndarray]:
    colors = np.empty((NUM_CLASSES, channels))
    k = 0
    while k < NUM_CLASSES:
        c = rng.uniform(-1.0, 1.0, size=channels)
        if k == 0 or np.sqrt(((colors[:k] - c) ** 2).sum(axis=1)).min() >= min_gap:
            colors[k] = c
            k += 1
    # per-class stripe frequency gives each class a texture cue besides colour
    freqs = rng.uniform(0.2, 1.2, size=(NUM_CLASSES, 2)) * rng.choice([-1, 1], size=(NUM_CLASSES, 2))
    return colors, freqs


def _render(layout: np.ndarray, spec: FixtureSpec, colors: np.ndarray, freqs: np.ndarray,
            rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    c, h, w = spec.shape
    cell_h, cell_w = h // spec.grid, w // spec.grid
    dy, dx = rng.integers(-spec.jitter_px, spec.jitter_px + 1, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    gy = np.clip((yy + dy) // cell_h, 0, spec.grid - 1)
    gx = np.clip((xx + dx) // cell_w, 0, spec.grid - 1)
    labels = layout[gy, gx].copy()
    lo, hi = spec.distractors
    for _ in range(rng.integers(lo, hi + 1)):
        cls = rng.integers(FIRST_DYNAMIC_CLASS, NUM_CLASSES)
        bh, bw = rng.integers(h // 8, h // 3, size=2)
        y0, x0 = rng.integers(0, h - bh), rng.integers(0, w - bw)
        labels[y0:y0 + bh, x0:x0 + bw] = cls
    img = colors[labels].transpose(2, 0, 1).copy()
    f = freqs[labels]
    img += spec.texture * np.sin(f[..., 0] * yy + f[..., 1] * xx)[None]
    gain = 1.0 + spec.illumination * rng.uniform(-1.0, 1.0, size=(c, 1, 1))
    offset = spec.illumination * rng.uniform(-1.0, 1.0, size=(c, 1, 1))
    img = spec.contrast * (gain * img + offset) + spec.noise * rng.standard_normal((c, h, w))
    return img, labels


def domain_shift_pattern(shape: Tuple[int, int, int], seed: int) -> np.ndarray:
    """Fixed target-domain pattern: a per-pixel, per-channel random sign field (unit amplitude)."""
    rng = np.random.default_rng([seed, 0x7A46])
    return rng.choice([-1.0, 1.0], size=tuple(shape))


def generate_fixture(out_dir: PathLike, seed: int, places: int = 32, views: int = 4,
                     shape: Tuple[int, int, int] = (3, 64, 64), domain_shift: float = 0.3,
                     **overrides) -> DatasetManifest:
    """Render a synthetic geotagged dataset into ``out_dir``.

    Each place gets a random semantic layout of static classes. Every place
    contributes ``views`` labelled source ``train`` views (which also serve as
    the evaluation gallery) and ``views`` ``query`` views rendered in the
    target domain, i.e. shifted by ``domain_shift`` times a fixed pattern.
    Writes ``manifest.csv``, ``images/*.vprt`` and ``labels/*.pgm``.
    """
    spec = FixtureSpec(places=places, views=views, shape=tuple(shape), domain_shift=domain_shift, **overrides)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    colors, freqs = _palette(rng, spec.shape[0])
    shift = spec.domain_shift * domain_shift_pattern(spec.shape, seed)
    records: List[Record] = []
    rid = 0
    for p in range(spec.places):
        layout = rng.integers(0, FIRST_DYNAMIC_CLASS, size=(spec.grid, spec.grid))
        centre = np.array([spec.place_spacing_m * p, 0.0])
        views = []
        for v in range(spec.views):
            r = spec.view_radius_m * np.sqrt(rng.uniform())
            theta = rng.uniform(0, 2 * np.pi)
            coord = centre + r * np.array([np.cos(theta), np.sin(theta)])
            img, labels = _render(layout, spec, colors, freqs, rng)
            views.append((v, (float(coord[0]), float(coord[1])), img))
            name = f"p{p:03d}_train{v}"
            save_tensor(out / "images" / f"{name}.vprt", img)
            write_pgm(out / "labels" / f"{name}.pgm", labels)
            records.append(Record(rid, f"images/{name}.vprt", views[-1][1], "train", "source",
                                  f"labels/{name}.pgm"))
            rid += 1
        # target-domain copies of the same views
        for v, coord, img in views:
            name = f"p{p:03d}_query{v}"
            save_tensor(out / "images" / f"{name}.vprt", img + shift)
            records.append(Record(rid, f"images/{name}.vprt", coord, "query", "target", None))
            rid += 1
    manifest = DatasetManifest(records, "utm", out)
    write_manifest(out / "manifest.csv", manifest)
    return manifest
