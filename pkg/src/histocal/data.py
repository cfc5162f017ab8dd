"""Cohorts of capture spots: normalization, HVG selection, LOSO folds, disk I/O.

A cohort lives on disk as::

    <dir>/manifest.json          name, gene_names, slide ids, d_img, optional hvg_index
    <dir>/<slide_id>/expr.csv    spot_id, <gene names...>   raw counts, one row per spot
    <dir>/<slide_id>/coords.csv  spot_id, x, y
    <dir>/<slide_id>/feats.csv   spot_id, f0..f{d_img-1}

All CSVs are UTF-8 with '.' decimals and rows joinable on spot_id.  Expression
row order in expr.csv is the canonical spot order of the slide.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FoldError, InvalidInputError, ShapeError

LIBRARY_EPS = 1e-12  # guards the library-size total for all-zero spots
STD_EPS = 1e-8


@dataclass
class SpotRecord:
    """One capture location: ids, 2-D coordinate, image features, raw counts."""

    slide_id: str
    spot_id: str
    coord: np.ndarray  # shape (2,)
    feat: np.ndarray  # shape (d_img,)
    expr_raw: np.ndarray  # shape (g_all,), nonnegative counts


@dataclass
class Cohort:
    name: str
    gene_names: list[str]
    slides: dict[str, list[SpotRecord]]  # insertion order = manifest order
    d_img: int
    hvg_index: list[int] | None = None

    @property
    def slide_ids(self) -> list[str]:
        return list(self.slides.keys())

    @property
    def n_genes_all(self) -> int:
        return len(self.gene_names)

    def validate(self) -> None:
        seen: set[tuple[str, str]] = set()
        for sid, spots in self.slides.items():
            if not spots:
                raise InvalidInputError(f"slide {sid!r} is empty")
            for spot in spots:
                key = (spot.slide_id, spot.spot_id)
                if key in seen:
                    raise InvalidInputError(f"duplicate spot {key}")
                seen.add(key)
                if spot.feat.shape != (self.d_img,):
                    raise ShapeError(
                        f"spot {key}: feat length {spot.feat.shape[0]} != d_img {self.d_img}"
                    )
                if spot.expr_raw.shape != (self.n_genes_all,):
                    raise ShapeError(f"spot {key}: expr length mismatch")
                if np.any(spot.expr_raw < 0):
                    raise InvalidInputError(f"spot {key}: negative count")
        if self.hvg_index is not None:
            idx = list(self.hvg_index)
            if len(set(idx)) != len(idx) or any(i < 0 or i >= self.n_genes_all for i in idx):
                raise ConfigError("hvg_index entries must be unique and < number of genes")


@dataclass
class Standardizer:
    """Per-gene z-scoring fitted on training slides only."""

    mu: np.ndarray
    sigma: np.ndarray
    epsilon: float = STD_EPS

    def apply(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if g.shape[-1] != self.mu.shape[0]:
            raise ShapeError(f"standardize: got {g.shape[-1]} genes, expected {self.mu.shape[0]}")
        return (g - self.mu) / (self.sigma + self.epsilon)

    def invert(self, g_std: np.ndarray) -> np.ndarray:
        g_std = np.asarray(g_std, dtype=np.float64)
        if g_std.shape[-1] != self.mu.shape[0]:
            raise ShapeError(f"invert: got {g_std.shape[-1]} genes, expected {self.mu.shape[0]}")
        return g_std * (self.sigma + self.epsilon) + self.mu


@dataclass
class LosoFold:
    train_slides: list[str]
    test_slide: str
    standardizer: Standardizer

    @property
    def fold_id(self) -> str:
        return f"test-{self.test_slide}"


def lognorm(expr_raw: np.ndarray, scale: float = 1e4) -> np.ndarray:
    """Library-size normalization followed by log1p.

    Each gene maps to log(1 + scale * count / total) with the total guarded by
    LIBRARY_EPS so an all-zero spot stays all-zero.
    """
    expr_raw = np.asarray(expr_raw, dtype=np.float64)
    if np.any(expr_raw < 0):
        raise InvalidInputError("lognorm: negative count")
    if scale <= 0:
        raise InvalidInputError("lognorm: scale must be positive")
    total = expr_raw.sum(axis=-1, keepdims=expr_raw.ndim > 1)
    if expr_raw.ndim == 1:
        total = max(float(total), LIBRARY_EPS)
    else:
        total = np.maximum(total, LIBRARY_EPS)
    return np.log1p(scale * expr_raw / total)


def lognorm_matrix(spots: list[SpotRecord], scale: float = 1e4) -> np.ndarray:
    """Stacked log-normalized expression, one row per spot."""
    return np.stack([lognorm(s.expr_raw, scale) for s in spots])


def select_hvg(cohort: Cohort, n_genes: int, scale: float = 1e4) -> list[int]:
    """Indices of the n_genes highest-variance genes (log-normalized, all spots).

    Ties break toward the lower gene index; the result is sorted ascending and
    stored on the cohort.
    """
    if n_genes < 1 or n_genes > cohort.n_genes_all:
        raise ConfigError(f"select_hvg: G={n_genes} outside [1, {cohort.n_genes_all}]")
    all_spots = [s for sid in cohort.slide_ids for s in cohort.slides[sid]]
    mat = lognorm_matrix(all_spots, scale)
    var = mat.var(axis=0)
    order = np.lexsort((np.arange(var.size), -var))  # variance desc, index asc
    chosen = sorted(int(i) for i in order[:n_genes])
    cohort.hvg_index = chosen
    return chosen


def hvg_lognorm_matrix(cohort: Cohort, slide_ids: list[str], scale: float = 1e4) -> np.ndarray:
    """Log-normalized expression restricted to the cohort's HVG set."""
    if cohort.hvg_index is None:
        raise ConfigError("cohort has no hvg_index; call select_hvg first")
    spots = [s for sid in slide_ids for s in cohort.slides[sid]]
    return lognorm_matrix(spots, scale)[:, cohort.hvg_index]


def fit_standardizer(cohort: Cohort, train_slides: list[str], scale: float = 1e4) -> Standardizer:
    """Per-gene mean and population std of log-normalized HVG expression."""
    if not train_slides:
        raise FoldError("fit_standardizer: empty training set")
    for sid in train_slides:
        if sid not in cohort.slides or not cohort.slides[sid]:
            raise FoldError(f"fit_standardizer: slide {sid!r} missing or empty")
    mat = hvg_lognorm_matrix(cohort, train_slides, scale)
    return Standardizer(mu=mat.mean(axis=0), sigma=mat.std(axis=0))


def standardize(g: np.ndarray, standardizer: Standardizer) -> np.ndarray:
    return standardizer.apply(g)


def make_folds(cohort: Cohort, scale: float = 1e4) -> list[LosoFold]:
    """One leave-one-slide-out fold per slide, standardizers fitted per fold."""
    sids = cohort.slide_ids
    if len(sids) < 2:
        raise ConfigError(f"make_folds: need >= 2 slides, got {len(sids)}")
    folds = []
    for test in sids:
        train = [s for s in sids if s != test]
        folds.append(
            LosoFold(
                train_slides=train,
                test_slide=test,
                standardizer=fit_standardizer(cohort, train, scale),
            )
        )
    return folds


def minmax_coords(coords: np.ndarray) -> np.ndarray:
    """Per-slide min-max map of raw coordinates into [0, 1]^2.

    A degenerate extent (all spots share a coordinate) maps to 0.5.
    """
    coords = np.asarray(coords, dtype=np.float64)
    lo = coords.min(axis=0, keepdims=True)
    hi = coords.max(axis=0, keepdims=True)
    span = hi - lo
    out = np.full_like(coords, 0.5)
    ok = span[0] > 0
    out[:, ok] = (coords[:, ok] - lo[:, ok]) / span[:, ok]
    return out


# ---------------------------------------------------------------------------
# disk format


def _fmt(x: float) -> str:
    v = float(x)
    if math.isfinite(v) and v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def save_cohort(cohort: Cohort, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "name": cohort.name,
        "gene_names": cohort.gene_names,
        "slides": cohort.slide_ids,
        "d_img": cohort.d_img,
    }
    if cohort.hvg_index is not None:
        manifest["hvg_index"] = list(cohort.hvg_index)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for sid, spots in cohort.slides.items():
        sdir = directory / sid
        sdir.mkdir(exist_ok=True)
        with open(sdir / "expr.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["spot_id"] + cohort.gene_names)
            for s in spots:
                w.writerow([s.spot_id] + [_fmt(v) for v in s.expr_raw])
        with open(sdir / "coords.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["spot_id", "x", "y"])
            for s in spots:
                w.writerow([s.spot_id, _fmt(s.coord[0]), _fmt(s.coord[1])])
        with open(sdir / "feats.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["spot_id"] + [f"f{i}" for i in range(cohort.d_img)])
            for s in spots:
                w.writerow([s.spot_id] + [_fmt(v) for v in s.feat])


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidInputError(f"{path}: empty file")
    return rows[0], rows[1:]


def read_slide(directory, slide_id: str, gene_names: list[str], d_img: int) -> list[SpotRecord]:
    """Load one slide's spot records, joining the three CSVs on spot_id."""
    sdir = Path(directory) / slide_id
    eheader, erows = _read_csv(sdir / "expr.csv")
    if eheader[1:] != gene_names:
        raise InvalidInputError(f"{sdir}/expr.csv: gene header does not match manifest")
    _, crows = _read_csv(sdir / "coords.csv")
    _, frows = _read_csv(sdir / "feats.csv")
    coords = {r[0]: np.array([float(r[1]), float(r[2])]) for r in crows}
    feats = {r[0]: np.array([float(v) for v in r[1:]], dtype=np.float64) for r in frows}
    spots = []
    for row in erows:
        spot_id = row[0]
        if spot_id not in coords or spot_id not in feats:
            raise InvalidInputError(f"slide {slide_id!r}: spot {spot_id!r} missing coords/feats")
        expr = np.array([float(v) for v in row[1:]], dtype=np.float64)
        if np.any(expr < 0):
            raise InvalidInputError(f"slide {slide_id!r}: negative count in spot {spot_id!r}")
        feat = feats[spot_id]
        if feat.shape != (d_img,):
            raise ShapeError(f"slide {slide_id!r}: feat length {feat.shape[0]} != d_img {d_img}")
        spots.append(
            SpotRecord(slide_id=slide_id, spot_id=spot_id, coord=coords[spot_id], feat=feat, expr_raw=expr)
        )
    return spots


@dataclass
class CohortStore:
    """Manifest-backed handle that loads slides from disk on request.

    Training code asks only for its fold's training slides, so a file-access
    log around these calls can verify that held-out slide files stay closed.
    """

    directory: Path
    name: str = field(init=False)
    gene_names: list[str] = field(init=False)
    slide_ids: list[str] = field(init=False)
    d_img: int = field(init=False)
    hvg_index: list[int] | None = field(init=False)

    def __post_init__(self):
        self.directory = Path(self.directory)
        mpath = self.directory / "manifest.json"
        if not mpath.exists():
            raise ConfigError(f"{self.directory}: no manifest.json")
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        self.name = manifest["name"]
        self.gene_names = list(manifest["gene_names"])
        self.slide_ids = list(manifest["slides"])
        self.d_img = int(manifest["d_img"])
        hvg = manifest.get("hvg_index")
        self.hvg_index = [int(i) for i in hvg] if hvg is not None else None

    def load_slides(self, slide_ids: list[str]) -> Cohort:
        """Cohort restricted to the given slides; reads only their files."""
        unknown = [s for s in slide_ids if s not in self.slide_ids]
        if unknown:
            raise FoldError(f"unknown slides {unknown}")
        slides = {sid: read_slide(self.directory, sid, self.gene_names, self.d_img) for sid in slide_ids}
        cohort = Cohort(
            name=self.name,
            gene_names=self.gene_names,
            slides=slides,
            d_img=self.d_img,
            hvg_index=list(self.hvg_index) if self.hvg_index is not None else None,
        )
        cohort.validate()
        return cohort

    def load_all(self) -> Cohort:
        return self.load_slides(self.slide_ids)


def load_cohort(directory, slides: list[str] | None = None) -> Cohort:
    store = CohortStore(directory)
    return store.load_slides(slides if slides is not None else store.slide_ids)
