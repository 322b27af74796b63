"""Procedural multi-domain segmentation data and its on-disk layout.

Each domain renders the same kind of anatomy (1-2 perturbed ellipses) under a
different photometric transform, so label geometry is domain invariant and
only appearance shifts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import Rng
from .tensorio import FormatError, load_tensors, save_tensors

SPLITS = ("train", "test")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    id: int
    gamma: float = 1.0
    brightness: float = 0.0
    noise_sigma: float = 0.0
    texture_freq: float = 0.0
    texture_amp: float = 0.0
    background: float = 0.2
    contrast: float = 0.5
    illum_amp: float = 0.0


def default_domains() -> list[DomainSpec]:
    """Three domains with increasingly strong appearance shift from domain 0."""
    return [
        DomainSpec(0, gamma=1.0, brightness=0.0, noise_sigma=0.03, background=0.2, contrast=0.5),
        DomainSpec(1, gamma=0.6, brightness=0.1, noise_sigma=0.05, texture_freq=0.12,
                   texture_amp=0.06, background=0.2, contrast=0.5, illum_amp=0.1),
        DomainSpec(2, gamma=2.2, brightness=-0.05, noise_sigma=0.07, texture_freq=0.3,
                   texture_amp=0.12, background=0.35, contrast=0.45),
    ]


@dataclass
class Sample:
    image: np.ndarray  # 1×H×W float32 in [-1, 1]
    mask: np.ndarray  # H×W uint8 class indices
    domain: int


# -- rendering -----------------------------------------------------------


def _blob(h: int, w: int, rng: Rng) -> np.ndarray:
    cy = rng.uniform(0.25, 0.75) * h
    cx = rng.uniform(0.25, 0.75) * w
    ra = rng.uniform(0.10, 0.25) * min(h, w)
    rb = rng.uniform(0.10, 0.25) * min(h, w)
    theta = rng.uniform(0.0, np.pi)
    k = int(rng.integers(2, 6))
    amp = rng.uniform(0.0, 0.2)
    phase = rng.uniform(0.0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    r = np.sqrt((u / ra) ** 2 + (v / rb) ** 2)
    phi = np.arctan2(v, u)
    return r <= 1.0 + amp * np.sin(k * phi + phase)


def gen_geometry(rng: Rng, h: int, w: int, classes: int, max_tries: int = 50) -> np.ndarray:
    for _ in range(max_tries):
        mask = np.zeros((h, w), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 3))):
            cls = int(rng.integers(1, classes))
            mask[_blob(h, w, rng)] = cls
        frac = (mask > 0).mean()
        if 0.05 <= frac <= 0.40:
            return mask
    raise GenerationError(f"could not place foreground covering 5-40% of a {h}×{w} image")


def render(mask: np.ndarray, spec: DomainSpec, rng: Rng, classes: int) -> np.ndarray:
    """Photometric rendering of a label map under one domain's appearance."""
    h, w = mask.shape
    levels = spec.background + spec.contrast * np.linspace(0.0, 1.0, classes)
    base = levels[mask]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if spec.illum_amp:
        base = base + spec.illum_amp * (xx / max(w - 1, 1) - 0.5)
    v = np.clip(base, 0.0, 1.0) ** spec.gamma + spec.brightness
    if spec.texture_amp:
        ang = rng.uniform(0.0, np.pi)
        ph = rng.uniform(0.0, 2 * np.pi)
        v = v + spec.texture_amp * np.sin(
            2 * np.pi * spec.texture_freq * (xx * np.cos(ang) + yy * np.sin(ang)) + ph
        )
    if spec.noise_sigma:
        v = v + rng.normal(0.0, spec.noise_sigma, (h, w))
    return np.clip(2.0 * v - 1.0, -1.0, 1.0).astype(np.float32)[None]


def gen_sample(spec: DomainSpec, rng: Rng, h: int = 64, w: int = 64, classes: int = 2) -> Sample:
    """Geometry is drawn from ``rng`` before any appearance draw, so masks depend on the seed only."""
    if classes < 2:
        raise ValueError("need at least two classes")
    if h < 32 or w < 32:
        raise ValueError(f"image extents must be >= 32, got {h}×{w}")
    mask = gen_geometry(rng.split(0), h, w, classes)
    image = render(mask, spec, rng.split(1), classes)
    return Sample(image, mask, spec.id)


def histogram_chi2(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """Symmetric chi-square distance between intensity histograms on [-1, 1]."""
    ha, _ = np.histogram(a, bins=bins, range=(-1, 1))
    hb, _ = np.histogram(b, bins=bins, range=(-1, 1))
    ha = ha / max(ha.sum(), 1)
    hb = hb / max(hb.sum(), 1)
    denom = ha + hb
    ok = denom > 0
    return float(0.5 * ((ha - hb)[ok] ** 2 / denom[ok]).sum())


# -- datasets on disk ------------------------------------------------------


@dataclass
class ManifestRow:
    path: str
    domain: int
    split: str
    labeled: bool


def gen_dataset(
    specs: Sequence[DomainSpec],
    counts: dict[int, tuple[int, int]] | tuple[int, int],
    out_dir,
    seed: int = 0,
    labeled_domain: int = 0,
    n_labeled: int = 10,
    h: int = 64,
    w: int = 64,
    classes: int = 2,
) -> Path:
    """Write one file per sample plus ``manifest.tsv``; returns the manifest path.

    ``counts`` maps domain id to (n_train, n_test), or is one pair for all domains.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    rng = Rng(seed)
    rows: list[ManifestRow] = []
    for spec in specs:
        n_train, n_test = counts[spec.id] if isinstance(counts, dict) else counts
        if n_train + n_test < 1:
            raise ValueError(f"domain {spec.id} needs at least one sample")
        (out / f"d{spec.id}").mkdir(exist_ok=True)
        for split, n in (("train", n_train), ("test", n_test)):
            for i in range(n):
                s = gen_sample(spec, rng.split(spec.id, SPLITS.index(split), i), h, w, classes)
                rel = f"d{spec.id}/{split}_{i:04d}.bcmd"
                save_tensors(out / rel, [s.image, s.mask])
                labeled = split == "train" and spec.id == labeled_domain and i < n_labeled
                rows.append(ManifestRow(rel, spec.id, split, labeled))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    lines = [
        f"{r.path}\t{r.domain}\t{r.split}\t{'labeled' if r.labeled else 'unlabeled'}" for r in rows
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[2] not in SPLITS or parts[3] not in ("labeled", "unlabeled"):
            raise FormatError(f"{path}:{lineno}: malformed manifest row {line!r}")
        rows.append(ManifestRow(parts[0], int(parts[1]), parts[2], parts[3] == "labeled"))
    return rows


_FILTER_RE = re.compile(r"^\s*id\s*==\s*(\d+)\s*$")


def parse_domain_filter(expr: str) -> int:
    m = _FILTER_RE.match(expr)
    if not m:
        raise ValueError(f"unsupported domain filter {expr!r}; expected 'id==K'")
    return int(m.group(1))


@dataclass
class Dataset:
    """Lazily loaded view over manifest rows."""

    root: Path
    rows: list[ManifestRow]
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, i: int) -> Sample:
        row = self.rows[i]
        key = row.path
        if key not in self._cache:
            path = self.root / row.path
            arrays = load_tensors(path)
            if len(arrays) != 2 or arrays[0].dtype != np.float32 or arrays[1].dtype != np.uint8:
                raise FormatError(f"{path}: expected a float32 image record and a uint8 mask record")
            self._cache[key] = Sample(arrays[0], arrays[1], row.domain)
        return self._cache[key]

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def select(self, domain: int | str | None = None, split: str | None = None, labeled: bool | None = None) -> "Dataset":
        if isinstance(domain, str):
            domain = parse_domain_filter(domain)
        rows = [
            r
            for r in self.rows
            if (domain is None or r.domain == domain)
            and (split is None or r.split == split)
            and (labeled is None or r.labeled == labeled)
        ]
        return Dataset(self.root, rows, self._cache)

    @property
    def domains(self) -> list[int]:
        return sorted({r.domain for r in self.rows})

    def epoch_order(self, rng: Rng, epoch: int) -> np.ndarray:
        """Shuffled index order for one epoch; depends only on (rng seed/path, epoch)."""
        return rng.split(epoch).permutation(len(self))


def load_dataset(manifest) -> Dataset:
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest {manifest} not found")
    rows = read_manifest(manifest)
    root = manifest.parent
    missing = [r.path for r in rows if not (root / r.path).exists()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} manifest entries missing, first: {root / missing[0]}")
    return Dataset(root, rows)
