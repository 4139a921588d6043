"""Portable pixmap I/O, dataset manifests, the synthetic generator and HFI/LFI views."""

from __future__ import annotations

import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .spectral import _is_pow2, ring_distance, spectral_filter

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.tsv"
HEADER = "path\tlabel\tsplit\tknown"


class ManifestError(ValueError):
    pass


# -- pixmaps -------------------------------------------------------------------


def write_pnm(path, pixels: np.ndarray) -> None:
    """Write 8-bit greyscale ``(H, W)`` as P5 or RGB ``(H, W, 3)`` as P6."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise TypeError("pixmaps are written from uint8 arrays")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write pixel array of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ValueError("truncated pixmap header")
    return buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 pixmap with maxval 255 into a uint8 array."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported pixmap magic {magic!r}")
    w_tok, pos = _read_token(buf, pos)
    h_tok, pos = _read_token(buf, pos)
    m_tok, pos = _read_token(buf, pos)
    w, h, maxval = int(w_tok), int(h_tok), int(m_tok)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    raster = buf[pos:pos + size]
    if len(raster) != size:
        raise ValueError(f"{path}: raster truncated ({len(raster)} of {size} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` floats in [0, 1] to an ``(H, W, 3)`` byte raster."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    arr = pixels.astype(np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


# -- manifest ------------------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: int
    split: str
    known: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list[SampleRecord]
    n_classes: int
    known_classes: list[int]
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    extra: dict[str, str] = field(default_factory=dict)

    def class_index(self, label: int) -> int:
        """Classifier index of a known class label."""
        return self.known_classes.index(label)

    def select(self, split: str, known: bool | None = None) -> list[SampleRecord]:
        return [e for e in self.entries
                if e.split == split and (known is None or bool(e.known) == known)]

    def validate(self) -> None:
        known = set(self.known_classes)
        for e in self.entries:
            if not 0 <= e.label < self.n_classes:
                raise ManifestError(f"{e.path}: label {e.label} outside [0, {self.n_classes})")
            if e.split not in SPLITS:
                raise ManifestError(f"{e.path}: bad split {e.split!r}")
            if e.known != int(e.label in known):
                raise ManifestError(f"{e.path}: known flag disagrees with known-class list")
            if not e.known and e.split != "test":
                raise ManifestError(f"{e.path}: unknown-class sample outside the test split")

    def to_text(self) -> str:
        lines = [f"# classes {self.n_classes}",
                 "# known " + " ".join(str(c) for c in self.known_classes)]
        if self.mean is not None:
            lines.append("# mean " + " ".join(repr(float(v)) for v in self.mean))
            lines.append("# std " + " ".join(repr(float(v)) for v in self.std))
        for k, v in self.extra.items():
            lines.append(f"# {k} {v}")
        lines.append(HEADER)
        lines += [f"{e.path}\t{e.label}\t{e.split}\t{e.known}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def parse_manifest(text: str, root: Path) -> DatasetManifest:
    meta: dict[str, str] = {}
    entries: list[SampleRecord] = []
    seen_header = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(" ")
            meta[key] = value.strip()
            continue
        if not seen_header:
            if line.rstrip("\r") != HEADER:
                raise ManifestError(f"line {lineno}: expected header {HEADER!r}")
            seen_header = True
            continue
        fields = line.rstrip("\r").split("\t")
        try:
            path, label, split, known = fields
            rec = SampleRecord(path, int(label), split, int(known))
        except ValueError:
            raise ManifestError(f"line {lineno}: malformed record {line!r}") from None
        if rec.split not in SPLITS or rec.known not in (0, 1):
            raise ManifestError(f"line {lineno}: malformed record {line!r}")
        entries.append(rec)
    if not seen_header:
        raise ManifestError("manifest has no header line")
    try:
        n_classes = int(meta.pop("classes"))
        known = [int(v) for v in meta.pop("known").split()]
        mean = np.array([float(v) for v in meta.pop("mean").split()]) if "mean" in meta else None
        std = np.array([float(v) for v in meta.pop("std").split()]) if "std" in meta else None
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"bad manifest metadata: {exc}") from None
    return DatasetManifest(root, entries, n_classes, known, mean, std, meta)


class Dataset:
    """A manifest plus normalized image access."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, np.ndarray] = {}

    @property
    def known_classes(self) -> list[int]:
        return self.manifest.known_classes

    def raw(self, rec: SampleRecord) -> np.ndarray:
        """Image in [0, 1] as ``(3, H, W)`` floats."""
        img = self._cache.get(rec.path)
        if img is None:
            fpath = self.manifest.root / rec.path
            if not fpath.exists():
                raise FileNotFoundError(f"missing image {fpath}")
            img = from_uint8(read_pnm(fpath))
            if not (_is_pow2(img.shape[1]) and _is_pow2(img.shape[2])):
                raise ValueError(f"{fpath}: size {img.shape[1]}x{img.shape[2]} is not a power of two")
            self._cache[rec.path] = img
        return img

    def normalize(self, images: np.ndarray) -> np.ndarray:
        m = self.manifest
        if m.mean is None:
            return images
        return (images - m.mean[:, None, None]) / m.std[:, None, None]

    def arrays(self, split: str, known: bool | None = None, transform=None, dtype=np.float32):
        """Normalized images, classifier labels (-1 for unknowns) and known flags."""
        recs = self.manifest.select(split, known)
        if not recs:
            return (np.zeros((0, 3, 1, 1), dtype=dtype), np.zeros(0, dtype=np.int64),
                    np.zeros(0, dtype=bool))
        imgs = np.stack([self.raw(r) for r in recs])
        if transform is not None:
            imgs = transform(imgs)
        imgs = self.normalize(imgs).astype(dtype)
        labels = np.array([self.manifest.class_index(r.label) if r.known else -1 for r in recs])
        flags = np.array([bool(r.known) for r in recs])
        return imgs, labels, flags


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = parse_manifest(path.read_text(encoding="utf-8"), path.parent)
    manifest.validate()
    for rec in manifest.entries:
        if not (manifest.root / rec.path).exists():
            raise FileNotFoundError(f"manifest references missing file {rec.path}")
    return Dataset(manifest)


def split_known_unknown(manifest: DatasetManifest, known: list[int]) -> DatasetManifest:
    """Re-designate known classes; unknown classes keep only their test samples."""
    known = sorted(set(int(c) for c in known))
    present = {e.label for e in manifest.entries}
    if any(c not in present for c in known):
        raise ManifestError(f"known classes {known} not all present in the data")
    unknown = sorted(present - set(known))
    missing = [c for c in unknown if not any(e.label == c and e.split == "test" for e in manifest.entries)]
    if missing:
        raise ManifestError(f"unknown classes {missing} have no test samples")
    entries = [replace(e, known=int(e.label in known)) for e in manifest.entries
               if e.label in known or e.split == "test"]
    log.info("split: %d known classes, %d unknown classes, %d test unknowns",
             len(known), len(unknown), sum(1 for e in entries if not e.known))
    if not unknown:
        log.warning("all classes are known: open-set metrics will be disabled")
    return replace(manifest, entries=entries, known_classes=known)


# -- HFI / LFI -----------------------------------------------------------------


def ideal_mask(h: int, w: int, cutoff: float, kind: str) -> np.ndarray:
    """Centred hard mask keeping ring distance ``rho >= cutoff`` (HFI) or ``< cutoff`` (LFI)."""
    if not 0 < cutoff < 1:
        raise ValueError(f"cutoff must lie in (0, 1), got {cutoff}")
    d, d_max = ring_distance(h, w)
    rho = d / d_max
    if kind == "HFI":
        return (rho >= cutoff).astype(np.float64)
    if kind == "LFI":
        return (rho < cutoff).astype(np.float64)
    raise ValueError(f"kind must be 'HFI' or 'LFI', got {kind!r}")


def hfi_lfi_transform(image: np.ndarray, cutoff: float = 0.25, kind: str = "LFI") -> np.ndarray:
    """High- or low-frequency reconstruction of ``(..., C, H, W)`` images."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"image size {h}x{w} is not a power of two")
    return spectral_filter(image, ideal_mask(h, w, cutoff, kind))[0]


# -- synthetic generator -------------------------------------------------------


@dataclass
class SynthConfig:
    image_size: int = 64
    n_classes: int = 10
    n_known: int = 6
    n_train: int = 200
    n_val: int = 20
    n_test: int = 50
    n_blobs: int = 3
    blob_sigma: float = 6.0
    blob_amplitude: float = 0.22
    blob_jitter: float = 1.5
    texture_amplitude: float = 0.12
    texture_periods: tuple[float, float] = (2.6, 3.6)
    phase_jitter: float = 0.3
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if not _is_pow2(self.image_size) or self.image_size < 8:
            raise ValueError(f"image_size {self.image_size} must be a power of two >= 8")
        if not 0 < self.n_known < self.n_classes:
            raise ValueError("need 0 < n_known < n_classes")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one sample per class")

    def known_classes(self) -> list[int]:
        """Known classes drawn evenly from both cue groups."""
        low = list(range(self.n_classes // 2))
        high = list(range(self.n_classes // 2, self.n_classes))
        n_low = (self.n_known + 1) // 2
        return sorted(low[:n_low] + high[:self.n_known - n_low])

    def cue(self, label: int) -> str:
        return "low" if label < self.n_classes // 2 else "high"


@dataclass
class _ClassCue:
    centers: np.ndarray      # (n_blobs, 2)
    blob_colors: np.ndarray  # (n_blobs, 3)
    angle: float
    period: float
    phase: float
    tex_color: np.ndarray    # (3,)


def _random_cue(rng: np.random.Generator, cfg: SynthConfig) -> _ClassCue:
    s = cfg.image_size
    return _ClassCue(
        centers=rng.uniform(0.2 * s, 0.8 * s, size=(cfg.n_blobs, 2)),
        blob_colors=rng.choice([-1.0, 1.0], size=(cfg.n_blobs, 1)) * rng.uniform(0.5, 1.0, size=(cfg.n_blobs, 3)),
        angle=float(rng.uniform(0, np.pi)),
        period=float(rng.uniform(*cfg.texture_periods)),
        phase=float(rng.uniform(0, 2 * np.pi)),
        tex_color=rng.uniform(0.5, 1.0, size=3),
    )


def class_cues(cfg: SynthConfig) -> tuple[list[_ClassCue], _ClassCue]:
    """Per-class cues plus the shared default cue.

    Low-cue classes own their blob layout and inherit the default texture;
    high-cue classes own their texture and inherit the default blobs.
    """
    rng = np.random.default_rng([cfg.seed, 0])
    default = _random_cue(rng, cfg)
    cues = []
    for label in range(cfg.n_classes):
        own = _random_cue(rng, cfg)
        if cfg.cue(label) == "low":
            cues.append(replace(default, centers=own.centers, blob_colors=own.blob_colors))
        else:
            cues.append(replace(default, angle=own.angle, period=own.period, phase=own.phase,
                                tex_color=own.tex_color))
    return cues, default


def render(cue: _ClassCue, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    # shared global layout: a soft vertical gradient and a centred disc
    layout = 0.45 + 0.08 * (yy / s - 0.5) + 0.06 * np.exp(-((xx - s / 2) ** 2 + (yy - s / 2) ** 2) / (2 * (0.3 * s) ** 2))
    img = np.repeat(layout[None], 3, axis=0)
    for (cy, cx), color in zip(cue.centers, cue.blob_colors):
        cy += rng.normal(0, cfg.blob_jitter)
        cx += rng.normal(0, cfg.blob_jitter)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * cfg.blob_sigma ** 2))
        img += cfg.blob_amplitude * color[:, None, None] * g[None]
    k = 2 * np.pi / cue.period
    phase = cue.phase + rng.normal(0, cfg.phase_jitter)
    wave = np.sin(k * (np.cos(cue.angle) * xx + np.sin(cue.angle) * yy) + phase)
    img += cfg.texture_amplitude * cue.tex_color[:, None, None] * wave[None]
    img += rng.normal(0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _nearest_centroid_acc(train: np.ndarray, labels: np.ndarray, probe: np.ndarray,
                          probe_labels: np.ndarray) -> float:
    classes = np.unique(labels)
    cents = np.stack([train[labels == c].mean(axis=0) for c in classes]).reshape(len(classes), -1)
    flat = probe.reshape(len(probe), -1)
    d = (flat ** 2).sum(1)[:, None] - 2 * flat @ cents.T + (cents ** 2).sum(1)[None]
    return float(np.mean(classes[d.argmin(axis=1)] == probe_labels))


def generate_synthetic(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Render the dataset into ``out_dir`` (replaced atomically) and return its manifest."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    cues, _ = class_cues(cfg)
    known = cfg.known_classes()
    tmp = Path(tempfile.mkdtemp(prefix=".synth-", dir=out_dir.parent))
    try:
        entries: list[SampleRecord] = []
        train_imgs, train_labels = [], []
        for label in range(cfg.n_classes):
            is_known = label in known
            counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test} if is_known \
                else {"test": cfg.n_test}
            rng = np.random.default_rng([cfg.seed, 1, label])
            cdir = tmp / f"class_{label:02d}"
            cdir.mkdir()
            for split, count in counts.items():
                for idx in range(count):
                    img = render(cues[label], cfg, rng)
                    pixels = to_uint8(img)
                    rel = f"class_{label:02d}/{split}_{idx:04d}.ppm"
                    write_pnm(tmp / rel, pixels)
                    entries.append(SampleRecord(rel, label, split, int(is_known)))
                    if split == "train":
                        train_imgs.append(from_uint8(pixels))
                        train_labels.append(label)
        train = np.stack(train_imgs)
        tl = np.array(train_labels)
        mean = train.mean(axis=(0, 2, 3))
        std = train.std(axis=(0, 2, 3))
        tex = np.array([cfg.cue(c) == "high" for c in tl])
        lfi = hfi_lfi_transform(train[tex], 0.25, "LFI")
        extra = {
            "ncc_acc": repr(_nearest_centroid_acc(train, tl, train, tl)),
            "ncc_texture_acc": repr(_nearest_centroid_acc(train, tl, train[tex], tl[tex])),
            "ncc_texture_lfi_acc": repr(_nearest_centroid_acc(train, tl, lfi, tl[tex])),
            "hfi_lfi": "ideal chebyshev-ring mask, default cutoff 0.25",
            "seed": str(cfg.seed),
        }
        manifest = DatasetManifest(out_dir, entries, cfg.n_classes, known, mean, std, extra)
        manifest.write(tmp / MANIFEST_NAME)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest
