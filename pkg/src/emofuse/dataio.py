"""Feature files, dataset manifests, window extraction, synthetic data.

Feature binary ("MMFE", little-endian):
    magic    4 bytes  b"MMFE"
    version  u16      1
    dtype    u8       0 = float32
    ndim     u8       2
    reserved 8 bytes  zeros
    dims     2 x u32  (T, D)
    payload  T*D float32, row-major

Manifests are JSON with ``classes`` (the 8 class names, fixed order),
``split`` and ``samples``; feature paths are relative to the manifest file.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    DtypeError,
    FormatError,
    MissingClassError,
    ParameterError,
    TruncatedError,
    VersionError,
)

MAGIC = b"MMFE"
FORMAT_VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sHBB8x")
DIMS = struct.Struct("<II")

CLASS_NAMES = (
    "Neutral", "Anger", "Disgust", "Fear",
    "Happiness", "Sadness", "Surprise", "Other",
)
N_CLASSES = len(CLASS_NAMES)
WINDOW_SIZES = (10, 15, 30, 60)

MODALITY_DIMS = {"visual": 512, "audio": 768, "text": 512}
SYNTH_NOISE_STD = 0.5  # variance fixed at 0.25 so `separation` alone sets difficulty


@dataclass
class FeatureSequence:
    """One modality's frame/segment features as a TxD float32 matrix."""

    modality: str
    data: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITY_DIMS:
            raise DataError(f"unknown modality {self.modality!r}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DataError(f"feature data must be TxD, got shape {self.data.shape}")
        t, d = self.data.shape
        if t < 1:
            raise DataError("feature sequence needs at least one frame")
        if d != MODALITY_DIMS[self.modality]:
            raise DataError(
                f"{self.modality} features must have D={MODALITY_DIMS[self.modality]}, got {d}")
        if not np.isfinite(self.data).all():
            raise DataError("feature data contains non-finite values")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.data.shape[1]


@dataclass
class WindowSample:
    """One training/eval unit: a visual window with its aligned audio slice."""

    sample_id: str
    visual: FeatureSequence
    audio: FeatureSequence
    label: int
    source_clip: str
    frame_range: tuple[int, int]

    def __post_init__(self):
        if not 0 <= self.label < N_CLASSES:
            raise DataError(f"label must be in [0, {N_CLASSES}), got {self.label}")
        if self.visual.T not in WINDOW_SIZES:
            raise DataError(
                f"visual window length {self.visual.T} not one of {WINDOW_SIZES}")


@dataclass
class ManifestEntry:
    sample_id: str
    label: int
    visual_path: str
    audio_path: str
    T_v: int
    T_a: int


@dataclass
class DatasetManifest:
    classes: tuple[str, ...]
    samples: list[ManifestEntry]
    split: str
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if tuple(self.classes) != CLASS_NAMES:
            raise DataError(f"manifest must carry the fixed 8-class list, got {self.classes}")
        if self.split not in ("train", "val", "test"):
            raise DataError(f"unknown split {self.split!r}")


@dataclass
class ClassStats:
    counts: np.ndarray
    weights: np.ndarray


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def write_feature_file(seq: FeatureSequence, path: str | Path) -> None:
    t, d = seq.data.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, 2))
        fh.write(DIMS.pack(t, d))
        fh.write(seq.data.astype("<f4", copy=False).tobytes())


def read_feature_header(path: str | Path) -> tuple[int, int]:
    """Validate the fixed header and return (T, D) without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise TruncatedError(f"{path}: file shorter than the {HEADER.size}-byte header")
        magic, version, dtype, ndim = HEADER.unpack(head)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise VersionError(f"{path}: unsupported version {version}")
        if dtype != DTYPE_F32:
            raise DtypeError(f"{path}: dtype code {dtype}, only float32 (0) is supported")
        if ndim != 2:
            raise FormatError(f"{path}: ndim {ndim}, expected 2")
        dims = fh.read(DIMS.size)
        if len(dims) < DIMS.size:
            raise TruncatedError(f"{path}: missing dims")
        return DIMS.unpack(dims)


def read_feature_file(path: str | Path, modality: str | None = None) -> FeatureSequence:
    """Read one feature file; modality is inferred from D unless given."""
    t, d = read_feature_header(path)
    offset = HEADER.size + DIMS.size
    expected = 4 * t * d
    with open(path, "rb") as fh:
        fh.seek(offset)
        payload = fh.read()
    if len(payload) < expected:
        raise TruncatedError(
            f"{path}: payload {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(t, d)
    if modality is None:
        modality = "audio" if d == MODALITY_DIMS["audio"] else "visual"
    return FeatureSequence(modality, data)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {
        "classes": list(manifest.classes),
        "split": manifest.split,
        "samples": [
            {
                "sample_id": s.sample_id, "label": s.label,
                "visual_path": s.visual_path, "audio_path": s.audio_path,
                "T_v": s.T_v, "T_a": s.T_a,
            }
            for s in manifest.samples
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and fully validate a manifest: class list, files, header shapes."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for key in ("classes", "split", "samples"):
        if key not in doc:
            raise DataError(f"{path}: manifest missing field {key!r}")
    entries = [ManifestEntry(**s) for s in doc["samples"]]
    manifest = DatasetManifest(tuple(doc["classes"]), entries, doc["split"], root=path.parent)
    for entry in entries:
        for rel, t_decl, mod in ((entry.visual_path, entry.T_v, "visual"),
                                 (entry.audio_path, entry.T_a, "audio")):
            fpath = path.parent / rel
            if not fpath.exists():
                raise DataError(f"{path}: referenced file {rel} does not exist")
            t, d = read_feature_header(fpath)
            if t != t_decl or d != MODALITY_DIMS[mod]:
                raise DataError(
                    f"{path}: {rel} header ({t}, {d}) does not match declared "
                    f"({t_decl}, {MODALITY_DIMS[mod]})")
    return manifest


def load_window_samples(manifest: DatasetManifest) -> list[WindowSample]:
    samples = []
    for entry in manifest.samples:
        samples.append(WindowSample(
            sample_id=entry.sample_id,
            visual=read_feature_file(manifest.root / entry.visual_path, "visual"),
            audio=read_feature_file(manifest.root / entry.audio_path, "audio"),
            label=entry.label,
            source_clip=entry.sample_id,
            frame_range=(0, entry.T_v),
        ))
    return samples


# ---------------------------------------------------------------------------
# window extraction
# ---------------------------------------------------------------------------

def extract_windows(clip_visual: FeatureSequence, clip_audio: FeatureSequence,
                    labels: np.ndarray, window: int, stride: int,
                    fps: float, audio_rate: float,
                    clip_id: str = "clip") -> list[WindowSample]:
    """Cut a labeled clip into fixed-length windows with aligned audio.

    Windows start at 0, stride, 2*stride, ...; a trailing partial window is
    dropped. Each window's audio slice covers the same wall-clock span:
    indices [floor(start/fps*audio_rate), floor(end/fps*audio_rate)). The
    window label is the majority per-frame label, ties to the lowest id.
    """
    if window not in WINDOW_SIZES:
        raise ParameterError(f"window must be one of {WINDOW_SIZES}, got {window}")
    if not isinstance(stride, int) or stride < 1:
        raise ParameterError(f"stride must be a positive integer, got {stride}")
    labels = np.asarray(labels)
    if labels.shape != (clip_visual.T,):
        raise DataError(
            f"labels length {labels.shape} does not match clip length {clip_visual.T}")
    if labels.min() < 0 or labels.max() >= N_CLASSES:
        raise DataError(f"per-frame labels outside [0, {N_CLASSES})")
    out: list[WindowSample] = []
    for start in range(0, clip_visual.T - window + 1, stride):
        end = start + window
        a_start = math.floor(start / fps * audio_rate)
        a_end = min(math.floor(end / fps * audio_rate), clip_audio.T)
        if a_start >= a_end:
            raise DataError(
                f"{clip_id}: empty audio slice [{a_start}, {a_end}) for frames "
                f"[{start}, {end})")
        label = int(np.bincount(labels[start:end], minlength=N_CLASSES).argmax())
        out.append(WindowSample(
            sample_id=f"{clip_id}:{start}",
            visual=FeatureSequence("visual", clip_visual.data[start:end]),
            audio=FeatureSequence("audio", clip_audio.data[a_start:a_end]),
            label=label,
            source_clip=clip_id,
            frame_range=(start, end),
        ))
    return out


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _unit_rows(gen: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = gen.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _split_gen(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


def make_text_bank(seed: int, dim: int = 512) -> np.ndarray:
    """8 seeded unit vectors with pairwise cosine similarity < 0.3."""
    gen = _split_gen(seed, 3)
    while True:
        bank = _unit_rows(gen, N_CLASSES, dim)
        cos = bank @ bank.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() < 0.3:
            return bank.astype(np.float32)


@dataclass
class SyntheticDataset:
    train: DatasetManifest
    val: DatasetManifest
    train_path: Path
    val_path: Path
    text_bank_path: Path


def generate_synthetic(out_dir: str | Path, n_per_class: int, window: int,
                       t_audio: int, separation: float, seed: int,
                       val_per_class: int | None = None) -> SyntheticDataset:
    """Write a deterministic synthetic dataset shaped like exported features.

    Per class c, visual frames are drawn Normal(mu_v_c, 0.25*I) and audio rows
    Normal(mu_a_c, 0.25*I), where the class means are fixed seeded directions
    scaled by ``separation``. Also writes the 8-vector text bank.
    """
    if separation < 0:
        raise ParameterError(f"separation must be >= 0, got {separation}")
    if window not in WINDOW_SIZES:
        raise ParameterError(f"window must be one of {WINDOW_SIZES}, got {window}")
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)

    mgen = _split_gen(seed, 0)
    mu_v = _unit_rows(mgen, N_CLASSES, MODALITY_DIMS["visual"]) * separation
    mu_a = _unit_rows(mgen, N_CLASSES, MODALITY_DIMS["audio"]) * separation

    if val_per_class is None:
        val_per_class = max(2, n_per_class // 4)

    manifests: dict[str, DatasetManifest] = {}
    paths: dict[str, Path] = {}
    for split, count, stream in (("train", n_per_class, 1), ("val", val_per_class, 2)):
        gen = _split_gen(seed, stream)
        entries = []
        for label in range(N_CLASSES):
            for i in range(count):
                vis = mu_v[label] + SYNTH_NOISE_STD * gen.standard_normal(
                    (window, MODALITY_DIMS["visual"]))
                aud = mu_a[label] + SYNTH_NOISE_STD * gen.standard_normal(
                    (t_audio, MODALITY_DIMS["audio"]))
                sid = f"{split}-c{label}-{i:04d}"
                vpath, apath = f"features/{sid}_v.mmfe", f"features/{sid}_a.mmfe"
                write_feature_file(FeatureSequence("visual", vis), out_dir / vpath)
                write_feature_file(FeatureSequence("audio", aud), out_dir / apath)
                entries.append(ManifestEntry(sid, label, vpath, apath, window, t_audio))
        manifest = DatasetManifest(CLASS_NAMES, entries, split, root=out_dir)
        paths[split] = out_dir / f"{split}.json"
        save_manifest(manifest, paths[split])
        manifests[split] = manifest

    bank_path = out_dir / "text_bank.mmfe"
    write_feature_file(FeatureSequence("text", make_text_bank(seed)), bank_path)
    return SyntheticDataset(manifests["train"], manifests["val"],
                            paths["train"], paths["val"], bank_path)


# ---------------------------------------------------------------------------
# class statistics
# ---------------------------------------------------------------------------

def class_stats_from_labels(labels, where: str = "dataset") -> ClassStats:
    """Per-class counts and loss weights w_c = N / (8 * n_c)."""
    counts = np.bincount(np.asarray(labels), minlength=N_CLASSES).astype(np.int64)
    if (counts == 0).any():
        missing = [CLASS_NAMES[c] for c in np.flatnonzero(counts == 0)]
        raise MissingClassError(f"classes with no samples in {where}: {missing}")
    n = counts.sum()
    weights = n / (N_CLASSES * counts.astype(np.float64))
    return ClassStats(counts=counts, weights=weights)


def compute_class_stats(manifest: DatasetManifest) -> ClassStats:
    return class_stats_from_labels([e.label for e in manifest.samples], manifest.split)
