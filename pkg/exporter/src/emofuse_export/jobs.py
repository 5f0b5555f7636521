"""Export jobs: one clip in, three kinds of feature files out."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ExportError
from .encoders import AUDIO_DIM, TEXT_DIM, VISUAL_DIM, W2V2_HOP
from .media import AUDIO_SAMPLE_RATE, read_audio, read_frames, read_labels, sample_labels
from .mmfe import write_mmfe

DEFAULT_CLASSES = (
    "Neutral", "Anger", "Disgust", "Fear",
    "Happiness", "Sadness", "Surprise", "Other",
)
PROMPT_TEMPLATE = "A face expressing {}"


@dataclass
class ExportJob:
    videos: list[Path]
    labels: dict[Path, Path]  # video -> per-frame label file
    out_dir: Path
    fps: float | None = None
    classes: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        if len(self.classes) != 8:
            raise ExportError(f"class list must have 8 entries, got {len(self.classes)}")


@dataclass
class ClipRecord:
    clip_id: str
    visual_path: str
    audio_path: str
    labels_path: str
    T_v: int
    T_a: int


def export_visual(video: Path, encoders, out_path: Path,
                  fps: float | None = None) -> tuple[int, float]:
    """One 512-d row per sampled frame; returns (T_v, effective fps)."""
    frames, eff_fps = read_frames(video, fps)
    features = encoders.encode_frames(frames)
    if features.shape[1] != VISUAL_DIM:
        raise ExportError(f"visual encoder produced D={features.shape[1]}, "
                          f"expected {VISUAL_DIM}")
    write_mmfe(features, out_path)
    return features.shape[0], eff_fps


def export_audio(video: Path, encoders, out_path: Path) -> tuple[int, float]:
    """One 768-d row per backbone step; returns (T_a, steps per second)."""
    samples = read_audio(video)
    features = encoders.encode_audio(samples)
    if features.shape[1] != AUDIO_DIM:
        raise ExportError(f"audio encoder produced D={features.shape[1]}, "
                          f"expected {AUDIO_DIM}")
    if not np.isfinite(features).all():
        raise ExportError(f"non-finite audio features from {video}")
    write_mmfe(features, out_path)
    seconds = len(samples) / AUDIO_SAMPLE_RATE
    return features.shape[0], features.shape[0] / seconds


def export_text_bank(classes, encoders, out_path: Path) -> np.ndarray:
    """8 prompt embeddings in class order, written as an 8x512 bank."""
    if len(classes) != 8:
        raise ExportError(f"text bank needs exactly 8 class names, got {len(classes)}")
    prompts = [PROMPT_TEMPLATE.format(name) for name in classes]
    bank = encoders.encode_prompts(prompts)
    if bank.shape != (8, TEXT_DIM):
        raise ExportError(f"text encoder produced shape {bank.shape}, "
                          f"expected (8, {TEXT_DIM})")
    write_mmfe(bank, out_path)
    return bank


def run_export(job: ExportJob, encoders) -> Path:
    """Export every clip plus the text bank; returns the manifest path.

    The manifest records the audio step rate measured from the backbone
    output rather than assuming one.
    """
    job.out_dir.mkdir(parents=True, exist_ok=True)
    features_dir = job.out_dir / "features"
    features_dir.mkdir(exist_ok=True)

    clips: list[ClipRecord] = []
    fps_out = None
    audio_rate = None
    for video in job.videos:
        clip_id = video.stem
        vis_rel = f"features/{clip_id}_v.mmfe"
        aud_rel = f"features/{clip_id}_a.mmfe"
        t_v, eff_fps = export_visual(video, encoders, job.out_dir / vis_rel, job.fps)
        t_a, rate = export_audio(video, encoders, job.out_dir / aud_rel)

        label_file = job.labels[video]
        native_frames, _ = read_frames(video, None)
        labels = read_labels(label_file, len(native_frames))
        labels = sample_labels(labels, len(native_frames), t_v)
        if labels.min() < 0 or labels.max() >= len(job.classes):
            raise ExportError(f"{label_file}: label outside [0, {len(job.classes)})")
        lab_rel = f"features/{clip_id}_labels.txt"
        (job.out_dir / lab_rel).write_text("\n".join(str(int(l)) for l in labels) + "\n")

        clips.append(ClipRecord(clip_id, vis_rel, aud_rel, lab_rel, t_v, t_a))
        fps_out = eff_fps
        audio_rate = rate

    export_text_bank(job.classes, encoders, job.out_dir / "text_bank.mmfe")

    manifest = {
        "classes": list(job.classes),
        "fps": fps_out,
        "audio_rate": audio_rate,
        "text_bank": "text_bank.mmfe",
        "clips": [vars(c) for c in clips],
    }
    manifest_path = job.out_dir / "export_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path
