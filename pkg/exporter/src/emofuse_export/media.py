"""Media loading: video frames via OpenCV, audio from sibling wav files.

Videos are read at their native rate with optional downsampling to --fps.
``.npy`` stacks of (T, H, W, 3) uint8 frames are accepted wherever a video
is, which keeps tests and archival pipelines decoder-free. Audio comes from
a wav file next to the video (same stem) and is resampled to 16 kHz mono.
"""

from __future__ import annotations

import math
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import ExportError

AUDIO_SAMPLE_RATE = 16_000


def read_frames(video_path: str | Path, fps: float | None = None
                ) -> tuple[np.ndarray, float]:
    """Return (frames (T,H,W,3) uint8 RGB, effective frame rate)."""
    video_path = Path(video_path)
    if not video_path.exists():
        raise ExportError(f"video not found: {video_path}")
    if video_path.suffix == ".npy":
        frames = np.load(video_path)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ExportError(f"{video_path}: expected a (T, H, W, 3) frame stack")
        native = 30.0
    else:
        import cv2

        cap = cv2.VideoCapture(str(video_path))
        if not cap.isOpened():
            raise ExportError(f"cannot decode video: {video_path}")
        native = cap.get(cv2.CAP_PROP_FPS) or 30.0
        collected = []
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            collected.append(frame[:, :, ::-1])  # BGR -> RGB
        cap.release()
        if not collected:
            raise ExportError(f"no frames decoded from {video_path}")
        frames = np.stack(collected)

    if fps is None or fps >= native:
        return frames, float(native)
    step = native / fps
    idx = np.floor(np.arange(0, len(frames), step)).astype(int)
    idx = idx[idx < len(frames)]
    return frames[idx], float(fps)


def read_audio(video_path: str | Path) -> np.ndarray:
    """16 kHz mono float32 samples from the wav next to the video."""
    from scipy.io import wavfile
    from scipy.signal import resample_poly

    wav_path = Path(video_path).with_suffix(".wav")
    if not wav_path.exists():
        raise ExportError(f"missing audio track: expected {wav_path}")
    rate, samples = wavfile.read(wav_path)
    samples = np.asarray(samples)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.dtype.kind == "i":
        samples = samples / float(np.iinfo(samples.dtype).max)
    elif samples.dtype.kind == "u":
        samples = samples / float(np.iinfo(samples.dtype).max) * 2.0 - 1.0
    samples = samples.astype(np.float32)
    if rate != AUDIO_SAMPLE_RATE:
        ratio = Fraction(AUDIO_SAMPLE_RATE, int(rate)).limit_denominator(1000)
        samples = resample_poly(samples, ratio.numerator, ratio.denominator)
        samples = samples.astype(np.float32)
    if samples.size < 1:
        raise ExportError(f"empty audio track in {wav_path}")
    return samples


def read_labels(path: str | Path, n_frames: int) -> np.ndarray:
    """Per-frame class ids, one integer per line."""
    try:
        labels = np.array([int(line) for line in Path(path).read_text().split()])
    except (OSError, ValueError) as exc:
        raise ExportError(f"cannot read label file {path}: {exc}") from exc
    if len(labels) < n_frames:
        raise ExportError(
            f"{path}: {len(labels)} labels for {n_frames} frames")
    return labels


def sample_labels(labels: np.ndarray, n_native: int, n_sampled: int) -> np.ndarray:
    """Pick the label of each sampled frame when --fps downsampled the video."""
    if n_sampled == n_native:
        return labels[:n_native]
    idx = np.floor(np.arange(n_sampled) * (n_native / n_sampled)).astype(int)
    return labels[np.minimum(idx, n_native - 1)]
