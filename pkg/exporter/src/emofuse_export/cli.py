"""Command line for batch feature export."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import ExportError, __version__
from .encoders import make_encoders
from .jobs import DEFAULT_CLASSES, ExportJob, run_export

VIDEO_SUFFIXES = (".mp4", ".avi", ".mkv", ".mov", ".npy")


def _collect_videos(video: Path | None, video_dir: Path | None) -> list[Path]:
    if (video is None) == (video_dir is None):
        raise ExportError("pass exactly one of --video or --video-dir")
    if video is not None:
        return [video]
    found = sorted(p for p in video_dir.iterdir() if p.suffix in VIDEO_SUFFIXES)
    if not found:
        raise ExportError(f"no videos found under {video_dir}")
    return found


def _label_files(videos: list[Path], labels: Path | None) -> dict[Path, Path]:
    if labels is not None and len(videos) == 1:
        return {videos[0]: labels}
    # directory mode: one "<stem>.labels.txt" next to each clip
    mapping = {}
    for v in videos:
        candidate = v.with_suffix(".labels.txt")
        if not candidate.exists():
            raise ExportError(f"missing label file {candidate}")
        mapping[v] = candidate
    return mapping


@click.command()
@click.version_option(__version__)
@click.option("--video", type=click.Path(path_type=Path), default=None)
@click.option("--video-dir", type=click.Path(path_type=Path), default=None)
@click.option("--labels", type=click.Path(path_type=Path), default=None,
              help="Per-frame label file (single-video mode).")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--fps", type=float, default=None,
              help="Downsample frames to this rate (default: native).")
@click.option("--classes", default=",".join(DEFAULT_CLASSES), show_default=True,
              help="Comma-separated 8-class list, prompt order.")
@click.option("--backend", default="pretrained", show_default=True,
              type=click.Choice(["pretrained", "seeded-stub"]),
              help="seeded-stub runs without model downloads (smoke tests only).")
def main(video, video_dir, labels, out, fps, classes, backend):
    """Extract frozen-backbone features from clips into emofuse files."""
    try:
        videos = _collect_videos(video, video_dir)
        job = ExportJob(videos=videos, labels=_label_files(videos, labels),
                        out_dir=out, fps=fps, classes=tuple(classes.split(",")))
        manifest = run_export(job, make_encoders(backend))
    except ExportError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"exported {len(videos)} clip(s); manifest at {manifest}")


if __name__ == "__main__":
    main()
