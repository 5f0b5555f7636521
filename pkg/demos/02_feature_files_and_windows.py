#!/usr/bin/env python3
# Feature files, manifests, and window extraction with audio alignment.

import tempfile
from pathlib import Path

import numpy as np

from emofuse import dataio as D

work = Path(tempfile.mkdtemp(prefix="emofuse-demo-"))

# Feature files are a tiny binary format: 16-byte header, dims, float32 rows.
visual = D.FeatureSequence("visual", np.random.default_rng(0).standard_normal(
    (90, 512)).astype(np.float32))
path = work / "clip_v.mmfe"
D.write_feature_file(visual, path)
print(f"wrote {path.stat().st_size} bytes "
      f"(= 16 header + 8 dims + {90 * 512 * 4} payload)")

loaded = D.read_feature_file(path)
print("round trip bit exact:", (loaded.data == visual.data).all())

# A 90-frame clip at 30 fps spans 3 seconds. With audio features at 50 steps
# per second, each 30-frame window must grab exactly 50 audio steps.
audio = D.FeatureSequence("audio", np.random.default_rng(1).standard_normal(
    (150, 768)).astype(np.float32))
labels = np.array([0] * 30 + [4] * 30 + [4] * 15 + [2] * 15)  # per-frame ids

windows = D.extract_windows(visual, audio, labels, window=30, stride=30,
                            fps=30.0, audio_rate=50.0, clip_id="demo")
for w in windows:
    print(f"  frames {w.frame_range}  audio steps {w.audio.T}  "
          f"label {D.CLASS_NAMES[w.label]}")
# The last window is 15 frames of Happiness and 15 of Disgust: the tie breaks
# toward the lower class id (Disgust).

# Synthetic datasets stand in for exported real features. Same seed, same
# bytes: the generator is a pure function of its configuration.
ds = D.generate_synthetic(work / "synth", n_per_class=3, window=10, t_audio=12,
                          separation=4.0, seed=42)
print("train samples:", len(ds.train.samples), "val samples:", len(ds.val.samples))

stats = D.compute_class_stats(ds.train)
print("class counts:", stats.counts, "-> weights:", np.round(stats.weights, 3))

bank = D.read_feature_file(ds.text_bank_path, "text")
cos = bank.data @ bank.data.T
np.fill_diagonal(cos, 0.0)
print(f"text bank: {bank.data.shape}, max off-diagonal cosine {cos.max():.3f}")
