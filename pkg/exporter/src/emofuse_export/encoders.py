"""Frozen feature encoders.

The ``pretrained`` backend wraps CLIP ViT-B/32 (512-d image and text
embeddings) and Wav2Vec 2.0 Base (768-d contextual steps at ~50 Hz), both in
eval mode with no gradients anywhere near them. The ``seeded-stub`` backend
produces correctly-shaped, input-dependent, bit-reproducible features with no
model downloads; it exists for offline smoke tests of the export plumbing and
is not a substitute for the real embeddings.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import ExportError

VISUAL_DIM = 512
AUDIO_DIM = 768
TEXT_DIM = 512
W2V2_HOP = 320  # samples per contextual step at 16 kHz -> 50 steps/s


class PretrainedEncoders:
    """CLIP ViT-B/32 + Wav2Vec 2.0 Base through transformers, frozen."""

    clip_name = "openai/clip-vit-base-patch32"
    w2v2_name = "facebook/wav2vec2-base-960h"

    def __init__(self):
        try:
            import torch
            from transformers import AutoProcessor, CLIPModel, Wav2Vec2Model
        except ImportError as exc:
            raise ExportError(
                "the pretrained backend needs torch and transformers installed "
                "(pip install 'emofuse-export[pretrained]')") from exc
        self._torch = torch
        self.clip = CLIPModel.from_pretrained(self.clip_name).eval()
        self.clip_processor = AutoProcessor.from_pretrained(self.clip_name)
        self.w2v2 = Wav2Vec2Model.from_pretrained(self.w2v2_name).eval()
        for model in (self.clip, self.w2v2):
            for p in model.parameters():
                p.requires_grad_(False)

    def encode_frames(self, frames: np.ndarray) -> np.ndarray:
        torch = self._torch
        out = []
        with torch.no_grad():
            for lo in range(0, len(frames), 32):
                batch = self.clip_processor(
                    images=list(frames[lo:lo + 32]), return_tensors="pt")
                out.append(self.clip.get_image_features(**batch).numpy())
        return np.concatenate(out).astype(np.float32)

    def encode_audio(self, samples: np.ndarray) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            hidden = self.w2v2(torch.from_numpy(samples)[None, :]).last_hidden_state
        return hidden[0].numpy().astype(np.float32)

    def encode_prompts(self, prompts: list[str]) -> np.ndarray:
        torch = self._torch
        batch = self.clip_processor(text=prompts, return_tensors="pt", padding=True)
        with torch.no_grad():
            return self.clip.get_text_features(**batch).numpy().astype(np.float32)


def _keyed_gen(*parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array(parts[:2], np.uint64)))


class SeededStubEncoders:
    """Shape-faithful deterministic stand-in; no pretrained weights involved."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._vis_proj = _keyed_gen(self.seed, 1).standard_normal(
            (32 * 32, VISUAL_DIM)).astype(np.float32) / 32.0
        self._aud_proj = _keyed_gen(self.seed, 2).standard_normal(
            (W2V2_HOP, AUDIO_DIM)).astype(np.float32) / np.float32(np.sqrt(W2V2_HOP))

    def encode_frames(self, frames: np.ndarray) -> np.ndarray:
        import cv2

        rows = []
        for frame in frames:
            gray = cv2.cvtColor(frame, cv2.COLOR_RGB2GRAY)
            small = cv2.resize(gray, (32, 32), interpolation=cv2.INTER_AREA)
            rows.append(small.reshape(-1).astype(np.float32) / 255.0)
        return np.tanh(np.stack(rows) @ self._vis_proj)

    def encode_audio(self, samples: np.ndarray) -> np.ndarray:
        n_steps = len(samples) // W2V2_HOP
        if n_steps < 1:
            raise ExportError("audio shorter than one contextual step")
        windows = samples[:n_steps * W2V2_HOP].reshape(n_steps, W2V2_HOP)
        return np.tanh(windows @ self._aud_proj).astype(np.float32)

    def encode_prompts(self, prompts: list[str]) -> np.ndarray:
        rows = []
        for prompt in prompts:
            digest = hashlib.sha256(prompt.encode()).digest()
            gen = _keyed_gen(int.from_bytes(digest[:8], "little"), self.seed)
            vec = gen.standard_normal(TEXT_DIM)
            rows.append(vec / np.linalg.norm(vec))
        return np.stack(rows).astype(np.float32)


BACKENDS = {
    "pretrained": PretrainedEncoders,
    "seeded-stub": SeededStubEncoders,
}


def make_encoders(backend: str):
    if backend not in BACKENDS:
        raise ExportError(f"unknown backend {backend!r}; choose from {sorted(BACKENDS)}")
    return BACKENDS[backend]()
