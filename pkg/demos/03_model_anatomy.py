#!/usr/bin/env python3
# The fusion head, end to end: shapes, causality, and the receptive field.

import tempfile
from pathlib import Path

import numpy as np

from emofuse import model as M
from emofuse import tensor as T

cfg = M.ModelConfig()
print(f"d_model {cfg.d_model}, {cfg.tcn_blocks} TCN blocks with dilations "
      f"{cfg.tcn_dilations}, {cfg.heads} attention heads")
print(f"parameters: {M.parameter_count(cfg):,}")
print(f"receptive field: {cfg.receptive_field()} frames")

state = M.ModelState.init(cfg, seed=0)
# Residual-branch outputs start at zero, so propagation probes need weights.
gen = np.random.default_rng(1)
for name, p in state.parameters():
    if ".conv2" in name or name.endswith(".wo"):
        p.data[...] = (gen.standard_normal(p.shape) * 0.15).astype(np.float32)

# One window: 30 visual frames (512-d) and 50 audio steps (768-d).
rng = np.random.default_rng(2)
x_v = T.tensor(rng.standard_normal((30, 512)))
x_a = T.tensor(rng.standard_normal((50, 768)))
logits, rep = M.forward(x_v, x_a, state)
print(f"H_V2A {rep.h_v2a.shape}  H_A2V {rep.h_a2v.shape}  z {rep.z.shape}  "
      f"logits {logits.shape}  |v| = {np.linalg.norm(rep.v.data):.6f}")

# Causality: poke one visual frame, watch which TCN outputs move. Everything
# before the poked frame is bitwise untouched; nothing beyond the receptive
# field can feel it either.
x = rng.standard_normal((300, 512)).astype(np.float32)
base = M.visual_tcn(T.tensor(x), state).data
poked = x.copy()
poked[0] += 1.0
out = M.visual_tcn(T.tensor(poked), state).data
changed = np.flatnonzero(np.any(out != base, axis=1))
print(f"poke frame 0: outputs {changed.min()}..{changed.max()} change "
      f"({changed.max() + 1} frames = the receptive field)")

# Checkpoints round-trip every parameter bit for bit.
work = Path(tempfile.mkdtemp(prefix="emofuse-demo-"))
M.save_checkpoint(state, work / "model.mmck")
reloaded = M.load_checkpoint(work / "model.mmck")
same = all((reloaded[n].data == p.data).all() for n, p in state.parameters())
print(f"checkpoint {((work / 'model.mmck').stat().st_size / 1e6):.1f} MB, "
      f"bitwise round trip: {same}")
