"""The fusion head: visual TCN, audio adapter, bi-directional cross-attention,
pooled MLP classifier, and the contrastive projection.

All functions build autodiff graphs over ``emofuse.tensor`` tensors. A forward
in eval mode (``train=False``) is deterministic; train mode draws dropout
masks from the run's ``DropoutRng``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    BadMagicError,
    ConfigError,
    EmptySequenceError,
    FormatError,
    ShapeMismatchError,
    TruncatedError,
    VersionError,
)
from .tensor import Tensor

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    d_audio_in: int = 768
    tcn_blocks: int = 6
    tcn_kernel: int = 3
    tcn_dilations: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    heads: int = 8
    mlp_hidden: tuple[int, ...] = (512, 256)
    n_classes: int = 8
    dropout_p: float = 0.1
    text_dim: int = 512

    def __post_init__(self):
        object.__setattr__(self, "tcn_dilations", tuple(self.tcn_dilations))
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if len(self.tcn_dilations) != self.tcn_blocks:
            raise ConfigError(
                f"{len(self.tcn_dilations)} dilations for {self.tcn_blocks} blocks")
        for prev, cur in zip(self.tcn_dilations, self.tcn_dilations[1:]):
            if cur <= prev:
                raise ConfigError(f"dilations must be strictly increasing: {self.tcn_dilations}")
        for d in self.tcn_dilations:
            if d < 1 or d & (d - 1):
                raise ConfigError(f"dilations must be powers of two: {self.tcn_dilations}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def receptive_field(self) -> int:
        """Frames of past context one output frame can see (two convs/block)."""
        return 1 + sum(2 * (self.tcn_kernel - 1) * d for d in self.tcn_dilations)


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every learnable parameter, in checkpoint declaration order."""
    k, d = cfg.tcn_kernel, cfg.d_model
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for i in range(cfg.tcn_blocks):
        for conv in ("conv1", "conv2"):
            shapes.append((f"tcn{i}.{conv}.w", (k, d, d)))
            shapes.append((f"tcn{i}.{conv}.b", (d,)))
    shapes += [("adapter.w", (cfg.d_audio_in, d)), ("adapter.b", (d,)),
               ("adapter.ln_g", (d,)), ("adapter.ln_b", (d,))]
    for direction in ("v2a", "a2v"):
        for name in ("wq", "wk", "wv", "wo"):
            shapes.append((f"attn_{direction}.{name}", (d, d)))
        shapes += [(f"attn_{direction}.ln_g", (d,)), (f"attn_{direction}.ln_b", (d,))]
    dims = [2 * d, *cfg.mlp_hidden, cfg.n_classes]
    for j in range(len(dims) - 1):
        shapes += [(f"mlp.w{j + 1}", (dims[j], dims[j + 1])), (f"mlp.b{j + 1}", (dims[j + 1],))]
    shapes += [("proj.w", (d, cfg.text_dim)), ("proj.b", (cfg.text_dim,))]
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(int(np.prod(shape)) for _, shape in param_shapes(cfg)))


def _init_value(name: str, shape: tuple[int, ...], gen: np.random.Generator,
                cfg: ModelConfig) -> np.ndarray:
    if name.endswith(".ln_g"):
        return np.ones(shape)
    if name.endswith((".ln_b",)) or name.split(".")[-1].startswith("b"):
        return np.zeros(shape)
    if ".conv2" in name or name.endswith(".wo"):
        # residual branches start as identity: tames post-norm early training
        return np.zeros(shape)
    if ".conv" in name:
        std = np.sqrt(2.0 / (cfg.tcn_kernel * cfg.d_model))
    elif name.startswith("adapter"):
        std = np.sqrt(2.0 / cfg.d_audio_in)
    elif name.startswith("mlp"):
        std = np.sqrt(2.0 / shape[0])
    else:  # attention projections, contrastive projection
        std = np.sqrt(1.0 / shape[0])
    return gen.standard_normal(shape) * std


@dataclass
class ModelState:
    """All learnable parameters plus the fixed contrastive temperature."""

    config: ModelConfig
    params: dict[str, Tensor]
    tau: float = 0.07

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, tau: float = 0.07,
             dtype=np.float32) -> "ModelState":
        gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0xE0F], np.uint64)))
        params = {
            name: T.tensor(_init_value(name, shape, gen, cfg), requires_grad=True, dtype=dtype)
            for name, shape in param_shapes(cfg)
        }
        return cls(cfg, params, tau)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def astype(self, dtype) -> "ModelState":
        cast = {n: T.tensor(p.data, requires_grad=True, dtype=dtype)
                for n, p in self.params.items()}
        return ModelState(self.config, cast, self.tau)


@dataclass
class FusedRepresentation:
    h_v2a: Tensor  # T_v x d
    h_a2v: Tensor  # T_a x d
    z: Tensor      # 2d multimodal vector
    v: Tensor      # unit-norm contrastive projection


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def visual_tcn(x: Tensor, state: ModelState, train: bool = False,
               rng: T.DropoutRng | None = None) -> Tensor:
    """Six residual blocks of dilated causal convs: conv-relu-drop twice + skip."""
    cfg = state.config
    if x.ndim != 2 or x.shape[1] != cfg.d_model:
        raise ShapeMismatchError(f"visual input must be Tx{cfg.d_model}, got {x.shape}")
    p = cfg.dropout_p
    out = x
    for i, dilation in enumerate(cfg.tcn_dilations):
        h = T.conv1d_causal(out, state[f"tcn{i}.conv1.w"], state[f"tcn{i}.conv1.b"], dilation)
        h = T.dropout(T.relu(h), p, train, rng)
        h = T.conv1d_causal(h, state[f"tcn{i}.conv2.w"], state[f"tcn{i}.conv2.b"], dilation)
        h = T.dropout(T.relu(h), p, train, rng)
        out = T.add(out, h)
    return out


def audio_adapter(x: Tensor, state: ModelState, train: bool = False,
                  rng: T.DropoutRng | None = None) -> Tensor:
    """Per-timestep linear projection to the shared width, then LN, ReLU, dropout."""
    cfg = state.config
    if x.ndim != 2 or x.shape[1] != cfg.d_audio_in:
        raise ShapeMismatchError(f"audio input must be Tx{cfg.d_audio_in}, got {x.shape}")
    h = T.add(T.matmul(x, state["adapter.w"]), state["adapter.b"])
    h = T.layer_norm(h, state["adapter.ln_g"], state["adapter.ln_b"])
    return T.dropout(T.relu(h), cfg.dropout_p, train, rng)


def multi_head_attention(q_seq: Tensor, kv_seq: Tensor, state: ModelState,
                         direction: str) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention branch for one direction.

    Returns (branch, attn): the output projection of the concatenated heads,
    and the attention weights (heads x T_q x T_k, rows summing to 1).
    """
    cfg = state.config
    if kv_seq.shape[0] < 1:
        raise EmptySequenceError("attention requires at least one key/value position")
    if q_seq.shape[1] != cfg.d_model or kv_seq.shape[1] != cfg.d_model:
        raise ShapeMismatchError(
            f"attention inputs must have D={cfg.d_model}, got {q_seq.shape} / {kv_seq.shape}")
    prefix = f"attn_{direction}"
    q = T.split_heads(T.matmul(q_seq, state[f"{prefix}.wq"]), cfg.heads)
    k = T.split_heads(T.matmul(kv_seq, state[f"{prefix}.wk"]), cfg.heads)
    v = T.split_heads(T.matmul(kv_seq, state[f"{prefix}.wv"]), cfg.heads)
    scores = T.scale(T.bmm(q, T.swap_last2(k)), 1.0 / np.sqrt(cfg.head_dim))
    attn = T.softmax_rows(scores)
    ctx = T.merge_heads(T.bmm(attn, v))
    return T.matmul(ctx, state[f"{prefix}.wo"]), attn


def cross_attention_block(q_seq: Tensor, kv_seq: Tensor, state: ModelState,
                          direction: str, train: bool = False,
                          rng: T.DropoutRng | None = None) -> Tensor:
    """Post-norm residual attention: LN(q_seq + MHA(q_seq, kv_seq, kv_seq))."""
    branch, _ = multi_head_attention(q_seq, kv_seq, state, direction)
    branch = T.dropout(branch, state.config.dropout_p, train, rng)
    prefix = f"attn_{direction}"
    return T.layer_norm(T.add(q_seq, branch), state[f"{prefix}.ln_g"], state[f"{prefix}.ln_b"])


def fuse(f_v: Tensor, f_a: Tensor, state: ModelState, train: bool = False,
         rng: T.DropoutRng | None = None) -> tuple[Tensor, Tensor]:
    """Both cross-attention directions with independent parameter sets."""
    h_v2a = cross_attention_block(f_v, f_a, state, "v2a", train, rng)
    h_a2v = cross_attention_block(f_a, f_v, state, "a2v", train, rng)
    return h_v2a, h_a2v


def pool_concat_classify(h_v2a: Tensor, h_a2v: Tensor, state: ModelState,
                         train: bool = False, rng: T.DropoutRng | None = None) -> Tensor:
    """Mean-pool both streams, concatenate, and run the 3-layer MLP head."""
    cfg = state.config
    z = T.concat_vec(T.mean_pool_time(h_v2a), T.mean_pool_time(h_a2v))
    h = z
    n_hidden = len(cfg.mlp_hidden)
    for j in range(1, n_hidden + 1):
        h = T.relu(T.linear_vec(h, state[f"mlp.w{j}"], state[f"mlp.b{j}"]))
        h = T.dropout(h, cfg.dropout_p, train, rng)
    return T.linear_vec(h, state[f"mlp.w{n_hidden + 1}"], state[f"mlp.b{n_hidden + 1}"])


def project_visual(h_v2a: Tensor, state: ModelState) -> Tensor:
    """Pooled fused-visual representation mapped to the text space, unit norm."""
    pooled = T.mean_pool_time(h_v2a)
    return T.l2_normalize(T.linear_vec(pooled, state["proj.w"], state["proj.b"]))


def forward(x_v: Tensor, x_a: Tensor, state: ModelState, train: bool = False,
            rng: T.DropoutRng | None = None) -> tuple[Tensor, FusedRepresentation]:
    """Full head: TCN + adapter -> fuse -> (logits, fused representation)."""
    f_v = visual_tcn(x_v, state, train, rng)
    f_a = audio_adapter(x_a, state, train, rng)
    h_v2a, h_a2v = fuse(f_v, f_a, state, train, rng)
    logits = pool_concat_classify(h_v2a, h_a2v, state, train, rng)
    v = project_visual(h_v2a, state)
    z = T.concat_vec(T.mean_pool_time(h_v2a), T.mean_pool_time(h_a2v))
    return logits, FusedRepresentation(h_v2a=h_v2a, h_a2v=h_a2v, z=z, v=v)


def forward_window(sample, state: ModelState, train: bool = False,
                   rng: T.DropoutRng | None = None):
    """Forward on a data-io WindowSample."""
    dtype = next(iter(state.params.values())).data.dtype
    x_v = T.tensor(sample.visual.data, dtype=dtype)
    x_a = T.tensor(sample.audio.data, dtype=dtype)
    return forward(x_v, x_a, state, train, rng)


# ---------------------------------------------------------------------------
# batched execution path
# ---------------------------------------------------------------------------
#
# Computes the same function as the per-sample path, with a micro-batch's
# sequences stacked along time so the conv/attention matmuls run at useful
# sizes. Dropout masks are keyed by (sample serial, named model site), so the
# masks a sample sees do not depend on how the batch is split or grouped.

def dropout_site_ids(cfg: ModelConfig) -> dict[str, int]:
    ids: dict[str, int] = {}
    for i in range(cfg.tcn_blocks):
        ids[f"tcn{i}.drop1"] = len(ids)
        ids[f"tcn{i}.drop2"] = len(ids)
    ids["adapter"] = len(ids)
    ids["attn_v2a"] = len(ids)
    ids["attn_a2v"] = len(ids)
    for j in range(len(cfg.mlp_hidden)):
        ids[f"mlp{j + 1}"] = len(ids)
    return ids


class MaskPlan:
    """Builds stacked per-sample dropout multipliers for one forward pass."""

    def __init__(self, rng: T.DropoutRng, p: float, dtype, cfg: ModelConfig):
        self.rng = rng
        self.p = p
        self.keep = 1.0 - p
        self.dtype = dtype
        self.site_ids = dropout_site_ids(cfg)

    def mult(self, site: str, serials, rows_per_sample, cols: int) -> np.ndarray:
        site_id = self.site_ids[site]
        parts = [
            self.rng.mask_keyed(serial, site_id, (rows, cols), self.keep)
            for serial, rows in zip(serials, rows_per_sample)
        ]
        mask = parts[0] if len(parts) == 1 else np.concatenate(parts)
        return mask.astype(self.dtype) / np.asarray(self.keep, dtype=self.dtype)


def _drop_stacked(x: Tensor, plan: MaskPlan | None, site: str, serials,
                  rows_per_sample) -> Tensor:
    if plan is None or plan.p == 0.0:
        return x
    return T.dropout_masked(x, plan.mult(site, serials, rows_per_sample, x.shape[1]))


def _stacked_tcn(x: Tensor, state: ModelState, plan: MaskPlan | None,
                 serials, t_v: int) -> Tensor:
    cfg = state.config
    b = len(serials)
    rows = [t_v] * b
    out = x
    for i, dilation in enumerate(cfg.tcn_dilations):
        h = T.conv1d_causal(out, state[f"tcn{i}.conv1.w"], state[f"tcn{i}.conv1.b"],
                            dilation, segments=b)
        h = _drop_stacked(T.relu(h), plan, f"tcn{i}.drop1", serials, rows)
        h = T.conv1d_causal(h, state[f"tcn{i}.conv2.w"], state[f"tcn{i}.conv2.b"],
                            dilation, segments=b)
        h = _drop_stacked(T.relu(h), plan, f"tcn{i}.drop2", serials, rows)
        out = T.add(out, h)
    return out


def _stacked_adapter(x: Tensor, state: ModelState, plan: MaskPlan | None,
                     serials, lens) -> Tensor:
    h = T.add(T.matmul(x, state["adapter.w"]), state["adapter.b"])
    h = T.layer_norm(h, state["adapter.ln_g"], state["adapter.ln_b"])
    return _drop_stacked(T.relu(h), plan, "adapter", serials, lens)


def _group_attention(q_flat: Tensor, kv_flat: Tensor, state: ModelState,
                     direction: str, plan: MaskPlan | None, serials,
                     t_q: int, t_k: int) -> Tensor:
    cfg = state.config
    g = len(serials)
    h, hd = cfg.heads, cfg.head_dim
    prefix = f"attn_{direction}"

    def heads4(flat, t):
        return T.transpose_axes(T.reshape(flat, (g, t, h, hd)), (0, 2, 1, 3))

    q = heads4(T.matmul(q_flat, state[f"{prefix}.wq"]), t_q)
    k = heads4(T.matmul(kv_flat, state[f"{prefix}.wk"]), t_k)
    v = heads4(T.matmul(kv_flat, state[f"{prefix}.wv"]), t_k)
    attn = T.softmax_rows(T.scale(T.bmm(q, T.swap_last2(k)), 1.0 / np.sqrt(hd)))
    ctx = T.reshape(T.transpose_axes(T.bmm(attn, v), (0, 2, 1, 3)), (g * t_q, cfg.d_model))
    branch = T.matmul(ctx, state[f"{prefix}.wo"])
    branch = _drop_stacked(branch, plan, prefix, serials, [t_q] * g)
    return T.layer_norm(T.add(q_flat, branch),
                        state[f"{prefix}.ln_g"], state[f"{prefix}.ln_b"])


def forward_batch(samples, state: ModelState, train: bool = False,
                  rng: T.DropoutRng | None = None,
                  serials=None) -> tuple[Tensor, Tensor]:
    """Batched forward over WindowSamples sharing one window length.

    Returns (logits BxC, v Bxtext_dim) in the input order. Samples are
    regrouped internally by audio length for the attention stage; that
    grouping never changes results beyond float summation order.
    """
    cfg = state.config
    b = len(samples)
    if b == 0:
        raise EmptySequenceError("forward_batch needs at least one sample")
    if train and rng is None:
        raise ConfigError("train-mode forward_batch requires the run's DropoutRng")
    t_v = samples[0].visual.T
    if any(s.visual.T != t_v for s in samples):
        raise ShapeMismatchError("forward_batch requires a uniform window length")
    if serials is None:
        serials = list(range(b))
    dtype = next(iter(state.params.values())).data.dtype

    order = np.argsort([s.audio.T for s in samples], kind="stable")
    inverse = np.argsort(order)
    ss = [samples[i] for i in order]
    ser = [serials[i] for i in order]
    lens = [s.audio.T for s in ss]
    plan = (MaskPlan(rng, cfg.dropout_p, dtype, cfg)
            if train and cfg.dropout_p > 0 else None)

    x_v = T.tensor(np.concatenate([s.visual.data for s in ss]), dtype=dtype)
    f_v = _stacked_tcn(x_v, state, plan, ser, t_v)
    x_a = T.tensor(np.concatenate([s.audio.data for s in ss]), dtype=dtype)
    f_a = _stacked_adapter(x_a, state, plan, ser, lens)

    a_bounds = np.cumsum([0] + lens)
    logits_parts, v_parts = [], []
    start = 0
    n_hidden = len(cfg.mlp_hidden)
    while start < b:
        stop = start
        while stop < b and lens[stop] == lens[start]:
            stop += 1
        g, t_k = stop - start, lens[start]
        g_ser = ser[start:stop]
        q_grp = T.slice_rows(f_v, start * t_v, stop * t_v)
        kv_grp = T.slice_rows(f_a, int(a_bounds[start]), int(a_bounds[stop]))
        h_v2a = _group_attention(q_grp, kv_grp, state, "v2a", plan, g_ser, t_v, t_k)
        h_a2v = _group_attention(kv_grp, q_grp, state, "a2v", plan, g_ser, t_k, t_v)
        pool_v = T.mean_pool_segments(h_v2a, g)
        pool_a = T.mean_pool_segments(h_a2v, g)
        hidden = T.concat_cols(pool_v, pool_a)
        for j in range(1, n_hidden + 1):
            hidden = T.relu(T.add(T.matmul(hidden, state[f"mlp.w{j}"]), state[f"mlp.b{j}"]))
            hidden = _drop_stacked(hidden, plan, f"mlp{j}", g_ser, [1] * g)
        logits_parts.append(T.add(
            T.matmul(hidden, state[f"mlp.w{n_hidden + 1}"]), state[f"mlp.b{n_hidden + 1}"]))
        v_parts.append(T.l2_normalize_rows(
            T.add(T.matmul(pool_v, state["proj.w"]), state["proj.b"])))
        start = stop

    logits = T.gather_rows(T.concat_rows(logits_parts), inverse)
    v = T.gather_rows(T.concat_rows(v_parts), inverse)
    return logits, v


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _blob_2d(data: np.ndarray) -> np.ndarray:
    if data.ndim == 1:
        return data.reshape(1, -1)
    if data.ndim == 3:
        return data.reshape(data.shape[0] * data.shape[1], data.shape[2])
    return data


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    """MMCK file: header, length-prefixed config JSON, then parameter blobs
    in declaration order, each encoded like a feature file."""
    from .dataio import DIMS, DTYPE_F32, FORMAT_VERSION, HEADER, MAGIC

    meta = json.dumps({"config": asdict(state.config), "tau": state.tau},
                      sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name, _ in param_shapes(state.config):
            blob = _blob_2d(state.params[name].data.astype("<f4", copy=False))
            fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, 2))
            fh.write(DIMS.pack(*blob.shape))
            fh.write(blob.tobytes())


def load_checkpoint(path: str | Path) -> ModelState:
    from .dataio import DIMS, DTYPE_F32, FORMAT_VERSION, HEADER, MAGIC

    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file (magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 6)
    meta = json.loads(raw[10:10 + meta_len])
    cfg = ModelConfig(**meta["config"])
    offset = 10 + meta_len

    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg):
        head = HEADER.unpack_from(raw, offset)
        if head[0] != MAGIC or head[2] != DTYPE_F32:
            raise FormatError(f"{path}: bad tensor blob header for {name}")
        offset += HEADER.size
        t, d = DIMS.unpack_from(raw, offset)
        offset += DIMS.size
        n_bytes = 4 * t * d
        if offset + n_bytes > len(raw):
            raise TruncatedError(f"{path}: truncated blob for {name}")
        data = np.frombuffer(raw, dtype="<f4", count=t * d, offset=offset).reshape(t, d)
        offset += n_bytes
        if int(np.prod(shape)) != t * d:
            raise FormatError(f"{path}: blob size {t}x{d} does not match {name} {shape}")
        params[name] = T.tensor(data.reshape(shape), requires_grad=True)
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelState(cfg, params, float(meta["tau"]))
