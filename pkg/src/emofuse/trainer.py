"""Deterministic training loop and the window-size ablation driver.

AdamW with decoupled weight decay, an epoch-granularity cosine schedule,
gradient accumulation over micro-batches, per-epoch validation with
best-checkpoint retention, and JSON-lines run logging.

The objective is defined on the effective batch: the class-weighted CE term
decomposes exactly across micro-batches (shared weight normalizer), while
the contrastive term couples all batch pairs and is therefore computed and
backpropagated once per effective batch. This keeps the parameter update
independent of ``accumulation_steps`` up to float summation order.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataio import (
    DatasetManifest,
    WindowSample,
    class_stats_from_labels,
    generate_synthetic,
    load_manifest,
    load_window_samples,
    read_feature_file,
    WINDOW_SIZES,
)
from .errors import ConfigError, DataError, DivergenceError, ParameterError
from .model import (
    ModelConfig,
    ModelState,
    forward_batch,
    forward_window,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import MetricsReport, TextBank, contrastive_loss, macro_f1, weighted_cross_entropy


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    epochs: int = 30
    batch_size: int = 64
    accumulation_steps: int = 4
    seed: int = 42
    lam: float = 0.1
    tau: float = 0.07
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps_opt: float = 1e-8
    lr_min: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.accumulation_steps < 1:
            raise ConfigError(f"accumulation_steps must be >= 1, got {self.accumulation_steps}")
        if self.batch_size % self.accumulation_steps != 0:
            raise ConfigError(
                f"batch_size {self.batch_size} not divisible by "
                f"accumulation_steps {self.accumulation_steps}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr must be positive and epochs/batch_size at least 1")

    @property
    def micro_batch(self) -> int:
        return self.batch_size // self.accumulation_steps


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def init_moments(named_params) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {name: (np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in named_params}


def adamw_step(named_params, moments, step_index: int, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    if step_index < 1:
        raise ParameterError(f"step_index must be >= 1, got {step_index}")
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter {name}")
        m, v = moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps_opt) + cfg.weight_decay * p.data
        p.data -= lr * update


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Epoch-granularity cosine: lr at epoch 0, lr_min at the final epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

EVAL_CHUNK = 64


def predict(state: ModelState, samples: list[WindowSample]) -> np.ndarray:
    """Argmax class per sample; batched within runs of one window length."""
    preds = np.empty(len(samples), dtype=np.int64)
    order = [int(i) for i in np.argsort([s.visual.T for s in samples], kind="stable")]
    with T.no_grad():
        start = 0
        while start < len(order):
            t_v = samples[order[start]].visual.T
            stop = start
            while stop < len(order) and samples[order[stop]].visual.T == t_v:
                stop += 1
            run = order[start:stop]
            for lo in range(0, len(run), EVAL_CHUNK):
                group = run[lo:lo + EVAL_CHUNK]
                logits, _ = forward_batch([samples[i] for i in group], state, train=False)
                preds[group] = logits.data.argmax(axis=1)
            start = stop
    return preds


def evaluate(state: ModelState, samples: list[WindowSample]) -> MetricsReport:
    labels = np.array([s.label for s in samples])
    return macro_f1(predict(state, samples), labels)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_path: Path
    runlog_path: Path
    best_val_macro_f1: float
    best_epoch: int
    steps: int
    step_losses: list[tuple[float, float, float]]  # (l_total, l_cls, l_con)
    lr_trace: list[float]
    val_trace: list[float]


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def train(train_samples: list[WindowSample], val_samples: list[WindowSample],
          bank: TextBank, model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir: str | Path) -> TrainResult:
    """Run the full protocol; returns the best-validation checkpoint's result.

    Deterministic given (configs, seed): parameter init, shuffling, and every
    dropout mask are keyed off ``cfg.seed``.
    """
    if not train_samples:
        raise DataError("training split is empty")
    if not val_samples:
        raise DataError("validation split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "best.mmck"
    runlog_path = out_dir / "runlog.jsonl"

    train_labels = np.array([s.label for s in train_samples])
    weights = class_stats_from_labels(train_labels, "train split").weights

    state = ModelState.init(model_cfg, seed=cfg.seed, tau=cfg.tau)
    named = state.parameters()
    moments = init_moments(named)
    drop_rng = T.DropoutRng(cfg.seed)
    shuffle_rng = np.random.Generator(
        np.random.Philox(key=np.array([cfg.seed, 0x5F], np.uint64)))

    step = 0
    samples_seen = 0
    best_f1, best_epoch = -1.0, -1
    step_losses: list[tuple[float, float, float]] = []
    lr_trace: list[float] = []
    val_trace: list[float] = []

    with open(runlog_path, "w") as log:
        for epoch in range(cfg.epochs):
            t0 = time.monotonic()
            lr = float(cosine_lr(epoch, cfg))
            lr_trace.append(lr)
            perm = shuffle_rng.permutation(len(train_samples))

            for batch_idx in _chunks(perm, cfg.batch_size):
                batch = [train_samples[i] for i in batch_idx]
                batch_labels = train_labels[batch_idx]
                w_sum = float(weights[batch_labels].sum())
                T.zero_grad([p for _, p in named])

                l_cls = 0.0
                v_chunks: list[T.Tensor] = []
                for lo in range(0, len(batch), cfg.micro_batch):
                    chunk = batch[lo:lo + cfg.micro_batch]
                    serials = list(range(samples_seen + lo, samples_seen + lo + len(chunk)))
                    logits, v = forward_batch(chunk, state, train=True,
                                              rng=drop_rng, serials=serials)
                    v_chunks.append(v)
                    ce = weighted_cross_entropy(
                        logits, batch_labels[lo:lo + len(chunk)], weights, denom=w_sum)
                    T.backward(ce)
                    l_cls += float(ce.data)
                samples_seen += len(batch)

                l_con_node = contrastive_loss(
                    T.concat_rows(v_chunks), batch_labels, bank, cfg.tau)
                T.backward(T.scale(l_con_node, cfg.lam))
                l_con = float(l_con_node.data)
                l_total = l_cls + cfg.lam * l_con

                if not np.isfinite(l_total):
                    save_checkpoint(state, out_dir / "last_good.mmck")
                    raise DivergenceError(
                        f"non-finite loss at step {step + 1}; "
                        f"last good parameters in {out_dir / 'last_good.mmck'}")
                try:
                    adamw_step(named, moments, step + 1, lr, cfg)
                except DivergenceError:
                    save_checkpoint(state, out_dir / "last_good.mmck")
                    raise
                step += 1
                step_losses.append((l_total, l_cls, l_con))
                log.write(json.dumps({
                    "type": "step", "step": step, "epoch": epoch,
                    "l_total": l_total, "l_cls": l_cls, "l_con": l_con, "lr": lr,
                }) + "\n")

            train_metrics = evaluate(state, train_samples)
            val_metrics = evaluate(state, val_samples)
            val_trace.append(val_metrics.macro_f1)
            if val_metrics.macro_f1 > best_f1:  # ties keep the earlier epoch
                best_f1, best_epoch = val_metrics.macro_f1, epoch
                save_checkpoint(state, ckpt_path)
            log.write(json.dumps({
                "type": "epoch", "epoch": epoch, "lr": lr,
                "train_macro_f1": train_metrics.macro_f1,
                "val_macro_f1": val_metrics.macro_f1,
                "best_val_macro_f1": best_f1,
                "train_metrics": json.loads(train_metrics.to_json()),
                "val_metrics": json.loads(val_metrics.to_json()),
                "seconds": time.monotonic() - t0,
            }) + "\n")

    return TrainResult(ckpt_path, runlog_path, best_f1, best_epoch, step,
                       step_losses, lr_trace, val_trace)


def load_text_bank(path: str | Path) -> TextBank:
    return TextBank.from_embeddings(read_feature_file(path, "text").data)


def train_from_dir(data_dir: str | Path, model_cfg: ModelConfig, cfg: TrainConfig,
                   out_dir: str | Path) -> TrainResult:
    """Train from a dataset directory holding train.json, val.json, text_bank.mmfe."""
    data_dir = Path(data_dir)
    train_samples = load_window_samples(load_manifest(data_dir / "train.json"))
    val_samples = load_window_samples(load_manifest(data_dir / "val.json"))
    bank = load_text_bank(data_dir / "text_bank.mmfe")
    return train(train_samples, val_samples, bank, model_cfg, cfg, out_dir)


# ---------------------------------------------------------------------------
# gradient audit
# ---------------------------------------------------------------------------

AUDIT_CONFIG = ModelConfig(d_model=16, d_audio_in=24, tcn_blocks=2, tcn_kernel=3,
                           tcn_dilations=(1, 2), heads=2, mlp_hidden=(16, 8),
                           n_classes=8, dropout_p=0.1, text_dim=16)


def gradient_audit(seed: int = 0, max_coords: int = 120) -> list[tuple[str, float]]:
    """Finite-difference check of every parameterized layer plus the full
    combined objective, on a small float64 surrogate configuration.

    Returns (layer name, max relative error) pairs; all must be <= 1e-4.
    """
    from . import model as mdl
    from . import objectives as obj

    cfg = AUDIT_CONFIG
    state = ModelState.init(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, p in state.parameters():
        # residual-output weights init to zero; audit needs non-degenerate paths
        if not np.any(p.data):
            p.data[...] = rng.standard_normal(p.shape) * 0.2

    def const(*shape):
        return T.tensor(rng.standard_normal(shape), dtype=np.float64)

    x_v, x_a = const(4, cfg.d_model), const(6, cfg.d_audio_in)
    f_v, f_a = const(4, cfg.d_model), const(6, cfg.d_model)
    probe_tv = const(4, cfg.d_model)
    probe_ta = const(6, cfg.d_model)
    probe_c = const(cfg.n_classes)
    probe_p = const(cfg.text_dim)
    probes = {
        "visual_tcn": (lambda: T.tensor_inner(mdl.visual_tcn(x_v, state), probe_tv), "tcn"),
        "audio_adapter": (lambda: T.tensor_inner(mdl.audio_adapter(x_a, state), probe_ta),
                          "adapter"),
        "cross_attention_v2a": (
            lambda: T.tensor_inner(mdl.cross_attention_block(f_v, f_a, state, "v2a"), probe_tv),
            "attn_v2a"),
        "cross_attention_a2v": (
            lambda: T.tensor_inner(mdl.cross_attention_block(f_a, f_v, state, "a2v"), probe_ta),
            "attn_a2v"),
        "classifier_mlp": (
            lambda: T.tensor_inner(mdl.pool_concat_classify(f_v, f_a, state), probe_c), "mlp"),
        "contrastive_projection": (
            lambda: T.tensor_inner(mdl.project_visual(f_v, state), probe_p), "proj"),
    }

    results = []
    for name, (f, prefix) in probes.items():
        params = [p for pname, p in state.parameters() if pname.startswith(prefix)]
        results.append((name, T.grad_check(f, params, max_coords=max_coords, seed=seed)))

    bank = TextBank.from_embeddings(rng.standard_normal((8, cfg.text_dim)).astype(np.float32))
    labels = np.array([2, 5])
    weights = rng.uniform(0.5, 2.0, size=8)
    batch = [const(4, cfg.d_model), const(4, cfg.d_model)]
    audio = [const(6, cfg.d_audio_in), const(6, cfg.d_audio_in)]

    def full_loss():
        logits_rows, v_rows = [], []
        for bx, ba in zip(batch, audio):
            logits, rep = mdl.forward(bx, ba, state)
            logits_rows.append(logits)
            v_rows.append(rep.v)
        report = obj.combined_loss(T.stack_rows(logits_rows), labels,
                                   T.stack_rows(v_rows), bank, weights,
                                   lam=0.1, tau=0.07)
        return report.total

    all_params = [p for _, p in state.parameters()]
    results.append(("combined_loss", T.grad_check(full_loss, all_params,
                                                  max_coords=max_coords, seed=seed)))
    return results


# ---------------------------------------------------------------------------
# window-size ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    window: int
    macro_f1: float


@dataclass
class AblationReport:
    rows: list[AblationRow]
    table_path: Path | None = None
    json_path: Path | None = None

    def table(self) -> str:
        return format_ablation_table(self.rows)


def format_ablation_table(rows: list[AblationRow]) -> str:
    """Plain-text table in the challenge-results column layout."""
    header = f"{'Challenge':<10} {'Metric':<9} {'Method':<18} {'Result':<7}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{'EXPR':<10} {'Macro F1':<9} {f'Ours ({row.window} frames)':<18} "
            f"{row.macro_f1:<7.4f}")
    return "\n".join(lines) + "\n"


def ablate_windows(windows: list[int], out_dir: str | Path, model_cfg: ModelConfig,
                   cfg: TrainConfig, n_per_class: int, t_audio: int,
                   separation: float, val_per_class: int | None = None) -> AblationReport:
    """Train one model per window size on synthetic data, identical configs.

    Each window gets its own dataset generated from the same seed (window
    length changes the sample tensors, so datasets are per-window), then the
    standard train/eval protocol runs sequentially.
    """
    bad = [w for w in windows if w not in WINDOW_SIZES]
    if bad:
        raise ParameterError(f"windows {bad} outside supported sizes {WINDOW_SIZES}")
    out_dir = Path(out_dir)
    rows = []
    for window in windows:
        wdir = out_dir / f"window_{window}"
        generate_synthetic(wdir / "data", n_per_class=n_per_class, window=window,
                           t_audio=t_audio, separation=separation, seed=cfg.seed,
                           val_per_class=val_per_class)
        result = train_from_dir(wdir / "data", model_cfg, cfg, wdir / "run")
        rows.append(AblationRow(window=window, macro_f1=result.best_val_macro_f1))

    table_path = out_dir / "ablation.txt"
    json_path = out_dir / "ablation.json"
    report = AblationReport(rows, table_path, json_path)
    table_path.write_text(report.table())
    json_path.write_text(json.dumps(
        [{"window": r.window, "macro_f1": r.macro_f1} for r in rows], indent=1) + "\n")
    return report
