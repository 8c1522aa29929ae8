"""Supervised training: AdamW, warmup-cosine schedule, metrics, checkpoints.

The loop teacher-forces full sequences (scene, query, chain, answer),
accumulates per-sample gradients of the batch-mean loss in a fixed
order, and takes one optimizer step per batch.  Either objective can be
selected: the windowed alignment loss or a plain next-token
cross-entropy baseline over the same supervised positions.
"""

from __future__ import annotations

import json
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import ScanPathSample, VocabLayout, assemble_tokens, split_dataset
from .decoding import rollout_answer
from .model import (ModelConfig, as_arrays, forward, forward_arrays,
                    init_params, save_checkpoint)
from .objective import (HybridTargetConfig, answer_ce_loss, combine_losses,
                        dwal_loss, trigger_ratio)

ENTROPY_BINS = 4


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-6
    weight_decay: float = 0.1
    warmup_frac: float = 0.03
    schedule: str = "cosine"
    max_steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 100
    eval_subset: int = 200
    horizon: int = 20
    objective: str = "dwal"
    latent_exposure: float = 0.5
    exposure_depth: int = 1
    exposure_warmup: int = 0
    hybrid: HybridTargetConfig = field(default_factory=HybridTargetConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup fraction must be in [0, 1)")
        if self.schedule not in ("cosine", "constant", "hold_cosine"):
            raise ValueError("unknown schedule kind")
        if self.max_steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch size must be positive")
        if self.objective not in ("dwal", "ce"):
            raise ValueError("unknown objective")
        if self.eval_every < 1 or self.eval_subset < 1:
            raise ValueError("evaluation cadence must be positive")
        if not 0.0 <= self.latent_exposure <= 1.0:
            raise ValueError("latent exposure must be in [0, 1]")
        if self.exposure_depth < 1:
            raise ValueError("exposure depth must be positive")
        if self.exposure_warmup < 0:
            raise ValueError("exposure warmup must be nonnegative")


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    loss_total: float
    loss_align: float
    loss_answer: float
    trigger_ratio: float
    entropy_by_position: tuple[float, ...]
    lr: float
    held_accuracy: float | None = None

    def as_dict(self) -> dict:
        d = {"step": self.step, "loss_total": self.loss_total,
             "loss_align": self.loss_align, "loss_answer": self.loss_answer,
             "trigger_ratio": self.trigger_ratio,
             "entropy_by_position": list(self.entropy_by_position),
             "lr": self.lr}
        if self.held_accuracy is not None:
            d["held_accuracy"] = self.held_accuracy
        return d


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: AdamState, cfg: TrainConfig, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place and in name order."""
    if lr is None:
        lr = cfg.lr
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient at {name}")
        p = params[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + cfg.eps)
                        + cfg.weight_decay * p.data)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for a zero-indexed step.

    All schedules share the linear warmup.  "cosine" decays to zero over
    the rest of the run; "hold_cosine" stays flat through the first 70%
    of the run and anneals over the final 30%; "constant" never decays.
    """
    if cfg.schedule == "constant":
        return cfg.lr
    warmup = int(round(cfg.warmup_frac * cfg.max_steps))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    start = warmup
    if cfg.schedule == "hold_cosine":
        start = max(warmup, int(round(0.7 * cfg.max_steps)))
        if step < start:
            return cfg.lr
    span = max(1, cfg.max_steps - start)
    progress = (step - start) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def evaluate_accuracy(arrays: dict[str, np.ndarray], mcfg: ModelConfig,
                      layout: VocabLayout, samples: Sequence[ScanPathSample],
                      horizon: int = 20) -> float:
    """Exact-match answer accuracy under greedy latent rollout."""
    if not samples:
        raise ValueError("empty dataset")
    hits = 0
    for sample in samples:
        _, answer, _ = rollout_answer(arrays, mcfg, layout, sample,
                                      horizon=horizon)
        hits += answer == tuple(sample.answer)
    return hits / len(samples)


def _entropy_bins(diags_by_sample) -> tuple[float, ...]:
    """Mean window entropy bucketed by relative chain position."""
    sums = [0.0] * ENTROPY_BINS
    counts = [0] * ENTROPY_BINS
    for diags in diags_by_sample:
        chain_steps = diags[:-1]          # final entry is the end-marker step
        t_count = len(chain_steps)
        for i, d in enumerate(chain_steps):
            b = min(ENTROPY_BINS - 1, int(ENTROPY_BINS * i / max(1, t_count)))
            sums[b] += d.entropy
            counts[b] += 1
    return tuple(s / c if c else 0.0 for s, c in zip(sums, counts))


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    state: AdamState
    metrics: list[MetricsRecord]
    best_accuracy: float
    final_path: Path
    best_path: Path
    metrics_path: Path
    seconds: float


def _sample_losses(params, mcfg, cfg, tokens, chain, answer, chain_start,
                   first_answer, expose: bool = False):
    """Losses for one teacher-forced sequence.

    With ``expose`` set, the chain positions are fed the model's own
    detached hidden states (each position receives the state that
    predicted it) instead of token embeddings.  The substitution is
    iterated ``exposure_depth`` times, so the fed states come from a
    context that itself held fed states; that approximates the
    compounding recursion of decode-time latent feedback rather than
    one teacher-forced step of it.  Targets are unchanged; only the
    conditioning route switches.
    """
    inputs = tokens
    if expose:
        arrays = as_arrays(params)
        hidden, _ = forward_arrays(arrays, tokens, mcfg)
        # position j's fed state depends only on fed states before it, so
        # the iteration reaches its fixpoint after len(chain) passes; extra
        # levels would recompute identical values
        for level in range(min(cfg.exposure_depth, len(chain))):
            inputs = list(tokens)
            for j in range(len(chain)):
                inputs[chain_start + j] = hidden[chain_start - 1 + j].copy()
            if level + 1 < cfg.exposure_depth:
                hidden, _ = forward_arrays(arrays, inputs, mcfg)
    trace = forward(params, inputs, mcfg)
    ce = answer_ce_loss(trace, answer, first_answer)
    if cfg.objective == "ce":
        t = len(chain)
        reasoning = ag.rows(trace.logits, chain_start - 1, chain_start + t)
        align = ag.cross_entropy_rows(reasoning, list(chain) + [cfg.hybrid.end_token])
        diags = []
    else:
        align, diags = dwal_loss(trace, chain, cfg.hybrid, chain_start)
    total = combine_losses(align, ce, cfg.hybrid)
    return total, float(align.data), float(ce.data), diags


def train(cfg: TrainConfig, mcfg: ModelConfig, dataset: Sequence[ScanPathSample],
          layout: VocabLayout, out_dir, params: dict[str, Tensor] | None = None,
          ) -> TrainResult:
    """Run the full training loop and leave checkpoints plus metrics behind.

    The dataset is split into train and held-out parts by the stable
    index hash; a fixed held-out subset is scored every ``eval_every``
    steps and the best checkpoint by (accuracy, then loss) is kept
    alongside the final one.
    """
    if not dataset:
        raise ValueError("empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, held = split_dataset(dataset)
    if not train_set:
        raise ValueError("empty dataset")
    eval_set = held[: cfg.eval_subset] if held else train_set[: cfg.eval_subset]

    if params is None:
        params = init_params(mcfg)
    state = AdamState.init(params)
    prepared = []
    for s in train_set:
        tokens, chain_start, first_answer = assemble_tokens(s, layout)
        prepared.append((tokens, s.chain, s.answer, chain_start, first_answer))

    rng = random.Random(cfg.seed)
    metrics_path = out_dir / "metrics.jsonl"
    final_path = out_dir / "final.ckpt"
    best_path = out_dir / "best.ckpt"
    records: list[MetricsRecord] = []
    best_acc = -1.0
    best_loss = math.inf
    started = time.monotonic()

    with open(metrics_path, "w", encoding="utf-8") as mf:
        for step in range(cfg.max_steps):
            batch = [prepared[rng.randrange(len(prepared))]
                     for _ in range(cfg.batch_size)]
            ag.zero_grads(params.values())
            totals, aligns, answers, all_diags = [], [], [], []
            inv_b = 1.0 / cfg.batch_size
            for tokens, chain, answer, chain_start, first_answer in batch:
                # inactive exposure must not touch the rng stream; the
                # warmup lets the token route settle before any state
                # feeding starts
                expose = (cfg.latent_exposure > 0.0
                          and step >= cfg.exposure_warmup
                          and rng.random() < cfg.latent_exposure)
                total, a_val, c_val, diags = _sample_losses(
                    params, mcfg, cfg, tokens, chain, answer, chain_start,
                    first_answer, expose=expose)
                ag.backward(ag.scale(total, inv_b))
                totals.append(float(total.data))
                aligns.append(a_val)
                answers.append(c_val)
                if diags:
                    all_diags.append(diags)
            grads = {k: p.grad for k, p in params.items()}
            lr = lr_at(cfg, step)
            adamw_step(params, grads, state, cfg, lr=lr)

            # end-marker steps are singletons and can never trigger; the
            # reported ratio covers window steps only
            flat = [d for ds in all_diags for d in ds[:-1]]
            acc = None
            if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.max_steps:
                acc = evaluate_accuracy(as_arrays(params), mcfg, layout,
                                        eval_set, horizon=cfg.horizon)
                mean_loss = float(np.mean(totals))
                if acc > best_acc or (acc == best_acc and mean_loss < best_loss):
                    best_acc = acc
                    best_loss = mean_loss
                    save_checkpoint(best_path, mcfg, params)
            rec = MetricsRecord(
                step=step,
                loss_total=float(np.mean(totals)),
                loss_align=float(np.mean(aligns)),
                loss_answer=float(np.mean(answers)),
                trigger_ratio=trigger_ratio(flat) if flat else 0.0,
                entropy_by_position=_entropy_bins(all_diags),
                lr=lr,
                held_accuracy=acc)
            records.append(rec)
            mf.write(json.dumps(rec.as_dict()) + "\n")

    save_checkpoint(final_path, mcfg, params)
    if best_acc < 0:
        save_checkpoint(best_path, mcfg, params)
    return TrainResult(params=params, state=state, metrics=records,
                       best_accuracy=max(best_acc, 0.0), final_path=final_path,
                       best_path=best_path, metrics_path=metrics_path,
                       seconds=time.monotonic() - started)
