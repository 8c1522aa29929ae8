"""Shrinking-window alignment objective with self-refined soft targets.

Each reasoning position is aligned against the window of chain tokens it
has not yet resolved: the window at step t holds chain positions t..T,
so its first element is exactly the token that position must predict.
The soft target is a temperature softmax of the position's own detached
logits restricted to the window vocabulary, optionally tilted by a
geometric decay that favors near-future tokens. When the normalized
entropy of that soft target exceeds a threshold, a hard one-hot for the
immediate next token is blended in; otherwise the soft target is used
unchanged. After the final chain step the end-of-reasoning token is a
deterministic one-hot target, folded in as one more step of the same
average. The answer segment is plain teacher-forced cross-entropy, and
the two losses add with unit weights by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class HybridTargetConfig:
    """Knobs of the alignment objective.

    tau: softmax temperature for the superposition target, > 0.
    eta: normalized-entropy threshold for hard-target intervention, in [0, 1].
    alpha: hard-target blend weight when intervening, in [0, 1].
    gamma: per-step geometric decay on window logits, in (0, 1]; 1 disables.
    end_token: vocabulary id of the end-of-reasoning token.
    w_align / w_answer: loss combination weights, both default 1.
    """
    tau: float = 1.0
    eta: float = 0.6
    alpha: float = 0.8
    gamma: float = 1.0
    end_token: int = 2
    w_align: float = 1.0
    w_answer: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.end_token < 0:
            raise ValueError("end_token must be a vocabulary id")


@dataclass(frozen=True)
class SemanticWindow:
    """Remaining-chain window for one step.

    positions are 1-based chain indices t..T. vocab_ids are the distinct
    tokens at those positions in first-occurrence order, end token
    excluded. first_positions[i] is the smallest chain position holding
    vocab_ids[i]. first_target is the hard-target token, chain[t].
    """
    step: int
    positions: tuple[int, ...]
    vocab_ids: tuple[int, ...]
    first_positions: tuple[int, ...]
    first_target: int


@dataclass(frozen=True)
class StepDiagnostics:
    window_size: int
    entropy: float
    intervened: bool
    step_loss: float


def build_window(chain: Sequence[int], t: int, end_token: int) -> SemanticWindow:
    """Window of unresolved chain tokens for step t (1-based)."""
    T = len(chain)
    if T < 1:
        raise ValueError("empty chain")
    if t < 1 or t > T:
        raise ValueError("window past end")
    ids: list[int] = []
    firsts: list[int] = []
    for k in range(t, T + 1):
        tok = chain[k - 1]
        if tok == end_token or tok in ids:
            continue
        ids.append(tok)
        firsts.append(k)
    if not ids:
        raise ValueError("empty distribution")
    return SemanticWindow(step=t, positions=tuple(range(t, T + 1)),
                          vocab_ids=tuple(ids), first_positions=tuple(firsts),
                          first_target=chain[t - 1])


def apply_time_decay(window_logits: np.ndarray, window: SemanticWindow,
                     gamma: float) -> np.ndarray:
    """Add (k - t) * ln(gamma) per window entry, k its first chain position."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    if gamma == 1.0:
        return window_logits
    offsets = np.asarray(window.first_positions, dtype=np.float64) - window.step
    return np.asarray(window_logits, dtype=np.float64) + offsets * math.log(gamma)


def superposition_target(detached_logits: np.ndarray, window: SemanticWindow,
                         tau: float) -> np.ndarray:
    """Temperature softmax of the window's detached logits.

    ``detached_logits`` is a full-vocabulary vector; the result aligns
    with ``window.vocab_ids`` and sums to one.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    z = np.asarray(detached_logits, dtype=np.float64)[list(window.vocab_ids)]
    return ag.softmax_array(z / tau)


def normalized_entropy(q: np.ndarray, window_size: int) -> float:
    """Shannon entropy over the window divided by its log size, in [0, 1]."""
    if window_size < 1:
        raise ValueError("empty distribution")
    if window_size == 1:
        return 0.0
    q = np.asarray(q, dtype=np.float64)
    terms = np.where(q > 0.0, q * np.log(np.where(q > 0.0, q, 1.0)), 0.0)
    h = -terms.sum() / math.log(window_size)
    # a uniform window can land a ulp above 1; clamp so a threshold of 1
    # can never fire
    return min(max(h, 0.0), 1.0)


def hybrid_target(q: np.ndarray, vocab_ids: Sequence[int], hard_id: int,
                  entropy: float, eta: float, alpha: float) -> np.ndarray:
    """Blend a one-hot of hard_id into q iff entropy exceeds eta."""
    vocab_ids = list(vocab_ids)
    if hard_id not in vocab_ids:
        raise ValueError("hard target not in validity window")
    if entropy <= eta or alpha == 0.0:
        return q
    hard = np.zeros(len(vocab_ids))
    hard[vocab_ids.index(hard_id)] = 1.0
    return alpha * hard + (1.0 - alpha) * q


def _step_targets(det_logits: np.ndarray, chain: Sequence[int], cfg: HybridTargetConfig,
                  chain_start: int) -> tuple[list[tuple[tuple[int, ...], np.ndarray]],
                                             list[StepDiagnostics]]:
    """Targets for all T+1 reasoning predictions plus their diagnostics.

    det_logits row chain_start - 1 + (t - 1) predicts chain token t; the
    row after the last chain token predicts the end token.
    """
    T = len(chain)
    targets: list[tuple[tuple[int, ...], np.ndarray]] = []
    diags: list[StepDiagnostics] = []
    for t in range(1, T + 1):
        r = chain_start - 2 + t
        window = build_window(chain, t, cfg.end_token)
        full = det_logits[r]
        if cfg.gamma < 1.0:
            full = full.copy()
            ids = list(window.vocab_ids)
            full[ids] = apply_time_decay(full[ids], window, cfg.gamma)
        q = superposition_target(full, window, cfg.tau)
        h = normalized_entropy(q, len(window.vocab_ids))
        intervened = h > cfg.eta
        target = hybrid_target(q, window.vocab_ids, window.first_target,
                               h, cfg.eta, cfg.alpha)
        targets.append((window.vocab_ids, target))
        diags.append(StepDiagnostics(window_size=len(window.vocab_ids), entropy=h,
                                     intervened=intervened, step_loss=0.0))
    targets.append(((cfg.end_token,), np.array([1.0])))
    diags.append(StepDiagnostics(window_size=1, entropy=0.0, intervened=False,
                                 step_loss=0.0))
    return targets, diags


def dwal_loss(trace, chain: Sequence[int], cfg: HybridTargetConfig, chain_start: int,
              frozen_targets: list[tuple[tuple[int, ...], np.ndarray]] | None = None
              ) -> tuple[Tensor, list[StepDiagnostics]]:
    """Windowed alignment loss over the reasoning phase of a trace.

    Averages T+1 cross-entropy terms: one soft-target term per chain
    step against the full-vocabulary softmax of the live logits, plus
    the deterministic end-token prediction. Targets come from detached
    logits and never carry gradient. ``frozen_targets`` substitutes
    externally fixed targets (equal-constant comparisons, finite
    differences); diagnostics are only produced for self-refined targets.
    """
    T = len(chain)
    if T < 1:
        raise ValueError("empty chain")
    if chain_start < 1 or chain_start + T > trace.logits.data.shape[0]:
        raise ValueError("trace does not cover the reasoning phase")
    if frozen_targets is None:
        det = ag.stop_gradient(trace.logits).data
        targets, diags = _step_targets(det, chain, cfg, chain_start)
    else:
        targets, diags = list(frozen_targets), []
    terms = []
    for i, (support, target) in enumerate(targets):
        r = chain_start - 1 + i
        terms.append(ag.soft_xent(ag.row(trace.logits, r), target, support))
    total = ag.scale(ag.add_n(terms), 1.0 / len(terms))
    if diags:
        diags = [StepDiagnostics(d.window_size, d.entropy, d.intervened,
                                 float(t.data))
                 for d, t in zip(diags, terms)]
    return total, diags


def answer_ce_loss(trace, answer: Sequence[int], first_answer: int) -> Tensor:
    """Mean teacher-forced cross-entropy over the answer tokens."""
    m = len(answer)
    if m < 1:
        raise ValueError("empty answer")
    lo = first_answer - 1
    if lo < 0 or lo + m > trace.logits.data.shape[0]:
        raise ValueError("trace does not cover the answer phase")
    return ag.cross_entropy_rows(ag.rows(trace.logits, lo, lo + m), list(answer))


def combine_losses(align: Tensor | None, answer: Tensor,
                   cfg: HybridTargetConfig) -> Tensor:
    """Weighted sum of the alignment and answer losses (weights default 1).

    Scaling is skipped at weight 1 so the unweighted sum stays bit-exact.
    """
    answer = answer if cfg.w_answer == 1.0 else ag.scale(answer, cfg.w_answer)
    if align is None:
        return answer
    align = align if cfg.w_align == 1.0 else ag.scale(align, cfg.w_align)
    return ag.add(align, answer)


def total_loss(trace, chain: Sequence[int], answer: Sequence[int],
               cfg: HybridTargetConfig, chain_start: int, first_answer: int
               ) -> tuple[Tensor, list[StepDiagnostics]]:
    """Combined alignment and answer loss for one teacher-forced sample.

    An empty chain disables the alignment branch entirely: the result is
    then the weighted answer loss alone.
    """
    ce = answer_ce_loss(trace, answer, first_answer)
    if len(chain) == 0:
        return combine_losses(None, ce, cfg), []
    align, diags = dwal_loss(trace, chain, cfg, chain_start)
    return combine_losses(align, ce, cfg), diags


def trigger_ratio(diags: Sequence[StepDiagnostics]) -> float:
    """Fraction of steps where the hard-target intervention fired."""
    if not diags:
        raise ValueError("no diagnostics")
    return sum(1 for d in diags if d.intervened) / len(diags)


# --------------------------------------------------------------------------
# tape-free value evaluation (finite differences, fast oracles)

def _soft_xent_value(z: np.ndarray, target: np.ndarray, support) -> float:
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    return float(-(target * (z[list(support)] - lse)).sum())


def dwal_loss_value(logits: np.ndarray, chain: Sequence[int], cfg: HybridTargetConfig,
                    chain_start: int,
                    frozen_targets=None) -> float:
    if frozen_targets is None:
        frozen_targets, _ = _step_targets(logits, chain, cfg, chain_start)
    vals = [_soft_xent_value(logits[chain_start - 1 + i], tgt, sup)
            for i, (sup, tgt) in enumerate(frozen_targets)]
    return sum(vals) * (1.0 / len(vals))


def answer_ce_value(logits: np.ndarray, answer: Sequence[int], first_answer: int) -> float:
    lo = first_answer - 1
    rows = logits[lo:lo + len(answer)]
    m = rows.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(rows - m).sum(axis=1, keepdims=True))).ravel()
    picked = rows[np.arange(len(answer)), list(answer)]
    return float((lse - picked).mean())


def total_loss_value(logits: np.ndarray, chain: Sequence[int], answer: Sequence[int],
                     cfg: HybridTargetConfig, chain_start: int, first_answer: int,
                     frozen_targets=None) -> float:
    val = cfg.w_answer * answer_ce_value(logits, answer, first_answer)
    if len(chain) > 0:
        val += cfg.w_align * dwal_loss_value(logits, chain, cfg, chain_start,
                                             frozen_targets)
    return val


def reasoning_targets(logits: np.ndarray, chain: Sequence[int], cfg: HybridTargetConfig,
                      chain_start: int):
    """The T+1 (support, target) pairs the loss would build from these logits."""
    targets, _ = _step_targets(np.asarray(logits, dtype=np.float64), chain, cfg,
                               chain_start)
    return targets
