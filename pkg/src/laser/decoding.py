"""Latent reasoning rollout, answer decoding, and trajectory inspection.

Inference replaces the explicit scan chain with a loop of continuous
steps: run the model over the prompt, read the last hidden state and its
logits, and feed the hidden state back as the next input row.  The loop
stops the first time the argmax token is the end marker, or when a step
horizon runs out.  The answer segment is then decoded greedily with the
end and answer-start markers fed as ordinary tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import softmax_array
from .data import ANSWER, ScanPathSample, VocabLayout, prompt_tokens
from .model import ModelConfig, forward_arrays

END_TOKEN = "end_token"
HORIZON = "horizon"


@dataclass(frozen=True)
class TrajectoryStep:
    """One latent reasoning step: state, logits, and its top-k readout."""
    hidden: np.ndarray
    logits: np.ndarray
    topk_ids: tuple[int, ...]
    topk_probs: tuple[float, ...]


@dataclass(frozen=True)
class LatentTrajectory:
    steps: tuple[TrajectoryStep, ...]
    fed_latents: tuple[np.ndarray, ...]
    terminated_by: str          # END_TOKEN or HORIZON
    steps_used: int


@dataclass(frozen=True)
class EfficiencyReport:
    mean_latent_steps: float
    mean_chain_length: float
    reduction: float


def _topk(probs: np.ndarray, k: int) -> tuple[tuple[int, ...], tuple[float, ...]]:
    # stable sort on negated probs: ties resolve to the lower id
    order = np.argsort(-probs, kind="stable")[:k]
    return tuple(int(i) for i in order), tuple(float(probs[i]) for i in order)


def latent_rollout(arrays: dict[str, np.ndarray], cfg: ModelConfig,
                   prompt: Sequence[int], end_token: int,
                   horizon: int = 20, k: int = 5,
                   perturb: Callable[[np.ndarray], np.ndarray] | None = None,
                   ) -> LatentTrajectory:
    """Greedy latent rollout from a token prompt.

    Each iteration runs a full forward pass over the prompt plus the
    latents fed so far and reads the final row.  Emitting the end token
    counts as a step; the state that emitted it is never fed back.
    ``perturb`` is applied to each hidden state before it is fed (the
    reinforcement stage injects exploration noise there).
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if not 1 <= k <= cfg.vocab_size:
        raise ValueError("top-k size outside vocabulary")
    inputs: list = list(prompt)
    steps: list[TrajectoryStep] = []
    fed: list[np.ndarray] = []
    terminated = HORIZON
    used = horizon
    for t in range(1, horizon + 1):
        hidden, logits = forward_arrays(arrays, inputs, cfg)
        h = hidden[-1]
        z = logits[-1]
        probs = softmax_array(z)
        ids, ps = _topk(probs, k)
        steps.append(TrajectoryStep(hidden=h, logits=z, topk_ids=ids, topk_probs=ps))
        if int(np.argmax(z)) == end_token:
            terminated = END_TOKEN
            used = t
            break
        if t < horizon:
            nxt = perturb(h) if perturb is not None else h
            fed.append(nxt)
            inputs.append(nxt)
    return LatentTrajectory(steps=tuple(steps), fed_latents=tuple(fed),
                            terminated_by=terminated, steps_used=used)


def decode_answer(arrays: dict[str, np.ndarray], cfg: ModelConfig,
                  layout: VocabLayout, prompt: Sequence[int],
                  trajectory: LatentTrajectory, n_answer: int,
                  ) -> tuple[tuple[int, ...], bool]:
    """Greedy answer decode after a rollout.

    The end and answer-start markers are fed as tokens after the fed
    latents; each answer position is then filled by the most probable
    answer-class token.  The returned flag reports whether the model's
    unrestricted argmax was answer-class at every position, which is the
    well-formedness half of the format reward.
    """
    if n_answer < 1:
        raise ValueError("empty answer")
    base: list = list(prompt) + list(trajectory.fed_latents)
    base += [layout.laser_end, layout.answer_start]
    aids = layout.answer_ids()
    out: list[int] = []
    well_formed = True
    for _ in range(n_answer):
        _, logits = forward_arrays(arrays, base + out, cfg)
        z = logits[-1]
        if layout.token_class(int(np.argmax(z))) != ANSWER:
            well_formed = False
        out.append(aids[int(np.argmax(z[aids]))])
    return tuple(out), well_formed


def trajectory_topk(trajectory: LatentTrajectory, k: int
                    ) -> list[tuple[tuple[int, ...], tuple[float, ...]]]:
    """Re-rank each step's stored logits to its k most probable tokens."""
    if k < 1:
        raise ValueError("top-k size must be positive")
    out = []
    for step in trajectory.steps:
        probs = softmax_array(step.logits)
        if k > probs.shape[0]:
            raise ValueError("top-k size outside vocabulary")
        out.append(_topk(probs, k))
    return out


def rollout_answer(arrays: dict[str, np.ndarray], cfg: ModelConfig,
                   layout: VocabLayout, sample: ScanPathSample,
                   horizon: int = 20, k: int = 5,
                   ) -> tuple[LatentTrajectory, tuple[int, ...], bool]:
    """Roll out a sample's prompt and decode its answer segment."""
    prompt = prompt_tokens(sample, layout)
    traj = latent_rollout(arrays, cfg, prompt, layout.laser_end,
                          horizon=horizon, k=k)
    answer, ok = decode_answer(arrays, cfg, layout, prompt, traj,
                               len(sample.answer))
    return traj, answer, ok


def reduction_fraction(mean_latent_steps: float, mean_chain_length: float) -> float:
    if mean_chain_length <= 0:
        raise ValueError("chain length must be positive")
    return 1.0 - mean_latent_steps / mean_chain_length


def efficiency_report(arrays: dict[str, np.ndarray], cfg: ModelConfig,
                      layout: VocabLayout, samples: Sequence[ScanPathSample],
                      horizon: int = 20) -> EfficiencyReport:
    """Mean latent steps against mean gold chain length.

    reduction = 1 - mean latent steps / mean gold chain length; negative
    when the latent loop runs longer than the explicit chains it
    replaces.
    """
    if not samples:
        raise ValueError("empty dataset")
    steps = []
    for sample in samples:
        traj = latent_rollout(arrays, cfg, prompt_tokens(sample, layout),
                              layout.laser_end, horizon=horizon, k=1)
        steps.append(traj.steps_used)
    mean_steps = float(np.mean(steps))
    mean_chain = float(np.mean([len(s.chain) for s in samples]))
    return EfficiencyReport(mean_latent_steps=mean_steps,
                            mean_chain_length=mean_chain,
                            reduction=reduction_fraction(mean_steps, mean_chain))
