"""Group-relative policy optimization over latent reasoning rollouts.

Each iteration rolls out a group of noisy latent trajectories per
prompt, scores them with a composite reward (answer correctness, format,
step-efficiency bonus, state-diversity penalty), normalizes rewards
within each group, and takes one clipped-surrogate step.  Latent steps
are updated through the expectation over the old policy's top-p token
set; the explicit answer token gets the standard single-token surrogate.
A frozen copy of the starting weights anchors a full-vocabulary KL
penalty.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, softmax_array
from .data import ANSWER, ScanPathSample, VocabLayout, prompt_tokens, split_dataset
from .decoding import END_TOKEN, LatentTrajectory, latent_rollout
from .model import ModelConfig, as_arrays, forward, forward_arrays, save_checkpoint
from .training import AdamState, TrainConfig, adamw_step


@dataclass(frozen=True)
class RLConfig:
    lr: float = 5e-5
    eps_clip: float = 0.2
    eps_den: float = 1e-8
    kl_beta: float = 0.02
    top_p: float = 0.9
    group_size: int = 4
    l_max: int = 24
    noise_lambda: float = 0.05
    t_min: int = 4
    t_upper: int = 20
    truncated_frac: float = 0.3
    beta_base: float = 1.0
    lambda_step: float = 0.05
    r_fmt: float = 0.25
    lambda_div: float = 0.1
    adv_stab: float = 1e-8
    batch_prompts: int = 8
    horizon: int = 20
    iterations: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.eps_clip < 1.0:
            raise ValueError("clip range must be in (0, 1)")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top-p mass must be in (0, 1]")
        if self.group_size < 2:
            raise ValueError("group size must be at least 2")
        if self.l_max < self.horizon + 1:
            raise ValueError("max completion length shorter than a full rollout")
        if self.noise_lambda < 0:
            raise ValueError("noise ratio must be non-negative")
        if not 1 <= self.t_min <= self.t_upper <= self.horizon:
            raise ValueError("truncation range must satisfy 1 <= min <= upper <= horizon")
        if not 0.0 <= self.truncated_frac <= 1.0:
            raise ValueError("truncated fraction must be in [0, 1]")
        if self.batch_prompts < 1 or self.iterations < 0:
            raise ValueError("batch and iteration counts must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    acc: float
    fmt: float
    eff: float
    div: float
    total: float


@dataclass
class TrajectoryRecord:
    """Everything frozen at rollout time that the update step needs."""
    inputs: list
    step_rows: list[int]
    answer_rows: list[int]
    old_step_probs: list[np.ndarray]
    old_answer_probs: list[np.ndarray]
    topp: list[tuple[np.ndarray, np.ndarray]]
    answer_tokens: list[int]
    ref_probs: list[np.ndarray]
    steps_used: int
    truncated: bool
    rewards: RewardBreakdown
    advantage: float = 0.0


def norm_perturb(h: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian direction noise rescaled to a fixed fraction of the norm."""
    if lam == 0.0:
        return h
    h_norm = float(np.linalg.norm(h))
    if h_norm == 0.0:
        return h
    noise = rng.standard_normal(h.shape)
    while float(np.linalg.norm(noise)) == 0.0:      # probability-zero redraw
        noise = rng.standard_normal(h.shape)
    return h + lam * (h_norm / float(np.linalg.norm(noise))) * noise


def topp_set(dist: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest probability-sorted prefix of mass >= p, weights renormalized."""
    if not 0.0 < p <= 1.0:
        raise ValueError("top-p mass must be in (0, 1]")
    order = np.argsort(-dist, kind="stable")
    csum = np.cumsum(dist[order])
    target = min(p, float(csum[-1]))                # guard fp undershoot of 1
    cut = int(np.searchsorted(csum, target, side="left")) + 1
    ids = order[:cut]
    weights = dist[ids] / dist[ids].sum()
    return ids, weights


def epg_token_loss(new_logits: Tensor, old_probs: np.ndarray, ids, weights,
                   advantage: float, eps_clip: float, eps_den: float) -> Tensor:
    """Negated clipped surrogate, averaged over the stored top-p set.

    A singleton set with weight one is exactly the standard per-token
    clipped surrogate, which is how explicit answer tokens are handled.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty top-p set")
    probs = ag.softmax(new_logits)
    ratios = ag.mul_const(ag.gather(probs, ids), 1.0 / (old_probs[ids] + eps_den))
    plain = ag.mul_const(ratios, advantage)
    clipped = ag.mul_const(ag.clip(ratios, 1.0 - eps_clip, 1.0 + eps_clip),
                           advantage)
    return ag.neg(ag.dot_const(ag.minimum(plain, clipped), weights))


def group_advantage(rewards: Sequence[float], stabilizer: float) -> np.ndarray:
    """Within-group z-scores with population std; zeros for a flat group."""
    if len(rewards) < 2:
        raise ValueError("group size must be at least 2")
    r = np.asarray(rewards, dtype=np.float64)
    # mean rounding can leave a nonzero std on an all-equal group
    if np.all(r == r[0]):
        return np.zeros_like(r)
    std = float(r.std())
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + stabilizer)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def compute_rewards(trajectory: LatentTrajectory, decoded: Sequence[int],
                    well_formed: bool, gold_answer: Sequence[int],
                    cfg: RLConfig) -> RewardBreakdown:
    correct = tuple(decoded) == tuple(gold_answer)
    self_terminated = trajectory.terminated_by == END_TOKEN
    truncated = not self_terminated
    steps = trajectory.steps_used

    r_acc = 1.0 if correct else 0.0
    r_fmt = cfg.r_fmt if (self_terminated and well_formed) else 0.0
    r_eff = 0.0
    if correct and not truncated:
        r_eff = max(0.0, cfg.beta_base - cfg.lambda_step * steps)
    r_div = 0.0
    hiddens = [s.hidden for s in trajectory.steps]
    if len(hiddens) >= 2:
        sq = [_cosine(a, b) ** 2 for a, b in zip(hiddens, hiddens[1:])]
        r_div = -cfg.lambda_div * float(np.mean(sq))
    return RewardBreakdown(acc=r_acc, fmt=r_fmt, eff=r_eff, div=r_div,
                           total=r_acc + r_fmt + r_eff + r_div)


def kl_reference(new_logits: Tensor, ref_probs: np.ndarray) -> Tensor:
    """KL from the frozen reference to the current policy, reference first."""
    ref_term = float(np.where(ref_probs > 0.0,
                              ref_probs * np.log(np.where(ref_probs > 0.0,
                                                          ref_probs, 1.0)),
                              0.0).sum())
    probs = ag.clip(ag.softmax(new_logits), 1e-12, None)
    cross = ag.dot_const(ag.log(probs), ref_probs)
    return ag.sub(Tensor(np.asarray(ref_term)), cross)


def policy_loss(records: Sequence[TrajectoryRecord], params, mcfg: ModelConfig,
                cfg: RLConfig) -> tuple[Tensor, float, float]:
    """Surrogate over all trajectories plus the KL penalty.

    Normalization is by (trajectory count x fixed max completion
    length), independent of each trajectory's actual length, so padding
    or truncation does not reweigh samples.  Returns the loss and the
    plain values of its two parts.
    """
    if not records:
        raise ValueError("no trajectories")
    token_terms: list[Tensor] = []
    kl_terms: list[Tensor] = []
    for rec in records:
        trace = forward(params, rec.inputs, mcfg)
        refs = iter(rec.ref_probs)
        for i, r in enumerate(rec.step_rows):
            zrow = ag.row(trace.logits, r)
            ids, weights = rec.topp[i]
            token_terms.append(epg_token_loss(zrow, rec.old_step_probs[i], ids,
                                              weights, rec.advantage,
                                              cfg.eps_clip, cfg.eps_den))
            kl_terms.append(kl_reference(zrow, next(refs)))
        for j, r in enumerate(rec.answer_rows):
            zrow = ag.row(trace.logits, r)
            tok = rec.answer_tokens[j]
            token_terms.append(epg_token_loss(zrow, rec.old_answer_probs[j],
                                              [tok], np.array([1.0]),
                                              rec.advantage, cfg.eps_clip,
                                              cfg.eps_den))
            kl_terms.append(kl_reference(zrow, next(refs)))
    surrogate = ag.scale(ag.add_n(token_terms), 1.0 / (len(records) * cfg.l_max))
    kl = ag.scale(ag.add_n(kl_terms), 1.0 / len(kl_terms))
    loss = ag.add(surrogate, ag.scale(kl, cfg.kl_beta))
    return loss, float(surrogate.data), float(kl.data)


def rollout_trajectory(arrays, ref_arrays, mcfg: ModelConfig,
                       layout: VocabLayout, sample: ScanPathSample,
                       cfg: RLConfig, rng: np.random.Generator,
                       horizon: int) -> TrajectoryRecord:
    """One noisy rollout with everything the update needs frozen in place."""
    prompt = prompt_tokens(sample, layout)
    perturb = None
    if cfg.noise_lambda > 0.0:
        perturb = lambda h: norm_perturb(h, cfg.noise_lambda, rng)
    traj = latent_rollout(arrays, mcfg, prompt, layout.laser_end,
                          horizon=horizon, k=1, perturb=perturb)
    base: list = list(prompt) + list(traj.fed_latents)
    base += [layout.laser_end, layout.answer_start]

    answer_rows: list[int] = []
    old_answer_probs: list[np.ndarray] = []
    answer_tokens: list[int] = []
    aids = layout.answer_ids()
    well_formed = True
    inputs = list(base)
    for _ in range(len(sample.answer)):
        _, logits = forward_arrays(arrays, inputs, mcfg)
        z = logits[-1]
        if layout.token_class(int(np.argmax(z))) != ANSWER:
            well_formed = False
        tok = aids[int(np.argmax(z[aids]))]
        answer_rows.append(len(inputs) - 1)
        old_answer_probs.append(softmax_array(z))
        answer_tokens.append(tok)
        inputs.append(tok)
    inputs = inputs[:-1] if len(sample.answer) > 0 else inputs   # last token is predicted, not fed

    n = len(prompt)
    step_rows = [n - 1 + i for i in range(traj.steps_used)]
    old_step_probs = [softmax_array(s.logits) for s in traj.steps]
    topp = [topp_set(p, cfg.top_p) for p in old_step_probs]

    _, ref_logits = forward_arrays(ref_arrays, inputs, mcfg)
    ref_probs = [softmax_array(ref_logits[r]) for r in step_rows + answer_rows]

    rewards = compute_rewards(traj, answer_tokens, well_formed, sample.answer,
                              cfg)
    return TrajectoryRecord(
        inputs=inputs, step_rows=step_rows, answer_rows=answer_rows,
        old_step_probs=old_step_probs, old_answer_probs=old_answer_probs,
        topp=topp, answer_tokens=answer_tokens, ref_probs=ref_probs,
        steps_used=traj.steps_used,
        truncated=traj.terminated_by != END_TOKEN,
        rewards=rewards)


@dataclass
class RLResult:
    params: dict[str, Tensor]
    metrics: list[dict]
    final_path: Path
    metrics_path: Path
    seconds: float


def rl_train(params: dict[str, Tensor], mcfg: ModelConfig, layout: VocabLayout,
             dataset: Sequence[ScanPathSample], cfg: RLConfig, out_dir,
             ) -> RLResult:
    """Run the reinforcement stage in place on pre-trained parameters."""
    if not dataset:
        raise ValueError("empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, _ = split_dataset(dataset)
    if not train_set:
        train_set = list(dataset)

    ref_arrays = {k: p.data.copy() for k, p in params.items()}
    opt_cfg = TrainConfig(lr=cfg.lr, weight_decay=0.0, schedule="constant",
                          max_steps=max(1, cfg.iterations))
    state = AdamState.init(params)
    rng = np.random.default_rng(cfg.seed)
    metrics_path = out_dir / "metrics.jsonl"
    final_path = out_dir / "final.ckpt"
    records_out: list[dict] = []
    started = time.monotonic()

    with open(metrics_path, "w", encoding="utf-8") as mf:
        mf.write(json.dumps({"config": asdict(cfg)}) + "\n")
        for it in range(cfg.iterations):
            arrays = as_arrays(params)
            batch: list[TrajectoryRecord] = []
            for _ in range(cfg.batch_prompts):
                sample = train_set[int(rng.integers(len(train_set)))]
                group = []
                for _ in range(cfg.group_size):
                    horizon = cfg.horizon
                    if rng.random() < cfg.truncated_frac:
                        horizon = int(rng.integers(cfg.t_min, cfg.t_upper + 1))
                    group.append(rollout_trajectory(
                        arrays, ref_arrays, mcfg, layout, sample, cfg, rng,
                        horizon))
                adv = group_advantage([g.rewards.total for g in group],
                                      cfg.adv_stab)
                for g, a in zip(group, adv):
                    g.advantage = float(a)
                batch.extend(group)

            ag.zero_grads(params.values())
            loss, surrogate, kl = policy_loss(batch, params, mcfg, cfg)
            ag.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            adamw_step(params, grads, state, opt_cfg)

            row = {
                "iteration": it,
                "loss": float(loss.data),
                "surrogate": surrogate,
                "kl": kl,
                "mean_reward": float(np.mean([b.rewards.total for b in batch])),
                "mean_steps": float(np.mean([b.steps_used for b in batch])),
                "accuracy": float(np.mean([b.rewards.acc for b in batch])),
                "mean_r_fmt": float(np.mean([b.rewards.fmt for b in batch])),
                "mean_r_eff": float(np.mean([b.rewards.eff for b in batch])),
                "mean_r_div": float(np.mean([b.rewards.div for b in batch])),
            }
            records_out.append(row)
            mf.write(json.dumps(row) + "\n")

    save_checkpoint(final_path, mcfg, params)
    return RLResult(params=params, metrics=records_out, final_path=final_path,
                    metrics_path=metrics_path, seconds=time.monotonic() - started)
