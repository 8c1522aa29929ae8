"""End-to-end checks of the finished system at its working scale.

Every test here pins one headline contract: exact gradient agreement
against finite differences, the distributional identities of the
alignment targets, the reinforcement surrogate's closed-form
reductions, dataset statistics, and the desk-scale training,
efficiency, and reinforcement results.  The heavyweight artifacts
(trained models, reinforcement runs) come from session fixtures so
several tests can share one run.
"""

import math
import time
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from laser import autograd as ag
from laser.autograd import Tensor
from laser.data import (VocabLayout, chain_lengths, generate_dataset,
                        prompt_tokens, read_dataset, split_dataset,
                        validate_sample, write_dataset)
from laser.decoding import (END_TOKEN, HORIZON, LatentTrajectory,
                            TrajectoryStep, efficiency_report, latent_rollout,
                            reduction_fraction)
from laser.model import (ModelConfig, as_arrays, forward, forward_arrays,
                         init_params, load_checkpoint, save_checkpoint)
from laser.objective import (HybridTargetConfig, answer_ce_loss,
                             answer_ce_value, apply_time_decay, build_window,
                             combine_losses, dwal_loss, dwal_loss_value,
                             hybrid_target, normalized_entropy,
                             reasoning_targets, superposition_target,
                             total_loss_value, trigger_ratio)
from laser.rl import (RLConfig, compute_rewards, epg_token_loss,
                      group_advantage, norm_perturb, policy_loss,
                      rollout_trajectory, topp_set)
from laser.training import evaluate_accuracy


def small_model(seed: int) -> tuple[ModelConfig, dict]:
    cfg = ModelConfig(vocab_size=64, d_model=16, n_layers=1, n_heads=2,
                      max_seq=16, seed=seed)
    return cfg, init_params(cfg)


def random_case(rng):
    """A random teacher-forced sequence with loss offsets, vocab 64."""
    tokens = [int(t) for t in rng.integers(5, 64, size=16)]
    T = int(rng.integers(1, 5))
    chain = [int(t) for t in rng.integers(5, 64, size=T)]
    chain_start = 6
    answer = [int(rng.integers(5, 64))]
    first_answer = 14
    return tokens, chain, chain_start, answer, first_answer


def param_grads(params):
    return {k: p.grad.copy() for k, p in params.items()}


# --------------------------------------------------------------------------
# 1. analytic gradients of all three losses against central differences

def test_loss_gradients_match_finite_differences():
    started = time.monotonic()
    step = 1e-5
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(900 + seed)
        mcfg, params = small_model(seed)
        tokens, chain, cs, answer, fa = random_case(rng)
        hcfg = HybridTargetConfig()

        trace = forward(params, tokens, mcfg)
        frozen = reasoning_targets(trace.logits.data, chain, hcfg, cs)

        def analytic(make_loss):
            ag.zero_grads(params.values())
            ag.backward(make_loss(forward(params, tokens, mcfg)))
            return param_grads(params)

        arrays = as_arrays(params)

        def logits_now():
            return forward_arrays(arrays, tokens, mcfg)[1]

        losses = [
            (lambda tr: dwal_loss(tr, chain, hcfg, cs)[0],
             lambda: dwal_loss_value(logits_now(), chain, hcfg, cs,
                                     frozen_targets=frozen)),
            (lambda tr: answer_ce_loss(tr, answer, fa),
             lambda: answer_ce_value(logits_now(), answer, fa)),
            (lambda tr: combine_losses(dwal_loss(tr, chain, hcfg, cs)[0],
                                       answer_ce_loss(tr, answer, fa), hcfg),
             lambda: total_loss_value(logits_now(), chain, answer, hcfg, cs,
                                      fa, frozen_targets=frozen)),
        ]
        for make_loss, value in losses:
            grads = analytic(make_loss)
            for key, arr in arrays.items():
                count = min(arr.size, 8)
                coords = rng.choice(arr.size, size=count, replace=False)
                for idx in coords:
                    base = arr.flat[idx]
                    arr.flat[idx] = base + step
                    fp = value()
                    arr.flat[idx] = base - step
                    fm = value()
                    arr.flat[idx] = base
                    fd = (fp - fm) / (2.0 * step)
                    a = grads[key].flat[idx]
                    err = abs(a - fd) / max(abs(a), abs(fd), 1e-5)
                    worst = max(worst, err)
    elapsed = time.monotonic() - started
    assert worst < 1e-4, f"worst relative error {worst:.3e}"
    assert elapsed < 120.0, f"suite took {elapsed:.1f}s"


# --------------------------------------------------------------------------
# 2. superposition targets are distributions with entropy in [0, 1]

def test_alignment_targets_form_bounded_entropy_distributions():
    rng = np.random.default_rng(11)
    taus = (0.25, 1.0, 4.0)
    for _ in range(10_000):
        T = int(rng.integers(1, 11))
        chain = [int(t) for t in rng.integers(5, 57, size=T)]
        t = int(rng.integers(1, T + 1))
        w = build_window(chain, t, end_token=2)
        logits = rng.normal(scale=3.0, size=57)
        q = superposition_target(logits, w, float(taus[int(rng.integers(3))]))
        assert q.min() >= 0.0
        assert abs(q.sum() - 1.0) <= 1e-12
        h = normalized_entropy(q, len(w.vocab_ids))
        assert 0.0 <= h <= 1.0

    for n in (2, 3, 7, 16):
        assert abs(normalized_entropy(np.full(n, 1.0 / n), n) - 1.0) <= 1e-12
        one_hot = np.zeros(n)
        one_hot[0] = 1.0
        assert normalized_entropy(one_hot, n) == 0.0
    assert normalized_entropy(np.array([1.0]), 1) == 0.0


# --------------------------------------------------------------------------
# 3. degenerate settings collapse to their plain forms

def test_degenerate_settings_collapse_to_plain_forms():
    rng = np.random.default_rng(23)

    # singleton chains: both averaged terms are plain next-token CE
    for _ in range(200):
        logits = rng.normal(scale=2.0, size=(8, 57))
        c = int(rng.integers(5, 57))
        cfg = HybridTargetConfig(alpha=float(rng.random()))
        got = dwal_loss_value(logits, [c], cfg, chain_start=3)

        def plain_ce(row, tok):
            z = logits[row]
            lse = z.max() + math.log(np.exp(z - z.max()).sum())
            return lse - z[tok]

        want = 0.5 * (plain_ce(2, c) + plain_ce(3, cfg.end_token))
        assert abs(got - want) <= 1e-12

        w = build_window([c], 1, cfg.end_token)
        q = superposition_target(logits[2], w, cfg.tau)
        assert q.shape == (1,) and q[0] == 1.0

    # unit decay is the bit-exact identity
    chain = [int(t) for t in rng.integers(5, 57, size=6)]
    w = build_window(chain, 2, 2)
    wl = rng.normal(size=len(w.vocab_ids))
    assert np.array_equal(apply_time_decay(wl.copy(), w, 1.0), wl)

    # zero blend weight leaves the soft target untouched bitwise
    q = rng.random(5)
    q /= q.sum()
    ids = [10, 11, 12, 13, 14]
    out = hybrid_target(q, ids, 12, entropy=0.99, eta=0.1, alpha=0.0)
    assert np.array_equal(out, q)

    # a threshold of one can never fire: normalized entropy is <= 1
    cfg1 = HybridTargetConfig(eta=1.0)
    diags = []
    for _ in range(64):
        T = int(rng.integers(2, 9))
        chain = [int(t) for t in rng.integers(5, 57, size=T)]
        trace = SimpleNamespace(logits=Tensor(rng.normal(size=(T + 4, 57))))
        _, d = dwal_loss(trace, chain, cfg1, chain_start=3)
        diags.extend(d)
    assert trigger_ratio(diags) == 0.0


# --------------------------------------------------------------------------
# 4. intervention rate is monotone non-increasing in the threshold

def test_intervention_rate_never_rises_with_threshold():
    rng = np.random.default_rng(31)
    batch = []
    for _ in range(64):
        T = int(rng.integers(2, 10))
        chain = [int(t) for t in rng.integers(5, 57, size=T)]
        batch.append((chain, rng.normal(size=(T + 4, 57))))
    ratios = []
    for eta in (0.5, 0.6, 0.8, 1.0):
        cfg = HybridTargetConfig(eta=eta)
        diags = []
        for chain, logits in batch:
            trace = SimpleNamespace(logits=Tensor(logits.copy()))
            _, d = dwal_loss(trace, chain, cfg, chain_start=3)
            diags.extend(d)
        ratios.append(trigger_ratio(diags))
    assert all(a >= b for a, b in zip(ratios, ratios[1:])), ratios
    assert ratios[-1] == 0.0


# --------------------------------------------------------------------------
# 5. detached targets behave exactly like equal constants

def test_detached_targets_match_equal_constant_targets():
    for seed in range(5):
        rng = np.random.default_rng(50 + seed)
        mcfg, params = small_model(seed)
        tokens, chain, cs, _, _ = random_case(rng)
        hcfg = HybridTargetConfig()

        trace = forward(params, tokens, mcfg)
        frozen = reasoning_targets(trace.logits.data, chain, hcfg, cs)
        ag.zero_grads(params.values())
        ag.backward(dwal_loss(trace, chain, hcfg, cs)[0])
        live = param_grads(params)

        ag.zero_grads(params.values())
        trace2 = forward(params, tokens, mcfg)
        ag.backward(dwal_loss(trace2, chain, hcfg, cs,
                              frozen_targets=frozen)[0])
        const = param_grads(params)

        for key in live:
            delta = np.abs(live[key] - const[key]).max()
            assert delta < 1e-10, f"{key}: {delta:.3e}"


# --------------------------------------------------------------------------
# 6. policy surrogate closed-form reductions

def test_policy_surrogate_reductions(layout):
    rng = np.random.default_rng(61)

    # singleton candidate set is the standard clipped per-token surrogate
    for _ in range(100):
        z = Tensor(rng.normal(size=57))
        old = rng.random(57)
        old /= old.sum()
        i = int(rng.integers(57))
        adv = float(rng.normal())
        eps = 0.2
        loss = epg_token_loss(z, old, [i], np.array([1.0]), adv, eps, 1e-8)
        p = np.exp(z.data - z.data.max())
        p /= p.sum()
        ratio = p[i] / (old[i] + 1e-8)
        want = -min(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)
        assert abs(float(loss.data) - want) <= 1e-12

    # identical policies with no denominator guard: surrogate equals A
    for _ in range(50):
        z = Tensor(rng.normal(size=57))
        p = np.exp(z.data - z.data.max())
        p /= p.sum()
        ids, weights = topp_set(p, 0.9)
        adv = float(rng.normal())
        loss = epg_token_loss(z, p, ids, weights, adv, 0.2, 0.0)
        assert abs(float(loss.data) + adv) <= 1e-12

    # exploration noise has magnitude exactly lambda times the state norm
    lam = 0.05
    for _ in range(10_000):
        h = rng.normal(size=int(rng.integers(4, 33)))
        if np.linalg.norm(h) == 0.0:
            continue
        hp = norm_perturb(h, lam, rng)
        got = np.linalg.norm(hp - h)
        want = lam * np.linalg.norm(h)
        assert abs(got - want) / want <= 1e-9

    # doubling the fixed completion length halves the surrogate bitwise
    mcfg = ModelConfig(vocab_size=layout.vocab_floor, d_model=16, n_layers=1,
                       n_heads=2, max_seq=64, seed=5)
    params = init_params(mcfg)
    arrays = as_arrays(params)
    sample = generate_dataset(13, 3, layout)[0]
    cfg = RLConfig(l_max=24, horizon=8, t_upper=8)
    rec = rollout_trajectory(arrays, arrays, mcfg, layout, sample, cfg,
                             np.random.default_rng(0), horizon=8)
    rec.advantage = 0.7
    _, s1, k1 = policy_loss([rec], params, mcfg, cfg)
    _, s2, k2 = policy_loss([rec], params, mcfg, replace(cfg, l_max=48))
    assert s2 * 2.0 == s1
    assert k2 == k1


# --------------------------------------------------------------------------
# 7. reward contract

def _fake_trajectory(hiddens, terminated_by):
    steps = tuple(TrajectoryStep(hidden=h, logits=np.zeros(57),
                                 topk_ids=(0,), topk_probs=(1.0,))
                  for h in hiddens)
    return LatentTrajectory(steps=steps, fed_latents=(),
                            terminated_by=terminated_by,
                            steps_used=len(hiddens))


def test_reward_contract():
    rng = np.random.default_rng(71)
    cfg = RLConfig()

    # a truncated rollout never earns the efficiency bonus, even correct
    traj = _fake_trajectory([rng.normal(size=8) for _ in range(3)], HORIZON)
    r = compute_rewards(traj, (53,), True, (53,), cfg)
    assert r.eff == 0.0 and r.acc == 1.0

    # stagnation penalty bounds over random consecutive state pairs
    for _ in range(10_000):
        traj = _fake_trajectory([rng.normal(size=8), rng.normal(size=8)],
                                END_TOKEN)
        r = compute_rewards(traj, (53,), True, (54,), cfg)
        assert -cfg.lambda_div <= r.div <= 0.0

    # group advantages: zero mean, invariant to a common reward shift
    for _ in range(500):
        g = int(rng.integers(2, 9))
        rewards = rng.normal(size=g)
        adv = group_advantage(rewards, 1e-8)
        assert abs(adv.mean()) <= 1e-12
        shifted = group_advantage(rewards + 3.7, 1e-8)
        assert np.allclose(adv, shifted, rtol=0.0, atol=1e-9)


# --------------------------------------------------------------------------
# 8. dataset statistics at scale

def test_dataset_statistics(layout, big_dataset):
    lens = chain_lengths(big_dataset)
    assert len(big_dataset) == 10_000
    assert min(lens) >= 1 and max(lens) <= 20
    mean = sum(lens) / len(lens)
    assert 6.5 <= mean <= 7.8, f"mean chain length {mean:.3f}"
    assert all(validate_sample(s, layout) for s in big_dataset)
    again = generate_dataset(7, 10_000, layout)
    assert again == big_dataset


# --------------------------------------------------------------------------
# 9. desk-scale training reaches the accuracy target in budget

def test_desk_training_reaches_target_accuracy(trained_run, ce_baseline_run):
    result, cfg = trained_run
    baseline, _ = ce_baseline_run
    assert cfg.hybrid.tau == 1.0 and cfg.hybrid.eta == 0.6
    assert cfg.hybrid.alpha == 0.8 and cfg.max_steps <= 2000
    assert result.seconds < 900.0, f"training took {result.seconds:.0f}s"
    print(f"held-out rollout accuracy {result.best_accuracy:.3f} "
          f"(cross-entropy baseline {baseline.best_accuracy:.3f})")
    assert result.best_accuracy >= 0.90


# --------------------------------------------------------------------------
# 10. latent efficiency and trace semantics on the trained model

def test_latent_steps_and_trace_classes(trained_arrays, layout,
                                        train_dataset):
    assert reduction_fraction(7.0, 7.0) == 0.0
    assert reduction_fraction(1.0, 7.14) == pytest.approx(
        0.8599439775910365, abs=1e-12)

    arrays, mcfg = trained_arrays
    _, held = split_dataset(train_dataset)
    probe = held[:200]
    report = efficiency_report(arrays, mcfg, layout, probe, horizon=20)
    assert report.mean_latent_steps <= 8.0, report

    glo, ghi = layout.global_range
    alo, ahi = layout.attribute_range
    answers = set(layout.answer_ids())
    hits = 0
    for s in probe:
        traj = latent_rollout(arrays, mcfg, prompt_tokens(s, layout),
                              layout.laser_end, horizon=20)
        first = traj.steps[0].topk_ids[0]
        non_end = [st.topk_ids[0] for st in traj.steps
                   if st.topk_ids[0] != layout.laser_end]
        last = non_end[-1] if non_end else -1
        ok_first = glo <= first < ghi
        ok_last = (alo <= last < ahi) or last in answers
        hits += ok_first and ok_last
    frac = hits / len(probe)
    print(f"trace class agreement {frac:.3f} "
          f"(mean steps {report.mean_latent_steps:.2f})")
    assert frac >= 0.70


# --------------------------------------------------------------------------
# 11. the reinforcement stage must not regress the trained model

def _held_metrics(arrays, mcfg, layout, dataset):
    _, held = split_dataset(dataset)
    probe = held[:200]
    acc = evaluate_accuracy(arrays, mcfg, layout, probe, horizon=20)
    rep = efficiency_report(arrays, mcfg, layout, probe, horizon=20)
    return acc, rep.mean_latent_steps


def test_reinforcement_stage_preserves_quality(trained_arrays, rl_main_run,
                                               rl_control_run, layout,
                                               train_dataset):
    base_arrays, mcfg = trained_arrays
    base_acc, base_steps = _held_metrics(base_arrays, mcfg, layout,
                                         train_dataset)

    main_result, _, main_mcfg = rl_main_run
    main_arrays = as_arrays(main_result.params)
    acc, steps = _held_metrics(main_arrays, main_mcfg, layout, train_dataset)
    print(f"reinforcement: accuracy {base_acc:.3f} -> {acc:.3f}, "
          f"steps {base_steps:.2f} -> {steps:.2f}")
    assert acc >= base_acc - 0.02
    assert steps <= base_steps + 1e-9

    control_result, _, control_mcfg = rl_control_run
    control_arrays = as_arrays(control_result.params)
    _, control_steps = _held_metrics(control_arrays, control_mcfg, layout,
                                     train_dataset)
    print(f"no-bonus control: steps {base_steps:.2f} -> {control_steps:.2f}")
    assert control_steps >= base_steps - 0.25


# --------------------------------------------------------------------------
# 12. file formats survive write-read-write byte-identically

def test_file_formats_round_trip(tmp_path, layout):
    samples = generate_dataset(3, 50, layout)
    p1 = tmp_path / "a.tsv"
    p2 = tmp_path / "b.tsv"
    write_dataset(p1, samples)
    back = read_dataset(p1)
    assert back == samples
    write_dataset(p2, back)
    assert p1.read_bytes() == p2.read_bytes()

    mcfg = ModelConfig(vocab_size=57, d_model=16, n_layers=1, n_heads=2,
                       max_seq=32, seed=9)
    params = init_params(mcfg)
    c1 = tmp_path / "a.ckpt"
    c2 = tmp_path / "b.ckpt"
    save_checkpoint(c1, mcfg, params)
    mcfg2, params2 = load_checkpoint(c1)
    save_checkpoint(c2, mcfg2, params2)
    assert c1.read_bytes() == c2.read_bytes()
