"""Command-line surface: synth | train | eval | decode | rl | stats.

Machine-readable results go to standard out, human-oriented summaries
to standard error.  Exit codes: 0 success, 1 usage error, 2 corrupt
data or checkpoint.  Config resolution is flags over file over
defaults; the `LASER_SEED` environment variable seeds runs that specify
no seed anywhere else.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from .config import ConfigError, format_config, load_config, resolve
from .data import (DatasetFormatError, VocabLayout, generate_dataset,
                   prompt_tokens, read_dataset, stats_report, write_dataset)
from .decoding import decode_answer, latent_rollout
from .model import (CheckpointError, ModelConfig, as_arrays, load_checkpoint,
                    save_checkpoint)
from .objective import HybridTargetConfig
from .rl import RLConfig, rl_train
from .training import TrainConfig, evaluate_accuracy, train

_MODEL_DEFAULTS = dict(d_model=32, n_layers=2, n_heads=4, max_seq=64, seed=0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):   # argparse would exit(2); the contract is 1
        raise UsageError(message)


def default_config(layout: VocabLayout) -> dict:
    """Full flat defaults table; doubles as the config schema."""
    out: dict = {}
    sections = (
        ("model", ModelConfig(vocab_size=layout.vocab_floor, **_MODEL_DEFAULTS)),
        ("train", TrainConfig()),
        ("hybrid", HybridTargetConfig()),
        ("rl", RLConfig()),
    )
    for prefix, obj in sections:
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                continue                      # nested sections get their own prefix
            out[f"{prefix}.{f.name}"] = value
    out["rl.data"] = ""
    env_seed = os.environ.get("LASER_SEED")
    if env_seed is not None:
        for key in ("model.seed", "train.seed", "rl.seed"):
            out[key] = int(env_seed)
    return out


def _section(resolved: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in resolved.items() if k.startswith(prefix + ".")}


def _build_configs(resolved: dict) -> tuple[ModelConfig, TrainConfig, RLConfig]:
    hybrid = HybridTargetConfig(**_section(resolved, "hybrid"))
    mcfg = ModelConfig(**_section(resolved, "model"))
    train_kw = _section(resolved, "train")
    tcfg = TrainConfig(hybrid=hybrid, **train_kw)
    rl_kw = _section(resolved, "rl")
    rl_kw.pop("data", None)
    rcfg = RLConfig(**rl_kw)
    return mcfg, tcfg, rcfg


def _parse_overrides(pairs) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolved_from_args(args) -> dict:
    layers = []
    if getattr(args, "config", None):
        layers.append(load_config(args.config))
    layers.append(_parse_overrides(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        layers.append({"model.seed": args.seed, "train.seed": args.seed,
                       "rl.seed": args.seed})
    return resolve(default_config(VocabLayout()), *layers)


def build_parser() -> _Parser:
    parser = _Parser(prog="laser", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int,
                   default=int(os.environ.get("LASER_SEED", "0")))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run supervised training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")

    p = sub.add_parser("eval", help="score answer accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, default=20)

    p = sub.add_parser("decode", help="print latent reasoning traces")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--horizon", type=int, default=20)

    p = sub.add_parser("rl", help="reinforcement fine-tuning of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="prompts file; may also come from rl.data")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")

    p = sub.add_parser("stats", help="summarize a dataset file")
    p.add_argument("--data", required=True)
    return parser


def _cmd_synth(args) -> int:
    layout = VocabLayout()
    samples = generate_dataset(args.seed, args.count, layout)
    write_dataset(args.out, samples)
    print(f"seed {args.seed}: wrote {len(samples)} samples to {args.out}",
          file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    resolved = _resolved_from_args(args)
    mcfg, tcfg, _ = _build_configs(resolved)
    layout = VocabLayout()
    samples = read_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(format_config(resolved),
                                        encoding="utf-8")
    print(f"training: {len(samples)} samples, {tcfg.max_steps} steps, "
          f"seed {tcfg.seed}", file=sys.stderr)
    result = train(tcfg, mcfg, samples, layout, out_dir)
    print(f"finished in {result.seconds:.1f}s", file=sys.stderr)
    print(f"best_accuracy {result.best_accuracy:.4f}")
    print(f"final_checkpoint {result.final_path}")
    print(f"best_checkpoint {result.best_path}")
    return 0


def _cmd_eval(args) -> int:
    mcfg, params = load_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    acc = evaluate_accuracy(as_arrays(params), mcfg, VocabLayout(), samples,
                            horizon=args.horizon)
    print(f"accuracy {acc:.4f}")
    return 0


def _cmd_decode(args) -> int:
    mcfg, params = load_checkpoint(args.ckpt)
    arrays = as_arrays(params)
    layout = VocabLayout()
    samples = read_dataset(args.prompt_file)
    if not 1 <= args.top_k <= mcfg.vocab_size:
        raise UsageError("--top-k outside vocabulary")
    for i, sample in enumerate(samples):
        prompt = prompt_tokens(sample, layout)
        traj = latent_rollout(arrays, mcfg, prompt, layout.laser_end,
                              horizon=args.horizon, k=args.top_k)
        print(f"prompt {i} steps {traj.steps_used} "
              f"terminated {traj.terminated_by}")
        for t, step in enumerate(traj.steps, 1):
            pairs = " ".join(f"{tid}:{p:.6f}"
                             for tid, p in zip(step.topk_ids, step.topk_probs))
            print(f"step {t} {pairs}")
        answer, _ = decode_answer(arrays, mcfg, layout, prompt, traj,
                                  len(sample.answer))
        print("answer: " + " ".join(str(a) for a in answer))
    return 0


def _cmd_rl(args) -> int:
    resolved = _resolved_from_args(args)
    mcfg_ckpt, params = load_checkpoint(args.ckpt)
    _, _, rcfg = _build_configs(resolved)
    data_path = args.data or resolved.get("rl.data") or ""
    if not data_path:
        raise UsageError("no dataset: pass --data or set rl.data in the config")
    samples = read_dataset(data_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(format_config(resolved),
                                        encoding="utf-8")
    print(f"rl: {rcfg.iterations} iterations, group {rcfg.group_size}, "
          f"seed {rcfg.seed}", file=sys.stderr)
    result = rl_train(params, mcfg_ckpt, VocabLayout(), samples, rcfg, out_dir)
    print(f"finished in {result.seconds:.1f}s", file=sys.stderr)
    if result.metrics:
        last = result.metrics[-1]
        print(f"mean_steps {last['mean_steps']:.4f}")
        print(f"accuracy {last['accuracy']:.4f}")
    print(f"final_checkpoint {result.final_path}")
    return 0


def _cmd_stats(args) -> int:
    samples = read_dataset(args.data)
    print(stats_report(samples))
    return 0


_DISPATCH = {"synth": _cmd_synth, "train": _cmd_train, "eval": _cmd_eval,
             "decode": _cmd_decode, "rl": _cmd_rl, "stats": _cmd_stats}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:        # --help prints and exits 0
        return int(exc.code or 0)
    if args.cmd is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _DISPATCH[args.cmd](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DatasetFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
