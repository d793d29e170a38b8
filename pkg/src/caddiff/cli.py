"""Command-line front end: train, sample, corrupt, validate, eval, export-svg.

Exit codes: 0 success, 1 domain failure (invalid data), 2 usage/IO error.
Set CADDIFF_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import cadseq, engine, evalgeo
from .cadseq import CadSeqError, CadSequence
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .denoiser import CascadeNets
from .engine import PositionKind, TokenSeq, Trainer
from .kernels import COMMAND_ABSORB, VALUE_ABSORB, EmpiricalPrior, make_schedule

log = logging.getLogger("caddiff")

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


class CliError(Exception):
    """Usage/IO failure carrying an exit code."""

    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class ConditionMismatch(CliError):
    pass


def _read_sequences(path: str) -> list[CadSequence]:
    p = Path(path)
    if not p.exists():
        raise CliError(f"input file not found: {p}")
    text = p.read_text()
    if p.suffix == ".rows" or p.suffix == ".txt":
        return [cadseq.parse_rows(cadseq.rows_from_text(text))]
    try:
        return cadseq.sequences_from_json(text)
    except CadSeqError as exc:
        raise CliError(f"{p}: {exc}") from exc


def _net_dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.train.dtype == "float64" else torch.float32


def _boolean_prior(seqs: list[CadSequence]) -> EmpiricalPrior:
    try:
        return EmpiricalPrior.from_sequences(seqs)
    except Exception:
        # corpora with no boolean slots: fall back to an even binary prior
        return EmpiricalPrior((0, 1), (0.5, 0.5))


def _build_training(cfg: RunConfig):
    corpus = _read_sequences(cfg.train.corpus)
    if not corpus:
        raise CliError(f"corpus is empty: {cfg.train.corpus}")
    prior = _boolean_prior(corpus)
    schedule = make_schedule(cfg.schedule, prior=prior)
    nets = CascadeNets(cfg.net, seed=cfg.train.seed, dtype=_net_dtype(cfg))
    return corpus, prior, schedule, nets


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    # pin the global stream too so checkpoints (which capture it) are
    # byte-reproducible under a fixed seed and config
    torch.manual_seed(cfg.train.seed)
    corpus, prior, schedule, nets = _build_training(cfg)
    trainer = Trainer(nets, schedule, corpus, cfg.train)
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.run_config.schedule != cfg.schedule or ck.run_config.net != cfg.net:
            raise CliError("checkpoint config does not match the run config")
        nets = ck.build_nets()
        trainer = Trainer(nets, schedule, corpus, cfg.train)
        ck.restore_optimizer(nets, trainer.optimizer)
        trainer.set_rng_state(ck.rng_state)
        torch.set_rng_state(torch.from_numpy(ck.torch_rng_state))
        trainer.iteration = ck.iteration
        log.info("resumed from %s at iteration %d", args.resume, ck.iteration)

    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(cfg.log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    def write_ckpt(tag: str):
        path = ckpt_dir / f"checkpoint_{tag}.npz"
        save_checkpoint(path, cfg, prior, trainer.nets, trainer.optimizer,
                        trainer.iteration, trainer.rng_state())
        return path

    write_ckpt("000000" if trainer.iteration == 0 else f"{trainer.iteration:06d}")
    interval = max(cfg.train.checkpoint_interval, 1)
    remaining = cfg.train.iterations - trainer.iteration
    mode = "a" if args.resume else "w"
    with open(log_path, mode) as fh:
        while remaining > 0:
            chunk = min(interval, remaining)
            for rec in trainer.run(chunk):
                fh.write(json.dumps(rec) + "\n")
            remaining -= chunk
            write_ckpt(f"{trainer.iteration:06d}")
    final = write_ckpt("final")
    print(f"trained to iteration {trainer.iteration}; checkpoint: {final}")
    return EXIT_OK


def cmd_sample(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.run_config
    if args.config:
        file_cfg = load_run_config(args.config)
        if file_cfg.schedule != cfg.schedule:
            raise CliError(
                "schedule config mismatch between --config and the checkpoint"
            )
    n = args.n if args.n is not None else cfg.sample.n
    seed = args.seed if args.seed is not None else cfg.sample.seed
    length = args.length if args.length is not None else cfg.sample.length
    if length is not None and cfg.net.condition != "length":
        raise ConditionMismatch(
            "--length requires a checkpoint trained with condition mode 'length'"
        )
    if cfg.net.condition == "length" and length is None:
        raise ConditionMismatch("this checkpoint is length-conditioned; pass --length")
    nets = ck.build_nets()
    schedule = ck.build_schedule()
    seqs = engine.sample(nets, schedule, n, condition=length, seed=seed)
    payload = cadseq.sequences_to_json(seqs)
    if args.out:
        Path(args.out).write_text(payload)
    else:
        print(payload)
    n_valid = sum(1 for s in seqs if cadseq.validate(s).valid)
    print(f"sampled {n} sequences, {n_valid} valid", file=sys.stderr)
    if args.svg_dir and seqs:
        svg_dir = Path(args.svg_dir)
        svg_dir.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(seqs):
            try:
                (svg_dir / f"sample_{i:04d}.svg").write_text(evalgeo.export_svg(s))
            except evalgeo.EvalGeoError:
                continue
    return EXIT_OK


def _mark_states(states, kinds, absorb_cmd, absorb_val) -> str:
    parts = []
    for s, k in zip(states, kinds):
        if k == PositionKind.COMMAND:
            parts.append("<ABS>" if s == absorb_cmd else cadseq.CommandKind(int(s)).name)
        elif k == PositionKind.CLAMPED:
            parts.append("PAD")
        else:
            parts.append("<ABS>" if s == absorb_val else str(int(s)))
    return " ".join(parts)


def cmd_corrupt(args) -> int:
    cfg = load_run_config(args.config)
    seqs = _read_sequences(args.input)
    if not seqs:
        raise CliError(f"no sequences in {args.input}")
    seq = seqs[0]
    corpus_path = Path(cfg.train.corpus)
    prior_src = _read_sequences(str(corpus_path)) if corpus_path.exists() else seqs
    schedule = make_schedule(cfg.schedule, prior=_boolean_prior(prior_src))
    t = args.t
    if not 0 <= t <= schedule.steps:
        raise CliError(f"--t must be in 0..{schedule.steps}", EXIT_USAGE)
    rng = np.random.default_rng(args.seed)

    cmd_states = np.array([int(c) for c in seq.commands], dtype=np.int64)
    cmd_kinds = np.full(len(cmd_states), int(PositionKind.COMMAND), dtype=np.int64)
    flat = cadseq.flatten(seq)
    n_eff = flat.n_effective
    par_states = np.array(flat.tokens[:n_eff], dtype=np.int64)
    par_kinds = np.array([int(k) for k in flat.kinds[:n_eff]], dtype=np.int64)
    if t == 0:
        cmd_out, par_out = cmd_states, par_states
    else:
        cmd_out = engine.forward_sample(
            TokenSeq(cmd_states, cmd_kinds), t, schedule, rng
        ).states
        if n_eff:
            par_out = engine.forward_sample(
                TokenSeq(par_states, par_kinds), t, schedule, rng
            ).states
        else:
            par_out = par_states
    print(f"t={t}")
    print("commands:   " + _mark_states(cmd_out, cmd_kinds, COMMAND_ABSORB, VALUE_ABSORB))
    print("parameters: " + (_mark_states(par_out, par_kinds, COMMAND_ABSORB, VALUE_ABSORB)
                            if n_eff else "(none)"))
    return EXIT_OK


def cmd_validate(args) -> int:
    seqs = _read_sequences(args.input)
    if not seqs:
        raise CliError(f"no sequences in {args.input}", EXIT_USAGE)
    any_invalid = False
    for i, seq in enumerate(seqs):
        report = cadseq.validate(seq)
        if report.valid:
            print(f"sequence {i}: valid")
        else:
            any_invalid = True
            rules = ", ".join(
                f"{v.rule}@{v.position}" for v in report.violations
            )
            print(f"sequence {i}: INVALID ({rules})")
    return EXIT_DOMAIN if any_invalid else EXIT_OK


def cmd_eval(args) -> int:
    generated = _read_sequences(args.generated)
    reference = _read_sequences(args.reference)
    train_set = _read_sequences(args.train) if args.train else []
    try:
        report = evalgeo.metrics(
            generated, reference, train_set, n_points=args.points
        )
    except evalgeo.EvalGeoError as exc:
        raise CliError(str(exc), EXIT_DOMAIN) from exc
    print(report.to_json())
    return EXIT_OK


def cmd_export_svg(args) -> int:
    seqs = _read_sequences(args.input)
    if not 0 <= args.index < len(seqs):
        raise CliError(f"sequence index {args.index} out of range", EXIT_USAGE)
    try:
        svg = evalgeo.export_svg(seqs[args.index], args.sketch)
    except evalgeo.NoSuchSketch as exc:
        raise CliError(str(exc), EXIT_DOMAIN) from exc
    if args.out:
        Path(args.out).write_text(svg)
    else:
        print(svg, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caddiff",
        description="Cascaded discrete-diffusion CAD sequence generator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train both diffusion stages")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate sequences from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="optional run config to cross-check")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--length", type=int, help="command-count condition")
    p.add_argument("--out", help="output JSON path (default stdout)")
    p.add_argument("--svg-dir", help="also write sketch SVGs here")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("corrupt", help="show the forward corruption of a model")
    p.add_argument("--config", required=True)
    p.add_argument("input")
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("validate", help="grammar-check a sequence file")
    p.add_argument("input")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("eval", help="compute generation metrics")
    p.add_argument("generated")
    p.add_argument("reference")
    p.add_argument("train", nargs="?")
    p.add_argument("--points", type=int, default=2000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-svg", help="render a sketch to SVG")
    p.add_argument("input")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--sketch", type=int, default=0)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_export_svg)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("CADDIFF_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, CheckpointError, CadSeqError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
