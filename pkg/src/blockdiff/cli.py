"""``blockdiff`` command line.

Every command writes ``manifest.json`` plus its line-delimited records to
``--out`` and prints a short human summary.  Exit codes: 0 success, 1 usage,
2 verification failure (or a diverged training run), 3 IO or format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .decode import MODES, DecodeConfig, compute_metrics, decode, mean_reveal_per_denoise
from .model import (CheckpointError, ModelConfig, constant_logits_params, init_params,
                    load_checkpoint, save_checkpoint)
from .sequence import TASKS, CorpusConfig, generate_corpus, load_corpus, save_corpus
from .train import (AnnealSchedule, TrainConfig, TrainingDiverged, grad_check, grad_check_batch,
                    train_loop)

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3
GRAD_TOL = 1e-4
GRAD_H = (1e-4, 1e-5, 1e-6)


class UsageError(Exception):
    pass


class FormatError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write_jsonl(path: Path, records) -> Path:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


def _write_manifest(args, artifacts: dict, metrics: dict) -> Path:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {"command": args.command, "seed": args.seed, "config": config,
                "artifacts": {k: str(v) for k, v in artifacts.items()}, "metrics": metrics}
    path = args.out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _load_corpus(path):
    try:
        return load_corpus(path)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed corpus {path}: {exc}") from exc


def _model_config(args) -> ModelConfig:
    try:
        return ModelConfig(vocab_size=args.vocab, model_dim=args.dim, num_heads=args.heads,
                           num_layers=args.layers, max_position=args.max_position,
                           ffn_dim=args.ffn or 4 * args.dim)
    except ValueError as exc:
        raise UsageError(str(exc))


def _check_corpus_fits(corpus, cfg: ModelConfig):
    for i, layout in enumerate(corpus):
        text = [t for t in layout.tokens if t >= 0]
        if text and max(text) >= cfg.mask_id:
            raise UsageError(f"corpus record {i} has token ids outside vocab {cfg.vocab_size}")
        if layout.vision.shape[0] and layout.vision_dim != cfg.model_dim:
            raise UsageError(f"corpus vision_dim {layout.vision_dim} != model dim {cfg.model_dim}")
        if len(layout) > cfg.max_position:
            raise UsageError(f"corpus record {i} is longer than max position {cfg.max_position}")


# --- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = CorpusConfig(vocab_size=args.vocab, num_samples=args.samples, num_turns=tuple(args.turns),
                       prompt_len=tuple(args.prompt_len), response_len=tuple(args.response_len),
                       vision_slots=tuple(args.vision_slots), vision_dim=args.vision_dim,
                       task=args.task, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    corpus = generate_corpus(cfg)
    path = args.corpus or args.out / "corpus.jsonl"
    save_corpus(corpus, path)
    lengths = [len(c) for c in corpus]
    metrics = {"records": len(corpus), "mean_length": float(np.mean(lengths)) if lengths else 0.0}
    _write_manifest(args, {"corpus": path}, metrics)
    print(f"gen-data: {len(corpus)} {args.task} records -> {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.corpus is None:
        raise UsageError("train needs --corpus")
    mcfg = _model_config(args)
    corpus = _load_corpus(args.corpus)
    _check_corpus_fits(corpus, mcfg)
    try:
        tcfg = TrainConfig(alpha=args.alpha, beta=args.beta, lr=args.lr, steps=args.steps,
                           batch_size=args.batch_size, block_target=args.bd, optimizer=args.optimizer,
                           lr_schedule=args.lr_schedule, complementary=args.complementary,
                           masked_only=args.masked_only, vision_efficient=not args.duplicate_vision,
                           seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc))
    if not corpus:
        raise UsageError("corpus is empty")
    params0 = init_params(mcfg, args.seed)
    hist_path = args.out / "history.jsonl"
    every = max(1, args.steps // 10)

    with open(hist_path, "w") as fh:
        def on_step(rec):
            fh.write(rec.to_json() + "\n")
            if rec.step % every == 0 or rec.step == args.steps - 1:
                print(f"step {rec.step:5d}  B={rec.block_size:2d}  loss {rec.total:.4f}"
                      f"  (diff {rec.diff:.4f}, causal {rec.causal:.4f})")
        try:
            params, history = train_loop(params0, corpus, tcfg, on_step)
        except TrainingDiverged as exc:
            print(f"train: {exc}", file=sys.stderr)
            _write_manifest(args, {"history": hist_path}, {"diverged_at": exc.step})
            return EXIT_VERIFY

    ckpt = args.ckpt or args.out / "model.ckpt"
    save_checkpoint(params, ckpt)
    artifacts = {"checkpoint": ckpt, "history": hist_path}
    metrics = {"steps": len(history)}
    if history:
        head = float(np.mean([h.total for h in history[:10]]))
        tail = float(np.mean([h.total for h in history[-10:]]))
        metrics.update({"loss_first10": head, "loss_last10": tail,
                        "block_sizes": AnnealSchedule(args.bd).sizes})
        if not args.no_plots:
            from .plotting import plot_loss_curve
            artifacts["loss_plot"] = plot_loss_curve([json.loads(h.to_json()) for h in history],
                                                     args.out / "loss.png")
    _write_manifest(args, artifacts, metrics)
    print(f"train: {len(history)} steps -> {ckpt}")
    if history:
        print(f"loss {metrics['loss_first10']:.4f} -> {metrics['loss_last10']:.4f} (first/last 10 steps)")
    return EXIT_OK


def _resolve_prompt(args, cfg: ModelConfig) -> tuple[list, list[int] | None]:
    if (args.prompt is None) == (args.corpus is None):
        raise UsageError("give exactly one of --prompt or --corpus")
    if args.prompt is not None:
        prompt = args.prompt
        reference = None
    else:
        corpus = _load_corpus(args.corpus)
        if not 0 <= args.index < len(corpus):
            raise UsageError(f"--index {args.index} outside corpus of {len(corpus)} records")
        _check_corpus_fits(corpus[args.index: args.index + 1], cfg)
        head, reference = corpus[args.index].split_last_response()
        prompt = head.inputs()
    if not prompt:
        raise UsageError("empty prompt")
    bad = [t for t in prompt if isinstance(t, int) and not 0 <= t < cfg.mask_id]
    if bad:
        raise UsageError(f"prompt token ids {bad} outside vocab {cfg.vocab_size}")
    return prompt, reference


def cmd_decode(args) -> int:
    if args.tau is not None and args.mode != "mdm":
        raise UsageError("--tau only applies to --mode mdm")
    params = load_checkpoint(args.ckpt)
    prompt, reference = _resolve_prompt(args, params.cfg)
    try:
        dcfg = DecodeConfig(block=args.block, tau=0.9 if args.tau is None else args.tau,
                            max_new=args.max_new, mode=args.mode)
    except ValueError as exc:
        raise UsageError(str(exc))
    if len(prompt) + args.max_new + 2 * args.block > params.cfg.max_position:
        raise UsageError("prompt, --max-new and block scratch exceed the model's max position")
    out, trace = decode(params, prompt, dcfg)
    trace_path = _write_jsonl(args.out / "trace.jsonl", trace.to_records())
    metrics = {"tokens": out, "nfe": trace.nfe, "prefill_nfe": trace.prefill_nfe,
               "tokens_per_nfe": trace.tokens_per_nfe}
    if args.mode == "mdm":
        metrics["reveals_per_denoise"] = trace.denoise_reveals()
    if reference is not None:
        n = min(len(out), len(reference))
        metrics["reference"] = reference
        metrics["exact_match"] = sum(a == b for a, b in zip(out, reference)) / max(len(reference), 1)
        metrics["compared"] = n
    _write_manifest(args, {"trace": trace_path}, metrics)
    print("tokens: " + " ".join(map(str, out)))
    tpn = "n/a" if trace.tokens_per_nfe is None else f"{trace.tokens_per_nfe:.2f}"
    print(f"{args.mode} B={args.block}: {len(out)} tokens, prefill {trace.prefill_nfe} NFE, "
          f"decode {trace.nfe} NFE, tokens/NFE {tpn}")
    if args.mode == "mdm":
        print("reveals per denoise step: " + " ".join(map(str, trace.denoise_reveals())))
    if reference is not None:
        print(f"exact match vs reference: {metrics['exact_match']:.3f}")
    return EXIT_OK


def _bench_prompts(args, cfg: ModelConfig) -> list:
    if args.corpus is not None:
        corpus = _load_corpus(args.corpus)[: args.samples]
        _check_corpus_fits(corpus, cfg)
        return [c.split_last_response()[0].inputs() for c in corpus]
    rng = nx.Rng(args.seed)
    return [[rng.integer(cfg.eos_id) for _ in range(8)] for _ in range(args.samples)]


def cmd_bench(args) -> int:
    if (args.ckpt is None) == (args.constant is None):
        raise UsageError("give exactly one of --ckpt or --constant TOKEN")
    if args.ckpt is not None:
        params = load_checkpoint(args.ckpt)
    else:
        cfg = _model_config(args)
        if not 0 <= args.constant < cfg.eos_id:
            raise UsageError("--constant must be a text token id")
        params = constant_logits_params(cfg, args.constant)
    if not args.blocks or min(args.blocks) < 1 or not args.taus:
        raise UsageError("--blocks and --taus must be non-empty, blocks positive")
    if any(not 0 <= t <= 1 for t in args.taus):
        raise UsageError("tau values must lie in [0, 1]")
    bad_modes = set(args.modes) - set(MODES)
    if bad_modes:
        raise UsageError(f"unknown modes {sorted(bad_modes)}")
    prompts = _bench_prompts(args, params.cfg)
    if not prompts:
        raise UsageError("no prompts to benchmark")
    longest = max(len(p) for p in prompts) + args.max_new + 2 * max(args.blocks)
    if longest > params.cfg.max_position:
        raise UsageError("prompts, --max-new and block scratch exceed the model's max position")

    rows = []
    for mode in args.modes:
        for block in args.blocks:
            taus = args.taus if mode == "mdm" else [None]
            for tau in taus:
                dcfg = DecodeConfig(block=block, tau=0.9 if tau is None else tau,
                                    max_new=args.max_new, mode=mode)
                traces = [decode(params, p, dcfg)[1] for p in prompts]
                m = compute_metrics(traces, args.min_len)
                for t in (args.taus if tau is None else [tau]):
                    rows.append({"mode": mode, "block": block, "tau": t,
                                 "tokens_per_nfe": m.tokens_per_nfe, "samples": m.samples,
                                 "tokens": m.tokens, "nfe": m.nfe, "prefill_nfe": m.prefill_nfe,
                                 "reveals_per_denoise": mean_reveal_per_denoise(traces)
                                 if mode == "mdm" else None,
                                 "min_len": args.min_len})
    bench_path = _write_jsonl(args.out / "bench.jsonl", rows)
    artifacts = {"bench": bench_path}
    if not args.no_plots:
        from .plotting import plot_tau_sweep, plot_tokens_per_nfe
        artifacts["tokens_per_nfe_plot"] = plot_tokens_per_nfe(rows, args.out / "tokens_per_nfe.png")
        if "mdm" in args.modes:
            artifacts["tau_sweep_plot"] = plot_tau_sweep(rows, args.out / "tau_sweep.png")
    _write_manifest(args, artifacts, {"rows": len(rows), "prompts": len(prompts)})

    print(f"bench: {len(prompts)} prompts, min generated length {args.min_len}")
    header = f"{'mode':<15}{'B':>4}" + "".join(f"{'tau=' + format(t, 'g'):>10}" for t in args.taus)
    print(header)
    for mode in args.modes:
        for block in args.blocks:
            cells = []
            for t in args.taus:
                r = next(r for r in rows if r["mode"] == mode and r["block"] == block and r["tau"] == t)
                cells.append("-" if r["tokens_per_nfe"] is None else f"{r['tokens_per_nfe']:.2f}")
            print(f"{mode:<15}{block:>4}" + "".join(f"{c:>10}" for c in cells))
    if all(r["tokens_per_nfe"] is None for r in rows):
        print("no decode reached the minimum length; lower --min-len")
    return EXIT_OK


def cmd_verify_spec(args) -> int:
    from .verify import run_suite

    if args.trials < 0:
        raise UsageError("--trials must be >= 0")
    if not args.blocks or min(args.blocks) < 1:
        raise UsageError("--blocks must list positive sizes")
    report = run_suite(args.trials, args.seed, args.blocks)
    path = _write_jsonl(args.out / "verify.jsonl", [m.to_dict() for m in report.mismatches])
    _write_manifest(args, {"mismatches": path},
                    {"status": report.status, "trials": report.trials,
                     "instances": report.instances, "mismatches": len(report.mismatches)})
    if report.trials == 0:
        print("verify-spec: no trials (vacuous pass)")
        return EXIT_OK
    print(f"verify-spec: {report.status}: {report.instances} instances over {report.trials} trials, "
          f"{len(report.mismatches)} mismatches")
    for m in report.mismatches:
        print(f"  mismatch seed={m.seed} B={m.block} mode={m.mode} model={m.kind} "
              f"token {m.index} (step {m.step}): expected {m.expected}, got {m.got}; "
              f"repro prompt_len={m.prompt_len} max_new={m.max_new}")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_grad_check(args) -> int:
    cfg = _model_config(args)
    params, batch = grad_check_batch(cfg, args.seed, vision=not args.no_vision)
    rows = []
    for h in GRAD_H:
        rep = grad_check(params, batch, args.alpha, args.beta, h=h,
                         max_entries=args.max_entries, seed=args.seed)
        rows.append({"h": h, "max_rel_error": rep.max_rel_error, "per_tensor": rep.per_tensor})
    path = _write_jsonl(args.out / "gradcheck.jsonl", rows)
    gate = next(r for r in rows if r["h"] == 1e-5)["max_rel_error"]
    ok = gate < GRAD_TOL
    _write_manifest(args, {"gradcheck": path},
                    {"max_rel_error": {str(r["h"]): r["max_rel_error"] for r in rows},
                     "tolerance": GRAD_TOL, "passed": ok})
    for r in rows:
        print(f"h={r['h']:.0e}  max relative error {r['max_rel_error']:.3e}")
    print(f"grad-check: {'pass' if ok else 'fail'} (h=1e-05 gate {GRAD_TOL:g})")
    return EXIT_OK if ok else EXIT_VERIFY


# --- parser ----------------------------------------------------------------------


def _add_model_flags(p, vocab=64, dim=64, heads=4, layers=2):
    p.add_argument("--vocab", type=int, default=vocab, help="vocabulary size incl. EOS and MASK")
    p.add_argument("--dim", type=int, default=dim)
    p.add_argument("--heads", type=int, default=heads)
    p.add_argument("--layers", type=int, default=layers)
    p.add_argument("--ffn", type=int, default=None, help="FFN width (default 4 * dim)")
    p.add_argument("--max-position", type=int, default=512)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blockdiff", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("blockdiff-out"),
                        help="directory for manifest.json and records")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--task", choices=TASKS, default="copy")
    p.add_argument("--turns", type=int, nargs=2, default=[1, 1], metavar=("LO", "HI"))
    p.add_argument("--prompt-len", type=int, nargs=2, default=[4, 8], metavar=("LO", "HI"))
    p.add_argument("--response-len", type=int, nargs=2, default=[2, 4], metavar=("LO", "HI"))
    p.add_argument("--vision-slots", type=int, nargs=2, default=[0, 0], metavar=("LO", "HI"))
    p.add_argument("--vision-dim", type=int, default=64)
    p.add_argument("--corpus", type=Path, default=None, help="output path (default OUT/corpus.jsonl)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model on a corpus")
    _add_model_flags(p)
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--ckpt", type=Path, default=None, help="output checkpoint (default OUT/model.ckpt)")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--bd", type=int, default=8, help="target block size")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant")
    p.add_argument("--complementary", action="store_true", help="average over complementary masks")
    p.add_argument("--masked-only", action="store_true", help="diffusion loss on masked rows only")
    p.add_argument("--duplicate-vision", action="store_true",
                   help="also place vision inputs in the noisy stream")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", parents=[common], help="decode one prompt")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--prompt", type=_int_list, default=None, help="comma-separated token ids")
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--index", type=int, default=0, help="corpus record whose last prompt is used")
    p.add_argument("--mode", choices=MODES, default="ar")
    p.add_argument("--block", type=int, default=8)
    p.add_argument("--tau", type=float, default=None, help="MDM confidence threshold (default 0.9)")
    p.add_argument("--max-new", type=int, default=64)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", parents=[common], help="Tokens/NFE over modes, block sizes and tau")
    _add_model_flags(p)
    p.add_argument("--ckpt", type=Path, default=None)
    p.add_argument("--constant", type=int, default=None,
                   help="bench a constant-logits model emitting this token instead of --ckpt")
    p.add_argument("--corpus", type=Path, default=None, help="prompts (default: random)")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--modes", type=lambda s: s.split(","), default=list(MODES))
    p.add_argument("--blocks", type=_int_list, default=[2, 4, 8, 16, 32])
    p.add_argument("--taus", type=_float_list, default=[1.0, 0.9, 0.7, 0.4])
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--min-len", type=int, default=32, help="drop decodes shorter than this")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify-spec", parents=[common],
                       help="greedy equivalence of speculative decoders against AR")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--blocks", type=_int_list, default=[1, 2, 4, 8, 16])
    p.set_defaults(func=cmd_verify_spec)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    _add_model_flags(p, vocab=16, dim=16, heads=2, layers=1)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--max-entries", type=int, default=None, help="sample entries per tensor")
    p.add_argument("--no-vision", action="store_true")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"blockdiff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, FormatError) as exc:
        print(f"blockdiff {args.command}: io/format error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
