"""``lynx`` command line: train, sample, eval, data and inspect-pack.

Exit status is 0 on success, 2 for configuration or validation errors and
3 for runtime failures. Machine-readable output is JSON on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import CheckpointError
from .config import ConfigError
from .data_pipeline import (
    AUGMENTERS, AugmentError, ManifestError, augment_records, identity_filter, load_manifest,
    manifest_stats, write_manifest,
)
from .eval_harness import (
    BenchmarkError, JudgeClient, JudgeError, aggregate, build_benchmark, judge_many, radar_data,
    score_results, summary_table,
)
from .faces import NoFaceError
from .media import MediaError, frame_paths, load_image, save_frames
from .rope_pack import PackingError, padding_waste
from .runconfig import RunConfig, echo_config, load_config
from .tokens import NonFiniteError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

VALIDATION_ERRORS = (ConfigError, ManifestError, BenchmarkError, ShapeError, CheckpointError,
                     PackingError, FileNotFoundError)
RUNTIME_ERRORS = (NonFiniteError, JudgeError, MediaError, NoFaceError, AugmentError, OSError,
                  RuntimeError)


class UsageError(ConfigError):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require_file(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what}: not found: {path}")
    return p


# --- train ---------------------------------------------------------------------

def cmd_train(cfg: RunConfig, args) -> int:
    from .training import train_run

    cfg.data.validate()
    run_dir = Path(args.run_dir or cfg.run_dir)
    resume = _require_file(args.resume, "--resume") if args.resume else None
    echo_config(cfg, run_dir)
    res = train_run(cfg, run_dir, resume, log=lambda s: print(s, file=sys.stderr))
    _emit({"run_dir": str(run_dir), "steps": res.steps, "final_loss": res.final_loss,
           "checkpoints": [str(p) for p in res.checkpoints]})
    return EXIT_OK


# --- sample --------------------------------------------------------------------

def cmd_sample(cfg: RunConfig, args) -> int:
    from .training import load_trained, sample_from_image, tensor_digest, write_json

    ckpt = _require_file(args.checkpoint, "--checkpoint")
    ref_path = _require_file(args.ref, "--ref")
    out = Path(args.out)
    model = load_trained(cfg, ckpt)
    ref = load_image(ref_path)
    seed = cfg.seed if args.seed is None else args.seed
    latent, frames = sample_from_image(model, cfg, ref, args.prompt, seed)
    echo_config(cfg, out)
    paths = save_frames(out / "frames", list(frames))
    meta = {"seed": seed, "steps": cfg.sampler.num_steps, "num_frames": cfg.sampler.num_frames,
            "guidance": cfg.sampler.guidance, "prompt": args.prompt, "reference": str(ref_path),
            "checkpoint": str(ckpt), "config_hash": cfg.digest(),
            "latent_shape": list(latent.shape), "latent_sha256": tensor_digest(latent),
            "frames": [p.name for p in paths]}
    write_json(out / "metadata.json", meta)
    _emit(meta)
    return EXIT_OK


# --- eval ----------------------------------------------------------------------

def cmd_eval(cfg: RunConfig, args) -> int:
    subjects = _require_file(args.subjects or cfg.eval.subjects, "eval.subjects")
    prompts = _require_file(args.prompts or cfg.eval.prompts, "eval.prompts")
    results_dir = _require_file(args.results, "--results")
    out = Path(args.out)
    bench = build_benchmark(subjects, prompts)
    results = {c.case_id: results_dir / c.case_id for c in bench.cases
               if (results_dir / c.case_id).exists()}
    reports = [score_results(bench, results, name, cfg.eval.frame_stride, cfg.eval.workers)
               for name in cfg.eval.embedders]
    judged, judge_errors = {}, {}
    if cfg.eval.judge or args.judge:
        by_id = {c.case_id: c for c in bench.cases}
        with JudgeClient() as client:
            judged, judge_errors = judge_many(
                [(cid, str(path), by_id[cid].prompt) for cid, path in sorted(results.items())],
                client, workers=cfg.eval.workers)
    summary = aggregate(reports, judged, model=cfg.eval.model_name,
                        cases=[c.case_id for c in bench.cases])
    summary["scored_cases"] = len(results)
    echo_config(cfg, out)
    full = {"summary": summary,
            "per_case": {r.embedder: r.per_case for r in reports},
            "errors": {**{f"{r.embedder}:{k}": v for r in reports for k, v in r.errors.items()},
                       **judge_errors},
            "judge": {k: v.as_dict() for k, v in judged.items()}}
    from .training import write_json

    write_json(out / "summary.json", full)
    table = summary_table([summary])
    (out / "summary.txt").write_text(table)
    write_json(out / "radar.json", radar_data([summary]))
    sys.stdout.write(table)
    return EXIT_OK


# --- data ----------------------------------------------------------------------

def cmd_data(cfg: RunConfig, args) -> int:
    from .training import face_embedder_for, write_json

    manifest = _require_file(args.manifest or cfg.data.manifest, "--manifest")
    records = load_manifest(manifest)
    out = Path(args.out) if args.out else None
    if out is not None:
        echo_config(cfg, out)
    if args.data_cmd == "stats":
        stats = manifest_stats(records)
        _emit(stats)
        print("\n".join(f"{k:24s} {v:6d}" for k, v in stats["counts"].items()), file=sys.stderr)
        if out is not None:
            write_json(out / "stats.json", stats)
        return EXIT_OK
    if out is None:
        raise UsageError(f"data {args.data_cmd} needs --out")
    if args.data_cmd == "filter":
        threshold = cfg.data.threshold if args.threshold is None else args.threshold
        res = identity_filter(records, face_embedder_for(cfg), threshold)
        write_manifest(out / "kept.jsonl", res.kept)
        write_manifest(out / "dropped.jsonl", [d.record for d in res.dropped])
        report = {"threshold": threshold, "kept": len(res.kept), "dropped": len(res.dropped),
                  "reasons": [{"condition_image": d.record.condition_image, "reason": d.reason}
                              for d in res.dropped]}
        write_json(out / "filter_report.json", report)
        _emit(report)
        return EXIT_OK
    params = dict(_kv(p) for p in args.param)
    try:
        aug = AUGMENTERS[args.augmenter](**params)
    except TypeError as e:
        raise UsageError(f"--param for {args.augmenter}: {e}") from None
    done, rejects = augment_records(records, aug, cfg.seed, out / "media")
    write_manifest(out / "augmented.jsonl", done)
    report = {"augmenter": args.augmenter, "params": params, "augmented": len(done),
              "noop": sum(bool(r.extra.get("noop")) for r in done),
              "rejected": [{"condition_image": d.record.condition_image, "reason": d.reason}
                           for d in rejects]}
    write_json(out / "augment_report.json", report)
    _emit(report)
    return EXIT_OK


def _kv(text: str):
    if "=" not in text:
        raise UsageError(f"--param {text!r} is not key=value")
    k, v = text.split("=", 1)
    import yaml

    return k, yaml.safe_load(v)


# --- inspect-pack --------------------------------------------------------------

def record_tokens(path: Path, cfg: RunConfig) -> int:
    frames = frame_paths(path)[: cfg.data.frames]
    h, w = load_image(frames[0]).shape[:2]
    f, p = cfg.data.codec_factor, cfg.model.patch
    if h % f or w % f:
        raise ShapeError(f"{path}: frame size {(h, w)} not a multiple of {f}")
    return (len(frames) // p.pt) * (h // f // p.ph) * (w // f // p.pw)


def plan_packs(lengths: Sequence[int], budget: int):
    """Sample-index groups that greedy first-fit places together, and the packs."""
    import torch

    from .rope_pack import pack
    from .tokens import TokenSeq

    seqs = [TokenSeq(torch.zeros(n, 1), (n, 1, 1)) for n in lengths]
    packs = pack(seqs, budget)
    out, i = [], 0
    for p in packs:
        out.append(list(range(i, i + p.num_segments)))
        i += p.num_segments
    return out, packs


def cmd_inspect_pack(cfg: RunConfig, args) -> int:
    budget = args.budget or cfg.train.budget
    if args.lengths is not None:
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
        names = [f"sample{i}" for i in range(len(lengths))]
    else:
        manifest = _require_file(args.manifest or cfg.data.manifest, "--manifest")
        records = load_manifest(manifest)
        lengths = [record_tokens(r.path("target"), cfg) for r in records]
        names = [r.target for r in records]
    groups, packs = plan_packs(lengths, budget) if lengths else ([], [])
    report = {"budget": budget, "num_samples": len(lengths), "waste": padding_waste(packs),
              "packs": [{"samples": [names[i] for i in g], "lengths": p.lengths,
                         "boundaries": p.boundaries, "total": p.total_len}
                        for g, p in zip(groups, packs)]}
    if args.out:
        from .training import write_json

        echo_config(cfg, args.out)
        write_json(Path(args.out) / "packs.json", report)
    _emit(report)
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML run config")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted override, e.g. train.learning_rate=1e-3")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lynx", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="run the image then video stages")
    t.add_argument("--run-dir")
    t.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("sample", parents=[common], help="sample a clip for a reference face")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--ref", required=True, help="reference face image")
    s.add_argument("--prompt", default="")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)

    e = sub.add_parser("eval", parents=[common], help="score a results directory")
    e.add_argument("--results", required=True, help="directory of <case_id>/ frame folders")
    e.add_argument("--subjects")
    e.add_argument("--prompts")
    e.add_argument("--out", required=True)
    e.add_argument("--judge", action="store_true", help="also query the judge endpoint")

    d = sub.add_parser("data", help="manifest tools")
    dsub = d.add_subparsers(dest="data_cmd", required=True)
    for name in ("filter", "stats", "augment"):
        x = dsub.add_parser(name, parents=[common])
        x.add_argument("--manifest")
        x.add_argument("--out")
        if name == "filter":
            x.add_argument("--threshold", type=float)
        if name == "augment":
            x.add_argument("--augmenter", choices=sorted(AUGMENTERS), required=True)
            x.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")

    i = sub.add_parser("inspect-pack", parents=[common], help="show how samples pack")
    i.add_argument("--manifest")
    i.add_argument("--lengths", help="comma-separated token counts instead of a manifest")
    i.add_argument("--budget", type=int)
    i.add_argument("--out")
    return p


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "data": cmd_data,
            "inspect-pack": cmd_inspect_pack}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except VALIDATION_ERRORS as e:
        print(f"lynx {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print(f"lynx {args.command}: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except RUNTIME_ERRORS as e:
        print(f"lynx {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
