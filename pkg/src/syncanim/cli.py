"""Command-line entry point: ``syncanim <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 missing dependency,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import synthbench as sb
from .clips import ClipFormatError, read_corpus, write_corpus
from .experiments import (PRESETS, ConfigError, DependencyError, Runner, apply_overrides, load_config_file,
                          results_from_json, validate_config, write_report)
from .tensorcore import CheckpointError, NumericalError
from .training import TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4


def _config(args) -> dict:
    raw = load_config_file(args.config) if args.config else {}
    sets = list(args.set or [])
    if getattr(args, "seeds", None) is not None:
        sets.append(f"seeds=[{','.join(str(s) for s in args.seeds)}]")
    if getattr(args, "run_dir", None):
        sets.append(f"run_dir={args.run_dir}")
    if getattr(args, "radius", None) is not None:
        sets.append(f"window.radius_frames={args.radius}")
    if getattr(args, "workers", None) is not None:
        sets += [f"bench.workers={args.workers}", f"curation.workers={args.workers}"]
    return validate_config(apply_overrides(raw, sets))


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_bench(args) -> int:
    cfg = _config(args)
    runner = Runner(cfg, _say)
    out = Path(args.out)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        stored = sb.DatasetManifest.from_json(manifest_path.read_text())
        expected = {**stored.config, "workers": cfg["bench"]["workers"]}
        if stored.seed == cfg["bench"]["seed"] and expected["pretrain_size"] == cfg["bench"]["pretrain_size"] \
                and list(expected["k_shots"]) == list(cfg["bench"]["k_shots"]):
            _say(f"benchmark at {out} already matches seed {stored.seed}; nothing to do")
            print(manifest_path)
            return EXIT_OK
    bench = runner.benchmark()
    write_corpus(out / "clips", list(bench.clips.values()))
    manifest_path.write_text(bench.manifest.to_json())
    for k in cfg["bench"]["k_shots"]:
        _say(f"finetune K={k}: {len(bench.manifest.splits[f'finetune_K{k}'])} clips")
    print(manifest_path)
    return EXIT_OK


def cmd_curate(args) -> int:
    from .curation import CurationConfig, run_pipeline

    cfg = _config(args)
    src = Path(args.corpus)
    if not src.exists():
        raise DependencyError(f"corpus {src} not found; run `syncanim bench` first")
    clips = read_corpus(src)
    c = cfg["curation"]
    blacklist = set(Path(args.blacklist).read_text().split()) if args.blacklist else set()
    ccfg = CurationConfig(**{k: v for k, v in c.items() if k != "workers"}, blacklist_ids=frozenset(blacklist))
    kept, report = run_pipeline(clips, ccfg, c["workers"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curation.csv").write_text(report.to_csv())
    (out / "curation.json").write_text(report.to_json())
    if args.write_clips:
        write_corpus(out / "clips", kept)
    _say(json.dumps(report.counts))
    print(out / "curation.csv")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    runner = Runner(_config(args), _say)
    for seed in runner.cfg["seeds"]:
        print(runner.pretrained(seed))
    return EXIT_OK


def cmd_finetune(args) -> int:
    if not args.init and not args.from_scratch:
        raise ConfigError("finetune needs --init CHECKPOINT, --init pretrain, or --from-scratch")
    runner = Runner(_config(args), _say)
    K = args.K if args.K is not None else runner.cfg["finetune"]["K"]
    for seed in runner.cfg["seeds"]:
        if args.from_scratch:
            path = runner.finetuned(seed, K, "scratch")
        elif args.init == "pretrain":
            path = runner.finetuned(seed, K, "pretrain")
        else:
            if not Path(args.init).exists():
                raise DependencyError(f"init checkpoint {args.init} not found; run `syncanim pretrain` first")
            path = runner.finetuned(seed, K, "checkpoint", args.init)
        print(path)
    return EXIT_OK


def cmd_sample(args) -> int:
    import numpy as np

    from .diffusion import GuidanceScales
    from .training import generate

    runner = Runner(_config(args), _say)
    model = runner.load(args.checkpoint) if args.checkpoint else runner.fresh_model(runner.cfg["seeds"][0])
    windows = runner.test_windows()[: args.n]
    frames = generate(model, windows, GuidanceScales(**runner.cfg["guidance"]), runner.cfg["eval"]["ddim_steps"],
                      runner.cfg["seeds"][0], runner.features)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, frames=frames, ids=np.array([w.id for w in windows]))
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    runner = Runner(_config(args), _say)
    rows = []
    for seed in runner.cfg["seeds"]:
        rep = runner.evaluate(args.checkpoint, seed, tag=str(args.checkpoint or "base"))
        rows.append(rep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps([json.loads(r.to_json()) for r in rows], indent=1))
    (out / "eval.csv").write_text(rows[0].to_csv() + "".join(r.to_csv().split("\n", 1)[1] for r in rows[1:]))
    print(out / "eval.csv")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiments import run_preset

    runner = Runner(_config(args), _say)
    cells = run_preset(args.preset, runner)
    paths = write_report(args.preset, runner.cfg["seeds"], cells, args.out)
    print(paths["csv"])
    print(paths["svg"])
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.results)
    if not src.exists():
        raise DependencyError(f"results file {src} not found; run `syncanim experiment` first")
    preset, seeds, cells = results_from_json(src.read_text())
    paths = write_report(preset, seeds, cells, args.out)
    print(paths["csv"])
    print(paths["svg"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file with a schema_version key")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (dotted path), applied after the file")
    common.add_argument("--seeds", type=int, nargs="*", help="seed list (overrides the config)")
    common.add_argument("--run-dir", help="run cache and log directory")
    common.add_argument("--workers", type=int, help="worker processes for generation and curation")

    p = argparse.ArgumentParser(prog="syncanim", description="Audio-synchronized animation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("bench", parents=[common], help="materialize the synthetic benchmark")
    s.add_argument("--out", default="bench")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("curate", parents=[common], help="run the curation pipeline over a clip corpus")
    s.add_argument("corpus")
    s.add_argument("--out", default="curated")
    s.add_argument("--blacklist", help="file of clip ids to exclude")
    s.add_argument("--write-clips", action="store_true", help="also write the curated clips")
    s.set_defaults(fn=cmd_curate)

    s = sub.add_parser("pretrain", parents=[common], help="stage-1 training on the pretraining corpus")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="stage-2 K-shot finetuning")
    s.add_argument("--init", help="checkpoint path, or 'pretrain' to use the cached stage-1 run")
    s.add_argument("--from-scratch", action="store_true", help="finetune-only baseline (no stage 1)")
    s.add_argument("-K", type=int, help="clean clips per class")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("sample", parents=[common], help="generate test windows with a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("-n", type=int, default=4)
    s.add_argument("--out", default="samples.npz")
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test windows")
    s.add_argument("--checkpoint")
    s.add_argument("--out", default="eval")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("experiment", parents=[common], help="run a preset grid and write CSV + SVG")
    s.add_argument("preset", choices=PRESETS)
    s.add_argument("--radius", type=float, help=argparse.SUPPRESS)
    s.add_argument("--out", default="reports")
    s.set_defaults(fn=cmd_experiment)

    s = sub.add_parser("report", help="re-render CSV + SVG from a stored results JSON")
    s.add_argument("results")
    s.add_argument("--out", default="reports")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, sb.BenchConfigError, sb.SpecError) as exc:
        _say(f"config error: {exc}")
        return EXIT_CONFIG
    except (DependencyError, FileNotFoundError, CheckpointError, ClipFormatError) as exc:
        _say(f"dependency error: {exc}")
        return EXIT_DEPENDENCY
    except (NumericalError, FloatingPointError, TrainingError) as exc:
        _say(f"numerical failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
