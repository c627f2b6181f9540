"""Experiment configuration, cached stage runs, evaluation and preset grids.

A run directory holds one subdirectory per cached run, keyed by the hash
of every config value the run depends on, plus an append-only
``runlog.jsonl``. Re-requesting a run with the same hash loads its stored
checkpoint or report instead of recomputing.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import synthbench as sb
from .audiofront import FeatureTapConfig
from .clips import ClipRecord
from .curation import CurationConfig, CurationReport, run_pipeline
from .denoiser import Denoiser, ModelConfig, build_model
from .diffusion import DropoutPolicy, GuidanceScales
from .metrics import MetricReport, SemanticProxy, score_generations
from .training import (FeatureCache, PriorConfig, StageConfig, TrainingError, generate, load_base_model,
                       load_model_state, make_batch, save_model, train_stage)
from .windowcond import WindowSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unknown configuration (exit code 2)."""


class DependencyError(RuntimeError):
    """A prerequisite artifact is missing (exit code 3)."""


# -- configuration tree ----------------------------------------------------

# Stage hyperparameters are desk-scale. The full-size recipe is 30 epochs at
# batch 32 with lr 1e-4 (pretrain) and 500 epochs at batch 16 with lr 5e-5
# (finetune); epochs here are divided by 6 and 10, and learning rates are
# raised because the toy model sees a few hundred steps instead of tens of
# thousands.
DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "model": {"d_model": 32, "n_heads": 2, "n_blocks": 2, "audio_heads": 2, "audio_width": 16},
    "window": {"radius_frames": 1.5, "chunk_mask": False},
    "taps": [{"encoder": "semantic", "layers": [3, 7, 11]}, {"encoder": "masked-pred", "layers": [3, 7, 11]}],
    "guidance": {"image": 2.0, "text": 2.0, "audio": 4.0},
    "dropout": {"image": 0.05, "text": 0.05, "audio": 0.05},
    "prior": {"n_clips": 512, "steps": 800, "batch_size": 32, "lr": 2e-3, "data_seed": 90210},
    "bench": {"seed": 0, "pretrain_size": 2000, "pretrain_corruption_rate": 0.6, "finetune_pool_per_class": 10,
              "k_shots": [1, 5, 10], "test_per_class": 20, "workers": 1},
    "curation": {"min_duration_s": 2.0, "min_fps": 6.0, "min_resolution": 64, "scene_threshold": 0.5,
                 "motion_threshold": 0.105, "text_threshold": 0.05, "workers": 1},
    "pretrain": {"epochs": 5, "batch_size": 32, "lr": 1e-2, "curated": True},
    "finetune": {"epochs": 50, "batch_size": 16, "lr": 5e-3, "K": 10},
    "eval": {"test_per_class": 3, "windows": 3, "ddim_steps": 20},
    "seeds": [1, 2, 3],
    "run_dir": "runs",
    "manifest": None,
}

PRESETS = ("paradigm", "curation", "radius", "taps")
RADII = (0.5, 1.0, 1.5, 2.0, 3.0)
TAP_SETS = {
    "semantic[11]": [{"encoder": "semantic", "layers": [11]}],
    "semantic[7,9,11]": [{"encoder": "semantic", "layers": [7, 9, 11]}],
    "semantic[3,7,11]": [{"encoder": "semantic", "layers": [3, 7, 11]}],
    "both[3,7,11]": DEFAULTS["taps"],
}


def _check_tree(value, default, path: str):
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or 'config'} must be a mapping")
        unknown = sorted(set(value) - set(default))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(f'{path}.{k}'.lstrip('.') for k in unknown)}")
        return {k: _check_tree(value[k], default[k], f"{path}.{k}") if k in value else copy.deepcopy(default[k])
                for k in default}
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path.lstrip('.')} must be true or false")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path.lstrip('.')} must be a number")
        return type(default)(value) if isinstance(default, float) or float(value).is_integer() else value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path.lstrip('.')} must be a list")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path.lstrip('.')} must be a string")
    return value


def validate_config(raw: dict) -> dict:
    """Fill defaults and reject unknown keys, wrong types and a missing or foreign schema version."""
    if "schema_version" in raw and raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {raw['schema_version']!r} (expected {SCHEMA_VERSION})")
    cfg = _check_tree(raw, DEFAULTS, "")
    if not cfg["seeds"]:
        raise ConfigError("seed list must not be empty")
    if any(not isinstance(s, int) or isinstance(s, bool) for s in cfg["seeds"]):
        raise ConfigError("seeds must be integers")
    if cfg["window"]["radius_frames"] <= 0:
        raise ConfigError("window.radius_frames must be positive")
    try:
        model_config(cfg)
        stage_config(cfg, "pretrain", 0)
        stage_config(cfg, "finetune", 0)
        curation_config(cfg)
        GuidanceScales(**cfg["guidance"])
        sb.BenchmarkConfig(**_bench_kwargs(cfg))
    except (ValueError, TrainingError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["manifest"] is not None and not Path(cfg["manifest"]).exists():
        raise ConfigError(f"manifest {cfg['manifest']} does not exist")
    return cfg


def load_config_file(path) -> dict:
    import yaml

    text = Path(path).read_text()
    try:
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if "schema_version" not in raw:
        raise ConfigError(f"{path} lacks schema_version")
    return raw


def apply_overrides(raw: dict, assignments: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars or lists."""
    import yaml

    out = copy.deepcopy(raw)
    for a in assignments:
        if "=" not in a:
            raise ConfigError(f"override {a!r} is not key=value")
        key, val = a.split("=", 1)
        parts = key.strip().split(".")
        node, dflt = out, DEFAULTS
        for p in parts[:-1]:
            if not isinstance(dflt, dict) or p not in dflt:
                raise ConfigError(f"unknown config key {key}")
            node = node.setdefault(p, {})
            dflt = dflt[p]
        if not isinstance(dflt, dict) or parts[-1] not in dflt:
            raise ConfigError(f"unknown config key {key}")
        node[parts[-1]] = _parse_value(yaml.safe_load(val))
    return out


def _parse_value(v):
    # YAML 1.1 reads exponent floats without a dot (1e-3) as strings
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return v
    if isinstance(v, list):
        return [_parse_value(x) for x in v]
    return v


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def model_config(cfg: dict) -> ModelConfig:
    taps = tuple(FeatureTapConfig(t["encoder"], tuple(t["layers"])) for t in cfg["taps"])
    return ModelConfig(**cfg["model"], taps=taps, window=WindowSpec(cfg["window"]["radius_frames"]),
                       use_chunk_mask=cfg["window"]["chunk_mask"])


def prior_config(cfg: dict) -> PriorConfig:
    return PriorConfig(**cfg["prior"])


def stage_config(cfg: dict, stage: str, seed: int) -> StageConfig:
    s = cfg[stage]
    return StageConfig(epochs=s["epochs"], batch_size=s["batch_size"], lr=s["lr"], seed=seed,
                       dropout=DropoutPolicy(**cfg["dropout"]))


def curation_config(cfg: dict, blacklist=()) -> CurationConfig:
    c = {k: v for k, v in cfg["curation"].items() if k != "workers"}
    return CurationConfig(**c, blacklist_ids=frozenset(blacklist))


def _bench_kwargs(cfg: dict) -> dict:
    b = cfg["bench"]
    return {"pretrain_size": b["pretrain_size"], "pretrain_corruption_rate": b["pretrain_corruption_rate"],
            "finetune_pool_per_class": b["finetune_pool_per_class"], "k_shots": tuple(b["k_shots"]),
            "test_per_class": b["test_per_class"], "workers": b["workers"]}


# -- run records -----------------------------------------------------------


@dataclass
class RunRecord:
    kind: str
    config_hash: str
    seed: int
    checkpoint: str | None
    report: dict | None
    wall_time: float
    details: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def append_runlog(run_dir: Path, rec: RunRecord) -> None:
    """One line per record, written with a single append so concurrent writers never interleave."""
    run_dir.mkdir(parents=True, exist_ok=True)
    line = (rec.to_json() + "\n").encode()
    fd = os.open(run_dir / "runlog.jsonl", os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, line)
    finally:
        os.close(fd)


def read_runlog(run_dir) -> list[RunRecord]:
    path = Path(run_dir) / "runlog.jsonl"
    if not path.exists():
        return []
    return [RunRecord(**json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


# -- the runner ------------------------------------------------------------


class Runner:
    """Executes stage runs and evaluations for one validated config, with caching.

    ``log`` receives progress lines. Benchmarks, curated corpora, features
    and the semantic proxy are memoized in memory; checkpoints and reports
    are cached under ``run_dir``.
    """

    def __init__(self, cfg: dict, log: Callable[[str], None] | None = None):
        self.cfg = cfg
        self.run_dir = Path(cfg["run_dir"])
        self.log = log or (lambda msg: None)
        self.features = FeatureCache()
        self._bench: sb.Benchmark | None = None
        self._curated: tuple[list[ClipRecord], CurationReport] | None = None
        self._proxy: SemanticProxy | None = None

    def variant(self, **changes) -> "Runner":
        """A runner for a modified config that shares this one's in-memory caches."""
        cfg = copy.deepcopy(self.cfg)
        for key, val in changes.items():
            node = cfg
            parts = key.split("__")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = val
        r = Runner(validate_config(cfg), self.log)
        r.features, r._bench, r._curated, r._proxy = self.features, self._bench, self._curated, self._proxy
        if cfg["bench"] != self.cfg["bench"] or cfg["curation"] != self.cfg["curation"]:
            r._bench = r._curated = r._proxy = None
        return r

    # data ---------------------------------------------------------------

    def benchmark(self) -> sb.Benchmark:
        if self._bench is None:
            t0 = time.perf_counter()
            self._bench = sb.build_benchmark(sb.BenchmarkConfig(**_bench_kwargs(self.cfg)), self.cfg["bench"]["seed"])
            if self.cfg["manifest"]:
                stored = sb.DatasetManifest.from_json(Path(self.cfg["manifest"]).read_text())
                if stored.splits != self._bench.manifest.splits:
                    raise ConfigError(f"manifest {self.cfg['manifest']} does not match the configured benchmark")
            self.log(f"benchmark built ({len(self._bench.clips)} clips, {time.perf_counter() - t0:.1f} s)")
        return self._bench

    def pretrain_corpus(self, curated: bool) -> list[ClipRecord]:
        bench = self.benchmark()
        raw = bench.split("pretrain")
        if not curated:
            return raw
        if self._curated is None:
            blacklist = set(bench.manifest.splits["test"])
            self._curated = run_pipeline(raw, curation_config(self.cfg, blacklist), self.cfg["curation"]["workers"])
            self.log(f"curated pretrain corpus: {len(self._curated[0])} of {len(raw)} clips kept")
        return self._curated[0]

    def test_windows(self) -> list[ClipRecord]:
        bench = self.benchmark()
        per = self.cfg["eval"]["test_per_class"]
        seen: dict[str, int] = {}
        out = []
        for c in bench.split("test"):
            k = c.labels["class"]
            if seen.get(k, 0) < per:
                seen[k] = seen.get(k, 0) + 1
                out.extend(sb.evaluation_windows(c, self.cfg["eval"]["windows"]))
        return out

    def proxy(self) -> SemanticProxy:
        if self._proxy is None:
            self._proxy = SemanticProxy.build(self.benchmark().split("finetune_pool"))
        return self._proxy

    # models --------------------------------------------------------------

    def _hash(self, kind: str, seed: int, **extra) -> str:
        keys = {"pretrain": ("model", "window", "taps", "dropout", "prior", "bench", "pretrain", "curation"),
                "finetune": ("model", "window", "taps", "dropout", "prior", "bench", "finetune")}[kind]
        blob = {k: self.cfg[k] for k in keys}
        if kind == "finetune" and extra.get("init") == "pretrain":
            blob["pretrain"] = self.cfg["pretrain"]
            blob["curation"] = self.cfg["curation"]
        blob["bench"] = {k: v for k, v in blob["bench"].items() if k != "workers"}
        if "curation" in blob:
            blob["curation"] = {k: v for k, v in blob["curation"].items() if k != "workers"}
        return config_hash({"kind": kind, "seed": seed, "cfg": blob, **extra})

    def fresh_model(self, seed: int) -> Denoiser:
        """Frozen base from the fitted prior, audio layers initialized from ``seed``."""
        return load_base_model(model_config(self.cfg), prior_config(self.cfg), seed=seed,
                               cache_dir=self.run_dir / "priors", log=self.log)

    def load(self, path) -> Denoiser:
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"checkpoint {path} not found")
        model, _ = build_model(model_config(self.cfg), 0)
        load_model_state(model, path)
        return model

    def _stage(self, kind: str, seed: int, clips: list[ClipRecord], init: Denoiser, extra: dict) -> Path:
        h = self._hash(kind, seed, **extra)
        out = self.run_dir / h
        ckpt = out / "model.ckpt"
        if ckpt.exists():
            return ckpt
        if not clips:
            raise TrainingError(f"{kind}: empty training set")
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        batch = make_batch(clips, init, self.features)
        frozen = init.state_hash(trainable=False)
        log = train_stage(init, batch, stage_config(self.cfg, kind, seed),
                          on_epoch=lambda e, l: self._epoch_log(kind, seed, e, l))
        if init.state_hash(trainable=False) != frozen:
            raise TrainingError("frozen parameters changed during training")
        if not all(np.isfinite(p.data).all() for p in init.trainable_parameters()):
            raise TrainingError(f"{kind} seed {seed}: non-finite weights after training")
        save_model(init, ckpt)
        rec = RunRecord(kind, h, seed, str(ckpt), None, time.perf_counter() - t0,
                        {**extra, "n_clips": len(clips), "epoch_loss": log.epoch_loss, "steps": log.steps})
        _atomic_write(out / "record.json", rec.to_json())
        append_runlog(self.run_dir, rec)
        self.log(f"{kind} seed {seed}: {log.steps} steps in {rec.wall_time:.1f} s -> {ckpt}")
        return ckpt

    def _epoch_log(self, kind: str, seed: int, epoch: int, loss: float) -> None:
        total = self.cfg[kind]["epochs"]
        if (epoch + 1) % max(1, total // 5) == 0 or epoch + 1 == total:
            self.log(f"  {kind} seed {seed} epoch {epoch + 1}/{total}: loss {loss:.5f}")

    def pretrained(self, seed: int, curated: bool | None = None) -> Path:
        curated = self.cfg["pretrain"]["curated"] if curated is None else curated
        if curated != self.cfg["pretrain"]["curated"]:
            return self.variant(pretrain__curated=curated).pretrained(seed)
        return self._stage("pretrain", seed, self.pretrain_corpus(curated), self.fresh_model(seed),
                           {"curated": curated})

    def finetuned(self, seed: int, K: int, init: str = "pretrain", init_checkpoint=None) -> Path:
        """K-shot finetune from the pretrained checkpoint or from the bare base (``init='scratch'``)."""
        if init not in ("pretrain", "scratch", "checkpoint"):
            raise ConfigError(f"unknown init {init!r}")
        bench = self.benchmark()
        ids = sb.kshot_subset(bench.manifest.splits["finetune_pool"], bench.clips, K, seed)
        clips = [bench.clips[i] for i in ids]
        if init == "scratch":
            model = self.fresh_model(seed)
            extra = {"init": "scratch", "K": K}
        else:
            path = init_checkpoint if init == "checkpoint" else self.pretrained(seed)
            model = self.load(path)
            extra = {"init": init, "K": K}
            if init == "checkpoint":
                extra["init_hash"] = model.state_hash()
        return self._stage("finetune", seed, clips, model, extra)

    # evaluation --------------------------------------------------------

    def evaluate(self, model: Denoiser | str | os.PathLike | None, seed: int, tag: str = "") -> MetricReport:
        """Generate every test window and score it; cached per checkpoint and seed."""
        if model is None:
            model = self.fresh_model(seed)
        if not isinstance(model, Denoiser):
            model = self.load(model)
        h = config_hash({"eval": self.cfg["eval"], "guidance": self.cfg["guidance"], "state": model.state_hash(),
                         "bench": {k: v for k, v in self.cfg["bench"].items() if k != "workers"}, "seed": seed,
                         "window": self.cfg["window"], "taps": self.cfg["taps"]})
        path = self.run_dir / "eval" / f"{h}.json"
        if path.exists():
            return MetricReport.from_json(path.read_text())
        t0 = time.perf_counter()
        windows = self.test_windows()
        frames = generate(model, windows, GuidanceScales(**self.cfg["guidance"]), self.cfg["eval"]["ddim_steps"],
                          seed, self.features)
        if not np.isfinite(frames).all():
            raise FloatingPointError("non-finite generations")
        report = score_generations(list(frames), windows, self.proxy(),
                                   protocol={"seed": seed, "windows": len(windows), "fps": 6.0, "tag": tag,
                                             **self.cfg["eval"]})
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, report.to_json())
        rec = RunRecord("eval", h, seed, None, {k: v for k, v in asdict(report).items() if k != "per_clip"},
                        time.perf_counter() - t0, {"tag": tag})
        append_runlog(self.run_dir, rec)
        self.log(f"eval {tag} seed {seed}: sync {report.sync:.4f} relsync {report.relsync:.2f} "
                 f"({rec.wall_time:.1f} s)")
        return report


# -- presets ----------------------------------------------------------------

METRIC_FIELDS = ("sync", "relsync", "alignsync", "ia", "it", "fvd_like")


@dataclass
class CellResult:
    labels: dict
    reports: list[MetricReport]

    def values(self, field: str) -> np.ndarray:
        return np.array([getattr(r, field) for r in self.reports])


def _paradigm_cell(runner: Runner, seed: int, pretrain: bool, K: int) -> MetricReport:
    if K == 0:
        model = runner.pretrained(seed) if pretrain else None
    else:
        model = runner.finetuned(seed, K, "pretrain" if pretrain else "scratch")
    return runner.evaluate(model, seed, f"paradigm pretrain={pretrain} K={K}")


def preset_cells(preset: str, runner: Runner) -> list[tuple[dict, Callable[[int], MetricReport]]]:
    ks = [0, *runner.cfg["bench"]["k_shots"]]
    if preset == "paradigm":
        return [({"pretrain": p, "K": k}, lambda s, p=p, k=k: _paradigm_cell(runner, s, p, k))
                for p in (False, True) for k in ks]
    if preset == "curation":
        K = runner.cfg["finetune"]["K"]

        def cell(s, cur, ft):
            r = runner.variant(pretrain__curated=cur)
            model = r.finetuned(s, K, "pretrain") if ft else r.pretrained(s)
            return r.evaluate(model, s, f"curation curated={cur} finetune={ft}")

        return [({"curated": c, "finetune": f}, lambda s, c=c, f=f: cell(s, c, f))
                for c in (False, True) for f in (False, True)]
    if preset == "radius":
        def cell(s, rad):
            r = runner.variant(window__radius_frames=rad)
            return r.evaluate(r.pretrained(s), s, f"radius r_f={rad}")

        return [({"radius_frames": rad}, lambda s, rad=rad: cell(s, rad)) for rad in RADII]
    if preset == "taps":
        def cell(s, name):
            r = runner.variant(taps=TAP_SETS[name])
            return r.evaluate(r.pretrained(s), s, f"taps {name}")

        return [({"taps": name}, lambda s, n=name: cell(s, n)) for name in TAP_SETS]
    raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")


def run_preset(preset: str, runner: Runner, seeds: list[int] | None = None) -> list[CellResult]:
    seeds = runner.cfg["seeds"] if seeds is None else seeds
    if not seeds:
        raise ConfigError("seed list must not be empty")
    out = []
    for labels, fn in preset_cells(preset, runner):
        runner.log(f"[{preset}] cell {labels}")
        out.append(CellResult(labels, [fn(s) for s in seeds]))
    return out


# -- reports -----------------------------------------------------------------


def results_to_json(preset: str, seeds: list[int], cells: list[CellResult]) -> str:
    # keys are sorted on output, so the label column order is stored separately
    return json.dumps({"preset": preset, "seeds": seeds, "label_keys": list(cells[0].labels) if cells else [],
                       "cells": [{"labels": c.labels, "reports": [json.loads(r.to_json()) for r in c.reports]}
                                 for c in cells]}, sort_keys=True, indent=1)


def results_from_json(text: str) -> tuple[str, list[int], list[CellResult]]:
    d = json.loads(text)
    order = d.get("label_keys", [])
    cells = [CellResult({k: c["labels"][k] for k in order or c["labels"]}, [MetricReport(**r) for r in c["reports"]])
             for c in d["cells"]]
    return d["preset"], d["seeds"], cells


def results_table(cells: list[CellResult]) -> str:
    """One CSV row per cell: labels, seed count, then mean and sd of every metric."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    label_keys = list(cells[0].labels) if cells else []
    multi = any(len(c.reports) > 1 for c in cells)
    header = [*label_keys, "n_seeds"]
    for f in METRIC_FIELDS:
        header += [f"{f}_mean"] + ([f"{f}_sd"] if multi else [])
    w.writerow(header)
    for c in cells:
        row = [c.labels[k] for k in label_keys] + [len(c.reports)]
        for f in METRIC_FIELDS:
            v = c.values(f)
            row.append(f"{v.mean():.6f}")
            if multi:
                row.append(f"{v.std(ddof=1):.6f}" if len(v) > 1 else "")
        w.writerow(row)
    return buf.getvalue()


def plot_results(preset: str, cells: list[CellResult], path, metric: str = "sync") -> None:
    """Line plot of ``metric`` (mean with sd error bars) across the preset's grid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))

    def err(c):
        v = c.values(metric)
        return v.std(ddof=1) if len(v) > 1 else 0.0

    if preset == "paradigm":
        for flag, name in ((False, "finetune only"), (True, "pretrain + finetune")):
            sel = [c for c in cells if c.labels["pretrain"] == flag]
            ax.errorbar([c.labels["K"] for c in sel], [c.values(metric).mean() for c in sel],
                        yerr=[err(c) for c in sel], marker="o", capsize=3, label=name)
        ax.set_xlabel("K (clean clips per class)")
        ax.legend()
    elif preset == "radius":
        ax.errorbar([c.labels["radius_frames"] for c in cells], [c.values(metric).mean() for c in cells],
                    yerr=[err(c) for c in cells], marker="o", capsize=3)
        ax.set_xlabel("window radius (frames)")
    else:
        names = [", ".join(f"{k}={v}" for k, v in c.labels.items()) for c in cells]
        x = np.arange(len(cells))
        ax.errorbar(x, [c.values(metric).mean() for c in cells], yerr=[err(c) for c in cells],
                    marker="o", capsize=3)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=7)
    ax.set_ylabel(f"{metric} (mean over seeds)")
    ax.set_title(f"{preset} preset")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_report(preset: str, seeds: list[int], cells: list[CellResult], out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{preset}.csv", "svg": out / f"{preset}.svg", "json": out / f"{preset}.json"}
    _atomic_write(paths["csv"], results_table(cells))
    _atomic_write(paths["json"], results_to_json(preset, seeds, cells))
    plot_results(preset, cells, paths["svg"])
    return paths
