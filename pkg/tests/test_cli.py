import json
import subprocess
import sys

import pytest
import yaml

from syncanim import cli

from test_experiments import TINY


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text(yaml.safe_dump({"schema_version": 1, **TINY, "run_dir": str(d / "runs")}))
    return d


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out.strip().splitlines(), err


def test_help_lists_subcommands():
    out = subprocess.run([sys.executable, "-m", "syncanim.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("bench", "curate", "pretrain", "finetune", "sample", "eval", "experiment", "report"):
        assert sub in out.stdout


def test_bad_config_exits_2(workdir, capsys):
    bad = workdir / "bad.yaml"
    bad.write_text(yaml.safe_dump({"schema_version": 1, "modle": {}}))
    assert run(["pretrain", "--config", bad], capsys)[0] == 2
    nover = workdir / "nover.yaml"
    nover.write_text(yaml.safe_dump({"seeds": [1]}))
    assert run(["pretrain", "--config", nover], capsys)[0] == 2
    code, _, err = run(["pretrain", "--config", workdir / "tiny.yaml", "--set", "model.depth=2"], capsys)
    assert code == 2 and "unknown config key" in err
    assert run(["finetune", "--config", workdir / "tiny.yaml"], capsys)[0] == 2


def test_missing_inputs_exit_3(workdir, capsys):
    cfg = workdir / "tiny.yaml"
    assert run(["eval", "--config", cfg, "--checkpoint", workdir / "nope.ckpt", "--out", workdir / "e"],
               capsys)[0] == 3
    assert run(["report", workdir / "nope.json"], capsys)[0] == 3
    assert run(["curate", workdir / "no-corpus", "--config", cfg], capsys)[0] == 3
    assert run(["finetune", "--config", cfg, "--init", workdir / "nope.ckpt"], capsys)[0] == 3


def test_numerical_failure_exits_4(workdir, capsys):
    from syncanim import experiments as ex
    from syncanim.training import save_model

    cfg = ex.validate_config(ex.load_config_file(workdir / "tiny.yaml"))
    model = ex.Runner(cfg).fresh_model(1)
    model.params["audio_proj.null"].data[:] = float("nan")
    save_model(model, workdir / "nan.ckpt")
    code, _, err = run(["eval", "--config", workdir / "tiny.yaml", "--checkpoint", workdir / "nan.ckpt",
                        "--out", workdir / "nan-eval"], capsys)
    assert code == 4 and "numerical" in err


def test_bench_curate_train_sample_eval(workdir, capsys):
    cfg = workdir / "tiny.yaml"
    code, out, _ = run(["bench", "--config", cfg, "--out", workdir / "bench"], capsys)
    assert code == 0 and out == [str(workdir / "bench" / "manifest.json")]
    code, _, err = run(["bench", "--config", cfg, "--out", workdir / "bench"], capsys)
    assert code == 0 and "nothing to do" in err

    code, out, err = run(["curate", workdir / "bench" / "clips", "--config", cfg, "--out", workdir / "cur",
                          "--workers", 2], capsys)
    assert code == 0 and json.loads(err.strip().splitlines()[-1])["input"] > 0
    assert (workdir / "cur" / "curation.csv").read_text().startswith("id,outcome,reason")

    code, out, _ = run(["pretrain", "--config", cfg], capsys)
    assert code == 0 and out[0].endswith("model.ckpt")
    pre = out[0]
    code, out, _ = run(["finetune", "--config", cfg, "--init", pre, "-K", 1], capsys)
    assert code == 0 and out[0].endswith("model.ckpt") and out[0] != pre
    code, out2, _ = run(["finetune", "--config", cfg, "--from-scratch", "-K", 1], capsys)
    assert code == 0 and out2[0] != out[0]

    code, out, _ = run(["sample", "--config", cfg, "--checkpoint", pre, "-n", 2, "--out",
                        workdir / "s.npz"], capsys)
    assert code == 0
    import numpy as np
    z = np.load(workdir / "s.npz")
    assert z["frames"].shape == (2, 12, 32, 32) and len(z["ids"]) == 2

    code, out, _ = run(["eval", "--config", cfg, "--checkpoint", pre, "--out", workdir / "ev"], capsys)
    assert code == 0
    lines = (workdir / "ev" / "eval.csv").read_text().splitlines()
    assert lines[0].startswith("n_clips,sync") and len(lines) == 2


def test_experiment_and_report(workdir, capsys):
    cfg = workdir / "tiny.yaml"
    code, out, _ = run(["experiment", "paradigm", "--config", cfg, "--out", workdir / "rep"], capsys)
    assert code == 0 and out[0].endswith("paradigm.csv") and out[1].endswith("paradigm.svg")
    first = (workdir / "rep" / "paradigm.csv").read_text()
    code, out, _ = run(["report", workdir / "rep" / "paradigm.json", "--out", workdir / "rep2"], capsys)
    assert code == 0
    assert (workdir / "rep2" / "paradigm.csv").read_text() == first
    assert "<svg" in (workdir / "rep2" / "paradigm.svg").read_text()
