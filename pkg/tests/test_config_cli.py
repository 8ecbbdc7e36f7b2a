import pytest

from dualsub.cli import main
from dualsub.config import ConfigError, RunConfig, load_config
from dualsub.text import read_lines, read_triparallel

TINY = [
    "model.d_model=16", "model.d_ff=32", "model.n_heads=2", "model.n_enc_layers=1", "model.n_dec_layers=1",
    "model.max_len=96", "train.max_steps=12", "train.checkpoint_interval_steps=6", "train.warmup_steps=4",
    "train.max_lr=0.003", "train.batch_tokens=400", "train.precision=float64", "data.n_merges=150",
]


def sets(extra=()):
    out = []
    for item in list(TINY) + list(extra):
        out += ["--set", item]
    return out


def run(*argv, extra=()):
    return main([*argv, *sets(extra)])


# -- config --------------------------------------------------------------------------------


def test_defaults_and_roundtrip(tmp_path):
    config = RunConfig()
    assert config.train.max_lr == 0.0007 and config.decode.strategy == "sync-greedy"
    config.set("train", "max_steps", "77")
    config.write(tmp_path / "c.ini")
    again = load_config(tmp_path / "c.ini")
    assert again == config


def test_unknown_keys_rejected(tmp_path):
    (tmp_path / "bad.ini").write_text("[train]\nlearning_rate = 1\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(tmp_path / "bad.ini")
    with pytest.raises(ConfigError, match="unknown config section"):
        load_config(overrides=["optim.lr=1"])
    with pytest.raises(ConfigError):
        load_config(overrides=["train.max_steps=lots"])
    with pytest.raises(ConfigError):
        load_config(overrides=["max_steps"])


def test_env_var_and_override_order(tmp_path, monkeypatch):
    (tmp_path / "c.ini").write_text("[train]\nmax_steps = 5\nseed = 3\n")
    monkeypatch.setenv("DUALSUB_CONFIG", str(tmp_path / "c.ini"))
    config = load_config(overrides=["train.max_steps=9"])
    assert (config.train.max_steps, config.train.seed) == (9, 3)


def test_train_section_maps_to_train_config():
    tc = RunConfig().train.train_config("finetune")
    assert tc.mode == "finetune" and tc.betas == (0.9, 0.98) and tc.fine_tune_lr == 8e-5


# -- cli -------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("make-toy-data", "--out", str(d / "train"), "--n", "24", "--seed", "1") == 0
    assert run("make-toy-data", "--out", str(d / "dev"), "--n", "6", "--seed", "2") == 0
    assert run("learn-vocab", "--data", str(d / "train"), str(d / "dev"), "--out", str(d / "vocab.txt")) == 0
    common = ["--data", str(d / "train"), "--dev", str(d / "dev"), "--vocab", str(d / "vocab.txt")]
    assert run("train-base", *common, "--out", str(d / "t2c")) == 0
    assert run("train-base", *common, "--out", str(d / "t2s"), "--target", "subtitle") == 0
    assert run("pretrain", *common, "--out", str(d / "c2s")) == 0
    assert run("finetune-dual", *common, "--out", str(d / "dual"), "--init", str(d / "c2s")) == 0
    return d


def test_model_dir_contents(workdir):
    names = {p.name for p in (workdir / "dual").iterdir()}
    assert {"config.ini", "train.log", "last.ckpt", "model.ckpt"} <= names
    assert len(read_lines(workdir / "dual" / "train.log")) == 2
    assert "max_steps = 12" in (workdir / "dual" / "config.ini").read_text()


@pytest.mark.parametrize("strategy,models", [
    ("independent", ["t2c", "t2s"]), ("pipeline", ["t2c", "c2s"]), ("sync-greedy", ["dual"]),
    ("sync-beam", ["dual"]), ("two-round", ["dual"]),
])
def test_decode_strategies_and_eval(workdir, strategy, models, capsys):
    out = workdir / f"hyp-{strategy}"
    argv = ["decode", "--input", str(workdir / "dev.transcript"), "--vocab", str(workdir / "vocab.txt"),
            "--model", str(workdir / models[0]), "--strategy", strategy, "--out", str(out)]
    if len(models) > 1:
        argv += ["--model2", str(workdir / models[1])]
    assert run(*argv) == 0
    for ext in ("caption", "subtitle", "scores", "config.ini"):
        assert (workdir / f"hyp-{strategy}.{ext}").exists()
    assert len(read_lines(f"{out}.caption")) == 6
    capsys.readouterr()
    assert run("eval", "--hyp", str(out), "--ref", str(workdir / "dev"), "--out", str(out) + ".tsv") == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
    assert [r[0] for r in rows].count("bleu") == 2
    assert ("consistency", "structural_pct") in [(r[0], r[1]) for r in rows]


def test_reference_prefix_mode(workdir):
    out = workdir / "hyp-ref"
    assert run("decode", "--input", str(workdir / "dev.transcript"), "--vocab", str(workdir / "vocab.txt"),
               "--model", str(workdir / "dual"), "--strategy", "two-round", "--prefix-mode", "reference",
               "--refs", str(workdir / "dev"), "--out", str(out)) == 0
    assert len(read_lines(f"{out}.scores")) == 6
    assert run("decode", "--input", str(workdir / "dev.transcript"), "--vocab", str(workdir / "vocab.txt"),
               "--model", str(workdir / "dual"), "--strategy", "two-round", "--prefix-mode", "reference",
               "--out", str(out)) == 2


def test_copy_baseline_scores_100_on_self_reference(workdir, tmp_path, capsys):
    data = read_triparallel(workdir / "dev")
    for ext in ("transcript", "caption", "subtitle"):
        (tmp_path / f"self.{ext}").write_text("".join(t.transcript + "\n" for t in data))
    assert run("decode", "--input", str(tmp_path / "self.transcript"), "--vocab", str(workdir / "vocab.txt"),
               "--strategy", "copy", "--out", str(tmp_path / "copy")) == 0
    capsys.readouterr()
    assert run("eval", "--hyp", str(tmp_path / "copy"), "--ref", str(tmp_path / "self"), "--metrics", "bleu,wer") == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
    assert [r[2] for r in rows if r[0] == "bleu"] == ["100.00", "100.00"]
    assert [r[2] for r in rows if r[0] == "wer"] == ["0.00", "0.00"]


def test_make_synthetic_and_build_triparallel(workdir):
    assert run("make-synthetic", "--data", str(workdir / "dev"), "--vocab", str(workdir / "vocab.txt"),
               "--cap-model", str(workdir / "t2c"), "--sub-model", str(workdir / "t2s"),
               "--out", str(workdir / "synth")) == 0
    assert len(read_triparallel(workdir / "synth")) == 12
    assert run("build-triparallel", "--data", str(workdir / "train"), "--out", str(workdir / "grouped"),
               "--dump", str(workdir / "align.txt")) == 0
    grouped = read_triparallel(workdir / "grouped")
    assert 1 <= len(grouped) <= 24
    assert (workdir / "align.txt").read_text().split("\n", 1)[0].split(" ")[0] in (
        "match", "replace", "delete", "insert")


def test_identical_runs_are_byte_identical(workdir, tmp_path):
    common = ["--data", str(workdir / "train"), "--vocab", str(workdir / "vocab.txt"), "--init", str(workdir / "c2s")]
    for name in ("a", "b"):
        assert run("finetune-dual", *common, "--out", str(tmp_path / name), "--seed", "5") == 0
        assert run("decode", "--input", str(workdir / "dev.transcript"), "--vocab", str(workdir / "vocab.txt"),
                   "--model", str(tmp_path / name), "--out", str(tmp_path / f"{name}.hyp")) == 0
    for f in ("a/model.ckpt", "a/last.ckpt", "a.hyp.caption", "a.hyp.subtitle", "a.hyp.scores"):
        assert (tmp_path / f).read_bytes() == (tmp_path / f.replace("a", "b", 1)).read_bytes()


# -- exit codes ------------------------------------------------------------------------------


def test_usage_errors_exit_2(workdir, capsys):
    assert main(["frobnicate"]) == 2
    assert main(["make-toy-data", "--out", str(workdir / "x"), "--set", "train.nope=1"]) == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("dualsub: error: usage: unknown config key")
    assert main(["decode", "--input", str(workdir / "dev.transcript"), "--vocab", str(workdir / "vocab.txt"),
                 "--strategy", "sync-greedy", "--out", str(workdir / "y")]) == 2


def test_data_errors_exit_3(workdir, tmp_path, capsys):
    assert run("learn-vocab", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "v.txt")) == 3
    assert capsys.readouterr().err.startswith("dualsub: error: data:")
    other = tmp_path / "other.txt"
    assert run("make-toy-data", "--out", str(tmp_path / "o"), "--n", "5") == 0
    assert run("learn-vocab", "--data", str(tmp_path / "o"), "--out", str(other), "--merges", "3") == 0
    assert run("decode", "--input", str(workdir / "dev.transcript"), "--vocab", str(other),
               "--model", str(workdir / "dual"), "--out", str(tmp_path / "h")) == 3
    assert "vocabulary hash mismatch" in capsys.readouterr().err


def test_numeric_failure_exit_4(workdir, tmp_path, capsys):
    assert run("train-base", "--data", str(workdir / "train"), "--vocab", str(workdir / "vocab.txt"),
               "--out", str(tmp_path / "boom"), extra=["train.max_lr=1e300", "train.warmup_steps=1"]) == 4
    assert capsys.readouterr().err.startswith("dualsub: error: numeric:")
