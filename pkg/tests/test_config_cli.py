import contextlib
import io
import json
import re

import pytest

from conftest import TINY
from sasvjoint.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from sasvjoint.config import ConfigError, RunConfig, load_config
from sasvjoint.protocol_io import parse_trial_file


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


# -- configuration -------------------------------------------------------------

def test_defaults_follow_training_values():
    c = RunConfig()
    assert c.training.lr0 == 5e-5 and c.training.batch_size == 20 and c.training.epochs == 20
    assert c.corpus.partition_sizes == {"train": 20, "dev": 10, "eval": 10}
    assert list(c.ablation.counts) == [4, 8, 12, 16, 20]


@pytest.mark.parametrize("bad", [
    {"nope": 1},
    {"training": {"learning_rate": 1}},
    {"training": {"mode": "joint"}},  # chosen per command, not configured
    {"asv": {"n_speakers": 7}},  # follows the data
    {"seed": -1},
    {"seed": "3"},
    {"training": []},
    {"corpus": {"n_speakers": 3}},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="training.learning_rate"):
        RunConfig.from_dict({"training": {"learning_rate": 1}})


def test_echo_round_trip(tmp_path):
    c = load_config(None, {"seed": 7, "training": {"epochs": 3}, "ablation": {"counts": [4, 8]}})
    assert c.corpus.seed == c.training.seed == 7
    path = c.write(tmp_path)
    again = load_config(path)
    assert again == c
    assert again.dumps() == path.read_text()


def test_overrides_win_over_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "training": {"epochs": 3, "batch_size": 8}}))
    c = load_config(tmp_path / "c.json", {"training": {"epochs": 4}, "seed": 2})
    assert (c.training.epochs, c.training.batch_size, c.seed) == (4, 8, 2)


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(tmp_path / "c.json")


# -- exit codes ------------------------------------------------------------------

def test_missing_data_is_usage_error(tmp_path):
    code, _, err = run("pretrain-cm", "--data", tmp_path / "absent", "--out", tmp_path / "o")
    assert code == EXIT_USAGE
    assert "no such directory" in err


def test_invalid_mode_is_usage_error(tiny_corpus_dir, tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"")
    code, _, _ = run("train-sasv", "--mode", "both", "--asv", tmp_path / "x.ckpt", "--cm", tmp_path / "x.ckpt",
                     "--data", tiny_corpus_dir, "--out", tmp_path / "o")
    assert code == EXIT_USAGE


def test_too_few_speakers_is_usage_error(tmp_path):
    code, _, err = run("gen-data", "--out", tmp_path / "c", "--speakers", 3)
    assert code == EXIT_USAGE
    assert "n_speakers" in err
    assert not (tmp_path / "c").exists()


def test_runtime_error_exit_code(tiny_corpus_dir, tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    code, _, err = run("evaluate", "--ckpt", tmp_path / "bad.ckpt", "--data", tiny_corpus_dir,
                       "--partition", "dev", "--out", tmp_path / "o")
    assert code == EXIT_RUNTIME
    assert "Corrupt" in err


def test_unknown_config_key_via_cli(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"corpus": {"colour": "blue"}}))
    code, _, err = run("gen-data", "--out", tmp_path / "c", "--config", tmp_path / "c.json")
    assert code == EXIT_USAGE and "corpus.colour" in err


def test_plot_of_empty_file_fails(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    code, _, err = run("plot", "--in", tmp_path / "empty.csv", "--out", tmp_path / "fig.png")
    assert code != EXIT_OK and "columns" in err


def test_help_exits_zero():
    assert run("--help")[0] == EXIT_OK


# -- end-to-end pipeline on the tiny corpus ---------------------------------------

TINY_CONFIG = {
    "corpus": {k: (list(v) if isinstance(v, tuple) else v) for k, v in TINY.__dict__.items() if k != "seed"},
    "asv_train": {"epochs": 1, "batch_speakers": 4},
    "cm_train": {"epochs": 2},
    "training": {"epochs": 1},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    out = {"root": root, "config": cfg}
    out["gen1"] = run("gen-data", "--out", root / "data", "--config", cfg, "--seed", TINY.seed)
    out["gen2"] = run("gen-data", "--out", root / "data2", "--config", cfg, "--seed", TINY.seed)
    common = ["--data", root / "data", "--config", cfg, "--seed", TINY.seed]
    out["asv"] = run("pretrain-asv", "--out", root / "asv", *common)
    out["cm"] = run("pretrain-cm", "--out", root / "cm", *common)
    for mode in ("fixed", "joint"):
        out[mode] = run("train-sasv", "--mode", mode, "--asv", root / "asv" / "asv.ckpt",
                        "--cm", root / "cm" / "cm.ckpt", "--out", root / mode, *common)
    for part in ("dev", "eval"):
        out[f"eval_{part}"] = run("evaluate", "--ckpt", root / "fixed" / "sasv.ckpt", "--partition", part,
                                  "--out", root / f"ev_{part}", *common)
    out["report"] = run("report", "--system", f"fixed={root / 'fixed' / 'sasv.ckpt'}",
                        "--system", f"joint={root / 'joint' / 'sasv.ckpt'}", "--out", root / "report", *common)
    return out


def test_pipeline_all_succeed(pipeline):
    for key, value in pipeline.items():
        if isinstance(value, tuple):
            assert value[0] == EXIT_OK, (key, value[2])


def test_gen_data_summary_and_repeatable_hash(pipeline):
    _, out1, _ = pipeline["gen1"]
    _, out2, _ = pipeline["gen2"]
    h1 = re.search(r"tree hash: ([0-9a-f]{64})", out1).group(1)
    assert h1 == re.search(r"tree hash: ([0-9a-f]{64})", out2).group(1)
    assert re.search(r"^train\s+4\s", out1, re.M) and re.search(r"^dev\s+2\s", out1, re.M)
    assert (pipeline["root"] / "data" / "config.json").is_file()


def test_pretrain_logs(pipeline):
    _, out, _ = pipeline["cm"]
    epochs = re.findall(r"^epoch (\d+) .* dev_cm_eer ([0-9.]+)$", out, re.M)
    assert [e for e, _ in epochs] == ["0", "1"]
    assert "selected epoch:" in out
    log = (pipeline["root"] / "cm" / "cm_log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss,dev_cm_eer" and len(log) == 3
    asv_log = (pipeline["root"] / "asv" / "asv_log.csv").read_text().splitlines()
    assert asv_log[0] == "epoch,loss,dev_sv_eer" and len(asv_log) == 2


def test_effective_config_echoed(pipeline):
    for sub in ("data", "asv", "cm", "fixed", "joint", "ev_dev", "report"):
        echoed = load_config(pipeline["root"] / sub / "config.json")
        assert echoed.seed == TINY.seed and echoed.cm_train.epochs == 2


def test_train_sasv_freeze_report(pipeline):
    assert "frozen: ok" in pipeline["fixed"][1]
    assert "changed parameter arrays: 0 " in pipeline["fixed"][1]
    joint = pipeline["joint"][1]
    assert "frozen: n/a (joint)" in joint
    assert int(re.search(r"changed parameter arrays: (\d+)", joint).group(1)) > 0
    assert (pipeline["root"] / "joint" / "train_log.csv").read_text().count("\n") == 2


def test_evaluate_outputs(pipeline):
    root = pipeline["root"]
    _, dev_out, _ = pipeline["eval_dev"]
    _, eval_out, _ = pipeline["eval_eval"]
    assert "enrolment cap: 60 s (dev)" in dev_out
    assert "enrolment cap: 90 s (eval)" in eval_out
    header = dev_out.splitlines()[1]
    assert header.index("SASV-EER") < header.index("SPF-EER") < header.index(" SV-EER")
    for part in ("dev", "eval"):
        n_scores = len((root / f"ev_{part}" / f"scores_{part}.txt").read_text().splitlines())
        assert n_scores == len(parse_trial_file(root / "data" / "protocols" / f"{part}.txt"))


def test_report_table(pipeline):
    text = (pipeline["root"] / "report" / "metrics.txt").read_text()
    assert pipeline["report"][1].endswith(text)
    assert re.search(r"^fixed\s", text, re.M) and re.search(r"^joint\s", text, re.M)


def test_ablate_and_plot(pipeline):
    root = pipeline["root"]
    common = ["--data", root / "data", "--config", pipeline["config"], "--seed", TINY.seed]
    code, out, err = run("ablate", "--asv", root / "asv" / "asv.ckpt", "--cm", root / "cm" / "cm.ckpt",
                         "--counts", "2,4", "--modes", "fixed", "--out", root / "abl", *common)
    assert code == EXIT_OK, err
    rows = (root / "abl" / "ablation.csv").read_text().splitlines()
    assert len(rows) == 3
    assert (root / "abl" / "ablation.png").is_file()
    code, out, err = run("plot", "--in", root / "abl" / "ablation.csv", "--out", root / "fig" / "f.png")
    assert code == EXIT_OK, err
    assert "pre-trained, fixed:" in out
    code, _, _ = run("ablate", "--asv", root / "asv" / "asv.ckpt", "--cm", root / "cm" / "cm.ckpt",
                     "--counts", "2,9", "--modes", "fixed", "--out", root / "abl2", *common)
    assert code == EXIT_RUNTIME
    code, _, _ = run("ablate", "--asv", root / "asv" / "asv.ckpt", "--cm", root / "cm" / "cm.ckpt",
                     "--counts", "2", "--modes", "both", "--out", root / "abl3", *common)
    assert code == EXIT_USAGE


def test_repeat_runs_are_identical(pipeline, tmp_path):
    root = pipeline["root"]
    common = ["--data", root / "data", "--config", pipeline["config"], "--seed", TINY.seed]
    code, _, _ = run("train-sasv", "--mode", "fixed", "--asv", root / "asv" / "asv.ckpt",
                     "--cm", root / "cm" / "cm.ckpt", "--out", tmp_path / "again", *common)
    assert code == EXIT_OK
    assert (tmp_path / "again" / "sasv.ckpt").read_bytes() == (root / "fixed" / "sasv.ckpt").read_bytes()
    assert (tmp_path / "again" / "train_log.csv").read_text() == (root / "fixed" / "train_log.csv").read_text()
