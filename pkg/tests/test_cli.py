import pytest

from stylemetry import arnet
from stylemetry.cli import RunConfig, build_parser, main, resolve_config

TINY = ["--preset", "desk", "--set", "gru1_units=4", "--set", "gru2_units=4", "--set", "bottleneck_units=3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gen_counts_and_reruns(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    code, out, _ = run(capsys, "gen", "--drivers", 2, "--trips", 3, "--seconds", 300, "--out", a)
    assert code == 0 and out.strip() == "drivers=2 trips=6 points=1800"
    run(capsys, "gen", "--drivers", 2, "--trips", 3, "--seconds", 300, "--out", b)
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 1 + 1800


def test_gen_short_trips_warn(tmp_path, capsys, caplog):
    code, _, err = run(capsys, "gen", "--drivers", 1, "--trips", 1, "--seconds", 100, "--out", tmp_path / "a.csv")
    assert code == 0 and "zero segments" in caplog.text
    code, _, err = run(capsys, "gen", "--drivers", 1, "--trips", 1, "--seconds", 2, "--out", tmp_path / "a.csv")
    assert code == 1


def test_seed_environment_variable(tmp_path, capsys, monkeypatch):
    run(capsys, "gen", "--drivers", 1, "--trips", 1, "--seconds", 10, "--out", tmp_path / "a.csv")
    monkeypatch.setenv("STYLEMETRY_SEED", "5")
    run(capsys, "gen", "--drivers", 1, "--trips", 1, "--seconds", 10, "--out", tmp_path / "b.csv")
    run(capsys, "gen", "--drivers", 1, "--trips", 1, "--seconds", 10, "--seed", 5, "--out", tmp_path / "c.csv")
    run(capsys, "gen", "--drivers", 1, "--trips", 1, "--seconds", 10, "--seed", 0, "--out", tmp_path / "d.csv")
    read = lambda n: (tmp_path / n).read_bytes()
    assert read("b.csv") == read("c.csv") != read("a.csv") == read("d.csv")


def test_missing_input_is_io_error(tmp_path, capsys):
    code, _, err = run(capsys, "featurize", "--in", tmp_path / "nope.csv", "--out", tmp_path / "f.txt")
    assert code == 2 and "nope.csv" in err


def test_bad_input_is_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("this is not a trip file\n")
    code, _, err = run(capsys, "featurize", "--in", bad, "--out", tmp_path / "f.txt")
    assert code == 1 and "bad.csv" in err


def test_unknown_config_key(tmp_path, capsys):
    code, _, err = run(capsys, "gen", "--drivers", 1, "--trips", 1, "--seconds", 10, "--out", tmp_path / "a.csv", "--set", "bogus=1")
    assert code == 1 and "bogus" in err
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nseed = 3\nnot a pair\n")
    code, _, err = run(capsys, "gen", "--drivers", 1, "--trips", 1, "--seconds", 10, "--out", tmp_path / "a.csv", "--config", cfg)
    assert code == 1 and "c.txt:3" in err


def test_config_layering(tmp_path, monkeypatch):
    cfg = tmp_path / "c.txt"
    cfg.write_text("seed=3\nlam=0.5\nbatch_size=64\npreference=none\n")
    monkeypatch.setenv("STYLEMETRY_SEED", "9")
    parser = build_parser()
    args = parser.parse_args(["estimate", "--vectors", "v", "--out", "o", "--preset", "desk", "--config", str(cfg),
                              "--set", "lam=0.25", "--seed", "4"])
    rc = resolve_config(args)
    assert (rc.seed, rc.lam, rc.batch_size, rc.gru1_units, rc.preference) == (4, 0.25, 64, 32, None)
    assert resolve_config(parser.parse_args(["estimate", "--vectors", "v", "--out", "o"])) == RunConfig(seed=9)


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    out = capsys.readouterr().out
    for text in ("gru1_units=256", "lam=1e-05", "batch_size=2560", "patience=10", "(default: full)"):
        assert text in out


def test_pipeline_smoke(tmp_path, capsys):
    p = lambda n: tmp_path / n
    assert run(capsys, "gen", "--drivers", 3, "--trips", 3, "--seconds", 300, "--out", p("train.csv"))[0] == 0
    assert run(capsys, "gen", "--drivers", 3, "--trips", 3, "--seconds", 300, "--first-driver", 3, "--out", p("pool.csv"))[0] == 0
    code, out, _ = run(capsys, "featurize", "--in", p("train.csv"), "--out", p("train.feat"))
    assert code == 0 and out.strip() == "trips=9 segments=9"
    run(capsys, "featurize", "--in", p("pool.csv"), "--out", p("pool.feat"))
    code, out, _ = run(capsys, "train", "--features", p("train.feat"), "--out", p("m.ckpt"), "--epochs", 2,
                       "--heldout", p("held.feat"), *TINY)
    assert code == 0 and out.startswith("epochs=2")
    assert p("m.ckpt.history.csv").exists()
    code, out, _ = run(capsys, "encode", "--model", p("m.ckpt"), "--features", p("pool.feat"), "--out", p("v.csv"))
    assert code == 0 and out.strip() == "trips=9 dim=3"
    code, out, _ = run(capsys, "estimate", "--vectors", p("v.csv"), "--out", p("est.txt"), "--runs", p("runs.csv"),
                       "--set", "groups=3", "--set", "repeats=2")
    assert code == 0 and out.startswith("avg abs_error=")
    assert "avg_abs_error=" in p("est.txt").read_text()
    assert len(p("runs.csv").read_text().splitlines()) == 1 + 6
    for name in ("est.txt", "runs.csv", "m.ckpt.history.csv"):
        assert "np." not in p(name).read_text()
    code, out, _ = run(capsys, "tune", "--vectors", p("v.csv"), "--grid=-0.1,-1", "--out", p("curve.csv"),
                       "--set", "groups=2", "--set", "repeats=1")
    assert code == 0 and out.startswith("best preference=")
    assert [line.split(",")[0] for line in p("curve.csv").read_text().splitlines()] == ["preference", "-0.1", "-1.0"]
    float(p("curve.csv").read_text().splitlines()[1].split(",")[1])
    code, out, _ = run(capsys, "identify", "--model", p("m.ckpt"), "--features", p("held.feat"), "--out", p("id.txt"))
    assert code == 0 and out.startswith("avg segment=")
    # a stranger's trips cannot be identified
    code, _, err = run(capsys, "identify", "--model", p("m.ckpt"), "--features", p("pool.feat"), "--out", p("id.txt"))
    assert code == 1 and "unknown driver" in err


def test_identify_rejects_ronet(tmp_path, capsys):
    model = arnet.ArnetModel.init(arnet.ArnetConfig(gru1_units=3, gru2_units=3, bottleneck_units=2, n_classes=1, mode="ronet"), ["a"])
    arnet.save_model(model, tmp_path / "r.ckpt")
    (tmp_path / "f.txt").write_text("")
    code, _, err = run(capsys, "identify", "--model", tmp_path / "r.ckpt", "--features", tmp_path / "f.txt", "--out", tmp_path / "o")
    assert code == 1 and "no classifier head" in err


def test_corrupt_checkpoint(tmp_path, capsys):
    (tmp_path / "m.ckpt").write_bytes(b"garbage")
    code, _, err = run(capsys, "encode", "--model", tmp_path / "m.ckpt", "--features", tmp_path / "f", "--out", tmp_path / "o")
    assert code == 1 and "m.ckpt" in err


def test_bad_threads(capsys):
    assert main(["gen", "--drivers", "1", "--trips", "1", "--seconds", "5", "--out", "x", "--threads", "0"]) == 1
