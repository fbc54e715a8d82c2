import pytest

from srptsim.cli import build_parser, load_config, main


def test_config_overrides(tmp_path):
    f = tmp_path / "sim.cfg"
    f.write_text("nmpc.w_pos = 2.5\nnmpc.max_iter = 12\ndelays.uplink = 0.08\n"
                 "driver.k1 = 0.2\nvehicle.m = 1781\nvehicle.mF = 921.6\nvehicle.mR = 859.4\n"
                 "sim.max_time = 3\n")
    cfg = load_config(f)
    assert cfg.nmpc.w_pos == 2.5 and cfg.nmpc.max_iter == 12
    assert cfg.delays.uplink == 0.08 and cfg.driver.k1 == 0.2
    assert cfg.vehicle.m == 1781.0 and cfg.max_time == 3.0
    assert load_config(None).nmpc.w_pos == 1.0


@pytest.mark.parametrize("text", ["w_pos = 1\n", "nmpc.bogus = 1\n", "engine.power = 3\n",
                                  "sim.seed = 3\n"])
def test_config_rejects_unknown_keys(tmp_path, text):
    f = tmp_path / "bad.cfg"
    f.write_text(text)
    with pytest.raises(KeyError):
        load_config(f)


def test_parser():
    args = build_parser().parse_args(["run", "--mode", "driver", "--delay", "off", "--out", "x"])
    assert args.mode == "driver" and args.delay is False and args.seed == 0
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "--delay", "maybe", "--out", "x"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "--noise-set", "ix", "--out", "x"])


def test_run_command_writes_outputs(tmp_path, capsys):
    cfg = tmp_path / "short.cfg"
    cfg.write_text("sim.max_time = 0.5\n")
    code = main(["--config", str(cfg), "run", "--mode", "srpt-true", "--delay", "off",
                 "--out", str(tmp_path / "o"), "--no-plots"])
    assert code == 1  # the lap is cut short, so it does not complete
    assert "timed out" in capsys.readouterr().out
    assert (tmp_path / "o" / "metrics.csv").exists()
    assert (tmp_path / "o" / "traces" / "srpt-true_i_nodelay_seed0.csv").exists()


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nmpc.steps = 1\n")
    assert main(["--config", str(cfg), "run", "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err
