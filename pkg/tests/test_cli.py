import numpy as np
import pytest

from kplab import io as kio
from kplab.cli import build_parser, main
from kplab.lab import SECTIONS


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--classes", "2", "--n-per-class", "8", "--out", str(d / "d.npz")]) == 0
    assert main(["train", "--data", str(d / "d.npz"), "--epochs", "2", "--batch-size", "8",
                 "--out", str(d / "t.kpchk")]) == 0
    return d


def test_gen_data_writes_arrays(workdir):
    z = np.load(workdir / "d.npz")
    assert z["images"].shape == (16, 1, 32, 32) and z["masks"].shape == (16, 32, 32)
    assert int(z["n_classes"]) == 2


def test_distill_writes_both_phases(workdir):
    assert main(["distill", "--teacher", str(workdir / "t.kpchk"), "--data", str(workdir / "d.npz"),
                 "--phase1-epochs", "1", "--phase2-epochs", "1", "--out-prefix", str(workdir / "s")]) == 0
    assert (workdir / "s_phase1.kpchk").exists() and (workdir / "s_final.kpchk").exists()


def test_probe_metrics_heatmap_chain(workdir, capsys):
    pr = workdir / "probe"
    for e in (1, 2):
        assert main(["probe", "--checkpoint", str(workdir / "t.kpchk"), "--epoch", str(e), "--data",
                     str(workdir / "d.npz"), "--index", "3", "--n-steps", "5", "--n-mc-delta", "16",
                     "--out", str(pr / f"e{e:03d}")]) == 0
    H = kio.read_entropy_csv(pr / "e002" / "s003_H.csv")
    assert H.H.shape == (8, 8) and np.isfinite(H.H).all()
    assert main(["metrics", "--maps", str(pr), "--checkpoint", str(workdir / "t.kpchk"), "--name", "t",
                 "--out", str(workdir / "rep")]) == 0
    summary = kio.read_summary(workdir / "rep" / "t_summary.txt")
    assert summary["samples"] == "1"
    assert main(["heatmap", "--map", str(pr / "e002" / "s003_H.csv"), "--out", str(workdir / "h.pgm")]) == 0
    assert kio.read_pgm(workdir / "h.pgm").shape == (8, 8)


def test_run_flags_cover_every_config_field():
    p = build_parser()
    args = p.parse_args(["run"])
    for name, section in SECTIONS.items():
        for f in section.__dataclass_fields__:
            assert hasattr(args, f"{name}.{f}")


def test_run_reads_config_file_and_flags_override(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("[data]\nclasses=2\nn_per_class=6\nsubset=1.0\nprobe_per_class=1\n"
                   "[distill]\nphase1_epochs=1\nphase2_epochs=1\n[baseline]\nepochs=1\n"
                   "[teacher]\nepoch_factor=1\n[quantifier]\nn_steps=3\nn_mc_delta=8\nn_mc_loss=2\n")
    monkeypatch.setenv("KPLAB_OUT", str(tmp_path / "out"))
    assert main(["run", "--quiet", "--config", str(cfg), "--quantifier.alpha", "5"]) == 0
    text = (tmp_path / "out" / "config.txt").read_text()
    assert "quantifier.alpha=5.0" in text and "data.n_per_class=6" in text
    assert "student.mean_n_fg=" in capsys.readouterr().out


def test_run_stop_after(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("KPLAB_OUT", str(tmp_path))
    assert main(["run", "--quiet", "--data.classes", "2", "--data.n_per_class", "4", "--data.subset", "1.0", "--stop-after", "data"]) == 0
    assert "stopped after" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["run", "--quiet", "--teacher.lr", "fast"],
                                  ["heatmap", "--map", "/nonexistent.csv", "--out", "x.pgm"]])
def test_errors_exit_nonzero(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("KPLAB_OUT", str(tmp_path))
    assert main(argv) == 1
    assert "kplab" in capsys.readouterr().err


def test_missing_command_is_usage_error():
    with pytest.raises(SystemExit):
        main([])
