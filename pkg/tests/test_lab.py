import hashlib
from pathlib import Path

import numpy as np
import pytest

from kplab import io as kio
from kplab.errors import ConfigError, StageError
from kplab.lab import STAGES, ExperimentConfig, Interrupted, load_result_summary, run_experiment, smoke_config


def _digest(out: Path) -> dict:
    """Hash of every text artifact (reports, heatmaps, summaries)."""
    files = sorted(p for sub in ("reports", "heatmaps") for p in (out / sub).iterdir())
    files.append(out / "run_summary.txt")
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    res = run_experiment(smoke_config(run__out_dir=str(out)))
    return out, res


# -- config -----------------------------------------------------------------------------
def test_config_text_round_trip():
    cfg = smoke_config(quantifier__alpha=2.5, data__shape_scale=1.25)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_config_section_headers_and_comments():
    cfg = ExperimentConfig.from_text("[teacher]\nlr = 0.5  # faster\n\n[quantifier]\ngrid=2x2\n")
    assert cfg.teacher.lr == 0.5 and cfg.quantifier.grid == (2, 2)


@pytest.mark.parametrize("key,value", [("teacher.nope", "1"), ("nosection.lr", "1"), ("teacher.lr", "abc")])
def test_config_rejects_bad_entries(key, value):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_flat({key: value})


def test_fingerprint_ignores_output_dir():
    a, b = smoke_config(run__out_dir="x"), smoke_config(run__out_dir="y")
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != smoke_config(quantifier__alpha=2.0).fingerprint()


def test_kplab_out_overrides_directory(monkeypatch, tmp_path):
    monkeypatch.setenv("KPLAB_OUT", str(tmp_path / "env"))
    assert smoke_config(run__out_dir="ignored").output_dir() == tmp_path / "env"


def test_unknown_stop_stage_rejected(tmp_path):
    with pytest.raises(ConfigError):
        run_experiment(smoke_config(run__out_dir=str(tmp_path)), stop_after="nonsense")


# -- pipeline -------------------------------------------------------------------------
def test_smoke_run_emits_all_artifacts(smoke_run):
    out, res = smoke_run
    for name in ("student", "baseline", "teacher"):
        assert (out / "reports" / f"{name}.csv").exists()
        summary = kio.read_summary(out / "reports" / f"{name}_summary.txt")
        assert summary["network"] == name
        assert summary["config.quantifier.alpha"] == kio.fmt(smoke_config().quantifier.alpha)
    for name in ("teacher", "student_phase1", "student_final", "baseline"):
        assert (out / "checkpoints" / f"{name}.kpchk").exists()
    assert len(list((out / "heatmaps").glob("*.pgm"))) == 3 * 4
    assert not (out / "error.txt").exists()
    assert set(res.loss_checks.values()) == {True}


def test_smoke_run_metric_invariants(smoke_run):
    _, res = smoke_run
    for r in (res.student, res.baseline, res.teacher):
        r.check_invariants()
        assert 0.0 <= r.lam <= 1.0
        for row in r.rows:
            assert row.rho is None or 0.0 < row.rho <= 1.0


def test_phase1_reduces_feature_mse(smoke_run):
    _, res = smoke_run
    assert res.phase1_mse[-1] < res.phase1_mse[0]


def test_run_summary_matches_result(smoke_run):
    out, res = smoke_run
    s = load_result_summary(out)
    for k, v in res.headline().items():
        assert s[k] == kio.fmt(v)


def test_teacher_report_has_no_learning_dynamics(smoke_run):
    _, res = smoke_run
    assert res.teacher.d_mean is None and res.teacher.mean_rho is None


def test_rerun_is_byte_identical(smoke_run, tmp_path):
    out, _ = smoke_run
    run_experiment(smoke_config(run__out_dir=str(tmp_path)))
    assert _digest(tmp_path) == _digest(out)


def test_rerun_in_place_reuses_artifacts(smoke_run):
    out, _ = smoke_run
    before = _digest(out)
    run_experiment(smoke_config(run__out_dir=str(out)))
    assert _digest(out) == before


@pytest.mark.parametrize("stage", ["phase1", "quantify"])
def test_resume_equals_uninterrupted(smoke_run, tmp_path, stage):
    out, _ = smoke_run
    cfg = smoke_config(run__out_dir=str(tmp_path))
    with pytest.raises(Interrupted):
        run_experiment(cfg, stop_after=stage)
    assert not (tmp_path / "run_summary.txt").exists()
    run_experiment(cfg)
    assert _digest(tmp_path) == _digest(out)


def test_resume_after_partial_quantification(smoke_run, tmp_path):
    out, _ = smoke_run
    cfg = smoke_config(run__out_dir=str(tmp_path))
    with pytest.raises(Interrupted):
        run_experiment(cfg, stop_after="quantify")
    # a run killed mid-quantification leaves only some epoch caches behind
    for p in list((tmp_path / "maps" / "baseline").glob("e00[23].npz")):
        p.unlink()
    run_experiment(cfg)
    assert _digest(tmp_path) == _digest(out)


def test_different_config_in_same_directory_refused(smoke_run):
    out, _ = smoke_run
    with pytest.raises(ConfigError, match="different configuration"):
        run_experiment(smoke_config(run__out_dir=str(out), quantifier__alpha=7.0))


def test_corrupt_checkpoint_raises_stage_error(tmp_path):
    cfg = smoke_config(run__out_dir=str(tmp_path))
    with pytest.raises(Interrupted):
        run_experiment(cfg, stop_after="teacher")
    ck = tmp_path / "checkpoints" / "teacher.kpchk"
    ck.write_bytes(ck.read_bytes()[:40])
    with pytest.raises(StageError) as info:
        run_experiment(cfg)
    assert info.value.stage == "teacher"
    assert "stage=teacher" in (tmp_path / "error.txt").read_text()


def test_stage_names_are_ordered():
    assert STAGES[0] == "data" and STAGES[-1] == "report"


# Frozen from the first run of the smoke configuration; guards against silent
# changes anywhere in the pipeline (data, training, quantifier, metrics).
GOLDEN_SMOKE = {
    "student.mean_n_fg": 1.75,
    "student.lambda": 0.1165158371040724,
    "student.d_mean": 0.030911472893709983,
    "student.mean_rho": 0.6333333333333333,
    "baseline.mean_n_fg": 2.0,
    "baseline.lambda": 0.12053795877325289,
    "baseline.d_mean": 0.0685619925800857,
    "baseline.mean_rho": 0.7777777777777778,
    "teacher.mean_n_bg": 5.75,
}


def test_golden_smoke_headline(smoke_run):
    _, res = smoke_run
    got = res.headline()
    for k, v in GOLDEN_SMOKE.items():
        np.testing.assert_allclose(got[k], v, rtol=1e-9, err_msg=k)


def test_threshold_sweep_file(smoke_run):
    out, res = smoke_run
    rows = [l.split(",") for l in (out / "reports" / "sweep_b.csv").read_text().splitlines()[1:]]
    assert [(r[0], r[1]) for r in rows] == [(n, b) for n in ("student", "baseline", "teacher")
                                          for b in ("0.15", "0.2", "0.25")]
    for r in rows:
        if r[1] == "0.2":
            assert r[2] == kio.fmt(getattr(res, r[0]).mean_n_fg) and r[4] == kio.fmt(getattr(res, r[0]).lam)
    # a higher threshold can only remove points
    by = {(r[0], r[1]): float(r[2]) for r in rows}
    for n in ("student", "baseline", "teacher"):
        assert by[(n, "0.15")] >= by[(n, "0.2")] >= by[(n, "0.25")]


def test_summary_echoes_every_config_knob(smoke_run):
    out, _ = smoke_run
    summary = kio.read_summary(out / "reports" / "student_summary.txt")
    for k, v in smoke_config().flat().items():
        if not k.startswith("run."):
            assert summary[f"config.{k}"] == kio.fmt(v)
