"""End-to-end experiment: data -> teacher -> distilled student and baseline ->
per-epoch entropy maps on held-out probes -> metric reports.

Every stage writes its artifacts under the output directory as soon as it
finishes, and a rerun with the same configuration picks them up again, so an
interrupted run resumes where it stopped and ends with byte-identical reports.

Output layout::

    config.txt                       full key=value configuration
    checkpoints/{teacher,student_phase1,student_final,baseline}.kpchk (+ .json)
    maps/<net>/e<epoch>.npz          sigma fields of all probes at one epoch
    maps/<net>/e<epoch>/s<id>_{H,sigma}.csv
    heatmaps/<net>_s<id>.pgm         final-epoch entropy map per probe
    reports/<net>.csv, reports/<net>_summary.txt   for student, baseline, teacher
    run_summary.txt                  accuracies, phase-1 feature MSE, headline metrics
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as kio
from .checkpoint import load_series, save_series
from .data import gen_dataset
from .distill import DistillConfig, distill_phase1, feature_mse, head_finetune
from .errors import ConfigError, DegenerateFeatureError, KPLabError, StageError
from .metrics import build_report
from .nn import CheckpointSeries, Network, TrainConfig, accuracy, default_spec, init_params, train
from .quantify import QuantifierConfig, SigmaField, entropy_map, estimate_delta_f2, optimize_sigma_batch

SWEEP_B = (0.15, 0.2, 0.25)
STAGES = ("data", "teacher", "phase1", "head", "baseline", "quantify", "report")


@dataclass(frozen=True)
class SeedSection:
    data: int = 0
    model: int = 0
    quantifier: int = 0


@dataclass(frozen=True)
class DataSection:
    classes: int = 8
    n_per_class: int = 300
    size: int = 32
    shape_scale: float = 1.6
    subset: float = 0.1          # share of the training set seen by student and baseline
    probe_per_class: int = 1


@dataclass(frozen=True)
class TeacherSection:
    epochs: int = 0              # 0 means epoch_factor x baseline epochs
    epoch_factor: int = 3
    lr: float = 0.02
    batch_size: int = 32
    momentum: float = 0.9


@dataclass(frozen=True)
class DistillSection:
    tap: str = "fc1"
    phase1_epochs: int = 10
    phase1_lr: float = 1e-4
    phase2_epochs: int = 3
    phase2_lr: float = 0.05
    batch_size: int = 16
    momentum: float = 0.9


@dataclass(frozen=True)
class BaselineSection:
    epochs: int = 10
    lr: float = 0.02
    batch_size: int = 16
    momentum: float = 0.9


@dataclass(frozen=True)
class QuantSection:
    alpha: float = 300.0
    tau_rel: float = 0.01
    n_mc_delta: int = 256
    n_steps: int = 200
    n_mc_loss: int = 8
    min_cell_dof: int = 128
    lr_sigma: float = 0.05
    sigma_init: float = 0.1
    sigma_min: float = 1e-4
    sigma_max: float = 1e2
    grid: tuple = (4, 4)
    grid_mode: str = "shared_sigma"


@dataclass(frozen=True)
class MetricSection:
    b: float = 0.2
    epoch_stride: int = 1


@dataclass(frozen=True)
class RunSection:
    out_dir: str = "kplab_out"


SECTIONS = {
    "seed": SeedSection, "data": DataSection, "teacher": TeacherSection, "distill": DistillSection,
    "baseline": BaselineSection, "quantifier": QuantSection, "metrics": MetricSection, "run": RunSection,
}


def _coerce(value, default):
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        parts = value if isinstance(value, (tuple, list)) else str(value).replace(",", "x").split("x")
        return tuple(int(p) for p in parts)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: SeedSection = field(default_factory=SeedSection)
    data: DataSection = field(default_factory=DataSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    distill: DistillSection = field(default_factory=DistillSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    quantifier: QuantSection = field(default_factory=QuantSection)
    metrics: MetricSection = field(default_factory=MetricSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        # building the nested configs runs their own validation
        self.train_configs()
        self.distill_config()
        self.quantifier_config()
        d = self.data
        if not 0 < d.subset <= 1:
            raise ConfigError("data.subset must lie in (0, 1]")
        if d.probe_per_class < 1:
            raise ConfigError("data.probe_per_class must be at least 1")
        if int(d.n_per_class * d.classes * d.subset) < 1:
            raise ConfigError("data.subset leaves no training samples")
        if self.metrics.b < 0:
            raise ConfigError("metrics.b must be non-negative")
        if self.metrics.epoch_stride < 1:
            raise ConfigError("metrics.epoch_stride must be at least 1")

    # -- flat key=value view ----------------------------------------------------------
    def flat(self) -> dict:
        out = {}
        for name in SECTIONS:
            for f in dataclasses.fields(SECTIONS[name]):
                out[f"{name}.{f.name}"] = getattr(getattr(self, name), f.name)
        return out

    @classmethod
    def from_flat(cls, values: dict, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        base = base or cls()
        sections = {name: dataclasses.asdict(getattr(base, name)) for name in SECTIONS}
        for key, value in values.items():
            name, _, knob = key.partition(".")
            if name not in sections or knob not in sections[name]:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                sections[name][knob] = _coerce(value, sections[name][knob])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value {value!r} for {key}: {exc}") from None
        return cls(**{name: SECTIONS[name](**v) for name, v in sections.items()})

    @classmethod
    def from_text(cls, text: str, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        return cls.from_flat(kio.parse_kv(text), base)

    def to_text(self) -> str:
        return kio.dump_kv(self.flat())

    def fingerprint(self) -> str:
        """Hash of everything that influences results (the output directory excluded)."""
        body = {k: v for k, v in self.flat().items() if not k.startswith("run.")}
        return hashlib.sha256(kio.dump_kv(body).encode()).hexdigest()[:16]

    def replace(self, **flat) -> "ExperimentConfig":
        return self.from_flat({k.replace("__", "."): v for k, v in flat.items()}, self)

    # -- derived configs -----------------------------------------------------------
    def _seed(self, *tags) -> int:
        return int(np.random.SeedSequence([self.seed.model, *tags]).generate_state(1)[0])

    def train_configs(self) -> tuple:
        t, b = self.teacher, self.baseline
        t_epochs = t.epochs or t.epoch_factor * b.epochs
        teacher = TrainConfig(t_epochs, t.batch_size, t.lr, t.momentum, self._seed(0x7E))
        baseline = TrainConfig(b.epochs, b.batch_size, b.lr, b.momentum, self._seed(0xBA))
        return teacher, baseline

    def distill_config(self) -> DistillConfig:
        d = self.distill
        return DistillConfig(d.tap, d.phase1_epochs, d.phase1_lr, d.phase2_epochs, d.phase2_lr, d.batch_size,
                             d.momentum, self._seed(0xD1))

    def quantifier_config(self) -> QuantifierConfig:
        q = self.quantifier
        return QuantifierConfig(alpha=q.alpha, tau_rel=q.tau_rel, n_mc_delta=q.n_mc_delta, n_steps=q.n_steps,
                                n_mc_loss=q.n_mc_loss, min_cell_dof=q.min_cell_dof, lr_sigma=q.lr_sigma,
                                sigma_init=q.sigma_init, psi_min=math.log(q.sigma_min),
                                psi_max=math.log(q.sigma_max), grid=q.grid, grid_mode=q.grid_mode,
                                seed=self.seed.quantifier)

    def student_init(self, spec) -> np.ndarray:
        """Initial parameters shared by the student and the baseline."""
        return init_params(spec, np.random.default_rng([self.seed.model, 0x1A, 1]))

    def teacher_init(self, spec) -> np.ndarray:
        return init_params(spec, np.random.default_rng([self.seed.model, 0x1A, 0]))

    def output_dir(self) -> Path:
        return Path(os.environ.get("KPLAB_OUT") or self.run.out_dir)


def smoke_config(**overrides) -> ExperimentConfig:
    """Tiny configuration that exercises every stage in seconds."""
    flat = {
        "data.classes": 2, "data.n_per_class": 20, "data.subset": 1.0, "data.probe_per_class": 2,
        "teacher.epoch_factor": 2, "distill.phase1_epochs": 3, "distill.phase2_epochs": 1,
        "distill.batch_size": 8, "baseline.epochs": 3, "baseline.batch_size": 8, "quantifier.n_steps": 20,
        "quantifier.n_mc_delta": 16, "quantifier.n_mc_loss": 4,
    }
    flat.update({k.replace("__", "."): v for k, v in overrides.items()})
    return ExperimentConfig.from_flat(flat)


# -- results ---------------------------------------------------------------------------
@dataclass
class ExperimentResult:
    student: object
    baseline: object
    teacher: object
    out_dir: Path
    accuracy: dict
    phase1_mse: list
    loss_checks: dict

    def headline(self) -> dict:
        out = {}
        for name in ("student", "baseline", "teacher"):
            r = getattr(self, name)
            out.update({f"{name}.mean_n_fg": r.mean_n_fg, f"{name}.mean_n_bg": r.mean_n_bg,
                        f"{name}.lambda": r.lam, f"{name}.d_mean": r.d_mean, f"{name}.d_var": r.d_var,
                        f"{name}.mean_rho": r.mean_rho})
        return out


class Interrupted(KPLabError):
    """Raised by ``run_experiment(stop_after=...)`` to simulate a killed run."""


# -- pipeline ------------------------------------------------------------------------
class _Run:
    def __init__(self, cfg: ExperimentConfig, out: Path, stop_after: Optional[str], log):
        self.cfg, self.out, self.stop_after, self.log = cfg, out, stop_after, log
        self.spec = default_spec(cfg.data.classes, (1, cfg.data.size, cfg.data.size))

    def stage(self, name, fn):
        try:
            result = fn()
        except Interrupted:
            raise
        except StageError:
            raise
        except Exception as exc:
            kio._atomic_write(self.out / "error.txt", f"stage={name}\nerror={type(exc).__name__}: {exc}\n")
            raise StageError(name, exc) from exc
        if self.stop_after == name:
            raise Interrupted(f"stopped after stage {name!r}")
        return result

    def series(self, name, build) -> CheckpointSeries:
        path = self.out / "checkpoints" / f"{name}.kpchk"
        if path.exists():
            return load_series(path)
        self.log(f"[{name}] training")
        s = build()
        save_series(path, s)
        return s

    def data(self):
        d = self.cfg.data
        train_set = gen_dataset(self.cfg.seed.data, d.n_per_class, d.classes, d.size, self.cfg.quantifier.grid,
                                "train", d.shape_scale)
        probe = gen_dataset(self.cfg.seed.data, d.probe_per_class, d.classes, d.size, self.cfg.quantifier.grid,
                            "probe", d.shape_scale)
        n_sub = int(len(train_set) * d.subset)
        return train_set, train_set.subset(np.arange(n_sub)), probe

    def maps(self, net_name, series, epochs, probe, cells):
        """``{sample: {epoch: EntropyMap}}`` plus degenerate ids and validation-loss checks."""
        qcfg = self.cfg.quantifier_config()
        tap = self.cfg.distill.tap
        ids = list(range(len(probe)))
        maps = {i: {} for i in ids}
        degenerate, loss_ok = set(), []
        for e in epochs:
            cache = self.out / "maps" / net_name / f"e{e:03d}.npz"
            if cache.exists():
                z = np.load(cache)
                sig, deg, l0, l1 = z["sigma"], z["degenerate"], z["loss_initial"], z["loss_final"]
            else:
                self.log(f"[quantify] {net_name} epoch {e}")
                sig, deg, l0, l1 = self._fit(Network(self.spec, series[e]), tap, probe.images, ids, qcfg)
                cache.parent.mkdir(parents=True, exist_ok=True)
                tmp = cache.with_name(cache.name + ".tmp.npz")
                np.savez(tmp, sigma=sig, degenerate=deg, loss_initial=l0, loss_final=l1)
                os.replace(tmp, cache)
                for i in ids:
                    sf = SigmaField(sig[i], qcfg.grid, i, tap)
                    kio.write_sigma_csv(cache.parent / f"e{e:03d}" / f"s{i:03d}_sigma.csv", sf, cells[i])
                    kio.write_entropy_csv(cache.parent / f"e{e:03d}" / f"s{i:03d}_H.csv",
                                          entropy_map(sf, cells[i]))
            for i in ids:
                maps[i][e] = entropy_map(SigmaField(sig[i], qcfg.grid, i, tap), cells[i])
                if deg[i]:
                    degenerate.add(i)
                elif np.isfinite(l0[i]):
                    loss_ok.append(bool(l1[i] <= l0[i]))
        return maps, degenerate, loss_ok

    def _fit(self, net, tap, images, ids, qcfg):
        f = net.feature_fn(tap)
        d2 = []
        for x, i in zip(images, ids):
            try:
                d2.append(estimate_delta_f2(f, x, qcfg.tau_for(x), qcfg.n_mc_delta, qcfg.seed, i))
            except DegenerateFeatureError:
                d2.append(None)
        cells = qcfg.cells(images.shape[-2:])
        # a locally constant feature discards everything: such samples sit at the upper bound
        sig = np.full((len(ids),) + cells, math.exp(qcfg.psi_max))
        deg = np.array([d is None for d in d2])
        l0 = np.full(len(ids), np.nan)
        l1 = np.full(len(ids), np.nan)
        live = [k for k, d in enumerate(d2) if d is not None]
        if live:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fields = optimize_sigma_batch(f, images[live], qcfg, [ids[k] for k in live], tap,
                                              [d2[k] for k in live])
            for k, sf in zip(live, fields):
                sig[k], deg[k], l0[k], l1[k] = sf.sigma, sf.degenerate, sf.loss_initial, sf.loss_final
        return sig, deg, l0, l1


def _epochs(m: int, stride: int) -> list:
    eps = list(range(stride, m + 1, stride))
    if not eps or eps[-1] != m:
        eps.append(m)
    return eps


def run_experiment(cfg: ExperimentConfig, stop_after: Optional[str] = None, log=None) -> ExperimentResult:
    """Run (or resume) the full pipeline and return the three metric reports.

    ``stop_after`` names a stage in :data:`STAGES` after which the run raises
    :class:`Interrupted`, leaving its artifacts behind as a killed run would.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"unknown stage {stop_after!r}; choose from {STAGES}")
    log = log or (lambda msg: None)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    stamp = out / "config.txt"
    text = cfg.to_text()
    body = [l for l in text.splitlines() if not l.startswith("run.")]
    if stamp.exists():
        old = [l for l in stamp.read_text().splitlines() if not l.startswith(("run.", "#"))]
        if old != body:
            raise ConfigError(f"{out} holds a run with a different configuration; choose another out_dir")
    kio._atomic_write(stamp, f"# fingerprint {cfg.fingerprint()}\n" + text)
    (out / "error.txt").unlink(missing_ok=True)

    run = _Run(cfg, out, stop_after, log)
    spec = run.spec
    train_set, sub, probe = run.stage("data", run.data)
    if len(probe) == 0:
        raise StageError("data", ConfigError("empty probe set"))
    cells = probe.cell_masks(cfg.quantifier.grid)
    t_cfg, b_cfg = cfg.train_configs()
    d_cfg = cfg.distill_config()
    w0 = cfg.student_init(spec)

    teacher = run.stage("teacher", lambda: run.series(
        "teacher", lambda: train(spec, train_set, t_cfg, init=cfg.teacher_init(spec))))
    teacher_net = Network(spec, teacher.final)
    phase1 = run.stage("phase1", lambda: run.series(
        "student_phase1", lambda: distill_phase1(teacher_net, spec, sub, d_cfg, init=w0)))

    def head():
        path = out / "checkpoints" / "student_final.kpchk"
        if path.exists():
            return load_series(path)
        log("[student_final] training")
        s = head_finetune(spec, phase1, sub, d_cfg).series
        save_series(path, s)
        return s

    final = run.stage("head", head)
    baseline = run.stage("baseline", lambda: run.series("baseline", lambda: train(spec, sub, b_cfg, init=w0)))

    epochs_s = _epochs(phase1.epochs, cfg.metrics.epoch_stride)
    epochs_b = _epochs(baseline.epochs, cfg.metrics.epoch_stride)

    def quantify():
        return {
            "student": run.maps("student", phase1, epochs_s, probe, cells),
            "baseline": run.maps("baseline", baseline, epochs_b, probe, cells),
            "teacher": run.maps("teacher", teacher, [teacher.epochs], probe, cells),
        }

    fitted = run.stage("quantify", quantify)

    def report():
        echo = {k: v for k, v in cfg.flat().items() if not k.startswith("run.")}
        echo["metrics.epochs_student"] = ",".join(map(str, epochs_s))
        echo["metrics.epochs_baseline"] = ",".join(map(str, epochs_b))
        reports = {}
        for name, series in (("student", phase1), ("baseline", baseline), ("teacher", None)):
            maps, deg, _ = fitted[name]
            r = build_report(name, maps, cfg.metrics.b, series, deg, config=echo)
            kio.write_report(r, out / "reports" / f"{name}.csv", out / "reports" / f"{name}_summary.txt")
            for i in maps:
                last = max(maps[i])
                kio.write_pgm(out / "heatmaps" / f"{name}_s{i:03d}.pgm", maps[i][last])
            reports[name] = r
        sweep = ["network,b,mean_n_fg,mean_n_bg,lambda,d_mean,d_var,mean_rho"]
        for name, series in (("student", phase1), ("baseline", baseline), ("teacher", None)):
            maps, deg, _ = fitted[name]
            for b in SWEEP_B:
                r = build_report(name, maps, b, series, deg)
                sweep.append(",".join(kio.fmt(v) for v in (name, b, r.mean_n_fg, r.mean_n_bg, r.lam, r.d_mean,
                                                             r.d_var, r.mean_rho)))
        kio._atomic_write(out / "reports" / "sweep_b.csv", "\n".join(sweep) + "\n")
        imgs, labels = probe.images, probe.labels
        acc = {"teacher": accuracy(spec, teacher.final, imgs, labels),
               "student": accuracy(spec, final.final, imgs, labels),
               "baseline": accuracy(spec, baseline.final, imgs, labels)}
        mse = [feature_mse(spec, phase1[e], teacher_net, d_cfg.tap, sub.images) for e in (0, 1, phase1.epochs)]
        checks = {name: all(fitted[name][2]) for name in fitted}
        res = ExperimentResult(reports["student"], reports["baseline"], reports["teacher"], out, acc, mse,
                               checks)
        summary = {"fingerprint": cfg.fingerprint()}
        summary.update({f"accuracy.{k}": v for k, v in acc.items()})
        summary.update({"phase1_mse.epoch0": mse[0], "phase1_mse.epoch1": mse[1], "phase1_mse.final": mse[2]})
        summary.update({f"loss_decreased.{k}": v for k, v in checks.items()})
        summary.update(res.headline())
        kio._atomic_write(out / "run_summary.txt", kio.dump_kv(summary))
        return res

    return run.stage("report", report)


def load_result_summary(out_dir) -> dict:
    return kio.parse_kv((Path(out_dir) / "run_summary.txt").read_text())


__all__ = ["ExperimentConfig", "ExperimentResult", "Interrupted", "STAGES", "run_experiment", "smoke_config",
           "load_result_summary", "SECTIONS"]
