"""Command-line entry point: ``kplab <command> [flags]``.

Commands
    gen-data   write a synthetic dataset to an .npz file
    train      train a classifier from scratch, write a KPCHK1 series
    distill    two-phase distillation from a teacher checkpoint
    probe      fit sigma / entropy maps for one sample at one checkpoint
    metrics    knowledge-point report from a directory of per-epoch entropy CSVs
    run        full experiment; every ExperimentConfig field is a --section.knob flag
    heatmap    render an entropy CSV as a plain PGM

``run --config FILE`` reads key=value lines (``[section]`` headers allowed);
flags given on the command line override the file.  KPLAB_OUT overrides the
output directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import re
import sys
from pathlib import Path

import numpy as np

from . import io as kio
from .checkpoint import load_series, save_series
from .data import LabeledDataset, gen_dataset
from .distill import DistillConfig, distill_phase1, head_finetune
from .errors import KPLabError
from .lab import SECTIONS, STAGES, ExperimentConfig, Interrupted, run_experiment
from .metrics import build_report
from .nn import Network, TrainConfig, default_spec, train
from .quantify import QuantifierConfig, entropy_map, optimize_sigma


def _load_data(path) -> LabeledDataset:
    z = np.load(path)
    return LabeledDataset(z["images"], z["labels"], z["masks"], int(z["n_classes"]))


def _spec_for(data: LabeledDataset):
    return default_spec(data.n_classes, data.images.shape[1:])


def cmd_gen_data(a):
    d = gen_dataset(a.seed, a.n_per_class, a.classes, a.size, tuple(a.grid), a.split, a.shape_scale)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    with open(a.out, "wb") as fh:
        np.savez(fh, images=d.images, labels=d.labels, masks=d.masks, n_classes=d.n_classes)
    print(f"wrote {len(d)} samples to {a.out}")


def cmd_train(a):
    data = _load_data(a.data)
    s = train(_spec_for(data), data, TrainConfig(a.epochs, a.batch_size, a.lr, a.momentum, a.seed))
    save_series(a.out, s)
    print(f"final training accuracy {s.accuracy:.4f}; wrote {a.out}")


def cmd_distill(a):
    data = _load_data(a.data)
    spec = _spec_for(data)
    teacher = Network(spec, load_series(a.teacher).final)
    cfg = DistillConfig(a.tap, a.phase1_epochs, a.phase1_lr, a.phase2_epochs, a.phase2_lr, a.batch_size,
                        a.momentum, a.seed)
    p1 = distill_phase1(teacher, spec, data, cfg)
    head = head_finetune(spec, p1, data, cfg)
    out = Path(a.out_prefix)
    save_series(f"{out}_phase1.kpchk", p1)
    save_series(f"{out}_final.kpchk", head.series)
    print(f"phase-1 loss {p1.loss_curve[-1]:.6g}; head accuracy {head.accuracy:.4f}")


def _quantifier_from(a) -> QuantifierConfig:
    return QuantifierConfig(alpha=a.alpha, tau_rel=a.tau_rel, n_steps=a.n_steps, n_mc_loss=a.n_mc_loss,
                            n_mc_delta=a.n_mc_delta, lr_sigma=a.lr_sigma, sigma_init=a.sigma_init,
                            grid=tuple(a.grid), grid_mode=a.grid_mode, seed=a.seed)


def cmd_probe(a):
    data = _load_data(a.data)
    spec = _spec_for(data)
    series = load_series(a.checkpoint)
    epoch = series.epochs if a.epoch is None else a.epoch
    cfg = _quantifier_from(a)
    sample = data[a.index]
    sf = optimize_sigma(Network(spec, series[epoch]).feature_fn(a.tap), sample.image, cfg, a.index, a.tap)
    em = entropy_map(sf, sample.cell_mask(cfg.grid))
    out = Path(a.out)
    kio.write_sigma_csv(out / f"s{a.index:03d}_sigma.csv", sf, em.foreground)
    kio.write_entropy_csv(out / f"s{a.index:03d}_H.csv", em)
    kio.write_pgm(out / f"s{a.index:03d}.pgm", em)
    print(f"delta_f2={sf.delta_f2:.6g} loss {sf.loss_initial:.6g} -> {sf.loss_final:.6g}"
          + (" (degenerate)" if sf.degenerate else ""))


def cmd_metrics(a):
    """Layout: ``<maps>/e<epoch>/s<id>_H.csv`` as written by ``run``."""
    root = Path(a.maps)
    maps = {}
    for f in sorted(root.glob("e*/s*_H.csv")):
        e = int(re.fullmatch(r"e(\d+)", f.parent.name).group(1))
        sid = int(re.fullmatch(r"s(\d+)_H\.csv", f.name).group(1))
        maps.setdefault(sid, {})[e] = kio.read_entropy_csv(f, sid)
    if not maps:
        raise KPLabError(f"no entropy maps under {root}")
    series = load_series(a.checkpoint) if a.checkpoint else None
    report = build_report(a.name, maps, a.b, series, config={"metrics.b": a.b})
    kio.write_report(report, Path(a.out) / f"{a.name}.csv", Path(a.out) / f"{a.name}_summary.txt")
    print(kio.report_summary(report), end="")


def cmd_heatmap(a):
    kio.write_pgm(a.out, kio.read_entropy_csv(a.map))


def cmd_run(a):
    cfg = ExperimentConfig()
    if a.config:
        cfg = ExperimentConfig.from_text(Path(a.config).read_text(), cfg)
    overrides = {k: v for k, v in vars(a).items() if "." in k and v is not None}
    cfg = ExperimentConfig.from_flat(overrides, cfg)
    log = (lambda msg: None) if a.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    try:
        res = run_experiment(cfg, stop_after=a.stop_after, log=log)
    except Interrupted as exc:
        print(str(exc))
        return
    for k, v in res.headline().items():
        print(f"{k}={kio.fmt(v)}")
    print(f"output={res.out_dir}")


def _add_quantifier_flags(p):
    q = ExperimentConfig().quantifier
    p.add_argument("--tap", default="fc1")
    p.add_argument("--alpha", type=float, default=q.alpha)
    p.add_argument("--tau-rel", type=float, default=q.tau_rel)
    p.add_argument("--n-steps", type=int, default=q.n_steps)
    p.add_argument("--n-mc-loss", type=int, default=q.n_mc_loss)
    p.add_argument("--n-mc-delta", type=int, default=q.n_mc_delta)
    p.add_argument("--lr-sigma", type=float, default=q.lr_sigma)
    p.add_argument("--sigma-init", type=float, default=q.sigma_init)
    p.add_argument("--grid", type=int, nargs=2, default=list(q.grid))
    p.add_argument("--grid-mode", choices=("shared_sigma", "shared_noise"), default=q.grid_mode)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kplab", description="knowledge-point experiments on synthetic shapes")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset (.npz)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--grid", type=int, nargs=2, default=[4, 4])
    p.add_argument("--split", default="train")
    p.add_argument("--shape-scale", type=float, default=1.6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="feature distillation then head training")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tap", default="fc1")
    p.add_argument("--phase1-epochs", type=int, default=10)
    p.add_argument("--phase1-lr", type=float, default=1e-4)
    p.add_argument("--phase2-epochs", type=int, default=3)
    p.add_argument("--phase2-lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("probe", help="entropy map of one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epoch", type=int)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_quantifier_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("metrics", help="knowledge-point report from entropy CSVs")
    p.add_argument("--maps", required=True, help="directory holding e<epoch>/s<id>_H.csv")
    p.add_argument("--checkpoint", help="series for weight distances (optional)")
    p.add_argument("--b", type=float, default=0.2)
    p.add_argument("--name", default="network")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("run", help="full pipeline")
    p.add_argument("--config", help="key=value file")
    p.add_argument("--stop-after", choices=STAGES)
    p.add_argument("--quiet", action="store_true")
    for name, section in SECTIONS.items():
        g = p.add_argument_group(name)
        for f in dataclasses.fields(section):
            g.add_argument(f"--{name}.{f.name}", dest=f"{name}.{f.name}", metavar=f.name.upper(),
                           help=f"default {kio.fmt(f.default)}")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("heatmap", help="entropy CSV to PGM")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (KPLabError, OSError, ValueError) as exc:
        print(f"kplab {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
