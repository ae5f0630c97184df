"""Knowledge points and the training-dynamics metrics built on them.

A cell is a knowledge point when its entropy sits more than ``b`` below the
mean background entropy of the same sample.  Per-epoch knowledge-point sets
feed the foreground ratio lambda and the weight distance travelled until the
foreground count peaks (D_mean, D_var).  rho is the share of ever learned
foreground points that survive to the final epoch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import BaselineError, ConfigError, UndefinedMetricError
from .nn import weight_distances
from .quantify import EntropyMap

DEFAULT_B = 0.2


@dataclass(frozen=True)
class KnowledgePointSet:
    sample_id: int
    epoch: Optional[int]
    foreground_points: frozenset   # flat cell indices in the foreground passing the test
    background_points: frozenset
    baseline: float

    @property
    def n_fg(self) -> int:
        return len(self.foreground_points)

    @property
    def n_bg(self) -> int:
        return len(self.background_points)


def background_baseline(emap: EntropyMap) -> float:
    """Mean entropy over background cells."""
    bg = emap.H[emap.background]
    if bg.size == 0:
        raise BaselineError(f"sample {emap.sample_id} has no background cells")
    return float(np.mean(bg))


def count_knowledge_points(emap: EntropyMap, b: float = DEFAULT_B, epoch: Optional[int] = None) -> KnowledgePointSet:
    """Cells with ``baseline - H > b``, split by the foreground mask."""
    if b < 0:
        raise ConfigError("threshold b must be non-negative")
    base = background_baseline(emap)
    hit = (base - emap.H) > b
    flat_hit = hit.ravel()
    fg = emap.foreground.ravel()
    return KnowledgePointSet(
        emap.sample_id, epoch,
        frozenset(np.flatnonzero(flat_hit & fg).tolist()),
        frozenset(np.flatnonzero(flat_hit & ~fg).tolist()),
        base,
    )


def lambda_ratio(rows: Iterable) -> float:
    """Mean over samples of ``n_fg / (n_fg + n_bg)``; samples with no points are skipped.

    ``rows`` holds ``(n_fg, n_bg)`` pairs or :class:`KnowledgePointSet` objects.
    """
    ratios = []
    for r in rows:
        n_fg, n_bg = (r.n_fg, r.n_bg) if isinstance(r, KnowledgePointSet) else r
        if n_fg + n_bg > 0:
            ratios.append(n_fg / (n_fg + n_bg))
    if not ratios:
        raise UndefinedMetricError("lambda undefined: no sample has any knowledge point")
    return float(np.mean(ratios))


def richest_epoch(counts: Sequence[int], epochs: Optional[Sequence[int]] = None) -> int:
    """Epoch with the most foreground points; ties go to the earliest epoch.

    ``epochs`` labels the entries of ``counts`` and defaults to ``1..len(counts)``.
    """
    counts = list(counts)
    if not counts:
        raise ValueError("no epochs evaluated")
    epochs = list(range(1, len(counts) + 1)) if epochs is None else list(epochs)
    return int(epochs[int(np.argmax(counts))])


def learning_speed(series, m_hats: Sequence[int]) -> tuple:
    """``(D_mean, D_var)`` of the weight distance at each sample's richest epoch.

    Variance is the population variance (divides by the number of samples).
    """
    m_hats = list(m_hats)
    if not m_hats:
        raise UndefinedMetricError("no samples for D_mean / D_var")
    cum = weight_distances(series)
    for m in m_hats:
        if not 0 <= m < len(cum):
            raise IndexError(f"epoch {m} outside [0, {len(cum) - 1}]")
    d = cum[np.asarray(m_hats, dtype=int)]
    return float(np.mean(d)), float(np.var(d))


def stability_rho(sets: Sequence) -> float:
    """``|S_M| / |union_j S_j|`` with the final set last in ``sets``.

    The ratio is 0 when points were learned but none survive to the final
    epoch; callers that need ``rho`` in ``(0, 1]`` must screen for an empty
    final set.
    """
    sets = [s.foreground_points if isinstance(s, KnowledgePointSet) else frozenset(s) for s in sets]
    if not sets:
        raise UndefinedMetricError("no epochs given")
    union = frozenset().union(*sets)
    if not union:
        raise UndefinedMetricError("no foreground point was ever learned")
    return len(sets[-1]) / len(union)


# -- reports -------------------------------------------------------------------
@dataclass
class SampleRow:
    sample_id: int
    n_fg: int
    n_bg: int
    m_hat: Optional[int]
    weight_distance: Optional[float]
    rho: Optional[float]
    status: str = "ok"

    @property
    def fg_ratio(self) -> Optional[float]:
        total = self.n_fg + self.n_bg
        return self.n_fg / total if total else None


@dataclass
class MetricsReport:
    network: str
    rows: list
    mean_n_fg: float
    mean_n_bg: float
    lam: Optional[float]
    d_mean: Optional[float]
    d_var: Optional[float]
    mean_rho: Optional[float]
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def check_invariants(self) -> None:
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise AssertionError(f"lambda {self.lam} outside [0, 1]")
        if self.d_var is not None and self.d_var < 0:
            raise AssertionError(f"D_var {self.d_var} negative")
        if self.mean_rho is not None and not 0.0 < self.mean_rho <= 1.0:
            raise AssertionError(f"mean rho {self.mean_rho} outside (0, 1]")
        for r in self.rows:
            if r.rho is not None and not 0.0 < r.rho <= 1.0:
                raise AssertionError(f"rho {r.rho} outside (0, 1] for sample {r.sample_id}")


def build_report(network: str, maps: Mapping[int, Mapping[int, EntropyMap]], b: float = DEFAULT_B,
                 series=None, degenerate: Iterable[int] = (), config: Optional[dict] = None) -> MetricsReport:
    """Aggregate per-sample, per-epoch entropy maps into a :class:`MetricsReport`.

    ``maps[sample_id][epoch]`` holds the entropy map of that sample after that
    epoch.  With a single epoch per sample (or no ``series``) only the counts
    and lambda are filled.  Samples listed in ``degenerate`` or lacking a
    background are excluded and counted.  ``rho`` is left undefined for a
    sample whose final foreground set is empty: ``count.empty_union`` when no
    point was ever learned, ``count.empty_final`` when all were forgotten.
    """
    degenerate = set(degenerate)
    rows, kp_final = [], []
    counts = {"samples": len(maps), "degenerate": 0, "no_background": 0, "zero_point": 0,
              "empty_union": 0, "empty_final": 0, "no_knowledge": 0}
    m_hats = []
    cum = weight_distances(series) if series is not None else None
    for sid in sorted(maps):
        by_epoch = maps[sid]
        epochs = sorted(by_epoch)
        if sid in degenerate:
            counts["degenerate"] += 1
            rows.append(SampleRow(sid, 0, 0, None, None, None, "degenerate"))
            continue
        try:
            sets = [count_knowledge_points(by_epoch[e], b, e) for e in epochs]
        except BaselineError:
            counts["no_background"] += 1
            rows.append(SampleRow(sid, 0, 0, None, None, None, "no-background"))
            continue
        final = sets[-1]
        kp_final.append(final)
        status = "ok"
        if final.n_fg + final.n_bg == 0:
            counts["zero_point"] += 1
            status = "zero-point"
        m_hat = wd = rho = None
        if cum is not None and len(epochs) > 1:
            fg_counts = [s.n_fg for s in sets]
            m_hat = richest_epoch(fg_counts, epochs)
            if max(fg_counts) == 0:
                counts["no_knowledge"] += 1
                status = "no-knowledge"
            wd = float(cum[m_hat])
            m_hats.append(m_hat)
            if not sets[-1].foreground_points:
                # rho would be 0 (or undefined); kept out of the (0, 1] average and counted
                key = "empty_final" if any(x.foreground_points for x in sets) else "empty_union"
                counts[key] += 1
            else:
                rho = stability_rho(sets)
        rows.append(SampleRow(sid, final.n_fg, final.n_bg, m_hat, wd, rho, status))

    if not kp_final:
        raise UndefinedMetricError(f"{network}: every sample was excluded")
    try:
        lam = lambda_ratio(kp_final)
    except UndefinedMetricError:
        lam = None
    d_mean = d_var = None
    if m_hats:
        d_mean, d_var = learning_speed(series, m_hats)
    rhos = [r.rho for r in rows if r.rho is not None]
    report = MetricsReport(
        network=network,
        rows=rows,
        mean_n_fg=float(np.mean([k.n_fg for k in kp_final])),
        mean_n_bg=float(np.mean([k.n_bg for k in kp_final])),
        lam=lam,
        d_mean=d_mean,
        d_var=d_var,
        mean_rho=float(np.mean(rhos)) if rhos else None,
        counts=counts,
        config=dict(config or {}),
    )
    report.check_invariants()
    return report
