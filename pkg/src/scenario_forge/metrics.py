"""Displacement, diversity, event-rate and acceleration metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .closed_loop import SimulationResult
from .scene import Scenario


class MetricsContractError(ValueError):
    """Inputs to a metric are inconsistent."""


def _xy(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[..., :2]


def displacement(pred, truth) -> np.ndarray:
    """Per-agent, per-step Euclidean error for ``(N, T, >=2)`` arrays."""
    p, t = _xy(pred), _xy(truth)
    if p.shape != t.shape:
        raise MetricsContractError(f"prediction shape {p.shape} differs from ground truth {t.shape}")
    return np.linalg.norm(p - t, axis=-1)


def ade(pred, truth) -> float:
    """Mean error over agents and steps."""
    return float(np.mean(displacement(pred, truth)))


def fde(pred, truth) -> float:
    """Mean final-step error over agents."""
    return float(np.mean(displacement(pred, truth)[..., -1]))


def min_sfde(samples, truth) -> float:
    """Best-of-M scene-averaged final error for samples ``(M, N, T, >=2)``."""
    s = np.asarray(samples, dtype=np.float64)
    return float(min(fde(sample, truth) for sample in s))


def fdd(samples) -> float:
    """Mean over agents of the largest pairwise distance among the M final positions."""
    s = _xy(samples)
    if s.shape[0] < 2:
        raise MetricsContractError("final displacement diversity needs at least two samples")
    final = s[:, :, -1, :]  # (M, N, 2)
    diff = final[:, None, :, :] - final[None, :, :, :]
    dist = np.linalg.norm(diff, axis=-1)  # (M, M, N)
    return float(np.mean(dist.max(axis=(0, 1))))


def mean_abs_accel(states, dt: float) -> float:
    s = np.asarray(states, dtype=np.float64)
    return float(np.mean(np.abs(np.diff(s[..., 3], axis=-1)) / dt))


@dataclass
class MetricsReport:
    ade: float = math.nan
    fde: float = math.nan
    min_sfde: float = math.nan
    fdd: float = math.nan
    veh_coll_rate: float = math.nan
    env_coll_rate: float = math.nan
    adv_ego_coll_rate: float = math.nan
    adv_offroad_rate: float = math.nan
    other_offroad_rate: float = math.nan
    adv_other_coll_rate: float = math.nan
    other_ego_coll_rate: float = math.nan
    other_other_coll_rate: float = math.nan
    adv_acc: float = math.nan
    other_acc: float = math.nan
    infer_time: float = math.nan
    n_scenes: int = 0
    n_excluded: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in self.as_dict().items()}, indent=2, sort_keys=True)


METRIC_FIELDS = [f.name for f in fields(MetricsReport)]


def _pct(hits: int, total: int) -> float:
    return 100.0 * hits / total if total else math.nan


def compute_metrics(
    results: Sequence[SimulationResult],
    ground_truth: Sequence[Scenario],
    samples_per_scene: int = 1,
    diversity: bool | None = None,
) -> MetricsReport:
    """Aggregate metrics; ``results`` holds ``samples_per_scene`` consecutive results per scene.

    Displacements compare each result's non-ego futures with the matching
    ground truth. Rates count (agent, result) units with at least one event;
    results whose planner failed are left out of the rate denominators.
    """
    M = int(samples_per_scene)
    if M < 1 or len(results) != M * len(ground_truth):
        raise MetricsContractError(f"expected {M} results per scene for {len(ground_truth)} scenes, got {len(results)}")
    if diversity is None:
        diversity = M >= 2
    if diversity and M < 2:
        raise MetricsContractError("final displacement diversity needs at least two samples per scene")
    rep = MetricsReport(n_scenes=len(ground_truth))
    errs, finals, sfde_min, fdds, times = [], [], [], [], []
    counts = dict.fromkeys(["veh", "env", "adv_ego", "adv_off", "other_off", "adv_other", "other_ego", "other_other"], 0)
    n_non_ego = n_adv = n_other = 0
    adv_acc, other_acc = [], []
    for s, gt in enumerate(ground_truth):
        group = results[s * M : (s + 1) * M]
        gen_idx = gt.non_ego_indices
        truth = np.array([gt.agents[i].future for i in gen_idx])
        preds = np.array([r.states[1:, gen_idx].transpose(1, 0, 2) for r in group])
        disp = np.array([displacement(p, truth) for p in preds])  # (M, N, T)
        errs.append(disp.ravel())
        finals.append(disp[:, :, -1].ravel())
        sfde_min.append(disp[:, :, -1].mean(axis=1).min())
        if diversity:
            fdds.append(fdd(preds))
        times.append(group[0].generation_time)
        adv = gt.adversary_index
        ego_id = gt.ego.id
        adv_id = gt.agents[adv].id if adv is not None else None
        for r in group:
            full = r.states.transpose(1, 0, 2)  # (N, T+1, 4)
            for i in gen_idx:
                (adv_acc if i == adv else other_acc).append(mean_abs_accel(full[i], gt.dt))
            if r.planner_failed:
                rep.n_excluded += 1
                continue
            ev = r.events
            for i in gen_idx:
                aid = gt.agents[i].id
                partners = ev.collision_partners(aid)
                offroad = aid in ev.offroad
                n_non_ego += 1
                counts["veh"] += bool(partners)
                counts["env"] += offroad
                if i == adv:
                    n_adv += 1
                    counts["adv_ego"] += ego_id in partners
                    counts["adv_off"] += offroad
                    counts["adv_other"] += bool(partners - {ego_id})
                else:
                    n_other += 1
                    counts["other_off"] += offroad
                    counts["other_ego"] += ego_id in partners
                    counts["other_other"] += bool(partners - {ego_id, adv_id})
    rep.ade = float(np.mean(np.concatenate(errs)))
    rep.fde = float(np.mean(np.concatenate(finals)))
    rep.min_sfde = float(np.mean(sfde_min))
    rep.fdd = float(np.mean(fdds)) if diversity else math.nan
    rep.veh_coll_rate = _pct(counts["veh"], n_non_ego)
    rep.env_coll_rate = _pct(counts["env"], n_non_ego)
    rep.adv_ego_coll_rate = _pct(counts["adv_ego"], n_adv)
    rep.adv_offroad_rate = _pct(counts["adv_off"], n_adv)
    rep.adv_other_coll_rate = _pct(counts["adv_other"], n_adv)
    rep.other_offroad_rate = _pct(counts["other_off"], n_other)
    rep.other_ego_coll_rate = _pct(counts["other_ego"], n_other)
    rep.other_other_coll_rate = _pct(counts["other_other"], n_other)
    rep.adv_acc = float(np.mean(adv_acc)) if adv_acc else math.nan
    rep.other_acc = float(np.mean(other_acc)) if other_acc else math.nan
    rep.infer_time = float(np.mean(times))
    return rep


def metrics_csv(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """CSV with one row per labelled report (per-scene rows plus an aggregate)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label"] + METRIC_FIELDS)
    for label, rep in rows:
        d = rep.as_dict()
        writer.writerow([label] + [repr(d[k]) if isinstance(d[k], float) else d[k] for k in METRIC_FIELDS])
    return buf.getvalue()
