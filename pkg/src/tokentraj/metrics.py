"""Multi-mode trajectory metrics: minADE, minFDE, miss rate, simplified mAP.

The mAP here is a deliberately simplified stand-in for benchmark tooling:
a fixed distance threshold at the final evaluated step decides hits, the
highest-scored hit per agent is the one true positive, and every other
prediction is a false positive.  Numbers are therefore not comparable to
published leaderboards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError
from .scene import SceneSample


@dataclass
class EvalConfig:
    miss_threshold: float = 2.0  # meters at the final evaluated step
    eval_stride: int = 1  # evaluate every s-th future step
    measure_horizons: list[int] | None = None  # future-step counts; None = full horizon

    def horizons(self, t_future: int) -> list[int]:
        hs = self.measure_horizons or [t_future]
        for h in hs:
            if h < 1 or h > t_future:
                raise ConfigError(f"horizon {h} outside 1..{t_future}")
        return hs

    def steps(self, horizon: int) -> np.ndarray:
        """Evaluated future-step indices: every ``stride``-th step up to horizon."""
        return np.arange(self.eval_stride - 1, horizon, self.eval_stride)


def displacement(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1)


def min_ade(modes: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float | None:
    """Min over modes of the mean displacement at valid evaluated steps."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return None
    err = displacement(np.asarray(modes)[:, valid], gt[valid])
    return float(err.mean(axis=1).min())


def min_fde(modes: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float | None:
    """Min over modes of the displacement at the last valid evaluated step."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return None
    last = int(np.nonzero(valid)[0][-1])
    return float(displacement(np.asarray(modes)[:, last], gt[last]).min())


def is_missed(modes: np.ndarray, gt: np.ndarray, valid: np.ndarray, threshold: float) -> bool | None:
    """An agent is missed iff no mode's final displacement is within threshold."""
    fde_per_mode = _final_displacements(modes, gt, valid)
    if fde_per_mode is None:
        return None
    return bool((fde_per_mode > threshold).all())


def _final_displacements(modes, gt, valid):
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return None
    last = int(np.nonzero(valid)[0][-1])
    return displacement(np.asarray(modes)[:, last], gt[last])


def _interp_ap(tp_flags: np.ndarray, num_positives: int) -> float:
    """Area under the interpolated PR curve given ranked 0/1 outcomes."""
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1.0 - tp_flags)
    recall = tp / num_positives
    precision = tp / np.maximum(tp + fp, 1.0)
    ap = 0.0
    prev_r = 0.0
    for i in range(len(tp_flags)):
        if tp_flags[i] > 0:
            p_interp = precision[i:].max()
            ap += (recall[i] - prev_r) * p_interp
            prev_r = recall[i]
    return float(ap)


def simplified_map(
    scored: list[tuple[float, bool, int]], num_agents: int
) -> float | None:
    """Pooled average precision over (score, hit, agent_index) predictions.

    Predictions are sorted by descending score (ties by insertion order);
    a prediction is a true positive iff it hits and no higher-ranked
    prediction already claimed its agent.  Duplicates and non-hits are
    false positives; every agent contributes exactly one positive.
    """
    if num_agents == 0:
        return None
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    claimed: set[int] = set()
    flags = np.zeros(len(scored))
    for rank, i in enumerate(order):
        _, hit, agent = scored[i]
        if hit and agent not in claimed:
            flags[rank] = 1.0
            claimed.add(agent)
    return _interp_ap(flags, num_agents)


@dataclass
class AgentResult:
    scene_id: str
    agent_id: str
    min_ade: float | None
    min_fde: float | None
    missed: bool | None


@dataclass
class EvalReport:
    min_ade: float
    min_fde: float
    miss_rate: float
    map: float
    num_agents: int
    per_agent: list[AgentResult] = field(default_factory=list)

    def to_json_obj(self) -> dict:
        return {
            "min_ade": self.min_ade,
            "min_fde": self.min_fde,
            "miss_rate": self.miss_rate,
            "map": self.map,
            "num_agents": self.num_agents,
            "per_agent": [
                {
                    "scene_id": r.scene_id,
                    "agent_id": r.agent_id,
                    "min_ade": r.min_ade,
                    "min_fde": r.min_fde,
                    "missed": r.missed,
                }
                for r in self.per_agent
            ],
        }


def evaluate(
    scenes: list[SceneSample],
    predictions: list[dict],
    config: EvalConfig | None = None,
) -> EvalReport:
    """Score prediction records against scene ground truth.

    Each prediction record is ``{"scene_id", "agent_id", "modes":
    [{"score", "waypoints"}]}``; ids must match a focal agent of a provided
    scene.  Metrics are averaged over (agent, horizon) pairs, the mAP pools
    all predictions per horizon and averages across horizons.
    """
    config = config or EvalConfig()
    if not predictions:
        raise ValidationError("no predictions to evaluate")
    scene_by_id = {s.scene_id: s for s in scenes}

    entries = []
    for rec in predictions:
        scene = scene_by_id.get(rec["scene_id"])
        if scene is None:
            raise ValidationError(f"prediction references unknown scene {rec['scene_id']!r}")
        agents = {a.id: a for a in scene.agents}
        agent = agents.get(rec["agent_id"])
        if agent is None:
            raise ValidationError(
                f"prediction references unknown agent {rec['agent_id']!r} "
                f"in scene {rec['scene_id']!r}"
            )
        modes = np.asarray([m["waypoints"] for m in rec["modes"]], dtype=np.float64)
        scores = np.asarray([m["score"] for m in rec["modes"]], dtype=np.float64)
        if modes.ndim != 3 or modes.shape[2] != 2 or modes.shape[1] != scene.t_future:
            raise ValidationError(
                f"modes of {rec['agent_id']!r} must be (K, {scene.t_future}, 2), got {modes.shape}"
            )
        gt = agent.states[scene.t_obs :, 0:2]
        gt_valid = agent.states[scene.t_obs :, 5] > 0.5
        entries.append((scene, rec["agent_id"], modes, scores, gt, gt_valid))

    t_future = entries[0][0].t_future
    horizons = config.horizons(t_future)

    ades, fdes, misses = [], [], []
    per_agent: list[AgentResult] = []
    ap_values = []
    for horizon in horizons:
        steps = config.steps(horizon)
        pooled = []
        num_agents = 0
        for idx, (scene, agent_id, modes, scores, gt, gt_valid) in enumerate(entries):
            sel_modes = modes[:, steps]
            sel_gt = gt[steps]
            sel_valid = gt_valid[steps]
            a = min_ade(sel_modes, sel_gt, sel_valid)
            f = min_fde(sel_modes, sel_gt, sel_valid)
            m = is_missed(sel_modes, sel_gt, sel_valid, config.miss_threshold)
            if horizon == horizons[-1]:
                per_agent.append(
                    AgentResult(scene.scene_id, agent_id, min_ade=a, min_fde=f, missed=m)
                )
            if a is None:
                continue
            num_agents += 1
            ades.append(a)
            fdes.append(f)
            misses.append(1.0 if m else 0.0)
            finals = _final_displacements(sel_modes, sel_gt, sel_valid)
            for k in range(len(scores)):
                pooled.append((float(scores[k]), bool(finals[k] <= config.miss_threshold), idx))
        ap = simplified_map(pooled, num_agents)
        if ap is not None:
            ap_values.append(ap)

    if not ades:
        raise ValidationError("no agent had valid ground truth at the evaluated steps")
    return EvalReport(
        min_ade=float(np.mean(ades)),
        min_fde=float(np.mean(fdes)),
        miss_rate=float(np.mean(misses)),
        map=float(np.mean(ap_values)),
        num_agents=len(per_agent),
        per_agent=per_agent,
    )
