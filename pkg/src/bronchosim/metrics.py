"""Trial outcomes and campaign reports.

Outcomes are pure functions of the episode log, so replaying a recorded log
reproduces the outcome bit-for-bit. Placement is read off the railroading
completion: ground truth from the tube tip arc length against the carina
arc length stored in the header, the estimate from the guidance state at
the transition tick.
"""

from __future__ import annotations

import numpy as np

from .config import StackConfig
from .episode_log import EpisodeLog
from .model import LatentDynamicsModel
from .perception import Zone, classify_zone


def outcome_from_log(log: EpisodeLog, cfg: StackConfig):
    from .session import Phase, TrialOutcome

    records = log.records
    if not records:
        raise ValueError("empty episode log")
    zones = cfg.perception.zones
    final_phase = records[-1]["phase"]
    placed = final_phase == Phase.SECURED.value

    placement_gt = None
    placement_est = None
    last_rail = None
    first_withdraw = None
    for i, rec in enumerate(records):
        if rec["phase"] == Phase.RAILROADING.value:
            last_rail = i
        elif rec["phase"] == Phase.WITHDRAWAL.value and first_withdraw is None:
            first_withdraw = i
    if last_rail is not None and first_withdraw is not None:
        carina_arclength = log.header["carina_arclength"]
        placement_gt = carina_arclength - records[last_rail]["plant"]["tube_insertion"]
        placement_est = records[first_withdraw]["guidance"]["carina_distance_est"]

    final_zone = None
    if placement_gt is not None:
        final_zone = (
            "endobronchial" if placement_gt < 0.0 else classify_zone(placement_gt, zones).value
        )
    success = placed and final_zone == Zone.ZONE2.value

    wall_contacts = 0
    corrective = 0
    prev_corr = False
    nav_axes = []
    nav_phases = (Phase.NAVIGATION.value, Phase.HOLD_AT_TARGET.value)
    for rec in records:
        if rec["phase"] in nav_phases:
            wall_contacts += len(rec.get("contacts", ()))
            gt = rec.get("gt_carina")
            if gt is not None and gt <= zones.zone2_upper + 20.0:
                nav_axes.append(rec["input"]["axes"])
        corr = bool(rec.get("corrective"))
        if corr and not prev_corr:
            corrective += 1
        prev_corr = corr

    if nav_axes:
        variance = np.var(np.asarray(nav_axes), axis=0).tolist()
    else:
        variance = [0.0, 0.0, 0.0]

    dt = log.header["dt"]
    return TrialOutcome(
        success=bool(success),
        placed=bool(placed),
        final_phase=final_phase,
        final_offset=placement_gt,
        final_offset_est=placement_est,
        final_zone=final_zone,
        wall_contacts=wall_contacts,
        corrective_withdrawals=corrective,
        input_variance=variance,
        duration_s=len(records) * dt,
        ticks=len(records),
        abort_reason=log.header.get("abort_reason"),
        scenario=log.header["scenario"],
        mode=log.header["mode"],
        seed=log.header["seed"],
    )


def compute_metrics(outcomes: list, target_offset: float) -> dict:
    """Aggregate §-style campaign statistics over trial outcomes."""
    if not outcomes:
        raise ValueError("no outcomes to aggregate")
    n = len(outcomes)
    placements = [o for o in outcomes if o.final_offset is not None]
    est_errors = [
        abs(o.final_offset_est - o.final_offset)
        for o in placements
        if o.final_offset_est is not None
    ]
    within = [
        o
        for o in placements
        if abs(o.final_offset - target_offset) <= 20.0 and o.placed
    ]
    report = {
        "trials": n,
        "successes": sum(o.success for o in outcomes),
        "success_rate": sum(o.success for o in outcomes) / n,
        "placements": len(placements),
        "placement_mae_mm": float(np.mean(est_errors)) if est_errors else None,
        "placement_mae_std_mm": float(np.std(est_errors)) if est_errors else None,
        "within_20mm_fraction": len(within) / n,
        "endobronchial_count": sum(
            1 for o in placements if o.final_offset is not None and o.final_offset < 0.0
        ),
        "mean_wall_contacts": float(np.mean([o.wall_contacts for o in outcomes])),
        "mean_corrective_withdrawals": float(
            np.mean([o.corrective_withdrawals for o in outcomes])
        ),
        "mean_duration_s": float(np.mean([o.duration_s for o in outcomes])),
        "by_scenario": {},
    }
    for scenario in sorted({o.scenario for o in outcomes}):
        sub = [o for o in outcomes if o.scenario == scenario]
        report["by_scenario"][scenario] = {
            "trials": len(sub),
            "success_rate": sum(o.success for o in sub) / len(sub),
            "mean_wall_contacts": float(np.mean([o.wall_contacts for o in sub])),
        }
    return report


def run_campaign(
    cfg: StackConfig,
    model: LatentDynamicsModel,
    trials: int = 48,
    seed: int = 0,
    mode: str = "guided-auto",
    keep_logs: bool = False,
) -> dict:
    """Half standard, half constrained trials; deterministic per seed."""
    from .session import run_episode

    outcomes = []
    logs = []
    for i in range(trials):
        scenario = "standard" if i < (trials + 1) // 2 else "constrained"
        log, outcome = run_episode(scenario, mode, seed + i, cfg, model)
        outcomes.append(outcome)
        if keep_logs:
            logs.append(log)
    report = compute_metrics(outcomes, cfg.perception.zones.target_offset)
    report["mode"] = mode
    report["seed"] = seed
    report["outcomes"] = [o.to_dict() for o in outcomes]
    return (report, logs) if keep_logs else report


def run_ablation(
    cfg: StackConfig,
    model: LatentDynamicsModel,
    pairs: int = 16,
    seed: int = 0,
) -> dict:
    """Paired guided vs guidance-off runs on matched (scenario, seed)."""
    from .session import run_episode

    guided = []
    baseline = []
    for i in range(pairs):
        scenario = "standard" if i % 2 == 0 else "constrained"
        _, o_guided = run_episode(scenario, "guided-auto", seed + i, cfg, model)
        _, o_blind = run_episode(scenario, "ablation", seed + i, cfg, model)
        guided.append(o_guided)
        baseline.append(o_blind)

    def arm_stats(arm):
        return {
            "mean_wall_contacts": float(np.mean([o.wall_contacts for o in arm])),
            "mean_corrective_withdrawals": float(
                np.mean([o.corrective_withdrawals for o in arm])
            ),
            "mean_input_variance": np.mean([o.input_variance for o in arm], axis=0).tolist(),
            "success_rate": sum(o.success for o in arm) / len(arm),
        }

    g, b = arm_stats(guided), arm_stats(baseline)
    report = {
        "pairs": pairs,
        "seed": seed,
        "guided": g,
        "baseline": b,
        "contact_increase": (b["mean_wall_contacts"] - g["mean_wall_contacts"])
        / max(g["mean_wall_contacts"], 1e-9),
        "corrective_increase": (
            b["mean_corrective_withdrawals"] - g["mean_corrective_withdrawals"]
        )
        / max(g["mean_corrective_withdrawals"], 1e-9),
        "guided_outcomes": [o.to_dict() for o in guided],
        "baseline_outcomes": [o.to_dict() for o in baseline],
    }
    return report
