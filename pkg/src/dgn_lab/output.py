from __future__ import annotations

import csv
import io
import json
from typing import Any, Mapping, Sequence

import numpy as np

from .gradients import GradcheckReport
from .perturbation import RobustnessTable
from .stability import SdeSummary, StabilityReport
from .training import TrainHistory

HISTORY_HEADER = ["epoch", "train_loss", "train_acc", "eval_acc"]
ROBUSTNESS_HEADER = [
    "kind",
    "p",
    "epsilon",
    "alpha",
    "k",
    "mixed_factor",
    "accuracy",
    "samples",
    "config_hash",
    "seed",
]
STABILITY_HEADER = [
    "case",
    "config_hash",
    "seed",
    "G0",
    "analytic_mean",
    "analytic_var_dgn",
    "analytic_var_lif",
    "mc_var",
    "mc_var_se",
    "mc_var_lif",
    "mc_var_lif_se",
    "ratio",
    "mc_ratio",
    "dgn_lower",
]


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return value


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Mapping):
        return {key: _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    return value


def render_json(payload: Mapping[str, Any]) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"


def render_history_csv(history: TrainHistory) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(HISTORY_HEADER)
    for record in history.records:
        writer.writerow([_cell(record.as_dict()[column]) for column in HISTORY_HEADER])
    return buffer.getvalue()


def render_robustness_csv(table: RobustnessTable, config_hash: str, seed: int) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(ROBUSTNESS_HEADER)
    for row in table.rows:
        values = row.as_dict() | {"config_hash": config_hash, "seed": seed}
        writer.writerow([_cell(values[column]) for column in ROBUSTNESS_HEADER])
    return buffer.getvalue()


def render_robustness_json(table: RobustnessTable, config_hash: str, seed: int) -> str:
    return render_json(
        {
            "config_hash": config_hash,
            "seed": seed,
            "clean_accuracy": table.clean_accuracy,
            "rows": [row.as_dict() for row in table.rows],
        }
    )


def _summary_dict(summary: SdeSummary | None) -> dict[str, Any] | None:
    if summary is None:
        return None
    return {
        "mean": summary.mean,
        "mean_se": summary.mean_se,
        "variance": summary.variance,
        "variance_se": summary.variance_se,
        "trials": summary.trials,
        "steps": summary.steps,
        "dt": summary.dt,
        "pooled_steps": summary.pooled_steps,
    }


def stability_row(case: int, G0: float, report: StabilityReport) -> dict[str, Any]:
    mc, mc_lif = report.mc_dgn, report.mc_lif
    return {
        "case": case,
        "G0": G0,
        "analytic_mean": report.analytic_mean,
        "analytic_var_dgn": report.analytic_var_dgn,
        "analytic_var_lif": report.analytic_var_lif,
        "mc_var": mc.variance if mc else None,
        "mc_var_se": mc.variance_se if mc else None,
        "mc_var_lif": mc_lif.variance if mc_lif else None,
        "mc_var_lif_se": mc_lif.variance_se if mc_lif else None,
        "ratio": report.analytic_ratio,
        "mc_ratio": report.mc_ratio,
        "dgn_lower": report.dgn_lower,
    }


def render_stability_csv(
    rows: Sequence[Mapping[str, Any]], config_hash: str, seed: int
) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(STABILITY_HEADER)
    for row in rows:
        values = dict(row) | {"config_hash": config_hash, "seed": seed}
        writer.writerow([_cell(values[column]) for column in STABILITY_HEADER])
    return buffer.getvalue()


def render_stability_json(
    reports: Sequence[tuple[int, float, StabilityReport]], config_hash: str, seed: int
) -> str:
    cases = []
    for case, G0, report in reports:
        cases.append(
            stability_row(case, G0, report)
            | {
                "numerator_components": report.numerator_components,
                "mc_dgn": _summary_dict(report.mc_dgn),
                "mc_lif": _summary_dict(report.mc_lif),
            }
        )
    return render_json({"config_hash": config_hash, "seed": seed, "cases": cases})


def render_trajectories_csv(summary: SdeSummary) -> str:
    """One row per step: ``t`` then one column per recorded trial."""
    if summary.trajectories is None:
        raise ValueError("no trajectories were recorded")
    traj = summary.trajectories
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["t"] + [f"trial_{i}" for i in range(traj.shape[1])])
    for step, values in enumerate(traj):
        writer.writerow([step * summary.dt] + [float(v) for v in values])
    return buffer.getvalue()


def render_gradcheck_text(report: GradcheckReport) -> str:
    lines = [
        f"dual-path worst relative error: {report.worst('dual-path'):.3e}",
        f"finite-difference worst relative error: {report.worst('finite-difference'):.3e}",
        "per-layer worst:",
    ]
    for group, error in sorted(report.per_layer_worst().items()):
        lines.append(f"  {group}: {error:.3e}")
    for case in report.failures():
        lines.append(
            f"FAIL {case.name} ({case.check}): {case.worst_parameter} "
            f"error {case.worst:.3e} > {case.tolerance:.0e}"
        )
    lines.append("PASS" if report.passed else "FAIL")
    return "\n".join(lines) + "\n"


def render_gradcheck_json(report: GradcheckReport, config_hash: str, seed: int) -> str:
    return render_json(
        {
            "config_hash": config_hash,
            "seed": seed,
            "passed": report.passed,
            "worst": {
                "dual-path": report.worst("dual-path"),
                "finite-difference": report.worst("finite-difference"),
            },
            "per_layer_worst": report.per_layer_worst(),
            "cases": [
                {
                    "name": case.name,
                    "check": case.check,
                    "tolerance": case.tolerance,
                    "passed": case.passed,
                    "errors": case.errors,
                }
                for case in report.cases
            ],
        }
    )
