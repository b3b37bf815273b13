"""Sweeps every shipped preset and condenses the summaries into one report.

Each preset lands in RESULTS_DIR/<preset>/ with per-arm metrics and a
summary.csv; the report holds mean speedup, mean simulated minutes, mean
slowest-worker delay and late-round loss-step variance per (preset, variant,
protocol). The trend checks at the end run on whatever presets were swept.
"""

import sys

import pandas as pd

from config import JOBS, PRESETS, REPLICATES, REPORT_PATH, RESULTS_DIR
from meshfl.config import configure_logging
from meshfl.errors import MeshFLError
from meshfl.harness import sweep
from meshfl.scenario import list_presets

RL = "rl-softmax"
MAX_SLOWDOWN = 1.02
CONGESTED_GAIN = 0.10
SCALABILITY_COUNTS = range(9, 15)


def reproduce(names: list[str]) -> pd.DataFrame:
    frames = []
    for name in names:
        print(f"Sweeping {name} ({REPLICATES} replicates)...")
        summary = sweep(name, REPLICATES, RESULTS_DIR / name, jobs=JOBS)
        summary.insert(0, "preset", name)
        frames.append(summary)
    return pd.concat(frames, ignore_index=True)


def condense(summary: pd.DataFrame) -> pd.DataFrame:
    grouped = summary.groupby(["preset", "variant", "protocol"], sort=False)
    report = grouped.agg(
        replicates=("replicate", "count"),
        rounds=("rounds", "mean"),
        total_minutes=("total_minutes", "mean"),
        mean_tau_max_ms=("mean_tau_max_ms", "mean"),
        time_to_target_min=("time_to_target_min", "mean"),
        speedup=("speedup", "mean"),
        loss_step_var=("loss_step_var", "mean"),
    )
    return report.reset_index()


def _value(report: pd.DataFrame, preset: str, variant: str, protocol: str, column: str) -> float | None:
    rows = report[(report["preset"] == preset) & (report["variant"] == variant) & (report["protocol"] == protocol)]
    if rows.empty or pd.isna(rows[column].iloc[0]):
        return None
    return float(rows[column].iloc[0])


def check_speedups(report: pd.DataFrame) -> list[str]:
    failures = []
    for row in report[report["protocol"] == RL].itertuples():
        if pd.isna(row.speedup):
            continue
        if row.speedup < 1.0 / MAX_SLOWDOWN:
            failures.append(f"{row.preset}/{row.variant}: {RL} is {1 / row.speedup:.3f}x the baseline time")
    gain = _value(report, "fig12_distributions", "d252_congested", RL, "speedup")
    if gain is not None and gain < 1.0 / (1.0 - CONGESTED_GAIN):
        failures.append(f"fig12_distributions/d252_congested: {RL} saves {1 - 1 / gain:.1%} of the baseline time")
    return failures


def check_stragglers(report: pd.DataFrame) -> list[str]:
    failures = []
    for level in ("s50", "s90"):
        plain = _value(report, "fig8_stragglers", f"rho0_{level}", "baseline", "loss_step_var")
        regularized = _value(report, "fig8_stragglers", f"rho_{level}", "baseline", "loss_step_var")
        if plain is not None and regularized is not None and not regularized < plain:
            failures.append(f"fig8_stragglers/{level}: loss-step variance {regularized:.3g} with rho vs {plain:.3g}")
    return failures


def check_scalability(report: pd.DataFrame) -> list[str]:
    failures = []
    times = {
        protocol: [
            _value(report, "fig13_scalability", f"w{k}", protocol, "time_to_target_min") for k in SCALABILITY_COUNTS
        ]
        for protocol in ("baseline", RL)
    }
    if any(t is None for series in times.values() for t in series):
        return failures
    for protocol, series in times.items():
        if any(b < a for a, b in zip(series, series[1:])):
            failures.append(f"fig13_scalability: {protocol} time to target drops as workers are added: {series}")
    for k, base, rl in zip(SCALABILITY_COUNTS, times["baseline"], times[RL]):
        if not rl < base:
            failures.append(f"fig13_scalability/w{k}: {RL} {rl:.2f} min vs baseline {base:.2f} min")
    return failures


def mobilenet_reductions(report: pd.DataFrame) -> dict[str, float]:
    """Share of the baseline's total simulated time that rl-softmax saves per variant."""
    reductions = {}
    for variant in report.loc[report["preset"] == "mobilenet", "variant"].unique():
        base = _value(report, "mobilenet", variant, "baseline", "total_minutes")
        rl = _value(report, "mobilenet", variant, RL, "total_minutes")
        if base and rl is not None:
            reductions[variant] = 1.0 - rl / base
    return reductions


def main() -> int:
    configure_logging()
    names = PRESETS or list_presets()
    try:
        summary = reproduce(names)
    except MeshFLError as exc:
        print(f"Sweep failed: {exc}", file=sys.stderr)
        return 1
    report = condense(summary)
    REPORT_PATH.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(REPORT_PATH, index=False)
    print(report.to_string(index=False))
    print(f"Report written to {REPORT_PATH}")

    for variant, reduction in mobilenet_reductions(report).items():
        print(f"mobilenet/{variant}: {RL} saves {reduction:.1%} of the total training time")
    failures = check_speedups(report) + check_stragglers(report) + check_scalability(report)
    for failure in failures:
        print(f"CHECK FAILED {failure}", file=sys.stderr)
    return 2 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
