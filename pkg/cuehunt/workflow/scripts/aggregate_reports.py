import math
import os
import re

import pandas as pd
import plotly.graph_objects as go

from cuehunt.visualize import write_html_report

SEED_DIR = re.compile(r"seed(\d+)$")
SEEDS_PASSING = "seeds passing"


def load_results(result_files):
    frames = [pd.read_json(f, lines=True) for f in result_files if os.path.getsize(f) > 0]
    if not frames:
        return pd.DataFrame(columns=["experiment", "seed", "mse", "success_at_15", "passed"])
    return pd.concat(frames, ignore_index=True).sort_values(["experiment", "seed"]).reset_index(drop=True)


def load_pickplace(summary_files):
    rows = []
    for f in summary_files:
        # runs/<experiment>/seed<n>/pickplace/pickplace_summary.jsonl
        run_dir = os.path.dirname(os.path.dirname(f))
        seed = int(SEED_DIR.search(run_dir).group(1))
        experiment = os.path.basename(os.path.dirname(run_dir))
        record = pd.read_json(f, lines=True).iloc[0].to_dict()
        record.update({"experiment": experiment, "seed": seed})
        rows.append(record)
    return pd.DataFrame(rows)


def _row(criterion, experiment, measure, value, threshold, passed, runs=0):
    return {
        "criterion": criterion,
        "experiment": experiment,
        "measure": measure,
        "value": float(value),
        "runs": int(runs),
        "threshold": threshold,
        "passed": "not run" if passed is None else bool(passed),
    }


def _majority(results, experiment, criterion):
    runs = results[results["experiment"] == experiment]
    if runs.empty:
        return _row(criterion, experiment, SEEDS_PASSING, math.nan, "", None)
    needed = math.ceil(2 * len(runs) / 3)
    passed = int(runs["passed"].fillna(False).astype(bool).sum())
    return _row(criterion, experiment, SEEDS_PASSING, passed, f">= {needed} seeds", passed >= needed, len(runs))


def _mean(results, experiment, column="mse"):
    runs = results[results["experiment"] == experiment]
    return float(runs[column].mean()) if not runs.empty and column in runs else math.nan


def _runs(results, experiment):
    return int((results["experiment"] == experiment).sum()) if not results.empty else 0


def acceptance_table(results, pickplace):
    rows = [
        _majority(results, "omniglot-base", "desk-scale omniglot"),
    ]

    base, jitter = _mean(results, "omniglot-base"), _mean(results, "omniglot-jitter")
    ok = None if math.isnan(base) or math.isnan(jitter) else jitter <= 2 * base
    rows.append(_row("jitter robustness", "omniglot-jitter", "mean mse", jitter, f"<= 2 x {base:.5g}", ok,
                     _runs(results, "omniglot-jitter")))

    rows.append(_majority(results, "omniglot-green", "green-marker cue"))
    rows.append(_majority(results, "shapes-full", "shapes generalization"))

    full, truncated = _mean(results, "shapes-full"), _mean(results, "shapes-truncated")
    ok = None if math.isnan(full) or math.isnan(truncated) else truncated > full
    rows.append(_row("overfitting direction", "shapes-truncated", "mean mse", truncated, f"> {full:.5g}", ok,
                     _runs(results, "shapes-truncated")))

    pp = pickplace[pickplace["experiment"] == "shapes-full"] if not pickplace.empty else pickplace
    if pp.empty:
        rows.append(_row("pick-place mock", "shapes-full", "mean successes", math.nan, "", None))
    else:
        needed = pp["trials"] * 17 / 20
        rows.append(_row("pick-place mock", "shapes-full", "mean successes", pp["successes"].mean(),
                         f">= {needed.iloc[0]:g} of {int(pp['trials'].iloc[0])}",
                         bool((pp["successes"] >= needed).all()), len(pp)))

    hotspot = _mean(results, "omniglot-base", "hotspot_rate")
    rows.append(_row("attention hot spot", "omniglot-base", "mean hot-spot rate", hotspot, ">= 0.9",
                     None if math.isnan(hotspot) else hotspot >= 0.9, _runs(results, "omniglot-base")))
    return pd.DataFrame(rows)


def _display_value(row):
    if math.isnan(row["value"]):
        return ""
    if row["measure"] == SEEDS_PASSING:
        return f"{int(row['value'])}/{row['runs']} seeds pass"
    return f"{row['value']:.5g}"


def display_table(acceptance):
    """Acceptance rows with the value column rendered as text for the HTML report."""
    shown = acceptance.copy()
    shown["value"] = [_display_value(row) for _, row in acceptance.iterrows()]
    return shown


def mse_figure(results):
    fig = go.Figure()
    if results.empty:
        return fig
    for seed, runs in results.groupby("seed"):
        fig.add_trace(go.Bar(
            name=f"seed {seed}",
            x=runs["experiment"],
            y=runs["mse"],
            hovertemplate="<b>Experiment:</b> %{x}<br><b>MSE:</b> %{y:.5f}<extra></extra>",
        ))
    refs = results.drop_duplicates("experiment").dropna(subset=["reference_mse"])
    fig.add_trace(go.Scatter(name="full-scale reference", x=refs["experiment"], y=refs["reference_mse"],
                             mode="markers", marker={"symbol": "diamond", "size": 12}))
    fig.update_layout(title="Test mean squared error per experiment", barmode="group",
                      xaxis_title="Experiment", yaxis_title="MSE (normalized coordinates)",
                      yaxis_type="log", hovermode="closest", height=600)
    return fig


def aggregate_reports(result_files, pickplace_files, out_results, out_acceptance, out_html):
    results = load_results(result_files)
    pickplace = load_pickplace(pickplace_files)
    results.to_csv(out_results, sep="\t", index=False)
    acceptance = acceptance_table(results, pickplace)
    acceptance.to_csv(out_acceptance, sep="\t", index=False)
    write_html_report(
        [mse_figure(results)],
        "cuehunt Reproduction Summary",
        "Desk-scale reproduction of the one-shot localization experiments across seeds.",
        out_html,
        tables=[display_table(acceptance)],
    )


if __name__ == "__main__":
    aggregate_reports(
        snakemake.input.results,
        snakemake.input.pickplace,
        snakemake.output.results,
        snakemake.output.acceptance,
        snakemake.output.html,
    )
