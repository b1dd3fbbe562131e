"""Result tables with best and second-best marks, and beta-ablation summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .metrics import FairnessReport, MetricStat, aggregate_runs, aggregate_values

# (key, header, scaled to percent, higher is better)
COLUMNS = [
    ("avg", "Avg%", True, True),
    ("delta", "Delta%", True, False),
    ("ser", "SER", False, False),
    ("std", "STD%", True, False),
]


@dataclass
class Evaluation:
    """One evaluated run: sample-mean Dice plus the fairness report."""

    method: str
    dataset: str
    attribute: str
    avg: float
    report: FairnessReport
    macro_avg: Optional[float] = None


@dataclass
class TableRow:
    method: str
    cells: dict[str, MetricStat]
    n_runs: int
    marks: dict[str, str] = field(default_factory=dict)  # "best" / "second"


@dataclass
class ExperimentTable:
    dataset: str
    attribute: str
    rows: list[TableRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        header = ["method", "n_runs"]
        for key, *_ in COLUMNS:
            header += [f"{key}_mean", f"{key}_std", f"{key}_mark"]
        writer.writerow(header)
        for row in self.rows:
            line = [row.method, row.n_runs]
            for key, *_ in COLUMNS:
                c = row.cells[key]
                line += [repr(c.mean), repr(c.std), row.marks.get(key, "")]
            writer.writerow(line)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, dataset: str = "", attribute: str = "") -> "ExperimentTable":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            cells, marks = {}, {}
            for key, *_ in COLUMNS:
                mean, std = float(rec[f"{key}_mean"]), float(rec[f"{key}_std"])
                cells[key] = MetricStat(mean, std, infinite=math.isinf(mean))
                if rec[f"{key}_mark"]:
                    marks[key] = rec[f"{key}_mark"]
            rows.append(TableRow(rec["method"], cells, int(rec["n_runs"]), marks))
        return cls(dataset, attribute, rows)

    def formatted_cells(self) -> list[list[str]]:
        out = []
        for row in self.rows:
            line = [row.method]
            for key, _, scaled, _ in COLUMNS:
                line.append(format_cell(row.cells[key], scaled))
            out.append(line)
        return out

    def to_text(self) -> str:
        headers = ["Method"] + [h for _, h, _, _ in COLUMNS]
        body = []
        for row, cells in zip(self.rows, self.formatted_cells()):
            marked = [cells[0]]
            for (key, *_), cell in zip(COLUMNS, cells[1:]):
                tag = {"best": " [1]", "second": " [2]"}.get(row.marks.get(key, ""), "")
                marked.append(cell + tag)
            body.append(marked)
        widths = [max(len(r[i]) for r in [headers] + body) for i in range(len(headers))]
        lines = [f"{self.dataset} / {self.attribute}  (Mean_Std; [1] best, [2] second)"]
        lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
        lines.append("  ".join("-" * w for w in widths))
        for r in body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        return "\n".join(lines) + "\n"

    def to_markdown(self) -> str:
        headers = ["Method"] + [h for _, h, _, _ in COLUMNS]
        lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
        for row, cells in zip(self.rows, self.formatted_cells()):
            out = [cells[0]]
            for (key, *_), cell in zip(COLUMNS, cells[1:]):
                mark = row.marks.get(key)
                out.append(f"**{cell}**" if mark == "best" else f"_{cell}_" if mark == "second" else cell)
            lines.append("| " + " | ".join(out) + " |")
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "table.csv").write_text(self.to_csv())
        (directory / "table.txt").write_text(self.to_text())
        (directory / "table.md").write_text(self.to_markdown())


def format_cell(stat: MetricStat, scaled: bool) -> str:
    if stat.infinite:
        return "inf"
    f = 100.0 if scaled else 1.0
    return f"{stat.mean * f:.2f}_{{{stat.std * f:.2f}}}"


def _aggregate(evals: Sequence[Evaluation]) -> dict[str, MetricStat]:
    agg = aggregate_runs([e.report for e in evals])
    return {"avg": aggregate_values([e.avg for e in evals]), "delta": agg["delta"],
            "ser": agg["ser"], "std": agg["std"]}


def mark_best(rows: list[TableRow]) -> None:
    """Best/second per column; ties go to the earlier row."""
    for key, _, _, higher in COLUMNS:
        scored = [(i, r.cells[key].mean) for i, r in enumerate(rows) if not math.isnan(r.cells[key].mean)]
        scored.sort(key=lambda t: (-t[1] if higher else t[1], t[0]))
        for rank, (i, _) in enumerate(scored[:2]):
            rows[i].marks[key] = "best" if rank == 0 else "second"


def build_table(evaluations: Mapping[str, Sequence[Evaluation]]) -> ExperimentTable:
    """One row per method (in mapping order), aggregated over its runs."""
    if not evaluations:
        raise ValueError("no evaluations")
    pairs = {(e.dataset, e.attribute) for evals in evaluations.values() for e in evals}
    if len(pairs) != 1:
        raise ValueError(f"evaluations mix datasets/attributes: {sorted(pairs)}")
    dataset, attribute = pairs.pop()
    rows = []
    for method, evals in evaluations.items():
        if not evals:
            raise ValueError(f"method {method!r} has no runs")
        rows.append(TableRow(method, _aggregate(evals), len(evals)))
    if len(rows) > 1:
        mark_best(rows)
    return ExperimentTable(dataset, attribute, rows)


@dataclass
class SweepRow:
    beta: float
    cells: dict[str, MetricStat]
    probe: Optional[MetricStat] = None


def beta_sweep_summary(runs: Mapping[float, Sequence[Evaluation]],
                       probes: Optional[Mapping[float, Sequence[float]]] = None) -> list[SweepRow]:
    rows = []
    for beta in sorted(runs):
        probe = None
        if probes and probes.get(beta):
            probe = aggregate_values(probes[beta])
        rows.append(SweepRow(float(beta), _aggregate(runs[beta]), probe))
    return rows


def sweep_to_text(rows: Sequence[SweepRow]) -> str:
    has_probe = any(r.probe is not None for r in rows)
    headers = ["beta"] + [h for _, h, _, _ in COLUMNS] + (["Probe%"] if has_probe else [])
    body = []
    for r in rows:
        line = [f"{r.beta:g}"] + [format_cell(r.cells[k], s) for k, _, s, _ in COLUMNS]
        if has_probe:
            line.append(format_cell(r.probe, True) if r.probe else "-")
        body.append(line)
    widths = [max(len(x[i]) for x in [headers] + body) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(line, widths)) for line in body]
    return "\n".join(lines) + "\n"


def sweep_to_dict(rows: Sequence[SweepRow]) -> list[dict]:
    out = []
    for r in rows:
        d = {"beta": r.beta}
        for k, c in r.cells.items():
            d[k] = {"mean": c.mean, "std": c.std, "infinite": c.infinite}
        if r.probe is not None:
            d["probe_accuracy"] = {"mean": r.probe.mean, "std": r.probe.std}
        out.append(d)
    return out
