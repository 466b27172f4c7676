"""Run reports: render figures from a session's CSV logs.

Reads the guidance and distillation CSVs plus command manifests written by
the service and drops PNG figures next to them under ``<session>/report/``.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _read_guidance_csv(path: Path):
    steps = defaultdict(list)
    with open(path, "r", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            steps[int(row["step"])].append(
                (float(row["E_after"]), float(row["in_box_mass"]))
            )
    ordered = sorted(steps.items(), reverse=True)  # sampling runs t = T..1
    xs = list(range(len(ordered)))
    energy = [sum(e for e, _ in rows) for _, rows in ordered]
    mass = [sum(m for _, m in rows) / len(rows) for _, rows in ordered]
    return xs, energy, mass


def _plot_guidance(gdir: Path, out_dir: Path) -> list[Path]:
    written = []
    for csv_path in sorted(gdir.glob("cmd_*.guidance.csv")):
        stem = csv_path.name.replace(".guidance.csv", "")
        xs, energy, mass = _read_guidance_csv(csv_path)
        baseline = gdir / f"{stem}.baseline.csv"
        fig, (ax_e, ax_m) = plt.subplots(1, 2, figsize=(9, 3.4))
        ax_e.plot(xs, energy, label="guided")
        ax_m.plot(xs, mass, label="guided")
        if baseline.exists():
            bx, be, bm = _read_guidance_csv(baseline)
            ax_e.plot(bx, be, "--", label="baseline")
            ax_m.plot(bx, bm, "--", label="baseline")
        ax_e.set_xlabel("denoising step")
        ax_e.set_ylabel("total energy")
        ax_e.set_yscale("log")
        ax_e.legend()
        ax_m.set_xlabel("denoising step")
        ax_m.set_ylabel("mean in-box mass")
        ax_m.axhline(0.9, color="gray", lw=0.8, ls=":")
        ax_m.set_ylim(0, 1.02)
        ax_m.legend()
        fig.tight_layout()
        out = out_dir / f"{stem}.guidance.png"
        fig.savefig(out, dpi=110)
        plt.close(fig)
        written.append(out)
    return written


def _plot_loss(ddir: Path, out_dir: Path) -> list[Path]:
    written = []
    for csv_path in sorted(ddir.glob("cmd_*.loss.csv")):
        steps, losses = [], []
        with open(csv_path, "r", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                steps.append(int(row["step"]))
                losses.append(float(row["L_feat"]))
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.semilogy(steps, losses)
        ax.set_xlabel("step")
        ax.set_ylabel("feature loss")
        fig.tight_layout()
        out = out_dir / csv_path.name.replace(".loss.csv", ".loss.png")
        fig.savefig(out, dpi=110)
        plt.close(fig)
        written.append(out)
    return written


def _plot_threshold_traces(mdir: Path, out_dir: Path) -> list[Path]:
    written = []
    for mpath in sorted(mdir.glob("cmd_*.json")):
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        trace = manifest.get("threshold_trace")
        if not trace:
            continue
        thetas = [t for t, _ in trace]
        scores = [s for _, s in trace]
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.plot(thetas, scores, marker="o")
        chosen = manifest.get("chosen_threshold")
        if chosen is not None:
            ax.axvline(chosen, color="tab:red", lw=0.9, ls="--",
                       label=f"chosen {chosen:.3f}")
            ax.legend()
        ax.invert_xaxis()
        ax.set_xlabel("threshold")
        ax.set_ylabel("margin score")
        fig.tight_layout()
        out = out_dir / mpath.name.replace(".json", ".threshold.png")
        fig.savefig(out, dpi=110)
        plt.close(fig)
        written.append(out)
    return written


def write_report(session_dir) -> list[Path]:
    """Render every figure the session's logs support; returns written paths."""
    session_dir = Path(session_dir)
    out_dir = session_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if (session_dir / "guidance").exists():
        written += _plot_guidance(session_dir / "guidance", out_dir)
    if (session_dir / "distill").exists():
        written += _plot_loss(session_dir / "distill", out_dir)
    if (session_dir / "manifests").exists():
        written += _plot_threshold_traces(session_dir / "manifests", out_dir)
    return written
