"""Evaluation report: JSON summary, CSV table, and rendered figures.

The report JSON carries exactly the keys in REPORT_KEYS. The CSV is a flat
metric/value table for spreadsheets, and the figures (per-object fit PSNR,
per-channel latent statistics) are written as PNGs next to it.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

VAE_PSNR_THRESHOLD = 26.0

REPORT_KEYS = (
    "fit_psnr",
    "fit_psnr_mean",
    "vae_psnr",
    "vae_psnr_pass",
    "latent_mu",
    "latent_sigma",
    "sample_hash",
)


class ReportError(ValueError):
    pass


def build_report(fit_psnr, vae_psnr, latent_stats, sample_hash) -> dict:
    """Assemble the evaluation summary.

    fit_psnr: {object_id: psnr}; latent_stats has .mu/.sigma arrays.
    """
    if not fit_psnr:
        raise ReportError("no fitting results")
    mean = sum(fit_psnr.values()) / len(fit_psnr)
    return {
        "fit_psnr": {k: round(float(v), 4) for k, v in fit_psnr.items()},
        "fit_psnr_mean": round(float(mean), 4),
        "vae_psnr": round(float(vae_psnr), 4),
        "vae_psnr_pass": bool(vae_psnr >= VAE_PSNR_THRESHOLD),
        "latent_mu": [round(float(m), 8) for m in latent_stats.mu],
        "latent_sigma": [round(float(s), 8) for s in latent_stats.sigma],
        "sample_hash": sample_hash,
    }


def validate_report(report):
    keys = tuple(sorted(report))
    if keys != tuple(sorted(REPORT_KEYS)):
        raise ReportError(
            f"report keys {keys} != expected {tuple(sorted(REPORT_KEYS))}")


def write_report(report, out_dir):
    """Write report.json, report.csv, and the figure PNGs. Returns paths."""
    validate_report(report)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for obj, v in report["fit_psnr"].items():
            writer.writerow([f"fit_psnr.{obj}", v])
        writer.writerow(["fit_psnr_mean", report["fit_psnr_mean"]])
        writer.writerow(["vae_psnr", report["vae_psnr"]])
        writer.writerow(["vae_psnr_pass", report["vae_psnr_pass"]])
        writer.writerow(["sample_hash", report["sample_hash"]])

    figures = [
        _plot_fit_psnr(report, out_dir / "fit_psnr.png"),
        _plot_latent_stats(report, out_dir / "latent_stats.png"),
    ]
    return {"json": json_path, "csv": csv_path, "figures": figures}


def _plot_fit_psnr(report, path):
    names = list(report["fit_psnr"])
    vals = [report["fit_psnr"][n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names)), 3))
    ax.bar(range(len(names)), vals, color="tab:blue")
    ax.axhline(report["fit_psnr_mean"], color="tab:red", ls="--",
               label=f"mean {report['fit_psnr_mean']:.2f} dB")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("PSNR (dB)")
    ax.set_title("Per-object fit quality")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _plot_latent_stats(report, path):
    mu = report["latent_mu"]
    sigma = report["latent_sigma"]
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    axes[0].bar(range(len(mu)), mu, color="tab:green")
    axes[0].set_title("latent channel mean")
    axes[0].set_xlabel("channel")
    axes[1].bar(range(len(sigma)), sigma, color="tab:orange")
    axes[1].axhline(1.0, color="k", ls=":")
    axes[1].set_title("latent channel std")
    axes[1].set_xlabel("channel")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
