"""
Curve plots for evaluation reports
"""
import os
from typing import Dict, List

import matplotlib
matplotlib.use('Agg')  # Non-interactive backend
import matplotlib.pyplot as plt
import pandas as pd

TITLES = {
    "c_ap_vs_k": ("Conditioned mAP vs detection limit", "detection limit k"),
    "c_ap_vs_n": ("Conditioned mAP vs queries per class", "queries per class n"),
}


def plot_curve(frame: pd.DataFrame, x: str, y: str, title: str, xlabel: str, path: str, dpi: int = 100) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        ax.plot(frame[x], 100.0 * frame[y], marker="o", color="#1f77b4")
        ax.set_xscale("log")
        ax.set_xticks(frame[x])
        ax.set_xticklabels([str(v) for v in frame[x]])
        ax.set_title(title, fontsize=12, fontweight='bold')
        ax.set_xlabel(xlabel)
        ax.set_ylabel("c-mAP (%)")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="png", dpi=dpi)
    finally:
        plt.close(fig)
    return path


def plot_curves(frames: Dict[str, pd.DataFrame], out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, frame in frames.items():
        x = frame.columns[0]
        title, xlabel = TITLES.get(name, (name, x))
        paths.append(plot_curve(frame, x, "c_map", title, xlabel, os.path.join(out_dir, f"{name}.png")))
    return paths
