"""
Report and detection export utilities
"""
import csv
import json
import os
from io import StringIO
from typing import Dict, List

import pandas as pd

from decola.ml.decoder import DetectionSet
from decola.schemas import EvalReport


def report_json(report: EvalReport) -> str:
    return json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _fmt(value) -> str:
    return "-" if value is None else f"{100.0 * value:.1f}"


def report_table(report: EvalReport) -> str:
    """Plain-text summary: headline numbers, then per-class AP"""
    lines = [
        f"mode: {report.mode}  IoU: {','.join(str(t) for t in report.iou_thresholds)}  "
        f"n: {report.budget_n}  k: {report.detection_limit}",
        f"mAP {_fmt(report.map)}  base {_fmt(report.group_ap.get('base'))}  novel {_fmt(report.group_ap.get('novel'))}",
    ]
    if report.c_ar_first is not None or report.c_ar_second is not None:
        lines.append(f"c-AR first stage {_fmt(report.c_ar_first)}  second stage {_fmt(report.c_ar_second)}")
    if report.c_map_at_k:
        frame = pd.DataFrame([{f"k={k}": _fmt(v) for k, v in report.c_map_at_k.items()}], index=["c-mAP"])
        lines += ["", frame.to_string()]
    if report.c_map_at_n:
        frame = pd.DataFrame([{f"n={n}": _fmt(v) for n, v in report.c_map_at_n.items()}], index=["c-mAP"])
        lines += ["", frame.to_string()]
    if report.pseudo_label_quality:
        quality = report.pseudo_label_quality
        lines += ["", f"pseudo-labels matched at IoU {quality['iou_threshold']}: {_fmt(quality['fraction_matched'])}%"]
    per_class = pd.DataFrame(
        [{"class": name, "AP": _fmt(ap)} for name, ap in report.per_class_ap.items()]
    )
    if not per_class.empty:
        lines += ["", per_class.to_string(index=False)]
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, run_dir: str) -> Dict[str, str]:
    os.makedirs(run_dir, exist_ok=True)
    paths = {"json": os.path.join(run_dir, "report.json"), "text": os.path.join(run_dir, "report.txt")}
    with open(paths["json"], "w") as f:
        f.write(report_json(report))
    with open(paths["text"], "w") as f:
        f.write(report_table(report))
    return paths


def load_report(run_dir: str) -> EvalReport:
    with open(os.path.join(run_dir, "report.json")) as f:
        return EvalReport.model_validate_json(f.read())


def curve_frames(report: EvalReport) -> Dict[str, pd.DataFrame]:
    frames = {}
    if report.c_map_at_k:
        frames["c_ap_vs_k"] = pd.DataFrame(
            {"k": [int(k) for k in report.c_map_at_k], "c_map": list(report.c_map_at_k.values())}
        ).sort_values("k")
    if report.c_map_at_n:
        frames["c_ap_vs_n"] = pd.DataFrame(
            {"n": [int(n) for n in report.c_map_at_n], "c_map": list(report.c_map_at_n.values())}
        ).sort_values("n")
    return frames


def write_curves(report: EvalReport, run_dir: str) -> List[str]:
    """CSV curve data under `<run_dir>/curves/`"""
    curves_dir = os.path.join(run_dir, "curves")
    os.makedirs(curves_dir, exist_ok=True)
    paths = []
    for name, frame in curve_frames(report).items():
        path = os.path.join(curves_dir, f"{name}.csv")
        frame.to_csv(path, index=False, float_format="%.6f")
        paths.append(path)
    return paths


def export_detections_csv(detections: DetectionSet) -> str:
    """Export detections to CSV format (pixel XYXY boxes)"""
    output = StringIO()
    writer = csv.writer(output)
    writer.writerow(["rank", "class", "score", "x1", "y1", "x2", "y2"])
    height, width = detections.image_size
    for rank, record in enumerate(detections.to_records()):
        x1, y1, x2, y2 = record["box"]
        writer.writerow([
            rank,
            record["class"],
            f"{record['score']:.6f}",
            f"{x1 * width:.2f}",
            f"{y1 * height:.2f}",
            f"{x2 * width:.2f}",
            f"{y2 * height:.2f}",
        ])
    return output.getvalue()
