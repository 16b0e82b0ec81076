"""Serialization of attack artifacts, reports and analysis tables.

Perturbation artifacts and reports are JSON documents; all floats
round-trip exactly through Python's repr-based encoder, so re-evaluating a
persisted perturbation reproduces the stored metrics bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .attack import IterationRecord
from .container import atomic_write_text
from .exceptions import FormatError, VersionError
from .metrics import DistanceMatrix, FoolingReport, HoppingTrace

ARTIFACT_KIND = "classfool-perturbation"
REPORT_KIND = "classfool-report"
FORMAT_VERSION = 1


def report_to_dict(report: FoolingReport) -> dict:
    return {
        "fooling_test": report.fooling_test,
        "leakage": report.leakage,
        "per_class_leakage": {str(c): v for c, v in report.per_class_leakage.items()},
        "train_fooling": report.train_fooling,
        "ratio_met": report.ratio_met,
        "rho_linf": report.rho_linf,
        "rho_l2": report.rho_l2,
        "config": report.config,
        "metadata": report.metadata,
        "history": [asdict(r) for r in report.history],
    }


def report_from_dict(doc: dict) -> FoolingReport:
    return FoolingReport(
        fooling_test=doc["fooling_test"],
        leakage=doc["leakage"],
        per_class_leakage={int(c): v for c, v in doc["per_class_leakage"].items()},
        train_fooling=doc["train_fooling"],
        ratio_met=doc["ratio_met"],
        rho_linf=doc["rho_linf"],
        rho_l2=doc["rho_l2"],
        history=[IterationRecord(**r) for r in doc["history"]],
        config=doc["config"],
        metadata=doc["metadata"],
    )


def save_artifact(path: str, perturbation: np.ndarray, report: FoolingReport) -> None:
    doc = {
        "kind": ARTIFACT_KIND,
        "version": FORMAT_VERSION,
        "perturbation": [float(v) for v in np.asarray(perturbation, dtype=np.float64)],
        "report": report_to_dict(report),
    }
    atomic_write_text(path, json.dumps(doc, indent=1, allow_nan=False))


def _load_doc(path: str, kind: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not valid JSON: {e}") from e
    if doc.get("kind") != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {doc.get('kind')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionError(
            f"{path}: version {doc.get('version')!r} not supported "
            f"(expected {FORMAT_VERSION})")
    return doc


def load_artifact(path: str) -> tuple[np.ndarray, FoolingReport]:
    doc = _load_doc(path, ARTIFACT_KIND)
    rho = np.asarray(doc["perturbation"], dtype=np.float64)
    return rho, report_from_dict(doc["report"])


def save_report(path: str, report: FoolingReport) -> None:
    doc = {"kind": REPORT_KIND, "version": FORMAT_VERSION,
           "report": report_to_dict(report)}
    atomic_write_text(path, json.dumps(doc, indent=1, allow_nan=False))


def load_report(path: str) -> FoolingReport:
    return report_from_dict(_load_doc(path, REPORT_KIND)["report"])


def summarize(reports, fmt: str = "table") -> str:
    """Render one row per transformation; the machine form is lossless."""
    reports = list(reports)
    if fmt == "machine":
        return json.dumps({"kind": REPORT_KIND, "version": FORMAT_VERSION,
                           "reports": [report_to_dict(r) for r in reports]},
                          allow_nan=False)
    if fmt != "table":
        raise FormatError(f"unknown summary format {fmt!r}")
    header = f"{'transformation':<20} {'fooling%':>9} {'leakage%':>9} " \
             f"{'train%':>7} {'|rho|inf':>9} {'|rho|2':>10} {'iters':>6} met"
    lines = [header, "-" * len(header)]
    for r in reports:
        src = r.metadata.get("source_label", "?")
        tgt = r.metadata.get("target_label", "?")
        name = f"{src} -> {tgt}"
        lines.append(
            f"{name:<20} {r.fooling_test:>9.2f} {r.leakage:>9.2f} "
            f"{r.train_fooling:>7.2f} {r.rho_linf:>9.3f} {r.rho_l2:>10.3f} "
            f"{len(r.history):>6d} {'yes' if r.ratio_met else 'NO'}")
    return "\n".join(lines)


def parse_machine_summary(text: str) -> list[FoolingReport]:
    doc = json.loads(text)
    if doc.get("kind") != REPORT_KIND or doc.get("version") != FORMAT_VERSION:
        raise FormatError("not a machine-readable summary document")
    return [report_from_dict(r) for r in doc["reports"]]


def distance_matrix_to_csv(dm: DistanceMatrix) -> str:
    """Off-diagonal cells as `source,target,mean_l2,std_l2,repeats,complete`."""
    lines = ["source,target,mean_l2,std_l2,repeats,complete"]
    for i, a in enumerate(dm.classes):
        for j, b in enumerate(dm.classes):
            if i == j:
                continue
            lines.append(f"{a},{b},{float(dm.mean[i, j])!r},"
                         f"{float(dm.std[i, j])!r},{dm.repeats},"
                         f"{str(bool(dm.complete[i, j])).lower()}")
    return "\n".join(lines) + "\n"


def hopping_to_text(trace: HoppingTrace) -> str:
    lines = ["iteration,label"]
    lines.extend(f"{t},{label}" for t, label in trace.entries)
    return "\n".join(lines) + "\n"
