"""Spectra of weight updates and their normalized rank.

For a layer with frozen weight ``w0`` and fine-tuned weight ``w'`` the update is
``w' - w0``. Its normalized rank counts the update's singular values at or above an absolute
cutoff (1e-2 by default) and divides by rank(w0), where rank(w0) uses a cutoff relative to
the largest singular value of ``w0``.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from hyperlab.adapters import HYPER, AdapterKind, Method, rank_bound
from hyperlab.model import Model, module_name
from hyperlab.numeric import EXACT_RANK_RTOL, Matrix, rank_of_spectrum, svd_values
from hyperlab.utils import DimensionError, StructuralError, format_float

DEFAULT_THRESHOLD = 1e-2
TOP_K = 8
CSV_COLUMNS = ("layer", "n", "m", "rank_w0", "count", "r_hat")


class RankBoundWarning(UserWarning):
    pass


class ZeroRankWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LayerRecord:
    layer: str
    n: int
    m: int
    rank_w0: int
    count: int
    r_hat: float
    top_sigmas: tuple[float, ...]
    bound: int
    kind: str = ""

    @property
    def module(self) -> str:
        return module_name(self.layer)

    @property
    def within_bound(self) -> bool:
        return self.count <= self.bound


@dataclass(frozen=True)
class RankReport:
    threshold: float
    records: tuple[LayerRecord, ...]
    rank_rtol: float = EXACT_RANK_RTOL
    skipped: tuple[str, ...] = field(default=())

    def __iter__(self) -> Any:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def bound_violations(self) -> list[LayerRecord]:
        return [r for r in self.records if r.kind == str(HYPER) and not r.within_bound]

    def to_json(self) -> dict[str, Any]:
        return {
            "threshold": self.threshold,
            "rank_w0_rtol": self.rank_rtol,
            "skipped": list(self.skipped),
            "layers": [{**asdict(r), "top_sigmas": list(r.top_sigmas)} for r in self.records],
        }


def analyze_layer(
    w0: Matrix,
    w_prime: Matrix,
    threshold: float = DEFAULT_THRESHOLD,
    *,
    name: str = "",
    kind: AdapterKind | None = None,
    top_k: int = TOP_K,
) -> LayerRecord | None:
    """Normalized rank of ``w_prime - w0``; None (with a warning) when ``w0`` has rank zero.

    The count is cross-checked against min(2 rank(w0), n, m), the bound every diagonal
    scaling update obeys; a violation on such a layer warns and shows in the record.
    """
    if w0.shape != w_prime.shape:
        raise DimensionError(f"cannot compare {w0.shape} with {w_prime.shape}")
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    n, m = w0.shape
    rank_w0 = rank_of_spectrum(svd_values(w0))
    if rank_w0 == 0:
        warnings.warn(f"skipping {name or 'layer'}: frozen weight has rank 0", ZeroRankWarning)
        return None
    sigmas = svd_values(w_prime - w0).values
    count = int(np.count_nonzero(sigmas >= threshold))
    record = LayerRecord(
        layer=name,
        n=n,
        m=m,
        rank_w0=rank_w0,
        count=count,
        r_hat=count / rank_w0,
        top_sigmas=tuple(float(s) for s in sigmas[:top_k]),
        bound=rank_bound(rank_w0, n, m),
        kind="" if kind is None else str(kind),
    )
    if kind is not None and kind.method is Method.HYPER and not record.within_bound:
        warnings.warn(
            f"{name or 'layer'}: update has {count} singular values >= {threshold}, "
            f"above the bound {record.bound}",
            RankBoundWarning,
        )
    return record


def analyze_model(
    before: Model, after: Model, threshold: float = DEFAULT_THRESHOLD, *, top_k: int = TOP_K
) -> RankReport:
    """One record per linear layer in model order; frozen layers come out with count 0."""
    if before.arch != after.arch or list(before.layers) != list(after.layers):
        raise StructuralError("cannot analyze models with different architectures")
    records = []
    skipped = []
    for name, layer in after.layers.items():
        record = analyze_layer(
            before.layers[name].effective_weight(),
            layer.effective_weight(),
            threshold,
            name=name,
            kind=layer.kind,
            top_k=top_k,
        )
        if record is None:
            skipped.append(name)
        else:
            records.append(record)
    return RankReport(threshold, tuple(records), skipped=tuple(skipped))


def mean_r_hat(report: RankReport) -> float:
    """Mean normalized rank over adapted (non-frozen) layers; 0.0 if there are none."""
    values = [r.r_hat for r in report.records if r.kind and r.kind != "frozen"]
    return float(np.mean(values)) if values else 0.0


# ==============================
# output
# ==============================


def write_report_json(report: RankReport, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def write_report_csv(report: RankReport, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in report.records:
            writer.writerow([r.layer, r.n, r.m, r.rank_w0, r.count, format_float(r.r_hat)])


def module_means(report: RankReport) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for r in report.records:
        groups.setdefault(r.module, []).append(r.r_hat)
    return {module: float(np.mean(values)) for module, values in groups.items()}


def write_report_svg(reports: Mapping[str, RankReport], path: Path) -> None:
    """Bar chart of mean normalized rank per module name, one bar series per report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    means = {label: module_means(report) for label, report in reports.items()}
    modules: list[str] = []
    for per_module in means.values():
        modules.extend(m for m in per_module if m not in modules)

    x = np.arange(len(modules))
    width = 0.8 / max(1, len(means))
    with plt.rc_context({"svg.hashsalt": "hyperlab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(modules)), 4.0))
        for i, (label, per_module) in enumerate(means.items()):
            heights = [per_module.get(m, 0.0) for m in modules]
            ax.bar(x + (i - (len(means) - 1) / 2) * width, heights, width, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels(modules)
        ax.set_ylabel("normalized rank")
        ax.set_ylim(0.0, max([1.05, *(max(v.values(), default=0.0) for v in means.values())]))
        ax.axhline(1.0, color="grey", linewidth=0.8, linestyle="--")
        if means:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
