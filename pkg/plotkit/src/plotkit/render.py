"""Turn experiment CSVs into comparison figures.

Input files follow the experiment runner's schema
(kind, class, N, replica, seed, quantity, value, theory_ref); one figure kind
exists per experiment kind.  Each figure draws one mean-over-replicas line per
predictor class, dashed horizontal asymptotes wherever the records carry
theoretical reference values, and (for spectral-radius panels) the stability
boundary at 1.

SVG output is byte-stable: a fixed hash salt, no date metadata, and text kept
as text, so re-rendering the same CSV reproduces the identical file.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["FigureSpec", "RenderResult", "SchemaError", "NoDataError", "FIGURE_KINDS", "render"]

REQUIRED_COLUMNS = ("kind", "class", "N", "replica", "seed", "quantity", "value", "theory_ref")

CLASS_LABELS = {
    "single_step": "single-step",
    "multi_step": "multi-step",
    "intermediate": "intermediate",
}
CLASS_COLORS = {
    "single_step": "tab:blue",
    "multi_step": "tab:red",
    "intermediate": "tab:green",
}


@dataclass(frozen=True)
class _KindLayout:
    quantity: str
    x_label: str
    y_label: str
    reference_line: float | None = None


FIGURE_KINDS: dict[str, _KindLayout] = {
    "wellspec_convergence": _KindLayout(
        "scaled_excess_loss", "training samples N", "N x excess prediction loss"
    ),
    "misspec_convergence": _KindLayout("loss", "training samples N", "prediction loss"),
    "bias_vs_horizon": _KindLayout("bias", "horizon H", "irreducible loss"),
    "lqr_wellspec": _KindLayout(
        "cost_gap", "training samples N", "|clipped cost - exact-model cost|"
    ),
    "spectral_radius_misspec": _KindLayout(
        "spectral_radius", "training samples N", "closed-loop spectral radius",
        reference_line=1.0,
    ),
    "nonlinear": _KindLayout("loss", "horizon H", "evaluation loss"),
}


class SchemaError(ValueError):
    """The CSV does not carry the experiment schema."""


class NoDataError(ValueError):
    """No rows survive the figure kind's quantity filter."""


@dataclass(frozen=True)
class FigureSpec:
    csv_path: str
    kind: str
    out_path: str
    x_scale: str = "linear"
    y_scale: str = "linear"

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}")
        if self.x_scale not in ("linear", "log") or self.y_scale not in ("linear", "log"):
            raise SchemaError("axis scales must be 'linear' or 'log'")


@dataclass(frozen=True)
class RenderResult:
    out_path: str
    n_series: int
    n_asymptotes: int
    classes: tuple[str, ...]


def _read_rows(path: str) -> list[dict]:
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        for column in REQUIRED_COLUMNS:
            if column not in header:
                raise SchemaError(f"missing required column {column!r} in {path}")
        return list(reader)


def render(spec: FigureSpec) -> RenderResult:
    """Render one figure; returns what was drawn for downstream checks."""
    layout = FIGURE_KINDS[spec.kind]
    rows = _read_rows(spec.csv_path)

    series: dict[str, dict[int, list[float]]] = {}
    refs: dict[str, float] = {}
    for row in rows:
        if row["quantity"] != layout.quantity:
            continue
        klass = row["class"]
        try:
            x = int(row["N"])
            value = float(row["value"])
        except ValueError as exc:
            raise SchemaError(f"malformed numeric cell in {spec.csv_path}: {exc}") from exc
        series.setdefault(klass, {}).setdefault(x, []).append(value)
        if row["theory_ref"]:
            refs[klass] = float(row["theory_ref"])
    if not series:
        raise NoDataError(
            f"no rows with quantity {layout.quantity!r} for kind {spec.kind!r} in {spec.csv_path}"
        )

    with plt.rc_context({"svg.hashsalt": "plotkit", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        classes = sorted(series)
        n_asymptotes = 0
        for klass in classes:
            xs = np.array(sorted(series[klass]))
            means = np.array([np.mean(series[klass][x]) for x in xs])
            ax.plot(xs, means, marker="o",
                    color=CLASS_COLORS.get(klass),
                    label=CLASS_LABELS.get(klass, klass))
            if klass in refs:
                ax.axhline(refs[klass], linestyle="--", linewidth=1.0,
                           color=CLASS_COLORS.get(klass))
                n_asymptotes += 1
        if layout.reference_line is not None:
            ax.axhline(layout.reference_line, linestyle="--", linewidth=1.0, color="black")
            n_asymptotes += 1
        ax.set_xscale(spec.x_scale)
        ax.set_yscale(spec.y_scale)
        ax.set_xlabel(layout.x_label)
        ax.set_ylabel(layout.y_label)
        ax.legend()
        fig.tight_layout()
        out = Path(spec.out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, metadata=_stable_metadata(out.suffix))
        plt.close(fig)
    return RenderResult(
        out_path=str(out), n_series=len(classes), n_asymptotes=n_asymptotes,
        classes=tuple(classes),
    )


def _stable_metadata(suffix: str):
    if suffix == ".svg":
        return {"Date": None}
    if suffix == ".pdf":
        return {"CreationDate": None}
    return None
