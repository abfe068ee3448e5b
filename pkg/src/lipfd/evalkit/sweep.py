"""AUC under each perturbation kind and severity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..perturb import KINDS, PerturbationSpec, apply_to_composite, resolve
from .metrics import compute_metrics
from .records import MetricRecord


@dataclass
class SweepResult:
    clean_auc: float | None
    cells: dict[tuple[str, int], float | None] = field(default_factory=dict)
    probes: dict[str, float | None] = field(default_factory=dict)

    def kind_means(self) -> dict[str, float | None]:
        out = {}
        for kind in dict.fromkeys(k for k, _ in self.cells):
            vals = [v for (k, _), v in self.cells.items() if k == kind]
            out[kind] = None if any(v is None for v in vals) else float(np.mean(vals))
        return out

    def records(self) -> list[MetricRecord]:
        recs = [MetricRecord("none", "clean", "auc", self.clean_auc)]
        recs += [MetricRecord(k, str(s), "auc", v) for (k, s), v in self.cells.items()]
        recs += [MetricRecord(k, "mean", "auc", v) for k, v in self.kind_means().items()]
        recs += [MetricRecord("probe", label, "auc", v) for label, v in self.probes.items()]
        return recs

    def table(self) -> str:
        kinds = list(dict.fromkeys(k for k, _ in self.cells))
        sevs = sorted({s for _, s in self.cells})

        def f(v):
            return "  n/a " if v is None else f"{v:6.4f}"

        lines = [f"clean AUC {f(self.clean_auc)}", "kind".ljust(16) + "".join(f"   s{s}  " for s in sevs) + "  mean"]
        means = self.kind_means()
        for k in kinds:
            lines.append(k.ljust(16) + "".join(f(self.cells.get((k, s))) + "  " for s in sevs) + f(means[k]))
        for label, v in self.probes.items():
            lines.append(f"probe {label}: {f(v)}")
        return "\n".join(lines) + "\n"


def robustness_sweep(model, data, kinds: Sequence[str] = KINDS, severities: Sequence[int] = (1, 2, 3, 4, 5),
                     seed: int = 0, threshold: float = 0.5,
                     probes: Sequence[PerturbationSpec] = ()) -> SweepResult:
    """`data` is a training.CompositeSet; composites are corrupted (frame strip only) and re-quantised."""
    from ..training import predict_set

    cfg = model.cfg
    T, side = cfg.window_size, cfg.frame_side

    def auc_under(spec: PerturbationSpec | None):
        transform = None
        if spec is not None:
            def transform(img, i, spec=spec):
                return apply_to_composite(img, T, side, spec, seed + i * T)
        return compute_metrics(predict_set(model, data, transform=transform), threshold).auc

    result = SweepResult(auc_under(None))
    for kind in kinds:
        for s in severities:
            result.cells[(kind, int(s))] = auc_under(resolve(kind, s))
    for spec in probes:
        result.probes[spec.label] = auc_under(spec)
    return result
