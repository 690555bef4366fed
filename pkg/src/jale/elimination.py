"""JND-based elimination of perceptually redundant rungs."""

from __future__ import annotations

from dataclasses import replace
from typing import Mapping, Sequence

from .core import LadderPlan


def retained_positions(vmaf: Sequence[float], jnd: float, cap: float) -> list[int]:
    """0-based positions kept by the elimination scan.

    The first rung is always kept. A later rung is kept when it is at least
    ``jnd`` above the last kept one; the scan stops once a kept rung reaches
    ``cap``. The input is scanned as given, never sorted.
    """
    if not vmaf:
        raise ValueError("empty ladder")
    kept = [0]
    if vmaf[0] >= cap:
        return kept
    for t in range(1, len(vmaf)):
        if vmaf[t] - vmaf[kept[-1]] >= jnd:
            kept.append(t)
            if vmaf[t] >= cap:
                break
    return kept


def eliminate(plan: LadderPlan, jnd: float, cap: float) -> LadderPlan:
    """Mark rungs as retained or dropped using their predicted VMAF."""
    keep = set(retained_positions([e.predicted_vmaf for e in plan.entries], jnd, cap))
    entries = tuple(replace(e, retained=k in keep) for k, e in enumerate(plan.entries))
    return replace(plan, entries=entries)


def recheck_measured(plan: LadderPlan, measured_vmaf: Mapping[int, float], jnd: float, cap: float) -> list[int]:
    """Re-run the scan on measured VMAF keyed by rung index (evaluation only).

    Returns the 1-based rung indices that measured quality would keep.
    """
    idx = [e.representation.index for e in plan.entries if e.representation.index in measured_vmaf]
    keep = retained_positions([measured_vmaf[i] for i in idx], jnd, cap)
    return [idx[k] for k in keep]
