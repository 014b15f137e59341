"""Fingerprint comparison: alignment, correlation, scoring, and matrices.

Comparing two models runs, per projection kind: normalize both raw std
sequences, linearly interpolate the shorter one onto the longer one's length
when depths differ, then compute the Pearson correlation and its two-tailed
p-value. The headline score is the unweighted mean of the attention-kind
correlations; FFN kinds are reported but never pooled into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .arch_map import ATTENTION_KINDS, ProjectionKind
from .errors import (
    ConstantInput,
    DegenerateSequence,
    DuplicateModelId,
    KindMissing,
    LengthMismatch,
    TargetShorterThanSource,
    TooFewSamples,
    TpfpError,
)
from .fingerprint import Fingerprint, NormalizedSequence, normalize

DEFAULT_T_HIGH = 0.9
DEFAULT_T_LOW = 0.7

VERDICT_LINEAGE = "LIKELY_LINEAGE"
VERDICT_INCONCLUSIVE = "INCONCLUSIVE"
VERDICT_INDEPENDENT = "LIKELY_INDEPENDENT"


@dataclass(frozen=True)
class AlignedPair:
    kind: ProjectionKind
    a: NormalizedSequence
    b: NormalizedSequence
    common_length: int
    interpolated_side: str  # "NONE", "A", or "B"


@dataclass(frozen=True)
class KindResult:
    kind: ProjectionKind
    r: float
    p_value: float
    n: int


@dataclass(frozen=True)
class ComparisonReport:
    model_a: str
    model_b: str
    num_layers_a: int
    num_layers_b: int
    interpolated_side: str
    per_kind: tuple[KindResult, ...]
    aggregate: float | None
    verdict: str
    thresholds: tuple[float, float]  # (t_high, t_low)


@dataclass(frozen=True)
class CorrelationMatrix:
    model_ids: tuple[str, ...]
    per_kind: dict[ProjectionKind, tuple[tuple[float, ...], ...]]
    overall: tuple[tuple[float, ...], ...]


# --- alignment ---------------------------------------------------------------


def interp_values(values, target_len: int) -> np.ndarray:
    """Resample a sequence to target_len points by linear interpolation.

    Source points sit at indices 0..n-1; targets at linspace(0, n-1,
    target_len). Endpoints are preserved exactly, and a matching length
    returns the input unchanged.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise TooFewSamples(f"cannot interpolate a sequence of length {x.size}")
    if target_len < x.size:
        raise TargetShorterThanSource(
            f"target length {target_len} is shorter than source length {x.size}"
        )
    if target_len == x.size:
        return x.copy()
    targets = np.linspace(0.0, x.size - 1, target_len)
    return np.interp(targets, np.arange(x.size, dtype=np.float64), x)


def interp_align(short: NormalizedSequence, target_len: int) -> NormalizedSequence:
    values = interp_values(short.values, target_len)
    return NormalizedSequence(short.kind, tuple(float(v) for v in values))


def align_sequences(
    kind: ProjectionKind, a: NormalizedSequence, b: NormalizedSequence
) -> AlignedPair:
    """Bring two normalized sequences to a common length (longer side wins)."""
    la, lb = len(a.values), len(b.values)
    if la == lb:
        return AlignedPair(kind, a, b, la, "NONE")
    if la < lb:
        return AlignedPair(kind, interp_align(a, lb), b, lb, "A")
    return AlignedPair(kind, a, interp_align(b, la), la, "B")


# --- correlation -------------------------------------------------------------


def pearson(a, b) -> float:
    """Pearson correlation, centered two-pass in float64, clamped to [-1, 1]."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size != y.size:
        raise LengthMismatch(f"length {x.size} vs {y.size}")
    if x.size < 2:
        raise TooFewSamples(f"need at least 2 samples, have {x.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.sum(xc * xc))
    syy = float(np.sum(yc * yc))
    if sxx <= 0.0 or syy <= 0.0:
        raise ConstantInput("correlation undefined for a constant sequence")
    r = float(np.sum(xc * yc)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def p_value(r: float, n: int) -> float:
    """Two-tailed p-value for r under the null of zero correlation.

    Uses the exact t-distribution via the regularized incomplete beta
    function; appropriate for the small n (layer counts) seen here.
    """
    if n < 3:
        raise TooFewSamples(f"p-value needs n >= 3, have {n}")
    if abs(r) > 1.0:
        raise ValueError(f"|r| must be <= 1, got {r}")
    if abs(r) == 1.0:
        return 0.0
    df = n - 2
    t_squared = r * r * df / (1.0 - r * r)
    p = float(betainc(df / 2.0, 0.5, df / (df + t_squared)))
    return min(1.0, max(0.0, p))


def attention_aggregate(r_by_kind: dict[ProjectionKind, float]) -> float | None:
    """Unweighted mean of the attention-kind correlations; None if absent."""
    values = [r_by_kind[k] for k in ATTENTION_KINDS if k in r_by_kind]
    if not values:
        return None
    return math.fsum(values) / len(values)


def _verdict(aggregate: float | None, t_high: float, t_low: float) -> str:
    if aggregate is None:
        return VERDICT_INCONCLUSIVE
    if aggregate >= t_high:
        return VERDICT_LINEAGE
    if aggregate <= t_low:
        return VERDICT_INDEPENDENT
    return VERDICT_INCONCLUSIVE


def _common_kinds(fps: "list[Fingerprint]") -> tuple[ProjectionKind, ...]:
    kinds = tuple(k for k in ProjectionKind if all(k in fp.kinds for fp in fps))
    if not kinds:
        raise KindMissing("fingerprints share no projection kinds")
    return kinds


def compare_fingerprints(
    a: Fingerprint,
    b: Fingerprint,
    kinds=None,
    thresholds: tuple[float, float] = (DEFAULT_T_HIGH, DEFAULT_T_LOW),
) -> ComparisonReport:
    """Full pairwise comparison of two fingerprints.

    kinds defaults to every kind present in both. The verdict bands use the
    attention-kind aggregate; thresholds are echoed in the report.
    """
    t_high, t_low = thresholds
    if t_high < t_low:
        raise ValueError(f"t_high {t_high} must be >= t_low {t_low}")
    if kinds is None:
        ordered = _common_kinds([a, b])
    else:
        ordered = tuple(k for k in ProjectionKind if k in set(kinds))
        for kind in ordered:
            for fp in (a, b):
                if kind not in fp.kinds:
                    raise KindMissing(
                        f"fingerprint {fp.model_id!r} lacks kind {kind.value}"
                    )

    results = []
    interpolated_side = "NONE"
    for kind in ordered:
        try:
            norm_a = normalize(a.kinds[kind])
        except DegenerateSequence as exc:
            raise DegenerateSequence(f"model {a.model_id!r}: {exc}") from None
        try:
            norm_b = normalize(b.kinds[kind])
        except DegenerateSequence as exc:
            raise DegenerateSequence(f"model {b.model_id!r}: {exc}") from None
        pair = align_sequences(kind, norm_a, norm_b)
        interpolated_side = pair.interpolated_side
        r = pearson(pair.a.values, pair.b.values)
        results.append(KindResult(kind, r, p_value(r, pair.common_length), pair.common_length))

    aggregate = attention_aggregate({res.kind: res.r for res in results})
    return ComparisonReport(
        model_a=a.model_id,
        model_b=b.model_id,
        num_layers_a=a.num_layers,
        num_layers_b=b.num_layers,
        interpolated_side=interpolated_side,
        per_kind=tuple(results),
        aggregate=aggregate,
        verdict=_verdict(aggregate, t_high, t_low),
        thresholds=(t_high, t_low),
    )


def pairwise_matrix(
    fps: "list[Fingerprint]", kinds=None, skip_errors: bool = False
) -> CorrelationMatrix:
    """N x N correlation grids per kind plus the attention-mean overall grid.

    Cells are computed once per unordered pair and mirrored, so the grids are
    exactly symmetric. With skip_errors, failing cells become NaN (emitted as
    empty in CSV); otherwise the first failure is raised, annotated with the
    offending pair.
    """
    if len(fps) < 2:
        raise ValueError("need at least 2 fingerprints")
    ids = [fp.model_id for fp in fps]
    seen = set()
    for model_id in ids:
        if model_id in seen:
            raise DuplicateModelId(f"duplicate model id {model_id!r} in matrix inputs")
        seen.add(model_id)
    ordered = _common_kinds(fps) if kinds is None else tuple(
        k for k in ProjectionKind if k in set(kinds)
    )
    if not ordered:
        raise KindMissing("no projection kinds requested")

    n = len(fps)
    grids = {kind: [[math.nan] * n for _ in range(n)] for kind in ordered}
    overall = [[math.nan] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            try:
                report = compare_fingerprints(fps[i], fps[j], ordered)
            except TpfpError as exc:
                if skip_errors:
                    continue
                raise type(exc)(f"pair ({ids[i]}, {ids[j]}): {exc}") from None
            for res in report.per_kind:
                grids[res.kind][i][j] = grids[res.kind][j][i] = res.r
            agg = report.aggregate if report.aggregate is not None else math.nan
            overall[i][j] = overall[j][i] = agg

    return CorrelationMatrix(
        model_ids=tuple(ids),
        per_kind={kind: tuple(tuple(row) for row in grid) for kind, grid in grids.items()},
        overall=tuple(tuple(row) for row in overall),
    )


# --- report rendering --------------------------------------------------------


def report_to_doc(report: ComparisonReport) -> dict:
    """JSON-native form of a comparison report (canonical key order on dump)."""
    return {
        "model_a": report.model_a,
        "model_b": report.model_b,
        "num_layers_a": report.num_layers_a,
        "num_layers_b": report.num_layers_b,
        "interpolated_side": report.interpolated_side,
        "kinds": [
            {"kind": res.kind.value, "n": res.n, "r": res.r, "p_value": res.p_value}
            for res in report.per_kind
        ],
        "aggregate": report.aggregate,
        "verdict": report.verdict,
        "thresholds": {"t_high": report.thresholds[0], "t_low": report.thresholds[1]},
    }


def _csv_cell(value: float | None) -> str:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return ""
    from .fingerprint import format_float

    return format_float(value)


def report_to_csv(report: ComparisonReport) -> str:
    lines = ["kind,n,r,p_value,verdict"]
    for res in report.per_kind:
        lines.append(f"{res.kind.value},{res.n},{_csv_cell(res.r)},{_csv_cell(res.p_value)},")
    lines.append(f"AGGREGATE,,{_csv_cell(report.aggregate)},,{report.verdict}")
    return "\n".join(lines) + "\n"


def report_to_text(report: ComparisonReport) -> str:
    lines = [
        f"model_a: {report.model_a} (layers={report.num_layers_a})",
        f"model_b: {report.model_b} (layers={report.num_layers_b})",
        "alignment: "
        + (
            "direct (equal depth)"
            if report.interpolated_side == "NONE"
            else f"linear interpolation (interpolated side: {report.interpolated_side})"
        ),
        f"{'kind':<6} {'n':>4} {'r':>10} {'p_value':>12}",
    ]
    for res in report.per_kind:
        lines.append(f"{res.kind.value:<6} {res.n:>4} {res.r:>10.6f} {res.p_value:>12.3e}")
    agg = "n/a" if report.aggregate is None else f"{report.aggregate:.6f}"
    lines.append(f"aggregate (attention kinds): {agg}")
    lines.append(
        f"verdict: {report.verdict} "
        f"(t_high={report.thresholds[0]:g}, t_low={report.thresholds[1]:g})"
    )
    return "\n".join(lines) + "\n"


def matrix_to_doc(matrix: CorrelationMatrix) -> dict:
    return {
        "model_ids": list(matrix.model_ids),
        "kinds": {
            kind.value: [list(row) for row in grid] for kind, grid in matrix.per_kind.items()
        },
        "overall": [list(row) for row in matrix.overall],
    }


def grid_to_csv(model_ids: tuple[str, ...], grid) -> str:
    header = "model_id," + ",".join(model_ids)
    lines = [header]
    for model_id, row in zip(model_ids, grid):
        lines.append(model_id + "," + ",".join(_csv_cell(v) for v in row))
    return "\n".join(lines) + "\n"
