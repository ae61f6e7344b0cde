"""ROI summaries, Wilcoxon signed-rank testing and group-data exports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 20
BANDS = ((1e-4, "****"), (1e-3, "***"), (1e-2, "**"), (5e-2, "*"))
GROUP_COLUMNS = ("subject", "roi_label", "group", "parameter", "value")


class DegenerateTestError(ValueError):
    pass


@dataclass
class RoiMask:
    label: str
    indices: np.ndarray
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError(f"ROI {self.label!r} has duplicate voxel indices")
        if np.any(self.indices < 0):
            raise ValueError(f"ROI {self.label!r} has negative voxel indices")


@dataclass
class WilcoxonResult:
    statistic: float
    n_effective: int
    p_value: float
    method: str
    band: str
    w_plus: float
    w_minus: float


def significance_band(p: float) -> str:
    """Star band for a p-value. A p exactly on a boundary takes the less
    significant band, so p = 0.05 is 'n.s.'."""
    for cut, stars in BANDS:
        if p < cut:
            return stars
    return "n.s."


def _exact_two_sided(doubled_ranks, w_doubled):
    """P(min(W+, W-) <= w) under random signs, by counting sign patterns.

    Ranks are doubled so tie-averaged ranks become integers. The count over
    all 2^n patterns is built as a polynomial product.
    """
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    sums = np.arange(total + 1)
    hit = np.minimum(sums, total - sums) <= w_doubled
    n_hit = int(sum(counts[hit]))
    return min(1.0, n_hit / 2 ** len(doubled_ranks))


def wilcoxon_signed_rank(x, y) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test of paired samples.

    Zero differences are dropped, ties get average ranks, and the statistic
    is min(W+, W-). Exact for up to 20 non-zero pairs, otherwise a normal
    approximation with tie and continuity corrections.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 1:
        raise ValueError("x and y must be 1-d samples of equal, non-zero length")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateTestError("degenerate: no nonzero pairs")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        p = _exact_two_sided(np.rint(2 * ranks).astype(int), int(round(2 * w)))
        method = "exact"
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
        z = (w - mu + 0.5) / math.sqrt(var)
        p = min(1.0, 2.0 * norm.cdf(z))
        method = "normal-approximation"
    return WilcoxonResult(w, n, p, method, significance_band(p), w_plus, w_minus)


@dataclass
class RoiSummary:
    label: str
    n_voxels: int
    n_excluded: dict
    mean: dict
    median: dict
    sd: dict
    sd_kind: str = "population"


def roi_summary(fit, mask: RoiMask, voxel_indices=None) -> RoiSummary:
    """Mean, median and population SD of every fitted parameter in an ROI.

    ``voxel_indices`` locates the rows of ``fit`` in the source volume; it
    defaults to ``fit.voxel_indices``.
    """
    if voxel_indices is None:
        voxel_indices = fit.voxel_indices
    voxel_indices = np.asarray(voxel_indices)
    rows = np.flatnonzero(np.isin(voxel_indices, mask.indices))
    if rows.size == 0:
        raise ValueError(f"ROI {mask.label!r} does not intersect the fitted voxels")
    mean, median, sd, excluded = {}, {}, {}, {}
    for name, values in fit.params.items():
        v = np.asarray(values, dtype=float)[rows]
        ok = np.isfinite(v)
        excluded[name] = int((~ok).sum())
        v = v[ok]
        if v.size == 0:
            mean[name] = median[name] = sd[name] = math.nan
            continue
        mean[name] = float(v.mean())
        median[name] = float(np.median(v))
        sd[name] = float(v.std())
    return RoiSummary(mask.label, int(rows.size), excluded, mean, median, sd)


def export_group_data(fits: dict, masks: dict, grouping=None, parameters=None) -> str:
    """CSV of ROI medians, one row per (subject, ROI, parameter).

    Parameters
    ----------
    fits : dict subject -> FitResult
    masks : dict subject -> list of RoiMask
    grouping : dict or callable, optional
        ``(subject, mask) -> group``. By default the mask's ``groups`` entry
        ``"group"`` (or empty).
    parameters : sequence of str, optional
        Parameters to export, default all of each fit, in fit order.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GROUP_COLUMNS)
    for subject in sorted(fits):
        fit = fits[subject]
        for mask in masks.get(subject, []):
            if callable(grouping):
                group = grouping(subject, mask)
            elif isinstance(grouping, dict):
                group = grouping.get((subject, mask.label), grouping.get(mask.label, ""))
            else:
                group = mask.groups.get("group", "")
            summary = roi_summary(fit, mask)
            for name in parameters or fit.params:
                w.writerow([subject, mask.label, group, name, f"{summary.median[name]:.9g}"])
    return buf.getvalue()


def read_group_data(text_or_path) -> list:
    """Parse an exported group CSV back into a list of row dicts."""
    if "\n" in text_or_path:
        fh = io.StringIO(text_or_path)
    else:
        fh = open(text_or_path, newline="", encoding="utf-8")
    with fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != GROUP_COLUMNS:
            raise ValueError(f"group CSV header must be {','.join(GROUP_COLUMNS)}")
        rows = []
        for r in reader:
            r["value"] = float(r["value"])
            rows.append(r)
    return rows


def paired_values(rows, parameter, x_label, y_label, key="roi_label"):
    """Pair ``parameter`` values of two labels by subject.

    Returns ``(subjects, x, y)`` for the subjects that have both labels.
    """
    table = {}
    for r in rows:
        if r["parameter"] != parameter:
            continue
        table.setdefault(r["subject"], {})[r[key]] = r["value"]
    subjects = sorted(s for s, v in table.items() if x_label in v and y_label in v)
    x = np.array([table[s][x_label] for s in subjects])
    y = np.array([table[s][y_label] for s in subjects])
    return subjects, x, y


def group_means(rows, parameter):
    """Mean exported value per group for one parameter."""
    acc = {}
    for r in rows:
        if r["parameter"] == parameter:
            acc.setdefault(r["group"], []).append(r["value"])
    return {g: float(np.mean(v)) for g, v in acc.items()}
