"""Dual-network protocol subsampling.

A scorer network rates the 27 direction-level DW measurements of a voxel;
the top-k are kept, each multiplied by its score, and a predictor network
reconstructs all 27 from that gated vector. After training, scores averaged
over the training voxels rank the measurements and, grouped by shell, give a
reduced b-value protocol.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .acquisition import AcquisitionScheme, kidney_protocol
from .nn import AdamState, adam_step, init_seeded

log = logging.getLogger(__name__)

N_MEAS = 27


class SelectionError(ValueError):
    pass


def top_k_mask(scores, k):
    """Boolean mask of the k largest entries per row.

    Ties go to the lower index (a stable sort on the negated scores).
    """
    scores = np.atleast_2d(scores)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def gate(x, scores, k):
    """Keep the top-k measurements of each row, scaled by their scores."""
    return x * scores * top_k_mask(scores, k)


@dataclass
class SelectionConfig:
    k_selected: int = 12
    epochs: int = 100
    learning_rate: float = 1e-5
    dropout_p: float = 0.0
    seed: int = 0
    n_test: int = 3
    batch_size: int = 256
    hidden: int = 64
    selection: str = "batch"
    explore: float = 1.0
    anneal_fraction: float = 0.5

    def __post_init__(self):
        if not 1 <= self.k_selected <= N_MEAS:
            raise ValueError(f"k_selected must lie in [1, {N_MEAS}]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.n_test < 0:
            raise ValueError("n_test must be >= 0")
        if self.selection not in ("batch", "voxel"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.explore < 0 or not 0 <= self.anneal_fraction <= 1:
            raise ValueError("explore must be >= 0 and anneal_fraction in [0, 1]")


@dataclass
class ScoreReport:
    scores: np.ndarray
    selected: np.ndarray
    b_values: list
    test_mse: float
    seed: int
    config: dict
    subject_scores: np.ndarray = None
    loss_curve: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "scores": [float(s) for s in self.scores],
            "selected": [int(i) for i in self.selected],
            "b_values": [float(b) for b in self.b_values],
            "test_mse": None if self.test_mse is None or math.isnan(self.test_mse) else float(self.test_mse),
            "seed": int(self.seed),
            "config": self.config,
        }
        if self.subject_scores is not None:
            doc["subject_scores"] = [[float(v) for v in row] for row in self.subject_scores]
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "ScoreReport":
        doc = json.loads(text)
        missing = {"scores", "selected", "b_values", "test_mse", "seed", "config"} - doc.keys()
        if missing:
            raise ValueError(f"score report lacks {sorted(missing)}")
        scores = np.asarray(doc["scores"], dtype=float)
        if scores.shape != (N_MEAS,) or np.any((scores < 0) | (scores > 1)):
            raise ValueError(f"scores must be {N_MEAS} values in [0, 1]")
        sub = doc.get("subject_scores")
        return cls(scores, np.asarray(doc["selected"], dtype=int), list(doc["b_values"]),
                   math.nan if doc["test_mse"] is None else doc["test_mse"], doc["seed"],
                   doc["config"], None if sub is None else np.asarray(sub, dtype=float))


def report_from_scores(subject_scores, scheme=None, k=12, seed=0, config=None, test_mse=math.nan):
    """Build a ScoreReport from a (subjects, 27) score matrix."""
    subject_scores = np.atleast_2d(np.asarray(subject_scores, dtype=float))
    if subject_scores.shape[1] != N_MEAS:
        raise SelectionError(f"expected {N_MEAS} scores per subject, got {subject_scores.shape[1]}")
    scores = subject_scores.mean(axis=0)
    selected = np.sort(top_k_mask(scores, k)[0].nonzero()[0])
    return ScoreReport(scores, selected, _selected_bvalues(selected, scheme), test_mse, seed,
                       dict(config or {"k_selected": k}), subject_scores)


def _dw_bvalues(scheme):
    scheme = scheme or kidney_protocol()
    b = np.array([scheme.points[i].b for i in scheme.dw_indices])
    if len(b) != N_MEAS:
        raise SelectionError(f"scheme has {len(b)} DW measurements, expected {N_MEAS}")
    return b


def _selected_bvalues(selected, scheme):
    b = _dw_bvalues(scheme)
    return sorted({float(v) for v in b[np.asarray(selected, dtype=int)]})


class ProtocolSelector(BaseEstimator, TransformerMixin):
    """Scorer/predictor pair trained jointly on reconstruction error.

    The scorer is 27 -> hidden (ReLU, batchnorm, dropout) -> 27 sigmoid. The
    predictor takes the gated vector, 27 wide with zeros at the dropped
    entries, and maps it through hidden (ReLU) -> 27 linear. A zero column
    contributes nothing, so this is the k-input predictor with its weights
    indexed by measurement. The hard top-k mask is passed straight through
    in the backward pass; the score gate itself is differentiated exactly.

    With ``selection="batch"`` the top-k set is taken from the batch-mean
    scores, so one subset serves every voxel of the batch, as a protocol
    must; ``"voxel"`` ranks each voxel on its own scores. During the first
    ``anneal_fraction`` of the epochs, Gaussian jitter of scale ``explore``
    (decaying linearly to zero) is added to the ranking scores so every
    measurement gets selected now and then and its predictor weights train.
    The final epochs use the plain hard top-k.

    Parameters
    ----------
    k_selected : int, default 12
    epochs : int, default 100
    learning_rate : float, default 1e-5
    dropout_p : float, default 0.0
    batch_size : int, default 256
    hidden : int, default 64
    seed : int, default 0
    selection : {"batch", "voxel"}, default "batch"
    explore : float, default 1.0
    anneal_fraction : float, default 0.5
    """

    def __init__(self, k_selected=12, epochs=100, learning_rate=1e-5, dropout_p=0.0,
                 batch_size=256, hidden=64, seed=0, selection="batch", explore=1.0, anneal_fraction=0.5):
        self.selection = selection
        self.explore = explore
        self.anneal_fraction = anneal_fraction
        self.k_selected = k_selected
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.dropout_p = dropout_p
        self.batch_size = batch_size
        self.hidden = hidden
        self.seed = seed

    def _check(self, X):
        X = check_array(X, dtype=float)
        if X.shape[1] != N_MEAS:
            raise SelectionError(f"expected {N_MEAS} DW measurements per voxel, got {X.shape[1]}")
        return X

    def fit(self, X, y=None):
        X = self._check(X)
        k = int(self.k_selected)
        if not 1 <= k <= N_MEAS:
            raise SelectionError(f"k_selected must lie in [1, {N_MEAS}]")
        if k >= N_MEAS:
            warnings.warn("k_selected >= 27: gating keeps every measurement", RuntimeWarning)
        seeds = np.random.SeedSequence(self.seed).spawn(3)
        self.scorer_ = init_seeded([N_MEAS, self.hidden, N_MEAS], seeds[0], "relu", "sigmoid",
                                   dropout_p=self.dropout_p, batchnorm=True)
        self.predictor_ = init_seeded([N_MEAS, self.hidden, N_MEAS], seeds[1], "relu", "linear",
                                      dropout_p=self.dropout_p)
        rng = np.random.default_rng(seeds[2])
        params = self.scorer_.parameters() + self.predictor_.parameters()
        state = AdamState(lr=self.learning_rate)
        n = X.shape[0]
        bs = min(self.batch_size, n)
        self.loss_curve_ = []
        n_anneal = self.anneal_fraction * self.epochs
        for epoch in range(self.epochs):
            noise = self.explore * max(0.0, 1.0 - epoch / n_anneal) if n_anneal > 0 else 0.0
            perm = rng.permutation(n)
            for start in range(0, n, bs):
                xb = X[perm[start:start + bs]]
                if xb.shape[0] < 2:
                    continue
                s, cs = self.scorer_.forward(xb, train=True, rng=rng)
                mask = self._mask(s, k, noise * rng.standard_normal(N_MEAS) if noise else 0.0)
                g = xb * s * mask
                out, cp = self.predictor_.forward(g, train=True, rng=rng)
                diff = out - xb
                grad_out = 2.0 * diff / diff.size
                gp, grad_g = self.predictor_.backward(grad_out, cp)
                gs, _ = self.scorer_.backward(grad_g * xb, cs)
                adam_step(params, gs + gp, state)
                self.scorer_.touch()
                self.predictor_.touch()
            self.loss_curve_.append(self.score_mse(X))
        return self

    def _mask(self, s, k, jitter=0.0):
        if self.selection == "batch":
            return np.broadcast_to(top_k_mask(s.mean(axis=0) + jitter, k), s.shape)
        if self.selection == "voxel":
            return top_k_mask(s + jitter, k)
        raise ValueError(f"unknown selection {self.selection!r}")

    def scores(self, X):
        """Eval-mode importance scores, shape (n, 27), each in [0, 1]."""
        check_is_fitted(self, "scorer_")
        return self.scorer_.predict(self._check(X))

    def transform(self, X):
        """Gated measurement vectors (top-k kept and scaled)."""
        X = self._check(X)
        s = self.scores(X)
        return X * s * self._mask(s, self.k_selected)

    def reconstruct(self, X):
        return self.predictor_.predict(self.transform(X))

    def score_mse(self, X):
        X = self._check(X)
        return float(np.mean((self.reconstruct(X) - X) ** 2))


def train_selector(datasets, cfg: SelectionConfig = None, scheme=None, holdout=True):
    """Train the selector on per-subject tables and summarise the scores.

    The last ``cfg.n_test`` subjects are held out for the reported test MSE.
    With ``holdout=False`` (or too few subjects) all subjects train and the
    test MSE is NaN.
    """
    cfg = cfg or SelectionConfig()
    tables = [np.asarray(getattr(d, "signals", d), dtype=float) for d in datasets]
    if not tables:
        raise SelectionError("need at least one subject")
    for i, t in enumerate(tables):
        if t.ndim != 2 or t.shape[1] != N_MEAS:
            raise SelectionError(f"subject {i}: expected {N_MEAS} DW measurements, got shape {t.shape}")
    n_test = cfg.n_test if holdout else 0
    if n_test >= len(tables):
        warnings.warn("not enough subjects for a held-out split; training on all", RuntimeWarning)
        n_test = 0
    train, test = tables[:len(tables) - n_test], tables[len(tables) - n_test:]
    sel = ProtocolSelector(cfg.k_selected, cfg.epochs, cfg.learning_rate, cfg.dropout_p,
                           cfg.batch_size, cfg.hidden, cfg.seed, cfg.selection, cfg.explore,
                           cfg.anneal_fraction)
    sel.fit(np.vstack(train))
    # joint average over every training voxel, kept per subject for reporting
    per_subject = np.array([sel.scores(t).mean(axis=0) for t in train])
    counts = np.array([len(t) for t in train], dtype=float)
    pooled = (per_subject * counts[:, None]).sum(axis=0) / counts.sum()
    test_mse = sel.score_mse(np.vstack(test)) if test else math.nan
    selected = np.sort(top_k_mask(pooled, cfg.k_selected)[0].nonzero()[0])
    report = ScoreReport(pooled, selected, _selected_bvalues(selected, scheme), test_mse, cfg.seed,
                         asdict(cfg), per_subject, list(sel.loss_curve_))
    report.selector = sel
    return report


def shell_scores(report_or_scores, scheme=None):
    """Mean direction score per shell, as (b-values, scores) in scheme order."""
    scores = getattr(report_or_scores, "scores", report_or_scores)
    scores = np.asarray(scores, dtype=float)
    b = _dw_bvalues(scheme)
    shells = list(dict.fromkeys(b.tolist()))
    return np.array(shells), np.array([scores[b == v].mean() for v in shells])


def extract_protocol(report, full: AcquisitionScheme = None, n_bvalues=4) -> AcquisitionScheme:
    """Keep the n best-scoring shells, all directions plus their b0s.

    Equal shell scores go to the shell that comes first in ``full``; the
    kept entries stay in their original order.
    """
    full = full or kidney_protocol()
    shells, s = shell_scores(report, full)
    if not 1 <= n_bvalues <= len(shells):
        raise SelectionError(f"n_bvalues must lie in [1, {len(shells)}]")
    keep = shells[np.argsort(-s, kind="stable")[:n_bvalues]]
    if n_bvalues == len(shells):
        return full
    return full.subset_shells(keep)


def evaluate_reduced(full_fit, reduced_fit, parameters=("f_ic", "f_ees", "f_vasc", "R")):
    """Per-parameter agreement between a full- and a reduced-protocol fit.

    Returns a dict parameter -> {"pearson_r", "mean_abs_diff", "diff"} where
    ``diff`` is reduced minus full per voxel.
    """
    a_idx = np.asarray(full_fit.voxel_indices)
    b_idx = np.asarray(reduced_fit.voxel_indices)
    if a_idx.shape != b_idx.shape or np.any(a_idx != b_idx):
        raise ValueError("full and reduced fits cover different voxels")
    out = {}
    for name in parameters:
        a = np.asarray(full_fit.params[name], dtype=float)
        b = np.asarray(reduced_fit.params[name], dtype=float)
        ok = np.isfinite(a) & np.isfinite(b)
        diff = b - a
        if ok.sum() >= 2 and a[ok].std() > 0 and b[ok].std() > 0:
            r = float(np.corrcoef(a[ok], b[ok])[0, 1])
        else:
            r = math.nan
        if ok.any() and np.array_equal(a[ok], b[ok]):
            r = 1.0 if a[ok].std() > 0 else math.nan
        out[name] = {"pearson_r": r, "mean_abs_diff": float(np.mean(np.abs(diff[ok]))) if ok.any() else math.nan,
                     "diff": diff}
    return out
