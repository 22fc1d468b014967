"""Disentanglement metrics: FactorVAE score, MIG, SAP, DCI and IRS.

Every metric takes codes paired with ground-truth factor labels. The FactorVAE
score additionally needs fixed-factor sampling, which it gets either from a
representation function over a dataset or by resampling rows of a matrix.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .errors import DegenerateRepresentationError, DomainError
from .representation import RepresentationMatrix, as_representation_fn, encode_dataset

METRIC_NAMES = ("factor_vae", "sap", "dci", "irs", "mig")


@dataclass(frozen=True)
class MetricConfig:
    fv_votes_train: int = 800
    fv_votes_eval: int = 400
    fv_batch: int = 64
    prune_std_threshold: float = 0.05
    mig_bins: int = 20
    mig_samples: int = 10000
    dci_test_fraction: float = 0.2
    dci_n_estimators: int = 10
    dci_max_depth: int = 8
    irs_diff_quantile: float = 0.99
    seed: int = 0

    def __post_init__(self):
        for name in ("fv_votes_train", "fv_votes_eval", "fv_batch", "mig_samples",
                     "dci_n_estimators", "dci_max_depth"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.mig_bins < 2:
            raise DomainError("mig_bins must be >= 2")
        if not 0.0 < self.dci_test_fraction < 1.0:
            raise DomainError("dci_test_fraction must lie in (0, 1)")
        if not 0.0 < self.irs_diff_quantile <= 1.0:
            raise DomainError("irs_diff_quantile must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricReport:
    factor_vae: float
    sap: float
    dci: float
    irs: float
    mig: float
    dci_completeness: Optional[float] = None
    dci_informativeness: Optional[float] = None

    def to_dict(self):
        return asdict(self)

    def scores(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}


# ---------------------------------------------------------------------------
# Mutual information gap


def discretize_latents(codes, bins):
    """Equal-width histogram binning of each column over its empirical range."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim == 1:
        codes = codes[:, None]
    lo, hi = codes.min(axis=0), codes.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.floor((codes - lo) / safe * bins).astype(np.int64)
    out = np.clip(out, 0, bins - 1)
    out[:, span <= 0] = 0
    return out


def _entropy_from_counts(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def discrete_entropy(labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DomainError("empty label vector")
    _, counts = np.unique(labels, return_counts=True)
    return _entropy_from_counts(counts)


def discrete_mutual_information(a, b):
    """Plug-in mutual information (nats) between two aligned label vectors."""
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0 or b.size == 0:
        raise DomainError("empty label vector")
    if a.shape != b.shape:
        raise DomainError("label vectors are not aligned")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai.ravel(), bi.ravel()), 1)
    h_a = _entropy_from_counts(joint.sum(axis=1))
    h_b = _entropy_from_counts(joint.sum(axis=0))
    h_ab = _entropy_from_counts(joint.ravel())
    return max(0.0, h_a + h_b - h_ab)


def mutual_info_matrix(discrete_codes, factors):
    d, k = discrete_codes.shape[1], factors.shape[1]
    m = np.zeros((d, k))
    for i in range(d):
        for j in range(k):
            m[i, j] = discrete_mutual_information(discrete_codes[:, i], factors[:, j])
    return m


def mig(rep: RepresentationMatrix, cfg: MetricConfig = MetricConfig()) -> float:
    if rep.num_codes < 2:
        raise DomainError("MIG needs at least 2 latent dimensions")
    entropies = np.array([discrete_entropy(rep.factors[:, k]) for k in range(rep.factors.shape[1])])
    if np.any(entropies <= 0):
        raise DomainError("a factor never varies in the sample; its entropy is zero")
    m = mutual_info_matrix(discretize_latents(rep.codes, cfg.mig_bins), rep.factors)
    top2 = -np.sort(-m, axis=0)[:2]
    return float(np.clip(np.mean((top2[0] - top2[1]) / entropies), 0.0, 1.0))


# ---------------------------------------------------------------------------
# FactorVAE score


def _fixed_factor_rows(rep: RepresentationMatrix, k, n, rng):
    """Resample ``n`` rows of a matrix that share one value of factor ``k``."""
    present = np.unique(rep.factors[:, k])
    value = present[rng.integers(len(present))]
    rows = np.flatnonzero(rep.factors[:, k] == value)
    return rep.codes[rng.choice(rows, size=n, replace=True)]


def factor_vae_score(model_or_rep, dataset, cfg: MetricConfig = MetricConfig(), rng=None) -> float:
    """Majority-vote accuracy of recovering the fixed factor from the least-varying code.

    ``model_or_rep`` is a trained model, a representation function over factor
    arrays, or a RepresentationMatrix (fixed-factor batches are then drawn by
    resampling its rows, and ``dataset`` may be None).
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if isinstance(model_or_rep, RepresentationMatrix):
        rep = model_or_rep
        num_factors = rep.factor_space.num_factors
        global_codes = rep.codes

        def batches(ks):
            return [_fixed_factor_rows(rep, k, cfg.fv_batch, rng) for k in ks]
    else:
        fn = as_representation_fn(model_or_rep, dataset)
        num_factors = dataset.num_factors
        global_codes = fn(dataset.sample_factors(cfg.mig_samples, rng))

        def batches(ks):
            factors = [dataset.sample_fixed_factor(int(k), cfg.fv_batch, rng)[1] for k in ks]
            codes = fn(np.concatenate(factors, axis=0))
            return np.split(codes, len(ks))

    scale = np.std(global_codes, axis=0)
    active = scale >= cfg.prune_std_threshold
    if not active.any():
        raise DegenerateRepresentationError("all latent dimensions pruned (collapsed)", "factor_vae")
    active_idx = np.flatnonzero(active)

    def votes(num):
        ks = rng.integers(num_factors, size=num)
        dims = []
        for codes in batches(ks):
            var = np.var(codes[:, active_idx] / scale[active_idx], axis=0)
            dims.append(active_idx[np.argmin(var)])
        return np.asarray(dims), ks

    train_dims, train_ks = votes(cfg.fv_votes_train)
    counts = np.zeros((global_codes.shape[1], num_factors), dtype=np.int64)
    np.add.at(counts, (train_dims, train_ks), 1)
    classifier = np.argmax(counts, axis=1)
    eval_dims, eval_ks = votes(cfg.fv_votes_eval)
    return float(np.mean(classifier[eval_dims] == eval_ks))


# ---------------------------------------------------------------------------
# SAP


def best_threshold_balanced_accuracy(x, y):
    """Best balanced accuracy of a single threshold on ``x`` predicting boolean ``y``.

    Both orientations are considered, so the result lies in [0.5, 1].
    """
    y = np.asarray(y, dtype=bool)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(x, kind="stable")
    xs, ys = np.asarray(x)[order], y[order]
    pos_below = np.cumsum(ys)
    neg_below = np.arange(1, y.size + 1) - pos_below
    # Only cut between distinct values.
    cut = np.append(xs[1:] > xs[:-1], False)
    bal = 0.5 * ((n_pos - pos_below[cut]) / n_pos + neg_below[cut] / n_neg)
    if bal.size == 0:
        return 0.5
    return float(max(bal.max(), 1.0 - bal.min()))


def sap_matrix(rep: RepresentationMatrix):
    """(d, K) balanced accuracies; factor k is binarized at value >= cardinality // 2."""
    card = rep.factor_space.cardinalities
    s = np.zeros((rep.num_codes, len(card)))
    for k, c in enumerate(card):
        target = rep.factors[:, k] >= c // 2
        for j in range(rep.num_codes):
            s[j, k] = best_threshold_balanced_accuracy(rep.codes[:, j], target)
    return s


def sap(rep: RepresentationMatrix, cfg: MetricConfig = MetricConfig()) -> float:
    if rep.num_codes < 2:
        raise DomainError("SAP needs at least 2 latent dimensions")
    s = sap_matrix(rep)
    top2 = -np.sort(-s, axis=0)[:2]
    return float(np.clip(np.mean(top2[0] - top2[1]), 0.0, 1.0))


# ---------------------------------------------------------------------------
# DCI


def _normalized_entropy(p, base):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum() / np.log(base))


def dci_from_importance(importance):
    """Disentanglement and completeness from a (d, K) non-negative importance matrix."""
    r = np.abs(np.asarray(importance, dtype=np.float64))
    total = r.sum()
    if total <= 0:
        raise DegenerateRepresentationError("importance matrix is all zero", "dci")
    d, k = r.shape
    rows = r.sum(axis=1)
    disent = 0.0
    for j in np.flatnonzero(rows > 0):
        h = _normalized_entropy(r[j] / rows[j], k) if k > 1 else 0.0
        disent += rows[j] / total * (1.0 - h)
    cols = r.sum(axis=0)
    complete = 0.0
    for i in np.flatnonzero(cols > 0):
        h = _normalized_entropy(r[:, i] / cols[i], d) if d > 1 else 0.0
        complete += cols[i] / total * (1.0 - h)
    return float(np.clip(disent, 0, 1)), float(np.clip(complete, 0, 1))


def dci(rep: RepresentationMatrix, cfg: MetricConfig = MetricConfig(), rng=None):
    """Returns (disentanglement, completeness, informativeness)."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n = len(rep)
    n_test = int(round(n * cfg.dci_test_fraction))
    if n_test < 1 or n - n_test < 1:
        raise DomainError("train/test split leaves an empty side")
    order = rng.permutation(n)
    test, train = order[:n_test], order[n_test:]
    importance = np.zeros((rep.num_codes, rep.factors.shape[1]))
    accuracy = []
    for k in range(rep.factors.shape[1]):
        model = RandomForestClassifier(
            n_estimators=cfg.dci_n_estimators,
            max_depth=cfg.dci_max_depth,
            max_features=None,
            random_state=int(rng.integers(2 ** 31 - 1)),
        )
        model.fit(rep.codes[train], rep.factors[train, k])
        importance[:, k] = model.feature_importances_
        accuracy.append(model.score(rep.codes[test], rep.factors[test, k]))
    d_score, completeness = dci_from_importance(importance)
    return d_score, completeness, float(np.mean(accuracy))


# ---------------------------------------------------------------------------
# IRS


def irs_score(codes, factors, diff_quantile=0.99) -> float:
    """Interventional robustness of raw (n, d) codes against (n, K) factor labels."""
    codes = np.asarray(codes, dtype=np.float64)
    factors = np.asarray(factors)
    max_dev = np.max(np.abs(codes - codes.mean(axis=0)), axis=0)
    if not np.any(max_dev > 0):
        raise DegenerateRepresentationError("representation has zero variance", "irs")
    live = max_dev > 0
    num_factors = factors.shape[1]
    deviation = np.zeros((codes.shape[1], num_factors))
    for k in range(num_factors):
        values = np.unique(factors[:, k])
        if len(values) < 2:
            raise DomainError(f"factor {k} has fewer than 2 realizations in the sample")
        for v in values:
            group = codes[factors[:, k] == v]
            diffs = np.abs(group - group.mean(axis=0))
            deviation[:, k] += np.quantile(diffs, diff_quantile, axis=0)
        deviation[:, k] /= len(values)
    # Robustness of dim j to interventions on everything but factor k.
    scores = 1.0 - deviation[live] / max_dev[live, None]
    per_dim = scores.max(axis=1)
    return float(np.clip(np.average(per_dim, weights=codes.var(axis=0)[live]), 0.0, 1.0))


def irs(rep: RepresentationMatrix, cfg: MetricConfig = MetricConfig()) -> float:
    return irs_score(rep.codes, rep.factors, cfg.irs_diff_quantile)


# ---------------------------------------------------------------------------


def evaluate_all(model, dataset, cfg: MetricConfig = MetricConfig(), rng=None) -> MetricReport:
    """Encode once, then compute all five metrics on the shared sample."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    fv_rng, enc_rng, dci_rng = rng.spawn(3)
    fn = as_representation_fn(model, dataset)

    def tagged(name, f, *args):
        try:
            return f(*args)
        except Exception as e:
            e.metric = name
            if not str(e).startswith("["):
                e.args = (f"[{name}] {e}",) + e.args[1:]
            raise

    score_fv = tagged("factor_vae", factor_vae_score, fn, dataset, cfg, fv_rng)
    rep = encode_dataset(fn, dataset, cfg.mig_samples, enc_rng)
    d_score, completeness, informativeness = tagged("dci", dci, rep, cfg, dci_rng)
    return MetricReport(
        factor_vae=score_fv,
        sap=tagged("sap", sap, rep, cfg),
        dci=d_score,
        irs=tagged("irs", irs, rep, cfg),
        mig=tagged("mig", mig, rep, cfg),
        dci_completeness=completeness,
        dci_informativeness=informativeness,
    )
