"""Embedding extraction and the scoring chain: centering, discriminant
projection, length normalization, a two-covariance generative scorer, and
equal-weight score fusion.

Scoring follows the usual generative recipe: an embedding is a speaker
variable with between-class covariance plus a session variable with
within-class covariance.  The verification score is the log-likelihood ratio
between the shared-speaker and independent-speaker hypotheses, computed in
closed form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .model import Model
from .numerics import as_f64, require
from .serialize import FormatError, atomic_write_text, read_records, write_records

LDA_RIDGE = 1e-6          # scaled by trace/dim of the within scatter
COVARIANCE_FLOOR = 1e-8   # minimum eigenvalue kept in the PLDA covariances


class EmbeddingTable:
    """Ordered (utt_id, vector) pairs with a uniform dimension."""

    def __init__(self, ids: list[str], vectors: np.ndarray):
        vectors = as_f64(vectors)
        require(vectors.ndim == 2 and vectors.shape[0] == len(ids),
                "need one vector per utterance id")
        require(len(ids) == len(set(ids)), "utterance ids must be unique")
        self.ids = list(ids)
        self.vectors = vectors
        self._index = {utt_id: i for i, utt_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._index:
            raise KeyError(f"no embedding for utterance {utt_id!r}")
        return self.vectors[self._index[utt_id]]

    def select(self, utt_ids: list[str]) -> np.ndarray:
        return np.stack([self.vector(u) for u in utt_ids])

    def save(self, path: str) -> None:
        header = {"kind": "embeddings", "dim": int(self.dim)}
        write_records(path, header, [(u, self.vectors[i]) for i, u in enumerate(self.ids)])

    @classmethod
    def load(cls, path: str) -> "EmbeddingTable":
        header, records = read_records(path)
        if header.get("kind") != "embeddings":
            raise FormatError(f"{path}: not an embedding table")
        ids = [name for name, _ in records]
        return cls(ids, np.stack([vec for _, vec in records]))


def extract_embeddings(model: Model, corpus) -> EmbeddingTable:
    """Inference-mode embeddings over full, uncropped utterances."""
    ids = []
    vectors = []
    for utt in corpus.utterances:
        feats = corpus.features(utt.utt_id)
        if feats.shape[0] < model.min_frames:
            raise ValueError(f"utterance {utt.utt_id!r} has {feats.shape[0]} frames, "
                             f"below the model minimum of {model.min_frames}")
        emb = model.forward(feats[None], mode="infer", head="embedding")[0]
        ids.append(utt.utt_id)
        vectors.append(emb)
    return EmbeddingTable(ids, np.stack(vectors))


# ---------------------------------------------------------------------------
# centering + discriminant projection + length normalization
# ---------------------------------------------------------------------------


@dataclass
class PreprocessTransform:
    mean: np.ndarray         # (dim,)
    projection: np.ndarray   # (dim, lda_dim)


def _scatter_matrices(x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    classes = np.unique(labels)
    dim = x.shape[1]
    overall = x.mean(axis=0)
    within = np.zeros((dim, dim))
    between = np.zeros((dim, dim))
    for c in classes:
        rows = x[labels == c]
        mu = rows.mean(axis=0)
        centered = rows - mu
        within += centered.T @ centered
        offset = mu - overall
        between += rows.shape[0] * np.outer(offset, offset)
    within /= x.shape[0]
    between /= x.shape[0]
    return within, between


def preprocess_fit(vectors, labels, lda_dim: int) -> PreprocessTransform:
    """Fit centering plus a Fisher discriminant projection on labeled
    training embeddings.  A small ridge keeps the within scatter invertible."""
    x = as_f64(vectors)
    labels = np.asarray(labels)
    require(x.ndim == 2 and x.shape[0] == labels.shape[0], "need one label per vector")
    n_classes = len(np.unique(labels))
    limit = min(x.shape[1], n_classes - 1)
    require(1 <= lda_dim <= limit,
            f"lda_dim={lda_dim} must lie in [1, {limit}] for {n_classes} classes "
            f"of dimension {x.shape[1]}")
    mean = x.mean(axis=0)
    within, between = _scatter_matrices(x - mean, labels)
    ridge = LDA_RIDGE * np.trace(within) / within.shape[0]
    within = within + max(ridge, LDA_RIDGE) * np.eye(within.shape[0])
    eigvals, eigvecs = scipy.linalg.eigh(between, within)
    order = np.argsort(eigvals)[::-1][:lda_dim]
    projection = eigvecs[:, order]
    # deterministic sign convention: largest-magnitude component positive
    for j in range(projection.shape[1]):
        k = int(np.argmax(np.abs(projection[:, j])))
        if projection[k, j] < 0:
            projection[:, j] = -projection[:, j]
    return PreprocessTransform(mean=mean, projection=projection)


def preprocess_apply(transform: PreprocessTransform, vectors) -> np.ndarray:
    """Center, project, then scale each vector to unit Euclidean norm."""
    x = as_f64(vectors)
    single = x.ndim == 1
    if single:
        x = x[None]
    require(x.shape[1] == transform.mean.shape[0],
            f"vectors have dim {x.shape[1]}, transform expects {transform.mean.shape[0]}")
    projected = (x - transform.mean) @ transform.projection
    norms = np.linalg.norm(projected, axis=1, keepdims=True)
    norms = np.where(norms == 0.0, 1.0, norms)
    out = projected / norms
    return out[0] if single else out


# ---------------------------------------------------------------------------
# two-covariance generative model
# ---------------------------------------------------------------------------


@dataclass
class PldaModel:
    mean: np.ndarray      # (dim,)
    between: np.ndarray   # (dim, dim) speaker covariance
    within: np.ndarray    # (dim, dim) session covariance
    em_loglik: list = field(default_factory=list)   # total log-likelihood per EM pass

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def _class_stats(x: np.ndarray, labels: np.ndarray):
    stats = []
    for c in np.unique(labels):
        rows = x[labels == c]
        mean = rows.mean(axis=0)
        centered = rows - mean
        stats.append((rows.shape[0], mean, centered.T @ centered))
    return stats


def _total_loglik(stats, mean_all, between, within) -> float:
    """Exact marginal log-likelihood of the two-covariance model.

    Per class with n observations: the scaled class mean is Gaussian with
    covariance within + n * between, and the n-1 within-class deviation
    directions are i.i.d. with the within covariance.
    """
    dim = between.shape[0]
    log2pi = np.log(2.0 * np.pi)
    sign_w, logdet_w = np.linalg.slogdet(within)
    require(sign_w > 0, "within covariance must be positive definite")
    win_inv = np.linalg.inv(within)
    total = 0.0
    for n, class_mean, scatter in stats:
        pooled = within + n * between
        sign_p, logdet_p = np.linalg.slogdet(pooled)
        require(sign_p > 0, "pooled covariance must be positive definite")
        diff = class_mean - mean_all
        quad = n * float(diff @ np.linalg.solve(pooled, diff))
        total += -0.5 * (dim * log2pi + logdet_p + quad)
        total += -0.5 * ((n - 1) * dim * log2pi + (n - 1) * logdet_w
                         + float(np.sum(win_inv * scatter)))
    return total


def plda_train(vectors, labels, iterations: int = 15) -> PldaModel:
    """Fit the two-covariance model by EM.

    The recorded ``em_loglik`` sequence (one entry per pass, plus the final
    state) is non-decreasing.  With a single class the speaker covariance is
    zero and a warning is issued instead of failing.
    """
    x = as_f64(vectors)
    labels = np.asarray(labels)
    require(x.ndim == 2 and x.shape[0] == labels.shape[0], "need one label per vector")
    mean_all = x.mean(axis=0)
    stats = _class_stats(x, labels)
    dim = x.shape[1]
    if len(stats) < 2:
        warnings.warn("single-class input: speaker covariance set to zero", stacklevel=2)
        centered = x - mean_all
        within = _floor_covariance(centered.T @ centered / x.shape[0], COVARIANCE_FLOOR)
        return PldaModel(mean=mean_all, between=np.zeros((dim, dim)), within=within)
    # moment-based initialization
    class_means = np.stack([m for _, m, _ in stats])
    between = _floor_covariance(np.cov(class_means.T, bias=True).reshape(dim, dim),
                                COVARIANCE_FLOOR)
    within = _floor_covariance(
        sum(s for _, _, s in stats) / x.shape[0], COVARIANCE_FLOOR)
    model = PldaModel(mean=mean_all, between=between, within=within)
    model.em_loglik.append(_total_loglik(stats, mean_all, between, within))
    n_total = x.shape[0]
    for _ in range(iterations):
        win_inv = np.linalg.inv(within)
        bet_inv = np.linalg.inv(between)
        new_between = np.zeros((dim, dim))
        new_within = np.zeros((dim, dim))
        for n, class_mean, scatter in stats:
            precision = bet_inv + n * win_inv
            posterior_cov = np.linalg.inv(precision)
            posterior_mean = posterior_cov @ (win_inv @ (n * (class_mean - mean_all)))
            new_between += posterior_cov + np.outer(posterior_mean, posterior_mean)
            resid = class_mean - mean_all - posterior_mean
            new_within += scatter + n * (np.outer(resid, resid) + posterior_cov)
        between = _floor_covariance(new_between / len(stats), COVARIANCE_FLOOR)
        within = _floor_covariance(new_within / n_total, COVARIANCE_FLOOR)
        model.between, model.within = between, within
        model.em_loglik.append(_total_loglik(stats, mean_all, between, within))
    return model


class PldaScorer:
    """Closed-form log-likelihood-ratio scorer for a two-covariance model.

    With centered vectors e and t, total covariance A = between + within and
    D = A - between A^-1 between:

        llr = 0.5 e'Qe + 0.5 t'Qt + e'Pt + 0.5 log(|A| / |D|)
        Q = A^-1 - D^-1,  P = D^-1 between A^-1
    """

    def __init__(self, model: PldaModel):
        self.mean = model.mean
        dim = model.dim
        if not np.any(model.between):
            # both hypotheses coincide: every pair scores zero
            self.quad = np.zeros((dim, dim))
            self.cross = np.zeros((dim, dim))
            self.offset = 0.0
            return
        total = model.between + model.within
        tot_inv_b = np.linalg.solve(total, model.between)          # A^-1 B
        diff = total - model.between @ tot_inv_b                   # A - B A^-1 B
        diff_inv = np.linalg.inv(diff)
        quad = np.linalg.inv(total) - diff_inv
        cross = diff_inv @ tot_inv_b.T                             # D^-1 B A^-1
        self.quad = 0.5 * (quad + quad.T)
        self.cross = 0.5 * (cross + cross.T)
        sign_a, logdet_a = np.linalg.slogdet(total)
        sign_d, logdet_d = np.linalg.slogdet(diff)
        require(sign_a > 0 and sign_d > 0, "scorer covariances must be positive definite")
        self.offset = 0.5 * (logdet_a - logdet_d)

    def score(self, enroll, test) -> float:
        enroll = as_f64(enroll)
        test = as_f64(test)
        require(enroll.shape == test.shape == self.mean.shape,
                f"vector dims {enroll.shape}/{test.shape} do not match model dim "
                f"{self.mean.shape}")
        e = enroll - self.mean
        t = test - self.mean
        return float(0.5 * e @ self.quad @ e + 0.5 * t @ self.quad @ t
                     + e @ self.cross @ t + self.offset)

    def score_pairs(self, enroll_rows, test_rows) -> np.ndarray:
        e = as_f64(enroll_rows) - self.mean
        t = as_f64(test_rows) - self.mean
        quad_e = 0.5 * np.einsum("ij,ij->i", e @ self.quad, e)
        quad_t = 0.5 * np.einsum("ij,ij->i", t @ self.quad, t)
        cross = np.einsum("ij,ij->i", e @ self.cross, t)
        return quad_e + quad_t + cross + self.offset


def plda_score(model: PldaModel, enroll, test) -> float:
    """Log-likelihood ratio of same-speaker versus different-speaker."""
    return PldaScorer(model).score(enroll, test)


# ---------------------------------------------------------------------------
# score lists and fusion
# ---------------------------------------------------------------------------


def fuse_scores(score_lists: list[list[tuple[str, str, float]]]) -> list[tuple[str, str, float]]:
    """Per-trial arithmetic mean of the input score lists.

    All lists must cover exactly the same trial keys; the fused output keeps
    the first list's order.
    """
    require(len(score_lists) >= 1, "need at least one score list")
    base = score_lists[0]
    base_keys = [(e, t) for e, t, _ in base]
    key_set = set(base_keys)
    require(len(key_set) == len(base_keys), "duplicate trials in the first score list")
    maps = []
    for i, scores in enumerate(score_lists):
        table = {(e, t): s for e, t, s in scores}
        require(len(table) == len(scores), f"duplicate trials in score list {i}")
        missing = key_set - set(table)
        extra = set(table) - key_set
        if missing or extra:
            offender = sorted(missing or extra)[0]
            kind = "missing" if missing else "extra"
            raise ValueError(f"score list {i} has {kind} trial {offender[0]} {offender[1]}")
        maps.append(table)
    return [(e, t, sum(m[(e, t)] for m in maps) / len(maps)) for e, t in base_keys]


def write_scores(path: str, scores: list[tuple[str, str, float]]) -> None:
    atomic_write_text(path, "".join(f"{e} {t} {s:.6f}\n" for e, t, s in scores))


def read_scores(path: str) -> list[tuple[str, str, float]]:
    out = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{line_no}: expected 'enroll test score', got {line!r}")
            out.append((parts[0], parts[1], float(parts[2])))
    return out


# ---------------------------------------------------------------------------
# backend persistence
# ---------------------------------------------------------------------------


def save_backend(path: str, transform: PreprocessTransform, plda: PldaModel) -> None:
    header = {"kind": "backend", "lda_dim": int(transform.projection.shape[1])}
    records = [
        ("center_mean", transform.mean),
        ("projection", transform.projection),
        ("plda_mean", plda.mean),
        ("plda_between", plda.between),
        ("plda_within", plda.within),
    ]
    write_records(path, header, records)


def load_backend(path: str) -> tuple[PreprocessTransform, PldaModel]:
    header, records = read_records(path)
    if header.get("kind") != "backend":
        raise FormatError(f"{path}: not a backend model")
    by_name = dict(records)
    try:
        transform = PreprocessTransform(mean=by_name["center_mean"],
                                        projection=by_name["projection"])
        plda = PldaModel(mean=by_name["plda_mean"], between=by_name["plda_between"],
                         within=by_name["plda_within"])
    except KeyError as exc:
        raise FormatError(f"{path}: missing backend record {exc}") from exc
    return transform, plda
