"""Verification metrics: DET points, equal error rate, minimum and actual
normalized detection cost, plus the evaluation report.

All functions are pure.  The sweep convention accepts a trial when its score
is >= the threshold; thresholds run over every distinct score value plus the
two endpoint operating points (accept everything / reject everything), so a
brute-force enumeration of midpoint thresholds realizes exactly the same set
of operating points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_f64, require


@dataclass
class DcfParams:
    p_target: float
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        require(0.0 < self.p_target < 1.0, "p_target must lie in (0, 1)")
        require(self.c_miss > 0.0 and self.c_fa > 0.0, "detection costs must be positive")

    @property
    def normalizer(self) -> float:
        return min(self.c_miss * self.p_target, self.c_fa * (1.0 - self.p_target))

    @property
    def bayes_threshold(self) -> float:
        """Log-likelihood-ratio threshold minimizing expected cost."""
        return float(np.log((self.c_fa * (1.0 - self.p_target))
                            / (self.c_miss * self.p_target)))


@dataclass
class MetricConfig:
    """Settings for the evaluation report."""

    dcf_p_targets: tuple = (0.01, 0.001)
    act_p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    act_dcf_ceiling: float = 1.0

    def __post_init__(self):
        self.dcf_p_targets = tuple(float(p) for p in self.dcf_p_targets)


def _check_scores(target_scores, nontarget_scores) -> tuple[np.ndarray, np.ndarray]:
    tgt = as_f64(target_scores).ravel()
    non = as_f64(nontarget_scores).ravel()
    require(tgt.size >= 1, "need at least one target score")
    require(non.size >= 1, "need at least one nontarget score")
    require(bool(np.all(np.isfinite(tgt)) and np.all(np.isfinite(non))),
            "scores must be finite")
    return tgt, non


def det_points(target_scores, nontarget_scores):
    """Threshold sweep: returns (thresholds, p_fa, p_miss) arrays.

    Includes the endpoints (p_fa=1, p_miss=0) and (p_fa=0, p_miss=1); p_miss
    is non-decreasing and p_fa non-increasing along the sweep.
    """
    tgt, non = _check_scores(target_scores, nontarget_scores)
    tgt_sorted = np.sort(tgt)
    non_sorted = np.sort(non)
    values = np.unique(np.concatenate([tgt_sorted, non_sorted]))
    p_miss = np.searchsorted(tgt_sorted, values, side="left") / tgt.size
    p_fa = (non.size - np.searchsorted(non_sorted, values, side="left")) / non.size
    thresholds = np.concatenate([[-np.inf], values, [np.inf]])
    p_fa = np.concatenate([[1.0], p_fa, [0.0]])
    p_miss = np.concatenate([[0.0], p_miss, [1.0]])
    return thresholds, p_fa, p_miss


def eer(target_scores, nontarget_scores) -> float:
    """Rate where miss and false-alarm probabilities cross, linearly
    interpolated between the bracketing sweep points."""
    _, p_fa, p_miss = det_points(target_scores, nontarget_scores)
    diff = p_miss - p_fa   # non-decreasing along the sweep
    idx = int(np.argmax(diff >= 0.0))
    if diff[idx] == 0.0:
        return float(p_fa[idx])
    fa0, fa1 = p_fa[idx - 1], p_fa[idx]
    miss0, miss1 = p_miss[idx - 1], p_miss[idx]
    step = (miss1 - miss0) - (fa1 - fa0)
    frac = (fa0 - miss0) / step
    return float(fa0 + frac * (fa1 - fa0))


def min_dcf(target_scores, nontarget_scores, params: DcfParams) -> float:
    """Minimum over sweep thresholds of the normalized detection cost."""
    _, p_fa, p_miss = det_points(target_scores, nontarget_scores)
    costs = (params.c_miss * params.p_target * p_miss
             + params.c_fa * (1.0 - params.p_target) * p_fa)
    return float(costs.min() / params.normalizer)


def act_dcf(target_scores, nontarget_scores, params: DcfParams) -> float:
    """Normalized detection cost at the fixed Bayes threshold.

    Scores must be calibrated log-likelihood ratios for the threshold to be
    meaningful.  The value is reported unclipped and can exceed 1 for badly
    calibrated scores.
    """
    tgt, non = _check_scores(target_scores, nontarget_scores)
    theta = params.bayes_threshold
    p_miss = float(np.mean(tgt < theta))
    p_fa = float(np.mean(non >= theta))
    cost = params.c_miss * params.p_target * p_miss + params.c_fa * (1.0 - params.p_target) * p_fa
    return float(cost / params.normalizer)


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


def summarize(target_scores, nontarget_scores, cfg: MetricConfig) -> dict:
    """All report metrics for one pool of labeled scores."""
    tgt, non = _check_scores(target_scores, nontarget_scores)
    out = {
        "n_target": int(tgt.size),
        "n_nontarget": int(non.size),
        "eer": eer(tgt, non),
    }
    for p in cfg.dcf_p_targets:
        out[f"min_dcf_p{p:g}"] = min_dcf(tgt, non, DcfParams(p, cfg.c_miss, cfg.c_fa))
    act = act_dcf(tgt, non, DcfParams(cfg.act_p_target, cfg.c_miss, cfg.c_fa))
    out["act_dcf"] = act
    out["act_dcf_capped"] = min(act, cfg.act_dcf_ceiling)
    return out


def build_report(trials, score_map: dict, cfg: MetricConfig,
                 condition_of: dict | None = None) -> dict:
    """Join trials with their scores and summarize overall and per condition.

    A trial's condition is the condition of its test utterance.  Conditions
    lacking either class are reported as null rather than failing.
    """
    target_scores, nontarget_scores = [], []
    by_condition: dict[str, tuple[list, list]] = {}
    for trial in trials:
        key = (trial.enroll, trial.test)
        if key not in score_map:
            raise ValueError(f"no score for trial {trial.enroll} {trial.test}")
        score = score_map[key]
        (target_scores if trial.target else nontarget_scores).append(score)
        if condition_of is not None:
            cond = condition_of.get(trial.test, "unknown")
            bucket = by_condition.setdefault(cond, ([], []))
            (bucket[0] if trial.target else bucket[1]).append(score)
    report = {"overall": summarize(target_scores, nontarget_scores, cfg), "conditions": {}}
    for cond in sorted(by_condition):
        tgt, non = by_condition[cond]
        report["conditions"][cond] = (summarize(tgt, non, cfg) if tgt and non else None)
    return report


def _report_rows(overall: dict) -> list[tuple[str, str, float]]:
    rows = [("eer", "EER%", 100.0)]
    for key in overall:
        if key.startswith("min_dcf_p"):
            rows.append((key, f"DCF({key[len('min_dcf_p'):]})", 1.0))
    rows.append(("act_dcf", "actDCF", 1.0))
    rows.append(("act_dcf_capped", "actDCF(cap)", 1.0))
    return rows


def format_report(report: dict, title: str = "") -> str:
    """Fixed-width text table: metric rows, overall plus one column per
    condition."""
    conditions = sorted(report.get("conditions", {}))
    columns = ["overall"] + conditions
    lines = []
    if title:
        lines.append(title)
    width = max(12, *(len(c) + 2 for c in columns))
    lines.append(f"{'metric':<14}" + "".join(f"{c:>{width}}" for c in columns))
    summaries = {"overall": report["overall"]}
    summaries.update(report.get("conditions", {}))
    for key, label, scale in _report_rows(report["overall"]):
        cells = []
        for col in columns:
            summary = summaries.get(col)
            if summary is None:
                cells.append(f"{'n/a':>{width}}")
            else:
                cells.append(f"{summary[key] * scale:>{width}.4f}")
        lines.append(f"{label:<14}" + "".join(cells))
    counts = []
    for col in columns:
        summary = summaries.get(col)
        counts.append(f"{'n/a':>{width}}" if summary is None
                      else f"{summary['n_target']}/{summary['n_nontarget']}".rjust(width))
    lines.append(f"{'tar/non':<14}" + "".join(counts))
    return "\n".join(lines) + "\n"
