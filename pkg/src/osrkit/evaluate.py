"""Evaluation protocol: ROC with partial AUC at an FPR cap, known/unknown
F1 decomposition, openness, multi-run experiment driving, and Welch tests.

The unknown class is always the ROC-positive class. Partial AUC is the
unnormalised area over FPR in [0, cap], so its maximum equals the cap.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as _scipy_stats

from .dataio import RawDataset, make_open_set_split
from .osr import predict_batch
from .train import (
    Checkpoint,
    PrototypeSet,
    TrainConfig,
    compute_prototypes,
    derive_seed,
    encode_images,
    finetune,
    pretrain,
    rebuild_encoder,
    rebuild_head,
)

HISTOGRAM_BINS = 50


@dataclass
class RocCurve:
    """Monotone (FPR, TPR) steps from a descending threshold sweep,
    including the (0,0) and (1,1) endpoints; ties are grouped."""

    points: np.ndarray  # (K, 2)


def roc_curve(scores_known: np.ndarray, scores_unknown: np.ndarray) -> RocCurve:
    scores_known = np.asarray(scores_known, dtype=np.float64)
    scores_unknown = np.asarray(scores_unknown, dtype=np.float64)
    if scores_known.size == 0 or scores_unknown.size == 0:
        raise ValueError("both score vectors must be nonempty")
    scores = np.concatenate([scores_known, scores_unknown])
    positive = np.concatenate([np.zeros(len(scores_known), dtype=bool),
                               np.ones(len(scores_unknown), dtype=bool)])
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = positive[order]
    # last index of each tie group
    change = np.flatnonzero(np.diff(sorted_scores))
    group_ends = np.r_[change, len(scores) - 1]
    tp = np.cumsum(sorted_pos)[group_ends]
    fp = (group_ends + 1) - tp
    tpr = tp / len(scores_unknown)
    fpr = fp / len(scores_known)
    points = np.vstack([[0.0, 0.0], np.column_stack([fpr, tpr])])
    return RocCurve(points=points)


def auc_at_fpr(curve: RocCurve, cap: float = 1.0) -> float:
    """Unnormalised trapezoidal area of the curve over FPR in [0, cap],
    linearly interpolated at the cap boundary. cap=1 is the standard AUC."""
    if not 0.0 < cap <= 1.0:
        raise ValueError("cap must be in (0, 1]")
    pts = curve.points
    x0, y0 = pts[:-1, 0], pts[:-1, 1]
    x1, y1 = pts[1:, 0], pts[1:, 1]
    dx = x1 - x0
    with np.errstate(invalid="ignore", divide="ignore"):
        slope = np.where(dx > 0, (y1 - y0) / np.where(dx > 0, dx, 1.0), 0.0)
    xc0 = np.clip(x0, 0.0, cap)
    xc1 = np.clip(x1, 0.0, cap)
    yc0 = y0 + slope * (xc0 - x0)
    yc1 = y0 + slope * (xc1 - x0)
    return float(((xc1 - xc0) * (yc0 + yc1) / 2.0).sum())


def pairwise_auc(scores_known: np.ndarray, scores_unknown: np.ndarray) -> float:
    """Exact AUC by pair counting: P(u > k) + 0.5 P(u = k)."""
    k = np.asarray(scores_known)[:, None]
    u = np.asarray(scores_unknown)[None, :]
    wins = (u > k).sum() + 0.5 * (u == k).sum()
    return float(wins / (k.size * u.size))


def confusion_matrix(true_labels: np.ndarray, decisions: np.ndarray,
                     num_known: int) -> np.ndarray:
    """(C+1) x (C+1) counts; rows are true labels, columns decisions, with
    index C standing for the unknown class on both axes."""
    c = num_known + 1
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (true_labels, decisions), 1)
    return cm


@dataclass
class F1Scores:
    per_class: np.ndarray
    known: float
    unknown: float
    overall: float


def f1_decomposition(confusion: np.ndarray) -> F1Scores:
    """One-vs-rest F1 per label over the C+1 decision classes; macro means
    over the known classes and over all classes. Labels with zero predicted
    and zero actual positives score 0 by convention."""
    diag = np.diag(confusion).astype(np.float64)
    col = confusion.sum(axis=0).astype(np.float64)
    row = confusion.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col > 0, diag / np.where(col > 0, col, 1.0), 0.0)
        recall = np.where(row > 0, diag / np.where(row > 0, row, 1.0), 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    return F1Scores(per_class=f1, known=float(f1[:-1].mean()),
                    unknown=float(f1[-1]), overall=float(f1.mean()))


def openness(n_train: int, n_test: int, n_target: int) -> float:
    """1 - sqrt(2 * n_train / (n_test + n_target))."""
    if min(n_train, n_test, n_target) < 1:
        raise ValueError("all class counts must be >= 1")
    radicand = 2.0 * n_train / (n_test + n_target)
    if radicand > 1.0:
        raise ValueError("2 * n_train must not exceed n_test + n_target")
    return 1.0 - float(np.sqrt(radicand))


@dataclass
class WelchResult:
    t: float
    df: float
    p: float


def welch_t_test(sample_a, sample_b) -> WelchResult:
    """Welch's unequal-variance two-sample test, two-sided p-value.

    Degenerate inputs (both samples constant) resolve by convention:
    equal means give p=1, different means p=0.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("both samples need at least 2 observations")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = len(a), len(b)
    se2 = va / na + vb / nb
    if se2 == 0.0:
        same = a.mean() == b.mean()
        return WelchResult(t=0.0 if same else np.inf * np.sign(a.mean() - b.mean()),
                           df=float(na + nb - 2), p=1.0 if same else 0.0)
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * float(_scipy_stats.t.sf(abs(t), df))
    return WelchResult(t=float(t), df=float(df), p=p)


@dataclass
class ScoreHistograms:
    edges: np.ndarray
    known: np.ndarray
    unknown: np.ndarray


def score_histograms(scores_known: np.ndarray, scores_unknown: np.ndarray,
                     bins: int = HISTOGRAM_BINS) -> ScoreHistograms:
    """Uniform-bin histograms of outlier scores over the pooled range."""
    pooled = np.concatenate([scores_known, scores_unknown])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, bins + 1)
    known, _ = np.histogram(scores_known, bins=edges)
    unknown, _ = np.histogram(scores_unknown, bins=edges)
    return ScoreHistograms(edges=edges, known=known, unknown=unknown)


@dataclass
class EvalReport:
    """Per-run metrics plus the raw arrays needed for analysis exports."""

    auc_100: float
    auc_10: float
    f1_per_class: list[float]
    f1_known: float
    f1_unknown: float
    f1_overall: float
    confusion: np.ndarray
    histograms: ScoreHistograms
    openness: float
    metadata: dict = field(default_factory=dict)
    # analysis payload (not part of the JSON summary)
    representations: np.ndarray | None = None
    true_labels: np.ndarray | None = None
    decisions: np.ndarray | None = None
    outlier_scores: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        return {
            "auc_100": self.auc_100,
            "auc_10": self.auc_10,
            "f1_per_class": list(map(float, self.f1_per_class)),
            "f1_known": self.f1_known,
            "f1_unknown": self.f1_unknown,
            "f1_overall": self.f1_overall,
            "confusion": self.confusion.tolist(),
            "histogram": {
                "edges": self.histograms.edges.tolist(),
                "known": self.histograms.known.tolist(),
                "unknown": self.histograms.unknown.tolist(),
            },
            "openness": self.openness,
            "metadata": self.metadata,
        }


def evaluate_model(ckpt: Checkpoint, protos: PrototypeSet, split,
                   metadata: dict | None = None) -> EvalReport:
    """Run the decision rule over the full test partition and assemble all
    per-run metrics. Uses the classification head for class probabilities
    when the checkpoint has one, prototype distances otherwise."""
    encoder = rebuild_encoder(ckpt)
    reps = encode_images(encoder, split, "test")
    mode = "head" if ckpt.has_net("head") else "distance"
    logits = rebuild_head(ckpt).forward(reps) if mode == "head" else None
    scores, _, decisions = predict_batch(protos, reps, logits=logits, mode=mode)

    true = split.test_labels
    unknown = split.unknown_label
    cm = confusion_matrix(true, decisions, split.num_known)
    f1 = f1_decomposition(cm)
    known_mask = true != unknown
    curve = roc_curve(scores[known_mask], scores[~known_mask])
    meta = dict(metadata or {})
    meta.setdefault("mode", mode)
    meta.setdefault("threshold", float(protos.threshold))
    meta.setdefault("known_classes", list(split.known_classes))
    report = EvalReport(
        auc_100=auc_at_fpr(curve, 1.0),
        auc_10=auc_at_fpr(curve, 0.10),
        f1_per_class=[float(v) for v in f1.per_class],
        f1_known=f1.known,
        f1_unknown=f1.unknown,
        f1_overall=f1.overall,
        confusion=cm,
        histograms=score_histograms(scores[known_mask], scores[~known_mask]),
        openness=openness(split.num_known, split.num_test_classes, split.num_known + 1),
        metadata=meta,
        representations=reps,
        true_labels=true,
        decisions=decisions,
        outlier_scores=scores,
    )
    return report


AGGREGATE_METRICS = ("auc_100", "auc_10", "f1_known", "f1_unknown", "f1_overall")


@dataclass
class AggregateResult:
    """Mean/std per metric over a declared run set, plus the raw values."""

    arm: dict
    n_runs: int
    means: dict[str, float]
    stds: dict[str, float]
    values: dict[str, list[float]]
    wall_clock: dict[str, float] = field(default_factory=dict)
    reports: list[EvalReport] = field(default_factory=list, repr=False)

    @classmethod
    def from_reports(cls, arm: dict, reports: list[EvalReport],
                     wall_clock: dict[str, float] | None = None) -> "AggregateResult":
        values = {m: [float(getattr(r, m)) for r in reports] for m in AGGREGATE_METRICS}
        return cls(
            arm=arm,
            n_runs=len(reports),
            means={m: float(np.mean(v)) for m, v in values.items()},
            stds={m: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
                  for m, v in values.items()},
            values=values,
            wall_clock=wall_clock or {},
        )


def significance_vs_baseline(result: AggregateResult, baseline: AggregateResult,
                             alpha: float = 0.05) -> dict[str, dict]:
    """Welch test per metric against a baseline arm; marks improvements
    that are significant at the given level."""
    out = {}
    for metric in AGGREGATE_METRICS:
        a, b = result.values[metric], baseline.values[metric]
        if len(a) < 2 or len(b) < 2:
            out[metric] = {"p": None, "significant_improvement": False}
            continue
        res = welch_t_test(a, b)
        out[metric] = {
            "p": res.p,
            "t": res.t,
            "significant_improvement": bool(res.p < alpha and np.mean(a) > np.mean(b)),
        }
    return out


def run_cell(ds_train: RawDataset, ds_test: RawDataset, config: TrainConfig,
             num_known: int, split_seed: int, contamination: float = 0.01,
             metadata: dict | None = None) -> EvalReport:
    """One full pipeline cell: split, (optional) pre-train, fine-tune,
    prototypes, evaluate."""
    split = make_open_set_split(ds_train, ds_test, num_known=num_known, seed=split_seed)
    timings = {}
    init = None
    if config.pretrain_method != "none":
        t0 = time.perf_counter()
        init = pretrain(split, config)
        timings["pretrain_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ckpt = finetune(split, config, init)
    timings["finetune_seconds"] = time.perf_counter() - t0
    protos = compute_prototypes(ckpt, split, contamination)
    meta = dict(metadata or {})
    meta.update({
        "pretrain": config.pretrain_method,
        "loss": config.finetune_loss,
        "seed": config.seed,
        "split_seed": split_seed,
        "timings": timings,
    })
    return evaluate_model(ckpt, protos, split, metadata=meta)


def run_experiment(ds_train: RawDataset, ds_test: RawDataset, config: TrainConfig,
                   num_known: int = 6, groups: int = 3, runs_per_group: int = 10,
                   base_seed: int = 0, contamination: float = 0.01,
                   progress=None) -> AggregateResult:
    """The grouped multi-run protocol for one arm: `groups` open-set draws,
    `runs_per_group` seeds each, aggregated in (group, run) order."""
    reports = []
    t_start = time.perf_counter()
    for g in range(groups):
        split_seed = derive_seed(base_seed, "group", g)
        for r in range(runs_per_group):
            run_seed = derive_seed(base_seed, "cell", g, r)
            cell_cfg = replace(config, seed=run_seed)
            report = run_cell(ds_train, ds_test, cell_cfg, num_known, split_seed,
                              contamination, metadata={"group": g, "run": r})
            reports.append(report)
            if progress is not None:
                progress(g, r, report)
    arm = {"dataset": ds_train.name, "pretrain": config.pretrain_method,
           "loss": config.finetune_loss}
    agg = AggregateResult.from_reports(arm, reports,
                                       {"total_seconds": time.perf_counter() - t_start})
    agg.reports = reports
    return agg


def openness_sweep(ds_train: RawDataset, ds_test: RawDataset, config: TrainConfig,
                   pretrain_methods=("none", "rotnet", "dtae"),
                   n_train_range=range(2, 10), groups: int = 1,
                   runs_per_group: int = 1, base_seed: int = 0,
                   contamination: float = 0.01) -> list[dict]:
    """AUC(100% FPR) against openness for each number of known classes in
    2..9, per pre-training method; n_test is 10 and n_target is n_train+1.

    Openness values are computed from the class-count formula as stated;
    the row for n_train=9 lands near 5%, not the 8% sometimes quoted for
    the sweep's lower end (8% corresponds to n_train=8)."""
    rows = []
    for n_train in n_train_range:
        for method in pretrain_methods:
            arm_cfg = replace(config, pretrain_method=method)
            agg = run_experiment(ds_train, ds_test, arm_cfg, num_known=n_train,
                                 groups=groups, runs_per_group=runs_per_group,
                                 base_seed=base_seed, contamination=contamination)
            rows.append({
                "n_train": n_train,
                "n_test": 10,
                "n_target": n_train + 1,
                "openness": openness(n_train, 10, n_train + 1),
                "method": method,
                "mean_auc_100": agg.means["auc_100"],
                "std_auc_100": agg.stds["auc_100"],
                "runs": agg.n_runs,
            })
    return rows
