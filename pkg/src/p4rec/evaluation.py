"""Model-based evaluation: reward-model scores, relative metrics against a baseline, ablations and reports."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .lm import ContextBatch, PolicyModel, sample_responses
from .rewards import KINDS, RewardBundle, RewardWeights, terminal_rewards

SCHEMA_VERSION = 1
METRICS = KINDS + ("joint",)


@dataclass
class TestSet:
    pairs: list[tuple[int, int]]  # (user, item)
    contexts: ContextBatch
    item_texts: list[str]

    __test__ = False  # not a pytest class

    def __len__(self) -> int:
        return len(self.pairs)

    def check_disjoint(self, train_pairs) -> None:
        overlap = set(map(tuple, self.pairs)) & set(map(tuple, train_pairs))
        if overlap:
            raise ValueError(f"test set shares {len(overlap)} (user, item) pairs with training data")


@dataclass
class Decoded:
    tokens: list[list[int]]
    texts: list[str]
    scores: dict[str, np.ndarray]


def model_based_eval(policy: PolicyModel, bundle: RewardBundle, testset: TestSet, mode: str = "greedy",
                     temperature: float = 1.0, seed: int = 0, batch_size: int = 100,
                     weights: RewardWeights | None = None) -> Decoded:
    """Decode one response per test context and score it with every reward model.

    Returns length-M vectors for NLI, App, Per, Prel and the joint reward
    (which includes the truncation penalty).
    """
    bundle.check_trained()
    if len(testset) == 0:
        raise ValueError("empty test set")
    toks: list[list[int]] = []
    comps, joint = [], []
    for s in range(0, len(testset), batch_size):
        idx = np.arange(s, min(s + batch_size, len(testset)))
        batch = testset.contexts.take(idx)
        samples = sample_responses(policy, batch, mode, temperature, seed=seed + s)
        seqs = [x.tokens for x in samples]
        per_step, c = terminal_rewards(bundle, seqs, [testset.item_texts[k] for k in idx], batch.i_vecs,
                                       batch.u_vecs, weights, return_components=True)
        toks += seqs
        comps.append(c)
        joint += [float(r.sum()) for r in per_step]
    comps = np.concatenate(comps)
    scores = {k: comps[:, j] for j, k in enumerate(KINDS)}
    scores["joint"] = np.array(joint)
    return Decoded(toks, [bundle.vocab.decode(t) for t in toks], scores)


def mean_stderr(v: Sequence[float]) -> tuple[float, float]:
    """Sample mean and std/√M (ddof 1); the error is 0 for a single value."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("empty score vector")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def _pair(candidate, baseline) -> tuple[np.ndarray, np.ndarray]:
    c, b = np.asarray(candidate, dtype=float), np.asarray(baseline, dtype=float)
    if c.shape != b.shape:
        raise ValueError(f"length mismatch: {c.shape} vs {b.shape}")
    if c.size == 0:
        raise ValueError("empty score vectors")
    return c, b


def win_rate(candidate, baseline) -> float:
    """Fraction of contexts where the candidate's score is strictly larger; ties are losses."""
    c, b = _pair(candidate, baseline)
    return float(np.mean(c > b))


class Increase(NamedTuple):
    absolute: float
    percentage: float
    excluded: int


def score_increases(candidate, baseline) -> Increase:
    """Mean of (c − b) and mean of (c − b)/|b| × 100.

    Entries with a zero baseline are left out of the percentage and counted
    in ``excluded``.
    """
    c, b = _pair(candidate, baseline)
    absolute = float(np.mean(c - b))
    keep = b != 0
    excluded = int((~keep).sum())
    if excluded:
        warnings.warn(f"{excluded} zero-baseline entries excluded from percentage increase", stacklevel=2)
    pct = float(np.mean((c[keep] - b[keep]) / np.abs(b[keep]) * 100.0)) if keep.any() else float("nan")
    return Increase(absolute, pct, excluded)


@dataclass
class MetricSummary:
    mean: float
    stderr: float
    win_rate: float | None = None
    absolute_increase: float | None = None
    percentage_increase: float | None = None
    percentage_excluded: int = 0


@dataclass
class EvalReport:
    model: str
    n_contexts: int
    metrics: dict[str, MetricSummary]
    baseline: str | None = None
    config_fingerprint: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = {k: asdict(v) for k, v in self.metrics.items()}
        return d


def build_report(model: str, scores: dict[str, np.ndarray], baseline_scores: dict[str, np.ndarray] | None = None,
                 baseline: str | None = None, fingerprint: str = "", seed: int = 0) -> EvalReport:
    metrics = {}
    M = None
    for k, v in scores.items():
        v = np.asarray(v, dtype=float)
        M = len(v) if M is None else M
        if len(v) != M:
            raise ValueError("score vectors of different lengths")
        m, se = mean_stderr(v)
        s = MetricSummary(m, se)
        if baseline_scores is not None:
            s.win_rate = win_rate(v, baseline_scores[k])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                inc = score_increases(v, baseline_scores[k])
            s.absolute_increase, s.percentage_increase, s.percentage_excluded = inc
        metrics[k] = s
    return EvalReport(model, int(M or 0), metrics, baseline, fingerprint, seed)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

SINGLE_RM = {k: RewardWeights(*np.eye(4)[j]) for j, k in enumerate(KINDS)}


@dataclass
class AblationResult:
    runs: list[str]
    metrics: list[str]
    means: np.ndarray  # runs x metrics
    reports: list[EvalReport]

    def diagonal(self) -> dict[str, bool]:
        """For each single-RM run, whether it scores highest on its own metric among the runs."""
        out = {}
        for r, name in enumerate(self.runs):
            if name in self.metrics:
                col = self.means[:, self.metrics.index(name)]
                out[name] = bool(col[r] == col.max() and (col == col.max()).sum() == 1)
        return out


def ablation_grid(mode: str, train_fn: Callable[[RewardWeights, str], object],
                  eval_fn: Callable[[object], dict[str, np.ndarray]], budget: int,
                  etas: Sequence[Sequence[float]] | None = None,
                  baseline_scores: dict[str, np.ndarray] | None = None, fingerprint: str = "",
                  seed: int = 0) -> AblationResult:
    """Fine-tune one policy per weight vector and evaluate each.

    ``mode="single"`` runs the four single-reward-model weightings; ``"eta"``
    sweeps ``etas``. ``train_fn(weights, name)`` returns a policy trained for
    ``budget`` updates with shared seeds; ``eval_fn(policy)`` returns score
    vectors keyed by metric.
    """
    if budget < 1:
        raise ValueError("budget insufficient for one fine-tuning run")
    if mode == "single":
        grid = list(SINGLE_RM.items())
    elif mode == "eta":
        if not etas:
            raise ValueError("eta mode needs at least one weight vector")
        grid = [(",".join(f"{x:g}" for x in e), RewardWeights.parse(e)) for e in etas]
    else:
        raise ValueError(f"unknown ablation mode {mode!r}")
    reports, rows = [], []
    for name, w in grid:
        scores = eval_fn(train_fn(w, name))
        rep = build_report(name, scores, baseline_scores, "anchor" if baseline_scores else None, fingerprint, seed)
        rep.extra["weights"] = w.as_array().tolist()
        reports.append(rep)
        rows.append([rep.metrics[m].mean for m in KINDS])
    return AblationResult([n for n, _ in grid], list(KINDS), np.array(rows), reports)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def report_document(reports: Sequence[EvalReport], ablation: AblationResult | None = None, meta: dict | None = None
                    ) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "reports": [r.to_dict() for r in reports]}
    if ablation is not None:
        doc["ablation"] = {"runs": ablation.runs, "metrics": ablation.metrics,
                           "means": ablation.means.tolist(), "diagonal": ablation.diagonal(),
                           "reports": [r.to_dict() for r in ablation.reports]}
    if meta:
        doc["meta"] = meta
    return doc


def validate_report_document(doc: dict) -> None:
    """Structural check of a report document; raises ValueError on the first problem."""
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError("unsupported or missing schema_version")
    if not isinstance(doc.get("reports"), list) or not doc["reports"]:
        raise ValueError("reports must be a non-empty list")
    for r in doc["reports"] + doc.get("ablation", {}).get("reports", []):
        for key, typ in (("model", str), ("n_contexts", int), ("metrics", dict), ("seed", int)):
            if not isinstance(r.get(key), typ):
                raise ValueError(f"report field {key!r} missing or not {typ.__name__}")
        for name, m in r["metrics"].items():
            if not isinstance(m.get("mean"), (int, float)) or not isinstance(m.get("stderr"), (int, float)):
                raise ValueError(f"metric {name!r} lacks mean/stderr")
            wr = m.get("win_rate")
            if wr is not None and not 0.0 <= wr <= 1.0:
                raise ValueError(f"win rate of {name!r} outside [0, 1]")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def emit_report(reports: Sequence[EvalReport], out_dir: str | Path, formats: Sequence[str] = ("json", "csv", "svg"),
                ablation: AblationResult | None = None, meta: dict | None = None) -> dict[str, Path]:
    """Write report.json, report.csv and winrates.svg (plus ablation.svg when given)."""
    if not reports:
        raise ValueError("need at least one report")
    bad = set(formats) - {"json", "csv", "svg"}
    if bad:
        raise ValueError(f"unknown report formats {sorted(bad)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    if "json" in formats:
        doc = report_document(reports, ablation, meta)
        validate_report_document(doc)
        paths["json"] = out_dir / "report.json"
        paths["json"].write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default) + "\n")
    if "csv" in formats:
        paths["csv"] = out_dir / "report.csv"
        paths["csv"].write_text(report_csv(reports))
    if "svg" in formats:
        paths["svg"] = out_dir / "winrates.svg"
        plot_win_rates(reports, paths["svg"])
        if ablation is not None:
            paths["ablation_svg"] = out_dir / "ablation.svg"
            plot_ablation(ablation, paths["ablation_svg"])
    return paths


CSV_FIELDS = ("model", "metric", "mean", "stderr", "win_rate", "absolute_increase", "percentage_increase",
              "percentage_excluded")


def report_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        for name, m in r.metrics.items():
            row = asdict(m)
            w.writerow([r.model, name] + ["" if row[k] is None else repr(float(row[k])) if k != "percentage_excluded"
                                          else row[k] for k in CSV_FIELDS[2:]])
    return buf.getvalue()


def _figure_setup():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "p4rec"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def plot_win_rates(reports: Sequence[EvalReport], path: str | Path) -> None:
    """Grouped bars: win rate per reward model for each model that has a baseline."""
    plt = _figure_setup()
    rows = [r for r in reports if r.baseline is not None]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / max(len(rows), 1)
    x = np.arange(len(METRICS))
    for k, r in enumerate(rows):
        vals = [r.metrics[m].win_rate if m in r.metrics and r.metrics[m].win_rate is not None else 0.0
                for m in METRICS]
        ax.bar(x + k * width, vals, width, label=r.model)
    ax.axhline(0.5, color="grey", lw=0.8, ls="--")
    ax.set_xticks(x + width * (len(rows) - 1) / 2)
    ax.set_xticklabels(METRICS)
    ax.set_ylim(0, 1)
    ax.set_ylabel("win rate vs baseline")
    if rows:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_ablation(ab: AblationResult, path: str | Path) -> None:
    plt = _figure_setup()
    fig, ax = plt.subplots(figsize=(5, 4))
    z = (ab.means - ab.means.mean(axis=0)) / (ab.means.std(axis=0) + 1e-12)
    ax.imshow(z, cmap="viridis")
    ax.set_xticks(range(len(ab.metrics)))
    ax.set_xticklabels(ab.metrics)
    ax.set_yticks(range(len(ab.runs)))
    ax.set_yticklabels(ab.runs)
    for i in range(len(ab.runs)):
        for j in range(len(ab.metrics)):
            ax.text(j, i, f"{ab.means[i, j]:.3f}", ha="center", va="center", fontsize=8, color="white")
    ax.set_xlabel("reward model score")
    ax.set_ylabel("trained on")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
