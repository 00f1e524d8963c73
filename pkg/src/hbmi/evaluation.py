"""Evaluation protocols: within-session CV, online transfer, context sweeps.

Accuracies are computed over windows; folds are built over trials so the
windows of one trial never straddle train and test.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .datasets import TrialSource
from .decoder import (
    CHILDREN,
    LABELS,
    LEVEL_STATES,
    MODES,
    RIGHT,
    ContextPrior,
    HierarchyModel,
    decode_batch,
    inject_context,
    label_to_path,
    mode_targets,
    path_log_prior,
    score_matrix,
    true_class,
    uniform_prior,
)
from .errors import StratificationError, ValidationError
from .pipeline import (
    FeatureCache,
    FitLog,
    PipelineConfig,
    TrialFeatures,
    fit_hierarchy,
    window_features,
    window_labels,
)

CHANCE = {"eeg4": 0.25, "emg5": 0.20, "hbmi10": 0.10}
TABLE2_ROWS = (((0, 0.75),), ((1, 0.70),), ((2, 0.65),), ((3, 0.60),))


@dataclass
class EvalProtocol:
    kind: str = "within"  # within | online | context
    folds: int = 5
    repetitions: int = 5
    test_sessions: tuple[int, ...] = (4, 5)
    context_spec: tuple[tuple[int, float], ...] = ()
    seed: int = 0
    emg_hand: str = RIGHT

    def validate(self) -> None:
        if self.kind not in ("within", "online", "context"):
            raise ValidationError(f"unknown protocol {self.kind!r}")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")
        for level, p in self.context_spec:
            if level not in LEVEL_STATES or not 0.0 <= p <= 1.0:
                raise ValidationError(f"bad context entry (level {level}, p {p})")


@dataclass
class Decision:
    trial: str
    window: int
    predicted: object
    true: object


@dataclass
class AccuracyReport:
    """Accuracy, per-class recall and confusion (rows true, columns predicted)."""

    accuracy: float
    recall: dict
    confusion: np.ndarray
    classes: list
    n_windows: int
    repetition_accuracies: list[float] = field(default_factory=list)
    decisions: list[Decision] = field(default_factory=list, repr=False)
    meta: dict = field(default_factory=dict)

    def chance_interval(self, chance: float, n: Optional[int] = None, level: float = 0.95):
        """Binomial interval around ``chance`` for ``n`` independent units."""
        n = n or self.n_windows
        lo, hi = stats.binom.interval(level, n, chance)
        return lo / n, hi / n


def class_name(c) -> str:
    if isinstance(c, tuple):
        return "-".join(c)
    return getattr(c, "name", str(c))


def mode_classes(mode: str, hand: str = RIGHT) -> list:
    if mode == "hbmi10":
        return list(LABELS)
    return [c for c, _, _ in mode_targets(mode, hand)]


def compute_report(decisions: Sequence, classes: Optional[Sequence] = None) -> AccuracyReport:
    """Report from (predicted, true) pairs or Decision records."""
    pairs = [(d.predicted, d.true) if isinstance(d, Decision) else tuple(d) for d in decisions]
    if not pairs:
        raise ValidationError("no decisions to report")
    classes = list(classes) if classes is not None else list(LABELS)
    index = {c: i for i, c in enumerate(classes)}
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for pred, true in pairs:
        confusion[index[true], index[pred]] += 1
    total = int(confusion.sum())
    rows = confusion.sum(axis=1)
    recall = {c: (confusion[i, i] / rows[i] if rows[i] else float("nan")) for i, c in enumerate(classes)}
    records = [d for d in decisions if isinstance(d, Decision)]
    return AccuracyReport(float(np.trace(confusion) / total), recall, confusion, classes, total,
                          decisions=records)


def merge_reports(reports: Sequence[AccuracyReport], meta: Optional[dict] = None) -> AccuracyReport:
    """Pool confusions; accuracy is the mean of the per-report accuracies."""
    confusion = sum(r.confusion for r in reports)
    rows = confusion.sum(axis=1)
    classes = reports[0].classes
    recall = {c: (confusion[i, i] / rows[i] if rows[i] else float("nan")) for i, c in enumerate(classes)}
    accs = [r.accuracy for r in reports]
    return AccuracyReport(float(np.mean(accs)), recall, confusion, classes, int(confusion.sum()),
                          accs, [d for r in reports for d in r.decisions], meta or {})


# ---------------------------------------------------------------- folds


def stratified_folds(labels: Sequence, n_folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Test-index sets of a stratified k-fold partition.

    Each class is shuffled and dealt round-robin, continuing from where the
    previous class stopped so fold sizes stay within one of each other.
    """
    labels = list(labels)
    if n_folds < 2:
        raise ValidationError("folds must be >= 2")
    classes = sorted(set(labels), key=lambda c: (str(type(c)), c))
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    offset = 0
    for c in classes:
        members = np.flatnonzero([lab == c for lab in labels])
        if len(members) < 2:
            raise StratificationError(
                f"class {class_name(c)} has {len(members)} trial(s); "
                f"every training fold needs at least one")
        for j, m in enumerate(rng.permutation(members)):
            folds[(offset + j) % n_folds].append(int(m))
        offset += len(members)
    present = set(labels)
    for k, test in enumerate(folds):
        held = set(test)
        train = set(labels[i] for i in range(len(labels)) if i not in held)
        if train != present:
            raise StratificationError(f"fold {k} training set lacks classes {present - train}")
    return [np.array(sorted(f)) for f in folds]


# ---------------------------------------------------------------- decoding helpers


def _mode_selection(mode: str, labels: list, hand: str) -> np.ndarray:
    if mode == "emg5":
        return np.array([i for i, lab in enumerate(labels) if lab.hand == hand], dtype=int)
    return np.arange(len(labels))


def _window_ids(trials: Sequence[TrialFeatures]) -> list[tuple[str, int]]:
    return [(t.info.key, k) for t in trials for k in range(t.n_windows)]


def decode_trials(model: HierarchyModel, trials: Sequence[TrialFeatures], mode: str,
                  priors=None, hand: str = RIGHT, feats=None) -> AccuracyReport:
    """Decode every window of ``trials`` in one mode.

    ``priors`` is a ContextPrior, one per window of ``trials``, or None for the
    model's default prior.
    """
    feats = feats if feats is not None else window_features(model, trials)
    labels = window_labels(trials)
    ids = _window_ids(trials)
    sel = _mode_selection(mode, labels, hand)
    if len(sel) == 0:
        raise ValidationError(f"no test windows for mode {mode}")
    if priors is None:
        priors = model.default_prior
    if not isinstance(priors, ContextPrior):
        priors = [priors[i] for i in sel]
    predicted, _ = decode_batch(model, priors, feats.take(sel), mode, hand)
    decisions = [Decision(ids[i][0], ids[i][1], p, true_class(mode, labels[i]))
                 for p, i in zip(predicted, sel)]
    return compute_report(decisions, mode_classes(mode, hand))


# ---------------------------------------------------------------- protocols


def _check_modes(modes):
    for m in modes:
        if m not in MODES:
            raise ValidationError(f"unknown mode {m!r}; expected one of {MODES}")


def within_session_cv(source: TrialSource, session: int, modes: Sequence[str] = MODES,
                      protocol: Optional[EvalProtocol] = None,
                      cache: Optional[FeatureCache] = None, cfg: Optional[PipelineConfig] = None,
                      jobs: int = 1, log: Optional[FitLog] = None) -> dict[str, AccuracyReport]:
    """Repeated stratified k-fold CV over the trials of one session.

    Every fold refits CSP, NMF and KDE on its training trials and decodes all
    requested modes with that one fit. Each repetition's accuracy is the pooled
    window accuracy over its folds; the report accuracy is their mean.
    """
    protocol = protocol or EvalProtocol()
    protocol.validate()
    _check_modes(modes)
    infos = source.manifest.session_trials(session)
    if not infos:
        raise ValidationError(f"session {session} not in dataset (have {source.manifest.sessions})")
    cache = cache or FeatureCache(source, cfg)
    trials = cache.many(infos)
    labels = [t.info.label for t in trials]

    jobs_list = []
    for rep in range(protocol.repetitions):
        rng = np.random.default_rng([protocol.seed, session, rep])
        for k, test in enumerate(stratified_folds(labels, protocol.folds, rng)):
            jobs_list.append((rep, k, test))

    def run(job):
        rep, k, test = job
        test_set = set(test.tolist())
        train = [t for i, t in enumerate(trials) if i not in test_set]
        held = [trials[i] for i in test]
        fold_log = FitLog()
        model = fit_hierarchy(train, cache.cfg, fold_log)
        _assert_no_leak(fold_log, held)
        feats = window_features(model, held)
        return rep, fold_log, {m: decode_trials(model, held, m, hand=protocol.emg_hand, feats=feats)
                               for m in modes}

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(run, jobs_list))
    else:
        results = [run(j) for j in jobs_list]

    out = {}
    for m in modes:
        per_rep = []
        for rep in range(protocol.repetitions):
            fold_reports = [r[m] for rr, _, r in results if rr == rep]
            per_rep.append(compute_report([d for fr in fold_reports for d in fr.decisions],
                                          fold_reports[0].classes))
        out[m] = merge_reports(per_rep, {"protocol": "within", "session": session, "mode": m,
                                         "n_trials": len(trials)})
    if log is not None:
        for _, fold_log, _ in results:
            log.records.extend(fold_log.records)
    return out


def _assert_no_leak(log: FitLog, held: Sequence[TrialFeatures]) -> None:
    leaked = log.window_hashes & {h for t in held for h in t.hashes}
    if leaked:
        raise AssertionError(f"{len(leaked)} test windows entered a fitting step")


def _online_split(source: TrialSource, test_session: int):
    sessions = source.manifest.sessions
    if test_session not in sessions:
        raise ValidationError(f"test session {test_session} not in dataset (have {sessions})")
    train_sessions = list(range(1, test_session))
    missing = [s for s in train_sessions if s not in sessions]
    if not train_sessions:
        raise ValidationError(f"online evaluation of session {test_session} needs at least one "
                              f"earlier session to train on")
    if missing:
        raise ValidationError(f"online evaluation of session {test_session} trains on sessions "
                              f"{train_sessions}; missing {missing}")
    return train_sessions


def fit_online(source: TrialSource, test_session: int, cache: FeatureCache,
               log: Optional[FitLog] = None) -> tuple[HierarchyModel, list[TrialFeatures]]:
    """Fit on all sessions before ``test_session``; return the model and test trials."""
    train_sessions = _online_split(source, test_session)
    m = source.manifest
    train = cache.many([t for t in m.trials if t.session in train_sessions])
    held = cache.many(m.session_trials(test_session))
    log = log if log is not None else FitLog()
    model = fit_hierarchy(train, cache.cfg, log)
    _assert_no_leak(log, held)
    return model, held


def online_eval(source: TrialSource, test_session: int, modes: Sequence[str] = MODES,
                cache: Optional[FeatureCache] = None, cfg: Optional[PipelineConfig] = None,
                log: Optional[FitLog] = None, hand: str = RIGHT) -> dict[str, AccuracyReport]:
    """Train on sessions 1..test_session-1 pooled, decode every test window."""
    _check_modes(modes)
    cache = cache or FeatureCache(source, cfg)
    log = log if log is not None else FitLog()
    model, held = fit_online(source, test_session, cache, log)
    feats = window_features(model, held)
    out = {}
    for m in modes:
        rep = decode_trials(model, held, m, hand=hand, feats=feats)
        rep.repetition_accuracies = [rep.accuracy]
        rep.meta = {"protocol": "online", "session": test_session, "mode": m,
                    "train_sessions": sorted(log.sessions), "n_trials": len(held)}
        out[m] = rep
    return out


def context_priors(labels: Sequence, spec: Sequence[tuple[int, float]],
                   base: Optional[ContextPrior] = None, q: float = 1.0,
                   rng: Optional[np.random.Generator] = None) -> list[ContextPrior]:
    """One prior per window favoring its true state at each configured level.

    With probability 1 - q a level favors a wrong sibling instead. Levels the
    true path does not reach (power/precision and gesture for a rest label)
    keep the base prior.
    """
    base = base or uniform_prior()
    if not 0.0 <= q <= 1.0:
        raise ValidationError(f"context accuracy q={q} outside [0, 1]")
    rng = rng or np.random.default_rng(0)
    built: dict[tuple, ContextPrior] = {}
    out = []
    for label in labels:
        path = label_to_path(label)
        key = []
        for level, p in spec:
            state = path[level]
            if state is None:
                continue
            if q < 1.0 and rng.uniform() >= q:
                parent = None if level == 0 else path[level - 1]
                siblings = [s for s in CHILDREN[level][parent] if s != state]
                state = siblings[rng.integers(len(siblings))]
            key.append((level, p, state))
        key = tuple(key)
        if key not in built:
            prior = base
            for level, p, state in key:
                prior = inject_context(level, p, state, prior)
            built[key] = prior
        out.append(built[key])
    return out


@dataclass
class SweepRow:
    spec: tuple[tuple[int, float], ...]
    report: AccuracyReport
    baseline: float

    @property
    def label(self) -> str:
        return " ".join(f"P(S{level})={p:g}" for level, p in self.spec)


def context_sweep(source: TrialSource, test_session: int,
                  configs: Sequence[Sequence[tuple[int, float]]] = TABLE2_ROWS,
                  mode: str = "hbmi10", q: float = 1.0, seed: int = 0,
                  cache: Optional[FeatureCache] = None, cfg: Optional[PipelineConfig] = None,
                  log: Optional[FitLog] = None, model_and_trials=None,
                  jobs: int = 1, hand: str = RIGHT) -> tuple[AccuracyReport, list[SweepRow]]:
    """Online decoding of ``test_session`` under simulated context priors.

    Likelihoods are scored once; each configuration only adds its prior terms.
    Returns the default-prior baseline report and one row per configuration.
    """
    _check_modes([mode])
    cache = cache or FeatureCache(source, cfg)
    if model_and_trials is None:
        model_and_trials = fit_online(source, test_session, cache, log)
    model, held = model_and_trials
    feats = window_features(model, held)
    labels = window_labels(held)
    ids = _window_ids(held)
    sel = _mode_selection(mode, labels, hand)
    sel_labels = [labels[i] for i in sel]
    classes, raw = score_matrix(model, model.default_prior, feats.take(sel), mode, hand,
                                transitions=False)
    targets = mode_targets(mode, hand)

    def decide(priors: Sequence[ContextPrior], meta: dict) -> AccuracyReport:
        slot: dict[int, int] = {}
        vectors, index = [], np.empty(len(priors), dtype=int)
        for i, prior in enumerate(priors):
            if id(prior) not in slot:
                slot[id(prior)] = len(vectors)
                vectors.append([path_log_prior(prior, path, depth) for _, path, depth in targets])
            index[i] = slot[id(prior)]
        scores = raw + np.array(vectors)[index]
        best = np.argmax(scores, axis=1)
        rep = compute_report([Decision(ids[i][0], ids[i][1], classes[b], true_class(mode, labels[i]))
                              for b, i in zip(best, sel)], mode_classes(mode, hand))
        rep.repetition_accuracies = [rep.accuracy]
        rep.meta = {"protocol": "context", "session": test_session, "mode": mode, **meta}
        return rep

    baseline = decide([model.default_prior] * len(sel), {"spec": ()})

    def run(item):
        k, spec = item
        spec = tuple((int(lv), float(p)) for lv, p in spec)
        EvalProtocol(kind="context", context_spec=spec).validate()
        priors = context_priors(sel_labels, spec, model.default_prior, q,
                                np.random.default_rng([seed, test_session, k]))
        return SweepRow(spec, decide(priors, {"spec": spec, "q": q}), baseline.accuracy)

    items = list(enumerate(configs))
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            rows = list(pool.map(run, items))
    else:
        rows = [run(i) for i in items]
    return baseline, rows


# ---------------------------------------------------------------- report files


def accuracy_table(cells: dict[tuple[str, int], float], modes: Sequence[str] = MODES) -> str:
    """CSV with one row per mode, one column per session, then the mean."""
    sessions = sorted({s for _, s in cells})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode"] + [f"session_{s}" for s in sessions] + ["mean"])
    for m in modes:
        vals = [cells.get((m, s)) for s in sessions]
        present = [v for v in vals if v is not None]
        w.writerow([m] + ["" if v is None else f"{v:.4f}" for v in vals]
                   + [f"{np.mean(present):.4f}" if present else ""])
    return buf.getvalue()


def repetition_table(report: AccuracyReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["repetition", "accuracy"])
    for i, a in enumerate(report.repetition_accuracies):
        w.writerow([i, f"{a:.6f}"])
    w.writerow(["mean", f"{report.accuracy:.6f}"])
    return buf.getvalue()


def confusion_csv(report: AccuracyReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [class_name(c) for c in report.classes]
    w.writerow(["true\\predicted"] + names)
    for name, row in zip(names, report.confusion):
        w.writerow([name] + [int(v) for v in row])
    return buf.getvalue()


def decision_log(reports: dict[str, AccuracyReport]) -> str:
    """Per-window decisions of several reports as CSV."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["protocol", "session", "mode", "config", "repetition", "trial", "window",
                "predicted", "true", "correct"])
    for key, rep in reports.items():
        meta = rep.meta
        per_rep = len(rep.decisions) // max(len(rep.repetition_accuracies), 1)
        for i, d in enumerate(rep.decisions):
            w.writerow([meta.get("protocol", ""), meta.get("session", ""), meta.get("mode", ""),
                        key, i // per_rep if per_rep else 0, d.trial, d.window,
                        class_name(d.predicted), class_name(d.true), int(d.predicted == d.true)])
    return buf.getvalue()


def sweep_table(baseline: AccuracyReport, rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["session", "context", "accuracy", "baseline", "gain"])
    s = baseline.meta.get("session", "")
    for r in rows:
        w.writerow([s, r.label, f"{r.report.accuracy:.4f}", f"{r.baseline:.4f}",
                    f"{r.report.accuracy - r.baseline:+.4f}"])
    return buf.getvalue()
