"""Trial preprocessing and fitting of the full decoding hierarchy.

Each trial is reduced once to per-window statistics: raw EEG covariances per
band and EMG RMS per channel. Every model fit afterwards (CSP, NMF, KDE)
works from these, so cross-validation folds never re-filter signals.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .datasets import TrialInfo, TrialRecording, TrialSource
from .decoder import (
    EEG_ROOT,
    GRASP,
    HANDS,
    ContextPrior,
    HierarchyModel,
    WindowFeatures,
    label_to_path,
    uniform_prior,
)
from .errors import InsufficientDataError
from .likelihoods import kde_fit
from .signals import (
    Recording,
    apply_filter,
    bandpass,
    baseline_correct,
    downsample,
    notch,
    trim_baseline,
    window_array,
    window_rms,
)
from .spatial_filters import BANDS, N_FILTERS, fit_csp, window_covariance
from .synergies import MAX_ITER, N_SYNERGIES, TOL, nmf_fit, nmf_transform


@dataclass
class PipelineConfig:
    eeg_rate: float = 300.0
    bands: tuple[tuple[float, float], ...] = BANDS
    band_order: int = 4
    n_filters: int = N_FILTERS
    emg_band: tuple[float, float] = (20.0, 500.0)
    emg_band_order: int = 4
    line_freq: float = 60.0
    notch_q: float = 30.0
    n_synergies: int = N_SYNERGIES
    nmf_max_iter: int = MAX_ITER
    nmf_tol: float = TOL
    nmf_seed: int = 0


@dataclass
class TrialFeatures:
    """Per-window statistics of one trial.

    ``eeg_covs`` has shape (bands, windows, C, C); ``emg_rms`` (windows, 6);
    ``hashes`` holds a content digest of each raw window (EEG and EMG).
    """

    info: TrialInfo
    eeg_covs: np.ndarray
    emg_rms: np.ndarray
    hashes: tuple[str, ...]

    @property
    def n_windows(self) -> int:
        return self.emg_rms.shape[0]


def _window_hashes(eeg: Recording, emg: Recording) -> tuple[str, ...]:
    e, _ = window_array(trim_baseline(eeg))
    m, _ = window_array(trim_baseline(emg))
    n = min(len(e), len(m))
    out = []
    for k in range(n):
        h = hashlib.blake2b(digest_size=16)
        h.update(np.ascontiguousarray(e[k]).tobytes())
        h.update(np.ascontiguousarray(m[k]).tobytes())
        out.append(h.hexdigest())
    return tuple(out)


def eeg_band_covariances(eeg: Recording, cfg: PipelineConfig) -> np.ndarray:
    x = downsample(eeg, cfg.eeg_rate)
    covs = []
    for band in cfg.bands:
        filtered = baseline_correct(apply_filter(x, bandpass(*band, order=cfg.band_order)))
        windows, _ = window_array(filtered)
        covs.append(window_covariance(windows))
    return np.stack(covs)


def emg_window_rms(emg: Recording, cfg: PipelineConfig) -> np.ndarray:
    x = apply_filter(emg, notch(cfg.line_freq, cfg.notch_q))
    x = apply_filter(x, bandpass(*cfg.emg_band, order=cfg.emg_band_order))
    windows, _ = window_array(trim_baseline(x))
    return window_rms(windows)


def preprocess_trial(rec: TrialRecording, cfg: Optional[PipelineConfig] = None) -> TrialFeatures:
    cfg = cfg or PipelineConfig()
    covs = eeg_band_covariances(rec.eeg, cfg)
    rms = emg_window_rms(rec.emg, cfg)
    n = min(covs.shape[1], rms.shape[0])
    return TrialFeatures(rec.info, covs[:, :n], rms[:n], _window_hashes(rec.eeg, rec.emg)[:n])


class FeatureCache:
    """Preprocessed trials of a source, computed once on first access."""

    def __init__(self, source: TrialSource, cfg: Optional[PipelineConfig] = None):
        self.source = source
        self.cfg = cfg or PipelineConfig()
        self._store: dict[TrialInfo, TrialFeatures] = {}

    def get(self, info: TrialInfo) -> TrialFeatures:
        if info not in self._store:
            self._store[info] = preprocess_trial(self.source.load_trial(info), self.cfg)
        return self._store[info]

    def many(self, infos: Iterable[TrialInfo]) -> list[TrialFeatures]:
        return [self.get(i) for i in infos]

    def relabeled(self, source: TrialSource, mapping: dict[TrialInfo, TrialInfo]) -> "FeatureCache":
        """Cache for ``source`` whose trials are this cache's trials under new labels."""
        out = FeatureCache(source, self.cfg)
        for old, feats in self._store.items():
            if old in mapping:
                out._store[mapping[old]] = replace(feats, info=mapping[old])
        return out


# ---------------------------------------------------------------- fitting


@dataclass
class FitRecord:
    step: str
    trials: frozenset[str]
    hashes: frozenset[str]


@dataclass
class FitLog:
    """Audit trail: which trials and windows entered each fitting call."""

    records: list[FitRecord] = field(default_factory=list)

    def add(self, step: str, trials: Sequence[TrialFeatures]) -> None:
        self.records.append(FitRecord(step, frozenset(t.info.key for t in trials),
                                      frozenset(h for t in trials for h in t.hashes)))

    @property
    def trial_keys(self) -> frozenset[str]:
        return frozenset().union(*(r.trials for r in self.records)) if self.records else frozenset()

    @property
    def window_hashes(self) -> frozenset[str]:
        return frozenset().union(*(r.hashes for r in self.records)) if self.records else frozenset()

    @property
    def sessions(self) -> frozenset[int]:
        return frozenset(int(k.split("_")[0][1:]) for k in self.trial_keys)


def _stack_covs(trials: Sequence[TrialFeatures]) -> list[np.ndarray]:
    n_bands = trials[0].eeg_covs.shape[0]
    return [np.concatenate([t.eeg_covs[b] for t in trials]) for b in range(n_bands)]


def _require(trials, what):
    if not trials:
        raise InsufficientDataError(f"no training trials for {what}")
    return trials


def window_features(model: HierarchyModel, trials: Sequence[TrialFeatures]) -> WindowFeatures:
    """Features of every window of ``trials`` under every CSP node and NMF base."""
    covs = _stack_covs(trials)
    rms = np.concatenate([t.emg_rms for t in trials])
    eeg = {node: csp.features_from_covariances(covs) for node, csp in model.csp.items()}
    emg = {hand: nmf_transform(nmf, rms) for hand, nmf in model.nmf.items()}
    return WindowFeatures(eeg, emg)


def window_labels(trials: Sequence[TrialFeatures]) -> list:
    return [t.info.label for t in trials for _ in range(t.n_windows)]


def fit_hierarchy(trials: Sequence[TrialFeatures], cfg: Optional[PipelineConfig] = None,
                  log: Optional[FitLog] = None,
                  prior: Optional[ContextPrior] = None) -> HierarchyModel:
    """Fit CSP (root and per hand), per-hand NMF, and per-prefix KDEs."""
    cfg = cfg or PipelineConfig()
    log = log if log is not None else FitLog()
    trials = list(trials)
    by_hand = {h: [t for t in trials if t.info.label.hand == h] for h in HANDS}

    csp = {}
    sides = [_require(by_hand[h], f"{h} hand") for h in HANDS]
    log.add(f"csp/{EEG_ROOT}", trials)
    csp[EEG_ROOT] = fit_csp(_stack_covs(sides[0]), _stack_covs(sides[1]), EEG_ROOT,
                            cfg.n_filters, cfg.bands)
    for hand in HANDS:
        rest = [t for t in by_hand[hand] if label_to_path(t.info.label).s1 != GRASP]
        grasp = [t for t in by_hand[hand] if label_to_path(t.info.label).s1 == GRASP]
        _require(rest, f"{hand} rest")
        _require(grasp, f"{hand} grasp")
        log.add(f"csp/{hand}", by_hand[hand])
        csp[hand] = fit_csp(_stack_covs(rest), _stack_covs(grasp), hand, cfg.n_filters, cfg.bands)

    nmf = {}
    for hand in HANDS:
        log.add(f"nmf/{hand}", by_hand[hand])
        V = np.concatenate([t.emg_rms for t in by_hand[hand]]).T
        nmf[hand] = nmf_fit(V, cfg.n_synergies, cfg.nmf_seed, cfg.nmf_max_iter, cfg.nmf_tol)

    model = HierarchyModel({}, {}, csp, nmf, prior or uniform_prior())
    feats = window_features(model, trials)
    paths = [label_to_path(label) for label in window_labels(trials)]
    log.add("kde", trials)

    groups: dict[tuple[str, tuple[str, ...]], list[int]] = {}
    for i, path in enumerate(paths):
        prefixes = path.prefixes()
        for prefix in prefixes[:2]:
            groups.setdefault(("eeg", prefix), []).append(i)
        for prefix in prefixes[1:]:
            groups.setdefault(("emg", prefix), []).append(i)
    for (modality, prefix), idx in sorted(groups.items()):
        if modality == "eeg":
            node = EEG_ROOT if len(prefix) == 1 else prefix[0]
            model.eeg_kde[prefix] = kde_fit(feats.eeg[node][idx], "/".join(prefix))
        else:
            model.emg_kde[prefix] = kde_fit(feats.emg[prefix[0]][idx], "/".join(prefix))
    return model


def train_from_source(source: TrialSource, sessions: Optional[Sequence[int]] = None,
                      cfg: Optional[PipelineConfig] = None, log: Optional[FitLog] = None,
                      cache: Optional[FeatureCache] = None) -> HierarchyModel:
    cache = cache or FeatureCache(source, cfg)
    infos = [t for t in source.manifest.trials if sessions is None or t.session in sessions]
    return fit_hierarchy(cache.many(infos), cache.cfg, log)


__all__ = [
    "PipelineConfig", "TrialFeatures", "FeatureCache", "FitLog", "FitRecord",
    "preprocess_trial", "fit_hierarchy", "window_features", "window_labels",
    "train_from_source", "eeg_band_covariances", "emg_window_rms",
]
