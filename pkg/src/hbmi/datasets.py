"""Synthetic biosignal generation, dataset storage and model bundles.

Dataset layout on disk::

    <root>/manifest.json
    <root>/trials/s<session>_b<block>_t<trial>_eeg.csv
    <root>/trials/s<session>_b<block>_t<trial>_emg.csv

Trial files are comma-separated decimal text, one row per channel, no
header. Sessions and blocks are numbered from 1, trials within a block from 0.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Protocol

import numpy as np
from scipy import linalg, signal

from .decoder import (
    GESTURES,
    HANDS,
    ContextPrior,
    GestureLabel,
    HierarchyModel,
)
from .errors import DatasetFormatError, ValidationError
from .likelihoods import KdeModel
from .signals import TRIAL_SECONDS, Recording
from .spatial_filters import CspModel
from .synergies import FitStats, NmfModel

FORMAT_VERSION = 1
BUNDLE_VERSION = 1

EEG_CHANNELS = ("F3", "F4", "FC5", "FC3", "FCz", "FC4", "FC6", "C5", "C3", "C1", "Cz",
                "C2", "C4", "C6", "CP5", "CP3", "CPz", "CP4", "CP6")
EMG_CHANNELS = ("extensor_digitorum", "flexor_carpi_ulnaris", "flexor_digitorum_superficialis",
                "extensor_carpi_ulnaris", "brachioradialis", "pronator_teres")


@dataclass(frozen=True)
class TrialInfo:
    session: int
    block: int
    trial_index: int
    label: GestureLabel

    @property
    def key(self) -> str:
        return f"s{self.session}_b{self.block}_t{self.trial_index}"


@dataclass(frozen=True)
class TrialRecording:
    info: TrialInfo
    eeg: Recording
    emg: Recording

    @property
    def label(self) -> GestureLabel:
        return self.info.label


@dataclass
class DatasetManifest:
    subject_id: str
    trials: list[TrialInfo]
    eeg_rate: float = 1200.0
    emg_rate: float = 1200.0
    eeg_channels: tuple[str, ...] = EEG_CHANNELS
    emg_channels: tuple[str, ...] = EMG_CHANNELS
    trial_seconds: float = TRIAL_SECONDS
    provenance: dict = field(default_factory=dict)

    @property
    def sessions(self) -> list[int]:
        return sorted({t.session for t in self.trials})

    def session_trials(self, session: int) -> list[TrialInfo]:
        return [t for t in self.trials if t.session == session]

    def expected_samples(self, modality: str) -> int:
        rate = self.eeg_rate if modality == "eeg" else self.emg_rate
        return int(round(self.trial_seconds * rate))

    def to_dict(self) -> dict:
        sessions: dict[int, dict[int, list]] = {}
        for t in self.trials:
            sessions.setdefault(t.session, {}).setdefault(t.block, []).append({
                "trial": t.trial_index,
                "label": t.label.name,
                "eeg": f"trials/{t.key}_eeg.csv",
                "emg": f"trials/{t.key}_emg.csv",
            })
        return {
            "format_version": FORMAT_VERSION,
            "subject_id": self.subject_id,
            "rates": {"eeg": self.eeg_rate, "emg": self.emg_rate},
            "channels": {"eeg": list(self.eeg_channels), "emg": list(self.emg_channels)},
            "trial_seconds": self.trial_seconds,
            "sessions": [
                {"session": s, "blocks": [{"block": b, "trials": trials}
                                          for b, trials in sorted(blocks.items())]}
                for s, blocks in sorted(sessions.items())
            ],
            "provenance": self.provenance,
        }


class TrialSource(Protocol):
    manifest: DatasetManifest

    def load_trial(self, info: TrialInfo) -> TrialRecording: ...


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthConfig:
    seed: int = 7
    separability_eeg: float = 2.0
    separability_emg: float = 2.0
    noise_floor: float = 1.0
    session_drift: float = 0.0
    n_sessions: int = 5
    n_blocks: int = 8
    n_trials_per_block: int = 50
    rate: float = 1200.0
    subject_id: str = "synthetic"

    def validate(self) -> None:
        for name in ("separability_eeg", "separability_emg", "session_drift"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.noise_floor <= 0:
            raise ValidationError("noise_floor must be > 0")
        if min(self.n_sessions, self.n_blocks, self.n_trials_per_block) < 1:
            raise ValidationError("synthetic dataset needs at least one trial "
                                  "(sessions, blocks and trials per block must be >= 1)")
        if self.n_trials_per_block % len(GESTURES):
            raise ValidationError(
                f"trials per block ({self.n_trials_per_block}) must be a multiple of {len(GESTURES)}")


# log-variance effect per unit separability on the class-coding sources
EEG_EFFECT = 1.0
N_SOURCES = 19
BACKGROUND_AR = 0.97
EMG_SCALE = 10.0
EMG_JITTER = 0.15
LINE_NOISE = 2.0


def _ss(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


class SyntheticSource:
    """Deterministic synthetic subject; trials are regenerated on demand.

    EEG: 19 latent sources, each a sum of AR(1) background noise and 8-15 Hz
    and 15-30 Hz band-limited noise, mixed into 19 channels. Six sources code
    the class through band variance: two for the hand, two for rest vs grasp
    of each hand. EMG: a 5-dim synergy template per (hand, gesture) drives a
    fixed non-negative 6 x 5 base matrix that sets the envelope of a white
    carrier. Session drift rotates the EEG mixing matrix and perturbs the
    EMG base multiplicatively.
    """

    _SALT_SUBJECT, _SALT_SESSION, _SALT_BLOCK, _SALT_TRIAL = 1, 2, 3, 4

    def __init__(self, config: SynthConfig):
        config.validate()
        self.config = config
        rng = _ss(config.seed, self._SALT_SUBJECT)
        mixing = rng.normal(size=(N_SOURCES, N_SOURCES))
        self.mixing = mixing / np.linalg.norm(mixing, axis=0)
        self.source_gain = rng.uniform(0.8, 1.2, size=N_SOURCES)
        base = rng.uniform(0.05, 1.0, size=(len(EMG_CHANNELS), 5)) + 1.5 * np.eye(6, 5)
        self.emg_base = base / np.linalg.norm(base, axis=0)
        # each gesture leans on its own synergy, with a small shared random part
        self.emg_pattern = {(h, g): np.eye(5)[k] + rng.uniform(0.0, 0.3, size=5)
                            for h in HANDS for k, g in enumerate(GESTURES)}

        nyq_free = dict(fs=config.rate, output="sos")
        self._alpha = signal.butter(2, (8.0, 15.0), btype="bandpass", **nyq_free)
        self._beta = signal.butter(2, (15.0, 30.0), btype="bandpass", **nyq_free)
        self._session_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.manifest = self._build_manifest()

    # layout -----------------------------------------------------------

    def _build_manifest(self) -> DatasetManifest:
        cfg = self.config
        trials = []
        per_gesture = cfg.n_trials_per_block // len(GESTURES)
        for s in range(1, cfg.n_sessions + 1):
            for b in range(1, cfg.n_blocks + 1):
                hand = HANDS[(b - 1) % 2]
                order = np.repeat(np.arange(len(GESTURES)), per_gesture)
                _ss(cfg.seed, self._SALT_BLOCK, s, b).shuffle(order)
                trials.extend(TrialInfo(s, b, t, GestureLabel(hand, GESTURES[g]))
                              for t, g in enumerate(order))
        return DatasetManifest(cfg.subject_id, trials, cfg.rate, cfg.rate,
                               provenance={"synth_config": asdict(cfg)})

    # session effects --------------------------------------------------

    def _session(self, session: int) -> tuple[np.ndarray, np.ndarray]:
        if session not in self._session_cache:
            drift = self.config.session_drift
            rng = _ss(self.config.seed, self._SALT_SESSION, session)
            skew = rng.normal(size=(N_SOURCES, N_SOURCES))
            skew = (skew - skew.T) / np.sqrt(2 * N_SOURCES)
            rotation = linalg.expm(drift * skew)
            mixing = rotation @ self.mixing
            gains = np.exp(drift * rng.normal(size=self.emg_base.shape))
            base = self.emg_base * gains
            self._session_cache[session] = (mixing, base / np.linalg.norm(base, axis=0))
        return self._session_cache[session]

    # trial generation -------------------------------------------------

    def _eeg_log_gains(self, label: GestureLabel) -> tuple[np.ndarray, np.ndarray]:
        """Log-variance offsets for the alpha and beta component of each source."""
        k = EEG_EFFECT * self.config.separability_eeg
        alpha = np.zeros(N_SOURCES)
        beta = np.zeros(N_SOURCES)
        right = label.hand == HANDS[0]
        grasp = label.gesture != GESTURES[0]
        alpha[0] = k if right else -k
        beta[1] = -k if right else k
        coding = (2, 3) if right else (4, 5)
        alpha[coding[0]] = -k if grasp else k
        beta[coding[1]] = -k if grasp else k
        return alpha, beta

    def _eeg(self, info: TrialInfo, rng: np.random.Generator, mixing: np.ndarray) -> np.ndarray:
        n = int(round(TRIAL_SECONDS * self.config.rate))
        log_alpha, log_beta = self._eeg_log_gains(info.label)
        jitter = rng.normal(0.0, 0.2, size=(2, N_SOURCES))
        amp_alpha = 2.0 * np.exp(0.5 * (log_alpha + jitter[0]))
        amp_beta = 1.5 * np.exp(0.5 * (log_beta + jitter[1]))

        white = rng.normal(size=(3, N_SOURCES, n))
        background = signal.lfilter([np.sqrt(1 - BACKGROUND_AR**2)], [1.0, -BACKGROUND_AR],
                                    white[0], axis=-1)
        alpha = signal.sosfilt(self._alpha, white[1], axis=-1)
        beta = signal.sosfilt(self._beta, white[2], axis=-1)
        sources = self.source_gain[:, None] * (
            background + amp_alpha[:, None] * alpha * 4.0 + amp_beta[:, None] * beta * 4.0)
        sensor_noise = self.config.noise_floor * rng.normal(size=(N_SOURCES, n))
        return mixing @ sources + sensor_noise

    def _emg(self, info: TrialInfo, rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
        cfg = self.config
        n = int(round(TRIAL_SECONDS * cfg.rate))
        template = 1.0 + cfg.separability_emg * self.emg_pattern[(info.label.hand, info.label.gesture)]
        # activation drawn per 250 ms segment, linearly interpolated in between
        n_knots = int(TRIAL_SECONDS / 0.25) + 1
        knots = template[:, None] * np.exp(rng.normal(0.0, EMG_JITTER, size=(5, n_knots)))
        t = np.linspace(0, n_knots - 1, n)
        activation = np.stack([np.interp(t, np.arange(n_knots), k) for k in knots])
        envelope = EMG_SCALE * base @ activation
        carrier = rng.normal(size=envelope.shape)
        line = LINE_NOISE * np.sin(2 * np.pi * 60.0 * np.arange(n) / cfg.rate + rng.uniform(0, 2 * np.pi))
        return envelope * carrier + cfg.noise_floor * rng.normal(size=envelope.shape) + line

    def load_trial(self, info: TrialInfo) -> TrialRecording:
        rng = _ss(self.config.seed, self._SALT_TRIAL, info.session, info.block, info.trial_index)
        mixing, base = self._session(info.session)
        eeg = Recording(self._eeg(info, rng, mixing), self.config.rate, "EEG")
        emg = Recording(self._emg(info, rng, base), self.config.rate, "EMG")
        return TrialRecording(info, eeg, emg)

    def __iter__(self) -> Iterator[TrialRecording]:
        for info in self.manifest.trials:
            yield self.load_trial(info)


def generate_synthetic(config: SynthConfig) -> SyntheticSource:
    return SyntheticSource(config)


def permute_labels(source: TrialSource, seed: int) -> "RelabeledSource":
    """Same signals with labels shuffled within each session."""
    rng = np.random.default_rng(seed)
    mapping = {}
    for session in source.manifest.sessions:
        infos = source.manifest.session_trials(session)
        labels = [t.label for t in infos]
        order = rng.permutation(len(labels))
        for info, k in zip(infos, order):
            mapping[info] = TrialInfo(info.session, info.block, info.trial_index, labels[k])
    return RelabeledSource(source, mapping)


class RelabeledSource:
    def __init__(self, inner: TrialSource, mapping: dict[TrialInfo, TrialInfo]):
        self.inner = inner
        self.mapping = mapping
        self._reverse = {v: k for k, v in mapping.items()}
        m = inner.manifest
        self.manifest = DatasetManifest(m.subject_id, [mapping[t] for t in m.trials], m.eeg_rate,
                                        m.emg_rate, m.eeg_channels, m.emg_channels,
                                        m.trial_seconds, {**m.provenance, "labels_permuted": True})

    def load_trial(self, info: TrialInfo) -> TrialRecording:
        rec = self.inner.load_trial(self._reverse[info])
        return TrialRecording(info, rec.eeg, rec.emg)


# ---------------------------------------------------------------- storage


def atomic_write_text(path: Path | str, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _matrix_text(x: np.ndarray) -> str:
    import io

    buf = io.StringIO()
    np.savetxt(buf, x, fmt="%.6g", delimiter=",")
    return buf.getvalue()


def write_dataset(source: TrialSource, root: Path | str) -> Path:
    root = Path(root)
    (root / "trials").mkdir(parents=True, exist_ok=True)
    for info in source.manifest.trials:
        rec = source.load_trial(info)
        atomic_write_text(root / "trials" / f"{info.key}_eeg.csv", _matrix_text(rec.eeg.samples))
        atomic_write_text(root / "trials" / f"{info.key}_emg.csv", _matrix_text(rec.emg.samples))
    atomic_write_text(root / "manifest.json",
                      json.dumps(source.manifest.to_dict(), indent=1, sort_keys=True) + "\n")
    return root


def _parse_manifest(path: Path) -> DatasetManifest:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}:{exc.lineno}: {exc.msg}") from None
    try:
        trials = []
        for sess in data["sessions"]:
            for blk in sess["blocks"]:
                for tr in blk["trials"]:
                    info = TrialInfo(int(sess["session"]), int(blk["block"]), int(tr["trial"]),
                                     GestureLabel.parse(tr["label"]))
                    for modality in ("eeg", "emg"):
                        expected = f"trials/{info.key}_{modality}.csv"
                        if tr.get(modality, expected) != expected:
                            raise ValidationError(
                                f"{path}: trial {info.key} {modality} file {tr[modality]!r} "
                                f"does not follow the layout {expected!r}")
                    trials.append(info)
        return DatasetManifest(
            data["subject_id"], trials, float(data["rates"]["eeg"]), float(data["rates"]["emg"]),
            tuple(data["channels"]["eeg"]), tuple(data["channels"]["emg"]),
            float(data.get("trial_seconds", TRIAL_SECONDS)), data.get("provenance", {}))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise DatasetFormatError(f"{path}: malformed manifest ({exc!r})") from None


class DiskDataset:
    """A dataset directory; trial files are read only when requested."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise ValidationError(f"no manifest at {manifest_path}")
        self.manifest = _parse_manifest(manifest_path)
        missing = [str(self._file(t, m)) for t in self.manifest.trials for m in ("eeg", "emg")
                   if not self._file(t, m).exists()]
        if missing:
            shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
            raise ValidationError(f"{len(missing)} trial file(s) missing: {shown}")

    def _file(self, info: TrialInfo, modality: str) -> Path:
        return self.root / "trials" / f"{info.key}_{modality}.csv"

    def _read(self, info: TrialInfo, modality: str) -> np.ndarray:
        path = self._file(info, modality)
        try:
            x = np.loadtxt(path, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: {exc}") from None
        m = self.manifest
        n_ch = len(m.eeg_channels if modality == "eeg" else m.emg_channels)
        n_s = m.expected_samples(modality)
        rate = m.eeg_rate if modality == "eeg" else m.emg_rate
        if x.shape != (n_ch, n_s):
            raise ValidationError(
                f"trial {info.key} {modality}: shape {x.shape[0]}x{x.shape[1]}, expected "
                f"{n_ch} channels x {n_s} samples ({m.trial_seconds:g} s at {rate:g} Hz) in {path}")
        return x

    def load_trial(self, info: TrialInfo) -> TrialRecording:
        m = self.manifest
        return TrialRecording(info, Recording(self._read(info, "eeg"), m.eeg_rate, "EEG"),
                              Recording(self._read(info, "emg"), m.emg_rate, "EMG"))

    def validate(self) -> None:
        for info in self.manifest.trials:
            self.load_trial(info)


def load_dataset(path: Path | str) -> DiskDataset:
    return DiskDataset(path)


# ---------------------------------------------------------------- model bundles


def _prefix_name(prefix: tuple[str, ...]) -> str:
    return "_".join(prefix)


def save_model_bundle(model: HierarchyModel, path: Path | str, extra: Optional[dict] = None) -> Path:
    """Write one JSON file per component plus an index ``bundle.json``.

    Floats are written with ``repr`` precision, so loading reproduces the
    model bit for bit.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = {"version": BUNDLE_VERSION, "eeg_kde": {}, "emg_kde": {}, "csp": {}, "nmf": {},
             "prior": "prior.json", "extra": extra or {}}

    def dump(name: str, obj) -> str:
        atomic_write_text(root / name, json.dumps(obj, sort_keys=True) + "\n")
        return name

    for modality in ("eeg_kde", "emg_kde"):
        for prefix, kde in sorted(getattr(model, modality).items()):
            name = f"{modality}_{_prefix_name(prefix)}.json"
            index[modality]["/".join(prefix)] = dump(name, {
                "points": kde.points.tolist(), "bandwidths": kde.bandwidths.tolist(),
                "log_norm": kde.log_norm, "state_id": "/".join(prefix)})
    for node, csp in sorted(model.csp.items()):
        index["csp"][node] = dump(f"csp_{node}.json", {
            "filters_per_band": [f.tolist() for f in csp.filters_per_band],
            "eigenvalues_per_band": [e.tolist() for e in csp.eigenvalues_per_band],
            "bands": [list(b) for b in csp.bands], "node_id": csp.node_id})
    for hand, nmf in sorted(model.nmf.items()):
        stats = nmf.fit_stats
        index["nmf"][hand] = dump(f"nmf_{hand}.json", {
            "base": nmf.base.tolist(), "n_synergies": nmf.n_synergies,
            "objective": stats.objective if stats else None,
            "iterations": stats.iterations if stats else None})
    dump("prior.json", model.default_prior.to_dict())
    dump("bundle.json", index)
    return root


def _load_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"model bundle file missing: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}:{exc.lineno}: {exc.msg}") from None


def load_model_bundle(path: Path | str) -> HierarchyModel:
    root = Path(path)
    index = _load_json(root / "bundle.json")
    if index.get("version", 0) > BUNDLE_VERSION:
        raise ValidationError(f"bundle version {index['version']} is newer than supported "
                              f"({BUNDLE_VERSION})")
    tables = {}
    for modality in ("eeg_kde", "emg_kde"):
        tables[modality] = {}
        for key, name in index[modality].items():
            d = _load_json(root / name)
            tables[modality][tuple(key.split("/"))] = KdeModel(
                np.array(d["points"], dtype=float), np.array(d["bandwidths"], dtype=float),
                float(d["log_norm"]), d.get("state_id"))
    csp = {}
    for node, name in index["csp"].items():
        d = _load_json(root / name)
        csp[node] = CspModel(tuple(np.array(f, dtype=float) for f in d["filters_per_band"]),
                             tuple(np.array(e, dtype=float) for e in d["eigenvalues_per_band"]),
                             tuple(tuple(b) for b in d["bands"]), d["node_id"])
    nmf = {}
    for hand, name in index["nmf"].items():
        d = _load_json(root / name)
        stats = None if d.get("objective") is None else FitStats(d["objective"], d["iterations"])
        nmf[hand] = NmfModel(np.array(d["base"], dtype=float), int(d["n_synergies"]), stats)
    prior = ContextPrior.from_dict(_load_json(root / index["prior"]))
    return HierarchyModel(tables["eeg_kde"], tables["emg_kde"], csp, nmf, prior)


def bundle_extra(path: Path | str) -> dict:
    return _load_json(Path(path) / "bundle.json").get("extra", {})
