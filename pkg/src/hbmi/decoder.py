"""Gesture hierarchy, context priors and MAP decoding over the 10 labels.

The hierarchy has four levels::

    S0  hand        Right | Left
    S1  movement    Rest | Grasp
    S2  grasp type  Power | Precision             (Grasp only)
    S3  gesture     MediumWrap | PowerSphere      (Power)
                    ParallelExtension | PalmarPinch (Precision)

Open palm is the Rest branch and stops at S1. For the two Rest labels the
S2/S3 likelihoods and transitions are replaced by a factor of one.

A label's score is the sum of KDE log-likelihoods of the observed features
at each level and the log transition probabilities of its state path.
Likelihood models are keyed by the full path prefix, e.g.
``("Right", "Grasp", "Power")``, so the hand conditions every level below it.
EEG level-0 features come from the root CSP; EEG level-1 and all EMG features
depend on the hypothesized hand (per-hand CSP and per-hand NMF).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ModelIncompleteError
from .likelihoods import KdeModel
from .spatial_filters import CspModel
from .synergies import NmfModel

RIGHT, LEFT = "Right", "Left"
REST, GRASP = "Rest", "Grasp"
POWER, PRECISION = "Power", "Precision"
OPEN_PALM = "OpenPalm"
MEDIUM_WRAP, POWER_SPHERE = "MediumWrap", "PowerSphere"
PARALLEL_EXTENSION, PALMAR_PINCH = "ParallelExtension", "PalmarPinch"

HANDS = (RIGHT, LEFT)
GESTURES = (OPEN_PALM, MEDIUM_WRAP, POWER_SPHERE, PARALLEL_EXTENSION, PALMAR_PINCH)

LEVEL_STATES: dict[int, tuple[str, ...]] = {
    0: HANDS,
    1: (REST, GRASP),
    2: (POWER, PRECISION),
    3: (MEDIUM_WRAP, POWER_SPHERE, PARALLEL_EXTENSION, PALMAR_PINCH),
}

# parent state value -> children, per level; level 0 has the single parent None
CHILDREN: dict[int, dict[Optional[str], tuple[str, ...]]] = {
    0: {None: HANDS},
    1: {RIGHT: (REST, GRASP), LEFT: (REST, GRASP)},
    2: {GRASP: (POWER, PRECISION)},
    3: {POWER: (MEDIUM_WRAP, POWER_SPHERE), PRECISION: (PARALLEL_EXTENSION, PALMAR_PINCH)},
}

LOG_ZERO = -1e300
EEG_ROOT = "root"

MODES = ("hbmi10", "eeg4", "emg5")


@dataclass(frozen=True, order=True)
class GestureLabel:
    hand: str
    gesture: str

    def __post_init__(self):
        if self.hand not in HANDS or self.gesture not in GESTURES:
            raise ValueError(f"invalid gesture label ({self.hand}, {self.gesture})")

    @property
    def index(self) -> int:
        return HANDS.index(self.hand) * len(GESTURES) + GESTURES.index(self.gesture)

    @property
    def name(self) -> str:
        return f"{self.hand}-{self.gesture}"

    @classmethod
    def parse(cls, name: str) -> "GestureLabel":
        hand, _, gesture = name.partition("-")
        return cls(hand, gesture)

    def __str__(self):
        return self.name


# tie-break order: Right before Left, then gesture order above
LABELS: tuple[GestureLabel, ...] = tuple(GestureLabel(h, g) for h in HANDS for g in GESTURES)


class StatePath(NamedTuple):
    s0: str
    s1: str
    s2: Optional[str] = None
    s3: Optional[str] = None

    def prefixes(self) -> list[tuple[str, ...]]:
        states = [s for s in self if s is not None]
        return [tuple(states[: k + 1]) for k in range(len(states))]


_GRASP_TYPE = {
    MEDIUM_WRAP: POWER, POWER_SPHERE: POWER,
    PARALLEL_EXTENSION: PRECISION, PALMAR_PINCH: PRECISION,
}


def label_to_path(label: GestureLabel) -> StatePath:
    if label.gesture == OPEN_PALM:
        return StatePath(label.hand, REST)
    return StatePath(label.hand, GRASP, _GRASP_TYPE[label.gesture], label.gesture)


def is_valid_path(s0, s1, s2=None, s3=None) -> bool:
    if s0 not in HANDS or s1 not in (REST, GRASP):
        return False
    if s1 == REST:
        return s2 is None and s3 is None
    return s2 in CHILDREN[2][GRASP] and s3 in CHILDREN[3].get(s2, ())


def path_to_label(path: StatePath) -> GestureLabel:
    if not is_valid_path(*path):
        raise ValueError(f"invalid state path {tuple(path)}")
    return GestureLabel(path.s0, OPEN_PALM if path.s1 == REST else path.s3)


# ---------------------------------------------------------------- priors


@dataclass(frozen=True)
class ContextPrior:
    """Conditional tables P(S_i | S_{i-1}, C), keyed level -> parent -> child."""

    tables: Mapping[int, Mapping[Optional[str], Mapping[str, float]]]

    def __post_init__(self):
        for level, rows in self.tables.items():
            for parent, row in rows.items():
                values = np.array(list(row.values()), dtype=float)
                if np.any(values < 0) or np.any(values > 1) or abs(values.sum() - 1) > 1e-12:
                    raise ValueError(f"level {level} row {parent!r} is not a distribution: {row}")

    def prob(self, level: int, parent: Optional[str], child: str) -> float:
        return self.tables[level][parent][child]

    def log_prob(self, level: int, parent: Optional[str], child: str) -> float:
        p = self.prob(level, parent, child)
        return float(np.log(p)) if p > 0 else LOG_ZERO

    def to_dict(self) -> dict:
        return {str(level): {("" if parent is None else parent): dict(row)
                             for parent, row in rows.items()}
                for level, rows in self.tables.items()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ContextPrior":
        return cls({int(level): {(None if parent == "" else parent): dict(row)
                                 for parent, row in rows.items()}
                    for level, rows in data.items()})


def uniform_prior() -> ContextPrior:
    return ContextPrior({
        level: {parent: {c: 1.0 / len(children) for c in children}
                for parent, children in rows.items()}
        for level, rows in CHILDREN.items()
    })


def inject_context(level: int, p: float, favored: str,
                   base: Optional[ContextPrior] = None) -> ContextPrior:
    """Give ``favored`` probability p in every row of ``level`` that contains it.

    The remaining 1 - p is split evenly among its siblings; other levels are
    copied from ``base`` (uniform by default).
    """
    if level not in CHILDREN:
        raise ValueError(f"no hierarchy level {level}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    if favored not in LEVEL_STATES[level]:
        raise ValueError(f"{favored!r} is not a state at level {level}")
    base = base or uniform_prior()
    tables = {lv: {par: dict(row) for par, row in rows.items()} for lv, rows in base.tables.items()}
    for parent, children in CHILDREN[level].items():
        if favored not in children:
            continue
        rest = (1.0 - p) / (len(children) - 1)
        tables[level][parent] = {c: (p if c == favored else rest) for c in children}
    return ContextPrior(tables)


def uniform_share(level: int, favored: str) -> float:
    for children in CHILDREN[level].values():
        if favored in children:
            return 1.0 / len(children)
    raise ValueError(f"{favored!r} is not a state at level {level}")


def path_log_prior(prior: ContextPrior, path: StatePath, depth: int = 4) -> float:
    total = prior.log_prob(0, None, path.s0)
    if depth > 1:
        total += prior.log_prob(1, path.s0, path.s1)
    if depth > 2 and path.s1 == GRASP:
        total += prior.log_prob(2, path.s1, path.s2)
        total += prior.log_prob(3, path.s2, path.s3)
    return total


# ---------------------------------------------------------------- model


@dataclass
class WindowFeatures:
    """Observed features for one window, or a batch when values are 2-d.

    ``eeg`` maps a CSP node ("root", "Right", "Left") to its 12-dim FBCSP
    vector; ``emg`` maps a hand to the 5-dim synergy activations obtained
    with that hand's NMF base.
    """

    eeg: dict[str, np.ndarray] = field(default_factory=dict)
    emg: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        any_value = next(iter({**self.eeg, **self.emg}.values()))
        return 1 if np.ndim(any_value) == 1 else len(any_value)

    def take(self, index) -> "WindowFeatures":
        return WindowFeatures({k: np.asarray(v)[index] for k, v in self.eeg.items()},
                              {k: np.asarray(v)[index] for k, v in self.emg.items()})


@dataclass
class HierarchyModel:
    eeg_kde: dict[tuple[str, ...], KdeModel]
    emg_kde: dict[tuple[str, ...], KdeModel]
    csp: dict[str, CspModel] = field(default_factory=dict)
    nmf: dict[str, NmfModel] = field(default_factory=dict)
    default_prior: ContextPrior = field(default_factory=uniform_prior)


def eeg_node_for(prefix: tuple[str, ...]) -> str:
    return EEG_ROOT if len(prefix) == 1 else prefix[0]


def _eeg_prefixes(path: StatePath) -> list[tuple[str, ...]]:
    return path.prefixes()[:2]


def _emg_prefixes(path: StatePath) -> list[tuple[str, ...]]:
    return path.prefixes()[1:]


def mode_targets(mode: str, hand: str = RIGHT) -> list[tuple[object, StatePath, int]]:
    """Candidate classes for a decoding mode as (class id, path, depth)."""
    if mode == "hbmi10":
        return [(label, label_to_path(label), 4) for label in LABELS]
    if mode == "eeg4":
        return [((h, s1), StatePath(h, s1), 2) for h in HANDS for s1 in (REST, GRASP)]
    if mode == "emg5":
        return [(label, label_to_path(label), 4) for label in LABELS if label.hand == hand]
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def true_class(mode: str, label: GestureLabel):
    if mode == "eeg4":
        return (label.hand, REST if label.gesture == OPEN_PALM else GRASP)
    return label


def _kde(table, prefix, modality):
    try:
        return table[prefix]
    except KeyError:
        raise ModelIncompleteError(
            f"no {modality} likelihood model for state {'/'.join(prefix)}") from None


def likelihood_table(model: HierarchyModel, feats: WindowFeatures, mode: str = "hbmi10",
                     hand: str = RIGHT) -> dict[tuple[str, tuple[str, ...]], np.ndarray]:
    """Log-likelihood of every needed (modality, prefix) for a batch of windows."""
    use_eeg = mode in ("hbmi10", "eeg4")
    use_emg = mode in ("hbmi10", "emg5")
    needed: dict[tuple[str, tuple[str, ...]], np.ndarray] = {}
    for _, path, depth in mode_targets(mode, hand):
        if use_eeg:
            for prefix in _eeg_prefixes(path):
                key = ("eeg", prefix)
                if key not in needed:
                    kde = _kde(model.eeg_kde, prefix, "EEG")
                    x = np.atleast_2d(feats.eeg[eeg_node_for(prefix)])
                    needed[key] = kde.logpdf(x)
        if use_emg and depth > 2:
            for prefix in _emg_prefixes(path):
                key = ("emg", prefix)
                if key not in needed:
                    kde = _kde(model.emg_kde, prefix, "EMG")
                    needed[key] = kde.logpdf(np.atleast_2d(feats.emg[prefix[0]]))
    return needed


def score_matrix(model: HierarchyModel, prior: ContextPrior, feats: WindowFeatures,
                 mode: str = "hbmi10", hand: str = RIGHT,
                 transitions: bool = True) -> tuple[list, np.ndarray]:
    """Scores of every candidate class for every window: (classes, n x K array)."""
    table = likelihood_table(model, feats, mode, hand)
    targets = mode_targets(mode, hand)
    use_eeg = mode in ("hbmi10", "eeg4")
    use_emg = mode in ("hbmi10", "emg5")
    n = len(next(iter(table.values())))
    scores = np.zeros((n, len(targets)))
    for k, (_, path, depth) in enumerate(targets):
        col = np.zeros(n)
        if use_eeg:
            for prefix in _eeg_prefixes(path):
                col = col + table[("eeg", prefix)]
        if use_emg and depth > 2:
            for prefix in _emg_prefixes(path):
                col = col + table[("emg", prefix)]
        if transitions:
            col = col + path_log_prior(prior, path, depth)
        scores[:, k] = col
    return [t[0] for t in targets], scores


def score_label(model: HierarchyModel, prior: ContextPrior, feats: WindowFeatures,
                label: GestureLabel) -> float:
    classes, scores = score_matrix(model, prior, feats)
    return float(scores[0, classes.index(label)])


def map_decode(model: HierarchyModel, prior: ContextPrior, feats: WindowFeatures,
               mode: str = "hbmi10", hand: str = RIGHT):
    """Best class for a single window plus the full score vector.

    Ties go to the first class in enumeration order.
    """
    classes, scores = score_matrix(model, prior, feats, mode, hand)
    return classes[int(np.argmax(scores[0]))], scores[0]


def decode_batch(model: HierarchyModel, priors, feats: WindowFeatures,
                 mode: str = "hbmi10", hand: str = RIGHT):
    """Decode many windows; ``priors`` is one ContextPrior or one per window."""
    if isinstance(priors, ContextPrior):
        classes, scores = score_matrix(model, priors, feats, mode, hand)
    else:
        priors = list(priors)
        classes, scores = score_matrix(model, priors[0], feats, mode, hand, transitions=False)
        targets = mode_targets(mode, hand)
        cache: dict[int, np.ndarray] = {}
        for i, prior in enumerate(priors):
            key = id(prior)
            if key not in cache:
                cache[key] = np.array([path_log_prior(prior, path, depth)
                                       for _, path, depth in targets])
            scores[i] += cache[key]
    best = np.argmax(scores, axis=1)
    return [classes[b] for b in best], scores


def posterior(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=-1, keepdims=True)


def majority_vote(labels: Sequence) -> object:
    """Most frequent decision; ties go to the earliest-seen value."""
    counts: dict = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    return max(counts, key=lambda k: (counts[k], -list(counts).index(k)))


# ---------------------------------------------------------------- oracle


def _linear_kernel_density(kde: KdeModel, x: np.ndarray):
    import mpmath

    x = np.asarray(x, dtype=float)
    total = mpmath.mpf(0)
    for point in kde.points:
        exponent = 0.0
        for xj, pj, hj in zip(x, point, kde.bandwidths):
            exponent += ((xj - pj) / hj) ** 2
        total += mpmath.exp(-0.5 * exponent)
    norm = mpmath.mpf(1)
    for hj in kde.bandwidths:
        norm *= mpmath.sqrt(2 * mpmath.pi) * hj
    return total / (norm * len(kde.points))


def exhaustive_joint(model: HierarchyModel, prior: ContextPrior,
                     feats: WindowFeatures) -> dict[GestureLabel, object]:
    """Unnormalized joint probability of each label by brute-force enumeration.

    Every assignment of (s0, s1, s2, s3), valid or not, is enumerated;
    invalid ones get zero probability. Probabilities are multiplied in the
    linear domain with arbitrary-precision floats (mpmath), each evidence
    slot rescaled by its largest value. Kernel densities are summed directly
    rather than through the log-sum-exp path used by KdeModel.
    """
    import mpmath

    domains = [LEVEL_STATES[0], LEVEL_STATES[1], LEVEL_STATES[2] + (None,),
               LEVEL_STATES[3] + (None,)]
    slots = ["eeg0", "eeg1", "emg1", "emg2", "emg3"]
    density_cache: dict = {}

    def density(modality, prefix):
        key = (modality, prefix)
        if key not in density_cache:
            if modality == "eeg":
                kde = _kde(model.eeg_kde, prefix, "EEG")
                x = feats.eeg[eeg_node_for(prefix)]
            else:
                kde = _kde(model.emg_kde, prefix, "EMG")
                x = feats.emg[prefix[0]]
            density_cache[key] = _linear_kernel_density(kde, np.ravel(x))
        return density_cache[key]

    one = mpmath.mpf(1)
    factors = {}
    for s0, s1, s2, s3 in itertools.product(*domains):
        if not is_valid_path(s0, s1, s2, s3):
            continue
        grasp = s1 == GRASP
        factors[(s0, s1, s2, s3)] = {
            "eeg0": density("eeg", (s0,)),
            "eeg1": density("eeg", (s0, s1)),
            "emg1": density("emg", (s0, s1)),
            "emg2": density("emg", (s0, s1, s2)) if grasp else one,
            "emg3": density("emg", (s0, s1, s2, s3)) if grasp else one,
        }
    scale = {slot: max(f[slot] for f in factors.values()) for slot in slots}

    def transition(level, parent, child):
        return mpmath.mpf(prior.prob(level, parent, child))

    joint = {}
    for s0, s1, s2, s3 in itertools.product(*domains):
        if not is_valid_path(s0, s1, s2, s3):
            value = mpmath.mpf(0)
        else:
            value = transition(0, None, s0) * transition(1, s0, s1)
            if s1 == GRASP:
                value *= transition(2, s1, s2) * transition(3, s2, s3)
            f = factors[(s0, s1, s2, s3)]
            for slot in slots:
                value *= f[slot] / scale[slot]
            joint[path_to_label(StatePath(s0, s1, s2, s3))] = value
    return {label: joint[label] for label in LABELS}


def exhaustive_posterior(model: HierarchyModel, prior: ContextPrior,
                         feats: WindowFeatures) -> np.ndarray:
    """Normalized label posterior from ``exhaustive_joint``, in LABELS order."""
    import mpmath

    joint = exhaustive_joint(model, prior, feats)
    total = mpmath.fsum(joint.values())
    return np.array([float(joint[label] / total) for label in LABELS])


def exhaustive_decode(model: HierarchyModel, prior: ContextPrior,
                      feats: WindowFeatures) -> GestureLabel:
    joint = exhaustive_joint(model, prior, feats)
    best = LABELS[0]
    for label in LABELS[1:]:
        if joint[label] > joint[best]:
            best = label
    return best
