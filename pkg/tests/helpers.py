"""Random hierarchy models for decoder property tests."""
import numpy as np

from hbmi.decoder import (
    CHILDREN,
    EEG_ROOT,
    GRASP,
    HANDS,
    LABELS,
    ContextPrior,
    HierarchyModel,
    WindowFeatures,
    label_to_path,
)
from hbmi.likelihoods import KdeModel


def all_prefixes():
    eeg, emg = set(), set()
    for label in LABELS:
        prefixes = label_to_path(label).prefixes()
        eeg.update(prefixes[:2])
        emg.update(prefixes[1:])
    return sorted(eeg), sorted(emg)


def random_model(rng, eeg_dim=3, emg_dim=2, n_points=2) -> HierarchyModel:
    eeg_prefixes, emg_prefixes = all_prefixes()

    def kde(d, prefix):
        pts = rng.normal(size=(n_points, d)) * rng.uniform(0.5, 2.0)
        h = rng.uniform(0.3, 1.5, size=d)
        return KdeModel.from_parts(pts, h, "/".join(prefix))

    return HierarchyModel({p: kde(eeg_dim, p) for p in eeg_prefixes},
                          {p: kde(emg_dim, p) for p in emg_prefixes})


def random_features(rng, eeg_dim=3, emg_dim=2, n=None) -> WindowFeatures:
    shape = lambda d: (d,) if n is None else (n, d)
    eeg = {node: rng.normal(size=shape(eeg_dim)) * 1.5 for node in (EEG_ROOT,) + HANDS}
    emg = {hand: rng.normal(size=shape(emg_dim)) * 1.5 for hand in HANDS}
    return WindowFeatures(eeg, emg)


def random_prior(rng, degenerate=0.1) -> ContextPrior:
    tables = {}
    for level, rows in CHILDREN.items():
        tables[level] = {}
        for parent, children in rows.items():
            if rng.uniform() < degenerate:
                p = np.zeros(len(children))
                p[rng.integers(len(children))] = 1.0
            else:
                p = rng.dirichlet(np.ones(len(children)))
            p[-1] = 1.0 - p[:-1].sum()
            tables[level][parent] = dict(zip(children, p.tolist()))
    return ContextPrior(tables)


def direct_log_joint(model, prior, feats, label):
    """log of the explicit probability product, evaluated with mpmath."""
    import mpmath

    def density(kde, x):
        total = mpmath.mpf(0)
        for p in kde.points:
            term = mpmath.mpf(1)
            for xj, pj, hj in zip(x, p, kde.bandwidths):
                term *= mpmath.npdf(xj, pj, hj)
            total += term
        return total / len(kde.points)

    path = label_to_path(label)
    s0, s1, s2, s3 = path
    value = mpmath.mpf(prior.prob(0, None, s0)) * prior.prob(1, s0, s1)
    value *= density(model.eeg_kde[(s0,)], feats.eeg[EEG_ROOT])
    value *= density(model.eeg_kde[(s0, s1)], feats.eeg[s0])
    value *= density(model.emg_kde[(s0, s1)], feats.emg[s0])
    if s1 == GRASP:
        value *= prior.prob(2, s1, s2) * prior.prob(3, s2, s3)
        value *= density(model.emg_kde[(s0, s1, s2)], feats.emg[s0])
        value *= density(model.emg_kde[(s0, s1, s2, s3)], feats.emg[s0])
    return mpmath.log(value) if value > 0 else None


ACCEPTANCE: list[str] = []


def verdict(number, title, ok, detail=""):
    """Record and print one acceptance line, then fail the test if needed."""
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" | {detail}" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line
