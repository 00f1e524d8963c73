"""Context-injection sweep: the four single-level rows on online sessions 4 and 5."""
import argparse
from pathlib import Path

from hbmi.datasets import SynthConfig, atomic_write_text, generate_synthetic
from hbmi.evaluation import TABLE2_ROWS, context_sweep, sweep_table
from hbmi.pipeline import FeatureCache


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/table2")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--separability", type=float, default=2.0)
    ap.add_argument("--drift", type=float, default=0.3,
                    help="nonzero so the baseline leaves room for context to help")
    ap.add_argument("--q", type=float, default=1.0, help="probability the context is correct")
    args = ap.parse_args()

    source = generate_synthetic(SynthConfig(seed=args.seed, separability_eeg=args.separability,
                                            separability_emg=args.separability,
                                            session_drift=args.drift, n_sessions=5))
    cache = FeatureCache(source)
    out = Path(args.out)
    for s in (4, 5):
        baseline, rows = context_sweep(source, s, TABLE2_ROWS, q=args.q, cache=cache)
        text = sweep_table(baseline, rows)
        atomic_write_text(out / f"context_session{s}.csv", text)
        print(text)


if __name__ == "__main__":
    main()
