"""Within-session accuracy of session 1 across separability values.

This is the calibration run behind the acceptance gates (seed 7, drift 0);
separability 0 should sit at chance and 2.0 above the gates.
"""
import argparse

from hbmi.datasets import SynthConfig, generate_synthetic
from hbmi.evaluation import EvalProtocol, within_session_cv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--values", type=float, nargs="+", default=[0.0, 0.5, 1.0, 2.0])
    ap.add_argument("--repetitions", type=int, default=1)
    args = ap.parse_args()

    print("separability,hbmi10,eeg4,emg5")
    for sep in args.values:
        source = generate_synthetic(SynthConfig(seed=args.seed, separability_eeg=sep,
                                                separability_emg=sep, n_sessions=1))
        reps = within_session_cv(source, 1, protocol=EvalProtocol(repetitions=args.repetitions))
        print(f"{sep:g}," + ",".join(f"{reps[m].accuracy:.4f}" for m in ("hbmi10", "eeg4", "emg5")),
              flush=True)


if __name__ == "__main__":
    main()
