"""Train all four model kinds at the 30, 45 and 60 minute horizons on one corridor.

Writes the test-split error table (set, metric, horizon, model, value) as CSV.

    python scripts/horizon_sweep.py --epochs 60 --out sweep.csv
"""
import argparse

from mstgat.evaluation import write_metrics_csv
from mstgat.experiments import run_synthetic
from mstgat.models import KINDS
from mstgat.synth import SynthConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=60)
    parser.add_argument("--horizons", type=int, nargs="+", default=[30, 45, 60])
    parser.add_argument("--models", nargs="+", default=list(KINDS), choices=KINDS)
    parser.add_argument("--out", default="horizon_sweep.csv")
    args = parser.parse_args()

    synth = SynthConfig(seed=args.seed)
    rows = []
    for minutes in args.horizons:
        for kind in args.models:
            run = run_synthetic(kind, synth, horizon_minutes=minutes, epochs=args.epochs)
            rep = run.reports["test"]
            print(f"{minutes:>3} min  {kind:<8} MAE {rep.mae:6.3f}  RMSE {rep.rmse:6.3f}  MAPE {rep.mape:6.2f}%  "
                  f"({run.seconds:.0f}s)", flush=True)
            rows.append(("synthetic", minutes, kind, rep))
    write_metrics_csv(rows, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
