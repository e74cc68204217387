"""Sweep P-DL training settings on the desk problem and print RE at quarter points.

This is how the desk defaults in configs/desk.json were chosen.  Example:

    python3 scripts/pdl_sweep.py --lr 1e-3 --epochs 12000 --w 0.1 --seeds 0 1
    python3 scripts/pdl_sweep.py --n-f 0 --w 0 --seeds 0 1          # data term only
    python3 scripts/pdl_sweep.py --perturb k_r=1.1                   # physics mismatch
"""

import argparse
import time

from inverse_ecg.config import ExperimentConfig
from inverse_ecg.evalkit import evaluate_metrics
from inverse_ecg.experiment import build_domain, build_transfer, build_truth, measurements
from inverse_ecg.neuralnet import AdamConfig
from inverse_ecg.pdl_solver import Problem, TrainConfig, predict_hsp, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--epochs", type=int, default=12000)
    ap.add_argument("--w", type=float, default=0.1)
    ap.add_argument("--sigma", type=float, default=0.01)
    ap.add_argument("--n-f", type=int, default=50000)
    ap.add_argument("--n-bc", type=int, default=1000)
    ap.add_argument("--batch-times", type=int, default=16)
    ap.add_argument("--batch-colloc", type=int, default=512)
    ap.add_argument("--batch-boundary", type=int, default=64)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--perturb", help="NAME=FACTOR applied to the physics loss only")
    args = ap.parse_args()

    cfg = ExperimentConfig()
    if args.perturb:
        name, factor = args.perturb.split("=")
        cfg.physics_override = {name: float(factor)}
    dom, truth, R = build_domain(cfg), build_truth(cfg), build_transfer(cfg).matrix
    for trial in args.seeds:
        seed = cfg.trial_seed(trial)
        problem = Problem(dom, R, measurements(cfg, args.sigma, seed), truth.times, cfg.model_params)
        tc = TrainConfig(epochs=args.epochs, w=args.w, N_f=args.n_f, N_bc=args.n_bc,
                         batch_times=args.batch_times, batch_colloc=args.batch_colloc,
                         batch_boundary=args.batch_boundary, seed=seed, colloc_seed=seed + 7919,
                         adam=AdamConfig(lr=args.lr))
        checkpoints = []

        def watch(state, record):
            if record["epoch"] % max(1, args.epochs // 4) == 0:
                est = predict_hsp(state, dom, truth.times)
                checkpoints.append(round(evaluate_metrics(est.u, truth.u).RE, 4))

        t0 = time.perf_counter()
        train(tc, problem, callback=watch)
        print(f"trial {trial}: RE at quarters {checkpoints} ({time.perf_counter() - t0:.0f}s)",
              flush=True)


if __name__ == "__main__":
    main()
