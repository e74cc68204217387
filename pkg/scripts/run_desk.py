"""Run the desk-scale comparison and a Welch test of P-DL against truth-initialized P-KF.

    python3 scripts/run_desk.py [configs/desk.json] [--workers N]
"""

import argparse
import json
from pathlib import Path

from inverse_ecg.config import load_config
from inverse_ecg.evalkit import welch_t_test
from inverse_ecg.experiment import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", default=str(Path(__file__).parents[1] / "configs" / "desk.json"))
    ap.add_argument("--workers", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config)
    result = run_experiment(cfg, args.workers)
    print(f"{'method':<12}{'sigma':>7}{'RE':>10}{'sd':>9}{'CC':>9}")
    for s in result.summaries:
        d = s.to_dict()
        print(f"{s.method:<12}{s.noise_sigma:>7g}{d['RE']['mean']:>10.4f}{d['RE']['sd']:>9.4f}"
              f"{d['CC']['mean']:>9.4f}")

    pdl = next((m.name for m in cfg.methods if m.kind == "pdl"), None)
    pkf = next((m.name for m in cfg.methods
                if m.kind == "pkf" and m.options.get("init", "truth") == "truth"), None)
    tests = {}
    for sigma in cfg.noise_levels if pdl and pkf else []:
        try:
            a, b = result.summary(pdl, sigma).to_dict(), result.summary(pkf, sigma).to_dict()
        except KeyError:
            continue
        try:
            t, nu, p = welch_t_test(a["RE"]["mean"], a["RE"]["sd"], a["trials"],
                                    b["RE"]["mean"], b["RE"]["sd"], b["trials"])
        except (ValueError, ZeroDivisionError) as exc:
            print(f"Welch test at sigma={sigma:g} skipped: {exc}")
            continue
        tests[repr(sigma)] = {"t": t, "nu": nu, "p": p}
        print(f"Welch P-DL vs P-KF(truth) at sigma={sigma:g}: t={t:.3f}, nu={nu:.1f}, p={p:.4g}")
    (Path(cfg.output_dir) / "welch.json").write_text(json.dumps(tests, indent=2))
    raise SystemExit(result.exit_code)


if __name__ == "__main__":
    main()
