"""Run a shipped case study end to end and print the headline numbers.

    python3 scripts/run_case_study.py maglev --out runs/maglev
    python3 scripts/run_case_study.py twolink
"""
import argparse
import json
import sys
import time
from pathlib import Path

from isps.cli.main import main as cli_main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def summarize(out: Path) -> None:
    man = json.loads((out / "manifest.json").read_text())
    cert = man["stages"]["certify"]["results"]
    for kind, c in cert["certificates"].items():
        print(f"{kind:>13}: k = {c['k']:.4g}, c = {c['c']:.4g}, probability >= {c['probability']:.6f}")
    for ref in cert["bounds"].get("probabilistic", {}).get("reference", []):
        iv = ref["interval"]
        print(f"{ref['label']} {ref['threshold']} on subsystem {ref['subsystem']}: "
              f"P in [{iv['lower']:.4f}, {iv['upper']:.4f}]")
    for name, sc in man["stages"]["simulate"]["results"]["scenarios"].items():
        for kind, v in sc["certificates"].items():
            print(f"{name} ({kind}): d(0) = {v['initial_closeness']:.4g}, d(t_end) = {v['final_closeness']:.3e}, "
                  f"violations = {v['violations']}, residual pass = {v['residual_pass_fraction']:.4f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("case", choices=["maglev", "twolink"])
    ap.add_argument("--out", default=None, help="output directory (default: the config's 'out' key)")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    argv = ["run", "--config", str(CONFIGS / f"{args.case}.toml")]
    if args.out:
        argv += ["--out", args.out]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    t0 = time.perf_counter()
    code = cli_main(argv)
    print(f"pipeline finished with exit code {code} in {time.perf_counter() - t0:.1f} s")
    out = Path(args.out) if args.out else (CONFIGS / f"{args.case}.toml").parent / f"../runs/{args.case}"
    if (out / "manifest.json").exists():
        summarize(out.resolve())
    return code


if __name__ == "__main__":
    sys.exit(main())
