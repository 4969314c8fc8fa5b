"""Maximum posterior std of the third maglev subsystem: reference kernel vs fitted kernel.

Both models are trained on the same noisy samples (200 by default), so the
comparison isolates the effect of the hyperparameters on rho_bar.
"""
import argparse

from isps import gpreg, simkit
from isps.sfsys import maglev_system

REFERENCE = gpreg.SeKernelParams(119.0, (6.0, 1.45e4, 14.3))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--grid", type=int, default=25)
    args = ap.parse_args()
    system = maglev_system()
    ds = simkit.generate_dataset(system, 3, simkit.DataGenConfig(samples=args.samples, noise_std=0.01, seed=args.seed))
    box = system.domain.sub(3)
    fitted = gpreg.fit_hyperparameters(ds, REFERENCE)
    for label, kp in (("reference", REFERENCE), ("fitted", fitted)):
        model = gpreg.fit(ds, kp)
        _, rho = gpreg.max_std_over_domain(model, box.lower, box.upper, args.grid)
        lml = gpreg.log_marginal_likelihood(ds, kp)
        print(f"{label:>9}: signal_std {kp.signal_std:.4g}, length_scales "
              f"{', '.join(f'{v:.4g}' for v in kp.length_scales)}; log marginal likelihood {lml:.2f}; "
              f"rho_bar {rho:.4g}")


if __name__ == "__main__":
    main()
