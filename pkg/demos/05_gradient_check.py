#!/usr/bin/env python3
"""Validate every analytic gradient against central finite differences.

Both objectives are differentiated by hand (there is no autodiff anywhere
in the package), so this check is the ground truth for the training code:
each parameter block of each objective must agree with a two-sided
numerical derivative to a relative error below 1e-4.
"""

from gcmr.cli import run_gradcheck

for seed in (0, 1, 2):
    print(f"seed {seed}")
    print(f"  {'objective':<12} {'parameter':<12} {'max rel err':>12}")
    for objective, name, err in run_gradcheck(seed, dim=8, hidden=4, n_classes=5):
        status = "ok" if err < 1e-4 else "MISMATCH"
        print(f"  {objective:<12} {name:<12} {err:>12.3e}  {status}")
