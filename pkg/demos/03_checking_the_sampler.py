"""Is the Gibbs sweep targeting the right posterior?

Successive-conditional check: alternate one sweep given the data with a fresh
draw of the data given the parameters.  A correct kernel leaves the prior
invariant, so long-run averages of a few functionals must match independent
prior draws.  A kernel with a deliberately wrong sigma update is run as a
negative control; it should be caught.

    python3 demos/03_checking_the_sampler.py [n_cycles]
"""

import sys

from dirfactor.validation import prior_reproduction_test

n = int(sys.argv[1]) if len(sys.argv) > 1 else 20_000
for broken in (False, True):
    res = prior_reproduction_test(n_cycles=n, seed=0, negative_control=broken)
    print("broken kernel" if broken else "correct kernel", f"max |z| = {res.max_abs_z:.2f}")
    for name, z in zip(res.names, res.z):
        print(f"   {name:14s} z = {z:6.2f}")
