"""
How good is each inverse-Hessian approximation?
===============================================

Random linear-regression Hessians ``H = X X^T / N`` with ``N = 100``
become rank deficient once ``d > N``. Each method's dense approximate
inverse is compared with ``(H + lam I)^-1`` in the spectral norm, after the
best rescaling ``alpha``. The same study runs from the command line as
``kfacbo diagnostic``.
"""

from kfacbo.tasks import diagnostic_study, summarize

methods = ["KFAC", "KFAC-exact", "Neu-3", "Neu-20", "CG-3", "CG-10", "Identity"]
ds = [10, 100, 300]

table = summarize(diagnostic_study(ds, N=100, damping=1e-5, seeds=range(3), methods=methods))

###############################################################################
# Seed-averaged relative errors.

print(f"{'method':>11}" + "".join(f"{'d=' + str(d):>12}" for d in ds))
for m in methods:
    print(f"{m:>11}" + "".join(f"{table[(m, d)]:12.2e}" for d in ds))

###############################################################################
# ``KFAC-exact`` uses the exact output factor and is exact up to round-off:
# any error left in ``KFAC`` comes from sampling one pseudo-gradient per
# example. Iterative methods on a fixed budget fall behind as the spectrum
# spreads out, most sharply around ``d = N``.
