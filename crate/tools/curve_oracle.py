"""Reference values of the double-logistic curve at 50 significant digits.

Writes random (parameters, day) pairs and the curve value computed with
mpmath from the exact binary values of the inputs.

    python3 tools/curve_oracle.py > crates/cli/tests/fixtures/curve_oracle.tsv
"""

import random
import sys

from mpmath import exp, log, mp, mpf

mp.dps = 50
N = 10_000


def sigmoid(x):
    return 1 / (1 + exp(-x))


def softplus(x):
    return log(1 + exp(x))


def curve(mn, mx, sos, matsos, sen, eossen, t):
    gm, ge = softplus(matsos), softplus(eossen)
    up = sigmoid(4 * (t - sos) / gm - 2)
    down = sigmoid(4 * (t - sen) / ge - 2)
    return mn + (mx - mn) * (up - down)


def main():
    rng = random.Random(7)
    out = sys.stdout
    out.write("ndvi_min\tndvi_max\tsos\tmatsos\tsen\teossen\tt\tvalue\n")
    for i in range(N):
        mn = rng.uniform(-0.1, 0.7)
        mx = mn + (1.0 - mn) * rng.random()
        sos = rng.random()
        sen = rng.random()
        matsos = rng.uniform(-7.0, 3.0)
        eossen = rng.uniform(-7.0, 3.0)
        t = (0.0, 1.0)[i % 2] if i % 500 < 2 else rng.random()
        args = [mn, mx, sos, matsos, sen, eossen, t]
        v = curve(*(mpf(a) for a in args))
        out.write("\t".join(repr(a) for a in args) + "\t" + mp.nstr(v, 25, strip_zeros=False) + "\n")


if __name__ == "__main__":
    main()
