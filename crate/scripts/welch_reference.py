"""Reference Welch t-test values at 50 significant digits.

Writes crates/core/tests/fixtures/welch_reference.json. Sample values are
Python floats; the statistics are computed from their exact binary values.
"""

import json
import random
from pathlib import Path

from mpmath import mp, mpf, sqrt, betainc

mp.dps = 50


def welch(a, b):
    a = [mpf(x) for x in a]
    b = [mpf(x) for x in b]
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    qa, qb = va / na, vb / nb
    t = (ma - mb) / sqrt(qa + qb)
    df = (qa + qb) ** 2 / (qa**2 / (na - 1) + qb**2 / (nb - 1))
    p = betainc(df / 2, mpf(1) / 2, 0, df / (df + t**2), regularized=True)
    return t, df, p


def main():
    rng = random.Random(20240611)
    cases = []
    for _ in range(50):
        na, nb = rng.randint(2, 12), rng.randint(2, 12)
        shift = rng.uniform(-2.0, 2.0)
        a = [rng.gauss(0.0, rng.uniform(0.1, 2.0)) for _ in range(na)]
        b = [rng.gauss(shift, rng.uniform(0.1, 2.0)) for _ in range(nb)]
        t, df, p = welch(a, b)
        cases.append(
            {
                "a": a,
                "b": b,
                "t": mp.nstr(t, 30),
                "df": mp.nstr(df, 30),
                "p": mp.nstr(p, 30),
            }
        )
    out = Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures/welch_reference.json"
    out.write_text(json.dumps(cases, indent=1) + "\n")


if __name__ == "__main__":
    main()
