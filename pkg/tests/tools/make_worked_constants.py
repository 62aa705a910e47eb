"""Independent plug-in calculator for the worked constants fixture.

Evaluates every derived constant of the convergence-bound formulas for one
fixed parameter set, symbol by symbol, using 60-digit arithmetic.  This
script deliberately imports nothing from the package under test; it is the
oracle the package is compared against.

Run from the repository root:

    python3 tests/tools/make_worked_constants.py

which rewrites tests/fixtures/worked_constants.json.
"""

import json
import os

import mpmath as mp

mp.mp.dps = 60

# --- fixed worked instance -------------------------------------------------
MU = mp.mpf(1)
L = mp.mpf(1)
A = mp.mpf(1)
B = mp.mpf(1)
C = mp.mpf(1)
LIP_G = mp.mpf(1)
TMIX = mp.mpf(2)
DIM = mp.mpf(2)
GAIN = mp.mpf(3)  # stepsize numerator
DELTA = mp.mpf(1) / 10
GAP0 = mp.mpf(1)  # initial suboptimality

E = mp.e


def m_constants():
    u = 2 * A * L + B
    root_2lc = mp.sqrt(2 * L * C)
    if u > 0:
        m1 = 2 * mp.sqrt(2 * u / L)
        m2 = 2 * mp.sqrt(L * C * C / (2 * u))
    elif C > 0:
        m1 = root_2lc / L
        m2 = root_2lc
    else:
        m1 = mp.mpf(0)
        m2 = mp.mpf(0)
    m3 = (2 * LIP_G * mp.sqrt(2 * L * u) + LIP_G * root_2lc + 2 * L * u) / (L * (L + LIP_G))
    m4 = (LIP_G * root_2lc + 2 * L * C) / (L + LIP_G)
    return m1, m2, m3, m4


def drift_aggregates(m1, m2, m3, m4):
    sqrt_d = mp.sqrt(DIM)
    d1 = (
        2 * GAIN * m1 * TMIX * L * sqrt_d * GAP0
        + 10 * GAIN * m2 * TMIX * sqrt_d
        + E * GAIN**2 * m4 * TMIX * (L + LIP_G) * sqrt_d / (MU * GAIN - 1)
    )
    d2 = 8 * GAIN * m1 * TMIX * L * sqrt_d + E * GAIN**2 * m3 * TMIX * (L + LIP_G) * L * sqrt_d / (
        MU * GAIN - 1
    )
    return d1, d2


def variance_proxies(d1, d2):
    u = 2 * A * L + B
    scale = (GAIN * E) ** 2 * L * (TMIX**2 * DIM + 1)
    bracket = (u / (2 * MU * GAIN - 3)) * (2 * GAP0 + d1 / d2 + E * GAIN**2 * C * L / d2)
    nu1 = 32 * scale * (bracket + C / (2 * MU * GAIN - 2))
    nu2 = 64 * scale * u / (2 * MU * GAIN - 3)
    return nu1, nu2


def offset_threshold(d2, nu2):
    term1 = (GAIN * L / 2) * (2 * A + B / MU)
    term2 = MU * GAIN
    term3 = 2 * d2
    inner = 2 * mp.log(48 * nu2) + 1
    term4 = 24 * nu2 * inner * mp.log(48 * nu2 * inner / DELTA)
    return [term1, term2, term3, term4], max(term1, term2, term3, term4)


def implicit_offset_closed_form(nu2):
    big_c = 4 * nu2
    c1 = 12 * big_c * mp.log(12 * big_c) + 6 * big_c
    return c1 * mp.log(2 * c1 / DELTA)


def envelope_coefficients(d1, d2, nu1, k0):
    gamma1 = E * GAIN**2 * C * L + 2 * (d1 + d2 * GAP0)
    kbar0 = k0 / mp.log(2 / DELTA)
    log_k0_bar = mp.log(2 * k0 / DELTA) / mp.log(2 / DELTA)
    gamma2 = 4 * nu1 * (1 + 3 * log_k0_bar) + 2 * mp.sqrt(nu1 * (kbar0 * GAP0 + 2 * gamma1))
    return gamma1, gamma2, kbar0, log_k0_bar


def envelope_value(gamma1, gamma2, k0, k):
    lam = k0 * GAP0 + gamma1 + gamma2 * mp.log(2 * k0 / DELTA) + gamma2 * mp.log(2 * k / DELTA)
    return lam / (k + k0)


def mean_bound_value(d1, d2, k0, k):
    return (GAP0 * (k0 + 2 * d2) + E * GAIN**2 * C * L + 2 * d1) / (k + k0)


def martingale_only(k0):
    core = 8 * L * (GAIN * E) ** 2
    nu1_hat = core * (
        (2 * L * (A + 1) + B) / (2 * MU * GAIN - 3) * GAP0 + C / (MU * GAIN - 1)
    ) + E * GAIN**2 * C * L / 16
    nu2_hat = core * (2 * L * (A + 1) + B) / (2 * MU * GAIN - 3)
    gamma1_hat = E * GAIN**2 * C * L / 2
    kbar0 = k0 / mp.log(2 / DELTA)
    gamma2_hat = 12 * nu1_hat * (1 + mp.log(8 * nu1_hat)) + 2 * mp.sqrt(
        nu1_hat * (kbar0 * GAP0 + E * GAIN**2 * C * L)
    )
    offset_floor = max(
        (GAIN * L / 2) * (2 * A + B / MU),
        MU * GAIN,
        8 * nu2_hat * mp.log(16 * nu2_hat / DELTA),
    )
    return nu1_hat, nu2_hat, gamma1_hat, gamma2_hat, offset_floor


def main():
    m1, m2, m3, m4 = m_constants()
    d1, d2 = drift_aggregates(m1, m2, m3, m4)
    nu1, nu2 = variance_proxies(d1, d2)
    terms, required = offset_threshold(d2, nu2)
    closed_form = implicit_offset_closed_form(nu2)

    # Feasible offsets, rounded to binary doubles so the package and this
    # oracle plug in the identical K0.
    k0_hp = mp.mpf(float(2 * required))
    k0_exp = mp.mpf(float(2 * max(GAIN * L * (2 * A + B / MU), MU * GAIN, 2 * d2)))

    gamma1, gamma2, kbar0, log_k0_bar = envelope_coefficients(d1, d2, nu1, k0_hp)
    nu1_hat, nu2_hat, gamma1_hat, gamma2_hat, mart_floor = martingale_only(k0_hp)

    payload = {
        "inputs": {
            "mu": float(MU),
            "L": float(L),
            "A": float(A),
            "B": float(B),
            "C": float(C),
            "lip_g": float(LIP_G),
            "tmix": int(TMIX),
            "dim": int(DIM),
            "a": float(GAIN),
            "delta": float(DELTA),
            "Delta0": float(GAP0),
        },
        "derived": {
            "m1": float(m1),
            "m2": float(m2),
            "m3": float(m3),
            "m4": float(m4),
            "D1": float(d1),
            "D2": float(d2),
            "nu1": float(nu1),
            "nu2": float(nu2),
        },
        "k0_threshold": {
            "terms": [float(t) for t in terms],
            "required": float(required),
            "implicit_closed_form": float(closed_form),
        },
        "hp": {
            "K0": float(k0_hp),
            "Gamma1": float(gamma1),
            "Gamma2": float(gamma2),
            "Kbar0": float(kbar0),
            "logKbar0": float(log_k0_bar),
            "envelope": {
                "1": float(envelope_value(gamma1, gamma2, k0_hp, mp.mpf(1))),
                "100": float(envelope_value(gamma1, gamma2, k0_hp, mp.mpf(100))),
                "1000000": float(envelope_value(gamma1, gamma2, k0_hp, mp.mpf(10) ** 6)),
            },
        },
        "expected": {
            "K0": float(k0_exp),
            "bound": {
                "0": float(mean_bound_value(d1, d2, k0_exp, mp.mpf(0))),
                "1000": float(mean_bound_value(d1, d2, k0_exp, mp.mpf(1000))),
            },
        },
        "martingale_only": {
            "K0": float(k0_hp),
            "nu1_hat": float(nu1_hat),
            "nu2_hat": float(nu2_hat),
            "Gamma1_hat": float(gamma1_hat),
            "Gamma2_hat": float(gamma2_hat),
            "offset_floor": float(mart_floor),
        },
    }

    here = os.path.dirname(os.path.abspath(__file__))
    out = os.path.join(here, "..", "fixtures", "worked_constants.json")
    with open(out, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {os.path.normpath(out)}")


if __name__ == "__main__":
    main()
