#!/usr/bin/env python3
"""Regenerates the matrix fixtures under configs/fixtures (numpy, fixed seeds).

Reference solutions (z_ref) are not produced here; run `sfbs reference <config>`.
"""
import pathlib

import numpy as np

OUT = pathlib.Path(__file__).resolve().parent.parent / "configs" / "fixtures"


def write(name, a):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] == 1:
        a = a.T
    with open(OUT / name, "w") as fh:
        fh.write(f"{a.shape[0]} {a.shape[1]}\n")
        for row in a:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def lasso():
    rng = np.random.default_rng(20150212)
    m, n = 20, 10
    q, _ = np.linalg.qr(rng.standard_normal((m, n)))
    s = np.linspace(1.1, 0.9, n)
    rot, _ = np.linalg.qr(rng.standard_normal((n, n)))
    K = q @ np.diag(s) @ rot.T
    x_true = np.zeros(n)
    x_true[[1, 4, 7]] = [1.5, -2.0, 0.8]
    z = K @ x_true + 0.05 * rng.standard_normal(m)
    write("lasso_K.txt", K)
    write("lasso_z.txt", z)


def tv1d():
    rng = np.random.default_rng(20150214)
    clean = np.repeat([0.0, 2.0, -1.0, 1.0], 4)
    write("tv1d_b.txt", clean + 0.3 * rng.standard_normal(clean.size))


def section52():
    rng = np.random.default_rng(52)
    n = 8
    K = np.eye(n) + 0.2 * rng.standard_normal((n, n))
    x_true = np.clip(np.cumsum(0.5 * rng.standard_normal(n)), -1.5, 1.5)
    write("s52_K.txt", K)
    write("s52_x_true.txt", x_true)


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    lasso()
    tv1d()
    section52()
