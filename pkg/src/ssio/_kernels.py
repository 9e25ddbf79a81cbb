"""Compiled inner loops (numba)."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _exp_so3(wx, wy, wz, out):
    th2 = wx * wx + wy * wy + wz * wz
    th = math.sqrt(th2)
    if th < 1e-6:
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        a = math.sin(th) / th
        b = (1.0 - math.cos(th)) / th2
    out[0, 0] = 1.0 - b * (wy * wy + wz * wz)
    out[1, 1] = 1.0 - b * (wx * wx + wz * wz)
    out[2, 2] = 1.0 - b * (wx * wx + wy * wy)
    out[0, 1] = -a * wz + b * wx * wy
    out[1, 0] = a * wz + b * wx * wy
    out[0, 2] = a * wy + b * wx * wz
    out[2, 0] = -a * wy + b * wx * wz
    out[1, 2] = -a * wx + b * wy * wz
    out[2, 1] = a * wx + b * wy * wz


@njit(cache=True)
def preintegrate(gyro, accel, dt, eta, cov, with_cov):
    N, K = dt.shape
    dR_out = np.zeros((N, 3, 3))
    dv_out = np.zeros((N, 3))
    dp_out = np.zeros((N, 3))
    E = np.zeros((3, 3))
    R = np.zeros((3, 3))
    Rn = np.zeros((3, 3))
    C = np.zeros((3, 3))
    T = np.zeros((9, 9))
    S = np.zeros((9, 9))
    Qa = np.zeros((3, 3))
    Ra = np.zeros(3)
    v = np.zeros(3)
    p = np.zeros(3)
    for n in range(N):
        for i in range(3):
            v[i] = 0.0
            p[i] = 0.0
            for j in range(3):
                R[i, j] = 1.0 if i == j else 0.0
        if with_cov:
            for i in range(9):
                for j in range(9):
                    S[i, j] = cov[n, i, j]
        for k in range(K):
            h = dt[n, k]
            ax = accel[n, k, 0]
            ay = accel[n, k, 1]
            az = accel[n, k, 2]
            _exp_so3(gyro[n, k, 0] * h, gyro[n, k, 1] * h, gyro[n, k, 2] * h, E)
            for i in range(3):
                Ra[i] = R[i, 0] * ax + R[i, 1] * ay + R[i, 2] * az
            if with_cov:
                # C = -R [a]x h
                for i in range(3):
                    C[i, 0] = -h * (R[i, 1] * az - R[i, 2] * ay)
                    C[i, 1] = -h * (-R[i, 0] * az + R[i, 2] * ax)
                    C[i, 2] = -h * (R[i, 0] * ay - R[i, 1] * ax)
                # T = A S
                for j in range(9):
                    for i in range(3):
                        q = 0.0
                        c = 0.0
                        for m in range(3):
                            q += E[m, i] * S[m, j]
                            c += C[i, m] * S[m, j]
                        T[i, j] = q
                        T[3 + i, j] = c + S[3 + i, j]
                        T[6 + i, j] = 0.5 * h * c + h * S[3 + i, j] + S[6 + i, j]
                # S = T A^T
                for i in range(9):
                    for j in range(3):
                        q = 0.0
                        c = 0.0
                        for m in range(3):
                            q += T[i, m] * E[m, j]
                            c += T[i, m] * C[j, m]
                        S[i, j] = q
                        S[i, 3 + j] = c + T[i, 3 + j]
                        S[i, 6 + j] = 0.5 * h * c + h * T[i, 3 + j] + T[i, 6 + j]
                h2 = h * h
                for i in range(3):
                    S[i, i] += h2 * eta[n, k, i]
                for i in range(3):
                    for j in range(3):
                        q = 0.0
                        for m in range(3):
                            q += R[i, m] * eta[n, k, 3 + m] * R[j, m]
                        Qa[i, j] = q
                for i in range(3):
                    for j in range(3):
                        S[3 + i, 3 + j] += h2 * Qa[i, j]
                        S[3 + i, 6 + j] += 0.5 * h2 * h * Qa[i, j]
                        S[6 + i, 3 + j] += 0.5 * h2 * h * Qa[i, j]
                        S[6 + i, 6 + j] += 0.25 * h2 * h2 * Qa[i, j]
            for i in range(3):
                p[i] += v[i] * h + 0.5 * Ra[i] * h * h
                v[i] += Ra[i] * h
            for i in range(3):
                for j in range(3):
                    Rn[i, j] = R[i, 0] * E[0, j] + R[i, 1] * E[1, j] + R[i, 2] * E[2, j]
            for i in range(3):
                for j in range(3):
                    R[i, j] = Rn[i, j]
        for i in range(3):
            dv_out[n, i] = v[i]
            dp_out[n, i] = p[i]
            for j in range(3):
                dR_out[n, i, j] = R[i, j]
        if with_cov:
            for i in range(9):
                for j in range(9):
                    cov[n, i, j] = S[i, j]
    return dR_out, dv_out, dp_out
