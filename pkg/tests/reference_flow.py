"""Independent load flow used as a test oracle.

Reads the grid JSON directly, builds the admittance matrix with explicit
loops and solves the rectangular power equations with scipy's hybrid root
finder. Shares no code with the package solver. Base topology only.
"""
import numpy as np
from scipy.optimize import root


def reference_flow(doc, load_p, load_q, gen_p, gen_v):
    base = doc["bases"]["mva"]
    n = len(doc["substations"])
    Y = np.zeros((n, n), dtype=complex)
    for ln in doc["lines"]:
        i, j = ln["from"], ln["to"]
        y = 1.0 / complex(ln["r_pu"], ln["x_pu"])
        half = 0.5j * ln["b_pu"]
        Y[i, i] += y + half
        Y[j, j] += y + half
        Y[i, j] -= y
        Y[j, i] -= y
    p_spec = np.zeros(n)
    q_spec = np.zeros(n)
    for ld, p, q in zip(doc["loads"], load_p, load_q):
        p_spec[ld["substation"]] -= p / base
        q_spec[ld["substation"]] -= q / base
    vset = {}
    slack = None
    for g, p, v in zip(doc["generators"], gen_p, gen_v):
        if g["slack"]:
            slack = g["substation"]
        else:
            p_spec[g["substation"]] += p / base
        vset.setdefault(g["substation"], v)
    others = [k for k in range(n) if k != slack]

    def unpack(z):
        e = np.ones(n)
        f = np.zeros(n)
        e[slack] = vset[slack]
        e[others] = z[:n - 1]
        f[others] = z[n - 1:]
        return e + 1j * f

    def equations(z):
        V = unpack(z)
        S = V * np.conj(Y @ V)
        res = []
        for k in others:
            res.append(S[k].real - p_spec[k])
            if k in vset:
                res.append(abs(V[k]) ** 2 - vset[k] ** 2)
            else:
                res.append(S[k].imag - q_spec[k])
        return np.array(res)

    z0 = np.r_[np.ones(n - 1), np.zeros(n - 1)]
    sol = root(equations, z0, method="hybr", tol=1e-14)
    assert sol.success, sol.message
    V = unpack(sol.x)
    flows = []
    for ln in doc["lines"]:
        i, j = ln["from"], ln["to"]
        y = 1.0 / complex(ln["r_pu"], ln["x_pu"])
        half = 0.5j * ln["b_pu"]
        i_f = (y + half) * V[i] - y * V[j]
        i_t = (y + half) * V[j] - y * V[i]
        flows.append((V[i] * np.conj(i_f), V[j] * np.conj(i_t)))
    return V, np.array(flows)
