"""Independent reference implementations used only by the tests.

None of these call into the package; they re-derive results from first
principles with plain loops so they cannot share a bug with the code under test.
"""

import itertools
import math

import numpy as np


def jacobi_evd(a, sweeps=100, tol=1e-14):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix; eigenvalues descending."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2) * 2.0)
        if off <= tol * max(np.linalg.norm(a), 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                if abs(theta) > 1e100:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


def cumulative_energy(energies):
    e = np.sort(np.asarray(energies, dtype=np.float64))[::-1]
    c = np.cumsum(e) / e.sum()
    c[-1] = 1.0
    return c


def floor_rank(d_in, d_out, ratio):
    return min(max(1, math.ceil(ratio * d_in * d_out / (d_in + d_out) - 1e-9)), min(d_in, d_out))


def brute_force_best(cums, dims, budget, floor_ratio=0.1, costs=None):
    """Max total retained energy over all rank tuples under the budget.

    Ranks respect floors and ``min(d_in, d_out)``. Among tuples reaching the
    best total the balance rule of the allocator is required: no matrix above
    its floor may sit strictly above the lowest retained energy after losing
    one rank. Returns ``(best_value, ranks)`` or ``(None, None)``.
    """
    n = len(cums)
    costs = costs or [1] * n
    floors = [floor_rank(d_in, d_out, floor_ratio) for d_in, d_out in dims]
    rmax = [min(d_in, d_out, len(c)) for (d_in, d_out), c in zip(dims, cums)]
    best, best_r = None, None
    for ranks in itertools.product(*[range(f, m + 1) for f, m in zip(floors, rmax)]):
        if sum(r * k for r, k in zip(ranks, costs)) > budget:
            continue
        vals = [cums[a][ranks[a] - 1] for a in range(n)]
        low = min(vals)
        if any(ranks[a] > floors[a] and cums[a][ranks[a] - 2] > low for a in range(n)):
            continue
        total = sum(vals)
        if best is None or total > best + 1e-15:
            best, best_r = total, ranks
    return best, best_r


def rmsnorm(x, gain, eps):
    return x / np.sqrt(np.mean(x * x) + eps) * gain


def reference_forward(model, tokens):
    """Token-by-token forward pass with explicit causal attention loops."""
    cfg = model.cfg
    d, h = cfg.hidden, cfg.heads
    hd = d // h
    xs = [model.embedding[t].copy() for t in tokens]
    for lw in model.layers:
        w = {k: (v.l @ v.r_mat if hasattr(v, "l") else v) for k, v in lw.slots.items()}
        b = {k: (v.bias_correction if hasattr(v, "l") and v.bias_correction is not None else 0.0)
             for k, v in lw.slots.items()}
        normed = [rmsnorm(x, lw.attn_norm, cfg.norm_eps) for x in xs]
        q = [w["wq"] @ u + b["wq"] for u in normed]
        k = [w["wk"] @ u + b["wk"] for u in normed]
        v = [w["wv"] @ u + b["wv"] for u in normed]
        out = []
        for i in range(len(xs)):
            heads = []
            for j in range(h):
                sl = slice(j * hd, (j + 1) * hd)
                sc = np.array([q[i][sl] @ k[t][sl] / math.sqrt(hd) for t in range(i + 1)])
                p = np.exp(sc - sc.max())
                p /= p.sum()
                heads.append(sum(p[t] * v[t][sl] for t in range(i + 1)))
            out.append(xs[i] + w["wo"] @ np.concatenate(heads) + b["wo"])
        xs = out
        out = []
        for x in xs:
            u = rmsnorm(x, lw.ffn_norm, cfg.norm_eps)
            g = w["wg"] @ u + b["wg"]
            up = w["wu"] @ u + b["wu"]
            act = g / (1.0 + np.exp(-g))
            out.append(x + w["wd"] @ (act * up) + b["wd"])
        xs = out
    hidden = np.array(xs)
    logits = np.array([rmsnorm(x, model.final_norm, cfg.norm_eps) @ model.head for x in xs])
    return logits, hidden


def mean_cosine(x_rows, y_rows):
    vals = []
    for a, b in zip(x_rows, y_rows):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < 1e-12 or nb < 1e-12:
            continue
        vals.append(float(a @ b) / (na * nb))
    return sum(vals) / len(vals)
