"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np


def fps_bruteforce(points, k, start):
    """Greedy farthest point: recompute every min distance from scratch."""
    pts = np.asarray(points, dtype=np.float64)
    chosen = [start]
    while len(chosen) < k:
        diff = pts[:, None, :] - pts[chosen][None, :, :]
        d = (diff * diff).sum(axis=2).min(axis=1)
        # argmax returns the lowest index among equal maxima
        chosen.append(int(np.argmax(d)))
    return chosen


def ball_query_bruteforce(centers, points, radius, nsample):
    out = []
    for c in centers:
        d = [math.dist(c, p) for p in points]
        inside = [i for i, di in enumerate(d) if di <= radius]
        if not inside:
            nearest = min(range(len(points)), key=lambda i: (d[i], i))
            out.append([nearest] * nsample)
            continue
        row = inside[:nsample]
        row += [row[0]] * (nsample - len(row))
        out.append(row)
    return out


def point_triangle_distance(p, a, b, c):
    """Distance from points p (n, 3) to triangle abc (closest-point case analysis)."""
    p = np.atleast_2d(p)
    ab, ac = b - a, c - a
    ap = p - a
    d1, d2 = ap @ ab, ap @ ac
    bp = p - b
    d3, d4 = bp @ ab, bp @ ac
    cp = p - c
    d5, d6 = cp @ ab, cp @ ac
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    n = len(p)
    closest = np.empty((n, 3))
    done = np.zeros(n, bool)

    def put(mask, val):
        m = mask & ~done
        closest[m] = val[m] if np.ndim(val) == 2 else val
        done[:] |= m

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w2 = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w2[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v3, w3 = vb * denom, vc * denom
        put(np.ones(n, bool), a + v3[:, None] * ab + w3[:, None] * ac)
    return np.linalg.norm(p - closest, axis=1)


def mesh_distance(points, mesh):
    d = np.full(len(points), np.inf)
    for tri in mesh.triangles:
        a, b, c = mesh.vertices[tri]
        if np.linalg.norm(np.cross(b - a, c - a)) == 0:
            continue
        d = np.minimum(d, point_triangle_distance(points, a, b, c))
    return d


def confusion_bruteforce(gt, pred, C):
    counts = [[0] * C for _ in range(C)]
    for g, p in zip(gt, pred):
        counts[g][p] += 1
    return counts


def metrics_bruteforce(gt, pred, C):
    """(correct, total, per-class (tp, fp, fn)) by walking the points."""
    correct = sum(1 for g, p in zip(gt, pred) if g == p)
    per = []
    for c in range(C):
        tp = sum(1 for g, p in zip(gt, pred) if g == c and p == c)
        fp = sum(1 for g, p in zip(gt, pred) if g != c and p == c)
        fn = sum(1 for g, p in zip(gt, pred) if g == c and p != c)
        per.append((tp, fp, fn))
    return correct, len(gt), per


def central_difference(f, x, h):
    """Central finite differences of scalar f w.r.t. every entry of array x (in place)."""
    g = np.empty_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relu_margin(net, state):
    """Smallest |pre-activation| over every ReLU unit of a cached forward pass."""
    out = np.inf
    for name, x, y in state["cache"]:
        if y is not None:
            z = x @ net.params[name + ".w"] + net.params[name + ".b"]
            out = min(out, float(np.abs(z).min()))
    return out


def fd_gradients(net, geom, loss_of_logits, h):
    """Central differences for every parameter entry.

    Perturbing a layer cannot change the stages before it, so each
    evaluation resumes the forward pass at the perturbed layer's stage.
    """
    _, base = net.forward_geom(geom)
    out = {}
    for name, _, _, _ in net.layers:
        stage = name.split(".")[0]
        for suffix in (".w", ".b"):
            key = name + suffix

            def f():
                return loss_of_logits(net.forward_geom(geom, reuse=base, start=stage)[0])

            out[key] = central_difference(f, net.params[key], h)
    return out


def relative_error(analytic, numeric, floor):
    """Entrywise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
