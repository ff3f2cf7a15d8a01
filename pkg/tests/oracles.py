"""Independent reference implementations used by the unit and acceptance tests.

Everything here is deliberately naive: explicit loops, enumeration, or a
textbook formula, sharing no code with the package under test.
"""

import itertools
import math

import numpy as np
import torch


# --- SWI -------------------------------------------------------------------

def direct_dft_swi(mag, phase, window, power=4):
    """Explicit DFT matrices, Hamming taper in signed frequency."""
    nx, ny = mag.shape
    z = mag * np.exp(1j * phase)

    def dft(n):
        k = np.arange(n)
        return np.exp(-2j * np.pi * np.outer(k, k) / n)

    def taper(n, size):
        w = np.zeros(n)
        for k in range(n):
            f = k if k < n / 2 else k - n
            if abs(f) < size / 2:
                w[k] = 0.54 + 0.46 * np.cos(2 * np.pi * f / size)
        return w

    fx, fy = dft(nx), dft(ny)
    spec = fx @ z @ fy.T
    spec = spec * np.outer(taper(nx, window[0]), taper(ny, window[1]))
    low = np.conj(fx) @ spec @ np.conj(fy).T / (nx * ny)
    hp = np.angle(z / low)
    mask = np.ones_like(hp)
    neg = hp < 0
    mask[neg] = np.clip((hp[neg] + np.pi) / np.pi, 0, 1)
    return mag * mask**power


def dipole_slice(n=16, rng=None):
    rng = rng or np.random.default_rng(0)
    x, y = np.meshgrid(np.arange(n) - n / 2 + 0.3, np.arange(n) - n / 2 - 0.2, indexing="ij")
    r2 = x**2 + y**2 + 1.0
    phase = -2.0 * (2 * y**2 - x**2) / r2**2.0 + 0.3 * rng.standard_normal((n, n))
    mag = 1.0 + 0.2 * rng.random((n, n))
    return mag, phase


# --- network -----------------------------------------------------------------

def unet_param_count(in_ch, n_classes, n_levels, base, cap):
    """Closed-form count: conv kernels + biases, BN scale + shift, transpose convs, head."""
    widths = [min(base * 2**l, cap) for l in range(n_levels)]

    def double_conv(cin, cout):
        return (9 * cin * cout + cout) + 2 * cout + (9 * cout * cout + cout) + 2 * cout

    total, cin = 0, in_ch
    for w in widths:
        total += double_conv(cin, w)
        cin = w
    for w in reversed(widths[:-1]):
        total += 4 * cin * w + w
        total += double_conv(2 * w, w)
        cin = w
    return total + cin * n_classes + n_classes


def finite_difference_check(model, x, target, n_params, rng, eps=1e-6):
    """Relative errors between autograd and central differences of the NLL loss.

    The model must be float64 and in train mode; parameters are sampled
    uniformly across every parameter tensor.
    """
    def loss_fn():
        return torch.nn.functional.nll_loss(model.log_probs(x), target)

    model.zero_grad()
    loss_fn().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    errors = []
    with torch.no_grad():
        for _ in range(n_params):
            p = params[rng.integers(len(params))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = float(p.grad[idx])
            orig = float(p[idx])
            p[idx] = orig + eps
            up = float(loss_fn())
            p[idx] = orig - eps
            down = float(loss_fn())
            p[idx] = orig
            numeric = (up - down) / (2 * eps)
            # conv biases feeding batch norm have an exactly zero gradient; the
            # floor keeps round-off on those from reading as a relative error
            scale = max(abs(analytic), abs(numeric), 1e-6)
            errors.append(abs(analytic - numeric) / scale)
    return errors


# --- connected components and matching --------------------------------------

def union_find_components(mask):
    """26-connected components of a boolean 3D array by union-find over voxels."""
    coords = [tuple(c) for c in np.argwhere(mask)]
    index = {c: i for i, c in enumerate(coords)}
    parent = list(range(len(coords)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    offsets = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
    for c, i in index.items():
        for d in offsets:
            j = index.get((c[0] + d[0], c[1] + d[1], c[2] + d[2]))
            if j is not None:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj
    groups = {}
    for c, i in index.items():
        groups.setdefault(find(i), set()).add(c)
    return sorted((frozenset(g) for g in groups.values()), key=lambda g: min(g))


def max_cardinality_matching(adj):
    """Largest matching size in a bipartite graph and how many matchings reach it.

    Exhaustive dynamic programme over predictions with a bitmask of used
    references; fine for the <= 6 x 6 sets it is meant for.
    """
    n = len(adj)
    m = len(adj[0]) if n else 0
    memo = {}

    def best(i, used):
        if i == n:
            return 0, 1
        key = (i, used)
        if key not in memo:
            size, count = best(i + 1, used)
            for j in range(m):
                if adj[i][j] and not used >> j & 1:
                    s, c = best(i + 1, used | 1 << j)
                    if s + 1 > size:
                        size, count = s + 1, c
                    elif s + 1 == size:
                        count += c
            memo[key] = (size, count)
        return memo[key]

    return best(0, 0)


def is_forest(adj):
    """True when the bipartite tolerance graph has no cycle."""
    n, m = len(adj), len(adj[0]) if adj else 0
    parent = list(range(n + m))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i in range(n):
        for j in range(m):
            if adj[i][j]:
                a, b = find(i), find(n + j)
                if a == b:
                    return False
                parent[a] = b
    return True


# --- statistics --------------------------------------------------------------

def wilcoxon_enumeration(a, b):
    """Two-sided exact p by enumerating all 2^n sign assignments of the midranks."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 0.0, 1.0
    absd = np.abs(d)
    ranks = np.empty(n)
    order = np.argsort(absd, kind="stable")
    sorted_abs = absd[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    w_plus = ranks[d > 0].sum()
    w_minus = ranks[d < 0].sum()
    w = min(w_plus, w_minus)
    total = ranks.sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        wp = sum(r for r, s in zip(ranks, signs) if s)
        if min(wp, total - wp) <= w + 1e-9:
            hits += 1
    return w, min(1.0, hits / 2**n)


def pearson_covariance(x, y):
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)
