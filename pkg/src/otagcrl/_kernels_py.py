"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``.

Every function here must return exactly what its compiled counterpart returns,
including the random stream consumed by ``run_episode``.
"""

from collections import deque

import numpy as np

EXPLORE = 2
_MASK = 0xFFFFFFFFFFFFFFFF


class _SplitMix:
    __slots__ = ("state",)

    def __init__(self, seed):
        self.state = int(seed) & _MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform(self):
        return (self.next() >> 11) * (1.0 / 9007199254740992.0)

    def randint(self, m):
        return (self.next() >> 11) % m


def bfs_all_pairs(nbr):
    nbr = np.asarray(nbr)
    F = nbr.shape[0]
    adj = [sorted(set(int(v) for v in row)) for row in nbr]
    out = np.full((F, F), -1, dtype=np.int32)
    for src in range(F):
        row = out[src]
        row[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            du = row[u] + 1
            for v in adj[u]:
                if row[v] < 0:
                    row[v] = du
                    queue.append(v)
    return out


def option_successors(obs, final_pos, anchors, goals, n):
    out = np.empty(len(anchors), dtype=np.int64)
    for i, (t, g) in enumerate(zip(anchors.tolist(), goals.tolist())):
        end = min(t + n, int(final_pos[t]))
        hit = end
        for j in range(t + 1, end + 1):
            if obs[j] == g:
                hit = j
                break
        out[i] = hit
    return out


def run_episode(nbr, toward, start, goal, mode, drift, cap, noise, slip, seed, out_s, out_a):
    rng = _SplitMix(seed)
    s = int(start)
    T = 0
    out_s[0] = s
    while T < cap:
        if mode != EXPLORE and s == goal:
            break
        if rng.uniform() < noise:
            a = rng.randint(5)
        elif mode == EXPLORE:
            a = drift
        else:
            a = int(toward[s])
        executed = a
        if slip > 0.0 and rng.uniform() < slip:
            executed = rng.randint(5)
        s = int(nbr[s, executed])
        out_a[T] = a
        T += 1
        out_s[T] = s
    return T


def adam_update(params, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    params -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def polyak_update(target, live, rho):
    target *= 1.0 - rho
    target += rho * live


def scatter_add_rows(out, rows, src):
    np.add.at(out, rows, src)
