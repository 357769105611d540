# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must stay bit-identical to ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdint cimport uint64_t, int32_t, int64_t, int8_t

cnp.import_array()

DEF EXPLORE = 2


cdef inline uint64_t _mix(uint64_t* state) nogil:
    cdef uint64_t z
    state[0] += <uint64_t>0x9E3779B97F4A7C15
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EB
    return z ^ (z >> 31)


cdef inline double _uniform(uint64_t* state) nogil:
    return (_mix(state) >> 11) * (1.0 / 9007199254740992.0)


cdef inline int _randint(uint64_t* state, int m) nogil:
    return <int>((_mix(state) >> 11) % <uint64_t>m)


def bfs_all_pairs(const int32_t[:, ::1] nbr):
    """Shortest move counts between every pair of free cells (-1 if unreachable)."""
    cdef Py_ssize_t F = nbr.shape[0]
    cdef Py_ssize_t A = nbr.shape[1]
    out = np.full((F, F), -1, dtype=np.int32)
    cdef int32_t[:, ::1] dist = out
    cdef int32_t[::1] queue = np.empty(F, dtype=np.int32)
    cdef Py_ssize_t src, head, tail, a
    cdef int32_t u, v
    with nogil:
        for src in range(F):
            dist[src, src] = 0
            queue[0] = <int32_t>src
            head = 0
            tail = 1
            while head < tail:
                u = queue[head]
                head += 1
                for a in range(A):
                    v = nbr[u, a]
                    if dist[src, v] < 0:
                        dist[src, v] = dist[src, u] + 1
                        queue[tail] = v
                        tail += 1
    return out


def option_successors(const int32_t[::1] obs, const int64_t[::1] final_pos,
                      const int64_t[::1] anchors, const int32_t[::1] goals, Py_ssize_t n):
    """Position of the option end state for each (anchor, goal): first goal hit
    within the next ``n`` states of the same trajectory, else ``t + n`` clipped."""
    cdef Py_ssize_t B = anchors.shape[0]
    out = np.empty(B, dtype=np.int64)
    cdef int64_t[::1] res = out
    cdef Py_ssize_t i
    cdef int64_t t, end, j, hit
    cdef int32_t g
    with nogil:
        for i in range(B):
            t = anchors[i]
            end = t + n
            if end > final_pos[t]:
                end = final_pos[t]
            g = goals[i]
            hit = end
            j = t + 1
            while j <= end:
                if obs[j] == g:
                    hit = j
                    break
                j += 1
            res[i] = hit
    return out


def run_episode(const int32_t[:, ::1] nbr, const int8_t[::1] toward, int start, int goal,
                int mode, int drift, int cap, double noise, double slip, uint64_t seed,
                int32_t[::1] out_s, int8_t[::1] out_a):
    """Roll one behavior episode into ``out_s``/``out_a``; returns its length."""
    cdef uint64_t state = seed
    cdef int s = start
    cdef int T = 0
    cdef int a, executed
    out_s[0] = s
    with nogil:
        while T < cap:
            if mode != EXPLORE and s == goal:
                break
            if _uniform(&state) < noise:
                a = _randint(&state, 5)
            elif mode == EXPLORE:
                a = drift
            else:
                a = toward[s]
            executed = a
            if slip > 0.0 and _uniform(&state) < slip:
                executed = _randint(&state, 5)
            s = nbr[s, executed]
            out_a[T] = <int8_t>a
            T += 1
            out_s[T] = s
    return T


def adam_update(double[::1] params, const double[::1] grad, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, double bc1, double bc2):
    """In-place Adam step; ``bc1``/``bc2`` are the bias corrections 1 - beta**t."""
    cdef Py_ssize_t i, P = params.shape[0]
    cdef double c1 = 1.0 - beta1, c2 = 1.0 - beta2, g
    with nogil:
        for i in range(P):
            g = grad[i]
            m[i] = beta1 * m[i] + c1 * g
            v[i] = beta2 * v[i] + c2 * g * g
            params[i] -= lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)


def polyak_update(double[::1] target, const double[::1] live, double rho):
    cdef Py_ssize_t i, P = target.shape[0]
    cdef double keep = 1.0 - rho
    with nogil:
        for i in range(P):
            target[i] = keep * target[i] + rho * live[i]


def scatter_add_rows(double[:, ::1] out, const int64_t[::1] rows, const double[:, ::1] src):
    """``out[rows[b]] += src[b]`` in batch order (duplicates accumulate)."""
    cdef Py_ssize_t b, j, B = rows.shape[0], C = src.shape[1]
    cdef int64_t r
    with nogil:
        for b in range(B):
            r = rows[b]
            for j in range(C):
                out[r, j] += src[b, j]
