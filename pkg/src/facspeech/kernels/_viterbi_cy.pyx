# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled joint Viterbi kernel.

Mirrors ``_viterbi_np.viterbi_joint`` exactly (same update order, same tie
rule, same pruning), so the two backends are interchangeable bit for bit.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

NEG_INF = -np.inf


def viterbi_joint(double[:, :, ::1] logobs,
                  int[::1] sa_idx, double[::1] self_a, double[::1] adv_a,
                  int[::1] arc_src_a, int[::1] arc_dst_a,
                  int[::1] start_a, int[::1] final_a,
                  int[::1] sb_idx, double[::1] self_b, double[::1] adv_b,
                  int[::1] arc_src_b, int[::1] arc_dst_b,
                  int[::1] start_b, int[::1] final_b,
                  int beam=0):
    cdef Py_ssize_t T = logobs.shape[0]
    cdef Py_ssize_t pa = sa_idx.shape[0]
    cdef Py_ssize_t pb = sb_idx.shape[0]
    cdef Py_ssize_t ea = arc_src_a.shape[0]
    cdef Py_ssize_t eb = arc_src_b.shape[0]

    score_arr = np.full((pa, pb), NEG_INF)
    cdef double[:, ::1] score = score_arr
    m1_arr = np.empty((pa, pb))
    cdef double[:, ::1] m1 = m1_arr
    m2_arr = np.empty((pa, pb))
    cdef double[:, ::1] m2 = m2_arr

    bp1_arr = np.zeros((T, pa, pb), dtype=np.int32)
    bp2_arr = np.zeros((T, pa, pb), dtype=np.int32)
    cdef int[:, :, ::1] bp1 = bp1_arr
    cdef int[:, :, ::1] bp2 = bp2_arr

    cdef Py_ssize_t t, p, q, e, i, j
    cdef int s, d
    cdef double cand, w

    for i in range(start_a.shape[0]):
        p = start_a[i]
        for j in range(start_b.shape[0]):
            q = start_b[j]
            score[p, q] = logobs[0, sa_idx[p], sb_idx[q]]
    if beam:
        _np_prune(score_arr, beam)

    for t in range(1, T):
        with nogil:
            # stage 1: best predecessor along chain a for every (dst, q)
            for p in range(pa):
                for q in range(pb):
                    m1[p, q] = score[p, q] + self_a[p]
                    bp1[t, p, q] = <int> p
            for e in range(ea):
                s = arc_src_a[e]
                d = arc_dst_a[e]
                w = adv_a[s]
                for q in range(pb):
                    cand = score[s, q] + w
                    if cand > m1[d, q]:
                        m1[d, q] = cand
                        bp1[t, d, q] = s
            # stage 2: best predecessor along chain b
            for p in range(pa):
                for q in range(pb):
                    m2[p, q] = m1[p, q] + self_b[q]
                    bp2[t, p, q] = <int> q
            for e in range(eb):
                s = arc_src_b[e]
                d = arc_dst_b[e]
                w = adv_b[s]
                for p in range(pa):
                    cand = m1[p, s] + w
                    if cand > m2[p, d]:
                        m2[p, d] = cand
                        bp2[t, p, d] = s
            for p in range(pa):
                for q in range(pb):
                    score[p, q] = m2[p, q] + logobs[t, sa_idx[p], sb_idx[q]]
        if beam:
            _np_prune(score_arr, beam)

    sub = score_arr[np.ix_(np.asarray(final_a), np.asarray(final_b))]
    k = int(np.argmax(sub))
    best = float(sub.ravel()[k])
    if not np.isfinite(best):
        return NEG_INF, None, None

    path_a = np.empty(T, dtype=np.int32)
    path_b = np.empty(T, dtype=np.int32)
    path_a[T - 1] = final_a[k // final_b.shape[0]]
    path_b[T - 1] = final_b[k % final_b.shape[0]]
    cdef int[::1] pa_view = path_a
    cdef int[::1] pb_view = path_b
    cdef int q_prev
    for t in range(T - 1, 0, -1):
        q_prev = bp2[t, pa_view[t], pb_view[t]]
        pa_view[t - 1] = bp1[t, pa_view[t], q_prev]
        pb_view[t - 1] = q_prev
    return best, path_a, path_b


def _np_prune(score, int beam):
    flat = score.ravel()
    live = int(np.isfinite(flat).sum())
    if live <= beam:
        return
    thresh = np.partition(flat, flat.size - beam)[flat.size - beam]
    score[score < thresh] = NEG_INF
