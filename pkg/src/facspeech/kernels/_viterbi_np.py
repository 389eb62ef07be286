"""Pure-numpy joint Viterbi kernel (fallback for the compiled extension).

Both kernel implementations share one contract and must match bit for bit:

* positions of each chain are numbered 0..P-1;
* per frame, a position is entered either by its own self-loop or through
  an advance arc (src -> dst) priced by the source position's leave cost;
* the product-space maximization factorizes into two sequential per-chain
  maximizations, which keeps the work at O(arcs_a * P_b + P_a * arcs_b)
  per frame instead of the full product of transitions;
* ties resolve to the self-loop first, then to arcs in ascending
  (dst, src) order (strict improvement required), which pins decoding to a
  single deterministic path;
* ``beam`` > 0 applies histogram pruning: after each frame only the
  ``beam`` highest-scoring product states stay alive (ties at the
  threshold survive).

Returns (log_score, path_a, path_b); log_score is -inf when no complete
path survived.
"""

import numpy as np

NEG_INF = -np.inf


def _prune(score: np.ndarray, beam: int) -> None:
    flat = score.ravel()
    live = int(np.isfinite(flat).sum())
    if live <= beam:
        return
    thresh = np.partition(flat, flat.size - beam)[flat.size - beam]
    score[score < thresh] = NEG_INF


def viterbi_joint(logobs,
                  sa_idx, self_a, adv_a, arc_src_a, arc_dst_a, start_a, final_a,
                  sb_idx, self_b, adv_b, arc_src_b, arc_dst_b, start_b, final_b,
                  beam=0):
    T = logobs.shape[0]
    pa, pb = len(sa_idx), len(sb_idx)

    obs = logobs[0][np.ix_(sa_idx, sb_idx)]
    score = np.full((pa, pb), NEG_INF)
    score[np.ix_(start_a, start_b)] = obs[np.ix_(start_a, start_b)]
    if beam:
        _prune(score, beam)

    bp1 = np.zeros((T, pa, pb), dtype=np.int32)
    bp2 = np.zeros((T, pa, pb), dtype=np.int32)

    ids_a = np.arange(pa, dtype=np.int32)
    ids_b = np.arange(pb, dtype=np.int32)

    for t in range(1, T):
        m1 = score + self_a[:, None]
        b1 = np.repeat(ids_a[:, None], pb, axis=1)
        for s, d in zip(arc_src_a, arc_dst_a):
            cand = score[s] + adv_a[s]
            better = cand > m1[d]
            if better.any():
                m1[d][better] = cand[better]
                b1[d][better] = s

        m2 = m1 + self_b[None, :]
        b2 = np.repeat(ids_b[None, :], pa, axis=0)
        for s, d in zip(arc_src_b, arc_dst_b):
            cand = m1[:, s] + adv_b[s]
            better = cand > m2[:, d]
            if better.any():
                m2[:, d][better] = cand[better]
                b2[:, d][better] = s

        score = m2 + logobs[t][np.ix_(sa_idx, sb_idx)]
        if beam:
            _prune(score, beam)
        bp1[t] = b1
        bp2[t] = b2

    sub = score[np.ix_(final_a, final_b)]
    k = int(np.argmax(sub))
    best = float(sub.ravel()[k])
    if not np.isfinite(best):
        return NEG_INF, None, None

    path_a = np.empty(T, dtype=np.int32)
    path_b = np.empty(T, dtype=np.int32)
    path_a[T - 1] = final_a[k // len(final_b)]
    path_b[T - 1] = final_b[k % len(final_b)]
    for t in range(T - 1, 0, -1):
        q_prev = bp2[t, path_a[t], path_b[t]]
        path_a[t - 1] = bp1[t, path_a[t], q_prev]
        path_b[t - 1] = q_prev
    return best, path_a, path_b
