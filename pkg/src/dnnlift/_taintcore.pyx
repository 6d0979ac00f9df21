# cython: boundscheck=False, wraparound=False, language_level=3
"""Compiled backward-taint kernel over the flattened lane representation.

Mirrors dnnlift._taint_py.propagate_py exactly; both walk the same CSR
arrays so their outputs are bit-identical.
"""
from libc.stdint cimport int64_t, int32_t, uint8_t
from libcpp.unordered_set cimport unordered_set

import numpy as np


def propagate_native(int64_t[::1] entry_lane_ptr,
                     int64_t[::1] lane_w_ptr, int64_t[::1] lane_r_ptr,
                     int64_t[::1] w_key, int32_t[::1] w_len,
                     int64_t[::1] r_key, int32_t[::1] r_len,
                     int64_t[::1] sink_key, int32_t[::1] sink_len):
    cdef Py_ssize_t n_entries = entry_lane_ptr.shape[0] - 1
    kept = np.zeros(n_entries, dtype=np.uint8)
    cdef uint8_t[::1] kept_v = kept
    cdef unordered_set[int64_t] tainted
    cdef Py_ssize_t e, lane, a
    cdef int64_t b
    cdef bint hit, any_hit

    for a in range(sink_key.shape[0]):
        for b in range(sink_len[a]):
            tainted.insert(sink_key[a] + b)

    for e in range(n_entries - 1, -1, -1):
        any_hit = False
        for lane in range(entry_lane_ptr[e], entry_lane_ptr[e + 1]):
            hit = False
            for a in range(lane_w_ptr[lane], lane_w_ptr[lane + 1]):
                for b in range(w_len[a]):
                    if tainted.count(w_key[a] + b):
                        hit = True
                        break
                if hit:
                    break
            if hit:
                for a in range(lane_w_ptr[lane], lane_w_ptr[lane + 1]):
                    for b in range(w_len[a]):
                        tainted.erase(w_key[a] + b)
                for a in range(lane_r_ptr[lane], lane_r_ptr[lane + 1]):
                    for b in range(r_len[a]):
                        tainted.insert(r_key[a] + b)
                any_hit = True
        if any_hit:
            kept_v[e] = 1
    return kept
