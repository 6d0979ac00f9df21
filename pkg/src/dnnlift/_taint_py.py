"""Pure-Python backward-taint kernel; the reference for the compiled twin."""
from __future__ import annotations

import numpy as np


def propagate_py(entry_lane_ptr, lane_w_ptr, lane_r_ptr,
                 w_key, w_len, r_key, r_len, sink_key, sink_len):
    n_entries = len(entry_lane_ptr) - 1
    kept = np.zeros(n_entries, dtype=np.uint8)
    tainted: set[int] = set()
    for a in range(len(sink_key)):
        base = int(sink_key[a])
        tainted.update(range(base, base + int(sink_len[a])))

    for e in range(n_entries - 1, -1, -1):
        any_hit = False
        for lane in range(entry_lane_ptr[e], entry_lane_ptr[e + 1]):
            hit = False
            for a in range(lane_w_ptr[lane], lane_w_ptr[lane + 1]):
                base = int(w_key[a])
                if any(base + b in tainted for b in range(int(w_len[a]))):
                    hit = True
                    break
            if hit:
                for a in range(lane_w_ptr[lane], lane_w_ptr[lane + 1]):
                    base = int(w_key[a])
                    for b in range(int(w_len[a])):
                        tainted.discard(base + b)
                for a in range(lane_r_ptr[lane], lane_r_ptr[lane + 1]):
                    base = int(r_key[a])
                    tainted.update(range(base, base + int(r_len[a])))
                any_hit = True
        if any_hit:
            kept[e] = 1
    return kept
