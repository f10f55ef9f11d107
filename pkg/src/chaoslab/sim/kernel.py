"""Compiled per-request hot path of the simulator.

The Python side (``world.py``) owns the control-event queue: window closes,
fault activation/revert and region changes. Between two control events every
arrival is handled here, synchronously walking the dependency DAG at the
arrival instant. All state lives in numpy arrays grouped in namedtuples so
the whole thing stays inspectable and copyable from Python.

The walk over the dependency DAG is a single loop over an explicit frame
stack. Handing a namedtuple of arrays to a compiled helper costs a reference
count update per member, so the hot loop unpacks every array once per batch
and calls helpers with plain arrays only.
"""

from collections import namedtuple

import numpy as np
from numba import njit

SUCCESS = 0
FALLBACK = 1
FAILURE = 2

# failure reasons
R_NONE = 0
R_FAULT = 1
R_UNAVAILABLE = 2
R_QUEUE_FULL = 3
R_DEPENDENCY = 4
R_CACHED_ERROR = 5
R_INSTANCE_DEATH = 6

REASONS = ("", "fault", "unavailable", "queue-full", "dependency", "cached-error", "instance-death")

# boundary counter kinds
K_ARRIVALS = 0
K_SUCCESS = 1
K_FALLBACK = 2
K_FAILURE = 3

# fault kinds handled per call; physical faults are applied from Python
F_LATENCY = 1
F_FAIL_REQUESTS = 2
F_FAIL_SERVICE = 3

FB_NONE = 0
FB_DEFAULT = 1
FB_BYPASS = 2

Tables = namedtuple(
    "Tables",
    "entry window_ms child_start child_callee child_edge edge_required fronts "
    "base cap hold nominal queue_max mem_limit critical fallback bypass cache_slot ttl "
    "cache_errors jitter inst_table inst_count",
)
State = namedtuple(
    "State",
    "alive busy death_time rr q_start q_rid q_head q_len cache_exp cache_ok region_down rng "
    "req_cw req_status req_group pending pending_n death_inst death_time_log death_n",
)
Faults = namedtuple(
    "Faults",
    "active kind edge service extra jitter prob scope_all salt thresh fired buckets",
)
Metrics = namedtuple(
    "Metrics",
    "bnd calls errors fallbacks busy max_queue max_mem lat_val lat_svc lat_n",
)
Trace = namedtuple(
    "Trace",
    "on call_f call_i call_n fire_f fire_i fire_n req_f req_i req_n",
)
Stack = namedtuple("Stack", "i f")

# trace columns
CALL_F = ("time", "latency")
CALL_I = ("service", "edge", "instance", "status", "reason", "rid", "user")
FIRE_F = ("time",)
FIRE_I = ("fault", "group", "rid", "user")
REQ_F = ("time", "latency")
REQ_I = ("rid", "user", "region", "group", "status", "reason", "mask")

# frame stack columns
FR_S, FR_E, FR_INST, FR_SLOT, FR_STATUS, FR_REASON, FR_MASK, FR_J, FR_MODE, FR_CS = range(10)
FR_JIT, FR_EXTRA, FR_DOWN = range(3)
MAX_DEPTH = 64

# frame modes: waiting on a child call, or on the bypass call that replaces it
M_CHILD = 0
M_BYPASS = 1


TRACE_KINDS = ("calls", "firings", "requests")


def new_trace(on, size=1 << 12):
    """Trace buffers; ``on`` is a bool (all kinds) or a collection of TRACE_KINDS."""
    if isinstance(on, (bool, np.bool_)) or on is None:
        kinds = TRACE_KINDS if on else ()
    else:
        kinds = tuple(on)
        unknown = set(kinds) - set(TRACE_KINDS)
        if unknown:
            raise ValueError(f"unknown trace kinds {sorted(unknown)}")
    flags = np.array([k in kinds for k in TRACE_KINDS], dtype=np.bool_)
    nc, nfire, nr = (size if f else 1 for f in flags)
    z = np.zeros
    return Trace(
        on=flags,
        call_f=z((nc, len(CALL_F))), call_i=z((nc, len(CALL_I)), np.int64), call_n=z(1, np.int64),
        fire_f=z((nfire, len(FIRE_F))), fire_i=z((nfire, len(FIRE_I)), np.int64), fire_n=z(1, np.int64),
        req_f=z((nr, len(REQ_F))), req_i=z((nr, len(REQ_I)), np.int64), req_n=z(1, np.int64),
    )


def new_stack(depth=MAX_DEPTH):
    return Stack(i=np.zeros((depth, 10), dtype=np.int64), f=np.zeros((depth, 3)))


_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

JITTER_STREAM = 0
FAULT_STREAM = 1


@njit(cache=True)
def uniform(rng, stream):
    """Next double in [0, 1) from splitmix64 stream ``stream``."""
    rng[stream] += _GAMMA
    z = rng[stream]
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    z = z ^ (z >> _S31)
    return (z >> _S11) * _INV53


@njit(cache=True)
def kill_instance(inst, t, cur_window, st, mx):
    """Mark ``inst`` dead at ``t``; requests still waiting in its queue fail."""
    if st.alive[inst] == 0:
        return
    st.alive[inst] = 0
    st.death_time[inst] = t
    k = st.death_n[0]
    st.death_inst[k] = inst
    st.death_time_log[k] = t
    st.death_n[0] = k + 1
    qcap = st.q_start.shape[1]
    head = st.q_head[inst]
    for j in range(st.q_len[inst]):
        pos = (head + j) % qcap
        rid = st.q_rid[inst, pos]
        if st.q_start[inst, pos] <= t or rid < 0 or rid >= st.req_status.shape[0]:
            continue
        old = st.req_status[rid]
        cw = st.req_cw[rid]
        if old == FAILURE or old < 0 or cw < cur_window:
            continue
        g = st.req_group[rid]
        mx.bnd[cw, g, old + 1] -= 1
        mx.bnd[cw, g, K_FAILURE] += 1
        st.req_status[rid] = FAILURE
    st.q_len[inst] = 0


@njit(cache=True)
def process_arrivals(times, users, keys, i0, i1, rid0, user_region, user_group, max_calls, cur_window,
                     service, region, boundary, tb, st, ft, mx, tr, sk):
    """Handle arrivals ``[i0, i1)``.

    Returns ``(index reached, status, reason, latency, mask)`` where the last
    four describe the final handled arrival. Stops early when a buffer could
    overflow so the caller can grow it and resume. ``service``/``region`` of
    -1 mean the entry service and the user's routed region; with
    ``boundary`` False nothing is counted at the system boundary.
    """
    # unpack once: see the module docstring
    win = tb.window_ms
    child_start, child_callee, child_edge = tb.child_start, tb.child_callee, tb.child_edge
    edge_required, fronts, base, cap, hold_t, nominal = (
        tb.edge_required, tb.fronts, tb.base, tb.cap, tb.hold, tb.nominal)
    queue_max, mem_limit, critical, fallback, bypass = (
        tb.queue_max, tb.mem_limit, tb.critical, tb.fallback, tb.bypass)
    cache_slot, ttl, cache_errors, jitter, inst_table, inst_count = (
        tb.cache_slot, tb.ttl, tb.cache_errors, tb.jitter, tb.inst_table, tb.inst_count)
    alive, busy, rr, q_start, q_rid, q_head, q_len = st.alive, st.busy, st.rr, st.q_start, st.q_rid, st.q_head, st.q_len
    cache_exp, cache_ok, region_down, rng = st.cache_exp, st.cache_ok, st.region_down, st.rng
    req_cw, req_status, req_group, pending, pending_n = st.req_cw, st.req_status, st.req_group, st.pending, st.pending_n
    f_active, f_kind, f_edge, f_service, f_extra, f_jitter, f_prob = (
        ft.active, ft.kind, ft.edge, ft.service, ft.extra, ft.jitter, ft.prob)
    f_scope_all, f_salt, f_thresh, f_fired, f_buckets = ft.scope_all, ft.salt, ft.thresh, ft.fired, ft.buckets
    bnd, m_calls, m_errors, m_fallbacks, m_busy, m_max_queue, m_max_mem = (
        mx.bnd, mx.calls, mx.errors, mx.fallbacks, mx.busy, mx.max_queue, mx.max_mem)
    lat_val, lat_svc, lat_n = mx.lat_val, mx.lat_svc, mx.lat_n
    trace_calls, trace_fires, trace_reqs = tr.on[0], tr.on[1], tr.on[2]
    call_f, call_i, call_n = tr.call_f, tr.call_i, tr.call_n
    fire_f, fire_i, fire_n = tr.fire_f, tr.fire_i, tr.fire_n
    req_f, req_i, req_n = tr.req_f, tr.req_i, tr.req_n
    fi, ff = sk.i, sk.f

    n_faults = f_kind.shape[0]
    qcap = q_start.shape[1]
    last_row = bnd.shape[0] - 1
    status = SUCCESS
    reason = R_NONE
    lat = 0.0
    mask = 0
    for i in range(i0, i1):
        if lat_n[0] + max_calls > lat_val.shape[0]:
            return i, status, reason, lat, mask
        if ((trace_calls and call_n[0] + max_calls > call_f.shape[0])
                or (trace_fires and fire_n[0] + max_calls > fire_f.shape[0])
                or (trace_reqs and req_n[0] + 1 > req_f.shape[0])):
            return i, status, reason, lat, mask
        t = times[i]
        user = users[i]
        key = keys[i]
        rid = rid0 + i if boundary else -1
        r = user_region[user] if region < 0 else region
        grp = user_group[user]
        if boundary:
            bnd[int(t // win), grp, K_ARRIVALS] += 1

        # explicit-stack walk of the dependency DAG
        k = 0
        s = tb.entry if service < 0 else service
        e = -1
        entering = True
        while True:
            if entering:
                # start the call into s over e in frame k; a call that ends
                # right here sets ``finished`` and falls through to recording
                finished = False
                rs = SUCCESS
                rr_ = R_NONE
                rl = 0.0
                inst = -1
                slot = -1
                jit = 1.0
                extra = 0.0
                for f in range(n_faults):
                    if f_active[f] == 0:
                        continue
                    kind = f_kind[f]
                    if kind == F_FAIL_SERVICE:
                        if f_service[f] != s:
                            continue
                    elif e < 0 or f_edge[f] != e:
                        continue
                    if f_scope_all[f] == 0 and (user < 0 or f_buckets[f_salt[f], user] >= f_thresh[f]):
                        continue
                    fire = True
                    if kind == F_LATENCY:
                        extra += f_extra[f] + f_jitter[f] * uniform(rng, FAULT_STREAM)
                    elif kind == F_FAIL_REQUESTS and f_prob[f] < 1.0:
                        fire = uniform(rng, FAULT_STREAM) < f_prob[f]
                    if fire:
                        f_fired[f, grp] += 1
                        if trace_fires:
                            m = fire_n[0]
                            fire_f[m, 0] = t
                            fire_i[m, 0] = f
                            fire_i[m, 1] = grp
                            fire_i[m, 2] = rid
                            fire_i[m, 3] = user
                            fire_n[0] = m + 1
                        if kind != F_LATENCY:
                            finished = True
                            rs = FAILURE
                            rr_ = R_FAULT
                            rl = extra
                            break
                if not finished and region_down[r]:
                    finished = True
                    rs = FAILURE
                    rr_ = R_UNAVAILABLE
                    rl = extra
                if not finished:
                    # round-robin over live instances of s in region r
                    n_inst = inst_count[s, r]
                    for j in range(n_inst):
                        c = (rr[s, r] + j) % n_inst
                        cand = inst_table[s, r, c]
                        if alive[cand]:
                            inst = cand
                            rr[s, r] = (c + 1) % n_inst
                            break
                    if inst < 0:
                        finished = True
                        rs = FAILURE
                        rr_ = R_UNAVAILABLE
                        rl = extra
                if not finished:
                    jit = 1.0 + jitter[s] * (2.0 * uniform(rng, JITTER_STREAM) - 1.0)
                    slot = cache_slot[s]
                    if slot >= 0 and cache_exp[slot, r, key] > t:
                        finished = True
                        rl = base[s] * jit + extra
                        if not cache_ok[slot, r, key]:
                            rs = FAILURE
                            rr_ = R_CACHED_ERROR
                if not finished:
                    # queue admission: the ring holds admitted items that have not started yet
                    head = q_head[inst]
                    qlen = q_len[inst]
                    while qlen > 0 and q_start[inst, head] <= t:
                        head = (head + 1) % qcap
                        qlen -= 1
                    q_head[inst] = head
                    q_len[inst] = qlen
                    if queue_max[s] >= 0 and qlen >= queue_max[s]:
                        finished = True
                        rs = FAILURE
                        rr_ = R_QUEUE_FULL
                        rl = extra
                if not finished:
                    fi[k, FR_S] = s
                    fi[k, FR_E] = e
                    fi[k, FR_INST] = inst
                    fi[k, FR_SLOT] = slot
                    fi[k, FR_STATUS] = SUCCESS
                    fi[k, FR_REASON] = R_NONE
                    fi[k, FR_MASK] = 0
                    fi[k, FR_J] = child_start[s]
                    fi[k, FR_MODE] = M_CHILD
                    ff[k, FR_JIT] = jit
                    ff[k, FR_EXTRA] = extra
                    ff[k, FR_DOWN] = 0.0
                    entering = False
                    continue
                rm = 0
            else:
                # frame k is live: call its next child or finish it
                s = fi[k, FR_S]
                j = fi[k, FR_J]
                if j < child_start[s + 1]:
                    s = child_callee[j]
                    e = child_edge[j]
                    k += 1
                    entering = True
                    continue
                inst = fi[k, FR_INST]
                e = fi[k, FR_E]
                own_demand = base[s] * ff[k, FR_JIT]
                down = ff[k, FR_DOWN]
                rs = fi[k, FR_STATUS]
                rr_ = fi[k, FR_REASON]
                rm = fi[k, FR_MASK]
                # the queue ahead of this call was measured on entry; no
                # other call reaches this instance while the frame is live
                head = q_head[inst]
                qlen = q_len[inst]
                own = own_demand * (1.0 + qlen / cap[s])
                # capacity: service demand relative to nominal stretches the hold time
                ratio = (own_demand + down) / nominal[s] if nominal[s] > 0 else 1.0
                hold = hold_t[s] * ratio
                start = busy[inst]
                if start < t:
                    start = t
                busy[inst] = start + hold
                tail = (head + qlen) % qcap
                q_start[inst, tail] = start
                q_rid[inst, tail] = rid
                qlen += 1
                q_len[inst] = qlen
                waiting = qlen if start > t else qlen - 1
                m_busy[s] += hold
                if waiting > m_max_queue[s]:
                    m_max_queue[s] = waiting
                if waiting > m_max_mem[s]:
                    m_max_mem[s] = waiting
                if waiting > mem_limit[s]:
                    already = False
                    for p in range(pending_n[0]):
                        if pending[p] == inst:
                            already = True
                    if not already:
                        pending[pending_n[0]] = inst
                        pending_n[0] += 1
                slot = fi[k, FR_SLOT]
                if slot >= 0:
                    if rs != FAILURE:
                        cache_exp[slot, r, key] = t + ttl[s]
                        cache_ok[slot, r, key] = True
                    elif cache_errors[s]:
                        cache_exp[slot, r, key] = t + ttl[s]
                        cache_ok[slot, r, key] = False
                rl = own + down + ff[k, FR_EXTRA]

            # the call into s over e finished with (rs, rr_, rl, rm): record it
            m_calls[s] += 1
            if rs == FAILURE:
                m_errors[s] += 1
            elif rs == FALLBACK:
                m_fallbacks[s] += 1
            m = lat_n[0]
            lat_val[m] = rl
            lat_svc[m] = s
            lat_n[0] = m + 1
            if trace_calls:
                m = call_n[0]
                call_f[m, 0] = t
                call_f[m, 1] = rl
                call_i[m, 0] = s
                call_i[m, 1] = e
                call_i[m, 2] = inst
                call_i[m, 3] = rs
                call_i[m, 4] = rr_
                call_i[m, 5] = rid
                call_i[m, 6] = user
                call_n[0] = m + 1

            # hand the result to the frame below
            k -= 1
            if k < 0:
                status, reason, lat, mask = rs, rr_, rl, rm
                break
            p = fi[k, FR_S]
            j = fi[k, FR_J]
            d = child_callee[j]
            de = child_edge[j]
            ff[k, FR_DOWN] += rl
            if fi[k, FR_MODE] == M_CHILD:
                cs = rs
                fi[k, FR_MASK] |= rm
                target = bypass[p]
                if cs == FAILURE and fallback[p] == FB_BYPASS and fronts[d, target]:
                    fi[k, FR_MODE] = M_BYPASS
                    fi[k, FR_CS] = cs
                    k += 1
                    s = target
                    e = -1
                    entering = True
                    continue
            else:
                cs = fi[k, FR_CS]
                fi[k, FR_MODE] = M_CHILD
                if rs != FAILURE:
                    cs = FALLBACK
                    fi[k, FR_MASK] |= rm | (1 << p)
            if cs == FAILURE and fallback[d] == FB_DEFAULT:
                cs = FALLBACK
                fi[k, FR_MASK] |= 1 << d
            if cs == FAILURE and not edge_required[de] and not critical[d]:
                cs = FALLBACK
                fi[k, FR_MASK] |= 1 << d
            if cs == FAILURE:
                fi[k, FR_STATUS] = FAILURE
                fi[k, FR_REASON] = R_DEPENDENCY
                fi[k, FR_J] = child_start[p + 1]
            else:
                if cs == FALLBACK and fi[k, FR_STATUS] == SUCCESS:
                    fi[k, FR_STATUS] = FALLBACK
                fi[k, FR_J] = j + 1
            entering = False

        if boundary:
            cw = int((t + lat) // win)
            if cw > last_row:
                cw = last_row
            bnd[cw, grp, status + 1] += 1
            req_cw[rid] = cw
            req_status[rid] = status
            req_group[rid] = grp
            if trace_reqs:
                m = req_n[0]
                req_f[m, 0] = t
                req_f[m, 1] = lat
                req_i[m, 0] = rid
                req_i[m, 1] = user
                req_i[m, 2] = r
                req_i[m, 3] = grp
                req_i[m, 4] = status
                req_i[m, 5] = reason
                req_i[m, 6] = mask
                req_n[0] = m + 1
        if pending_n[0] > 0:
            for p in range(pending_n[0]):
                kill_instance(pending[p], t, cur_window, st, mx)
            pending_n[0] = 0
    return i1, status, reason, lat, mask
