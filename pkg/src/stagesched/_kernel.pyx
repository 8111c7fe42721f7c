# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled engine kernel; semantics match _kernel_py.simulate exactly."""

from libc.math cimport isnan
from libcpp.deque cimport deque
from libcpp.pair cimport pair
from libcpp.vector cimport vector

import numpy as np

ctypedef pair[double, pair[long long, long long]] HeapItem


cdef struct Ctx:
    const long long* inp
    const long long* outl
    const long long* sq
    const long long* ptr
    const long long* didx
    const double* ext_ready
    long long* gen
    double* finish
    double* ready
    long long* assignment


cdef inline void push_heap_item(vector[HeapItem]& heap, double t, long long s, long long i):
    # min-heap on (ready, seq), same ordering as heapq over (ready, seq, idx)
    cdef HeapItem item
    item.first = t
    item.second.first = s
    item.second.second = i
    heap.push_back(item)
    _sift_up(heap, heap.size() - 1)


cdef inline bint _less(HeapItem& a, HeapItem& b):
    if a.first != b.first:
        return a.first < b.first
    return a.second.first < b.second.first


cdef void _sift_up(vector[HeapItem]& heap, size_t pos):
    cdef HeapItem item = heap[pos]
    cdef size_t parent
    while pos > 0:
        parent = (pos - 1) >> 1
        if _less(item, heap[parent]):
            heap[pos] = heap[parent]
            pos = parent
        else:
            break
    heap[pos] = item


cdef HeapItem pop_heap_item(vector[HeapItem]& heap):
    cdef HeapItem top = heap[0]
    cdef HeapItem last = heap.back()
    heap.pop_back()
    cdef size_t n = heap.size()
    cdef size_t pos = 0
    cdef size_t child
    if n > 0:
        while True:
            child = 2 * pos + 1
            if child >= n:
                break
            if child + 1 < n and _less(heap[child + 1], heap[child]):
                child += 1
            if _less(heap[child], last):
                heap[pos] = heap[child]
                pos = child
            else:
                break
        heap[pos] = last
    return top


cdef void _finish(Ctx* cx, long long i0, double t0, vector[HeapItem]& heap, long long r):
    cdef vector[pair[long long, double]] stack
    cdef pair[long long, double] cur
    cdef long long i, d, p
    cdef double t, e, rt
    cur.first = i0
    cur.second = t0
    stack.push_back(cur)
    while stack.size() > 0:
        cur = stack.back()
        stack.pop_back()
        i = cur.first
        t = cur.second
        cx.finish[i] = t
        for p in range(cx.ptr[i], cx.ptr[i + 1]):
            d = cx.didx[p]
            e = cx.ext_ready[d]
            if isnan(e):
                continue
            rt = t if t >= e else e
            cx.ready[d] = rt
            cx.assignment[d] = r
            if cx.outl[d] <= cx.gen[d]:
                cur.first = d
                cur.second = rt
                stack.push_back(cur)
            else:
                push_heap_item(heap, rt, cx.sq[d], d)


cdef long long _retire(Ctx* cx, vector[long long]& run, long long used, vector[HeapItem]& heap,
                       double end, long long r):
    cdef vector[long long] keep
    cdef long long i
    cdef size_t k
    for k in range(run.size()):
        i = run[k]
        if cx.gen[i] >= cx.outl[i]:
            used -= cx.inp[i] + cx.gen[i]
            _finish(cx, i, end, heap, r)
        else:
            keep.push_back(i)
    run.swap(keep)
    return used


def simulate(coef, L, h, c, tp, long long max_num_seqs, long long kv_cap,
             input_len, out_len, seq, generated, finish, ready, ext_ready,
             dep_ptr, dep_idx, assignment,
             clocks, running, queues, pendings, double time_limit):
    cdef double Ld = float(L), hd = float(h), cd = float(c), tpd = float(tp)
    cdef const double[:, ::1] cf = np.ascontiguousarray(coef, dtype=np.float64)
    cdef long long ncol = cf.shape[1]
    cdef const long long[::1] inp_v = np.ascontiguousarray(input_len, dtype=np.int64)
    cdef const long long[::1] out_v = np.ascontiguousarray(out_len, dtype=np.int64)
    cdef const long long[::1] seq_v = np.ascontiguousarray(seq, dtype=np.int64)
    cdef const long long[::1] ptr_v = np.ascontiguousarray(dep_ptr, dtype=np.int64)
    cdef const double[::1] ext_v = np.ascontiguousarray(ext_ready, dtype=np.float64)
    cdef long long[::1] gen_v = generated
    cdef double[::1] fin_v = finish
    cdef double[::1] rdy_v = ready
    cdef long long[::1] asg_v = assignment
    didx_arr = np.ascontiguousarray(dep_idx, dtype=np.int64)
    if didx_arr.shape[0] == 0:
        didx_arr = np.zeros(1, dtype=np.int64)
    cdef const long long[::1] didx_v = didx_arr

    cdef Ctx cx
    cx.inp = &inp_v[0] if inp_v.shape[0] else NULL
    cx.outl = &out_v[0] if out_v.shape[0] else NULL
    cx.sq = &seq_v[0] if seq_v.shape[0] else NULL
    cx.ptr = &ptr_v[0]
    cx.didx = &didx_v[0]
    cx.ext_ready = &ext_v[0] if ext_v.shape[0] else NULL
    cx.gen = &gen_v[0] if gen_v.shape[0] else NULL
    cx.finish = &fin_v[0] if fin_v.shape[0] else NULL
    cx.ready = &rdy_v[0] if rdy_v.shape[0] else NULL
    cx.assignment = &asg_v[0] if asg_v.shape[0] else NULL

    cdef vector[long long] tr_rep, tr_kind, tr_B
    cdef vector[double] tr_start, tr_lat, tr_T, tr_S, tr_F
    cdef vector[long long] run
    cdef deque[long long] q
    cdef vector[HeapItem] heap
    cdef double clock, t, T, Q, s_i, F, lat, end, S, Bf
    cdef long long used, add, need, k, nrun, i, j, b, u, v, r, nrep
    cdef size_t qi
    cdef bint fin
    done = []
    nrep = len(clocks)

    for r in range(nrep):
        clock = float(clocks[r])
        run.clear()
        for i in running[r]:
            run.push_back(i)
        q.clear()
        for i in queues[r]:
            q.push_back(i)
        heap.clear()
        for i in pendings[r]:
            push_heap_item(heap, rdy_v[i], seq_v[i], i)
        used = 0
        for qi in range(run.size()):
            i = run[qi]
            used += cx.inp[i] + cx.gen[i]

        while True:
            while heap.size() > 0 and heap[0].first <= clock:
                q.push_back(pop_heap_item(heap).second.second)
            if run.size() == 0 and q.size() == 0:
                if heap.size() == 0:
                    break
                t = heap[0].first
                if t > time_limit:
                    break
                clock = t
                continue

            k = 0
            add = 0
            T = 0.0
            Q = 0.0
            nrun = run.size()
            for qi in range(q.size()):
                i = q[qi]
                if nrun + k >= max_num_seqs:
                    break
                need = cx.inp[i] + cx.gen[i] + 1
                if used + add + need > kv_cap:
                    break
                k += 1
                add += need
                s_i = <double>(cx.inp[i] + cx.gen[i])
                T += s_i
                Q += s_i * s_i

            if k > 0:
                F = Ld * (cd * T * tpd + 2.0 * hd * Q) / tpd
                j = k if k < ncol - 1 else ncol - 1
                lat = ((((cf[0, j] * F + cf[1, j]) + cf[2, j] * T) + cf[3, j]) + cf[4, j] * T) + cf[5, j]
                if clock + lat > time_limit:
                    break
                end = clock + lat
                tr_rep.push_back(r)
                tr_start.push_back(clock)
                tr_lat.push_back(lat)
                tr_kind.push_back(0)
                tr_B.push_back(k)
                tr_T.push_back(T)
                tr_S.push_back(T)
                tr_F.push_back(F)
                fin = False
                for qi in range(<size_t>k):
                    i = q.front()
                    q.pop_front()
                    cx.gen[i] += 1
                    used += cx.inp[i] + cx.gen[i]
                    run.push_back(i)
                    if cx.gen[i] >= cx.outl[i]:
                        fin = True
                clock = end
                if fin:
                    used = _retire(&cx, run, used, heap, end, r)
                continue

            b = run.size()
            u = used
            while u + b > kv_cap:
                v = run[b - 1]
                u -= cx.inp[v] + cx.gen[v]
                b -= 1
            S = <double>u
            Bf = <double>b
            F = Ld * (cd * Bf * tpd + 2.0 * hd * S) / tpd
            j = b if b < ncol - 1 else ncol - 1
            lat = ((((cf[0, j] * F + cf[1, j]) + cf[2, j] * Bf) + cf[3, j]) + cf[4, j] * S) + cf[5, j]
            if clock + lat > time_limit:
                break
            end = clock + lat
            v = <long long>run.size() - 1
            while v >= b:
                q.push_front(run[v])
                v -= 1
            run.resize(b)
            tr_rep.push_back(r)
            tr_start.push_back(clock)
            tr_lat.push_back(lat)
            tr_kind.push_back(1)
            tr_B.push_back(b)
            tr_T.push_back(Bf)
            tr_S.push_back(S)
            tr_F.push_back(F)
            fin = False
            for qi in range(run.size()):
                i = run[qi]
                cx.gen[i] += 1
                if cx.gen[i] >= cx.outl[i]:
                    fin = True
            used = u + b
            clock = end
            if fin:
                used = _retire(&cx, run, used, heap, end, r)

        clocks[r] = clock
        running[r] = [run[qi] for qi in range(run.size())]
        queues[r] = [q[qi] for qi in range(q.size())]
        pend = []
        while heap.size() > 0:
            pend.append(pop_heap_item(heap).second.second)
        pendings[r] = pend
        done.append(run.size() == 0 and q.size() == 0 and len(pend) == 0)

    trace = (list(tr_rep), list(tr_start), list(tr_lat), list(tr_kind),
             list(tr_B), list(tr_T), list(tr_S), list(tr_F))
    return trace, done
