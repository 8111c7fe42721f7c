"""Pure-Python engine kernel.

Mirrors ``_kernel.pyx`` operation for operation, so both produce bit-identical
floats.  Requests are identified by their local index within one node.
"""
from __future__ import annotations

import heapq
import math
from collections import deque

PREFILL_KIND, DECODE_KIND = 0, 1


def simulate(coef, L, h, c, tp, max_num_seqs, kv_cap,
             input_len, out_len, seq, generated, finish, ready, ext_ready,
             dep_ptr, dep_idx, assignment,
             clocks, running, queues, pendings, time_limit):
    """Advance every replica until it drains or the next iteration would end past ``time_limit``.

    ``generated``, ``finish``, ``ready`` and ``assignment`` are updated in place.
    Replica state lists are replaced.  Returns (trace columns, done flags).
    """
    L = float(L)
    h = float(h)
    c = float(c)
    tp = float(tp)
    ncol = coef.shape[1]
    a0, b0, a1, b1, a2, b2 = (coef[k].tolist() for k in range(6))
    inp = input_len.tolist()
    outl = out_len.tolist()
    sq = seq.tolist()
    ptr = dep_ptr.tolist()
    didx = dep_idx.tolist()
    gen = generated.tolist()

    tr_rep, tr_start, tr_lat, tr_kind, tr_B, tr_T, tr_S, tr_F = [], [], [], [], [], [], [], []
    done = []

    for r in range(len(clocks)):
        clock = float(clocks[r])
        run = list(running[r])
        q = deque(queues[r])
        heap = [(float(ready[i]), sq[i], i) for i in pendings[r]]
        heapq.heapify(heap)
        used = 0
        for i in run:
            used += inp[i] + gen[i]

        while True:
            while heap and heap[0][0] <= clock:
                q.append(heapq.heappop(heap)[2])
            if not run and not q:
                if not heap:
                    break
                t = heap[0][0]
                if t > time_limit:
                    break
                clock = t
                continue

            # prefill admission: FCFS from the queue head while slot and KV allow
            k = 0
            add = 0
            T = 0.0
            Q = 0.0
            nrun = len(run)
            for i in q:
                if nrun + k >= max_num_seqs:
                    break
                need = inp[i] + gen[i] + 1
                if used + add + need > kv_cap:
                    break
                k += 1
                add += need
                s_i = float(inp[i] + gen[i])
                T += s_i
                Q += s_i * s_i

            if k > 0:
                F = L * (c * T * tp + 2.0 * h * Q) / tp
                j = k if k < ncol - 1 else ncol - 1
                lat = ((((a0[j] * F + b0[j]) + a1[j] * T) + b1[j]) + a2[j] * T) + b2[j]
                if clock + lat > time_limit:
                    break
                end = clock + lat
                tr_rep.append(r)
                tr_start.append(clock)
                tr_lat.append(lat)
                tr_kind.append(PREFILL_KIND)
                tr_B.append(k)
                tr_T.append(T)
                tr_S.append(T)
                tr_F.append(F)
                admitted = [q.popleft() for _ in range(k)]
                for i in admitted:
                    gen[i] += 1
                    used += inp[i] + gen[i]
                    run.append(i)
                clock = end
                if any(gen[i] >= outl[i] for i in admitted):
                    run, used = _retire(run, used, gen, inp, outl, finish, ready, ext_ready, assignment,
                                        ptr, didx, sq, heap, end, r)
                continue

            # decode, preempting the most recently admitted requests if KV would overflow
            b = len(run)
            u = used
            while u + b > kv_cap:
                v = run[b - 1]
                u -= inp[v] + gen[v]
                b -= 1
            S = float(u)
            Bf = float(b)
            F = L * (c * Bf * tp + 2.0 * h * S) / tp
            j = b if b < ncol - 1 else ncol - 1
            lat = ((((a0[j] * F + b0[j]) + a1[j] * Bf) + b1[j]) + a2[j] * S) + b2[j]
            if clock + lat > time_limit:
                break
            end = clock + lat
            for v in range(len(run) - 1, b - 1, -1):
                q.appendleft(run[v])
            del run[b:]
            tr_rep.append(r)
            tr_start.append(clock)
            tr_lat.append(lat)
            tr_kind.append(DECODE_KIND)
            tr_B.append(b)
            tr_T.append(Bf)
            tr_S.append(S)
            tr_F.append(F)
            fin = False
            for i in run:
                gen[i] += 1
                if gen[i] >= outl[i]:
                    fin = True
            used = u + b
            clock = end
            if fin:
                run, used = _retire(run, used, gen, inp, outl, finish, ready, ext_ready, assignment,
                                    ptr, didx, sq, heap, end, r)

        clocks[r] = clock
        running[r] = run
        queues[r] = list(q)
        pendings[r] = [i for _, _, i in sorted(heap)]
        done.append(not run and not q and not heap)

    generated[:] = gen
    trace = (tr_rep, tr_start, tr_lat, tr_kind, tr_B, tr_T, tr_S, tr_F)
    return trace, done


def _retire(run, used, gen, inp, outl, finish, ready, ext_ready, assignment, ptr, didx, sq, heap, end, r):
    keep = []
    for i in run:
        if gen[i] >= outl[i]:
            used -= inp[i] + gen[i]
            _finish(i, end, gen, outl, finish, ready, ext_ready, assignment, ptr, didx, sq, heap, r)
        else:
            keep.append(i)
    return keep, used


def _finish(i, t, gen, outl, finish, ready, ext_ready, assignment, ptr, didx, sq, heap, r):
    stack = [(i, t)]
    while stack:
        i, t = stack.pop()
        finish[i] = t
        for p in range(ptr[i], ptr[i + 1]):
            d = didx[p]
            e = ext_ready[d]
            if math.isnan(e):
                continue
            rt = t if t >= e else e
            ready[d] = rt
            assignment[d] = r
            if outl[d] <= gen[d]:
                stack.append((d, rt))
            else:
                heapq.heappush(heap, (rt, sq[d], d))
