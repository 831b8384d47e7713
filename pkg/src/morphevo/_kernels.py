"""Rollout integration kernels.

Two implementations of the same arithmetic: a scalar-loop kernel compiled with
numba, and a numpy version vectorised over episodes. ``simulate_batch`` picks
one according to ``morphevo._accel.USE_NUMBA``; both are importable directly
for the benchmark and the cross-check tests.

Body arrays (nodes in BFS order, parents before children):
    parent  int64 (n,)   parent index, -1 for the root
    joint   int64 (n,)   index of the joint driving this limb, -1 for none
    attach  float (n,)   attachment fraction along the parent
    ext     float (n, 2) planar extent (u, w)
    radius  float (n,)
    limit   float (k,)   joint half-range in radians
    gain    float (k,)   gear / gear_max
Primitive table rows: kind (0 cosine, 1 constant), frequency, phase, torque.
"""
import math

import numpy as np

from . import _accel
from ._accel import njit

ARM_DIM = 2
CRAWLER_DIM = 6


@njit(cache=True)
def _forward_kinematics(theta, parent, joint, attach, ext, su, sw, eu, ew):
    n = parent.shape[0]
    ang = np.empty(n)
    for i in range(n):
        p = parent[i]
        a = 0.0
        if joint[i] >= 0:
            a = theta[joint[i]]
        if p < 0:
            su[i] = 0.0
            sw[i] = 0.0
        else:
            su[i] = su[p] + attach[i] * (eu[p] - su[p])
            sw[i] = sw[p] + attach[i] * (ew[p] - sw[p])
            a += ang[p]
        ang[i] = a
        c = math.cos(a)
        s = math.sin(a)
        eu[i] = su[i] + c * ext[i, 0] - s * ext[i, 1]
        ew[i] = sw[i] + s * ext[i, 0] + c * ext[i, 1]


@njit(cache=True)
def _lowest_endpoint(sw, ew, radius):
    n = sw.shape[0]
    best = 0
    val = sw[0] - radius[0]
    for i in range(n):
        b = sw[i] - radius[i]
        if b < val:
            val = b
            best = 2 * i
        b = ew[i] - radius[i]
        if b < val:
            val = b
            best = 2 * i + 1
    return best, val


@njit(cache=True)
def _simulate_one(parent, joint, attach, ext, radius, limit, gain, prims, assign,
                  n_steps, crawler, dt, damping, anchor_tol, out):
    n = parent.shape[0]
    k = limit.shape[0]
    theta = np.zeros(k)
    su = np.empty(n)
    sw = np.empty(n)
    eu = np.empty(n)
    ew = np.empty(n)
    root_u = 0.0
    root_w = 0.0
    if crawler:
        _forward_kinematics(theta, parent, joint, attach, ext, su, sw, eu, ew)
        a_idx, low = _lowest_endpoint(sw, ew, radius)
        root_w = -low
    for t in range(n_steps):
        for j in range(k):
            row = assign[j]
            if prims[row, 0] == 0.0:
                u = math.cos(prims[row, 1] * t + prims[row, 2])
            else:
                u = prims[row, 3]
            th = theta[j] + dt * (gain[j] * u - damping * theta[j])
            if th > limit[j]:
                th = limit[j]
            elif th < -limit[j]:
                th = -limit[j]
            theta[j] = th
        if crawler:
            a_idx, low = _lowest_endpoint(sw, ew, radius)
            anchored = root_w + low <= anchor_tol
            if a_idx % 2 == 0:
                prev_u = su[a_idx // 2]
            else:
                prev_u = eu[a_idx // 2]
            _forward_kinematics(theta, parent, joint, attach, ext, su, sw, eu, ew)
            if anchored:
                if a_idx % 2 == 0:
                    root_u -= su[a_idx // 2] - prev_u
                else:
                    root_u -= eu[a_idx // 2] - prev_u
            b_idx, low = _lowest_endpoint(sw, ew, radius)
            root_w = -low
    if not crawler:
        _forward_kinematics(theta, parent, joint, attach, ext, su, sw, eu, ew)
        out[0] = eu[n - 1]
        out[1] = ew[n - 1]
        return
    mu = 0.0
    mw = 0.0
    cnt = 0
    for i in range(n):
        if joint[i] >= 0:
            mu += su[i]
            mw += sw[i]
            cnt += 1
    umin = su[0]
    umax = su[0]
    wmin = sw[0]
    wmax = sw[0]
    for i in range(n):
        umin = min(umin, su[i], eu[i])
        umax = max(umax, su[i], eu[i])
        wmin = min(wmin, sw[i], ew[i])
        wmax = max(wmax, sw[i], ew[i])
    out[0] = root_u
    out[1] = root_w
    out[2] = root_u + mu / max(cnt, 1)
    out[3] = root_w + mw / max(cnt, 1)
    out[4] = umax - umin
    out[5] = wmax - wmin


@njit(cache=True)
def simulate_batch_numba(parent, joint, attach, ext, radius, limit, gain, prims, assign,
                         n_steps, crawler, dt, damping, anchor_tol):
    m = assign.shape[0]
    dim = CRAWLER_DIM if crawler else ARM_DIM
    out = np.empty((m, dim))
    for e in range(m):
        _simulate_one(parent, joint, attach, ext, radius, limit, gain, prims, assign[e],
                      n_steps, crawler, dt, damping, anchor_tol, out[e])
    return out


def _fk_numpy(theta, parent, joint, attach, ext):
    m = theta.shape[0]
    n = parent.shape[0]
    su = np.zeros((m, n))
    sw = np.zeros((m, n))
    eu = np.zeros((m, n))
    ew = np.zeros((m, n))
    ang = np.zeros((m, n))
    for i in range(n):
        p = parent[i]
        a = theta[:, joint[i]] if joint[i] >= 0 else np.zeros(m)
        if p >= 0:
            su[:, i] = su[:, p] + attach[i] * (eu[:, p] - su[:, p])
            sw[:, i] = sw[:, p] + attach[i] * (ew[:, p] - sw[:, p])
            a = a + ang[:, p]
        ang[:, i] = a
        c = np.cos(a)
        s = np.sin(a)
        eu[:, i] = su[:, i] + c * ext[i, 0] - s * ext[i, 1]
        ew[:, i] = sw[:, i] + s * ext[i, 0] + c * ext[i, 1]
    return su, sw, eu, ew


def _endpoints(su, sw, eu, ew):
    # interleave start/end per limb: column 2i is the start, 2i+1 the end
    m, n = su.shape
    pu = np.empty((m, 2 * n))
    pw = np.empty((m, 2 * n))
    pu[:, 0::2], pu[:, 1::2] = su, eu
    pw[:, 0::2], pw[:, 1::2] = sw, ew
    return pu, pw


def simulate_batch_numpy(parent, joint, attach, ext, radius, limit, gain, prims, assign,
                         n_steps, crawler, dt, damping, anchor_tol):
    m, k = assign.shape
    theta = np.zeros((m, k))
    kind = prims[assign, 0]
    freq = prims[assign, 1]
    phase = prims[assign, 2]
    torque = prims[assign, 3]
    cosine = kind == 0.0
    rad2 = np.repeat(radius, 2)
    rows = np.arange(m)
    if crawler:
        su, sw, eu, ew = _fk_numpy(theta, parent, joint, attach, ext)
        pu, pw = _endpoints(su, sw, eu, ew)
        root_u = np.zeros(m)
        root_w = -np.min(pw - rad2, axis=1)
    for t in range(n_steps):
        u = np.where(cosine, np.cos(freq * t + phase), torque)
        theta = np.clip(theta + dt * (gain * u - damping * theta), -limit, limit)
        if crawler:
            bottoms = pw - rad2
            a_idx = np.argmin(bottoms, axis=1)
            anchored = root_w + bottoms[rows, a_idx] <= anchor_tol
            prev_u = pu[rows, a_idx]
            su, sw, eu, ew = _fk_numpy(theta, parent, joint, attach, ext)
            pu, pw = _endpoints(su, sw, eu, ew)
            root_u = np.where(anchored, root_u - (pu[rows, a_idx] - prev_u), root_u)
            root_w = -np.min(pw - rad2, axis=1)
    if not crawler:
        su, sw, eu, ew = _fk_numpy(theta, parent, joint, attach, ext)
        return np.stack([eu[:, -1], ew[:, -1]], axis=1)
    jmask = joint >= 0
    cnt = max(int(jmask.sum()), 1)
    out = np.empty((m, CRAWLER_DIM))
    out[:, 0] = root_u
    out[:, 1] = root_w
    out[:, 2] = root_u + su[:, jmask].sum(axis=1) / cnt
    out[:, 3] = root_w + sw[:, jmask].sum(axis=1) / cnt
    out[:, 4] = pu.max(axis=1) - pu.min(axis=1)
    out[:, 5] = pw.max(axis=1) - pw.min(axis=1)
    return out


def simulate_batch(*args):
    if _accel.USE_NUMBA:
        return simulate_batch_numba(*args)
    return simulate_batch_numpy(*args)
