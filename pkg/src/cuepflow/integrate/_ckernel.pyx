# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled integration kernel.

Same algorithm and return layout as ``_pykernel``; the vector field,
Jacobian and LU solves run without the GIL on flat row-major buffers.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, fabs, round as cround, isfinite, INFINITY
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_lapack cimport dgetrf, dgetrs

cnp.import_array()

cdef enum:
    TRAPEZOIDAL = 0
    IMPLICIT_EULER = 1

cdef enum:
    CONVERGED = 0
    HORIZON = 1
    DIVERGED = 2
    SOLVER_FAILURE = 3
    ELSEWHERE = 4

cdef double TWO_PI = 6.283185307179586


cdef struct Model:
    int n
    int m
    int N
    Py_ssize_t* gb
    double* M
    double* D
    double* Pm
    double* E
    double* Xd
    double* Xq
    double* G
    double* B
    double eps
    double MT
    # scratch
    double* cth
    double* sth
    double* Fre
    double* Fim
    double* dFre
    double* dFim
    double* dpe


cdef class _Holder:
    """Keeps contiguous copies of the model arrays alive while the C struct points at them."""
    cdef object arrays
    cdef Model mdl
    cdef double* scratch

    def __cinit__(self, model):
        cdef int n = model.n, m = model.m
        gb = np.ascontiguousarray(model.gen_bus, dtype=np.intp)
        M = np.ascontiguousarray(model.inertia, dtype=np.float64)
        D = np.ascontiguousarray(model.damping, dtype=np.float64)
        Pm = np.ascontiguousarray(model.p_m, dtype=np.float64)
        E = np.ascontiguousarray(model.e_q, dtype=np.float64)
        Xd = np.ascontiguousarray(model.xd, dtype=np.float64)
        Xq = np.ascontiguousarray(model.xq, dtype=np.float64)
        G = np.ascontiguousarray(np.real(model.Y), dtype=np.float64)
        B = np.ascontiguousarray(np.imag(model.Y), dtype=np.float64)
        self.arrays = (gb, M, D, Pm, E, Xd, Xq, G, B)
        self.mdl.n = n
        self.mdl.m = m
        self.mdl.N = 2 * n + 2 * m
        self.mdl.gb = <Py_ssize_t*> cnp.PyArray_DATA(gb)
        self.mdl.M = <double*> cnp.PyArray_DATA(M)
        self.mdl.D = <double*> cnp.PyArray_DATA(D)
        self.mdl.Pm = <double*> cnp.PyArray_DATA(Pm)
        self.mdl.E = <double*> cnp.PyArray_DATA(E)
        self.mdl.Xd = <double*> cnp.PyArray_DATA(Xd)
        self.mdl.Xq = <double*> cnp.PyArray_DATA(Xq)
        self.mdl.G = <double*> cnp.PyArray_DATA(G)
        self.mdl.B = <double*> cnp.PyArray_DATA(B)
        self.mdl.eps = float(model.eps)
        self.mdl.MT = float(np.sum(M))
        cdef int N = self.mdl.N
        cdef int total = 4 * m + 2 * m * N + n * N
        self.scratch = <double*> malloc(total * sizeof(double))
        if self.scratch == NULL:
            raise MemoryError()
        self.mdl.cth = self.scratch
        self.mdl.sth = self.scratch + m
        self.mdl.Fre = self.scratch + 2 * m
        self.mdl.Fim = self.scratch + 3 * m
        self.mdl.dFre = self.scratch + 4 * m
        self.mdl.dFim = self.scratch + 4 * m + m * N
        self.mdl.dpe = self.scratch + 4 * m + 2 * m * N

    def __dealloc__(self):
        if self.scratch != NULL:
            free(self.scratch)


cdef void _mismatch(Model* p, const double* x) noexcept nogil:
    """Current mismatch F (into Fre/Fim) plus cos/sin of bus angles."""
    cdef int n = p.n, m = p.m, k, l, i
    cdef const double* V = x + 2 * n
    cdef const double* th = x + 2 * n + m
    cdef double vr, vi, g, b, a, ca, sa, idd, iq, cd, sd
    cdef Py_ssize_t kb
    for k in range(m):
        p.cth[k] = cos(th[k])
        p.sth[k] = sin(th[k])
        p.Fre[k] = 0.0
        p.Fim[k] = 0.0
    for k in range(m):
        vr = 0.0
        vi = 0.0
        for l in range(m):
            g = p.G[k * m + l]
            b = p.B[k * m + l]
            vr = vr + V[l] * (g * p.cth[l] - b * p.sth[l])
            vi = vi + V[l] * (g * p.sth[l] + b * p.cth[l])
        p.Fre[k] = -vr
        p.Fim[k] = -vi
    for i in range(n):
        kb = p.gb[i]
        a = x[i] - th[kb]
        ca = cos(a)
        sa = sin(a)
        idd = (p.E[i] - V[kb] * ca) / p.Xd[i]
        iq = V[kb] * sa / p.Xq[i]
        cd = cos(x[i])
        sd = sin(x[i])
        p.Fre[kb] += cd * iq + sd * idd
        p.Fim[kb] += sd * iq - cd * idd


cdef void _rhs(Model* p, const double* x, double* out) noexcept nogil:
    cdef int n = p.n, m = p.m, k, i
    cdef const double* V = x + 2 * n
    cdef const double* th = x + 2 * n + m
    cdef double rre, rim, pcoi = 0.0, pe
    cdef Py_ssize_t kb
    _mismatch(p, x)
    for k in range(m):
        rre = p.cth[k] * p.Fre[k] + p.sth[k] * p.Fim[k]
        rim = p.cth[k] * p.Fim[k] - p.sth[k] * p.Fre[k]
        out[2 * n + k] = -rim / p.eps
        out[2 * n + m + k] = rre / (p.eps * V[k])
    for i in range(n):
        kb = p.gb[i]
        pe = p.E[i] * V[kb] * sin(x[i] - th[kb]) / p.Xd[i]
        out[n + i] = p.Pm[i] - pe
        pcoi = pcoi + p.Pm[i] - pe
    for i in range(n):
        out[i] = x[n + i]
        out[n + i] = (-p.D[i] * x[n + i] + out[n + i] - p.M[i] / p.MT * pcoi) / p.M[i]


cdef void _jac(Model* p, const double* x, double* J) noexcept nogil:
    cdef int n = p.n, m = p.m, N = p.N, k, l, i, c
    cdef int iv0 = 2 * n, it0 = 2 * n + m
    cdef const double* V = x + 2 * n
    cdef const double* th = x + 2 * n + m
    cdef double g, b, a, ca, sa, idd, iq, cd, sd, ire, iim, tre, tim, coef
    cdef double rre, rim, dre, dim, s
    cdef Py_ssize_t kb
    _mismatch(p, x)
    for k in range(m * N):
        p.dFre[k] = 0.0
        p.dFim[k] = 0.0
    for k in range(n * N):
        p.dpe[k] = 0.0
    for k in range(N * N):
        J[k] = 0.0
    for k in range(m):
        for l in range(m):
            g = p.G[k * m + l]
            b = p.B[k * m + l]
            p.dFre[k * N + iv0 + l] = -(g * p.cth[l] - b * p.sth[l])
            p.dFim[k * N + iv0 + l] = -(g * p.sth[l] + b * p.cth[l])
            p.dFre[k * N + it0 + l] = V[l] * (g * p.sth[l] + b * p.cth[l])
            p.dFim[k * N + it0 + l] = -V[l] * (g * p.cth[l] - b * p.sth[l])
    for i in range(n):
        kb = p.gb[i]
        a = x[i] - th[kb]
        ca = cos(a)
        sa = sin(a)
        idd = (p.E[i] - V[kb] * ca) / p.Xd[i]
        iq = V[kb] * sa / p.Xq[i]
        cd = cos(x[i])
        sd = sin(x[i])
        ire = cd * iq + sd * idd
        iim = sd * iq - cd * idd
        # t = V ca / Xq - j V sa / Xd ; e^{jd} * t
        tre = cd * (V[kb] * ca / p.Xq[i]) + sd * (V[kb] * sa / p.Xd[i])
        tim = sd * (V[kb] * ca / p.Xq[i]) - cd * (V[kb] * sa / p.Xd[i])
        p.dFre[kb * N + i] += -iim + tre
        p.dFim[kb * N + i] += ire + tim
        p.dFre[kb * N + it0 + kb] += -tre
        p.dFim[kb * N + it0 + kb] += -tim
        # e^{jd} * (sa / Xq + j ca / Xd)
        p.dFre[kb * N + iv0 + kb] += cd * sa / p.Xq[i] - sd * ca / p.Xd[i]
        p.dFim[kb * N + iv0 + kb] += sd * sa / p.Xq[i] + cd * ca / p.Xd[i]
        coef = p.E[i] / p.Xd[i]
        p.dpe[i * N + i] = coef * V[kb] * ca
        p.dpe[i * N + it0 + kb] = -coef * V[kb] * ca
        p.dpe[i * N + iv0 + kb] = coef * sa
    for k in range(m):
        rre = p.cth[k] * p.Fre[k] + p.sth[k] * p.Fim[k]
        rim = p.cth[k] * p.Fim[k] - p.sth[k] * p.Fre[k]
        for c in range(N):
            dre = p.cth[k] * p.dFre[k * N + c] + p.sth[k] * p.dFim[k * N + c]
            dim = p.cth[k] * p.dFim[k * N + c] - p.sth[k] * p.dFre[k * N + c]
            if c == it0 + k:
                dre = dre + rim
                dim = dim - rre
            J[(iv0 + k) * N + c] = -dim / p.eps
            J[(it0 + k) * N + c] = dre / (p.eps * V[k])
        J[(it0 + k) * N + iv0 + k] += -rre / (p.eps * V[k] * V[k])
    for c in range(N):
        s = 0.0
        for i in range(n):
            s = s + p.dpe[i * N + c]
        for i in range(n):
            J[(n + i) * N + c] = -p.dpe[i * N + c] / p.M[i] + s / p.MT
    for i in range(n):
        J[i * N + n + i] = 1.0
        J[(n + i) * N + n + i] += -p.D[i] / p.M[i]


cdef struct Work:
    double* f0
    double* J
    double* A
    double* G
    double* x
    double* base
    double* xT
    double* xE
    double* xn
    int* ipiv


cdef int _factor(Model* p, const double* J, double hc, double* A, int* ipiv) noexcept nogil:
    cdef int N = p.N, k, info = 0
    for k in range(N * N):
        A[k] = -hc * J[k]
    for k in range(N):
        A[k * N + k] += 1.0
    dgetrf(&N, &N, A, &N, ipiv, &info)
    return info


cdef int _solve(Model* p, double* A, int* ipiv, double* rhs) noexcept nogil:
    cdef int N = p.N, one = 1, info = 0
    cdef char trans = b'T'
    dgetrs(&trans, &N, &one, A, &N, ipiv, rhs, &N, &info)
    return info


cdef int _newton(Model* p, Work* w, const double* x0, double h, int scheme,
                 double ntol, int max_newton, double* out) noexcept nogil:
    """Modified Newton for one implicit step; returns iterations (>0) or -1 on failure."""
    cdef int N = p.N, k, it
    cdef double c = 0.5 if scheme == TRAPEZOIDAL else 1.0
    cdef double nrm, prev = INFINITY, v
    cdef bint refreshed = False
    if _factor(p, w.J, h * c, w.A, w.ipiv) != 0:
        return -1
    for k in range(N):
        out[k] = x0[k]
        w.base[k] = x0[k] + h * (1.0 - c) * w.f0[k]
    for it in range(1, max_newton + 1):
        _rhs(p, out, w.G)
        for k in range(N):
            w.G[k] = -(out[k] - w.base[k] - h * c * w.G[k])
        if _solve(p, w.A, w.ipiv, w.G) != 0:
            return -1
        nrm = 0.0
        for k in range(N):
            out[k] += w.G[k]
            v = fabs(w.G[k])
            if not isfinite(v):
                return -1
            if v > nrm:
                nrm = v
        if nrm <= ntol:
            return it
        if it >= 2 and nrm > 0.5 * prev and not refreshed:
            # w.J is restored by the caller before the next scheme uses it
            _jac(p, out, w.x)
            if _factor(p, w.x, h * c, w.A, w.ipiv) != 0:
                return -1
            refreshed = True
        prev = nrm
    return -1


cdef int _verdict(Model* p, const double* x, const double* target, bint has_target,
                  double radius, double blowup) noexcept nogil:
    cdef int n = p.n, N = p.N, k, i
    cdef double d, s = 0.0, mx = 0.0, kk, mean
    cdef bint any_k = False
    for k in range(N):
        if not isfinite(x[k]):
            return SOLVER_FAILURE
    for i in range(n):
        if fabs(x[i]) > mx:
            mx = fabs(x[i])
    if mx > blowup:
        return DIVERGED
    if not has_target:
        return -1
    for k in range(2 * n):
        d = x[k] - target[k]
        s = s + d * d
    if sqrt(s) < radius:
        return CONVERGED
    # nearest 2*pi image of the target
    mean = 0.0
    for i in range(1, n):
        kk = cround(((x[i] - x[0]) - (target[i] - target[0])) / TWO_PI)
        if kk != 0.0:
            any_k = True
        mean = mean + p.M[i] * TWO_PI * kk
    if not any_k:
        return -1
    mean = mean / p.MT
    s = 0.0
    for i in range(n):
        if i == 0:
            d = x[i] - target[i] + mean
        else:
            kk = cround(((x[i] - x[0]) - (target[i] - target[0])) / TWO_PI)
            d = x[i] - target[i] - (TWO_PI * kk - mean)
        s = s + d * d
    for i in range(n, 2 * n):
        d = x[i] - target[i]
        s = s + d * d
    if sqrt(s) < radius:
        return ELSEWHERE
    return -1


def rhs(model, x):
    cdef _Holder hold = _Holder(model)
    cdef cnp.ndarray[double, ndim=1, mode="c"] xx = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] out = np.empty(hold.mdl.N)
    _rhs(&hold.mdl, &xx[0], &out[0])
    return out


def jac(model, x):
    cdef _Holder hold = _Holder(model)
    cdef int N = hold.mdl.N
    cdef cnp.ndarray[double, ndim=1, mode="c"] xx = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] out = np.empty((N, N))
    _jac(&hold.mdl, &xx[0], &out[0, 0])
    return out


cdef class _Buffers:
    cdef Work w
    cdef object keep

    def __cinit__(self, int N):
        f0 = np.empty(N); J = np.empty(N * N); A = np.empty(N * N); G = np.empty(N)
        x = np.empty(N * N); base = np.empty(N); xT = np.empty(N); xE = np.empty(N); xn = np.empty(N)
        ipiv = np.empty(N, dtype=np.intc)
        self.keep = (f0, J, A, G, x, base, xT, xE, xn, ipiv)
        self.w.f0 = <double*> cnp.PyArray_DATA(f0)
        self.w.J = <double*> cnp.PyArray_DATA(J)
        self.w.A = <double*> cnp.PyArray_DATA(A)
        self.w.G = <double*> cnp.PyArray_DATA(G)
        self.w.x = <double*> cnp.PyArray_DATA(x)
        self.w.base = <double*> cnp.PyArray_DATA(base)
        self.w.xT = <double*> cnp.PyArray_DATA(xT)
        self.w.xE = <double*> cnp.PyArray_DATA(xE)
        self.w.xn = <double*> cnp.PyArray_DATA(xn)
        self.w.ipiv = <int*> cnp.PyArray_DATA(ipiv)


def step(model, x0, double h, int scheme, double newton_tol=1e-9, int max_newton=10):
    cdef _Holder hold = _Holder(model)
    cdef int N = hold.mdl.N
    cdef _Buffers buf = _Buffers(N)
    cdef cnp.ndarray[double, ndim=1, mode="c"] xx = np.ascontiguousarray(x0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] out = np.empty(N)
    cdef int it
    _rhs(&hold.mdl, &xx[0], buf.w.f0)
    _jac(&hold.mdl, &xx[0], buf.w.J)
    it = _newton(&hold.mdl, &buf.w, &xx[0], h, scheme, newton_tol, max_newton, &out[0])
    return out, it > 0, (it if it > 0 else max_newton)


def run(model, x0, target, cfg, bint record):
    """See ``_pykernel.run`` for the contract."""
    cdef double h0, hmin, hmax, ntol, ltol, T, radius, blowup, grow
    cdef int grow_after, max_newton
    h0, hmin, hmax, ntol, ltol, T, radius, blowup, grow_after, grow, max_newton = cfg
    cdef _Holder hold = _Holder(model)
    cdef Model* p = &hold.mdl
    cdef int N = p.N, k
    cdef _Buffers buf = _Buffers(N)
    cdef Work* w = &buf.w
    cdef cnp.ndarray[double, ndim=1, mode="c"] x = np.array(x0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] tg
    cdef bint has_target = target is not None
    if has_target:
        tg = np.ascontiguousarray(target, dtype=np.float64)
    else:
        tg = np.zeros(N)
    cdef double t = 0.0, h = h0, hh, err, sc, a
    cdef int accepted = 0, rejected = 0, ie_steps = 0, succ = 0, itT, itE, reason
    cdef bint fallback = False, ok, stepped
    cdef double* xp = &x[0]
    cdef double* tp = &tg[0]
    times = [0.0] if record else None
    states = [x.copy()] if record else None

    reason = _verdict(p, xp, tp, has_target, radius, blowup)
    while reason < 0:
        stepped = False
        with nogil:
            while True:
                if T - t < hmin:
                    reason = HORIZON
                    break
                hh = h if h < T - t else T - t
                _rhs(p, xp, w.f0)
                _jac(p, xp, w.J)
                itT = _newton(p, w, xp, hh, TRAPEZOIDAL, ntol, max_newton, w.xT)
                itE = _newton(p, w, xp, hh, IMPLICIT_EULER, ntol, max_newton, w.xE)
                ok = False
                if itT > 0 and itE > 0:
                    err = 0.0
                    for k in range(N):
                        a = fabs(xp[k])
                        if fabs(w.xT[k]) > a:
                            a = fabs(w.xT[k])
                        sc = fabs(w.xT[k] - w.xE[k]) / (ltol * (1.0 + a))
                        if sc > err:
                            err = sc
                    if err <= 1.0:
                        ok = True
                        if fallback:
                            for k in range(N):
                                w.xn[k] = w.xE[k]
                        else:
                            for k in range(N):
                                w.xn[k] = w.xT[k]
                elif fallback and itE > 0:
                    ok = True
                    for k in range(N):
                        w.xn[k] = w.xE[k]
                if not ok:
                    rejected += 1
                    succ = 0
                    fallback = True
                    h = 0.5 * hh
                    if h < hmin:
                        reason = SOLVER_FAILURE
                        break
                    continue
                if fallback:
                    ie_steps += 1
                fallback = False
                t += hh
                for k in range(N):
                    xp[k] = w.xn[k]
                accepted += 1
                stepped = True
                succ += 1
                if succ >= grow_after:
                    h = h * grow
                    if h > hmax:
                        h = hmax
                    succ = 0
                reason = _verdict(p, xp, tp, has_target, radius, blowup)
                if reason >= 0 or record:
                    break
        if record and stepped:
            times.append(t)
            states.append(x.copy())
    if record:
        return t, x, reason, accepted, rejected, ie_steps, np.array(times), np.array(states)
    return t, x, reason, accepted, rejected, ie_steps, None, None
