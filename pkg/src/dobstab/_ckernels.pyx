# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for planar serial arms (n <= 3).

Same API and numerics as ``_pykernels``; all hot loops run on fixed-size
C arrays without the GIL.
"""

import numpy as np

from libc.math cimport sin, cos, tanh, sqrt, isfinite

BACKEND = "cython"

cdef enum:
    NMAX = 3


cdef inline double _sign(double x) nogil:
    if x > 0:
        return 1.0
    if x < 0:
        return -1.0
    return 0.0


cdef class PlanarArm:
    cdef public int n
    cdef double lever[NMAX][NMAX]
    cdef double mass[NMAX]
    cdef double inert[NMAX]
    cdef double visc[NMAX]
    cdef double coul[NMAX]
    cdef double arm[NMAX]
    cdef public double gravity
    cdef public double coulomb_eps
    cdef public object lengths, masses, com, inertia, viscous, coulomb, armature

    def __init__(self, lengths, masses, com, inertia, gravity, viscous, coulomb,
                 coulomb_eps, armature):
        self.lengths = np.ascontiguousarray(lengths, dtype=float)
        self.masses = np.ascontiguousarray(masses, dtype=float)
        self.com = np.ascontiguousarray(com, dtype=float)
        self.inertia = np.ascontiguousarray(inertia, dtype=float)
        self.viscous = np.ascontiguousarray(viscous, dtype=float)
        self.coulomb = np.ascontiguousarray(coulomb, dtype=float)
        self.armature = np.ascontiguousarray(armature, dtype=float)
        self.gravity = float(gravity)
        self.coulomb_eps = float(coulomb_eps)
        self.n = len(self.lengths)
        if self.n < 1 or self.n > NMAX:
            raise ValueError("compiled kernels support 1..3 links")
        cdef int i, a
        for i in range(NMAX):
            for a in range(NMAX):
                self.lever[i][a] = 0.0
        for i in range(self.n):
            for a in range(i):
                self.lever[i][a] = self.lengths[a]
            self.lever[i][i] = self.com[i]
            self.mass[i] = self.masses[i]
            self.inert[i] = self.inertia[i]
            self.visc[i] = self.viscous[i]
            self.coul[i] = self.coulomb[i]
            self.arm[i] = self.armature[i]

    # -- C-level kernels ---------------------------------------------------

    cdef void _trig(self, const double* q, double* s, double* c) noexcept nogil:
        cdef double th = 0.0
        cdef int i
        for i in range(self.n):
            th += q[i]
            s[i] = sin(th)
            c[i] = cos(th)

    cdef void _mass(self, const double* q, double* M) noexcept nogil:
        cdef int n = self.n
        cdef double s[NMAX]
        cdef double c[NMAX]
        cdef double Jx[NMAX]
        cdef double Jy[NMAX]
        cdef int i, j, k, a
        self._trig(q, s, c)
        for j in range(n * n):
            M[j] = 0.0
        for j in range(n):
            M[j * n + j] = self.arm[j]
        for i in range(n):
            for j in range(n):
                Jx[j] = 0.0
                Jy[j] = 0.0
            for j in range(i + 1):
                for a in range(j, i + 1):
                    Jx[j] -= self.lever[i][a] * s[a]
                    Jy[j] += self.lever[i][a] * c[a]
            for j in range(i + 1):
                for k in range(i + 1):
                    M[j * n + k] += self.mass[i] * (Jx[j] * Jx[k] + Jy[j] * Jy[k]) + self.inert[i]

    cdef void _partials(self, const double* q, double* dM) noexcept nogil:
        # dM[p*n*n + j*n + k] = d M_jk / d q_p
        cdef int n = self.n
        cdef double s[NMAX]
        cdef double c[NMAX]
        cdef double Jx[NMAX]
        cdef double Jy[NMAX]
        cdef double dJx[NMAX]
        cdef double dJy[NMAX]
        cdef int i, j, k, a, p, lo
        self._trig(q, s, c)
        for j in range(n * n * n):
            dM[j] = 0.0
        for i in range(n):
            for j in range(n):
                Jx[j] = 0.0
                Jy[j] = 0.0
            for j in range(i + 1):
                for a in range(j, i + 1):
                    Jx[j] -= self.lever[i][a] * s[a]
                    Jy[j] += self.lever[i][a] * c[a]
            for p in range(i + 1):
                for j in range(n):
                    dJx[j] = 0.0
                    dJy[j] = 0.0
                for j in range(i + 1):
                    lo = j if j > p else p
                    for a in range(lo, i + 1):
                        dJx[j] -= self.lever[i][a] * c[a]
                        dJy[j] -= self.lever[i][a] * s[a]
                for j in range(i + 1):
                    for k in range(i + 1):
                        dM[p * n * n + j * n + k] += self.mass[i] * (
                            dJx[j] * Jx[k] + dJy[j] * Jy[k] + Jx[j] * dJx[k] + Jy[j] * dJy[k])

    cdef void _coriolis(self, const double* q, const double* qd, double* C) noexcept nogil:
        cdef int n = self.n
        cdef double dM[NMAX * NMAX * NMAX]
        cdef int j, k, p
        cdef double acc
        self._partials(q, dM)
        for j in range(n):
            for k in range(n):
                acc = 0.0
                for p in range(n):
                    acc += (dM[p * n * n + j * n + k] + dM[k * n * n + j * n + p]
                            - dM[j * n * n + k * n + p]) * qd[p]
                C[j * n + k] = 0.5 * acc

    cdef void _gravity(self, const double* q, double* g) noexcept nogil:
        cdef int n = self.n
        cdef double s[NMAX]
        cdef double c[NMAX]
        cdef int i, j, a
        for j in range(n):
            g[j] = 0.0
        if self.gravity == 0.0:
            return
        self._trig(q, s, c)
        for i in range(n):
            for j in range(i + 1):
                for a in range(j, i + 1):
                    g[j] += self.mass[i] * self.gravity * self.lever[i][a] * c[a]

    cdef void _friction(self, const double* qd, double* f) noexcept nogil:
        cdef int j
        for j in range(self.n):
            if self.coulomb_eps > 0.0:
                f[j] = self.visc[j] * qd[j] + self.coul[j] * tanh(qd[j] / self.coulomb_eps)
            else:
                f[j] = self.visc[j] * qd[j] + self.coul[j] * _sign(qd[j])

    cdef void _bias(self, const double* q, const double* qd, double* b) noexcept nogil:
        cdef int n = self.n
        cdef double C[NMAX * NMAX]
        cdef double g[NMAX]
        cdef double f[NMAX]
        cdef int j, k
        self._coriolis(q, qd, C)
        self._gravity(q, g)
        self._friction(qd, f)
        for j in range(n):
            b[j] = g[j] + f[j]
            for k in range(n):
                b[j] += C[j * n + k] * qd[k]

    cdef void _fdyn(self, const double* q, const double* qd, const double* tau,
                    const double* load, double* qdd) noexcept nogil:
        cdef int n = self.n
        cdef double M[NMAX * NMAX]
        cdef double L[NMAX * NMAX]
        cdef double b[NMAX]
        cdef double y[NMAX]
        cdef int i, j, k
        cdef double acc
        self._mass(q, M)
        self._bias(q, qd, b)
        for i in range(n):
            b[i] = tau[i] - load[i] - b[i]
        # Cholesky M = L L'
        for i in range(n * n):
            L[i] = 0.0
        for j in range(n):
            acc = M[j * n + j]
            for k in range(j):
                acc -= L[j * n + k] * L[j * n + k]
            L[j * n + j] = sqrt(acc)
            for i in range(j + 1, n):
                acc = M[i * n + j]
                for k in range(j):
                    acc -= L[i * n + k] * L[j * n + k]
                L[i * n + j] = acc / L[j * n + j]
        for i in range(n):
            acc = b[i]
            for k in range(i):
                acc -= L[i * n + k] * y[k]
            y[i] = acc / L[i * n + i]
        for i in range(n - 1, -1, -1):
            acc = y[i]
            for k in range(i + 1, n):
                acc -= L[k * n + i] * qdd[k]
            qdd[i] = acc / L[i * n + i]

    # -- Python API ----------------------------------------------------------

    def mass_matrix(self, q):
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        out = np.empty((self.n, self.n))
        cdef double[:, ::1] o = out
        self._mass(&qv[0], &o[0, 0])
        return out

    def mass_matrix_partials(self, q):
        """Return ``dM`` with ``dM[p] = dM/dq_p``."""
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        out = np.empty((self.n, self.n, self.n))
        cdef double[:, :, ::1] o = out
        self._partials(&qv[0], &o[0, 0, 0])
        return out

    def coriolis_matrix(self, q, qd):
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        cdef double[::1] qdv = np.ascontiguousarray(qd, dtype=float)
        out = np.empty((self.n, self.n))
        cdef double[:, ::1] o = out
        self._coriolis(&qv[0], &qdv[0], &o[0, 0])
        return out

    def gravity_vector(self, q):
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        out = np.empty(self.n)
        cdef double[::1] o = out
        self._gravity(&qv[0], &o[0])
        return out

    def potential_energy(self, q):
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        cdef double s[NMAX]
        cdef double c[NMAX]
        cdef double U = 0.0, y
        cdef int i, a
        self._trig(&qv[0], s, c)
        for i in range(self.n):
            y = 0.0
            for a in range(i + 1):
                y += self.lever[i][a] * s[a]
            U += self.mass[i] * self.gravity * y
        return U

    def friction_torque(self, qd):
        cdef double[::1] qdv = np.ascontiguousarray(qd, dtype=float)
        out = np.empty(self.n)
        cdef double[::1] o = out
        self._friction(&qdv[0], &o[0])
        return out

    def bias_torque(self, q, qd):
        """``C(q, qd) qd + g(q) + tau_fric(qd)``."""
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        cdef double[::1] qdv = np.ascontiguousarray(qd, dtype=float)
        out = np.empty(self.n)
        cdef double[::1] o = out
        self._bias(&qv[0], &qdv[0], &o[0])
        return out

    def forward_dynamics(self, q, qd, tau, tau_load):
        cdef double[::1] qv = np.ascontiguousarray(q, dtype=float)
        cdef double[::1] qdv = np.ascontiguousarray(qd, dtype=float)
        cdef double[::1] tv = np.ascontiguousarray(tau, dtype=float)
        cdef double[::1] lv = np.ascontiguousarray(tau_load, dtype=float)
        out = np.empty(self.n)
        cdef double[::1] o = out
        self._fdyn(&qv[0], &qdv[0], &tv[0], &lv[0], &o[0])
        return out


cdef class ClosedLoop:
    """Plant + DOb + PD loop as one ODE right-hand side.

    State layout (blocks of n): q, qd, w, z, qd_des, int_e.
    """

    cdef public PlanarArm arm
    cdef public int n
    cdef double _mn[NMAX * NMAX]
    cdef double g_dob_c[NMAX]
    cdef double kd_c[NMAX]
    cdef double kp_c[NMAX]
    cdef double tmax[NMAX]
    cdef public double g_v
    cdef public object Mn_arr, g_dob, kd, kp, tau_max

    def __init__(self, PlanarArm arm, Mn, g_dob, kd, kp, g_v, tau_max):
        self.arm = arm
        self.n = arm.n
        self.Mn_arr = np.ascontiguousarray(Mn, dtype=float)
        self.g_dob = np.ascontiguousarray(g_dob, dtype=float)
        self.kd = np.ascontiguousarray(kd, dtype=float)
        self.kp = np.ascontiguousarray(kp, dtype=float)
        self.tau_max = np.ascontiguousarray(tau_max, dtype=float)
        self.g_v = float(g_v)
        cdef int i, j, n = self.n
        for i in range(n):
            for j in range(n):
                self._mn[i * n + j] = self.Mn_arr[i, j]
            self.g_dob_c[i] = self.g_dob[i]
            self.kd_c[i] = self.kd[i]
            self.kp_c[i] = self.kp[i]
            self.tmax[i] = self.tau_max[i]

    @property
    def Mn(self):
        return self.Mn_arr

    cdef void _controller(self, const double* x, const double* qr, const double* qdr,
                          const double* qddr, const double* noise, double* tau, double* tau_des,
                          double* tau_hat, double* qdd_des, double* v, double* zdot) noexcept nogil:
        cdef int n = self.n
        cdef const double* q = x
        cdef const double* qd = x + n
        cdef const double* w = x + 2 * n
        cdef const double* z = x + 3 * n
        cdef double qm[NMAX]
        cdef double mv
        cdef int i, k
        for i in range(n):
            qm[i] = q[i] + noise[i]
            if self.g_v > 0.0:
                v[i] = self.g_v * (qm[i] - z[i])
                zdot[i] = v[i]
            else:
                v[i] = qd[i]
                zdot[i] = 0.0
        for i in range(n):
            qdd_des[i] = qddr[i] - self.kd_c[i] * (v[i] - qdr[i]) - self.kp_c[i] * (qm[i] - qr[i])
        for i in range(n):
            tau_des[i] = 0.0
            mv = 0.0
            for k in range(n):
                tau_des[i] += self._mn[i * n + k] * qdd_des[k]
                mv += self._mn[i * n + k] * v[k]
            tau_hat[i] = w[i] - self.g_dob_c[i] * mv
            tau[i] = tau_des[i] + tau_hat[i]
            if tau[i] > self.tmax[i]:
                tau[i] = self.tmax[i]
            elif tau[i] < -self.tmax[i]:
                tau[i] = -self.tmax[i]

    cdef void _rhs(self, const double* x, const double* r, const double* load,
                   const double* noise, double* dx) noexcept nogil:
        # r points at a (3, n) row block: q_ref, qd_ref, qdd_ref
        cdef int n = self.n
        cdef double tau[NMAX]
        cdef double tau_des[NMAX]
        cdef double tau_hat[NMAX]
        cdef double v[NMAX]
        cdef int i
        self._controller(x, r, r + n, r + 2 * n, noise, tau, tau_des, tau_hat,
                         dx + 4 * n, v, dx + 3 * n)
        self.arm._fdyn(x, x + n, tau, load, dx + n)
        for i in range(n):
            dx[i] = x[n + i]
            dx[2 * n + i] = self.g_dob_c[i] * tau_des[i]
            dx[5 * n + i] = x[i] - r[i]

    def controller(self, x, q_ref, qd_ref, qdd_ref, noise):
        """Return ``(tau, tau_des, tau_hat, qdd_des, v_est, zdot)``."""
        n = self.n
        cdef double[::1] xv = np.ascontiguousarray(x, dtype=float)
        cdef double[::1] a = np.ascontiguousarray(q_ref, dtype=float)
        cdef double[::1] b = np.ascontiguousarray(qd_ref, dtype=float)
        cdef double[::1] c = np.ascontiguousarray(qdd_ref, dtype=float)
        cdef double[::1] nz = np.ascontiguousarray(noise, dtype=float)
        out = np.empty((6, n))
        cdef double[:, ::1] o = out
        self._controller(&xv[0], &a[0], &b[0], &c[0], &nz[0], &o[0, 0], &o[1, 0], &o[2, 0],
                         &o[3, 0], &o[4, 0], &o[5, 0])
        return tuple(out[i].copy() for i in range(6))

    def rhs(self, x, q_ref, qd_ref, qdd_ref, tau_load, noise):
        n = self.n
        cdef double[::1] xv = np.ascontiguousarray(x, dtype=float)
        r = np.concatenate([np.asarray(q_ref, dtype=float), np.asarray(qd_ref, dtype=float),
                            np.asarray(qdd_ref, dtype=float)])
        cdef double[::1] rv = r
        cdef double[::1] lv = np.ascontiguousarray(tau_load, dtype=float)
        cdef double[::1] nz = np.ascontiguousarray(noise, dtype=float)
        out = np.empty(6 * n)
        cdef double[::1] o = out
        self._rhs(&xv[0], &rv[0], &lv[0], &nz[0], &o[0])
        return out

    def plant_rhs(self, x, tau, tau_load, q_ref):
        """Plant-only derivative with a held torque (sampled-data mode)."""
        cdef int n = self.n
        cdef double[::1] xv = np.ascontiguousarray(x, dtype=float)
        cdef double[::1] tv = np.ascontiguousarray(tau, dtype=float)
        cdef double[::1] lv = np.ascontiguousarray(tau_load, dtype=float)
        cdef double[::1] qr = np.ascontiguousarray(q_ref, dtype=float)
        out = np.zeros(6 * n)
        cdef double[::1] o = out
        cdef int i
        self.arm._fdyn(&xv[0], &xv[n], &tv[0], &lv[0], &o[n])
        for i in range(n):
            o[i] = xv[n + i]
            o[5 * n + i] = xv[i] - qr[i]
        return out


def integrate(ClosedLoop loop, x0, double dt, Py_ssize_t n_steps, ref_table, load_table,
              noise_table, double threshold, out, int method):
    """Fixed-step integration of the continuous closed loop.

    Tables are sampled every dt/2 (noise once per step); states go to
    ``out[0..k]``. Returns the number of completed steps.
    """
    cdef int n = loop.n
    cdef int m = 6 * n
    cdef double[:, :, ::1] R = np.ascontiguousarray(ref_table, dtype=float)
    cdef double[:, ::1] Ld = np.ascontiguousarray(load_table, dtype=float)
    cdef double[:, ::1] Nz = np.ascontiguousarray(noise_table, dtype=float)
    cdef double[:, ::1] O = out
    cdef double x[6 * NMAX]
    cdef double xt[6 * NMAX]
    cdef double k1[6 * NMAX]
    cdef double k2[6 * NMAX]
    cdef double k3[6 * NMAX]
    cdef double k4[6 * NMAX]
    cdef double[::1] xv0 = np.ascontiguousarray(x0, dtype=float)
    cdef Py_ssize_t k, j
    cdef int i
    cdef double err, d
    cdef bint bad
    cdef Py_ssize_t done = n_steps
    if R.shape[0] < 2 * n_steps + 1 or Ld.shape[0] < 2 * n_steps + 1 or Nz.shape[0] < n_steps:
        raise ValueError("input tables are shorter than the requested horizon")
    if O.shape[0] < n_steps + 1 or O.shape[1] != m:
        raise ValueError("output buffer has the wrong shape")
    for i in range(m):
        x[i] = xv0[i]
        O[0, i] = x[i]
    with nogil:
        for k in range(n_steps):
            j = 2 * k
            if method == 0:
                loop._rhs(x, &R[j, 0, 0], &Ld[j, 0], &Nz[k, 0], k1)
                for i in range(m):
                    xt[i] = x[i] + 0.5 * dt * k1[i]
                loop._rhs(xt, &R[j + 1, 0, 0], &Ld[j + 1, 0], &Nz[k, 0], k2)
                for i in range(m):
                    xt[i] = x[i] + 0.5 * dt * k2[i]
                loop._rhs(xt, &R[j + 1, 0, 0], &Ld[j + 1, 0], &Nz[k, 0], k3)
                for i in range(m):
                    xt[i] = x[i] + dt * k3[i]
                loop._rhs(xt, &R[j + 2, 0, 0], &Ld[j + 2, 0], &Nz[k, 0], k4)
                for i in range(m):
                    x[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            else:
                loop._rhs(x, &R[j, 0, 0], &Ld[j, 0], &Nz[k, 0], k1)
                for i in range(m):
                    x[i] = x[i] + dt * k1[i]
            bad = False
            for i in range(m):
                O[k + 1, i] = x[i]
                if not isfinite(x[i]):
                    bad = True
            if bad:
                done = k + 1
                break
            err = 0.0
            for i in range(n):
                d = x[i] - R[j + 2, 0, i]
                err += d * d
            if sqrt(err) > threshold:
                done = k + 1
                break
    return done
