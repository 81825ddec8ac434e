"""Pure-Python/numpy kernels for planar serial arms.

Mirrors the API of the compiled ``_ckernels`` module exactly; the backend
selector in :mod:`dobstab._backend` picks one of the two at import.

Joint angles are relative; link ``i`` has absolute angle
``theta_i = q_0 + ... + q_i``. The center of mass of link ``i`` sits at
``sum_{a<i} l_a u(theta_a) + c_i u(theta_i)`` with ``u = (cos, sin)``.
"""

import numpy as np

BACKEND = "python"


class PlanarArm:
    """Inertial parameters of a planar n-link revolute arm."""

    def __init__(self, lengths, masses, com, inertia, gravity,
                 viscous, coulomb, coulomb_eps, armature):
        self.lengths = np.ascontiguousarray(lengths, dtype=float)
        self.masses = np.ascontiguousarray(masses, dtype=float)
        self.com = np.ascontiguousarray(com, dtype=float)
        self.inertia = np.ascontiguousarray(inertia, dtype=float)
        self.gravity = float(gravity)
        self.viscous = np.ascontiguousarray(viscous, dtype=float)
        self.coulomb = np.ascontiguousarray(coulomb, dtype=float)
        self.coulomb_eps = float(coulomb_eps)
        self.armature = np.ascontiguousarray(armature, dtype=float)
        self.n = len(self.lengths)
        n = self.n
        # lever[i, a]: distance used for segment a in the COM position of link i
        lever = np.zeros((n, n))
        for i in range(n):
            lever[i, :i] = self.lengths[:i]
            lever[i, i] = self.com[i]
        self._lever = lever

    def _angles(self, q):
        return np.cumsum(np.asarray(q, dtype=float))

    def mass_matrix(self, q):
        n = self.n
        th = self._angles(q)
        M = np.diag(self.armature)
        for i in range(n):
            J = self._com_jacobian(i, th)
            M += self.masses[i] * (J.T @ J)
            M[: i + 1, : i + 1] += self.inertia[i]
        return M

    def _com_jacobian(self, i, th):
        n = self.n
        r = self._lever[i]
        J = np.zeros((2, n))
        for j in range(i + 1):
            seg = slice(j, i + 1)
            J[0, j] = -np.sum(r[seg] * np.sin(th[seg]))
            J[1, j] = np.sum(r[seg] * np.cos(th[seg]))
        return J

    def mass_matrix_partials(self, q):
        """Return ``dM`` with ``dM[p] = dM/dq_p``."""
        n = self.n
        th = self._angles(q)
        dM = np.zeros((n, n, n))
        for i in range(n):
            J = self._com_jacobian(i, th)
            r = self._lever[i]
            for p in range(i + 1):
                dJ = np.zeros((2, n))
                for j in range(i + 1):
                    seg = slice(max(j, p), i + 1)
                    dJ[0, j] = -np.sum(r[seg] * np.cos(th[seg]))
                    dJ[1, j] = -np.sum(r[seg] * np.sin(th[seg]))
                dM[p] += self.masses[i] * (dJ.T @ J + J.T @ dJ)
        return dM

    def coriolis_matrix(self, q, qd):
        qd = np.asarray(qd, dtype=float)
        dM = self.mass_matrix_partials(q)
        # Christoffel symbols of the first kind:
        # C_jk = sum_p 1/2 (dM_jk/dq_p + dM_jp/dq_k - dM_kp/dq_j) qd_p
        a = np.einsum("pjk,p->jk", dM, qd)
        b = np.einsum("kjp,p->jk", dM, qd)
        c = np.einsum("jkp,p->jk", dM, qd)
        return 0.5 * (a + b - c)

    def gravity_vector(self, q):
        n = self.n
        if self.gravity == 0.0:
            return np.zeros(n)
        th = self._angles(q)
        cos_th = np.cos(th)
        g = np.zeros(n)
        for i in range(n):
            r = self._lever[i]
            for j in range(i + 1):
                g[j] += self.masses[i] * self.gravity * np.sum(r[j:i + 1] * cos_th[j:i + 1])
        return g

    def potential_energy(self, q):
        th = self._angles(q)
        U = 0.0
        for i in range(self.n):
            y = np.sum(self._lever[i, : i + 1] * np.sin(th[: i + 1]))
            U += self.masses[i] * self.gravity * y
        return U

    def friction_torque(self, qd):
        qd = np.asarray(qd, dtype=float)
        tau = self.viscous * qd
        if self.coulomb_eps > 0.0:
            tau = tau + self.coulomb * np.tanh(qd / self.coulomb_eps)
        else:
            tau = tau + self.coulomb * np.sign(qd)
        return tau

    def bias_torque(self, q, qd):
        """``C(q, qd) qd + g(q) + tau_fric(qd)``."""
        qd = np.asarray(qd, dtype=float)
        return self.coriolis_matrix(q, qd) @ qd + self.gravity_vector(q) + self.friction_torque(qd)

    def forward_dynamics(self, q, qd, tau, tau_load):
        M = self.mass_matrix(q)
        rhs = np.asarray(tau, dtype=float) - np.asarray(tau_load, dtype=float) - self.bias_torque(q, qd)
        L = np.linalg.cholesky(M)
        y = _forward_sub(L, rhs)
        return _back_sub(L, y)


def _forward_sub(L, b):
    n = len(b)
    y = np.zeros(n)
    for i in range(n):
        y[i] = (b[i] - L[i, :i] @ y[:i]) / L[i, i]
    return y


def _back_sub(L, y):
    n = len(y)
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - L[i + 1:, i] @ x[i + 1:]) / L[i, i]
    return x


class ClosedLoop:
    """Plant + DOb + PD loop as one ODE right-hand side.

    State layout (blocks of n): q, qd, w, z, qd_des, int_e.
    ``w`` is the observer integrator, ``z`` the lagged position of the
    dirty-derivative filter, ``qd_des`` the integral of the desired
    acceleration and ``int_e`` the integral of the position error.
    """

    def __init__(self, arm, Mn, g_dob, kd, kp, g_v, tau_max):
        self.arm = arm
        self.n = arm.n
        self.Mn = np.ascontiguousarray(Mn, dtype=float)
        self.g_dob = np.ascontiguousarray(g_dob, dtype=float)
        self.kd = np.ascontiguousarray(kd, dtype=float)
        self.kp = np.ascontiguousarray(kp, dtype=float)
        self.g_v = float(g_v)
        self.tau_max = np.ascontiguousarray(tau_max, dtype=float)

    def controller(self, x, q_ref, qd_ref, qdd_ref, noise):
        """Return ``(tau, tau_des, tau_hat, qdd_des, v_est, zdot)``."""
        n = self.n
        q = x[:n]
        qd = x[n:2 * n]
        w = x[2 * n:3 * n]
        z = x[3 * n:4 * n]
        q_meas = q + noise
        if self.g_v > 0.0:
            v = self.g_v * (q_meas - z)
            zdot = v
        else:
            v = qd
            zdot = np.zeros(n)
        qdd_des = qdd_ref - self.kd * (v - qd_ref) - self.kp * (q_meas - q_ref)
        tau_des = self.Mn @ qdd_des
        tau_hat = w - self.g_dob * (self.Mn @ v)
        tau = np.clip(tau_des + tau_hat, -self.tau_max, self.tau_max)
        return tau, tau_des, tau_hat, qdd_des, v, zdot

    def rhs(self, x, q_ref, qd_ref, qdd_ref, tau_load, noise):
        n = self.n
        q = x[:n]
        qd = x[n:2 * n]
        tau, tau_des, _, qdd_des, _, zdot = self.controller(x, q_ref, qd_ref, qdd_ref, noise)
        qdd = self.arm.forward_dynamics(q, qd, tau, tau_load)
        return np.concatenate((qd, qdd, self.g_dob * tau_des, zdot, qdd_des, q - q_ref))

    def plant_rhs(self, x, tau, tau_load, q_ref):
        """Plant-only derivative with a held torque (sampled-data mode).

        Only the q, qd and int_e blocks are nonzero.
        """
        n = self.n
        q = x[:n]
        qd = x[n:2 * n]
        qdd = self.arm.forward_dynamics(q, qd, tau, tau_load)
        out = np.zeros(6 * n)
        out[:n] = qd
        out[n:2 * n] = qdd
        out[5 * n:] = q - q_ref
        return out


def integrate(loop, x0, dt, n_steps, ref_table, load_table, noise_table,
              threshold, out, method):
    """Fixed-step integration of the continuous closed loop.

    ``ref_table`` has shape (2*n_steps+1, 3, n), sampled every dt/2;
    ``load_table`` (2*n_steps+1, n) likewise; ``noise_table`` (n_steps, n)
    is held over each step. ``method`` is 0 for RK4, 1 for explicit Euler.
    States are written into ``out[0..k]``; returns the number of completed
    steps ``k``. Stops early when the state turns non-finite or the
    position error norm exceeds ``threshold``.
    """
    n = loop.n
    x = np.array(x0, dtype=float)
    out[0] = x
    for k in range(n_steps):
        j = 2 * k
        noise = noise_table[k]
        r0, r1, r2 = ref_table[j], ref_table[j + 1], ref_table[j + 2]
        if method == 0:
            k1 = loop.rhs(x, r0[0], r0[1], r0[2], load_table[j], noise)
            k2 = loop.rhs(x + 0.5 * dt * k1, r1[0], r1[1], r1[2], load_table[j + 1], noise)
            k3 = loop.rhs(x + 0.5 * dt * k2, r1[0], r1[1], r1[2], load_table[j + 1], noise)
            k4 = loop.rhs(x + dt * k3, r2[0], r2[1], r2[2], load_table[j + 2], noise)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            x = x + dt * loop.rhs(x, r0[0], r0[1], r0[2], load_table[j], noise)
        out[k + 1] = x
        if not np.all(np.isfinite(x)):
            return k + 1
        if np.linalg.norm(x[:n] - r2[0]) > threshold:
            return k + 1
    return n_steps
