"""numba kernel for ``sim.step_dynamics``.

Mirrors the numpy implementation operation for operation; the test suite
checks the two against each other.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _bilinear(heights, res, ox, oy, t, x, y):
    nx = heights.shape[1]
    ny = heights.shape[2]
    fx = min(max((x - ox) / res, 0.0), nx - 1.0)
    fy = min(max((y - oy) / res, 0.0), ny - 1.0)
    i0 = min(int(fx), nx - 2) if nx > 1 else 0
    j0 = min(int(fy), ny - 2) if ny > 1 else 0
    i1 = min(i0 + 1, nx - 1)
    j1 = min(j0 + 1, ny - 1)
    tx = fx - i0
    ty = fy - j0
    h00 = heights[t, i0, j0]
    h10 = heights[t, i1, j0]
    h01 = heights[t, i0, j1]
    h11 = heights[t, i1, j1]
    return (1 - tx) * ((1 - ty) * h00 + ty * h01) + tx * ((1 - ty) * h10 + ty * h11)


@njit(cache=True)
def physics_step(pos, quat, lin_vel, ang_vel, q, qd, contact, air, tau,
                 heights, res, origins, tidx, mount_pos, mount_yaw, links, qlo, qhi, prm,
                 o_pos, o_quat, o_lin, o_ang, o_q, o_qd, o_contact, o_air, o_td, o_tdair, o_force, o_div):
    """prm = [dt, mass, Ixx, Iyy, Izz, g, k_n, c_n, c_t, mu, I_joint, b_joint, max_speed, max_joint_speed]."""
    dt, mass = prm[0], prm[1]
    Ixx, Iyy, Izz = prm[2], prm[3], prm[4]
    grav, kn, cn, ct, mu = prm[5], prm[6], prm[7], prm[8], prm[9]
    Ij, bj, vmax, qdmax = prm[10], prm[11], prm[12], prm[13]
    lc, lf, lt = links[0], links[1], links[2]
    n = pos.shape[0]
    R = np.empty((3, 3))
    rw = np.empty(3)
    J = np.empty((3, 3))
    Jw = np.empty((3, 3))
    for e in range(n):
        w, x, y, z = quat[e, 0], quat[e, 1], quat[e, 2], quat[e, 3]
        R[0, 0] = 1 - 2 * (y * y + z * z)
        R[0, 1] = 2 * (x * y - w * z)
        R[0, 2] = 2 * (x * z + w * y)
        R[1, 0] = 2 * (x * y + w * z)
        R[1, 1] = 1 - 2 * (x * x + z * z)
        R[1, 2] = 2 * (y * z - w * x)
        R[2, 0] = 2 * (x * z - w * y)
        R[2, 1] = 2 * (y * z + w * x)
        R[2, 2] = 1 - 2 * (x * x + y * y)
        t = tidx[e]
        ox, oy = origins[t, 0], origins[t, 1]
        F0 = 0.0
        F1 = 0.0
        F2 = 0.0
        T0 = 0.0
        T1 = 0.0
        T2 = 0.0
        wx, wy, wz = ang_vel[e, 0], ang_vel[e, 1], ang_vel[e, 2]
        for l in range(6):
            q1, q2, q3 = q[e, 3 * l], q[e, 3 * l + 1], q[e, 3 * l + 2]
            c1, s1 = math.cos(q1), math.sin(q1)
            c2, s2 = math.cos(q2), math.sin(q2)
            c23, s23 = math.cos(q2 + q3), math.sin(q2 + q3)
            rho = lc + lf * c2 + lt * c23
            pl0, pl1, pl2 = rho * c1, rho * s1, lf * s2 + lt * s23
            drho2 = -lf * s2 - lt * s23
            drho3 = -lt * s23
            J[0, 0], J[0, 1], J[0, 2] = -rho * s1, drho2 * c1, drho3 * c1
            J[1, 0], J[1, 1], J[1, 2] = rho * c1, drho2 * s1, drho3 * s1
            J[2, 0], J[2, 1], J[2, 2] = 0.0, lf * c2 + lt * c23, lt * c23
            cy, sy = math.cos(mount_yaw[l]), math.sin(mount_yaw[l])
            pb0 = mount_pos[l, 0] + cy * pl0 - sy * pl1
            pb1 = mount_pos[l, 1] + sy * pl0 + cy * pl1
            pb2 = mount_pos[l, 2] + pl2
            for i in range(3):
                rw[i] = R[i, 0] * pb0 + R[i, 1] * pb1 + R[i, 2] * pb2
            # Jw = R @ Rz(yaw) @ J
            for i in range(3):
                m0 = R[i, 0] * cy + R[i, 1] * sy
                m1 = -R[i, 0] * sy + R[i, 1] * cy
                m2 = R[i, 2]
                for k in range(3):
                    Jw[i, k] = m0 * J[0, k] + m1 * J[1, k] + m2 * J[2, k]
            fx_ = pos[e, 0] + rw[0]
            fy_ = pos[e, 1] + rw[1]
            fz_ = pos[e, 2] + rw[2]
            v0 = lin_vel[e, 0] + (wy * rw[2] - wz * rw[1])
            v1 = lin_vel[e, 1] + (wz * rw[0] - wx * rw[2])
            v2 = lin_vel[e, 2] + (wx * rw[1] - wy * rw[0])
            qd1, qd2, qd3 = qd[e, 3 * l], qd[e, 3 * l + 1], qd[e, 3 * l + 2]
            v0 += Jw[0, 0] * qd1 + Jw[0, 1] * qd2 + Jw[0, 2] * qd3
            v1 += Jw[1, 0] * qd1 + Jw[1, 1] * qd2 + Jw[1, 2] * qd3
            v2 += Jw[2, 0] * qd1 + Jw[2, 1] * qd2 + Jw[2, 2] * qd3

            ground = _bilinear(heights, res, ox, oy, t, fx_, fy_)
            dhdx = (_bilinear(heights, res, ox, oy, t, fx_ + res, fy_)
                    - _bilinear(heights, res, ox, oy, t, fx_ - res, fy_)) / (2 * res)
            dhdy = (_bilinear(heights, res, ox, oy, t, fx_, fy_ + res)
                    - _bilinear(heights, res, ox, oy, t, fx_, fy_ - res)) / (2 * res)
            nn = math.sqrt(dhdx * dhdx + dhdy * dhdy + 1.0)
            n0, n1, n2 = -dhdx / nn, -dhdy / nn, 1.0 / nn
            depth = (ground - fz_) * n2
            f0 = 0.0
            f1 = 0.0
            f2 = 0.0
            inc = depth > 0
            if inc:
                vn = v0 * n0 + v1 * n1 + v2 * n2
                fn = max(kn * depth - cn * vn, 0.0)
                t0 = -ct * (v0 - vn * n0)
                t1 = -ct * (v1 - vn * n1)
                t2 = -ct * (v2 - vn * n2)
                tn = math.sqrt(t0 * t0 + t1 * t1 + t2 * t2)
                cap = mu * fn
                if tn > cap:
                    sc = cap / max(tn, 1e-12)
                    t0 *= sc
                    t1 *= sc
                    t2 *= sc
                f0 = fn * n0 + t0
                f1 = fn * n1 + t1
                f2 = fn * n2 + t2
            o_force[e, l, 0] = f0
            o_force[e, l, 1] = f1
            o_force[e, l, 2] = f2
            F0 += f0
            F1 += f1
            F2 += f2
            T0 += rw[1] * f2 - rw[2] * f1
            T1 += rw[2] * f0 - rw[0] * f2
            T2 += rw[0] * f1 - rw[1] * f0

            for k in range(3):
                j = 3 * l + k
                tc = Jw[0, k] * f0 + Jw[1, k] * f1 + Jw[2, k] * f2
                qdd = (tau[e, j] + tc - bj * qd[e, j]) / Ij
                nqd = qd[e, j] + dt * qdd
                nq = q[e, j] + dt * nqd
                if (nq < qlo[k] and nqd < 0) or (nq > qhi[k] and nqd > 0):
                    nqd = 0.0
                o_qd[e, j] = nqd
                o_q[e, j] = min(max(nq, qlo[k]), qhi[k])

            o_contact[e, l] = inc
            o_td[e, l] = inc and not contact[e, l]
            o_tdair[e, l] = air[e, l] if (inc and not contact[e, l]) else 0.0
            o_air[e, l] = 0.0 if inc else air[e, l] + dt

        F2 -= mass * grav
        # body-frame torque and angular velocity
        tb0 = R[0, 0] * T0 + R[1, 0] * T1 + R[2, 0] * T2
        tb1 = R[0, 1] * T0 + R[1, 1] * T1 + R[2, 1] * T2
        tb2 = R[0, 2] * T0 + R[1, 2] * T1 + R[2, 2] * T2
        wb0 = R[0, 0] * wx + R[1, 0] * wy + R[2, 0] * wz
        wb1 = R[0, 1] * wx + R[1, 1] * wy + R[2, 1] * wz
        wb2 = R[0, 2] * wx + R[1, 2] * wy + R[2, 2] * wz
        a0 = (tb0 - (wb1 * Izz * wb2 - wb2 * Iyy * wb1)) / Ixx
        a1 = (tb1 - (wb2 * Ixx * wb0 - wb0 * Izz * wb2)) / Iyy
        a2 = (tb2 - (wb0 * Iyy * wb1 - wb1 * Ixx * wb0)) / Izz
        lv0 = lin_vel[e, 0] + dt * F0 / mass
        lv1 = lin_vel[e, 1] + dt * F1 / mass
        lv2 = lin_vel[e, 2] + dt * F2 / mass
        av0 = wx + dt * (R[0, 0] * a0 + R[0, 1] * a1 + R[0, 2] * a2)
        av1 = wy + dt * (R[1, 0] * a0 + R[1, 1] * a1 + R[1, 2] * a2)
        av2 = wz + dt * (R[2, 0] * a0 + R[2, 1] * a1 + R[2, 2] * a2)
        o_lin[e, 0], o_lin[e, 1], o_lin[e, 2] = lv0, lv1, lv2
        o_ang[e, 0], o_ang[e, 1], o_ang[e, 2] = av0, av1, av2
        o_pos[e, 0] = pos[e, 0] + dt * lv0
        o_pos[e, 1] = pos[e, 1] + dt * lv1
        o_pos[e, 2] = pos[e, 2] + dt * lv2

        ang = math.sqrt(av0 * av0 + av1 * av1 + av2 * av2)
        if ang > 1e-12:
            ax, ay, az = av0 / ang, av1 / ang, av2 / ang
        else:
            ax, ay, az = av0, av1, av2
        half = 0.5 * ang * dt
        dw = math.cos(half)
        sh = math.sin(half)
        dx, dy, dz = sh * ax, sh * ay, sh * az
        nw = dw * w - dx * x - dy * y - dz * z
        nx_ = dw * x + dx * w + dy * z - dz * y
        ny_ = dw * y - dx * z + dy * w + dz * x
        nz_ = dw * z + dx * y - dy * x + dz * w
        qn = math.sqrt(nw * nw + nx_ * nx_ + ny_ * ny_ + nz_ * nz_)
        o_quat[e, 0], o_quat[e, 1], o_quat[e, 2], o_quat[e, 3] = nw / qn, nx_ / qn, ny_ / qn, nz_ / qn

        ok = True
        for i in range(3):
            if not (math.isfinite(o_pos[e, i]) and abs(o_lin[e, i]) < vmax and abs(o_ang[e, i]) < vmax):
                ok = False
        for i in range(4):
            if not math.isfinite(o_quat[e, i]):
                ok = False
        for j in range(18):
            if not (abs(o_qd[e, j]) < qdmax):
                ok = False
        o_div[e] = not ok


def params_vector(params) -> np.ndarray:
    return np.array([
        params.dt, params.mass, *params.inertia, params.gravity, params.contact_stiffness,
        params.contact_damping, params.tangential_damping, params.friction, params.joint_inertia,
        params.joint_friction, params.max_speed, params.max_joint_speed,
    ], dtype=float)
