"""Dense bounded-variable revised simplex.

Works on the internal standard form

    min c'z  s.t.  M z = r,  0 <= z <= u   (u may be +inf)

produced by :func:`mspduals.lp.solve_lp`. Two phases with artificial
columns; artificials stay in the phase-2 problem fixed at zero so redundant
rows need no special handling.
"""
import numpy as np

ZERO_TOL = 1e-12
FEAS_TOL = 1e-9
OPT_TOL = 1e-9
DEGENERATE_STREAK = 30
REFACTOR_EVERY = 40


class SimplexFailure(RuntimeError):
    pass


def _ratio_test(xb, w, ub_b, direction, basis, bland):
    # basic variables move by -direction*theta*w
    step = direction * w
    theta = np.inf
    leave = -1
    to_upper = False
    for i in range(len(xb)):
        s = step[i]
        if s > ZERO_TOL:
            t = max(xb[i], 0.0) / s
            up = False
        elif s < -ZERO_TOL and np.isfinite(ub_b[i]):
            t = max(ub_b[i] - xb[i], 0.0) / -s
            up = True
        else:
            continue
        if t < theta - ZERO_TOL or (
            abs(t - theta) <= ZERO_TOL
            and leave >= 0
            and (basis[i] < basis[leave] if bland else abs(s) > abs(step[leave]))
        ):
            theta, leave, to_upper = t, i, up
    return theta, leave, to_upper


def _iterate(M, r, c, u, basis, at_upper, max_iter):
    m, n = M.shape
    Binv = np.linalg.inv(M[:, basis])
    streak = 0
    since_refactor = 0
    for _ in range(max_iter):
        if since_refactor >= REFACTOR_EVERY:
            Binv = np.linalg.inv(M[:, basis])
            since_refactor = 0
        nb_up = np.flatnonzero(at_upper)
        rhs = r - M[:, nb_up] @ u[nb_up] if nb_up.size else r
        xb = Binv @ rhs
        y = c[basis] @ Binv
        d = c - y @ M
        d[basis] = 0.0
        is_basic = np.zeros(n, dtype=bool)
        is_basic[basis] = True
        fixed = u <= 0.0
        cand = ~is_basic & ~fixed & (
            (~at_upper & (d < -OPT_TOL)) | (at_upper & (d > OPT_TOL))
        )
        idx = np.flatnonzero(cand)
        if idx.size == 0:
            return "optimal", basis, at_upper, Binv
        bland = streak >= DEGENERATE_STREAK
        if bland:
            q = int(idx[0])
        else:
            # steepest edge on the current basis
            W = Binv @ M[:, idx]
            norms = np.sqrt(1.0 + np.einsum("ij,ij->j", W, W))
            q = int(idx[np.argmax(np.abs(d[idx]) / norms)])
        direction = -1.0 if at_upper[q] else 1.0
        w = Binv @ M[:, q]
        theta, leave, to_upper = _ratio_test(xb, w, u[basis], direction, basis, bland)
        if u[q] < theta:
            # bound flip of the entering column
            at_upper[q] = not at_upper[q]
            streak = 0 if u[q] > ZERO_TOL else streak + 1
            continue
        if leave < 0:
            return "unbounded", basis, at_upper, Binv
        streak = streak + 1 if theta <= ZERO_TOL else 0
        out = basis[leave]
        basis[leave] = q
        at_upper[q] = False
        at_upper[out] = to_upper
        # rank-one update of the inverse
        piv = w[leave]
        if abs(piv) < 1e-11:
            Binv = np.linalg.inv(M[:, basis])
            since_refactor = 0
        else:
            row = Binv[leave] / piv
            Binv = Binv - np.outer(w, row)
            Binv[leave] = row
            since_refactor += 1
    raise SimplexFailure("iteration limit reached")


def solve_standard(M, r, c, u, max_iter=None):
    """Solve the standard-form problem.

    Returns ``(status, z, y)`` with ``status`` one of ``"optimal"``,
    ``"infeasible"``, ``"unbounded"``; ``y`` are equality-row duals with
    ``c - M'y`` the reduced costs.
    """
    m, n = M.shape
    if max_iter is None:
        max_iter = 50 * (m + n) + 1000
    flip = np.where(r < 0, -1.0, 1.0)
    Mf = M * flip[:, None]
    rf = r * flip
    Ma = np.hstack([Mf, np.eye(m)])
    ua = np.concatenate([u, np.full(m, np.inf)])
    basis = list(range(n, n + m))
    at_upper = np.zeros(n + m, dtype=bool)

    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    status, basis, at_upper, Binv = _iterate(Ma, rf, c1, ua, basis, at_upper, max_iter)
    z = _primal(Ma, rf, ua, basis, at_upper, Binv)
    if status != "optimal" or z[n:].sum() > FEAS_TOL * max(1.0, np.abs(rf).max(initial=0.0)):
        return "infeasible", None, None

    ua[n:] = 0.0
    c2 = np.concatenate([c, np.zeros(m)])
    status, basis, at_upper, Binv = _iterate(Ma, rf, c2, ua, basis, at_upper, max_iter)
    if status == "unbounded":
        return "unbounded", None, None
    Binv = np.linalg.inv(Ma[:, basis])
    z = _primal(Ma, rf, ua, basis, at_upper, Binv)
    y = (c2[basis] @ Binv) * flip
    return "optimal", z[:n], y


def _primal(M, r, u, basis, at_upper, Binv):
    z = np.where(at_upper, u, 0.0)
    z[~np.isfinite(z)] = 0.0
    z[basis] = 0.0
    z[basis] = Binv @ (r - M @ z)
    return z
