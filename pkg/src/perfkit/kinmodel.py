"""Second-order perfusion kinetics: forward simulation and curve fitting.

The observed brightness y(t) is modeled as the response of a damped
second-order system driven by an exponentially decaying input that switches
on at a delay t0, plus a constant background:

    tau^2 y'' + 2 D tau y' + y = K exp(-(t - t0)/tau_i),   t >= t0
    y(t0) = y'(t0) = 0 (transient part), y = b for t < t0.

The solution is evaluated in closed form per damping regime; a unified
complex-root formulation covers D != 1, the critically damped case D == 1
has its own branch, and near-resonant parameter combinations (where the
particular-solution denominator vanishes) fall back to RK4 integration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .curvekit import Landmarks, TimeSeries, detect_onset, detect_peak
from .errors import DomainError

PARAM_FLOOR = 1e-3
PARAM_CEIL = 1e9
# below these margins the closed form loses precision (root collision /
# particular-solution resonance) and evaluation falls back to RK4
RESONANCE_EPS = 1e-8
JACOBIAN_GUARD = 1e-6
PARAM_NAMES = ("damping_D", "tau_s", "tau_i_s", "gain_K", "background_b", "delay_t0_s")


@dataclass(frozen=True)
class KineticParams:
    """The six fitted quantities of the kinetic model."""

    damping_D: float
    tau_s: float
    tau_i_s: float
    gain_K: float
    background_b: float
    delay_t0_s: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise DomainError(f"kinetic parameters must be finite, got {vals}")
        if self.damping_D <= 0 or self.tau_s <= 0 or self.tau_i_s <= 0:
            raise DomainError("damping_D, tau_s and tau_i_s must be > 0")
        if self.gain_K < 0 or self.background_b < 0 or self.delay_t0_s < 0:
            raise DomainError("gain_K, background_b and delay_t0_s must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.damping_D, self.tau_s, self.tau_i_s,
                         self.gain_K, self.background_b, self.delay_t0_s])


@dataclass(frozen=True)
class FitConfig:
    n_restarts: int = 8
    seed: int = 0
    max_iterations: int = 200
    ftol: float = 1e-10
    xtol: float = 1e-10
    baseline_window_s: float = 5.0
    k_sigma: float = 3.0
    smooth_window_s: float = 0.0
    onset_time_s: float | None = None
    truncate_at_s: float | None = None


@dataclass(frozen=True)
class FitResult:
    params: KineticParams
    rmse: float
    n_iterations: int
    converged: bool
    truncation_time_s: float


# ---------------------------------------------------------------------------
# forward model
# ---------------------------------------------------------------------------

def _resonance_denominator(D: float, tau: float, tau_i: float) -> float:
    return 1.0 - 2.0 * D * tau / tau_i + (tau / tau_i) ** 2


def _unit_distinct(D, tau, tau_i, s: np.ndarray) -> np.ndarray:
    """Unit-gain response for distinct roots (D != 1), via complex roots."""
    g = np.sqrt(complex(D * D - 1.0))
    m1 = (-D + g) / tau
    m2 = (-D - g) / tau
    r1 = -1.0 / tau_i
    d1 = r1 - m1
    d2 = r1 - m2
    ct = 1.0 / (tau * tau * d1 * d2)
    dm = m2 - m1
    at = ct * d2 / dm
    bt = -ct * d1 / dm
    return (ct * np.exp(r1 * s) + at * np.exp(m1 * s) + bt * np.exp(m2 * s)).real


def _unit_critical(tau, tau_i, s: np.ndarray) -> np.ndarray:
    """Unit-gain response for the critically damped regime (D == 1)."""
    ct = 1.0 / (1.0 - tau / tau_i) ** 2
    qt = ct * (1.0 / tau_i - 1.0 / tau)
    return ct * np.exp(-s / tau_i) + (-ct + qt * s) * np.exp(-s / tau)


def _rk4_unit(D, tau, tau_i, offsets: np.ndarray, step: float):
    """Integrate the unit-gain system over sorted offsets >= 0 with RK4.

    Returns (u, u') at each offset. Accepts complex parameters so the same
    path supports complex-step differentiation.
    """
    dtype = complex if any(isinstance(v, complex) for v in (D, tau, tau_i)) else float
    two_d_tau = 2.0 * D * tau
    tau2 = tau * tau
    tau_r, taui_r, d_r = float(np.real(tau)), float(np.real(tau_i)), float(np.real(D))
    # explicit RK4 needs the step to resolve the fastest time constant;
    # past s_cut both forcing and transient have underflowed to zero
    step = min(step, tau_r / 4.0, taui_r / 4.0)
    s_cut = 800.0 * max(tau_r / min(max(d_r, 1e-6), 1.0), taui_r)

    def rhs(s, u, v):
        return v, (np.exp(-s / tau_i) - two_d_tau * v - u) / tau2

    u = dtype(0.0)
    v = dtype(0.0)
    s = 0.0
    out_u = np.empty(len(offsets), dtype=dtype)
    out_v = np.empty(len(offsets), dtype=dtype)
    for k, target in enumerate(offsets):
        if float(target) > s_cut:
            out_u[k] = 0.0
            out_v[k] = 0.0
            continue
        gap = float(target) - s
        if gap > 0:
            n_sub = max(1, int(np.ceil(gap / step - 1e-12)))
            h = gap / n_sub
            for _ in range(n_sub):
                k1u, k1v = rhs(s, u, v)
                k2u, k2v = rhs(s + h / 2, u + h / 2 * k1u, v + h / 2 * k1v)
                k3u, k3v = rhs(s + h / 2, u + h / 2 * k2u, v + h / 2 * k2v)
                k4u, k4v = rhs(s + h, u + h * k3u, v + h * k3v)
                u = u + h / 6 * (k1u + 2 * k2u + 2 * k3u + k4u)
                v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
                s += h
            s = float(target)
        out_u[k] = u
        out_v[k] = v
    return out_u, out_v


def _needs_rk4(D: float, tau: float, tau_i: float, guard: float = RESONANCE_EPS) -> bool:
    if abs(_resonance_denominator(D, tau, tau_i)) < guard:
        return True
    return D != 1.0 and abs(D - 1.0) < guard


def _unit_response(params: KineticParams, s: np.ndarray, rk4_step: float) -> np.ndarray:
    """u(s) with u = 0 for s < 0; y = b + K * u."""
    D, tau, tau_i = params.damping_D, params.tau_s, params.tau_i_s
    u = np.zeros(len(s))
    pos = s >= 0
    if not np.any(pos):
        return u
    sp = s[pos]
    if _needs_rk4(D, tau, tau_i):
        order = np.argsort(sp, kind="stable")
        vals, _ = _rk4_unit(D, tau, tau_i, sp[order], rk4_step)
        up = np.empty_like(sp)
        up[order] = vals.real
        u[pos] = up
    elif D == 1.0:
        u[pos] = _unit_critical(tau, tau_i, sp)
    else:
        u[pos] = _unit_distinct(D, tau, tau_i, sp)
    return u


def simulate(params: KineticParams, time_grid) -> TimeSeries:
    """Evaluate the model on a uniform, strictly increasing time grid."""
    t = np.asarray(time_grid, dtype=np.float64)
    if t.ndim != 1 or len(t) < 2:
        raise DomainError("time grid must be 1-D with at least 2 points")
    dt = t[1] - t[0]
    if dt <= 0 or np.any(np.abs(np.diff(t) - dt) > 1e-9 * max(dt, 1.0)):
        raise DomainError("time grid must be strictly increasing with uniform spacing")
    u = _unit_response(params, t - params.delay_t0_s, rk4_step=dt / 10.0)
    y = params.background_b + params.gain_K * u
    return TimeSeries(float(dt), float(t[0]), y, np.ones(len(t), dtype=bool))


# ---------------------------------------------------------------------------
# analytic model Jacobian (linear parameter space)
# ---------------------------------------------------------------------------

def _values_and_jacobian(params: KineticParams, t: np.ndarray, rk4_step: float):
    """Model values and d(y)/d(D, tau, tau_i, K, b, t0) at times t.

    Closed-form partials off the resonance/critical guard bands; inside the
    bands the value comes from RK4 and the (D, tau, tau_i) columns from
    complex-step differentiation through the same integrator.
    """
    D, tau, tau_i = params.damping_D, params.tau_s, params.tau_i_s
    K, b, t0 = params.gain_K, params.background_b, params.delay_t0_s
    n = len(t)
    s = t - t0
    y = np.full(n, b)
    jac = np.zeros((n, 6))
    jac[:, 4] = 1.0
    pos = s >= 0
    if not np.any(pos):
        return y, jac
    sp = s[pos]

    guarded = (abs(_resonance_denominator(D, tau, tau_i)) < JACOBIAN_GUARD
               or abs(D - 1.0) < JACOBIAN_GUARD)
    if guarded:
        order = np.argsort(sp, kind="stable")
        so = sp[order]
        u_o, du_o = _rk4_unit(D, tau, tau_i, so, rk4_step)
        u = np.empty_like(sp)
        du = np.empty_like(sp)
        u[order] = u_o.real
        du[order] = du_o.real
        h = 1e-30
        cols = []
        for i, base in enumerate((D, tau, tau_i)):
            args = [D, tau, tau_i]
            args[i] = complex(base, h * max(abs(base), 1.0))
            pu, _ = _rk4_unit(*args, so, rk4_step)
            col = np.empty_like(sp)
            col[order] = pu.imag / (h * max(abs(base), 1.0))
            cols.append(col)
        y[pos] = b + K * u
        jac[pos, 0] = K * cols[0]
        jac[pos, 1] = K * cols[1]
        jac[pos, 2] = K * cols[2]
        jac[pos, 3] = u
        jac[pos, 5] = -K * du
        return y, jac

    g = np.sqrt(complex(D * D - 1.0))
    dg = D / g
    m1 = (-D + g) / tau
    m2 = (-D - g) / tau
    dm1_D = (-1.0 + dg) / tau
    dm2_D = (-1.0 - dg) / tau
    dm1_tau = -m1 / tau
    dm2_tau = -m2 / tau
    r1 = -1.0 / tau_i
    dr1_ti = 1.0 / (tau_i * tau_i)
    d1 = r1 - m1
    d2 = r1 - m2
    dm = m2 - m1
    ct = 1.0 / (tau * tau * d1 * d2)
    dct_D = ct * (dm1_D / d1 + dm2_D / d2)
    dct_tau = ct * (-2.0 / tau + dm1_tau / d1 + dm2_tau / d2)
    dct_ti = -ct * dr1_ti * (1.0 / d1 + 1.0 / d2)
    at = ct * d2 / dm
    bt = -ct * d1 / dm

    def d_at(dct, dd2, ddm):
        return dct * d2 / dm + ct * dd2 / dm - ct * d2 * ddm / (dm * dm)

    def d_bt(dct, dd1, ddm):
        return -(dct * d1 / dm + ct * dd1 / dm - ct * d1 * ddm / (dm * dm))

    # dd_i/dp = dr1/dp - dm_i/dp ; r1 depends only on tau_i, m's on (D, tau)
    dat_D = d_at(dct_D, -dm2_D, dm2_D - dm1_D)
    dbt_D = d_bt(dct_D, -dm1_D, dm2_D - dm1_D)
    dat_tau = d_at(dct_tau, -dm2_tau, dm2_tau - dm1_tau)
    dbt_tau = d_bt(dct_tau, -dm1_tau, dm2_tau - dm1_tau)
    dat_ti = d_at(dct_ti, dr1_ti, 0.0)
    dbt_ti = d_bt(dct_ti, dr1_ti, 0.0)

    er = np.exp(r1 * sp)
    e1 = np.exp(m1 * sp)
    e2 = np.exp(m2 * sp)
    u = (ct * er + at * e1 + bt * e2).real
    y[pos] = b + K * u
    jac[pos, 0] = K * (dct_D * er + (dat_D + at * sp * dm1_D) * e1
                       + (dbt_D + bt * sp * dm2_D) * e2).real
    jac[pos, 1] = K * (dct_tau * er + (dat_tau + at * sp * dm1_tau) * e1
                       + (dbt_tau + bt * sp * dm2_tau) * e2).real
    jac[pos, 2] = K * ((dct_ti + ct * sp * dr1_ti) * er + dat_ti * e1 + dbt_ti * e2).real
    jac[pos, 3] = u
    jac[pos, 5] = -K * (ct * r1 * er + at * m1 * e1 + bt * m2 * e2).real
    return y, jac


def jacobian_check(params: KineticParams, time_grid) -> float:
    """Worst relative deviation of the fitter's analytic model gradient
    against central finite differences (relative step 1e-6)."""
    t = np.asarray(time_grid, dtype=np.float64)
    dt = t[1] - t[0]
    _, jac = _values_and_jacobian(params, t, rk4_step=dt / 10.0)
    base = params.as_array()
    worst = 0.0
    for j in range(6):
        h = 1e-6 * max(abs(base[j]), 1e-6)
        hi = base.copy()
        lo = base.copy()
        hi[j] += h
        lo[j] = max(lo[j] - h, 0.0) if j >= 3 else lo[j] - h
        step = hi[j] - lo[j]
        y_hi = _unit_eval(hi, t, dt)
        y_lo = _unit_eval(lo, t, dt)
        fd = (y_hi - y_lo) / step
        scale = max(np.max(np.abs(fd)), 1e-12)
        dev = np.max(np.abs(jac[:, j] - fd)) / scale
        worst = max(worst, float(dev))
    return worst


def _unit_eval(arr: np.ndarray, t: np.ndarray, dt: float) -> np.ndarray:
    p = KineticParams(*arr)
    return p.background_b + p.gain_K * _unit_response(p, t - p.delay_t0_s, dt / 10.0)


# ---------------------------------------------------------------------------
# initialization and fitting
# ---------------------------------------------------------------------------

def _guess_from_landmarks(onset_time: float, baseline: float,
                          peak_time: float, peak_value: float) -> KineticParams:
    rise = peak_time - onset_time
    return KineticParams(
        damping_D=1.0,
        tau_s=max(rise / 2.0, PARAM_FLOOR),
        tau_i_s=max(rise, PARAM_FLOOR),
        gain_K=max(peak_value - baseline, PARAM_FLOOR),
        background_b=max(baseline, 0.0),
        delay_t0_s=max(onset_time, 0.0),
    )


def initial_guess(series: TimeSeries, config: FitConfig = FitConfig()) -> KineticParams:
    """Deterministic landmark-based starting point for the fit."""
    lm = detect_onset(series, config.baseline_window_s, config.k_sigma,
                      config.smooth_window_s)
    pk = detect_peak(series, config.smooth_window_s)
    return _guess_from_landmarks(lm.onset_time_s, lm.baseline_value,
                                 pk.peak_time_s, pk.peak_value)


_LOG_LO = np.log(PARAM_FLOOR)
_LOG_HI = np.log(PARAM_CEIL)


def _to_theta(p: KineticParams) -> np.ndarray:
    return np.array([np.log(p.damping_D), np.log(p.tau_s), np.log(p.tau_i_s),
                     np.log(max(p.gain_K, PARAM_FLOOR)), p.background_b, p.delay_t0_s])


def _from_theta(theta: np.ndarray) -> KineticParams:
    return KineticParams(float(np.exp(theta[0])), float(np.exp(theta[1])),
                         float(np.exp(theta[2])), float(np.exp(theta[3])),
                         float(theta[4]), float(theta[5]))


def _clip_theta(theta: np.ndarray, t0_hi: float) -> np.ndarray:
    out = np.where(np.isfinite(theta), theta, _LOG_LO)  # sanitize stray NaN/inf
    out[:4] = np.clip(out[:4], _LOG_LO, _LOG_HI)
    out[4] = np.clip(out[4], 0.0, PARAM_CEIL)
    out[5] = np.clip(out[5], 0.0, t0_hi)
    return out


def _lm_minimize(theta0: np.ndarray, t: np.ndarray, obs: np.ndarray, dt: float,
                 t0_hi: float, config: FitConfig):
    """Damped least squares on the transformed parameter vector."""
    n = len(obs)
    theta = _clip_theta(theta0, t0_hi)

    def residuals(th):
        y = _unit_eval_theta(th, t, dt)
        return y - obs

    def res_jac(th):
        p = _from_theta(th)
        y, jac = _values_and_jacobian(p, t, rk4_step=dt / 10.0)
        jac = jac.copy()
        jac[:, :4] *= np.exp(th[:4])[None, :]  # chain rule into log space
        return y - obs, jac

    r, jac = res_jac(theta)
    if not np.all(np.isfinite(r)):
        return theta, np.inf, 0, False
    rmse = float(np.sqrt(np.mean(r * r)))
    lam = 1e-3
    n_iter = 0
    converged = False
    for n_iter in range(1, config.max_iterations + 1):
        if not np.all(np.isfinite(jac)):
            converged = True  # gradient unusable at a parameter extreme
            break
        a = jac.T @ jac
        grad = jac.T @ r
        diag = np.maximum(np.diag(a), 1e-12)
        accepted = False
        for _ in range(30):
            try:
                delta = np.linalg.solve(a + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            cand = _clip_theta(theta + delta, t0_hi)
            r_new = residuals(cand)
            if np.all(np.isfinite(r_new)):
                rmse_new = float(np.sqrt(np.mean(r_new * r_new)))
                if rmse_new <= rmse:
                    step = cand - theta
                    theta = cand
                    improvement = (rmse - rmse_new) / max(rmse, 1e-300)
                    rmse = rmse_new
                    lam = max(lam / 3.0, 1e-12)
                    accepted = True
                    if improvement < config.ftol:
                        converged = True
                    elif np.linalg.norm(step) < config.xtol * max(np.linalg.norm(theta), 1.0):
                        converged = True
                    break
            lam *= 10.0
            if lam > 1e14:
                break
        if not accepted:
            converged = True  # stalled at a (local) minimum
            break
        if converged:
            break
        r, jac = res_jac(theta)
    return theta, rmse, n_iter, converged


def _unit_eval_theta(theta: np.ndarray, t: np.ndarray, dt: float) -> np.ndarray:
    p = _from_theta(theta)
    return p.background_b + p.gain_K * _unit_response(p, t - p.delay_t0_s, dt / 10.0)


def fit(series: TimeSeries, config: FitConfig = FitConfig()) -> FitResult:
    """Fit the six model parameters to a curve by multi-start damped least
    squares; positivity is enforced by optimizing (D, tau, tau_i, K) in log
    space, and t0 is kept within [0, peak_time]."""
    work = series.truncated(config.truncate_at_s) if config.truncate_at_s is not None else series
    if work.n_valid() < 20:
        raise DomainError(f"fit needs >= 20 valid samples, got {work.n_valid()}")

    if config.onset_time_s is not None:
        times_all = work.times
        in_win = (times_all - work.start_time_s
                  < config.baseline_window_s - 1e-9 * work.sample_period_s) & work.valid
        baseline = float(np.median(work.values[in_win])) if np.any(in_win) else 0.0
        onset_time = config.onset_time_s
    else:
        lm = detect_onset(work, config.baseline_window_s, config.k_sigma,
                          config.smooth_window_s)
        baseline, onset_time = lm.baseline_value, lm.onset_time_s
    pk = detect_peak(work, config.smooth_window_s)
    guess = _guess_from_landmarks(onset_time, baseline, pk.peak_time_s, pk.peak_value)

    t = work.times[work.valid]
    obs = work.values[work.valid]
    dt = work.sample_period_s
    t0_hi = max(pk.peak_time_s, 0.0)
    scale = max(1.0, float(np.max(np.abs(obs))))

    rng = np.random.default_rng(config.seed)
    starts = [_to_theta(guess)]
    for _ in range(config.n_restarts):
        pert = _to_theta(guess)
        pert[:4] += rng.uniform(np.log(0.5), np.log(1.5), size=4)
        starts.append(pert)

    best = None
    for theta0 in starts:
        theta, rmse, n_iter, converged = _lm_minimize(theta0, t, obs, dt, t0_hi, config)
        if best is None or rmse < best[1]:
            best = (theta, rmse, n_iter, converged)
        if best[1] <= 1e-9 * scale:
            break

    theta, rmse, n_iter, converged = best
    if not np.isfinite(rmse):
        return FitResult(guess, float("inf"), n_iter, False, float(t[-1]))
    return FitResult(_from_theta(theta), rmse, n_iter, converged, float(t[-1]))


def fit_record(patient_id: str, roi_id: str, result: FitResult) -> dict:
    """JSON record for one fitted curve (schema used by the CLI)."""
    p = result.params
    return {
        "patient_id": patient_id,
        "roi_id": roi_id,
        "D": p.damping_D,
        "tau_s": p.tau_s,
        "tau_i_s": p.tau_i_s,
        "K": p.gain_K,
        "b": p.background_b,
        "t0_s": p.delay_t0_s,
        "rmse": result.rmse,
        "converged": result.converged,
        "truncation_time_s": result.truncation_time_s,
    }
