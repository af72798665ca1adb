//! Sequential selective-scan kernels and zero-order-hold discretization.
//!
//! Layouts are row-major: `u, delta: [L, D]`, `a: [D, N]`, `b, c: [L, N]`,
//! `d: [D]`, saved states `[L, D, N]`.

use crate::error::{Error, Result};

/// Below this `|Δa|` the input-matrix factor uses its Taylor expansion.
pub const TAYLOR_SWITCH: f64 = 1e-6;

/// Below this `|Δa|` the derivative of the factor uses its Taylor expansion.
const DERIV_SWITCH: f64 = 1e-3;

/// `(exp(z) − 1) / z`, continuous through `z = 0`.
pub fn zoh_factor(z: f64) -> f64 {
    if z.abs() < TAYLOR_SWITCH {
        1.0 + z * (0.5 + z / 6.0)
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`zoh_factor`].
pub fn zoh_factor_grad(z: f64) -> f64 {
    if z.abs() < DERIV_SWITCH {
        0.5 + z * (1.0 / 3.0 + z * (0.125 + z / 30.0))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Zero-order-hold discretization of one diagonal entry:
/// `ā = exp(Δa)`, `b̄ = (exp(Δa) − 1)/(Δa) · Δ · b`.
pub fn zoh_discretize(a: f64, delta: f64, b: f64) -> Result<(f64, f64)> {
    if !(a.is_finite() && delta.is_finite() && b.is_finite()) {
        return Err(Error::Numeric(format!(
            "zoh_discretize: non-finite input (a={a}, delta={delta}, b={b})"
        )));
    }
    let z = delta * a;
    Ok((z.exp(), zoh_factor(z) * delta * b))
}

#[derive(Clone, Copy, Debug)]
pub struct ScanDims {
    pub len: usize,
    pub dim: usize,
    pub state: usize,
}

pub struct ScanInputs<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
}

pub struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Runs the recurrence from `h⁰ = 0`; returns outputs and every hidden state.
pub fn forward(x: &ScanInputs<'_>, dims: ScanDims) -> Result<(Vec<f64>, Vec<f64>)> {
    let ScanDims { len, dim, state } = dims;
    let all = [x.u, x.delta, x.a, x.b, x.c, x.d];
    if all.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("selective_scan: non-finite input".into()));
    }
    let mut h = vec![0.0; dim * state];
    let mut states = vec![0.0; len * dim * state];
    let mut y = vec![0.0; len * dim];
    for k in 0..len {
        let bk = &x.b[k * state..(k + 1) * state];
        let ck = &x.c[k * state..(k + 1) * state];
        for d in 0..dim {
            let delta = x.delta[k * dim + d];
            let u = x.u[k * dim + d];
            let hd = &mut h[d * state..(d + 1) * state];
            let ad = &x.a[d * state..(d + 1) * state];
            let mut acc = 0.0;
            for n in 0..state {
                let z = delta * ad[n];
                hd[n] = z.exp() * hd[n] + zoh_factor(z) * delta * bk[n] * u;
                acc += ck[n] * hd[n];
            }
            y[k * dim + d] = acc + x.d[d] * u;
        }
        states[k * dim * state..(k + 1) * dim * state].copy_from_slice(&h);
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("selective_scan: hidden state diverged".into()));
    }
    Ok((y, states))
}

/// Reverse-mode pass given the output gradient `gy: [L, D]`.
pub fn backward(x: &ScanInputs<'_>, states: &[f64], gy: &[f64], dims: ScanDims) -> ScanGrads {
    let ScanDims { len, dim, state } = dims;
    let mut g = ScanGrads {
        u: vec![0.0; len * dim],
        delta: vec![0.0; len * dim],
        a: vec![0.0; dim * state],
        b: vec![0.0; len * state],
        c: vec![0.0; len * state],
        d: vec![0.0; dim],
    };
    // carry[d,n] = ā_{k+1} · ∂L/∂h_{k+1}
    let mut carry = vec![0.0; dim * state];
    for k in (0..len).rev() {
        for d in 0..dim {
            let gyk = gy[k * dim + d];
            let u = x.u[k * dim + d];
            let delta = x.delta[k * dim + d];
            g.d[d] += gyk * u;
            let mut gu = gyk * x.d[d];
            let mut gdelta = 0.0;
            for n in 0..state {
                let s = (k * dim + d) * state + n;
                let h = states[s];
                let h_prev = if k > 0 { states[s - dim * state] } else { 0.0 };
                let a = x.a[d * state + n];
                let bn = x.b[k * state + n];
                g.c[k * state + n] += gyk * h;
                let gh = gyk * x.c[k * state + n] + carry[d * state + n];
                let z = delta * a;
                let abar = z.exp();
                let phi = zoh_factor(z);
                let dphi = zoh_factor_grad(z);
                let g_abar = gh * h_prev;
                let g_bbar = gh * u;
                gu += gh * phi * delta * bn;
                g.b[k * state + n] += g_bbar * phi * delta;
                gdelta += g_abar * abar * a + g_bbar * (dphi * a * delta + phi) * bn;
                g.a[d * state + n] += g_abar * abar * delta + g_bbar * dphi * delta * delta * bn;
                carry[d * state + n] = abar * gh;
            }
            g.u[k * dim + d] += gu;
            g.delta[k * dim + d] += gdelta;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoh_limit_case() {
        let (ab, bb) = zoh_discretize(0.0, 0.5, 2.0).unwrap();
        assert_eq!(ab, 1.0);
        assert_eq!(bb, 1.0);
    }

    #[test]
    fn zoh_log2_case() {
        let (ab, bb) = zoh_discretize(std::f64::consts::LN_2, 1.0, 1.0).unwrap();
        assert!((ab - 2.0).abs() < 1e-15);
        // (2 - 1) / ln 2
        assert!((bb - 1.0 / std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn zoh_rejects_non_finite() {
        assert!(zoh_discretize(f64::NAN, 1.0, 1.0).is_err());
        assert!(zoh_discretize(-1.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn factor_and_derivative_are_continuous_at_switches() {
        for &z0 in &[TAYLOR_SWITCH, DERIV_SWITCH] {
            for s in [-1.0, 1.0] {
                let (lo, hi) = (s * z0 * (1.0 - 1e-9), s * z0 * (1.0 + 1e-9));
                assert!((zoh_factor(lo) - zoh_factor(hi)).abs() < 1e-9);
                assert!((zoh_factor_grad(lo) - zoh_factor_grad(hi)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn factor_derivative_matches_finite_difference() {
        for &z in &[-3.0f64, -0.5, -2e-3, -5e-4, 1e-7, 0.7] {
            let e = 1e-6 * (1.0f64).max(z.abs());
            let fd = (zoh_factor(z + e) - zoh_factor(z - e)) / (2.0 * e);
            assert!((fd - zoh_factor_grad(z)).abs() < 1e-7, "z={z}");
        }
    }
}
