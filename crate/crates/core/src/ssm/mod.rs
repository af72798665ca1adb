//! Selective state-space machinery: discretization, the sequential scan, its
//! bidirectional and cross-modal variants, and the mamba block built on them.
//!
//! A is diagonal and stored as `a_log`, realized as `A = −exp(a_log)`. B, C and
//! Δ are input dependent: `B = x·W_B`, `C = x·W_C`,
//! `Δ = softplus(x·W_Δ + Δ_bias)`.

pub mod scan;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore, Session};
use crate::tensor::Tensor;

pub use scan::{zoh_discretize, zoh_factor, TAYLOR_SWITCH};

/// Owned parameters of one selective SSM.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// `[D_inner, N]`
    pub a_log: Tensor,
    /// `[D_inner]`
    pub d_skip: Tensor,
    /// `[D_inner, N]`
    pub proj_b: Tensor,
    /// `[D_inner, N]`
    pub proj_c: Tensor,
    /// `[D_inner, D_inner]`
    pub proj_delta: Tensor,
    /// `[D_inner]`
    pub delta_bias: Tensor,
}

const FIELDS: [&str; 6] = ["a_log", "d_skip", "proj_b", "proj_c", "proj_delta", "delta_bias"];

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    /// Standard selective-SSM initialization: `−A` spans `1..=N` along each
    /// row, skip `D = 1`, and `softplus(Δ_bias)` is log-uniform in
    /// `[1e-3, 1e-1]`.
    pub fn init<R: Rng + ?Sized>(d_inner: usize, n: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d_inner as f64).sqrt();
        SsmParams {
            a_log: Tensor::from_fn(&[d_inner, n], |i| ((i % n + 1) as f64).ln()),
            d_skip: Tensor::full(&[d_inner], 1.0),
            proj_b: Tensor::randn(&[d_inner, n], std, rng),
            proj_c: Tensor::randn(&[d_inner, n], std, rng),
            proj_delta: Tensor::randn(&[d_inner, d_inner], 0.1 * std, rng),
            delta_bias: Tensor::from_fn(&[d_inner], |_| {
                let log_dt = rng.random_range((1e-3f64).ln()..(1e-1f64).ln());
                inverse_softplus(log_dt.exp())
            }),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.d_skip.numel()
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape().get(1).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.d_inner(), self.state_size());
        if n == 0 {
            return Err(Error::Config("state size N must be at least 1".into()));
        }
        let want: [(&Tensor, Vec<usize>); 6] = [
            (&self.a_log, vec![d, n]),
            (&self.d_skip, vec![d]),
            (&self.proj_b, vec![d, n]),
            (&self.proj_c, vec![d, n]),
            (&self.proj_delta, vec![d, d]),
            (&self.delta_bias, vec![d]),
        ];
        for ((t, shape), name) in want.iter().zip(FIELDS) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "ssm {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// `A = −exp(a_log)`, strictly negative.
    pub fn realized_a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    pub fn write_to(&self, store: &mut ParamStore, prefix: &str) {
        let parts = [
            &self.a_log,
            &self.d_skip,
            &self.proj_b,
            &self.proj_c,
            &self.proj_delta,
            &self.delta_bias,
        ];
        for (t, name) in parts.into_iter().zip(FIELDS) {
            store.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn read_from(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |name: &str| store.get(&format!("{prefix}.{name}")).cloned();
        let p = SsmParams {
            a_log: get("a_log")?,
            d_skip: get("d_skip")?,
            proj_b: get("proj_b")?,
            proj_c: get("proj_c")?,
            proj_delta: get("proj_delta")?,
            delta_bias: get("delta_bias")?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// SSM parameters bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d_skip: Var,
    pub proj_b: Var,
    pub proj_c: Var,
    pub proj_delta: Var,
    pub delta_bias: Var,
}

impl SsmVars {
    pub fn bind(sess: &mut Session<'_>, prefix: &str) -> Result<Self> {
        let mut get = |name: &str| sess.p(&format!("{prefix}.{name}"));
        Ok(SsmVars {
            a_log: get("a_log")?,
            d_skip: get("d_skip")?,
            proj_b: get("proj_b")?,
            proj_c: get("proj_c")?,
            proj_delta: get("proj_delta")?,
            delta_bias: get("delta_bias")?,
        })
    }
}

/// Input-dependent scan coefficients for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct Selection {
    pub delta: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub d: Var,
}

pub fn select(g: &mut Graph, x: Var, p: &SsmVars) -> Result<Selection> {
    let b = g.matmul(x, p.proj_b)?;
    let c = g.matmul(x, p.proj_c)?;
    let dt = g.matmul(x, p.proj_delta)?;
    let dt = g.add_row(dt, p.delta_bias)?;
    let delta = g.softplus(dt);
    let ea = g.exp(p.a_log);
    let a = g.neg(ea);
    Ok(Selection {
        delta,
        a,
        b,
        c,
        d: p.d_skip,
    })
}

fn scan_with(g: &mut Graph, x: Var, own: &Selection, readout: Var) -> Result<Var> {
    g.selective_scan(x, own.delta, own.a, own.b, readout, own.d)
}

/// `y^k = C^k·h^k + D⊙x^k` with `h^0 = 0`.
pub fn selective_scan_var(g: &mut Graph, x: Var, p: &SsmVars) -> Result<Var> {
    let s = select(g, x, p)?;
    scan_with(g, x, &s, s.c)
}

/// Forward scan plus the re-reversed scan of the reversed sequence.
pub fn bidirectional_scan_var(g: &mut Graph, x: Var, fwd: &SsmVars, bwd: &SsmVars) -> Result<Var> {
    let yf = selective_scan_var(g, x, fwd)?;
    let xr = g.reverse_rows(x)?;
    let yr = selective_scan_var(g, xr, bwd)?;
    let yb = g.reverse_rows(yr)?;
    g.add(yf, yb)
}

/// Each branch keeps its own Ā, B̄, Δ, D but reads out with the other
/// branch's per-step C.
pub fn cross_selective_scan_var(
    g: &mut Graph,
    x_rgb: Var,
    x_x: Var,
    p_rgb: &SsmVars,
    p_x: &SsmVars,
) -> Result<(Var, Var)> {
    if g.shape(x_rgb) != g.shape(x_x) {
        return Err(Error::Alignment(format!(
            "cross scan sequences differ: {:?} vs {:?}",
            g.shape(x_rgb),
            g.shape(x_x)
        )));
    }
    let s_rgb = select(g, x_rgb, p_rgb)?;
    let s_x = select(g, x_x, p_x)?;
    let y_rgb = scan_with(g, x_rgb, &s_rgb, s_x.c)?;
    let y_x = scan_with(g, x_x, &s_x, s_rgb.c)?;
    Ok((y_rgb, y_x))
}

/// Cross scan in both directions, reversed results flipped back and summed.
pub fn cross_bidirectional_scan_var(
    g: &mut Graph,
    x_rgb: Var,
    x_x: Var,
    fwd: (&SsmVars, &SsmVars),
    bwd: (&SsmVars, &SsmVars),
) -> Result<(Var, Var)> {
    let (f_rgb, f_x) = cross_selective_scan_var(g, x_rgb, x_x, fwd.0, fwd.1)?;
    let r_rgb_in = g.reverse_rows(x_rgb)?;
    let r_x_in = g.reverse_rows(x_x)?;
    let (r_rgb, r_x) = cross_selective_scan_var(g, r_rgb_in, r_x_in, bwd.0, bwd.1)?;
    let b_rgb = g.reverse_rows(r_rgb)?;
    let b_x = g.reverse_rows(r_x)?;
    Ok((g.add(f_rgb, b_rgb)?, g.add(f_x, b_x)?))
}

/// Shapes of a mamba block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub state: usize,
    pub conv_kernel: usize,
}

/// Registers `{prefix}.{in_x,in_z,conv,fwd,bwd,out}` parameters.
pub fn init_mamba<R: Rng>(init: &mut Init<'_, R>, prefix: &str, dims: MambaDims) {
    let MambaDims {
        d_model,
        d_inner,
        state,
        conv_kernel,
    } = dims;
    init.linear(&format!("{prefix}.in_x"), d_model, d_inner, false);
    init.linear(&format!("{prefix}.in_z"), d_model, d_inner, false);
    init.normal(
        &format!("{prefix}.conv.w"),
        &[d_inner, conv_kernel],
        1.0 / (conv_kernel as f64).sqrt(),
    );
    init.constant(&format!("{prefix}.conv.b"), &[d_inner], 0.0);
    for dir in ["fwd", "bwd"] {
        SsmParams::init(d_inner, state, init.rng).write_to(init.store, &format!("{prefix}.{dir}"));
    }
    init.linear_std(
        &format!("{prefix}.out"),
        d_inner,
        d_model,
        false,
        0.5 / (d_inner as f64).sqrt(),
    );
}

/// Input projection, causal depthwise conv and SiLU; returns the scan input
/// and the gate branch.
fn mamba_in(sess: &mut Session<'_>, prefix: &str, x: Var) -> Result<(Var, Var)> {
    let xi = sess.linear(&format!("{prefix}.in_x"), x)?;
    let z = sess.linear(&format!("{prefix}.in_z"), x)?;
    let cw = sess.p(&format!("{prefix}.conv.w"))?;
    let cb = sess.p(&format!("{prefix}.conv.b"))?;
    let xc = sess.g.conv1d_causal(xi, cw, cb)?;
    Ok((sess.g.silu(xc), z))
}

fn mamba_out(sess: &mut Session<'_>, prefix: &str, x: Var, y: Var, z: Var) -> Result<Var> {
    let gate = sess.g.silu(z);
    let yg = sess.g.mul(y, gate)?;
    let o = sess.linear(&format!("{prefix}.out"), yg)?;
    sess.g.add(x, o)
}

/// Bidirectional mamba block with residual: `x + out(scan(silu(conv(in_x x))) ⊙ silu(in_z x))`.
pub fn mamba_block(sess: &mut Session<'_>, prefix: &str, x: Var) -> Result<Var> {
    if sess.g.shape(x).first() == Some(&0) {
        return Err(Error::EmptySequence("mamba_block"));
    }
    let (xa, z) = mamba_in(sess, prefix, x)?;
    let fwd = SsmVars::bind(sess, &format!("{prefix}.fwd"))?;
    let bwd = SsmVars::bind(sess, &format!("{prefix}.bwd"))?;
    let y = bidirectional_scan_var(&mut sess.g, xa, &fwd, &bwd)?;
    mamba_out(sess, prefix, x, y, z)
}

/// Two mamba blocks whose bidirectional scans exchange C.
pub fn cross_mamba_block(
    sess: &mut Session<'_>,
    prefix_rgb: &str,
    prefix_x: &str,
    x_rgb: Var,
    x_x: Var,
) -> Result<(Var, Var)> {
    if sess.g.shape(x_rgb) != sess.g.shape(x_x) {
        return Err(Error::Alignment(format!(
            "cross mamba inputs differ: {:?} vs {:?}",
            sess.g.shape(x_rgb),
            sess.g.shape(x_x)
        )));
    }
    let (a_rgb, z_rgb) = mamba_in(sess, prefix_rgb, x_rgb)?;
    let (a_x, z_x) = mamba_in(sess, prefix_x, x_x)?;
    let f_rgb = SsmVars::bind(sess, &format!("{prefix_rgb}.fwd"))?;
    let f_x = SsmVars::bind(sess, &format!("{prefix_x}.fwd"))?;
    let b_rgb = SsmVars::bind(sess, &format!("{prefix_rgb}.bwd"))?;
    let b_x = SsmVars::bind(sess, &format!("{prefix_x}.bwd"))?;
    let (y_rgb, y_x) = cross_bidirectional_scan_var(&mut sess.g, a_rgb, a_x, (&f_rgb, &f_x), (&b_rgb, &b_x))?;
    let o_rgb = mamba_out(sess, prefix_rgb, x_rgb, y_rgb, z_rgb)?;
    let o_x = mamba_out(sess, prefix_x, x_x, y_x, z_x)?;
    Ok((o_rgb, o_x))
}

fn with_params<T>(params: &[(&str, &SsmParams)], f: impl FnOnce(&mut Session<'_>) -> Result<T>) -> Result<T> {
    let mut store = ParamStore::new();
    for (prefix, p) in params {
        p.validate()?;
        p.write_to(&mut store, prefix);
    }
    let mut sess = Session::new(&store);
    f(&mut sess)
}

fn check_input(x: &Tensor, p: &SsmParams) -> Result<()> {
    let (l, d) = x.dims2()?;
    if l == 0 {
        return Err(Error::EmptySequence("selective_scan"));
    }
    if d != p.d_inner() {
        return Err(Error::Shape {
            op: "selective_scan",
            lhs: x.shape().to_vec(),
            rhs: vec![p.d_inner()],
        });
    }
    Ok(())
}

/// Selective scan of `x[L, D_inner]`.
pub fn selective_scan(x: &Tensor, params: &SsmParams) -> Result<Tensor> {
    check_input(x, params)?;
    with_params(&[("s", params)], |sess| {
        let p = SsmVars::bind(sess, "s")?;
        let xv = sess.constant(x.clone());
        let y = selective_scan_var(&mut sess.g, xv, &p)?;
        Ok(sess.g.value(y).clone())
    })
}

pub fn bidirectional_scan(x: &Tensor, fwd: &SsmParams, bwd: &SsmParams) -> Result<Tensor> {
    check_input(x, fwd)?;
    check_input(x, bwd)?;
    with_params(&[("f", fwd), ("b", bwd)], |sess| {
        let pf = SsmVars::bind(sess, "f")?;
        let pb = SsmVars::bind(sess, "b")?;
        let xv = sess.constant(x.clone());
        let y = bidirectional_scan_var(&mut sess.g, xv, &pf, &pb)?;
        Ok(sess.g.value(y).clone())
    })
}

pub fn cross_selective_scan(
    x_rgb: &Tensor,
    x_x: &Tensor,
    params_rgb: &SsmParams,
    params_x: &SsmParams,
) -> Result<(Tensor, Tensor)> {
    if x_rgb.shape() != x_x.shape() {
        return Err(Error::Alignment(format!(
            "cross scan sequences differ: {:?} vs {:?}",
            x_rgb.shape(),
            x_x.shape()
        )));
    }
    check_input(x_rgb, params_rgb)?;
    check_input(x_x, params_x)?;
    with_params(&[("r", params_rgb), ("x", params_x)], |sess| {
        let pr = SsmVars::bind(sess, "r")?;
        let px = SsmVars::bind(sess, "x")?;
        let (a, b) = (sess.constant(x_rgb.clone()), sess.constant(x_x.clone()));
        let (yr, yx) = cross_selective_scan_var(&mut sess.g, a, b, &pr, &px)?;
        Ok((sess.g.value(yr).clone(), sess.g.value(yx).clone()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_invariants() {
        let p = SsmParams::init(4, 3, &mut ChaCha8Rng::seed_from_u64(0));
        p.validate().unwrap();
        let a = p.realized_a();
        assert!(a.data().iter().all(|&v| v < 0.0));
        for (v, want) in a.data()[..3].iter().zip([-1.0, -2.0, -3.0]) {
            assert!((v - want).abs() < 1e-12);
        }
        for &b in p.delta_bias.data() {
            let dt = crate::autograd::softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let p = SsmParams::init(2, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::zeros(&[0, 2]);
        assert!(matches!(selective_scan(&x, &p), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn cross_scan_length_mismatch() {
        let p = SsmParams::init(2, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(cross_selective_scan(&a, &b, &p, &p), Err(Error::Alignment(_))));
    }

    #[test]
    fn zero_readout_with_unit_skip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = SsmParams::init(3, 2, &mut rng);
        p.proj_c.fill(0.0);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let y = selective_scan(&x, &p).unwrap();
        assert_eq!(y, x);
    }
}
