//! Naive reference implementations used to cross-check the optimized paths.
//!
//! Everything here is written as plain loops over `f64` slices, shares no
//! code with the graph ops, and favours obviousness over speed.

use crate::params::ParamStore;
use crate::ssm::SsmParams;
use crate::tensor::Tensor;

/// `(exp(z) − 1)/z`, by power series near zero and directly elsewhere.
pub fn zoh_factor(z: f64) -> f64 {
    if z.abs() < 0.5 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 2..40 {
            term *= z / k as f64;
            sum += term;
        }
        sum
    } else {
        (z.exp() - 1.0) / z
    }
}

/// `(Ā, B̄) = (exp(Δa), ((exp(Δa) − 1)/(Δa))·Δ·b)`.
pub fn zoh(a: f64, delta: f64, b: f64) -> (f64, f64) {
    let z = delta * a;
    (z.exp(), zoh_factor(z) * delta * b)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        (1.0 + v.exp()).ln()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

fn reverse_rows(x: &Tensor) -> Tensor {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(&[l, d], |i| x.data()[(l - 1 - i / d) * d + i % d])
}

/// Per-step `(Δ, B, C)` for one branch: `B = x·W_B`, `C = x·W_C`,
/// `Δ = softplus(x·W_Δ + bias)`.
fn selection(x: &Tensor, p: &SsmParams) -> (Tensor, Tensor, Tensor) {
    let b = matmul(x, &p.proj_b);
    let c = matmul(x, &p.proj_c);
    let mut dt = matmul(x, &p.proj_delta);
    let d = dt.shape()[1];
    for (i, v) in dt.data_mut().iter_mut().enumerate() {
        *v = softplus(*v + p.delta_bias.data()[i % d]);
    }
    (dt, b, c)
}

/// Step-by-step recurrence with branch-own `(Δ, B)` and a supplied readout.
fn recurrence(x: &Tensor, p: &SsmParams, delta: &Tensor, b: &Tensor, c: &Tensor) -> Tensor {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let n = p.a_log.shape()[1];
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; l * d];
    for k in 0..l {
        for ch in 0..d {
            let u = x.data()[k * d + ch];
            let dt = delta.data()[k * d + ch];
            let mut acc = 0.0;
            for s in 0..n {
                let a = -p.a_log.data()[ch * n + s].exp();
                let (a_bar, b_bar) = zoh(a, dt, b.data()[k * n + s]);
                let hs = &mut h[ch * n + s];
                *hs = a_bar * *hs + b_bar * u;
                acc += c.data()[k * n + s] * *hs;
            }
            y[k * d + ch] = acc + p.d_skip.data()[ch] * u;
        }
    }
    Tensor::new(vec![l, d], y).expect("scan shape")
}

pub fn selective_scan(x: &Tensor, p: &SsmParams) -> Tensor {
    let (delta, b, c) = selection(x, p);
    recurrence(x, p, &delta, &b, &c)
}

pub fn bidirectional_scan(x: &Tensor, fwd: &SsmParams, bwd: &SsmParams) -> Tensor {
    let yf = selective_scan(x, fwd);
    let yb = reverse_rows(&selective_scan(&reverse_rows(x), bwd));
    Tensor::from_fn(yf.shape(), |i| yf.data()[i] + yb.data()[i])
}

/// Each branch reads its own state out with the other branch's C.
pub fn cross_selective_scan(x_rgb: &Tensor, x_x: &Tensor, p_rgb: &SsmParams, p_x: &SsmParams) -> (Tensor, Tensor) {
    let (d_r, b_r, c_r) = selection(x_rgb, p_rgb);
    let (d_x, b_x, c_x) = selection(x_x, p_x);
    (
        recurrence(x_rgb, p_rgb, &d_r, &b_r, &c_x),
        recurrence(x_x, p_x, &d_x, &b_x, &c_r),
    )
}

fn get<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get(name).unwrap_or_else(|_| panic!("oracle: missing {name}"))
}

fn causal_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    Tensor::from_fn(&[l, c], |i| {
        let (t, ch) = (i / c, i % c);
        let mut s = b.data()[ch];
        for j in 0..k {
            let lag = k - 1 - j;
            if t >= lag {
                s += w.data()[ch * k + j] * x.data()[(t - lag) * c + ch];
            }
        }
        s
    })
}

fn mamba_front(x: &Tensor, store: &ParamStore, prefix: &str) -> (Tensor, Tensor) {
    let xi = matmul(x, get(store, &format!("{prefix}.in_x.w")));
    let z = matmul(x, get(store, &format!("{prefix}.in_z.w")));
    let xc = causal_conv(
        &xi,
        get(store, &format!("{prefix}.conv.w")),
        get(store, &format!("{prefix}.conv.b")),
    );
    (xc.map(silu), z)
}

fn mamba_back(x: &Tensor, y: &Tensor, z: &Tensor, store: &ParamStore, prefix: &str) -> Tensor {
    let gated = Tensor::from_fn(y.shape(), |i| y.data()[i] * silu(z.data()[i]));
    let o = matmul(&gated, get(store, &format!("{prefix}.out.w")));
    Tensor::from_fn(x.shape(), |i| x.data()[i] + o.data()[i])
}

fn ssm_at(store: &ParamStore, prefix: &str) -> SsmParams {
    SsmParams::read_from(store, prefix).unwrap_or_else(|e| panic!("oracle: {e}"))
}

/// `x + out(bidir_scan(silu(conv(x·W_in))) ⊙ silu(x·W_z))`.
pub fn mamba_block(x: &Tensor, store: &ParamStore, prefix: &str) -> Tensor {
    let (xa, z) = mamba_front(x, store, prefix);
    let y = bidirectional_scan(
        &xa,
        &ssm_at(store, &format!("{prefix}.fwd")),
        &ssm_at(store, &format!("{prefix}.bwd")),
    );
    mamba_back(x, &y, &z, store, prefix)
}

/// Two mamba blocks whose forward and backward scans exchange C.
pub fn cross_mamba_block(x_rgb: &Tensor, x_x: &Tensor, store: &ParamStore, p_rgb: &str, p_x: &str) -> (Tensor, Tensor) {
    let (a_r, z_r) = mamba_front(x_rgb, store, p_rgb);
    let (a_x, z_x) = mamba_front(x_x, store, p_x);
    let (fr, fx) = cross_selective_scan(
        &a_r,
        &a_x,
        &ssm_at(store, &format!("{p_rgb}.fwd")),
        &ssm_at(store, &format!("{p_x}.fwd")),
    );
    let (br, bx) = cross_selective_scan(
        &reverse_rows(&a_r),
        &reverse_rows(&a_x),
        &ssm_at(store, &format!("{p_rgb}.bwd")),
        &ssm_at(store, &format!("{p_x}.bwd")),
    );
    let (br, bx) = (reverse_rows(&br), reverse_rows(&bx));
    let y_r = Tensor::from_fn(fr.shape(), |i| fr.data()[i] + br.data()[i]);
    let y_x = Tensor::from_fn(fx.shape(), |i| fx.data()[i] + bx.data()[i]);
    (
        mamba_back(x_rgb, &y_r, &z_r, store, p_rgb),
        mamba_back(x_x, &y_x, &z_x, store, p_x),
    )
}

/// Single-head scaled dot-product attention and its weights.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    let (l, dh) = (q.shape()[0], q.shape()[1]);
    let lk = k.shape()[0];
    let mut w = vec![0.0; l * lk];
    for i in 0..l {
        let scores: Vec<f64> = (0..lk)
            .map(|j| {
                (0..dh)
                    .map(|p| q.data()[i * dh + p] * k.data()[j * dh + p])
                    .sum::<f64>()
                    / (dh as f64).sqrt()
            })
            .collect();
        w[i * lk..(i + 1) * lk].copy_from_slice(&softmax(&scores));
    }
    let w = Tensor::new(vec![l, lk], w).expect("attention shape");
    (matmul(&w, v), w)
}

/// Direct zero-padded 3×3 convolution over an `(h, w)` grid with channels in
/// the last axis; weights are `[9·cin, cout]` in `(dy, dx, cin)` order.
pub fn conv3x3(x: &Tensor, grid: (usize, usize), w: &Tensor) -> Tensor {
    let (hs, ws) = grid;
    let cin = x.shape()[1];
    let cout = w.shape()[1];
    let mut out = vec![0.0; hs * ws * cout];
    for r in 0..hs {
        for c in 0..ws {
            for o in 0..cout {
                let mut s = 0.0;
                for (ky, dy) in (-1isize..=1).enumerate() {
                    for (kx, dx) in (-1isize..=1).enumerate() {
                        let (y, xx) = (r as isize + dy, c as isize + dx);
                        if y < 0 || xx < 0 || y >= hs as isize || xx >= ws as isize {
                            continue;
                        }
                        for i in 0..cin {
                            let wi = ((ky * 3 + kx) * cin + i) * cout + o;
                            s += x.data()[(y as usize * ws + xx as usize) * cin + i] * w.data()[wi];
                        }
                    }
                }
                out[(r * ws + c) * cout + o] = s;
            }
        }
    }
    Tensor::new(vec![hs * ws, cout], out).expect("conv shape")
}

/// Penalty-reduced focal loss by its scalar formula.
pub fn focal_loss(p: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut peaks = 0.0;
    for (&p, &y) in p.iter().zip(y) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        if y == 1.0 {
            s -= (1.0 - p).powi(2) * p.ln();
            peaks += 1.0;
        } else {
            s -= (1.0 - y).powi(4) * p.powi(2) * (1.0 - p).ln();
        }
    }
    s / f64::max(peaks, 1.0)
}

/// Success-curve area by enumerating the 51 thresholds.
pub fn success_rate(ious: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..=50 {
        let theta = i as f64 * 0.02;
        let pass = ious.iter().filter(|&&v| v > theta).count();
        acc += pass as f64 / ious.len() as f64;
    }
    acc / 51.0
}

/// Suppressed indices by exhaustive ranking: a token is suppressed when
/// fewer than `k` tokens rank strictly ahead of it.
pub fn lowest_k(scores: &[f64], k: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&i| {
            let ahead = (0..scores.len())
                .filter(|&j| scores[j] < scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            ahead < k
        })
        .collect()
}
