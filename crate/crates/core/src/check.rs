//! Oracle and invariant suites. The `check` command runs all of them; the
//! acceptance tests call them one at a time at their required sizes.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{fd_gradient, max_rel_error, Graph, Var};
use crate::bsi::{self, FilterSchedule};
use crate::encoder::{self, Modality, ModalityImages, ModalityTokens};
use crate::error::Result;
use crate::fusion::{self, FusedFeature};
use crate::head::{self, BBox, LossWeights};
use crate::metrics::{self, PixelBox, PRECISION_RADIUS};
use crate::model::ModelConfig;
use crate::oracle;
use crate::params::{Init, ParamStore, Session};
use crate::ssm::{self, scan, MambaDims, SsmParams, SsmVars};
use crate::tensor::Tensor;
use crate::tsg::{self, TemporalQueue};

/// Pass/fail tally of one suite.
#[derive(Clone, Debug)]
pub struct Suite {
    pub name: &'static str,
    pub cases: usize,
    pub failed: usize,
    /// The first few failure messages.
    pub notes: Vec<String>,
    pub elapsed: Duration,
}

const MAX_NOTES: usize = 8;

impl Suite {
    fn new(name: &'static str) -> Self {
        Suite {
            name,
            cases: 0,
            failed: 0,
            notes: vec![],
            elapsed: Duration::ZERO,
        }
    }

    fn record(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failed += 1;
            if self.notes.len() < MAX_NOTES {
                self.notes.push(msg());
            }
        }
    }

    /// Records a case from a fallible check returning its pass flag.
    fn outcome(&mut self, label: &str, r: Result<bool>, detail: impl FnOnce() -> String) {
        match r {
            Ok(ok) => self.record(ok, || format!("{label}: {}", detail())),
            Err(e) => self.record(false, || format!("{label}: {e}")),
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failed == 0
    }

    fn done(mut self, start: Instant) -> Self {
        self.elapsed = start.elapsed();
        self
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}/{} passed in {:.2?}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases - self.failed,
            self.cases,
            self.elapsed
        )?;
        for n in &self.notes {
            write!(f, "\n    {n}")?;
        }
        Ok(())
    }
}

/// Largest `|a − b| / max(1, |b|)`; infinite on a shape mismatch.
fn deviation(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

/// Exact elementwise equality of values and shapes.
fn identical(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x == y)
}

/// SSM parameters with spread-out decay rates and step sizes.
pub fn random_ssm<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> SsmParams {
    SsmParams {
        a_log: Tensor::rand_uniform(&[d, n], -2.0, 2.0, rng),
        d_skip: Tensor::randn(&[d], 1.0, rng),
        proj_b: Tensor::randn(&[d, n], 0.5, rng),
        proj_c: Tensor::randn(&[d, n], 0.5, rng),
        proj_delta: Tensor::randn(&[d, d], 0.5, rng),
        delta_bias: Tensor::rand_uniform(&[d], -4.0, 1.0, rng),
    }
}

/// A small configuration for exhaustive checks: 8-wide, 2×2 template grid,
/// 4×4 search grid.
pub fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        mlp_ratio: 2,
        layers,
        patch: 4,
        template_size: 8,
        search_size: 16,
        m: 2,
        d_inner: 8,
        state: 4,
        conv_kernel: 3,
        lambda_stages: [0.0, 0.15, 0.30],
        head_channels: vec![4, 4],
        template_score_weight: 0.5,
    }
}

/// Selective, bidirectional and cross scans against step-by-step
/// recurrences for random `L ≤ 64, D ≤ 8, N ≤ 8`.
pub fn scan_oracle(cases: usize, seed: u64) -> Suite {
    let start = Instant::now();
    let mut s = Suite::new("scan oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let l = rng.random_range(1..=64);
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=8);
        let x = Tensor::randn(&[l, d], 1.0, &mut rng);
        let x2 = Tensor::randn(&[l, d], 1.0, &mut rng);
        let p = [0; 3].map(|_| random_ssm(d, n, &mut rng));
        let worst = (|| -> Result<f64> {
            let mut w = deviation(&ssm::selective_scan(&x, &p[0])?, &oracle::selective_scan(&x, &p[0]));
            w = w.max(deviation(
                &ssm::bidirectional_scan(&x, &p[0], &p[1])?,
                &oracle::bidirectional_scan(&x, &p[0], &p[1]),
            ));
            let (a, b) = ssm::cross_selective_scan(&x, &x2, &p[0], &p[2])?;
            let (oa, ob) = oracle::cross_selective_scan(&x, &x2, &p[0], &p[2]);
            Ok(w.max(deviation(&a, &oa)).max(deviation(&b, &ob)))
        })();
        let label = format!("case {case} (L={l}, D={d}, N={n})");
        let shown = worst.as_ref().copied().unwrap_or(f64::NAN);
        s.outcome(&label, worst.map(|w| w <= 1e-6), || format!("deviation {shown:e}"));
    }
    s.done(start)
}

/// Discretization against the series oracle, plus continuity of the factor
/// across its Taylor switch.
pub fn zoh_oracle(cases: usize, seed: u64) -> Suite {
    let start = Instant::now();
    let mut s = Suite::new("zero-order hold");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let a = -rng.random_range(-8.0..4.0f64).exp();
        let delta = if case % 4 == 0 {
            // |Δa| straddling the switch
            scan::TAYLOR_SWITCH * rng.random_range(-0.7..0.7f64).exp() / -a
        } else {
            rng.random_range(-8.0..2.0f64).exp()
        };
        let b = rng.random_range(-3.0..3.0);
        let want = oracle::zoh(a, delta, b);
        let got = scan::zoh_discretize(a, delta, b);
        let err = got
            .as_ref()
            .map(|g| rel(g.0, want.0).max(rel(g.1, want.1)))
            .unwrap_or(f64::NAN);
        let label = format!("(a={a:e}, delta={delta:e}, b={b:.3})");
        s.outcome(&label, got.map(|_| err <= 1e-10), || format!("relative error {err:e}"));
    }
    for z in [scan::TAYLOR_SWITCH, -scan::TAYLOR_SWITCH] {
        let inside = f64::from_bits(z.to_bits() - 1);
        let jump = (scan::zoh_factor(z) - scan::zoh_factor(inside)).abs();
        s.record(jump <= 1e-9, || format!("factor jumps by {jump:e} at z = {z:e}"));
    }
    s.done(start)
}

fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let c = g.constant(w.clone());
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

/// Largest relative disagreement between tape gradients and central
/// differences, over every entry of every tensor in `store`.
pub fn store_gradient_error(store: &ParamStore, build: &dyn Fn(&mut Session<'_>) -> Result<Var>) -> Result<f64> {
    let mut sess = Session::trainable(store);
    let loss = build(&mut sess)?;
    sess.g.backward(loss)?;
    let grads = sess.grads();
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (name, t) in store.iter() {
        let analytic = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let fd = fd_gradient(
            |v| {
                *probe.get_mut(name)? = v.clone();
                let mut s = Session::new(&probe);
                let l = build(&mut s)?;
                Ok(s.g.value(l).data()[0])
            },
            t,
            1e-6,
        )?;
        *probe.get_mut(name)? = t.clone();
        worst = worst.max(max_rel_error(analytic.data(), fd.data()));
    }
    Ok(worst)
}

type GradCase = (&'static str, ParamStore, Box<dyn Fn(&mut Session<'_>) -> Result<Var>>);

fn toy_images<R: Rng>(cfg: &ModelConfig, modality: Modality, rng: &mut R) -> [Tensor; 3] {
    let c = modality.channels();
    let (t, s) = (cfg.template_size, cfg.search_size);
    [
        Tensor::rand_uniform(&[t, t, c], -0.5, 0.5, rng),
        Tensor::rand_uniform(&[t, t, c], -0.5, 0.5, rng),
        Tensor::rand_uniform(&[s, s, c], -0.5, 0.5, rng),
    ]
}

fn images(t: &[Tensor; 3]) -> ModalityImages<'_> {
    ModalityImages {
        template_fixed: &t[0],
        template_dynamic: &t[1],
        search: &t[2],
    }
}

fn gradient_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<GradCase> = vec![];

    let mut st = ParamStore::new();
    random_ssm(4, 3, &mut rng).write_to(&mut st, "s");
    st.insert("u", Tensor::randn(&[6, 4], 1.0, &mut rng));
    let w = Tensor::randn(&[6, 4], 1.0, &mut rng);
    cases.push((
        "selective_scan",
        st,
        Box::new(move |sess| {
            let p = SsmVars::bind(sess, "s")?;
            let u = sess.p("u")?;
            let y = ssm::selective_scan_var(&mut sess.g, u, &p)?;
            weighted_sum(&mut sess.g, y, &w)
        }),
    ));

    let mut st = ParamStore::new();
    random_ssm(3, 2, &mut rng).write_to(&mut st, "r");
    random_ssm(3, 2, &mut rng).write_to(&mut st, "x");
    st.insert("u.r", Tensor::randn(&[5, 3], 1.0, &mut rng));
    st.insert("u.x", Tensor::randn(&[5, 3], 1.0, &mut rng));
    let w = [0; 2].map(|_| Tensor::randn(&[5, 3], 1.0, &mut rng));
    cases.push((
        "cross_selective_scan",
        st,
        Box::new(move |sess| {
            let pr = SsmVars::bind(sess, "r")?;
            let px = SsmVars::bind(sess, "x")?;
            let (ur, ux) = (sess.p("u.r")?, sess.p("u.x")?);
            let (yr, yx) = ssm::cross_selective_scan_var(&mut sess.g, ur, ux, &pr, &px)?;
            let a = weighted_sum(&mut sess.g, yr, &w[0])?;
            let b = weighted_sum(&mut sess.g, yx, &w[1])?;
            sess.g.add(a, b)
        }),
    ));

    let mut st = ParamStore::new();
    let dims = MambaDims {
        d_model: 4,
        d_inner: 6,
        state: 3,
        conv_kernel: 3,
    };
    ssm::init_mamba(
        &mut Init {
            store: &mut st,
            rng: &mut rng,
        },
        "m",
        dims,
    );
    st.insert("u", Tensor::randn(&[7, 4], 1.0, &mut rng));
    let w = Tensor::randn(&[7, 4], 1.0, &mut rng);
    cases.push((
        "mamba_block",
        st,
        Box::new(move |sess| {
            let u = sess.p("u")?;
            let y = ssm::mamba_block(sess, "m", u)?;
            weighted_sum(&mut sess.g, y, &w)
        }),
    ));

    let cfg = tiny_config(2);
    let mut st = ParamStore::new();
    {
        let mut init = Init {
            store: &mut st,
            rng: &mut rng,
        };
        encoder::init_encoder(&mut init, &cfg);
        bsi::init_bsi(&mut init, &cfg);
    }
    let img_rgb = toy_images(&cfg, Modality::Rgb, &mut rng);
    let img_x = toy_images(&cfg, Modality::X, &mut rng);
    let queue = [0; 2].map(|_| Tensor::randn(&[cfg.m, cfg.d_model], 1.0, &mut rng));
    let len = cfg.n_z() + cfg.n_s() + cfg.m;
    let w = [0; 2].map(|_| Tensor::randn(&[len, cfg.d_model], 1.0, &mut rng));
    cases.push((
        "encoder (2 layers, suppression on)",
        st,
        Box::new(move |sess| {
            let schedule = FilterSchedule {
                lambdas: vec![0.0, 0.5],
            };
            let r = encoder::embed_tokens(sess, &cfg, Modality::Rgb, images(&img_rgb), Some(&queue[0]))?;
            let x = encoder::embed_tokens(sess, &cfg, Modality::X, images(&img_x), Some(&queue[1]))?;
            let e = encoder::encode(sess, &cfg, r, x, &schedule)?;
            let a = weighted_sum(&mut sess.g, e.rgb.tokens, &w[0])?;
            let b = weighted_sum(&mut sess.g, e.x.tokens, &w[1])?;
            sess.g.add(a, b)
        }),
    ));

    let cfg = tiny_config(3);
    let n = cfg.n_z() + cfg.n_s();
    let mut st = ParamStore::new();
    fusion::init_fusion(
        &mut Init {
            store: &mut st,
            rng: &mut rng,
        },
        &cfg,
    );
    st.insert("in.rgb", Tensor::randn(&[n, cfg.d_model], 1.0, &mut rng));
    st.insert("in.x", Tensor::randn(&[n, cfg.d_model], 1.0, &mut rng));
    let w = Tensor::randn(&[n, cfg.d_model], 1.0, &mut rng);
    let (n_z, grid) = (cfg.n_z(), cfg.grid_s());
    cases.push((
        "mamba_fuse",
        st,
        Box::new(move |sess| {
            let (a, b) = (sess.p("in.rgb")?, sess.p("in.x")?);
            let f = fusion::mamba_fuse(sess, a, b, n_z, grid)?;
            weighted_sum(&mut sess.g, f.tokens, &w)
        }),
    ));

    let mut st = ParamStore::new();
    tsg::init_tsg(
        &mut Init {
            store: &mut st,
            rng: &mut rng,
        },
        &cfg,
    );
    st.insert("in.rgb", Tensor::randn(&[6, cfg.d_model], 1.0, &mut rng));
    st.insert("in.x", Tensor::randn(&[6, cfg.d_model], 1.0, &mut rng));
    let w = [0; 2].map(|_| Tensor::randn(&[cfg.d_model], 1.0, &mut rng));
    cases.push((
        "tsg_step",
        st,
        Box::new(move |sess| {
            let (a, b) = (sess.p("in.rgb")?, sess.p("in.x")?);
            let (tr, tx) = tsg::tsg_step(sess, a, b)?;
            let a = weighted_sum(&mut sess.g, tr, &w[0])?;
            let b = weighted_sum(&mut sess.g, tx, &w[1])?;
            sess.g.add(a, b)
        }),
    ));

    let mut st = ParamStore::new();
    st.insert("p", Tensor::rand_uniform(&[4, 4], 0.05, 0.95, &mut rng));
    let target = head::gaussian_target(&BBox::new(0.4, 0.6, 0.3, 0.3), (4, 4));
    cases.push((
        "focal_loss",
        st,
        Box::new(move |sess| {
            let p = sess.p("p")?;
            head::focal_loss(&mut sess.g, p, &target)
        }),
    ));

    let gt = BBox::new(0.55, 0.5, 0.25, 0.4);
    for (label, pred) in [
        ("giou_loss (overlapping)", [0.5, 0.45, 0.3, 0.35]),
        ("giou_loss (disjoint)", [0.2, 0.15, 0.1, 0.12]),
    ] {
        let mut st = ParamStore::new();
        st.insert("pred", Tensor::from_vec(pred.to_vec()));
        cases.push((
            label,
            st,
            Box::new(move |sess| {
                let p = sess.p("pred")?;
                head::giou_loss(&mut sess.g, p, &gt)
            }),
        ));
    }

    let mut st = ParamStore::new();
    head::init_head(
        &mut Init {
            store: &mut st,
            rng: &mut rng,
        },
        &cfg,
    );
    st.insert("fused", Tensor::randn(&[n, cfg.d_model], 1.0, &mut rng));
    let gt = BBox::new(0.4, 0.55, 0.3, 0.25);
    let stages = cfg.head_channels.len();
    cases.push((
        "total_loss",
        st,
        Box::new(move |sess| {
            let fused = FusedFeature {
                tokens: sess.p("fused")?,
                n_z,
                search_grid: grid,
            };
            let h = head::head_forward(sess, &fused, stages)?;
            Ok(head::total_loss(&mut sess.g, &h, &gt, LossWeights::default())?.total)
        }),
    ));
    cases
}

/// Tape gradients against central differences at relative 1e-4.
pub fn gradient_checks(seed: u64) -> Suite {
    let start = Instant::now();
    let mut s = Suite::new("gradient checks");
    for (label, store, build) in gradient_cases(seed) {
        let err = store_gradient_error(&store, build.as_ref());
        let shown = err.as_ref().copied().unwrap_or(f64::NAN);
        s.outcome(label, err.map(|e| e <= 1e-4), || format!("relative error {shown:e}"));
    }
    s.done(start)
}

/// Suppression counts and ordering for every `(λ, n_s)` pair, against
/// exhaustive ranking, plus the staged schedule and a real encoder pass.
pub fn bsi_counting(seed: u64) -> Suite {
    let start = Instant::now();
    let mut s = Suite::new("suppression counting");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for lambda in [0.0, 0.15, 0.30, 0.5] {
        for n in [16usize, 64, 256] {
            let want = (lambda * n as f64).floor() as usize;
            for trial in 0..8 {
                // coarse levels force ties on even trials
                let levels = if trial % 2 == 0 { 5.0 } else { 1e9 };
                let scores: Vec<f64> = (0..n)
                    .map(|_| (rng.random::<f64>() * levels).floor() / levels)
                    .collect();
                let mask = bsi::select_filter_mask(&scores, lambda);
                let chosen: Vec<usize> = mask.indices().collect();
                let ordered = chosen.iter().all(|&i| {
                    (0..n)
                        .filter(|j| !mask.suppressed[*j])
                        .all(|j| scores[i] < scores[j] || (scores[i] == scores[j] && i < j))
                });
                let label = format!("lambda {lambda}, n_s {n}, trial {trial}");
                s.record(
                    mask.count() == want && ordered && chosen == oracle::lowest_k(&scores, want),
                    || format!("{label}: {} zeroed, want {want}, ordered {ordered}", mask.count()),
                );
            }
        }
    }
    let staged = FilterSchedule::staged([0.0, 0.15, 0.30], 12);
    let expected: Vec<f64> = [0.0; 4].into_iter().chain([0.15; 4]).chain([0.30; 4]).collect();
    s.record(staged.as_ref().map(|f| f.lambdas == expected).unwrap_or(false), || {
        format!("staged schedule over 12 layers is {staged:?}")
    });
    s.record(FilterSchedule::staged([0.0, 0.15, 0.30], 8).is_err(), || {
        "8 layers should not split into thirds".into()
    });
    let enc = encoded_pass(
        seed,
        &FilterSchedule {
            lambdas: vec![0.0, 0.5],
        },
    );
    let want = tiny_config(2).n_s() / 2;
    s.outcome(
        "2-layer encoder at [0, 0.5]",
        enc.map(|(_, _, traces)| {
            traces[0].mask_rgb.count() == 0
                && traces[0].mask_x.count() == 0
                && traces[1].mask_rgb.count() == want
                && traces[1].mask_x.count() == want
        }),
        || format!("expected {want} zeroed after layer 2"),
    );
    s.done(start)
}

type Traced = (Tensor, Tensor, Vec<encoder::LayerTrace>);

/// Two-layer tiny encoder over random inputs with one temporal token each.
fn encoded_pass(seed: u64, schedule: &FilterSchedule) -> Result<Traced> {
    let cfg = tiny_config(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = ParamStore::new();
    {
        let mut init = Init {
            store: &mut st,
            rng: &mut rng,
        };
        encoder::init_encoder(&mut init, &cfg);
        bsi::init_bsi(&mut init, &cfg);
    }
    let img_rgb = toy_images(&cfg, Modality::Rgb, &mut rng);
    let img_x = toy_images(&cfg, Modality::X, &mut rng);
    let queue = [0; 2].map(|_| Tensor::randn(&[1, cfg.d_model], 1.0, &mut rng));
    let mut sess = Session::new(&st);
    let r = encoder::embed_tokens(&mut sess, &cfg, Modality::Rgb, images(&img_rgb), Some(&queue[0]))?;
    let x = encoder::embed_tokens(&mut sess, &cfg, Modality::X, images(&img_x), Some(&queue[1]))?;
    let e = encoder::encode(&mut sess, &cfg, r, x, schedule)?;
    Ok((
        sess.g.value(e.rgb.tokens).clone(),
        sess.g.value(e.x.tokens).clone(),
        e.layers,
    ))
}

fn zero_prompt_encoder(seed: u64) -> Result<bool> {
    let cfg = tiny_config(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = ParamStore::new();
    {
        let mut init = Init {
            store: &mut st,
            rng: &mut rng,
        };
        encoder::init_encoder(&mut init, &cfg);
        bsi::init_bsi(&mut init, &cfg);
    }
    st.zero_prefix("bsi.");
    let img_rgb = toy_images(&cfg, Modality::Rgb, &mut rng);
    let img_x = toy_images(&cfg, Modality::X, &mut rng);
    let run = |full: bool| -> Result<(Tensor, Tensor)> {
        let mut sess = Session::new(&st);
        let r = encoder::embed_tokens(&mut sess, &cfg, Modality::Rgb, images(&img_rgb), None)?;
        let x = encoder::embed_tokens(&mut sess, &cfg, Modality::X, images(&img_x), None)?;
        let (r, x): (ModalityTokens, ModalityTokens) = if full {
            let e = encoder::encode(&mut sess, &cfg, r, x, &FilterSchedule::disabled(cfg.layers))?;
            (e.rgb, e.x)
        } else {
            let (mut r, mut x) = (r, x);
            for i in 0..cfg.layers {
                r.tokens = encoder::transformer_layer(&mut sess, &format!("enc.{i}"), cfg.heads, r.tokens)?.0;
                x.tokens = encoder::transformer_layer(&mut sess, &format!("enc.{i}"), cfg.heads, x.tokens)?.0;
            }
            (r, x)
        };
        Ok((sess.g.value(r.tokens).clone(), sess.g.value(x.tokens).clone()))
    };
    let (a, b) = (run(true)?, run(false)?);
    Ok(identical(&a.0, &b.0) && identical(&a.1, &b.1))
}

/// Configurations that must collapse exactly onto simpler computations.
pub fn degenerate_identities(seed: u64) -> Suite {
    let start = Instant::now();
    let mut s = Suite::new("degenerate identities");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..4 {
        s.outcome(
            &format!("zero prompts and no suppression, trial {trial}"),
            zero_prompt_encoder(seed + trial),
            || "encoder differs from stacked transformer layers".into(),
        );
    }
    for trial in 0..16 {
        let (l, d, n) = (
            rng.random_range(1..=32),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let x = Tensor::randn(&[l, d], 1.0, &mut rng);
        let mut p = random_ssm(d, n, &mut rng);
        p.proj_c.fill(0.0);
        let skip = Tensor::from_fn(&[l, d], |i| p.d_skip.data()[i % d] * x.data()[i]);
        s.outcome(
            &format!("null readout, trial {trial}"),
            ssm::selective_scan(&x, &p).map(|y| identical(&y, &skip)),
            || "output differs from D⊙x".into(),
        );
        p.d_skip.fill(0.0);
        s.outcome(
            &format!("null readout and skip, trial {trial}"),
            ssm::selective_scan(&x, &p).map(|y| y.data().iter().all(|&v| v == 0.0)),
            || "output is not zero".into(),
        );
        let q = random_ssm(d, n, &mut rng);
        s.outcome(
            &format!("identical modalities, trial {trial}"),
            (|| {
                let single = ssm::selective_scan(&x, &q)?;
                let (a, b) = ssm::cross_selective_scan(&x, &x, &q, &q)?;
                Ok(identical(&a, &single) && identical(&b, &single))
            })(),
            || "readout exchange changed the output".into(),
        );
    }
    for trial in 0..4 {
        let mut st = ParamStore::new();
        let dims = MambaDims {
            d_model: 6,
            d_inner: 8,
            state: 4,
            conv_kernel: 3,
        };
        ssm::init_mamba(
            &mut Init {
                store: &mut st,
                rng: &mut rng,
            },
            "a",
            dims,
        );
        st.copy_prefix("a.", "b.");
        let x = Tensor::randn(&[9, 6], 1.0, &mut rng);
        s.outcome(
            &format!("identical cross block, trial {trial}"),
            (|| {
                let mut sess = Session::new(&st);
                let xv = sess.constant(x.clone());
                let single = ssm::mamba_block(&mut sess, "a", xv)?;
                let (a, b) = ssm::cross_mamba_block(&mut sess, "a", "b", xv, xv)?;
                let v = |t| sess.g.value(t);
                Ok(identical(v(a), v(single)) && identical(v(b), v(single)))
            })(),
            || "cross block differs from the plain block".into(),
        );
        for dir in ["fwd", "bwd"] {
            st.get_mut(&format!("a.{dir}.proj_c")).expect("registered").fill(0.0);
            st.get_mut(&format!("a.{dir}.d_skip")).expect("registered").fill(0.0);
        }
        s.outcome(
            &format!("null scans leave the residual, trial {trial}"),
            (|| {
                let mut sess = Session::new(&st);
                let xv = sess.constant(x.clone());
                let y = ssm::mamba_block(&mut sess, "a", xv)?;
                Ok(identical(sess.g.value(y), &x))
            })(),
            || "block output differs from its input".into(),
        );
    }
    s.done(start)
}

/// Length and contents after arbitrary push sequences.
pub fn queue_contract(seed: u64) -> Suite {
    let start = Instant::now();
    let mut s = Suite::new("temporal queue");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    s.record(ModelConfig::toy().m == 4, || "default capacity is not 4".into());
    for m in 1..=6 {
        for pushes in 0..=3 * m + 2 {
            let mut q = TemporalQueue::new(m);
            let mut f = TemporalQueue::new(m);
            let mut all = vec![];
            for _ in 0..pushes {
                let t = Tensor::randn(&[3], 1.0, &mut rng);
                all.push(t.clone());
                q.push(t.clone());
                f = tsg::queue_push(f, t);
            }
            let keep = pushes.min(m);
            let tail = &all[pushes - keep..];
            let ok = q.len() == keep
                && q.t == pushes
                && q.iter().zip(tail).all(|(a, b)| identical(a, b))
                && q == f
                && q.stacked().map_or(keep == 0, |st| st.shape() == [keep, 3]);
            s.record(ok, || format!("m {m}, {pushes} pushes: length {}", q.len()));
        }
    }
    s.done(start)
}

/// Success and precision rates at their enumerated values.
pub fn metric_sanity(seed: u64) -> Suite {
    let start = Instant::now();
    let mut s = Suite::new("metric sanity");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gts: Vec<PixelBox> = (0..10)
        .map(|_| {
            PixelBox::new(
                rng.random_range(0.0..100.0),
                rng.random_range(0.0..100.0),
                rng.random_range(5.0..40.0),
                rng.random_range(5.0..40.0),
            )
        })
        .collect();
    let far: Vec<PixelBox> = gts.iter().map(|b| PixelBox::new(b.x + 500.0, b.y, b.w, b.h)).collect();
    let half: Vec<PixelBox> = gts[..5].iter().chain(&far[5..]).copied().collect();
    for (label, preds, sr, pr) in [
        ("perfect", &gts, 50.0 / 51.0, 1.0),
        ("disjoint", &far, 0.0, 0.0),
        ("half and half", &half, 25.0 / 51.0, 0.5),
    ] {
        let ious: Vec<f64> = preds.iter().zip(&gts).map(|(p, g)| metrics::iou(p, g)).collect();
        let got = metrics::success_rate(preds, &gts)
            .and_then(|a| Ok((a, metrics::precision_rate(preds, &gts, PRECISION_RADIUS)?)));
        let enumerated = oracle::success_rate(&ious);
        let ok = matches!(got, Ok((a, p)) if a == sr && a == enumerated && p == pr);
        s.record(ok, || format!("{label}: got {got:?}, want sr {sr} pr {pr}"));
    }
    s.done(start)
}

/// Optimized layers against their naive counterparts.
pub fn layer_oracles(seed: u64) -> Suite {
    let start = Instant::now();
    let mut s = Suite::new("layer oracles");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..4 {
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let got = g.matmul(va, vb).map(|v| deviation(g.value(v), &oracle::matmul(&a, &b)));
        s.outcome(&format!("matmul {trial}"), got.map(|d| d <= 1e-12), || {
            "mismatch".into()
        });

        let (q, k, v) = (
            Tensor::randn(&[6, 4], 1.0, &mut rng),
            Tensor::randn(&[6, 4], 1.0, &mut rng),
            Tensor::randn(&[6, 4], 1.0, &mut rng),
        );
        let got = (|| {
            let mut g = Graph::new();
            let (vq, vk, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let kt = g.transpose(vk)?;
            let sc = g.matmul(vq, kt)?;
            let sc = g.scale(sc, 0.5);
            let w = g.softmax_rows(sc)?;
            let o = g.matmul(w, vv)?;
            let (oo, ow) = oracle::attention(&q, &k, &v);
            Ok(deviation(g.value(o), &oo).max(deviation(g.value(w), &ow)))
        })();
        s.outcome(&format!("attention {trial}"), got.map(|d| d <= 1e-12), || {
            "mismatch".into()
        });

        let (hs, ws, cin, cout) = (3 + trial, 4, 3, 2);
        let x = Tensor::randn(&[hs * ws, cin], 1.0, &mut rng);
        let w = Tensor::randn(&[9 * cin, cout], 1.0, &mut rng);
        let got = (|| {
            let mut g = Graph::new();
            let vx = g.constant(x.clone());
            let vw = g.constant(w.clone());
            let cols = g.gather(vx, head::im2col_3x3((hs, ws), cin), &[hs * ws, 9 * cin])?;
            let y = g.matmul(cols, vw)?;
            Ok(deviation(g.value(y), &oracle::conv3x3(&x, (hs, ws), &w)))
        })();
        s.outcome(&format!("3x3 conv {trial}"), got.map(|d| d <= 1e-12), || {
            "mismatch".into()
        });

        let mut st = ParamStore::new();
        let dims = MambaDims {
            d_model: 6,
            d_inner: 8,
            state: 4,
            conv_kernel: 4,
        };
        ssm::init_mamba(
            &mut Init {
                store: &mut st,
                rng: &mut rng,
            },
            "m",
            dims,
        );
        let xin = Tensor::randn(&[10, 6], 1.0, &mut rng);
        let got = (|| {
            let mut sess = Session::new(&st);
            let xv = sess.constant(xin.clone());
            let y = ssm::mamba_block(&mut sess, "m", xv)?;
            Ok(deviation(sess.g.value(y), &oracle::mamba_block(&xin, &st, "m")))
        })();
        s.outcome(&format!("mamba block {trial}"), got.map(|d| d <= 1e-9), || {
            "mismatch".into()
        });

        let cfg = tiny_config(3);
        let mut st = ParamStore::new();
        tsg::init_tsg(
            &mut Init {
                store: &mut st,
                rng: &mut rng,
            },
            &cfg,
        );
        let (ir, ix) = (
            Tensor::randn(&[6, cfg.d_model], 1.0, &mut rng),
            Tensor::randn(&[6, cfg.d_model], 1.0, &mut rng),
        );
        let got = (|| {
            let mut sess = Session::new(&st);
            let (a, b) = (sess.constant(ir.clone()), sess.constant(ix.clone()));
            let (tr, tx) = tsg::tsg_step(&mut sess, a, b)?;
            let (or, ox) = oracle::cross_mamba_block(&ir, &ix, &st, "tsg.rgb", "tsg.x");
            let last = |t: &Tensor| Tensor::from_vec(t.row(5).to_vec());
            Ok(deviation(sess.g.value(tr), &last(&or)).max(deviation(sess.g.value(tx), &last(&ox))))
        })();
        s.outcome(&format!("temporal token {trial}"), got.map(|d| d <= 1e-9), || {
            "mismatch".into()
        });

        let p = Tensor::rand_uniform(&[5, 5], 0.01, 0.99, &mut rng);
        let target = head::gaussian_target(&BBox::new(0.3, 0.7, 0.4, 0.2), (5, 5));
        let got = (|| {
            let mut g = Graph::new();
            let vp = g.constant(p.clone());
            let l = head::focal_loss(&mut g, vp, &target)?;
            Ok(rel(g.value(l).data()[0], oracle::focal_loss(p.data(), target.data())))
        })();
        s.outcome(&format!("focal loss {trial}"), got.map(|d| d <= 1e-12), || {
            "mismatch".into()
        });

        let (l, d, n) = (rng.random_range(2..=20), 4, 3);
        let xs = Tensor::randn(&[l, d], 1.0, &mut rng);
        let padded = Tensor::from_fn(&[2 * l, d], |i| if i < l * d { xs.data()[i] } else { 0.0 });
        let p = random_ssm(d, n, &mut rng);
        let got = (|| {
            let short = ssm::selective_scan(&xs, &p)?;
            let long = ssm::selective_scan(&padded, &p)?;
            Ok(short.data() == &long.data()[..l * d])
        })();
        s.outcome(&format!("zero padding keeps the prefix {trial}"), got, || {
            "prefix changed".into()
        });
    }
    s.done(start)
}

/// Every suite at its release size.
pub fn run_all(seed: u64) -> Vec<Suite> {
    vec![
        scan_oracle(1000, seed),
        zoh_oracle(10_000, seed),
        gradient_checks(seed),
        bsi_counting(seed),
        degenerate_identities(seed),
        queue_contract(seed),
        metric_sanity(seed),
        layer_oracles(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_passes(s: Suite) {
        assert!(s.passed(), "{s}");
    }

    #[test]
    fn scans_match_recurrences() {
        assert_passes(scan_oracle(100, 1));
    }

    #[test]
    fn discretization_matches_series() {
        assert_passes(zoh_oracle(2000, 2));
    }

    #[test]
    fn gradients_match_differences() {
        assert_passes(gradient_checks(3));
    }

    #[test]
    fn suppression_counts() {
        assert_passes(bsi_counting(4));
    }

    #[test]
    fn degenerate_configurations_collapse() {
        assert_passes(degenerate_identities(5));
    }

    #[test]
    fn queue_keeps_most_recent() {
        assert_passes(queue_contract(6));
    }

    #[test]
    fn metrics_hit_enumerated_values() {
        assert_passes(metric_sanity(7));
    }

    #[test]
    fn layers_match_naive_versions() {
        assert_passes(layer_oracles(8));
    }

    #[test]
    fn failures_are_reported() {
        let mut s = Suite::new("demo");
        s.record(true, || unreachable!());
        s.record(false, || "bad".into());
        assert!(!s.passed());
        assert!(s.to_string().contains("1/2 passed"));
        assert!(!Suite::new("empty").passed());
    }
}
