//! Convolutional prediction head over the search grid, box decoding, and the
//! training objective `L_cls + α·L_iou + β·L_1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::FusedFeature;
use crate::model::ModelConfig;
use crate::params::{Init, Session};
use crate::tensor::Tensor;

/// Box as centre and size, normalized to the search region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn check(&self) -> Result<()> {
        let ok = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !ok || !(self.w > 0.0) || !(self.h > 0.0) {
            return Err(Error::Domain(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Generalized IoU of two boxes, computed directly.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// Head maps on the graph; rows are grid cells in row-major order.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[P, 1]`
    pub cls: Var,
    /// `[P, 2]`, x then y sub-cell offset.
    pub offset: Var,
    /// `[P, 2]`, normalized width then height.
    pub size: Var,
    pub grid: (usize, usize),
}

/// Head maps as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `[hs, ws]`
    pub cls_map: Tensor,
    /// `[2, hs, ws]`
    pub offset_map: Tensor,
    /// `[2, hs, ws]`
    pub size_map: Tensor,
}

fn channel_first(t: &Tensor, hs: usize, ws: usize) -> Result<Tensor> {
    let p = hs * ws;
    Tensor::new(
        vec![2, hs, ws],
        (0..2 * p).map(|i| t.data()[(i % p) * 2 + i / p]).collect(),
    )
}

impl HeadVars {
    pub fn output(&self, g: &Graph) -> Result<HeadOutput> {
        let (hs, ws) = self.grid;
        Ok(HeadOutput {
            cls_map: g.value(self.cls).clone().reshape(&[hs, ws])?,
            offset_map: channel_first(g.value(self.offset), hs, ws)?,
            size_map: channel_first(g.value(self.size), hs, ws)?,
        })
    }
}

impl HeadOutput {
    pub fn grid(&self) -> (usize, usize) {
        (self.cls_map.shape()[0], self.cls_map.shape()[1])
    }

    /// Row, column and score of the highest classification cell, lowest flat
    /// index on ties.
    pub fn peak(&self) -> (usize, usize, f64) {
        let ws = self.grid().1;
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
        for (i, &v) in self.cls_map.data().iter().enumerate() {
            if v > best {
                best = v;
                arg = i;
            }
        }
        (arg / ws, arg % ws, best)
    }
}

/// Loss balance: `L_cls + alpha·L_iou + beta·L_1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 2.0, beta: 5.0 }
    }
}

/// Zero-padded 3×3 neighbourhood gather: `[P, C] -> [P, 9·C]`, columns in
/// `(dy, dx, channel)` order.
pub fn im2col_3x3(grid: (usize, usize), channels: usize) -> Vec<Option<usize>> {
    let (hs, ws) = grid;
    let mut index = Vec::with_capacity(hs * ws * 9 * channels);
    for r in 0..hs as isize {
        for c in 0..ws as isize {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (y, x) = (r + dy, c + dx);
                    let inside = (0..hs as isize).contains(&y) && (0..ws as isize).contains(&x);
                    for ch in 0..channels {
                        index.push(inside.then(|| (y as usize * ws + x as usize) * channels + ch));
                    }
                }
            }
        }
    }
    index
}

const TOWERS: [(&str, usize); 3] = [("cls", 1), ("offset", 2), ("size", 2)];

fn tower(sess: &mut Session<'_>, name: &str, x: Var, grid: (usize, usize), stages: usize) -> Result<Var> {
    let p = grid.0 * grid.1;
    let mut h = x;
    for k in 0..stages {
        let prefix = format!("head.{name}.{k}");
        let cin = sess.g.shape(h)[1];
        let cols = sess.g.gather(h, im2col_3x3(grid, cin), &[p, 9 * cin])?;
        let w = sess.p(&format!("{prefix}.w"))?;
        let y = sess.g.matmul(cols, w)?;
        let gamma = sess.p(&format!("{prefix}.bn.g"))?;
        let beta = sess.p(&format!("{prefix}.bn.b"))?;
        let y = sess.g.mul_row(y, gamma)?;
        let y = sess.g.add_row(y, beta)?;
        h = sess.g.relu(y);
    }
    let out = sess.linear(&format!("head.{name}.out"), h)?;
    Ok(sess.g.sigmoid(out))
}

/// Three conv towers over the search grid: classification, sub-cell offset
/// and normalized size, each squashed by a sigmoid.
pub fn head_forward(sess: &mut Session<'_>, fused: &FusedFeature, stages: usize) -> Result<HeadVars> {
    let x = fused.search_tokens(sess)?;
    let grid = fused.search_grid;
    if sess.g.shape(x)[0] != grid.0 * grid.1 {
        return Err(Error::InvalidShape(format!(
            "{} search tokens do not fill a {}x{} grid",
            sess.g.shape(x)[0],
            grid.0,
            grid.1
        )));
    }
    let cls = tower(sess, TOWERS[0].0, x, grid, stages)?;
    let offset = tower(sess, TOWERS[1].0, x, grid, stages)?;
    let size = tower(sess, TOWERS[2].0, x, grid, stages)?;
    Ok(HeadVars {
        cls,
        offset,
        size,
        grid,
    })
}

pub fn init_head<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) {
    for (name, out) in TOWERS {
        let mut cin = cfg.d_model;
        for (k, &cout) in cfg.head_channels.iter().enumerate() {
            let prefix = format!("head.{name}.{k}");
            init.normal(
                &format!("{prefix}.w"),
                &[9 * cin, cout],
                (2.0 / (9 * cin) as f64).sqrt(),
            );
            init.constant(&format!("{prefix}.bn.g"), &[cout], 1.0);
            init.constant(&format!("{prefix}.bn.b"), &[cout], 0.0);
            cin = cout;
        }
        init.linear(&format!("head.{name}.out"), cin, out, true);
    }
}

/// Box at the classification peak: `cx = (col + off_x)/ws`,
/// `cy = (row + off_y)/hs`, size read at the same cell.
pub fn decode_bbox(out: &HeadOutput) -> BBox {
    let (hs, ws) = out.grid();
    let (r, c, _) = out.peak();
    let at = |m: &Tensor, ch: usize| m.data()[ch * hs * ws + r * ws + c];
    BBox {
        cx: (c as f64 + at(&out.offset_map, 0)) / ws as f64,
        cy: (r as f64 + at(&out.offset_map, 1)) / hs as f64,
        w: at(&out.size_map, 0),
        h: at(&out.size_map, 1),
    }
}

/// Grid cell containing the box centre, clamped to the grid.
pub fn gt_cell(gt: &BBox, grid: (usize, usize)) -> (usize, usize) {
    let (hs, ws) = grid;
    let clamp = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
    (clamp(gt.cy, hs), clamp(gt.cx, ws))
}

/// Gaussian splat centred on the ground-truth cell, peak exactly 1, with
/// `σ = max(1, diagonal in cells / 6)`.
pub fn gaussian_target(gt: &BBox, grid: (usize, usize)) -> Tensor {
    let (hs, ws) = grid;
    let (r0, c0) = gt_cell(gt, grid);
    let diag = ((gt.w * ws as f64).powi(2) + (gt.h * hs as f64).powi(2)).sqrt();
    let sigma = (diag / 6.0).max(1.0);
    Tensor::from_fn(&[hs, ws], |i| {
        let (dr, dc) = ((i / ws) as f64 - r0 as f64, (i % ws) as f64 - c0 as f64);
        (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp()
    })
}

const PROB_EPS: f64 = 1e-12;

/// Penalty-reduced focal loss: `−(1−p)²·log p` at cells where the target is
/// 1, `−(1−y)⁴·p²·log(1−p)` elsewhere, normalized by the peak count.
pub fn focal_loss(g: &mut Graph, cls: Var, target: &Tensor) -> Result<Var> {
    let n = target.numel();
    if g.value(cls).numel() != n {
        return Err(Error::Shape {
            op: "focal_loss",
            lhs: g.shape(cls).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if let Some(y) = target.data().iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(Error::Domain(format!("focal target value {y} outside [0, 1]")));
    }
    let pos = Tensor::from_fn(&[n], |i| if target.data()[i] == 1.0 { 1.0 } else { 0.0 });
    let neg = Tensor::from_fn(&[n], |i| {
        let y = target.data()[i];
        if y == 1.0 {
            0.0
        } else {
            (1.0 - y).powi(4)
        }
    });
    let peaks = pos.data().iter().sum::<f64>().max(1.0);
    let p = g.reshape(cls, &[n])?;
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let np = g.neg(p);
    let q = g.add_scalar(np, 1.0);
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;
    let q2 = g.mul(q, q)?;
    let p2 = g.mul(p, p)?;
    let pos_term = g.mul(q2, log_p)?;
    let neg_term = g.mul(p2, log_q)?;
    let pos_w = g.constant(pos);
    let neg_w = g.constant(neg);
    let a = g.mul(pos_term, pos_w)?;
    let b = g.mul(neg_term, neg_w)?;
    let s = g.add(a, b)?;
    let s = g.sum(s);
    Ok(g.scale(s, -1.0 / peaks))
}

fn scalar_at(g: &mut Graph, v: Var, i: usize) -> Result<Var> {
    g.gather(v, vec![Some(i)], &[1])
}

/// `1 − GIoU(pred, gt)` with `pred = [cx, cy, w, h]` on the graph.
pub fn giou_loss(g: &mut Graph, pred: Var, gt: &BBox) -> Result<Var> {
    if g.value(pred).numel() != 4 {
        return Err(Error::InvalidShape(format!(
            "box prediction must have 4 entries, got {:?}",
            g.shape(pred)
        )));
    }
    gt.check()?;
    let pv = g.value(pred).data();
    BBox::new(pv[0], pv[1], pv[2], pv[3]).check()?;
    let [cx, cy, w, h] = [0, 1, 2, 3].map(|i| scalar_at(g, pred, i));
    let (cx, cy, w, h) = (cx?, cy?, w?, h?);
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let x1 = g.sub(cx, hw)?;
    let x2 = g.add(cx, hw)?;
    let y1 = g.sub(cy, hh)?;
    let y2 = g.add(cy, hh)?;
    let [gx1, gy1, gx2, gy2] = gt.corners().map(|v| g.constant(Tensor::from_vec(vec![v])));
    let ix1 = g.maximum(x1, gx1)?;
    let ix2 = g.minimum(x2, gx2)?;
    let iy1 = g.maximum(y1, gy1)?;
    let iy2 = g.minimum(y2, gy2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let area = g.mul(w, h)?;
    let area = g.add_scalar(area, gt.area());
    let union = g.sub(area, inter)?;
    let iou = g.div(inter, union)?;
    let ex1 = g.minimum(x1, gx1)?;
    let ex2 = g.maximum(x2, gx2)?;
    let ey1 = g.minimum(y1, gy1)?;
    let ey2 = g.maximum(y2, gy2)?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let enc = g.mul(ew, eh)?;
    let gap = g.sub(enc, union)?;
    let frac = g.div(gap, enc)?;
    let giou = g.sub(iou, frac)?;
    let ng = g.neg(giou);
    Ok(g.add_scalar(ng, 1.0))
}

/// Mean absolute error over `(cx, cy, w, h)`.
pub fn l1_loss(g: &mut Graph, pred: Var, gt: &BBox) -> Result<Var> {
    let t = g.constant(Tensor::from_vec(gt.to_array().to_vec()));
    let p = g.reshape(pred, &[4])?;
    let d = g.sub(p, t)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Box regressed at `cell`: `[(col + off_x)/ws, (row + off_y)/hs, w, h]`.
pub fn box_at_cell(g: &mut Graph, head: &HeadVars, cell: (usize, usize)) -> Result<Var> {
    let (hs, ws) = head.grid;
    let (r, c) = cell;
    let p = r * ws + c;
    let off = g.gather(head.offset, vec![Some(2 * p), Some(2 * p + 1)], &[2])?;
    let shift = g.constant(Tensor::from_vec(vec![c as f64, r as f64]));
    let inv = g.constant(Tensor::from_vec(vec![1.0 / ws as f64, 1.0 / hs as f64]));
    let centre = g.add(off, shift)?;
    let centre = g.mul(centre, inv)?;
    let size = g.gather(head.size, vec![Some(2 * p), Some(2 * p + 1)], &[2])?;
    let centre = g.reshape(centre, &[1, 2])?;
    let size = g.reshape(size, &[1, 2])?;
    let b = g.concat_cols(&[centre, size])?;
    g.reshape(b, &[4])
}

/// The individual objective terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub iou: Var,
    pub l1: Var,
}

/// Focal loss on the classification map plus GIoU and L1 on the box
/// regressed at the ground-truth cell.
pub fn total_loss(g: &mut Graph, head: &HeadVars, gt: &BBox, weights: LossWeights) -> Result<LossTerms> {
    if weights.alpha < 0.0 || weights.beta < 0.0 {
        return Err(Error::Domain(format!("negative loss weights {weights:?}")));
    }
    let target = gaussian_target(gt, head.grid);
    let cls = focal_loss(g, head.cls, &target)?;
    let pred = box_at_cell(g, head, gt_cell(gt, head.grid))?;
    let iou = giou_loss(g, pred, gt)?;
    let l1 = l1_loss(g, pred, gt)?;
    let wi = g.scale(iou, weights.alpha);
    let wl = g.scale(l1, weights.beta);
    let total = g.add(cls, wi)?;
    let total = g.add(total, wl)?;
    Ok(LossTerms { total, cls, iou, l1 })
}
