//! Reverse-mode autodiff on dynamically shaped f64 tensors.
//!
//! A [`Tape`] is an append-only arena of nodes; every op pushes one node whose
//! parents precede it, so [`Tape::backward`] is a single reverse sweep. The op
//! set is exactly what the model and the losses need: channel-wise linear maps,
//! space-to-depth patch merging, nearest upsampling, softmax, fused CE/KL with
//! ignore masking, and masked per-class feature means.
//!
//! Tensors are f64 throughout; gradient checks against central finite
//! differences are part of the acceptance suite.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

use crate::error::{MmkdError, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Context handed to a node's backward function.
struct BackCtx<'a> {
    value: &'a ArrayD<f64>,
    parents: Vec<&'a ArrayD<f64>>,
    grad: &'a ArrayD<f64>,
}

type BackFn = Box<dyn Fn(&BackCtx) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

pub fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts an input node; gradients accumulate here.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|c: &BackCtx| vec![c.grad.clone(), c.grad.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|c: &BackCtx| {
                vec![c.grad.clone(), c.grad.mapv(|g| -g)]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|c: &BackCtx| {
                vec![c.grad * c.parents[1], c.grad * c.parents[0]]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x * k);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |c: &BackCtx| vec![c.grad.mapv(|g| g * k)])),
        )
    }

    /// x * sigmoid(x) — the smooth nonlinearity used by the encoder/decoder.
    pub fn silu(&mut self, a: Var) -> Var {
        fn sigmoid(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|c: &BackCtx| {
                let x = c.parents[0];
                let dx = x.mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                vec![&dx * c.grad]
            })),
        )
    }

    /// Channel-wise linear map: x [B,Ci,h,w] with w [Co,Ci], b [Co] -> [B,Co,h,w].
    pub fn linear_chan(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = linear_chan_fwd(self.value(x), self.value(w), self.value(b));
        self.push(
            v,
            vec![x.0, w.0, b.0],
            Some(Box::new(|c: &BackCtx| {
                linear_chan_bwd(c.parents[0], c.parents[1], c.grad)
            })),
        )
    }

    /// [B,C,h,w] -> [B,C*r*r,h/r,w/r]; channel block (c, di, dj) holds pixel
    /// (i*r+di, j*r+dj) of input channel c.
    pub fn space_to_depth(&mut self, x: Var, r: usize) -> Var {
        let v = space_to_depth_fwd(self.value(x), r);
        self.push(
            v,
            vec![x.0],
            Some(Box::new(move |c: &BackCtx| {
                vec![space_to_depth_bwd(c.grad, c.parents[0].shape(), r)]
            })),
        )
    }

    /// Nearest-neighbor upsample by integer factor r on the trailing two axes.
    pub fn upsample_nearest(&mut self, x: Var, r: usize) -> Var {
        let v = upsample_fwd(self.value(x), r);
        self.push(
            v,
            vec![x.0],
            Some(Box::new(move |c: &BackCtx| {
                vec![upsample_bwd(c.grad, c.parents[0].shape(), r)]
            })),
        )
    }

    /// Bilinear [B,C,h,w] -> [B,C,h*r,w*r] upsampling with half-pixel-center
    /// sampling; edge samples clamp to the border.
    pub fn upsample_bilinear(&mut self, x: Var, r: usize) -> Var {
        let v = bilinear_fwd(self.value(x), r);
        self.push(
            v,
            vec![x.0],
            Some(Box::new(move |c: &BackCtx| {
                vec![bilinear_bwd(c.grad, c.parents[0].shape(), r)]
            })),
        )
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat_chan(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let views: Vec<ArrayViewD<f64>> = xs.iter().map(|v| self.value(*v).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_chan shape mismatch");
        let sizes: Vec<usize> = xs.iter().map(|v| self.value(*v).shape()[1]).collect();
        self.push(
            v,
            xs.iter().map(|v| v.0).collect(),
            Some(Box::new(move |c: &BackCtx| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &s in &sizes {
                    let part = c
                        .grad
                        .slice_axis(Axis(1), ndarray::Slice::from(start..start + s))
                        .to_owned();
                    out.push(part);
                    start += s;
                }
                out
            })),
        )
    }

    /// Elementwise mean of same-shaped tensors (modality fusion).
    pub fn mean_vars(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let k = xs.len() as f64;
        let mut v = self.value(xs[0]).clone();
        for x in &xs[1..] {
            v += self.value(*x);
        }
        v.mapv_inplace(|x| x / k);
        self.push(
            v,
            xs.iter().map(|v| v.0).collect(),
            Some(Box::new(move |c: &BackCtx| {
                let g = c.grad.mapv(|g| g / k);
                vec![g; c.parents.len()]
            })),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Var {
        let v = softmax_nd(self.value(x), axis);
        self.push(
            v,
            vec![x.0],
            Some(Box::new(move |c: &BackCtx| {
                // dx = y * (g - sum_axis(g * y))
                let y = c.value;
                let gy = c.grad * y;
                let s = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                vec![y * &(c.grad - &s)]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = scalar(self.value(x).sum());
        self.push(
            v,
            vec![x.0],
            Some(Box::new(|c: &BackCtx| {
                let g = c.grad.iter().next().copied().unwrap();
                vec![ArrayD::from_elem(c.parents[0].raw_dim(), g)]
            })),
        )
    }

    /// Elementwise 1/(x + eps).
    pub fn recip_eps(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x).mapv(|x| 1.0 / (x + eps));
        self.push(
            v,
            vec![x.0],
            Some(Box::new(move |c: &BackCtx| {
                let d = c.parents[0].mapv(|x| -1.0 / ((x + eps) * (x + eps)));
                vec![&d * c.grad]
            })),
        )
    }

    /// Selects sample `n` along the batch axis: [B, ...] -> [...].
    pub fn index_batch(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x).index_axis(Axis(0), n).to_owned();
        self.push(
            v,
            vec![x.0],
            Some(Box::new(move |c: &BackCtx| {
                let mut g = ArrayD::zeros(c.parents[0].raw_dim());
                g.index_axis_mut(Axis(0), n).assign(c.grad);
                vec![g]
            })),
        )
    }

    /// Fused cross-entropy with ignore masking.
    ///
    /// `logits` [B,C,H,W], `labels` [B,H,W] with values in [0,C) or
    /// `ignore`. Mean reduction over all non-ignored pixels; if every pixel is
    /// ignored the loss is 0 and the returned flag is set.
    pub fn ce_loss(&mut self, logits: Var, labels: &ArrayD<u8>, ignore: u8) -> Result<(Var, bool)> {
        let l = self.value(logits);
        let shape = l.shape().to_vec();
        if shape.len() != 4 {
            return Err(MmkdError::Contract(format!(
                "ce_loss expects [B,C,H,W] logits, got rank {}",
                shape.len()
            )));
        }
        let c_classes = shape[1];
        if labels.shape() != [shape[0], shape[2], shape[3]] {
            return Err(MmkdError::Contract(
                "ce_loss label shape mismatch".to_string(),
            ));
        }
        for &v in labels.iter() {
            if v != ignore && (v as usize) >= c_classes {
                return Err(MmkdError::Contract(format!(
                    "label value {v} outside [0,{c_classes})"
                )));
            }
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(MmkdError::Contract("non-finite logits".to_string()));
        }
        let lsm = log_softmax_nd(l, 1);
        let mut total = 0.0;
        let mut counted = 0usize;
        for b in 0..shape[0] {
            for i in 0..shape[2] {
                for j in 0..shape[3] {
                    let y = labels[[b, i, j]];
                    if y == ignore {
                        continue;
                    }
                    total -= lsm[[b, y as usize, i, j]];
                    counted += 1;
                }
            }
        }
        let all_ignored = counted == 0;
        let value = if all_ignored {
            0.0
        } else {
            total / counted as f64
        };
        let labels = labels.clone();
        let var = self.push(
            scalar(value),
            vec![logits.0],
            Some(Box::new(move |c: &BackCtx| {
                let g = c.grad.iter().next().copied().unwrap();
                let x = c.parents[0];
                let mut dx = ArrayD::zeros(x.raw_dim());
                if counted > 0 {
                    let sm = softmax_nd(x, 1);
                    let shape = x.shape();
                    let w = g / counted as f64;
                    for b in 0..shape[0] {
                        for i in 0..shape[2] {
                            for j in 0..shape[3] {
                                let y = labels[[b, i, j]];
                                if y == ignore {
                                    continue;
                                }
                                for cc in 0..shape[1] {
                                    let one = if cc == y as usize { 1.0 } else { 0.0 };
                                    dx[[b, cc, i, j]] = (sm[[b, cc, i, j]] - one) * w;
                                }
                            }
                        }
                    }
                }
                vec![dx]
            })),
        );
        Ok((var, all_ignored))
    }

    /// Fused KL divergence KL(P(t) || P(x)) with softmax normalization along
    /// `axis` and mean reduction over remaining positions ("rows"). `mask`,
    /// when given, has x's shape minus `axis` and selects counted rows.
    ///
    /// Gradients flow to both arguments; pass the side that should be treated
    /// as constant as a plain leaf and discard its gradient.
    pub fn kl_mean(
        &mut self,
        x: Var,
        t: Var,
        axis: usize,
        mask: Option<&ArrayD<bool>>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let tv = self.value(t);
        if xv.shape() != tv.shape() {
            return Err(MmkdError::Contract(format!(
                "kl_mean shape mismatch: {:?} vs {:?}",
                xv.shape(),
                tv.shape()
            )));
        }
        if let Some(m) = mask {
            let mut reduced = xv.shape().to_vec();
            reduced.remove(axis);
            if m.shape() != reduced.as_slice() {
                return Err(MmkdError::Contract(
                    "kl_mean mask shape mismatch".to_string(),
                ));
            }
        }
        let lx = log_softmax_nd(xv, axis);
        let lt = log_softmax_nd(tv, axis);
        let pt = lt.mapv(f64::exp);
        // per-row KL, shape = rows
        let row_kl = (&pt * &(&lt - &lx)).sum_axis(Axis(axis));
        let (total, counted) = match mask {
            Some(m) => {
                let mut tot = 0.0;
                let mut cnt = 0usize;
                for (v, &keep) in row_kl.iter().zip(m.iter()) {
                    if keep {
                        tot += v;
                        cnt += 1;
                    }
                }
                (tot, cnt)
            }
            None => (row_kl.sum(), row_kl.len()),
        };
        let value = if counted == 0 {
            0.0
        } else {
            total / counted as f64
        };
        let mask_owned = mask.cloned();
        let var = self.push(
            scalar(value),
            vec![x.0, t.0],
            Some(Box::new(move |c: &BackCtx| {
                let g = c.grad.iter().next().copied().unwrap();
                let xv = c.parents[0];
                let tv = c.parents[1];
                let lx = log_softmax_nd(xv, axis);
                let lt = log_softmax_nd(tv, axis);
                let px = lx.mapv(f64::exp);
                let pt = lt.mapv(f64::exp);
                if counted == 0 {
                    return vec![ArrayD::zeros(xv.raw_dim()), ArrayD::zeros(tv.raw_dim())];
                }
                let w = g / counted as f64;
                // dx = (px - pt) * w ; dt = pt * ((lt - lx) - row_kl) * w
                let mut dx = (&px - &pt).mapv(|v| v * w);
                let row_kl = (&pt * &(&lt - &lx))
                    .sum_axis(Axis(axis))
                    .insert_axis(Axis(axis));
                let mut dt = (&pt * &(&(&lt - &lx) - &row_kl)).mapv(|v| v * w);
                if let Some(m) = &mask_owned {
                    // zero rows that were not counted
                    zero_masked_rows(&mut dx, m, axis);
                    zero_masked_rows(&mut dt, m, axis);
                }
                vec![dx, dt]
            })),
        );
        Ok(var)
    }

    /// Masked per-class mean of stage features.
    ///
    /// `features` [d,h,w], `labels` [h,w] in [0,C) or `ignore`. Returns a
    /// [C,d] matrix (rows of absent classes are zero) and the per-class
    /// validity mask.
    pub fn class_prototypes(
        &mut self,
        features: Var,
        labels: &ArrayD<u8>,
        num_classes: usize,
        ignore: u8,
    ) -> Result<(Var, Vec<bool>)> {
        let f = self.value(features);
        let fs = f.shape().to_vec();
        if fs.len() != 3 || labels.shape() != [fs[1], fs[2]] {
            return Err(MmkdError::Contract(
                "class_prototypes expects features [d,h,w] and labels [h,w]".to_string(),
            ));
        }
        let d = fs[0];
        let mut counts = vec![0usize; num_classes];
        for &y in labels.iter() {
            if y == ignore {
                continue;
            }
            let y = y as usize;
            if y >= num_classes {
                return Err(MmkdError::Contract(format!(
                    "label value {y} outside [0,{num_classes})"
                )));
            }
            counts[y] += 1;
        }
        let mut proto = ArrayD::<f64>::zeros(IxDyn(&[num_classes, d]));
        for i in 0..fs[1] {
            for j in 0..fs[2] {
                let y = labels[[i, j]];
                if y == ignore {
                    continue;
                }
                for ch in 0..d {
                    proto[[y as usize, ch]] += f[[ch, i, j]];
                }
            }
        }
        for c in 0..num_classes {
            if counts[c] > 0 {
                let k = counts[c] as f64;
                for ch in 0..d {
                    proto[[c, ch]] /= k;
                }
            }
        }
        let validity: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
        let labels = labels.clone();
        let var = self.push(
            proto,
            vec![features.0],
            Some(Box::new(move |c: &BackCtx| {
                let f = c.parents[0];
                let fs = f.shape();
                let mut df = ArrayD::zeros(f.raw_dim());
                for i in 0..fs[1] {
                    for j in 0..fs[2] {
                        let y = labels[[i, j]];
                        if y == ignore {
                            continue;
                        }
                        let y = y as usize;
                        if counts[y] == 0 {
                            continue;
                        }
                        let k = counts[y] as f64;
                        for ch in 0..fs[0] {
                            df[[ch, i, j]] += c.grad[[y, ch]] / k;
                        }
                    }
                }
                vec![df]
            })),
        );
        Ok((var, validity))
    }

    /// Selects one row of a matrix-valued node: [R,d] -> [d].
    pub fn row(&mut self, x: Var, r: usize) -> Var {
        let v = self.value(x).index_axis(Axis(0), r).to_owned();
        self.push(
            v,
            vec![x.0],
            Some(Box::new(move |c: &BackCtx| {
                let mut g = ArrayD::zeros(c.parents[0].raw_dim());
                g.index_axis_mut(Axis(0), r).assign(c.grad);
                vec![g]
            })),
        )
    }

    /// Reverse sweep from a scalar root; returns gradients for every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        let seed = ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0);
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(grad) = grads[i].clone() else {
                continue;
            };
            let ctx = BackCtx {
                value: &node.value,
                parents: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                grad: &grad,
            };
            let contribs = back(&ctx);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (&p, contrib) in node.parents.iter().zip(contribs) {
                match &mut grads[p] {
                    Some(existing) => *existing += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }
}

fn zero_masked_rows(x: &mut ArrayD<f64>, mask: &ArrayD<bool>, axis: usize) {
    for (mut lane, &keep) in x.lanes_mut(Axis(axis)).into_iter().zip(mask.iter()) {
        if !keep {
            lane.fill(0.0);
        }
    }
}

/// Stable softmax along `axis` (plain-array version; also used by eval code).
pub fn softmax_nd(x: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - m).exp());
        let s: f64 = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    out
}

/// Stable log-softmax along `axis`.
pub fn log_softmax_nd(x: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        lane.mapv_inplace(|v| v - lse);
    }
    out
}

fn linear_chan_fwd(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    assert_eq!(w.shape()[1], ci, "linear_chan weight/input mismatch");
    let x2 = x.to_shape((bs, ci, h * wd)).unwrap();
    let w2 = w.to_shape((co, ci)).unwrap();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[bs, co, h, wd]));
    {
        let mut o2 = out
            .view_mut()
            .into_shape_with_order((bs, co, h * wd))
            .unwrap();
        for n in 0..bs {
            let xn = x2.index_axis(Axis(0), n);
            let mut on = o2.index_axis_mut(Axis(0), n);
            ndarray::linalg::general_mat_mul(1.0, &w2.view(), &xn, 0.0, &mut on);
        }
    }
    for o in 0..co {
        let bv = b[[o]];
        out.index_axis_mut(Axis(1), o).mapv_inplace(|v| v + bv);
    }
    out
}

fn linear_chan_bwd(x: &ArrayD<f64>, w: &ArrayD<f64>, dy: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    let x2 = x.to_shape((bs, ci, h * wd)).unwrap();
    let dy2 = dy.to_shape((bs, co, h * wd)).unwrap();
    let w2 = w.to_shape((co, ci)).unwrap();
    let mut dx = ArrayD::<f64>::zeros(x.raw_dim());
    let mut dw = ndarray::Array2::<f64>::zeros((co, ci));
    {
        let mut dx2 = dx
            .view_mut()
            .into_shape_with_order((bs, ci, h * wd))
            .unwrap();
        for n in 0..bs {
            let dyn_ = dy2.index_axis(Axis(0), n);
            let xn = x2.index_axis(Axis(0), n);
            let mut dxn = dx2.index_axis_mut(Axis(0), n);
            // dx = w^T dy
            ndarray::linalg::general_mat_mul(1.0, &w2.t(), &dyn_, 0.0, &mut dxn);
            // dw += dy x^T
            ndarray::linalg::general_mat_mul(1.0, &dyn_, &xn.t(), 1.0, &mut dw.view_mut());
        }
    }
    let db = dy2.sum_axis(Axis(2)).sum_axis(Axis(0));
    vec![dx, dw.into_dyn(), db.into_dyn()]
}

fn space_to_depth_fwd(x: &ArrayD<f64>, r: usize) -> ArrayD<f64> {
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(
        h % r == 0 && w % r == 0,
        "space_to_depth size not divisible"
    );
    let (ho, wo) = (h / r, w / r);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[bs, c * r * r, ho, wo]));
    for b in 0..bs {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    for di in 0..r {
                        for dj in 0..r {
                            out[[b, ch * r * r + di * r + dj, i, j]] =
                                x[[b, ch, i * r + di, j * r + dj]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn space_to_depth_bwd(dy: &ArrayD<f64>, xshape: &[usize], r: usize) -> ArrayD<f64> {
    let (bs, c) = (xshape[0], xshape[1]);
    let (ho, wo) = (xshape[2] / r, xshape[3] / r);
    let mut dx = ArrayD::<f64>::zeros(IxDyn(xshape));
    for b in 0..bs {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    for di in 0..r {
                        for dj in 0..r {
                            dx[[b, ch, i * r + di, j * r + dj]] =
                                dy[[b, ch * r * r + di * r + dj, i, j]];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn upsample_fwd(x: &ArrayD<f64>, r: usize) -> ArrayD<f64> {
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[bs, c, h * r, w * r]));
    for b in 0..bs {
        for ch in 0..c {
            for i in 0..h * r {
                for j in 0..w * r {
                    out[[b, ch, i, j]] = x[[b, ch, i / r, j / r]];
                }
            }
        }
    }
    out
}

fn upsample_bwd(dy: &ArrayD<f64>, xshape: &[usize], r: usize) -> ArrayD<f64> {
    let mut dx = ArrayD::<f64>::zeros(IxDyn(xshape));
    let (bs, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    for b in 0..bs {
        for ch in 0..c {
            for i in 0..h * r {
                for j in 0..w * r {
                    dx[[b, ch, i / r, j / r]] += dy[[b, ch, i, j]];
                }
            }
        }
    }
    dx
}

/// The four (pixel, weight) taps of one bilinear output sample.
fn bilinear_taps(i: usize, size: usize, r: usize) -> [(usize, f64); 2] {
    // half-pixel centers: src = (i + 0.5)/r - 0.5, clamped to the border
    let src = (i as f64 + 0.5) / r as f64 - 0.5;
    let lo = src.floor();
    let frac = src - lo;
    let i0 = lo.max(0.0) as usize;
    let i1 = (i0 + 1).min(size - 1);
    if src < 0.0 {
        [(0, 1.0), (0, 0.0)]
    } else {
        [(i0.min(size - 1), 1.0 - frac), (i1, frac)]
    }
}

fn bilinear_fwd(x: &ArrayD<f64>, r: usize) -> ArrayD<f64> {
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let xv = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let taps_y: Vec<_> = (0..h * r).map(|i| bilinear_taps(i, h, r)).collect();
    let taps_x: Vec<_> = (0..w * r).map(|j| bilinear_taps(j, w, r)).collect();
    let mut out = ndarray::Array4::<f64>::zeros((bs, c, h * r, w * r));
    for b in 0..bs {
        for ch in 0..c {
            let src = xv.index_axis(ndarray::Axis(0), b);
            let src = src.index_axis(ndarray::Axis(0), ch);
            let mut dst = out.index_axis_mut(ndarray::Axis(0), b);
            let mut dst = dst.index_axis_mut(ndarray::Axis(0), ch);
            for (i, ty) in taps_y.iter().enumerate() {
                for (j, tx) in taps_x.iter().enumerate() {
                    let mut v = 0.0;
                    for (yi, wy) in ty {
                        for (xi, wx) in tx {
                            v += wy * wx * src[[*yi, *xi]];
                        }
                    }
                    dst[[i, j]] = v;
                }
            }
        }
    }
    out.into_dyn()
}

fn bilinear_bwd(dy: &ArrayD<f64>, xshape: &[usize], r: usize) -> ArrayD<f64> {
    let (bs, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let dyv = dy.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let taps_y: Vec<_> = (0..h * r).map(|i| bilinear_taps(i, h, r)).collect();
    let taps_x: Vec<_> = (0..w * r).map(|j| bilinear_taps(j, w, r)).collect();
    let mut dx = ndarray::Array4::<f64>::zeros((bs, c, h, w));
    for b in 0..bs {
        for ch in 0..c {
            let g2 = dyv.index_axis(ndarray::Axis(0), b);
            let g2 = g2.index_axis(ndarray::Axis(0), ch);
            let mut acc = dx.index_axis_mut(ndarray::Axis(0), b);
            let mut acc = acc.index_axis_mut(ndarray::Axis(0), ch);
            for (i, ty) in taps_y.iter().enumerate() {
                for (j, tx) in taps_x.iter().enumerate() {
                    let g = g2[[i, j]];
                    for (yi, wy) in ty {
                        for (xi, wx) in tx {
                            acc[[*yi, *xi]] += wy * wx * g;
                        }
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

/// Central finite-difference gradient of `f` at `x`. Independent oracle for
/// the analytic gradients above.
pub fn finite_difference<F: FnMut(&ArrayD<f64>) -> f64>(
    mut f: F,
    x: &ArrayD<f64>,
    eps: f64,
) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[&idx];
        xp[&idx] = orig + eps;
        let fp = f(&xp);
        xp[&idx] = orig - eps;
        let fm = f(&xp);
        xp[&idx] = orig;
        g[&idx] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Max relative error between two gradient tensors, with an absolute floor so
/// near-zero entries do not blow up the ratio.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
