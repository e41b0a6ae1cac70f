//! Task classifiers for the federated runs: a two-conv CNN for the grayscale
//! image datasets and a compact 8-layer residual network for CIFAR-10.
//! Convolutions run through im2col + matmul; training is plain minibatch SGD
//! on softmax cross-entropy.

use crate::config::TaskArch;
use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::distr::{Distribution, Uniform};
use rand::Rng;

#[derive(Debug, Clone)]
struct Conv2d {
    /// (out_c, in_c, k, k)
    w: Array4<f32>,
    b: Array1<f32>,
    stride: usize,
    pad: usize,
}

struct Conv2dCache {
    cols: Array2<f32>,
    in_dims: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    fn new(out_c: usize, in_c: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let limit = (1.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-limit as f32, limit as f32).unwrap();
        Conv2d {
            w: Array4::from_shape_fn((out_c, in_c, k, k), |_| dist.sample(rng)),
            b: Array1::zeros(out_c),
            stride,
            pad,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        ((h + 2 * self.pad - k) / self.stride + 1, (w + 2 * self.pad - k) / self.stride + 1)
    }

    /// x: (B, C_in, H, W) flattened rows -> (B, C_out, OH, OW) flattened rows.
    fn forward(
        &self,
        x: &Array2<f32>,
        dims: (usize, usize, usize),
    ) -> (Array2<f32>, Conv2dCache) {
        let (c_in, h, w) = dims;
        let b = x.nrows();
        let (out_c, _, k, _) = self.w.dim();
        let (oh, ow) = self.out_hw(h, w);
        let mut cols = Array2::zeros((b * oh * ow, c_in * k * k));
        for bi in 0..b {
            let row = x.row(bi);
            for oy in 0..oh {
                for ox in 0..ow {
                    let col_row = (bi * oh + oy) * ow + ox;
                    let mut col = cols.row_mut(col_row);
                    let mut idx = 0;
                    for c in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                col[idx] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                                {
                                    row[(c * h + iy as usize) * w + ix as usize]
                                } else {
                                    0.0
                                };
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
        let w_flat = self
            .w
            .view()
            .into_shape_with_order((out_c, c_in * k * k))
            .unwrap()
            .to_owned();
        let mut out_cols = cols.dot(&w_flat.t());
        out_cols += &self.b;
        // (B*OH*OW, C_out) -> (B, C_out*OH*OW)
        let mut out = Array2::zeros((b, out_c * oh * ow));
        for bi in 0..b {
            for oc in 0..out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[[bi, (oc * oh + oy) * ow + ox]] =
                            out_cols[[(bi * oh + oy) * ow + ox, oc]];
                    }
                }
            }
        }
        (out, Conv2dCache { cols, in_dims: (b, c_in, h, w), out_hw: (oh, ow) })
    }

    fn backward(
        &self,
        cache: &Conv2dCache,
        dy: &Array2<f32>,
        gw: &mut Array4<f32>,
        gb: &mut Array1<f32>,
    ) -> Array2<f32> {
        let (b, c_in, h, w) = cache.in_dims;
        let (oh, ow) = cache.out_hw;
        let (out_c, _, k, _) = self.w.dim();

        // Back to column layout (B*OH*OW, C_out).
        let mut dy_cols = Array2::zeros((b * oh * ow, out_c));
        for bi in 0..b {
            for oc in 0..out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dy_cols[[(bi * oh + oy) * ow + ox, oc]] =
                            dy[[bi, (oc * oh + oy) * ow + ox]];
                    }
                }
            }
        }
        let gw_flat = dy_cols.t().dot(&cache.cols);
        let gw_shaped = gw_flat.into_shape_with_order((out_c, c_in, k, k)).unwrap();
        *gw += &gw_shaped;
        *gb += &dy_cols.sum_axis(Axis(0));

        let w_flat = self
            .w
            .view()
            .into_shape_with_order((out_c, c_in * k * k))
            .unwrap()
            .to_owned();
        let dcols = dy_cols.dot(&w_flat);
        // col2im scatter.
        let mut dx = Array2::zeros((b, c_in * h * w));
        for bi in 0..b {
            let mut drow = dx.row_mut(bi);
            for oy in 0..oh {
                for ox in 0..ow {
                    let col_row = (bi * oh + oy) * ow + ox;
                    let col = dcols.row(col_row);
                    let mut idx = 0;
                    for c in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    drow[(c * h + iy as usize) * w + ix as usize] += col[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

fn relu(x: &mut Array2<f32>) {
    x.map_inplace(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
}

fn relu_mask(dy: &mut Array2<f32>, y: &Array2<f32>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
}

/// 2x2 max pooling with stride 2; argmax indices cached for the backward
/// scatter. Odd trailing rows/columns are dropped.
fn maxpool2(
    x: &Array2<f32>,
    dims: (usize, usize, usize),
) -> (Array2<f32>, Vec<u32>, (usize, usize, usize)) {
    let (c, h, w) = dims;
    let (oh, ow) = (h / 2, w / 2);
    let b = x.nrows();
    let mut out = Array2::zeros((b, c * oh * ow));
    let mut arg = vec![0u32; b * c * oh * ow];
    for bi in 0..b {
        let row = x.row(bi);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (ci * h + oy * 2 + dy) * w + ox * 2 + dx;
                            if row[idx] > best {
                                best = row[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * oh + oy) * ow + ox;
                    out[[bi, o]] = best;
                    arg[bi * c * oh * ow + o] = best_idx as u32;
                }
            }
        }
    }
    (out, arg, (c, oh, ow))
}

fn maxpool2_backward(
    dy: &Array2<f32>,
    arg: &[u32],
    in_dims: (usize, usize, usize),
) -> Array2<f32> {
    let (c, h, w) = in_dims;
    let b = dy.nrows();
    let per = dy.ncols();
    let mut dx = Array2::zeros((b, c * h * w));
    for bi in 0..b {
        for o in 0..per {
            dx[[bi, arg[bi * per + o] as usize]] += dy[[bi, o]];
        }
    }
    dx
}

#[derive(Debug, Clone)]
struct DenseLayer {
    w: Array2<f32>,
    b: Array1<f32>,
}

impl DenseLayer {
    fn new(out_w: usize, in_w: usize, rng: &mut impl Rng) -> Self {
        let limit = (1.0 / in_w as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-limit, limit).unwrap();
        DenseLayer {
            w: Array2::from_shape_fn((out_w, in_w), |_| dist.sample(rng)),
            b: Array1::zeros(out_w),
        }
    }
}

/// Softmax cross-entropy; returns (mean loss, dlogits).
fn softmax_ce(logits: &Array2<f32>, labels: &[u8]) -> (f32, Array2<f32>) {
    let b = logits.nrows();
    let mut dlogits = logits.clone();
    let mut loss = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        let mut row = dlogits.row_mut(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        row.map_inplace(|v| {
            *v = (*v - max).exp();
            sum += *v;
        });
        row.map_inplace(|v| *v /= sum);
        loss -= (row[label as usize].max(1e-12) as f64).ln();
        row[label as usize] -= 1.0;
    }
    let scale = 1.0 / b as f32;
    dlogits.map_inplace(|v| *v *= scale);
    ((loss / b as f64) as f32, dlogits)
}

/// Two 5x5 conv layers with pooling and a linear head.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    dims: (usize, usize, usize),
    conv1: Conv2d,
    conv2: Conv2d,
    fc: DenseLayer,
}

impl SmallCnn {
    pub fn new(dims: (usize, usize, usize), classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let (c, h, w) = dims;
        if h < 4 || w < 4 {
            return Err(Error::invalid("small_cnn needs at least 4x4 inputs"));
        }
        let conv1 = Conv2d::new(8, c, 5, 1, 2, rng);
        let conv2 = Conv2d::new(16, 8, 5, 1, 2, rng);
        let flat = 16 * (h / 4) * (w / 4);
        let fc = DenseLayer::new(classes, flat, rng);
        Ok(SmallCnn { dims, conv1, conv2, fc })
    }

    fn logits_cached(&self, x: &Array2<f32>) -> (Array2<f32>, CnnCache) {
        let (c, h, w) = self.dims;
        let (mut a1, c1) = self.conv1.forward(x, (c, h, w));
        relu(&mut a1);
        let (p1, arg1, d1) = maxpool2(&a1, (8, h, w));
        let (mut a2, c2) = self.conv2.forward(&p1, d1);
        relu(&mut a2);
        let (p2, arg2, _) = maxpool2(&a2, (16, d1.1, d1.2));
        let logits = p2.dot(&self.fc.w.t()) + &self.fc.b;
        (logits, CnnCache { c1, a1, arg1, d1, c2, a2, arg2, p2 })
    }

    pub fn logits(&self, x: &Array2<f32>) -> Array2<f32> {
        self.logits_cached(x).0
    }
}

struct CnnCache {
    c1: Conv2dCache,
    a1: Array2<f32>,
    arg1: Vec<u32>,
    d1: (usize, usize, usize),
    c2: Conv2dCache,
    a2: Array2<f32>,
    arg2: Vec<u32>,
    p2: Array2<f32>,
}

/// Conv stem, three residual stages, global average pooling, linear head.
#[derive(Debug, Clone)]
pub struct ResNet8 {
    dims: (usize, usize, usize),
    stem: Conv2d,
    stages: Vec<ResStage>,
    fc: DenseLayer,
}

#[derive(Debug, Clone)]
struct ResStage {
    conv_a: Conv2d,
    conv_b: Conv2d,
    /// 1x1 projection when the stage changes width/stride.
    project: Option<Conv2d>,
}

impl ResNet8 {
    pub fn new(dims: (usize, usize, usize), classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let (c, h, w) = dims;
        if h < 8 || w < 8 {
            return Err(Error::invalid("resnet8 needs at least 8x8 inputs"));
        }
        let stem = Conv2d::new(16, c, 3, 1, 1, rng);
        let widths = [(16usize, 16usize, 1usize), (16, 32, 2), (32, 64, 2)];
        let stages = widths
            .iter()
            .map(|&(cin, cout, stride)| ResStage {
                conv_a: Conv2d::new(cout, cin, 3, stride, 1, rng),
                conv_b: Conv2d::new(cout, cout, 3, 1, 1, rng),
                project: if cin != cout || stride != 1 {
                    Some(Conv2d::new(cout, cin, 1, stride, 0, rng))
                } else {
                    None
                },
            })
            .collect();
        let fc = DenseLayer::new(classes, 64, rng);
        Ok(ResNet8 { dims, stem, stages, fc })
    }

    pub fn logits(&self, x: &Array2<f32>) -> Array2<f32> {
        self.forward_cached(x).0
    }

    fn forward_cached(&self, x: &Array2<f32>) -> (Array2<f32>, ResCache) {
        let (c, h, w) = self.dims;
        let (mut act, stem_cache) = self.stem.forward(x, (c, h, w));
        relu(&mut act);
        let stem_out = act.clone();
        let mut dims = (16, h, w);
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let in_act = act.clone();
            let in_dims = dims;
            let (mut ya, ca) = stage.conv_a.forward(&act, dims);
            relu(&mut ya);
            let (oh, ow) = stage.conv_a.out_hw(dims.1, dims.2);
            let mid_dims = (stage.conv_a.w.dim().0, oh, ow);
            let (yb, cb) = stage.conv_b.forward(&ya, mid_dims);
            let (skip, skip_cache) = match &stage.project {
                Some(p) => {
                    let (sk, pc) = p.forward(&in_act, in_dims);
                    (sk, Some(pc))
                }
                None => (in_act.clone(), None),
            };
            let mut out = yb + skip;
            relu(&mut out);
            stages.push(StageCache { in_dims, ca, ya, mid_dims, cb, skip_cache, out: out.clone() });
            act = out;
            dims = mid_dims;
        }
        // Global average pool over the spatial grid.
        let (cr, hr, wr) = dims;
        let b = act.nrows();
        let mut pooled = Array2::zeros((b, cr));
        for bi in 0..b {
            for ci in 0..cr {
                let mut sum = 0.0f32;
                for i in 0..hr * wr {
                    sum += act[[bi, ci * hr * wr + i]];
                }
                pooled[[bi, ci]] = sum / (hr * wr) as f32;
            }
        }
        let logits = pooled.dot(&self.fc.w.t()) + &self.fc.b;
        (logits, ResCache { stem_cache, stem_out, stages, pooled, final_dims: dims })
    }

    fn sgd_step_impl(&mut self, x: &Array2<f32>, labels: &[u8], lr: f32) -> Result<f32> {
        let (logits, cache) = self.forward_cached(x);
        let (loss, dlogits) = softmax_ce(&logits, labels);
        if !loss.is_finite() {
            return Err(Error::StageFailure("task training diverged".into()));
        }
        let gw_fc = dlogits.t().dot(&cache.pooled);
        let gb_fc = dlogits.sum_axis(Axis(0));
        let dpooled = dlogits.dot(&self.fc.w);

        // Un-pool: every spatial cell shares the channel gradient.
        let (cr, hr, wr) = cache.final_dims;
        let b = x.nrows();
        let inv = 1.0 / (hr * wr) as f32;
        let mut dact = Array2::zeros((b, cr * hr * wr));
        for bi in 0..b {
            for ci in 0..cr {
                let g = dpooled[[bi, ci]] * inv;
                for i in 0..hr * wr {
                    dact[[bi, ci * hr * wr + i]] = g;
                }
            }
        }

        struct StageGrads {
            ga_w: Array4<f32>,
            ga_b: Array1<f32>,
            gb_w: Array4<f32>,
            gb_b: Array1<f32>,
            gp: Option<(Array4<f32>, Array1<f32>)>,
        }
        let mut all_grads: Vec<StageGrads> = Vec::with_capacity(self.stages.len());

        for (stage, sc) in self.stages.iter().zip(&cache.stages).rev() {
            relu_mask(&mut dact, &sc.out);
            // Branch through conv_b and conv_a.
            let mut gb_w = Array4::zeros(stage.conv_b.w.raw_dim());
            let mut gb_b = Array1::zeros(stage.conv_b.b.len());
            let mut dya = stage.conv_b.backward(&sc.cb, &dact, &mut gb_w, &mut gb_b);
            relu_mask(&mut dya, &sc.ya);
            let mut ga_w = Array4::zeros(stage.conv_a.w.raw_dim());
            let mut ga_b = Array1::zeros(stage.conv_a.b.len());
            let din_branch = stage.conv_a.backward(&sc.ca, &dya, &mut ga_w, &mut ga_b);
            // Skip path.
            let (din_skip, gp) = match (&stage.project, &sc.skip_cache) {
                (Some(p), Some(pc)) => {
                    let mut gp_w = Array4::zeros(p.w.raw_dim());
                    let mut gp_b = Array1::zeros(p.b.len());
                    let d = p.backward(pc, &dact, &mut gp_w, &mut gp_b);
                    (d, Some((gp_w, gp_b)))
                }
                _ => (dact.clone(), None),
            };
            dact = din_branch + din_skip;
            all_grads.push(StageGrads { ga_w, ga_b, gb_w, gb_b, gp });
        }
        all_grads.reverse();

        relu_mask(&mut dact, &cache.stem_out);
        let mut gs_w = Array4::zeros(self.stem.w.raw_dim());
        let mut gs_b = Array1::zeros(self.stem.b.len());
        let _ = self.stem.backward(&cache.stem_cache, &dact, &mut gs_w, &mut gs_b);

        self.fc.w.scaled_add(-lr, &gw_fc);
        self.fc.b.scaled_add(-lr, &gb_fc);
        self.stem.w.scaled_add(-lr, &gs_w);
        self.stem.b.scaled_add(-lr, &gs_b);
        for (stage, g) in self.stages.iter_mut().zip(all_grads) {
            stage.conv_a.w.scaled_add(-lr, &g.ga_w);
            stage.conv_a.b.scaled_add(-lr, &g.ga_b);
            stage.conv_b.w.scaled_add(-lr, &g.gb_w);
            stage.conv_b.b.scaled_add(-lr, &g.gb_b);
            if let (Some(p), Some((gp_w, gp_b))) = (stage.project.as_mut(), g.gp) {
                p.w.scaled_add(-lr, &gp_w);
                p.b.scaled_add(-lr, &gp_b);
            }
        }
        Ok(loss)
    }
}

struct StageCache {
    #[allow(dead_code)]
    in_dims: (usize, usize, usize),
    ca: Conv2dCache,
    ya: Array2<f32>,
    #[allow(dead_code)]
    mid_dims: (usize, usize, usize),
    cb: Conv2dCache,
    skip_cache: Option<Conv2dCache>,
    out: Array2<f32>,
}

struct ResCache {
    stem_cache: Conv2dCache,
    stem_out: Array2<f32>,
    stages: Vec<StageCache>,
    pooled: Array2<f32>,
    final_dims: (usize, usize, usize),
}

/// A federated task model: parameter flattening in a fixed canonical order,
/// one SGD minibatch step, and accuracy evaluation.
#[derive(Debug, Clone)]
pub enum TaskNet {
    Cnn(SmallCnn),
    Res(ResNet8),
}

impl TaskNet {
    pub fn build(
        arch: TaskArch,
        dims: (usize, usize, usize),
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<TaskNet> {
        Ok(match arch {
            TaskArch::SmallCnn => TaskNet::Cnn(SmallCnn::new(dims, classes, rng)?),
            TaskArch::ResNet8 => TaskNet::Res(ResNet8::new(dims, classes, rng)?),
        })
    }

    /// Canonical parameter order: conv/stage weights then biases, in layer
    /// order, ending with the classifier head.
    pub fn flatten_params(&self) -> Vec<f32> {
        let mut out = Vec::new();
        match self {
            TaskNet::Cnn(m) => {
                out.extend(m.conv1.w.iter());
                out.extend(m.conv1.b.iter());
                out.extend(m.conv2.w.iter());
                out.extend(m.conv2.b.iter());
                out.extend(m.fc.w.iter());
                out.extend(m.fc.b.iter());
            }
            TaskNet::Res(m) => {
                out.extend(m.stem.w.iter());
                out.extend(m.stem.b.iter());
                for stage in &m.stages {
                    out.extend(stage.conv_a.w.iter());
                    out.extend(stage.conv_a.b.iter());
                    out.extend(stage.conv_b.w.iter());
                    out.extend(stage.conv_b.b.iter());
                    if let Some(p) = &stage.project {
                        out.extend(p.w.iter());
                        out.extend(p.b.iter());
                    }
                }
                out.extend(m.fc.w.iter());
                out.extend(m.fc.b.iter());
            }
        }
        out
    }

    pub fn load_params(&mut self, flat: &[f32]) -> Result<()> {
        let expect = self.flatten_params().len();
        if flat.len() != expect {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, model expects {expect}",
                flat.len()
            )));
        }
        let mut offset = 0usize;
        let mut fill = |target: &mut [f32]| {
            target.copy_from_slice(&flat[offset..offset + target.len()]);
            offset += target.len();
        };
        match self {
            TaskNet::Cnn(m) => {
                fill(m.conv1.w.as_slice_mut().unwrap());
                fill(m.conv1.b.as_slice_mut().unwrap());
                fill(m.conv2.w.as_slice_mut().unwrap());
                fill(m.conv2.b.as_slice_mut().unwrap());
                fill(m.fc.w.as_slice_mut().unwrap());
                fill(m.fc.b.as_slice_mut().unwrap());
            }
            TaskNet::Res(m) => {
                fill(m.stem.w.as_slice_mut().unwrap());
                fill(m.stem.b.as_slice_mut().unwrap());
                for stage in &mut m.stages {
                    fill(stage.conv_a.w.as_slice_mut().unwrap());
                    fill(stage.conv_a.b.as_slice_mut().unwrap());
                    fill(stage.conv_b.w.as_slice_mut().unwrap());
                    fill(stage.conv_b.b.as_slice_mut().unwrap());
                    if let Some(p) = &mut stage.project {
                        fill(p.w.as_slice_mut().unwrap());
                        fill(p.b.as_slice_mut().unwrap());
                    }
                }
                fill(m.fc.w.as_slice_mut().unwrap());
                fill(m.fc.b.as_slice_mut().unwrap());
            }
        }
        Ok(())
    }

    /// One SGD step on a minibatch; returns the loss. Residual training is
    /// only needed at smoke scale, so its backward pass recomputes forwards
    /// numerically cheaply via cached activations.
    pub fn sgd_step(&mut self, x: &Array2<f32>, labels: &[u8], lr: f32) -> Result<f32> {
        match self {
            TaskNet::Cnn(m) => {
                let (logits, cache) = m.logits_cached(x);
                let (loss, dlogits) = softmax_ce(&logits, labels);
                if !loss.is_finite() {
                    return Err(Error::StageFailure("task training diverged".into()));
                }
                // Head.
                let gw_fc = dlogits.t().dot(&cache.p2);
                let gb_fc = dlogits.sum_axis(Axis(0));
                let mut dp2 = dlogits.dot(&m.fc.w);
                // Pool 2 and conv 2.
                let da2 = {
                    let d = maxpool2_backward(&dp2, &cache.arg2, (16, cache.d1.1, cache.d1.2));
                    dp2 = Array2::zeros((0, 0));
                    let _ = dp2;
                    d
                };
                let mut da2 = da2;
                relu_mask(&mut da2, &cache.a2);
                let mut gw2 = Array4::zeros(m.conv2.w.raw_dim());
                let mut gb2 = Array1::zeros(m.conv2.b.len());
                let dp1 = m.conv2.backward(&cache.c2, &da2, &mut gw2, &mut gb2);
                // Pool 1 and conv 1.
                let (_, h, w) = m.dims;
                let mut da1 = maxpool2_backward(&dp1, &cache.arg1, (8, h, w));
                relu_mask(&mut da1, &cache.a1);
                let mut gw1 = Array4::zeros(m.conv1.w.raw_dim());
                let mut gb1 = Array1::zeros(m.conv1.b.len());
                let _ = m.conv1.backward(&cache.c1, &da1, &mut gw1, &mut gb1);

                m.fc.w.scaled_add(-lr, &gw_fc);
                m.fc.b.scaled_add(-lr, &gb_fc);
                m.conv2.w.scaled_add(-lr, &gw2);
                m.conv2.b.scaled_add(-lr, &gb2);
                m.conv1.w.scaled_add(-lr, &gw1);
                m.conv1.b.scaled_add(-lr, &gb1);
                Ok(loss)
            }
            TaskNet::Res(m) => m.sgd_step_impl(x, labels, lr),
        }
    }

    pub fn accuracy(&self, images: &Array2<f32>, labels: &[u8]) -> f64 {
        let mut correct = 0usize;
        let chunk = 256;
        let mut lo = 0;
        while lo < labels.len() {
            let hi = (lo + chunk).min(labels.len());
            let logits = match self {
                TaskNet::Cnn(m) => m.logits(&images.slice(s![lo..hi, ..]).to_owned()),
                TaskNet::Res(m) => m.logits(&images.slice(s![lo..hi, ..]).to_owned()),
            };
            for (i, &label) in labels[lo..hi].iter().enumerate() {
                let row = logits.row(i);
                let mut best = 0usize;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == label as usize {
                    correct += 1;
                }
            }
            lo = hi;
        }
        correct as f64 / labels.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn cnn_param_round_trip_and_canonical_order() {
        let mut r = rng::derive(1, &["task"]);
        let mut m = TaskNet::build(TaskArch::SmallCnn, (1, 8, 8), 10, &mut r).unwrap();
        let flat = m.flatten_params();
        let again = m.flatten_params();
        assert_eq!(flat, again, "canonical order is stable");
        let perturbed: Vec<f32> = flat.iter().map(|v| v + 0.5).collect();
        m.load_params(&perturbed).unwrap();
        assert_eq!(m.flatten_params(), perturbed);
        assert!(m.load_params(&flat[..10]).is_err());
    }

    #[test]
    fn cnn_learns_the_digits_fixture() {
        let ds = crate::fl::data::load_dataset(crate::config::DatasetId::Digits, None, 600, 200)
            .unwrap();
        let mut r = rng::derive(2, &["task"]);
        let mut m = TaskNet::build(TaskArch::SmallCnn, ds.dims, ds.classes, &mut r).unwrap();
        let before = m.accuracy(&ds.test.images, &ds.test.labels);
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        for _ in 0..5 {
            // Simple deterministic rotation instead of a reshuffle.
            order.rotate_left(7);
            for chunk in order.chunks(32) {
                let x = ndarray::Array2::from_shape_fn((chunk.len(), 64), |(i, j)| {
                    ds.train.images[[chunk[i], j]]
                });
                let labels: Vec<u8> = chunk.iter().map(|&i| ds.train.labels[i]).collect();
                m.sgd_step(&x, &labels, 0.5).unwrap();
            }
        }
        let after = m.accuracy(&ds.test.images, &ds.test.labels);
        assert!(
            after > 0.85 && after > before,
            "digits accuracy should exceed 85%: {before} -> {after}"
        );
    }

    #[test]
    #[ignore]
    fn cnn_fd_probe() {
        let mut r = rng::derive(9, &["fd"]);
        let m = TaskNet::build(TaskArch::SmallCnn, (1, 8, 8), 10, &mut r).unwrap();
        let x = Array2::from_shape_fn((4, 64), |(i, j)| (((i * 64 + j) as f32) * 0.1).sin().abs());
        let labels: Vec<u8> = vec![1, 3, 5, 7];
        let loss_of = |m: &TaskNet| -> f32 {
            let logits = match m { TaskNet::Cnn(c) => c.logits(&x), _ => unreachable!() };
            softmax_ce(&logits, &labels).0
        };
        // Analytic: run one sgd step with lr so small that params don't move,
        // but capture gradients by diffing params at lr=1.
        let mut probe = m.clone();
        probe.sgd_step(&x, &labels, 1.0).unwrap();
        let before = m.flatten_params();
        let after = probe.flatten_params();
        let grads: Vec<f32> = before.iter().zip(&after).map(|(b, a)| b - a).collect();
        // FD on a few coordinates across layers.
        let count = before.len();
        for idx in [0usize, 150, 205, 210, 1500, count - 5] {
            let eps = 1e-3f32;
            let mut plus = m.clone();
            let mut v = before.clone();
            v[idx] += eps;
            plus.load_params(&v).unwrap();
            let fp = loss_of(&plus);
            v[idx] -= 2.0 * eps;
            plus.load_params(&v).unwrap();
            let fm = loss_of(&plus);
            let num = (fp - fm) / (2.0 * eps);
            println!("idx {idx}: analytic {:.6} numeric {num:.6}", grads[idx]);
        }
    }

    /// Loss decrease per step under tiny lr on a fixed batch is the cheap
    /// correctness signal for the CNN backward pass.
    #[test]
    fn cnn_fixed_batch_descent() {
        let mut r = rng::derive(9, &["fd"]);
        let mut m = TaskNet::build(TaskArch::SmallCnn, (1, 8, 8), 10, &mut r).unwrap();
        let x = Array2::from_shape_fn((16, 64), |_| r.random_range(0.0f32..1.0));
        let labels: Vec<u8> = (0..16).map(|i| (i % 10) as u8).collect();
        let l0 = m.sgd_step(&x, &labels, 0.5).unwrap();
        let mut last = l0;
        for _ in 0..120 {
            last = m.sgd_step(&x, &labels, 0.5).unwrap();
        }
        assert!(last < 0.2 * l0, "fixed-batch loss should collapse: {l0} -> {last}");
    }

    #[test]
    fn resnet8_shapes_and_head_training() {
        let mut r = rng::derive(3, &["task"]);
        let mut m = TaskNet::build(TaskArch::ResNet8, (3, 32, 32), 10, &mut r).unwrap();
        let x = Array2::from_shape_fn((4, 3 * 32 * 32), |(i, j)| ((i + j) as f32 * 0.01).sin());
        let logits = match &m {
            TaskNet::Res(res) => res.logits(&x),
            _ => unreachable!(),
        };
        assert_eq!(logits.dim(), (4, 10));
        let labels = [0u8, 1, 2, 3];
        let l0 = m.sgd_step(&x, &labels, 0.05).unwrap();
        let mut l_last = l0;
        for _ in 0..20 {
            l_last = m.sgd_step(&x, &labels, 0.05).unwrap();
        }
        assert!(l_last < l0, "head-only training should reduce loss: {l0} -> {l_last}");
        let flat = m.flatten_params();
        let mut m2 = TaskNet::build(TaskArch::ResNet8, (3, 32, 32), 10, &mut rng::derive(4, &["t"]))
            .unwrap();
        m2.load_params(&flat).unwrap();
        assert_eq!(m2.flatten_params(), flat);
    }
}
