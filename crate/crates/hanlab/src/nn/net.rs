use super::Scalar;
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Encryptor,
    Aggregator,
    AttackerPk,
    AttackerNoPk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Depth {
    Standard,
    Double,
}

/// Architecture descriptor; fully determines parameter shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub role: Role,
    pub depth: Depth,
    pub in_width: usize,
    pub hidden: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub res_blocks: usize,
    pub out_width: usize,
}

impl NetSpec {
    pub fn new(
        role: Role,
        depth: Depth,
        in_width: usize,
        hidden: usize,
        conv_channels: usize,
        res_blocks: usize,
        out_width: usize,
    ) -> Self {
        let blocks = match depth {
            Depth::Standard => res_blocks,
            Depth::Double => 2 * res_blocks,
        };
        NetSpec {
            role,
            depth,
            in_width,
            hidden,
            conv_channels,
            kernel: 3,
            res_blocks: blocks,
            out_width,
        }
    }

    pub fn param_count(&self) -> usize {
        let dense_in = self.hidden * self.in_width + self.hidden;
        let conv_in = self.conv_channels * self.kernel + self.conv_channels;
        let conv_out = self.conv_channels * self.kernel + 1;
        let res = self.res_blocks * (2 * (self.hidden * self.hidden + self.hidden));
        let dense_out = self.out_width * self.hidden + self.out_width;
        dense_in + conv_in + conv_out + res + dense_out
    }
}

#[derive(Debug, Clone)]
pub struct Dense<F> {
    /// (out, in)
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    fn xavier(out_w: usize, in_w: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_w + out_w) as f64).sqrt();
        let dist = Uniform::new_inclusive(
            F::from_f64(-limit).unwrap(),
            F::from_f64(limit).unwrap(),
        )
        .expect("valid uniform range");
        let w = Array2::from_shape_fn((out_w, in_w), |_| dist.sample(rng));
        Dense { w, b: Array1::zeros(out_w) }
    }

    fn zeros_like(&self) -> Self {
        Dense { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.raw_dim()) }
    }

    fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Returns grad w.r.t. input; accumulates parameter grads into `g`.
    fn backward(&self, x: &Array2<F>, dy: &Array2<F>, g: &mut Dense<F>) -> Array2<F> {
        g.w += &dy.t().dot(x);
        g.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}

/// Width-preserving 1-D convolution with zero padding; weights are
/// (out_channels, in_channels, kernel).
#[derive(Debug, Clone)]
pub struct Conv1d<F> {
    pub w: Array3<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> Conv1d<F> {
    fn xavier(out_c: usize, in_c: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_c * kernel;
        let fan_out = out_c * kernel;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(
            F::from_f64(-limit).unwrap(),
            F::from_f64(limit).unwrap(),
        )
        .expect("valid uniform range");
        let w = Array3::from_shape_fn((out_c, in_c, kernel), |_| dist.sample(rng));
        Conv1d { w, b: Array1::zeros(out_c) }
    }

    fn zeros_like(&self) -> Self {
        Conv1d { w: Array3::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.raw_dim()) }
    }

    /// x: (batch, in_c, width) -> (batch, out_c, width)
    fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (batch, in_c, width) = x.dim();
        let (out_c, _, kernel) = self.w.dim();
        let pad = kernel / 2;
        let mut y = Array3::zeros((batch, out_c, width));
        for o in 0..out_c {
            y.slice_mut(s![.., o, ..]).map_inplace(|v| *v = self.b[o]);
            for c in 0..in_c {
                for j in 0..kernel {
                    let shift = j as isize - pad as isize;
                    let (start, end) = valid_range(width, shift);
                    if start >= end {
                        continue;
                    }
                    let (xs, xe) = ((start as isize + shift) as usize, (end as isize + shift) as usize);
                    let wv = self.w[[o, c, j]];
                    let mut ys = y.slice_mut(s![.., o, start..end]);
                    ys.scaled_add(wv, &x.slice(s![.., c, xs..xe]));
                }
            }
        }
        y
    }

    fn backward(&self, x: &Array3<F>, dy: &Array3<F>, g: &mut Conv1d<F>) -> Array3<F> {
        let (batch, in_c, width) = x.dim();
        let (out_c, _, kernel) = self.w.dim();
        let pad = kernel / 2;
        let mut dx = Array3::zeros((batch, in_c, width));
        for o in 0..out_c {
            g.b[o] = g.b[o] + dy.slice(s![.., o, ..]).sum();
            for c in 0..in_c {
                for j in 0..kernel {
                    let shift = j as isize - pad as isize;
                    let (start, end) = valid_range(width, shift);
                    if start >= end {
                        continue;
                    }
                    let (xs, xe) = ((start as isize + shift) as usize, (end as isize + shift) as usize);
                    let dy_s = dy.slice(s![.., o, start..end]);
                    g.w[[o, c, j]] = g.w[[o, c, j]] + (&dy_s * &x.slice(s![.., c, xs..xe])).sum();
                    let mut dxs = dx.slice_mut(s![.., c, xs..xe]);
                    dxs.scaled_add(self.w[[o, c, j]], &dy_s);
                }
            }
        }
        dx
    }
}

/// Output positions `t` for which `t + shift` stays inside `0..width`.
fn valid_range(width: usize, shift: isize) -> (usize, usize) {
    let start = if shift < 0 { (-shift) as usize } else { 0 };
    let end = if shift > 0 { width.saturating_sub(shift as usize) } else { width };
    (start, end)
}

#[derive(Debug, Clone)]
pub struct ResBlock<F> {
    pub fc1: Dense<F>,
    pub fc2: Dense<F>,
}

impl<F: Scalar> ResBlock<F> {
    fn zeros_like(&self) -> Self {
        ResBlock { fc1: self.fc1.zeros_like(), fc2: self.fc2.zeros_like() }
    }
}

/// Per-batch activations cached by `forward_tape` for the backward pass.
pub struct Tape<F> {
    x: Array2<F>,
    a1: Array2<F>,
    a2: Array3<F>,
    a3: Array2<F>,
    /// (block input, tanh(fc1) output) per residual block.
    blocks: Vec<(Array2<F>, Array2<F>)>,
    h_final: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct Net<F> {
    pub spec: NetSpec,
    pub dense_in: Dense<F>,
    pub conv_in: Conv1d<F>,
    pub conv_out: Conv1d<F>,
    pub blocks: Vec<ResBlock<F>>,
    pub dense_out: Dense<F>,
}

fn tanh_inplace<F: Scalar, D: ndarray::Dimension>(a: &mut ndarray::Array<F, D>) {
    a.map_inplace(|v| *v = v.tanh());
}

/// d(tanh)/dz expressed through the tanh output: 1 - y^2.
fn dtanh<F: Scalar, D: ndarray::Dimension>(y: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    y.mapv(|v| F::one() - v * v)
}

impl<F: Scalar> Net<F> {
    pub fn new(spec: NetSpec, rng: &mut impl Rng) -> Self {
        let dense_in = Dense::xavier(spec.hidden, spec.in_width, rng);
        let conv_in = Conv1d::xavier(spec.conv_channels, 1, spec.kernel, rng);
        let conv_out = Conv1d::xavier(1, spec.conv_channels, spec.kernel, rng);
        let blocks = (0..spec.res_blocks)
            .map(|_| ResBlock {
                fc1: Dense::xavier(spec.hidden, spec.hidden, rng),
                fc2: Dense::xavier(spec.hidden, spec.hidden, rng),
            })
            .collect();
        let dense_out = Dense::xavier(spec.out_width, spec.hidden, rng);
        Net { spec, dense_in, conv_in, conv_out, blocks, dense_out }
    }

    pub fn zeros_like(&self) -> Self {
        Net {
            spec: self.spec.clone(),
            dense_in: self.dense_in.zeros_like(),
            conv_in: self.conv_in.zeros_like(),
            conv_out: self.conv_out.zeros_like(),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            dense_out: self.dense_out.zeros_like(),
        }
    }

    /// Pure forward pass; `x` is (batch, in_width). Large batches are split
    /// into fixed row chunks evaluated in parallel; rows are independent, so
    /// the result is identical to the sequential pass.
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        assert_eq!(x.ncols(), self.spec.in_width, "input width mismatch");
        const ROW_CHUNK: usize = 16_384;
        if x.nrows() <= ROW_CHUNK {
            let (y, _) = self.forward_impl(x, false);
            return y;
        }
        use rayon::prelude::*;
        let bounds: Vec<(usize, usize)> = (0..x.nrows())
            .step_by(ROW_CHUNK)
            .map(|lo| (lo, (lo + ROW_CHUNK).min(x.nrows())))
            .collect();
        let chunks: Vec<Array2<F>> = bounds
            .into_par_iter()
            .map(|(lo, hi)| self.forward_impl(&x.slice(s![lo..hi, ..]).to_owned(), false).0)
            .collect();
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("chunk outputs concatenate")
    }

    /// Forward pass that caches activations for `backward`.
    pub fn forward_tape(&self, x: &Array2<F>) -> (Array2<F>, Tape<F>) {
        assert_eq!(x.ncols(), self.spec.in_width, "input width mismatch");
        let (y, tape) = self.forward_impl(x, true);
        (y, tape.expect("tape requested"))
    }

    fn forward_impl(&self, x: &Array2<F>, keep: bool) -> (Array2<F>, Option<Tape<F>>) {
        let batch = x.nrows();
        let hidden = self.spec.hidden;

        let mut a1 = self.dense_in.forward(x);
        tanh_inplace(&mut a1);

        let a1_3 = a1.clone().insert_axis(Axis(1));
        let mut a2 = self.conv_in.forward(&a1_3);
        tanh_inplace(&mut a2);

        let mut a3 = self
            .conv_out
            .forward(&a2)
            .into_shape_with_order((batch, hidden))
            .expect("conv output reshapes");
        tanh_inplace(&mut a3);

        let mut h = a3.clone();
        let mut block_cache = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut t1 = block.fc1.forward(&h);
            tanh_inplace(&mut t1);
            let u = block.fc2.forward(&t1);
            if keep {
                block_cache.push((h.clone(), t1));
            }
            h += &u;
        }

        let y = self.dense_out.forward(&h);
        let tape = if keep {
            Some(Tape { x: x.clone(), a1, a2, a3, blocks: block_cache, h_final: h })
        } else {
            None
        };
        (y, tape)
    }

    /// Backprop through the tape. Returns (grad w.r.t. input, parameter grads).
    pub fn backward(&self, tape: &Tape<F>, dy: &Array2<F>) -> (Array2<F>, Net<F>) {
        let mut g = self.zeros_like();
        let batch = tape.x.nrows();
        let hidden = self.spec.hidden;

        let mut dh = self.dense_out.backward(&tape.h_final, dy, &mut g.dense_out);

        for (block, (h_in, t1), gb) in itertools_rev(&self.blocks, &tape.blocks, &mut g.blocks) {
            // h_out = h_in + fc2(tanh(fc1(h_in)))
            let dt1 = block.fc2.backward(t1, &dh, &mut gb.fc2);
            let dz1 = &dt1 * &dtanh(t1);
            let dh_branch = block.fc1.backward(h_in, &dz1, &mut gb.fc1);
            dh += &dh_branch;
        }

        let dz3 = (&dh * &dtanh(&tape.a3)).insert_axis(Axis(1));
        let a2_pre = self.conv_out.backward(&tape.a2, &dz3, &mut g.conv_out);
        let dz2 = &a2_pre * &dtanh(&tape.a2);
        let a1_3 = tape.a1.clone().insert_axis(Axis(1));
        let da1 = self
            .conv_in
            .backward(&a1_3, &dz2, &mut g.conv_in)
            .into_shape_with_order((batch, hidden))
            .expect("conv grad reshapes");
        let dz1 = &da1 * &dtanh(&tape.a1);
        let dx = self.dense_in.backward(&tape.x, &dz1, &mut g.dense_in);
        (dx, g)
    }

    /// Visit every parameter array in a fixed, documented order. Layer names
    /// double as blob names inside checkpoints.
    pub fn visit_params<'a>(&'a self) -> Vec<(String, &'a [F])> {
        let mut out: Vec<(String, &[F])> = Vec::new();
        out.push(("dense_in.w".into(), self.dense_in.w.as_slice().unwrap()));
        out.push(("dense_in.b".into(), self.dense_in.b.as_slice().unwrap()));
        out.push(("conv_in.w".into(), self.conv_in.w.as_slice().unwrap()));
        out.push(("conv_in.b".into(), self.conv_in.b.as_slice().unwrap()));
        out.push(("conv_out.w".into(), self.conv_out.w.as_slice().unwrap()));
        out.push(("conv_out.b".into(), self.conv_out.b.as_slice().unwrap()));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("res{i}.fc1.w"), b.fc1.w.as_slice().unwrap()));
            out.push((format!("res{i}.fc1.b"), b.fc1.b.as_slice().unwrap()));
            out.push((format!("res{i}.fc2.w"), b.fc2.w.as_slice().unwrap()));
            out.push((format!("res{i}.fc2.b"), b.fc2.b.as_slice().unwrap()));
        }
        out.push(("dense_out.w".into(), self.dense_out.w.as_slice().unwrap()));
        out.push(("dense_out.b".into(), self.dense_out.b.as_slice().unwrap()));
        out
    }

    pub fn visit_params_mut<'a>(&'a mut self) -> Vec<(String, &'a mut [F])> {
        let mut out: Vec<(String, &mut [F])> = Vec::new();
        out.push(("dense_in.w".into(), self.dense_in.w.as_slice_mut().unwrap()));
        out.push(("dense_in.b".into(), self.dense_in.b.as_slice_mut().unwrap()));
        out.push(("conv_in.w".into(), self.conv_in.w.as_slice_mut().unwrap()));
        out.push(("conv_in.b".into(), self.conv_in.b.as_slice_mut().unwrap()));
        out.push(("conv_out.w".into(), self.conv_out.w.as_slice_mut().unwrap()));
        out.push(("conv_out.b".into(), self.conv_out.b.as_slice_mut().unwrap()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("res{i}.fc1.w"), b.fc1.w.as_slice_mut().unwrap()));
            out.push((format!("res{i}.fc1.b"), b.fc1.b.as_slice_mut().unwrap()));
            out.push((format!("res{i}.fc2.w"), b.fc2.w.as_slice_mut().unwrap()));
            out.push((format!("res{i}.fc2.b"), b.fc2.b.as_slice_mut().unwrap()));
        }
        out.push(("dense_out.w".into(), self.dense_out.w.as_slice_mut().unwrap()));
        out.push(("dense_out.b".into(), self.dense_out.b.as_slice_mut().unwrap()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.visit_params().iter().map(|(_, s)| s.len()).sum()
    }

    /// Shapes of each named parameter blob, in visitation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        out.push(("dense_in.w".into(), self.dense_in.w.shape().to_vec()));
        out.push(("dense_in.b".into(), self.dense_in.b.shape().to_vec()));
        out.push(("conv_in.w".into(), self.conv_in.w.shape().to_vec()));
        out.push(("conv_in.b".into(), self.conv_in.b.shape().to_vec()));
        out.push(("conv_out.w".into(), self.conv_out.w.shape().to_vec()));
        out.push(("conv_out.b".into(), self.conv_out.b.shape().to_vec()));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("res{i}.fc1.w"), b.fc1.w.shape().to_vec()));
            out.push((format!("res{i}.fc1.b"), b.fc1.b.shape().to_vec()));
            out.push((format!("res{i}.fc2.w"), b.fc2.w.shape().to_vec()));
            out.push((format!("res{i}.fc2.b"), b.fc2.b.shape().to_vec()));
        }
        out.push(("dense_out.w".into(), self.dense_out.w.shape().to_vec()));
        out.push(("dense_out.b".into(), self.dense_out.b.shape().to_vec()));
        out
    }

    /// Accumulate `other`'s parameters into self (used to sum gradients).
    pub fn accumulate(&mut self, other: &Net<F>) {
        let theirs = other.visit_params();
        for ((_, mine), (_, theirs)) in self.visit_params_mut().into_iter().zip(theirs) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m = *m + *t;
            }
        }
    }

    /// Scale every parameter (used to weight gradient contributions).
    pub fn scale(&mut self, factor: F) {
        for (_, slice) in self.visit_params_mut() {
            for v in slice {
                *v = *v * factor;
            }
        }
    }
}

impl Net<f32> {
    /// SHA-256 over the little-endian bytes of all parameters.
    pub fn weight_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, slice) in self.visit_params() {
            hasher.update(name.as_bytes());
            for v in slice {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// Reverse zip over blocks, their tapes and their gradient slots.
fn itertools_rev<'a, F>(
    blocks: &'a [ResBlock<F>],
    tapes: &'a [(Array2<F>, Array2<F>)],
    grads: &'a mut [ResBlock<F>],
) -> impl Iterator<Item = (&'a ResBlock<F>, &'a (Array2<F>, Array2<F>), &'a mut ResBlock<F>)> {
    blocks.iter().rev().zip(tapes.iter().rev()).zip(grads.iter_mut().rev()).map(|((b, t), g)| (b, t, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> NetSpec {
        NetSpec::new(Role::Encryptor, Depth::Standard, 3, 8, 2, 2, 5)
    }

    #[test]
    fn forward_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Net::<f32>::new(small_spec(), &mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f32 - j as f32) * 0.1);
        let y1 = net.forward(&x);
        let y2 = net.forward(&x);
        assert_eq!(y1.dim(), (4, 5));
        assert_eq!(y1, y2);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Net::<f32>::new(small_spec(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = Net::<f32>::new(small_spec(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.weight_hash(), b.weight_hash());
        let c = Net::<f32>::new(small_spec(), &mut ChaCha8Rng::seed_from_u64(10));
        assert_ne!(a.weight_hash(), c.weight_hash());
    }

    #[test]
    fn double_depth_doubles_res_blocks() {
        let std = NetSpec::new(Role::AttackerPk, Depth::Standard, 6, 8, 2, 2, 1);
        let dbl = NetSpec::new(Role::AttackerPk, Depth::Double, 6, 8, 2, 2, 1);
        assert_eq!(dbl.res_blocks, 2 * std.res_blocks);
        // Parameter count grows by exactly the per-block parameter cost.
        let per_block = 2 * (8 * 8 + 8);
        assert_eq!(dbl.param_count() - std.param_count(), 2 * per_block);
    }

    #[test]
    fn param_count_matches_spec() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = small_spec();
        let net = Net::<f32>::new(spec.clone(), &mut rng);
        assert_eq!(net.param_count(), spec.param_count());
    }

    /// Central-difference check of the full backward pass at f64.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Net::<f64>::new(small_spec(), &mut rng);
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin() * 0.5);
        // Scalar objective: sum of squares of outputs.
        let loss_of = |net: &Net<f64>, x: &Array2<f64>| -> f64 {
            net.forward(x).iter().map(|v| v * v).sum()
        };
        let (y, tape) = net.forward_tape(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let (dx, grads) = net.backward(&tape, &dy);

        // Input gradient vs central differences.
        let eps = 1e-6;
        let mut xp = x.clone();
        for idx in [(0usize, 0usize), (2, 1), (5, 2)] {
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let fp = loss_of(&net, &xp);
            xp[idx] = orig - eps;
            let fm = loss_of(&net, &xp);
            xp[idx] = orig;
            let num = (fp - fm) / (2.0 * eps);
            let rel = (dx[idx] - num).abs() / num.abs().max(1e-8);
            assert!(rel < 1e-2, "input grad mismatch at {idx:?}: {} vs {num}", dx[idx]);
        }

        // A probe of weight slices across every layer kind.
        let flat_grads: Vec<(String, Vec<f64>)> = grads
            .visit_params()
            .into_iter()
            .map(|(n, s)| (n, s.to_vec()))
            .collect();
        for (name, gslice) in &flat_grads {
            let probe_idx = gslice.len() / 2;
            let num = {
                let eps = 1e-6;
                let (fp, fm);
                {
                    let slot = net
                        .visit_params_mut()
                        .into_iter()
                        .find(|(n, _)| n == name)
                        .unwrap();
                    slot.1[probe_idx] += eps;
                }
                fp = loss_of(&net, &x);
                {
                    let slot = net
                        .visit_params_mut()
                        .into_iter()
                        .find(|(n, _)| n == name)
                        .unwrap();
                    slot.1[probe_idx] -= 2.0 * eps;
                }
                fm = loss_of(&net, &x);
                {
                    let slot = net
                        .visit_params_mut()
                        .into_iter()
                        .find(|(n, _)| n == name)
                        .unwrap();
                    slot.1[probe_idx] += eps;
                }
                (fp - fm) / (2.0 * eps)
            };
            let analytic = gslice[probe_idx];
            let rel = (analytic - num).abs() / num.abs().max(1e-8);
            assert!(rel < 1e-2, "{name}[{probe_idx}]: analytic {analytic} vs numeric {num}");
        }
    }
}
