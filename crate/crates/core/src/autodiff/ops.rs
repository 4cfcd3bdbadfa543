use super::conv::{self, Geom};
use super::{ConvSpec, Graph, Mode, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn dims4(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.value(v).dims4()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        spec.validate()?;
        if spec.has_bias != b.is_some() {
            return Err(shape_err!("conv bias presence does not match spec"));
        }
        let (n, c, h, wd) = self.dims4(x)?;
        if c != spec.in_channels {
            return Err(shape_err!(
                "conv expects {} input channels, got {c}",
                spec.in_channels
            ));
        }
        if self.shape(w) != spec.weight_shape() {
            return Err(shape_err!(
                "conv weight shape {:?}, expected {:?}",
                self.shape(w),
                spec.weight_shape()
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_channels] {
                return Err(shape_err!("conv bias shape {:?}", self.shape(b)));
            }
        }
        let g = Geom { n, h, w: wd, spec };
        let out = conv::forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            g,
        );
        let value = Tensor::new(&[n, spec.out_channels, h, wd], out)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, rg))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("max_pool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling: each value fills a 2x2 patch.
    pub fn upsample_repeat2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                let row = &src[p * h * w + (y / 2) * w..][..w];
                let dst = &mut out[p * oh * ow + y * ow..][..ow];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = row[xo / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Upsample2 { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.requires_grad(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.requires_grad(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Train-mode batch norm over the N, H, W axes of an NCHW tensor.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = self.dims4(x)?;
        self.check_affine(c, gamma, beta)?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += src[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            let mu = s / m;
            let mut ss = 0.0;
            for b in 0..n {
                ss += src[(b * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Eval-mode batch norm with fixed per-channel statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        self.check_affine(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err!(
                "running stats length does not match {c} channels"
            ));
        }
        let hw = h * w;
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    out[i] = gv[ch] * (src[i] - running_mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    fn check_affine(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "batch norm gamma/beta must have shape [{c}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(())
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        let hw = h * w;
        let src = self.value(x).data();
        let out = (0..n * c)
            .map(|p| src[p * hw..][..hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// Inverted dropout. `seed` fixes the mask; eval mode is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut value = self.value(x).clone();
        for (v, s) in value.data_mut().iter_mut().zip(&scale) {
            *v *= s;
        }
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Dropout { x, scale }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// Concatenate NCHW tensors along the channel axis, in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let (n, _, h, w) = self.dims4(first)?;
        let mut total = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.dims4(v)?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err!(
                    "concat {:?} with {:?}",
                    self.shape(first),
                    self.shape(v)
                ));
            }
            total += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], out)?;
        let rg = self.any_grad(xs);
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, rg))
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        if len == 0 || start + len > c {
            return Err(shape_err!("channel slice {start}..{} of {c}", start + len));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&src[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let value = Tensor::new(&[n, len, h, w], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Narrow { x, start }, rg))
    }

    /// Output channel `k` is input channel `perm[k]`; `perm` must be a bijection.
    pub fn permute_channels(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        let mut seen = vec![false; c];
        if perm.len() != c {
            return Err(shape_err!(
                "permutation of length {} for {c} channels",
                perm.len()
            ));
        }
        for &p in perm {
            if p >= c || std::mem::replace(&mut seen[p], true) {
                return Err(shape_err!("channel map {perm:?} is not a permutation"));
            }
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for b in 0..n {
            for &p in perm {
                out.extend_from_slice(&src[(b * c + p) * hw..][..hw]);
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::PermuteChannels {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// `(n, k) x (k, m) -> (n, m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul {sa:?} x {sb:?}"));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let x = av[i * k + p];
                for j in 0..m {
                    out[i * m + j] += x * bv[p * m + j];
                }
            }
        }
        let value = Tensor::new(&[n, m], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// Multiplies every `(b, c)` plane of `x` by `s[b, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        if self.shape(s) != [n, c] {
            return Err(shape_err!(
                "channel scale {:?} for input {:?}",
                self.shape(s),
                self.shape(x)
            ));
        }
        let hw = h * w;
        let mut value = self.value(x).clone();
        let sv = self.value(s).data();
        for (p, plane) in value.data_mut().chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v *= sv[p]);
        }
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(value, Op::ScaleChannels { x, s }, rg))
    }

    /// `Σ x ⊙ weights`, a scalar projection used to test non-scalar outputs.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(shape_err!(
                "weighted_sum {:?} with {:?}",
                self.shape(x),
                weights.shape()
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Records a scalar function of `x` whose value and gradient were computed
    /// outside the graph (the segmentation losses).
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(shape_err!(
                "scalar_fn gradient {:?} for input {:?}",
                grad.shape(),
                self.shape(x)
            ));
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x, grad }, rg))
    }

    pub(super) fn backprop(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let (n, _, h, wd) = self.dims4(*x)?;
                let geom = Geom {
                    n,
                    h,
                    w: wd,
                    spec: *spec,
                };
                if self.requires_grad(*x) {
                    let dx = conv::backward_input(gd, self.value(*w).data(), geom);
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if self.requires_grad(*w) {
                    let dw = conv::backward_weight(gd, self.value(*x).data(), geom);
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw)?);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let db = conv::backward_bias(gd, geom);
                        self.accumulate(grads, *b, Tensor::new(self.shape(*b), db)?);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src as usize] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let (n, c, h, w) = self.dims4(*x)?;
                let ow = 2 * w;
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for p in 0..n * c {
                    for y in 0..2 * h {
                        let row = &gd[p * 4 * h * w + y * ow..][..ow];
                        let dst = &mut d[p * h * w + (y / 2) * w..][..w];
                        for (xo, gv) in row.iter().enumerate() {
                            dst[xo / 2] += gv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = zip_map(self.shape(*x), gd, xv, |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = zip_map(
                    self.shape(*x),
                    gd,
                    xv,
                    |g, v| {
                        if v > 0.0 {
                            g
                        } else {
                            slope * g
                        }
                    },
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = zip_map(self.shape(*x), gd, y, |g, s| g * s * (1.0 - s));
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.dims4(*x)?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for idx in off..off + hw {
                            dgamma[ch] += gd[idx] * xhat[idx];
                            dbeta[ch] += gd[idx];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gv = self.value(*gamma).data();
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gv[ch] * inv_std[ch] / m;
                            let off = (b * c + ch) * hw;
                            for idx in off..off + hw {
                                dx[idx] = k * (m * gd[idx] - dbeta[ch] - xhat[idx] * dgamma[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, h, w) = self.dims4(*x)?;
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let xv = self.value(*x).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for idx in off..off + hw {
                            dgamma[ch] += gd[idx] * (xv[idx] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += gd[idx];
                            dx[idx] = gd[idx] * gv[ch] * inv_std[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.dims4(*x)?;
                let hw = h * w;
                let mut dx = Tensor::zeros(self.shape(*x));
                for (p, plane) in dx.data_mut().chunks_mut(hw).enumerate() {
                    let v = gd[p] / hw as f64;
                    plane.iter_mut().for_each(|d| *d = v);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, scale } => {
                let dx = zip_map(self.shape(*x), gd, scale, |g, s| g * s);
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let da = zip_map(self.shape(*a), gd, bv, |g, y| g * y);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = zip_map(self.shape(*b), gd, av, |g, x| g * x);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Concat { xs } => {
                let (n, total, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            d.extend_from_slice(&gd[(b * total + offset) * hw..][..c * hw]);
                        }
                        self.accumulate(grads, v, Tensor::new(self.shape(v), d)?);
                    }
                    offset += c;
                }
            }
            Op::Narrow { x, start } => {
                let (n, c, h, w) = self.dims4(*x)?;
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let d = dx.data_mut();
                for b in 0..n {
                    d[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&gd[b * len * hw..(b + 1) * len * hw]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::PermuteChannels { x, perm } => {
                let (n, c, h, w) = self.dims4(*x)?;
                let hw = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let d = dx.data_mut();
                for b in 0..n {
                    for (k, &p) in perm.iter().enumerate() {
                        d[(b * c + p) * hw..][..hw].copy_from_slice(&gd[(b * c + k) * hw..][..hw]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MatMul { a, b } => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            da[i * k + p] = (0..m).map(|j| gd[i * m + j] * bv[p * m + j]).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(&[n, k], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * m];
                    for p in 0..k {
                        for j in 0..m {
                            db[p * m + j] = (0..n).map(|i| av[i * k + p] * gd[i * m + j]).sum();
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[k, m], db)?);
                }
            }
            Op::ScaleChannels { x, s } => {
                let (_, _, h, w) = self.dims4(*x)?;
                let hw = h * w;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                if self.requires_grad(*x) {
                    let mut dx = g.clone();
                    for (p, plane) in dx.data_mut().chunks_mut(hw).enumerate() {
                        plane.iter_mut().for_each(|d| *d *= sv[p]);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*s) {
                    let ds = (0..sv.len())
                        .map(|p| {
                            gd[p * hw..][..hw]
                                .iter()
                                .zip(&xv[p * hw..][..hw])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *s, Tensor::new(self.shape(*s), ds)?);
                }
            }
            Op::WeightedSum { x, weights } => {
                let dx = weights.map(|w| w * gd[0]);
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
            Op::ScalarFn { x, grad } => {
                self.accumulate(grads, *x, grad.map(|v| v * gd[0]));
            }
        }
        Ok(())
    }

    pub(super) fn node_flops(&self, i: usize) -> u64 {
        let node = &self.nodes[i];
        let out = node.value.len() as u64;
        match &node.op {
            Op::Conv2d { x, spec, .. } => {
                let s = self.shape(*x);
                spec.flops(s[0], s[2], s[3])
            }
            Op::MatMul { a, b } => {
                2 * (self.shape(*a)[0] * self.shape(*a)[1] * self.shape(*b)[1]) as u64
            }
            Op::Relu { .. }
            | Op::LeakyRelu { .. }
            | Op::Sigmoid { .. }
            | Op::BatchNormTrain { .. }
            | Op::BatchNormEval { .. }
            | Op::Dropout { .. }
            | Op::Add { .. }
            | Op::Mul { .. }
            | Op::ScaleChannels { .. }
            | Op::MaxPool2 { .. } => out,
            Op::GlobalAvgPool { x } => self.value(*x).len() as u64,
            Op::Leaf
            | Op::Upsample2 { .. }
            | Op::Concat { .. }
            | Op::Narrow { .. }
            | Op::PermuteChannels { .. }
            | Op::WeightedSum { .. }
            | Op::Sum { .. }
            | Op::ScalarFn { .. } => 0,
        }
    }
}

fn zip_map(shape: &[usize], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.iter().zip(other).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(shape, data).expect("gradient shape matches its input")
}
