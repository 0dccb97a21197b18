//! Convolutional Poisson-rate regressor with hand-written reverse mode.
//!
//! Layout: conv3×3(3→c1)/ReLU/maxpool2 → conv3×3(c1→c2)/ReLU/maxpool2 →
//! conv3×3(c2→c3)/ReLU/global-average-pool → dense(c3→d)/ReLU → dense(d→1) → exp.
//! Convolutions use unit stride and one pixel of zero padding.

use std::fmt::Debug;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, LinalgScalar};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Constant subtracted from every input pixel before the first convolution.
pub const INPUT_CENTRE: f64 = 0.5;

/// Floating-point type the network can run in.
pub trait Scalar: LinalgScalar + Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    /// Square input edge in pixels.
    pub input: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub embed: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self { input: 64, c1: 8, c2: 16, c3: 16, embed: 64 }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.input < 4 {
            return Err(Error::domain("input edge must be at least 4 pixels"));
        }
        if [self.c1, self.c2, self.c3, self.embed].contains(&0) {
            return Err(Error::domain("layer widths must be positive"));
        }
        Ok(())
    }

    fn sizes(&self) -> [usize; 3] {
        let s1 = self.input;
        let s2 = s1 / 2;
        let s3 = s2 / 2;
        [s1, s2, s3]
    }
}

/// Every trainable tensor, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    /// `(cout, cin·9)` row-major, kernel index `ci·9 + ky·3 + kx`.
    pub conv1_w: Array2<T>,
    pub conv1_b: Array1<T>,
    pub conv2_w: Array2<T>,
    pub conv2_b: Array1<T>,
    pub conv3_w: Array2<T>,
    pub conv3_b: Array1<T>,
    /// `(embed, c3)`
    pub fc1_w: Array2<T>,
    pub fc1_b: Array1<T>,
    /// `(1, embed)`
    pub fc2_w: Array2<T>,
    pub fc2_b: Array1<T>,
}

pub const TENSOR_NAMES: [&str; 10] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

impl<T: Scalar> Params<T> {
    pub fn zeros(a: &Arch) -> Self {
        Self {
            conv1_w: Array2::zeros((a.c1, 3 * 9)),
            conv1_b: Array1::zeros(a.c1),
            conv2_w: Array2::zeros((a.c2, a.c1 * 9)),
            conv2_b: Array1::zeros(a.c2),
            conv3_w: Array2::zeros((a.c3, a.c2 * 9)),
            conv3_b: Array1::zeros(a.c3),
            fc1_w: Array2::zeros((a.embed, a.c3)),
            fc1_b: Array1::zeros(a.embed),
            fc2_w: Array2::zeros((1, a.embed)),
            fc2_b: Array1::zeros(1),
        }
    }

    pub fn tensors(&self) -> [&[T]; 10] {
        [
            self.conv1_w.as_slice().unwrap(),
            self.conv1_b.as_slice().unwrap(),
            self.conv2_w.as_slice().unwrap(),
            self.conv2_b.as_slice().unwrap(),
            self.conv3_w.as_slice().unwrap(),
            self.conv3_b.as_slice().unwrap(),
            self.fc1_w.as_slice().unwrap(),
            self.fc1_b.as_slice().unwrap(),
            self.fc2_w.as_slice().unwrap(),
            self.fc2_b.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 10] {
        [
            self.conv1_w.as_slice_mut().unwrap(),
            self.conv1_b.as_slice_mut().unwrap(),
            self.conv2_w.as_slice_mut().unwrap(),
            self.conv2_b.as_slice_mut().unwrap(),
            self.conv3_w.as_slice_mut().unwrap(),
            self.conv3_b.as_slice_mut().unwrap(),
            self.fc1_w.as_slice_mut().unwrap(),
            self.fc1_b.as_slice_mut().unwrap(),
            self.fc2_w.as_slice_mut().unwrap(),
            self.fc2_b.as_slice_mut().unwrap(),
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::from_f64(v.as_f64()));
        let c2 = |a: &Array2<T>| a.mapv(|v| U::from_f64(v.as_f64()));
        Params {
            conv1_w: c2(&self.conv1_w),
            conv1_b: c1(&self.conv1_b),
            conv2_w: c2(&self.conv2_w),
            conv2_b: c1(&self.conv2_b),
            conv3_w: c2(&self.conv3_w),
            conv3_b: c1(&self.conv3_b),
            fc1_w: c2(&self.fc1_w),
            fc1_b: c1(&self.fc1_b),
            fc2_w: c2(&self.fc2_w),
            fc2_b: c1(&self.fc2_b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvRegressor<T> {
    pub arch: Arch,
    pub params: Params<T>,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<T> {
    /// Predicted rate, always positive.
    pub rate: T,
    /// Post-ReLU activations of the penultimate dense layer.
    pub embedding: Array1<T>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    cols1: Array2<T>,
    r1: Array2<T>,
    arg1: Vec<usize>,
    cols2: Array2<T>,
    r2: Array2<T>,
    arg2: Vec<usize>,
    cols3: Array2<T>,
    r3: Array2<T>,
    pooled: Array1<T>,
    hidden: Array1<T>,
    pub out: Forward<T>,
}

impl<T: Scalar> ConvRegressor<T> {
    /// He-normal weights, zero biases, output bias at `ln(initial_rate)`.
    pub fn init(arch: Arch, seed: u64, initial_rate: f64) -> Result<Self> {
        arch.validate()?;
        if !(initial_rate > 0.0) {
            return Err(Error::domain("initial rate must be positive"));
        }
        let mut rng = CounterRng::derive(seed, 0xC0FFEE);
        let mut params = Params::<T>::zeros(&arch);
        let mut he = |w: &mut Array2<T>| {
            let std = (2.0 / w.ncols() as f64).sqrt();
            w.iter_mut().for_each(|v| *v = T::from_f64(std * rng.normal()));
        };
        he(&mut params.conv1_w);
        he(&mut params.conv2_w);
        he(&mut params.conv3_w);
        he(&mut params.fc1_w);
        // keep the initial output close to the starting rate
        let std = (1.0 / params.fc2_w.ncols() as f64).sqrt() * 0.1;
        params.fc2_w.iter_mut().for_each(|v| *v = T::from_f64(std * rng.normal()));
        params.fc2_b[0] = T::from_f64(initial_rate.ln());
        Ok(Self { arch, params })
    }

    pub fn with_params(arch: Arch, params: Params<T>) -> Result<Self> {
        arch.validate()?;
        let expect = Params::<T>::zeros(&arch);
        for (i, (a, b)) in params.tensors().iter().zip(expect.tensors()).enumerate() {
            if a.len() != b.len() {
                return Err(Error::domain(format!(
                    "{} has {} values, architecture needs {}",
                    TENSOR_NAMES[i],
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn input_len(&self) -> usize {
        3 * self.arch.input * self.arch.input
    }

    pub fn forward(&self, input: &[T]) -> Result<Forward<T>> {
        Ok(self.forward_cached(input)?.out)
    }

    pub fn forward_cached(&self, input: &[T]) -> Result<Cache<T>> {
        let a = &self.arch;
        if input.len() != self.input_len() {
            return Err(Error::domain(format!(
                "input has {} values, model expects 3×{}×{}",
                input.len(),
                a.input,
                a.input
            )));
        }
        let [s1, s2, s3] = a.sizes();
        let p = &self.params;

        // inputs live in [0, 1]; centring them conditions the first layer
        let half = T::from_f64(INPUT_CENTRE);
        let centred: Vec<T> = input.iter().map(|&v| v - half).collect();
        let cols1 = im2col(&centred, 3, s1, s1);
        let r1 = conv_relu(&p.conv1_w, &p.conv1_b, &cols1, 1)?;
        let (pool1, arg1) = maxpool2(&r1, s1, s1);
        let cols2 = im2col(pool1.as_slice().unwrap(), a.c1, s2, s2);
        let r2 = conv_relu(&p.conv2_w, &p.conv2_b, &cols2, 2)?;
        let (pool2, arg2) = maxpool2(&r2, s2, s2);
        let cols3 = im2col(pool2.as_slice().unwrap(), a.c2, s3, s3);
        let r3 = conv_relu(&p.conv3_w, &p.conv3_b, &cols3, 3)?;
        let inv = T::from_f64(1.0 / (s3 * s3) as f64);
        let pooled: Array1<T> = r3.rows().into_iter().map(|r| r.sum() * inv).collect();

        let hidden = (p.fc1_w.dot(&pooled) + &p.fc1_b).mapv(relu);
        check_finite(hidden.iter(), 4, "fc1")?;
        let logit = p.fc2_w.row(0).dot(&hidden) + p.fc2_b[0];
        let rate = logit.exp();
        if !rate.is_finite() || rate <= T::zero() {
            return Err(Error::NonFinite { layer: 5, name: "rate" });
        }
        Ok(Cache {
            cols1,
            r1,
            arg1,
            cols2,
            r2,
            arg2,
            cols3,
            r3,
            pooled,
            hidden: hidden.clone(),
            out: Forward { rate, embedding: hidden },
        })
    }

    /// Accumulate `∂loss/∂logit` back through the network into `grads`.
    pub fn backward_into(&self, cache: &Cache<T>, dlogit: T, grads: &mut Params<T>) {
        let a = &self.arch;
        let p = &self.params;
        let [s1, s2, s3] = a.sizes();

        // output layer
        grads.fc2_b[0] = grads.fc2_b[0] + dlogit;
        grads
            .fc2_w
            .row_mut(0)
            .zip_mut_with(&cache.hidden, |g, h| *g = *g + dlogit * *h);
        let mut dh = p.fc2_w.row(0).mapv(|w| w * dlogit);
        dh.zip_mut_with(&cache.hidden, |d, h| {
            if *h <= T::zero() {
                *d = T::zero();
            }
        });

        // fc1
        outer_add(&mut grads.fc1_w, dh.view(), cache.pooled.view());
        grads.fc1_b.zip_mut_with(&dh, |g, d| *g = *g + *d);
        let dpooled = p.fc1_w.t().dot(&dh);

        // global average pool + ReLU of conv3
        let inv = T::from_f64(1.0 / (s3 * s3) as f64);
        let mut d3 = Array2::<T>::zeros(cache.r3.raw_dim());
        for ((mut drow, rrow), dp) in d3.rows_mut().into_iter().zip(cache.r3.rows()).zip(dpooled.iter()) {
            let g = *dp * inv;
            drow.zip_mut_with(&rrow, |d, r| {
                if *r > T::zero() {
                    *d = g;
                }
            });
        }
        let dpool2 = conv_backward(&p.conv3_w, &cache.cols3, &d3, &mut grads.conv3_w, &mut grads.conv3_b, a.c2, s3, s3);

        let mut d2 = unpool(&dpool2, &cache.arg2, a.c2, s2 * s2);
        relu_mask(&mut d2, &cache.r2);
        let dpool1 = conv_backward(&p.conv2_w, &cache.cols2, &d2, &mut grads.conv2_w, &mut grads.conv2_b, a.c1, s2, s2);

        let mut d1 = unpool(&dpool1, &cache.arg1, a.c1, s1 * s1);
        relu_mask(&mut d1, &cache.r1);
        // no gradient needed with respect to the image
        conv_backward_params_only(&cache.cols1, &d1, &mut grads.conv1_w, &mut grads.conv1_b);
    }

    /// First-layer kernel for `filter`, one 3×3 array per input channel.
    pub fn first_layer_kernel(&self, filter: usize) -> Result<Vec<[[f64; 3]; 3]>> {
        if filter >= self.arch.c1 {
            return Err(Error::domain(format!(
                "filter index {filter} out of range (first layer has {})",
                self.arch.c1
            )));
        }
        let w = self.params.conv1_w.row(filter);
        Ok((0..3)
            .map(|c| {
                let mut k = [[0.0; 3]; 3];
                for (ky, row) in k.iter_mut().enumerate() {
                    for (kx, v) in row.iter_mut().enumerate() {
                        *v = w[c * 9 + ky * 3 + kx].as_f64();
                    }
                }
                k
            })
            .collect())
    }
}

#[inline]
fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn check_finite<'a, T: Scalar>(mut it: impl Iterator<Item = &'a T>, layer: usize, name: &'static str) -> Result<()> {
    if it.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer, name })
    }
}

/// Patch matrix `(cin·9, h·w)` for a 3×3 kernel with one pixel of zero padding.
pub fn im2col<T: Scalar>(input: &[T], cin: usize, h: usize, w: usize) -> Array2<T> {
    let mut cols = Array2::<T>::zeros((cin * 9, h * w));
    let out = cols.as_slice_mut().unwrap();
    let hw = h * w;
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut out[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let x_lo = if kx == 0 { 1 } else { 0 };
                let x_hi = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let src = &plane[yy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    for x in x_lo..x_hi {
                        dst[x] = src[x + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch-gradient matrix back to image layout.
fn col2im<T: Scalar>(cols: &Array2<T>, cin: usize, h: usize, w: usize) -> Array2<T> {
    let hw = h * w;
    let mut img = Array2::<T>::zeros((cin, hw));
    let src = cols.as_slice().unwrap();
    let dst_all = img.as_slice_mut().unwrap();
    for ci in 0..cin {
        let plane = &mut dst_all[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &src[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let x_lo = if kx == 0 { 1 } else { 0 };
                let x_hi = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let g = &row[y * w..][..w];
                    let d = &mut plane[yy as usize * w..][..w];
                    for x in x_lo..x_hi {
                        d[x + kx - 1] = d[x + kx - 1] + g[x];
                    }
                }
            }
        }
    }
    img
}

fn conv_relu<T: Scalar>(w: &Array2<T>, b: &Array1<T>, cols: &Array2<T>, layer: usize) -> Result<Array2<T>> {
    let mut out = Array2::<T>::zeros((w.nrows(), cols.ncols()));
    for (mut row, bias) in out.rows_mut().into_iter().zip(b.iter()) {
        row.fill(*bias);
    }
    general_mat_mul(T::one(), w, cols, T::one(), &mut out);
    check_finite(out.iter(), layer, "conv")?;
    out.mapv_inplace(relu);
    Ok(out)
}

/// 2×2 max pool with stride 2 on `(c, h·w)`; returns pooled values and argmax positions.
fn maxpool2<T: Scalar>(x: &Array2<T>, h: usize, w: usize) -> (Array2<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let c = x.nrows();
    let mut out = Array2::<T>::zeros((c, oh * ow));
    let mut arg = vec![0usize; c * oh * ow];
    let src = x.as_slice().unwrap();
    let dst = out.as_slice_mut().unwrap();
    for ch in 0..c {
        let plane = &src[ch * h * w..];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                let o = ch * oh * ow + oy * ow + ox;
                dst[o] = plane[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

fn unpool<T: Scalar>(grad: &Array2<T>, arg: &[usize], c: usize, hw: usize) -> Array2<T> {
    let mut out = Array2::<T>::zeros((c, hw));
    let per = grad.ncols();
    let g = grad.as_slice().unwrap();
    let o = out.as_slice_mut().unwrap();
    for ch in 0..c {
        for i in 0..per {
            let k = ch * per + i;
            let dst = ch * hw + arg[k];
            o[dst] = o[dst] + g[k];
        }
    }
    out
}

fn relu_mask<T: Scalar>(grad: &mut Array2<T>, activation: &Array2<T>) {
    grad.zip_mut_with(activation, |g, a| {
        if *a <= T::zero() {
            *g = T::zero();
        }
    });
}

fn outer_add<T: Scalar>(m: &mut Array2<T>, u: ArrayView1<T>, v: ArrayView1<T>) {
    for (mut row, ui) in m.rows_mut().into_iter().zip(u.iter()) {
        row.zip_mut_with(&v, |r, vj| *r = *r + *ui * *vj);
    }
}

fn conv_backward_params_only<T: Scalar>(cols: &Array2<T>, dout: &Array2<T>, gw: &mut Array2<T>, gb: &mut Array1<T>) {
    general_mat_mul(T::one(), dout, &cols.t(), T::one(), gw);
    for (g, row) in gb.iter_mut().zip(dout.rows()) {
        *g = *g + row.sum();
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    w: &Array2<T>,
    cols: &Array2<T>,
    dout: &Array2<T>,
    gw: &mut Array2<T>,
    gb: &mut Array1<T>,
    cin: usize,
    h: usize,
    wd: usize,
) -> Array2<T> {
    conv_backward_params_only(cols, dout, gw, gb);
    let dcols = w.t().dot(dout);
    col2im(&dcols, cin, h, wd)
}

/// Mean Poisson negative log-likelihood `λ − y·ln λ` (constant dropped).
pub fn poisson_nll(rate: f64, target: f64) -> Result<f64> {
    if !(rate > 0.0) {
        return Err(Error::domain(format!("predicted rate must be positive, got {rate}")));
    }
    Ok(if target == 0.0 { rate } else { rate - target * rate.ln() })
}

/// Mean loss and gradients over a batch of `(input, target)` pairs.
pub fn backward<T: Scalar>(model: &ConvRegressor<T>, batch: &[(&[T], f64)]) -> Result<(f64, Params<T>)> {
    let mut grads = Params::zeros(&model.arch);
    let mut loss = 0.0f64;
    let inv = 1.0 / batch.len() as f64;
    for (input, target) in batch {
        let cache = model.forward_cached(input)?;
        let rate = cache.out.rate.as_f64();
        loss += poisson_nll(rate, *target)?;
        // d/dlogit of (λ − y ln λ) with λ = exp(logit)
        let dlogit = T::from_f64((rate - target) * inv);
        model.backward_into(&cache, dlogit, &mut grads);
    }
    Ok((loss * inv, grads))
}
