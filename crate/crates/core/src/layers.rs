//! Quantized convolution / fully-connected layers and the float helper layers
//! that sit between them.
//!
//! A quantized layer runs five quantize → inject → dequantize modules:
//!
//! ```text
//!   x ─Q(i8)─FI─DQ─┐
//!   w ─Q(w8)─FI─DQ─┼─ op ─Q(o32)─FI─DQ─Q(o8)─FI─DQ─▶ y
//!   b ─Q(b32)─FI─DQ┘
//! ```
//!
//! Bias and accumulator use the product scale `s_i · s_w`. Because every
//! operand of the operation sits on an integer grid, the product is evaluated
//! on the integer codes in `f64` (exact below 2^53) and rescaled; this is the
//! fake-quantized float result without the rounding noise of an `f32` sum.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fault::{FaultSite, LayerFaults};
use crate::gemm::{dgemm, sgemm, View};
use crate::quant::{derived_accumulator_params, QuantParams, RangeObserver};
use crate::tensor::FloatTensor;

/// Floor applied to a range before turning it into a scale, so that all-zero
/// tensors quantize to zero instead of failing.
pub const MIN_ABS_MAX: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_h: usize,
        in_w: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl Geometry {
    pub fn out_hw(&self) -> (usize, usize) {
        match *self {
            Geometry::Conv2d {
                kernel,
                stride,
                padding,
                in_h,
                in_w,
                ..
            } => (
                (in_h + 2 * padding - kernel) / stride + 1,
                (in_w + 2 * padding - kernel) / stride + 1,
            ),
            Geometry::Linear { .. } => (1, 1),
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            Geometry::Conv2d { out_channels, .. } => out_channels,
            Geometry::Linear { out_features, .. } => out_features,
        }
    }

    /// Length of one im2col column (`C·k·k`, or the input width).
    pub fn fan_in(&self) -> usize {
        match *self {
            Geometry::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            Geometry::Linear { in_features, .. } => in_features,
        }
    }

    pub fn positions(&self) -> usize {
        let (h, w) = self.out_hw();
        h * w
    }

    pub fn input_dims(&self) -> Vec<usize> {
        match *self {
            Geometry::Conv2d {
                in_channels,
                in_h,
                in_w,
                ..
            } => vec![in_channels, in_h, in_w],
            Geometry::Linear { in_features, .. } => vec![in_features],
        }
    }

    pub fn output_dims(&self) -> Vec<usize> {
        match *self {
            Geometry::Conv2d { out_channels, .. } => {
                let (h, w) = self.out_hw();
                vec![out_channels, h, w]
            }
            Geometry::Linear { out_features, .. } => vec![out_features],
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_dims().iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.outputs() * self.positions()
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        match *self {
            Geometry::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel],
            Geometry::Linear {
                in_features,
                out_features,
            } => vec![out_features, in_features],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.outputs() * self.fan_in()
    }

    /// Element count of one site's tensor for a single sample.
    pub fn site_elements(&self, site: FaultSite) -> usize {
        match site {
            FaultSite::I8 => self.input_len(),
            FaultSite::W8 => self.weight_len(),
            FaultSite::B32 => self.outputs(),
            FaultSite::O32 | FaultSite::O8 => self.output_len(),
        }
    }

    fn im2col<T: Copy + Default>(&self, x: &[T], cols: &mut Vec<T>) {
        cols.clear();
        match *self {
            Geometry::Linear { .. } => cols.extend_from_slice(x),
            Geometry::Conv2d {
                in_channels,
                kernel,
                stride,
                padding,
                in_h,
                in_w,
                ..
            } => {
                let (oh, ow) = self.out_hw();
                cols.resize(in_channels * kernel * kernel * oh * ow, T::default());
                let mut row = 0;
                for c in 0..in_channels {
                    let plane = &x[c * in_h * in_w..(c + 1) * in_h * in_w];
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                            for oy in 0..oh {
                                let iy = (oy * stride + ki) as isize - padding as isize;
                                if iy < 0 || iy >= in_h as isize {
                                    continue;
                                }
                                let src = &plane[iy as usize * in_w..(iy as usize + 1) * in_w];
                                for ox in 0..ow {
                                    let ix = (ox * stride + kj) as isize - padding as isize;
                                    if ix >= 0 && ix < in_w as isize {
                                        dst[oy * ow + ox] = src[ix as usize];
                                    }
                                }
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        match *self {
            Geometry::Linear { .. } => {
                for (d, c) in dx.iter_mut().zip(cols) {
                    *d += c;
                }
            }
            Geometry::Conv2d {
                in_channels,
                kernel,
                stride,
                padding,
                in_h,
                in_w,
                ..
            } => {
                let (oh, ow) = self.out_hw();
                let mut row = 0;
                for c in 0..in_channels {
                    let plane = &mut dx[c * in_h * in_w..(c + 1) * in_h * in_w];
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                            for oy in 0..oh {
                                let iy = (oy * stride + ki) as isize - padding as isize;
                                if iy < 0 || iy >= in_h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kj) as isize - padding as isize;
                                    if ix >= 0 && ix < in_w as isize {
                                        plane[iy as usize * in_w + ix as usize] += src[oy * ow + ox];
                                    }
                                }
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Quantized convolution or fully-connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QLayer {
    pub geometry: Geometry,
    /// Row-major `out × fan_in` (conv weights are `out × C × k × k`).
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub input_observer: RangeObserver,
    pub output_observer: RangeObserver,
}

/// Per-layer gradients of the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Scales the pipeline ran with; useful for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerScales {
    pub input: QuantParams,
    pub weight: QuantParams,
    pub accumulator: QuantParams,
    pub output: QuantParams,
}

/// What the backward pass needs from a training forward.
#[derive(Debug, Clone)]
pub struct QTrace {
    batch: usize,
    /// Per sample, the im2col matrix of the dequantized (and faulted) input.
    cols: Vec<Vec<f32>>,
    weight_hat: Vec<f32>,
    /// Per sample, the dequantized weights if this sample saw weight faults.
    weight_faulted: Vec<Option<Vec<f32>>>,
    mask_in: Vec<bool>,
    mask_bias: Vec<bool>,
    mask_acc: Vec<bool>,
    mask_out: Vec<bool>,
    pub scales: Option<LayerScales>,
}

enum OutputScale<'a> {
    Frozen(QuantParams),
    Observe(&'a mut RangeObserver),
}

/// Fails with `InvalidScale` for a non-finite range.
fn params_for(abs_max: f32, bits: u32) -> Result<QuantParams> {
    QuantParams::from_abs_max(abs_max.max(MIN_ABS_MAX), bits)
}

fn abs_max(xs: &[f32]) -> f32 {
    xs.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

fn in_range(p: &QuantParams, v: f64) -> bool {
    let (lo, hi) = p.float_range();
    v >= lo && v <= hi
}

impl QLayer {
    pub fn new(geometry: Geometry, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weight.len() != geometry.weight_len() {
            return Err(Error::ShapeMismatch {
                left: vec![weight.len()],
                right: geometry.weight_dims(),
            });
        }
        if bias.len() != geometry.outputs() {
            return Err(Error::ShapeMismatch {
                left: vec![bias.len()],
                right: vec![geometry.outputs()],
            });
        }
        Ok(QLayer {
            geometry,
            weight,
            bias,
            input_observer: RangeObserver::default(),
            output_observer: RangeObserver::default(),
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and bias.
    pub fn init<R: Rng + ?Sized>(geometry: Geometry, rng: &mut R) -> Self {
        let bound = 1.0 / (geometry.fan_in() as f32).sqrt();
        let weight = (0..geometry.weight_len())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..geometry.outputs())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        QLayer::new(geometry, weight, bias).expect("lengths follow geometry")
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn weight_params(&self) -> Result<QuantParams> {
        params_for(abs_max(&self.weight), 8)
    }

    /// Scales used by an evaluation forward (frozen observers).
    pub fn frozen_scales(&self) -> Result<LayerScales> {
        let input = params_for(self.input_observer.ema_abs_max(), 8)?;
        let weight = self.weight_params()?;
        Ok(LayerScales {
            input,
            weight,
            accumulator: derived_accumulator_params(input, weight)?,
            output: params_for(self.output_observer.ema_abs_max(), 8)?,
        })
    }

    pub fn freeze(&mut self) {
        self.input_observer.freeze();
        self.output_observer.freeze();
    }

    pub fn unfreeze(&mut self) {
        self.input_observer.unfreeze();
        self.output_observer.unfreeze();
    }

    /// Evaluation forward with frozen observers.
    pub fn forward_eval(
        &self,
        x: &FloatTensor,
        faults: &[&LayerFaults],
        index: usize,
        quantized: bool,
    ) -> Result<FloatTensor> {
        let q = match quantized {
            true => {
                let s = self.frozen_scales()?;
                Some((s.input, OutputScale::Frozen(s.output)))
            }
            false => None,
        };
        self.run(x, faults, index, q, false).map(|(y, _)| y)
    }

    /// Training forward: observers absorb this batch before quantizing.
    /// Frozen observers are used as they stand.
    pub fn forward_train(
        &mut self,
        x: &FloatTensor,
        faults: &[&LayerFaults],
        index: usize,
        quantized: bool,
    ) -> Result<(FloatTensor, QTrace)> {
        if !quantized {
            let (y, t) = self.run(x, faults, index, None, true)?;
            return Ok((y, t.expect("trace requested")));
        }
        if self.input_observer.is_frozen() {
            let s = self.frozen_scales()?;
            let (y, t) = self.run(x, faults, index, Some((s.input, OutputScale::Frozen(s.output))), true)?;
            return Ok((y, t.expect("trace requested")));
        }
        let mut input_obs = self.input_observer;
        input_obs.observe(x)?;
        let mut output_obs = self.output_observer;
        let input = params_for(input_obs.ema_abs_max(), 8)?;
        let (y, trace) = self.run(
            x,
            faults,
            index,
            Some((input, OutputScale::Observe(&mut output_obs))),
            true,
        )?;
        self.input_observer = input_obs;
        self.output_observer = output_obs;
        Ok((y, trace.expect("trace requested")))
    }

    fn run(
        &self,
        x: &FloatTensor,
        faults: &[&LayerFaults],
        index: usize,
        quant: Option<(QuantParams, OutputScale<'_>)>,
        keep_trace: bool,
    ) -> Result<(FloatTensor, Option<QTrace>)> {
        let g = &self.geometry;
        let n = x.dims()[0];
        let in_len = g.input_len();
        let out_len = g.output_len();
        let (outs, fan, pos) = (g.outputs(), g.fan_in(), g.positions());
        if x.len() != n * in_len {
            let mut want = vec![n];
            want.extend(g.input_dims());
            return Err(Error::ShapeMismatch {
                left: x.dims().to_vec(),
                right: want,
            });
        }
        if faults.len() != n {
            return Err(Error::PlanCount {
                expected: n,
                got: faults.len(),
            });
        }
        let (input_p, out_scale) = match quant {
            Some((p, o)) => (Some(p), Some(o)),
            None => (None, None),
        };
        if input_p.is_none() && faults.iter().any(|f| !f.is_empty()) {
            return Err(Error::Config(
                "fault injection needs quantization enabled".into(),
            ));
        }
        let weight_p = self.weight_params()?;
        let acc_p = input_p
            .map(|ip| derived_accumulator_params(ip, weight_p))
            .transpose()?;

        // Weight and bias codes shared by every sample without W8/B32 faults.
        let (w_codes, b_codes): (Vec<i32>, Vec<i32>) = match acc_p {
            Some(ap) => (
                self.weight.iter().map(|&w| weight_p.quantize_value(w)).collect(),
                self.bias.iter().map(|&b| ap.quantize_value(b)).collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        let w_base: Vec<f64> = match acc_p {
            Some(_) => w_codes.iter().map(|&v| v as f64).collect(),
            None => self.weight.iter().map(|&v| v as f64).collect(),
        };
        let b_base: Vec<f64> = match acc_p {
            Some(_) => b_codes.iter().map(|&v| v as f64).collect(),
            None => self.bias.iter().map(|&v| v as f64).collect(),
        };

        let mut trace = keep_trace.then(|| QTrace {
            batch: n,
            cols: Vec::with_capacity(n),
            weight_hat: match acc_p {
                Some(_) => w_codes.iter().map(|&v| weight_p.dequantize_value(v)).collect(),
                None => self.weight.clone(),
            },
            weight_faulted: Vec::with_capacity(n),
            mask_in: Vec::with_capacity(n * in_len),
            mask_bias: match acc_p {
                Some(ap) => self.bias.iter().map(|&b| in_range(&ap, b as f64)).collect(),
                None => vec![true; outs],
            },
            mask_acc: Vec::with_capacity(n * out_len),
            mask_out: Vec::with_capacity(n * out_len),
            scales: None,
        });

        // Stage 1: input, weight and bias modules, the operation, o32 module.
        let mut pre_out = vec![0.0f32; n * out_len];
        let mut codes = Vec::with_capacity(in_len);
        let mut xv = Vec::with_capacity(in_len);
        let mut cols: Vec<f64> = Vec::new();
        let mut acc = vec![0.0f64; out_len];
        let mut acc_codes = vec![0i32; out_len];
        for s in 0..n {
            let f = faults[s];
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            xv.clear();
            match input_p {
                Some(ip) => {
                    codes.clear();
                    codes.extend(xs.iter().map(|&v| ip.quantize_value(v)));
                    if let Some(t) = trace.as_mut() {
                        t.mask_in.extend(xs.iter().map(|&v| in_range(&ip, v as f64)));
                    }
                    f.apply(FaultSite::I8, &mut codes, index)?;
                    xv.extend(codes.iter().map(|&c| c as f64));
                }
                None => {
                    if let Some(t) = trace.as_mut() {
                        t.mask_in.extend(std::iter::repeat_n(true, in_len));
                    }
                    xv.extend(xs.iter().map(|&v| v as f64));
                }
            }
            g.im2col(&xv, &mut cols);

            let mut w_local = None;
            if !f.site(FaultSite::W8).is_empty() {
                let mut wc = w_codes.clone();
                f.apply(FaultSite::W8, &mut wc, index)?;
                if let Some(t) = trace.as_mut() {
                    t.weight_faulted
                        .push(Some(wc.iter().map(|&v| weight_p.dequantize_value(v)).collect()));
                }
                w_local = Some(wc.iter().map(|&v| v as f64).collect::<Vec<f64>>());
            } else if let Some(t) = trace.as_mut() {
                t.weight_faulted.push(None);
            }
            let mut b_local = None;
            if !f.site(FaultSite::B32).is_empty() {
                let mut bc = b_codes.clone();
                f.apply(FaultSite::B32, &mut bc, index)?;
                b_local = Some(bc.iter().map(|&v| v as f64).collect::<Vec<f64>>());
            }
            let wv = w_local.as_deref().unwrap_or(&w_base);
            let bv = b_local.as_deref().unwrap_or(&b_base);

            dgemm(outs, fan, pos, wv, &cols, 0.0, &mut acc);
            let dst = &mut pre_out[s * out_len..(s + 1) * out_len];
            match acc_p {
                Some(ap) => {
                    for o in 0..outs {
                        for p in 0..pos {
                            let i = o * pos + p;
                            let v = acc[i] + bv[o];
                            let clamped = v.clamp(i32::MIN as f64, i32::MAX as f64);
                            if let Some(t) = trace.as_mut() {
                                t.mask_acc.push(v == clamped);
                            }
                            acc_codes[i] = clamped as i32;
                        }
                    }
                    f.apply(FaultSite::O32, &mut acc_codes, index)?;
                    for (d, &c) in dst.iter_mut().zip(&acc_codes) {
                        *d = ap.dequantize_value(c);
                    }
                }
                None => {
                    for o in 0..outs {
                        for p in 0..pos {
                            dst[o * pos + p] = (acc[o * pos + p] + bv[o]) as f32;
                        }
                    }
                    if let Some(t) = trace.as_mut() {
                        t.mask_acc.extend(std::iter::repeat_n(true, out_len));
                    }
                }
            }
            if let Some(t) = trace.as_mut() {
                let scale = input_p.map_or(1.0, |ip| ip.scale() as f64);
                t.cols.push(cols.iter().map(|&c| (c * scale) as f32).collect());
            }
        }

        // Stage 2/3: output range, then the o8 module.
        let mut out_dims = vec![n];
        out_dims.extend(g.output_dims());
        let (Some(ip), Some(ap), Some(out_scale)) = (input_p, acc_p, out_scale) else {
            if let Some(t) = trace.as_mut() {
                t.mask_out = vec![true; n * out_len];
            }
            return Ok((FloatTensor::from_vec(&out_dims, pre_out)?, trace));
        };
        let out_p = match out_scale {
            OutputScale::Frozen(p) => p,
            OutputScale::Observe(obs) => {
                obs.observe_abs_max(abs_max(&pre_out))?;
                params_for(obs.ema_abs_max(), 8)?
            }
        };
        let mut y = vec![0.0f32; n * out_len];
        let mut out_codes = vec![0i32; out_len];
        for s in 0..n {
            let src = &pre_out[s * out_len..(s + 1) * out_len];
            for (c, &v) in out_codes.iter_mut().zip(src) {
                *c = out_p.quantize_value(v);
            }
            if let Some(t) = trace.as_mut() {
                t.mask_out.extend(src.iter().map(|&v| in_range(&out_p, v as f64)));
            }
            faults[s].apply(FaultSite::O8, &mut out_codes, index)?;
            for (d, &c) in y[s * out_len..(s + 1) * out_len].iter_mut().zip(&out_codes) {
                *d = out_p.dequantize_value(c);
            }
        }
        if let Some(t) = trace.as_mut() {
            t.scales = Some(LayerScales {
                input: ip,
                weight: weight_p,
                accumulator: ap,
                output: out_p,
            });
        }
        Ok((FloatTensor::from_vec(&out_dims, y)?, trace))
    }

    /// Straight-through backward: every quantizer passes the gradient where
    /// its input was inside the clamp range, and injected flips are additive
    /// constants.
    pub fn backward(&self, trace: &QTrace, dy: &FloatTensor) -> Result<(FloatTensor, LayerGrads)> {
        let g = &self.geometry;
        let n = trace.batch;
        let (outs, fan, pos) = (g.outputs(), g.fan_in(), g.positions());
        let in_len = g.input_len();
        let out_len = g.output_len();
        if dy.len() != n * out_len {
            return Err(Error::ShapeMismatch {
                left: dy.dims().to_vec(),
                right: vec![n, out_len],
            });
        }
        let mut dw = vec![0.0f32; outs * fan];
        let mut db = vec![0.0f32; outs];
        let mut dx = vec![0.0f32; n * in_len];
        let mut dacc = vec![0.0f32; out_len];
        let mut dcols = vec![0.0f32; fan * pos];
        for s in 0..n {
            let range = s * out_len..(s + 1) * out_len;
            for (((d, &gy), &mo), &ma) in dacc
                .iter_mut()
                .zip(&dy.data()[range.clone()])
                .zip(&trace.mask_out[range.clone()])
                .zip(&trace.mask_acc[range])
            {
                *d = if mo && ma { gy } else { 0.0 };
            }
            for o in 0..outs {
                db[o] += dacc[o * pos..(o + 1) * pos].iter().sum::<f32>();
            }
            let cols = &trace.cols[s];
            sgemm(
                View::new(&dacc, outs, pos),
                View::new(cols, fan, pos).t(),
                1.0,
                &mut dw,
            );
            let w = trace.weight_faulted[s].as_deref().unwrap_or(&trace.weight_hat);
            sgemm(
                View::new(w, outs, fan).t(),
                View::new(&dacc, outs, pos),
                0.0,
                &mut dcols,
            );
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            g.col2im(&dcols, dxs);
            for (d, &m) in dxs.iter_mut().zip(&trace.mask_in[s * in_len..(s + 1) * in_len]) {
                if !m {
                    *d = 0.0;
                }
            }
        }
        for (d, &m) in db.iter_mut().zip(&trace.mask_bias) {
            if !m {
                *d = 0.0;
            }
        }
        let mut in_dims = vec![n];
        in_dims.extend(g.input_dims());
        Ok((
            FloatTensor::from_vec(&in_dims, dx)?,
            LayerGrads {
                weight: dw,
                bias: db,
            },
        ))
    }
}

pub fn relu(x: &FloatTensor) -> FloatTensor {
    x.map(|v| v.max(0.0))
}

pub(crate) fn relu_backward(x: &FloatTensor, dy: &FloatTensor) -> FloatTensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    FloatTensor::new(x.shape().clone(), data).expect("same shape")
}

/// 2×2, stride 2 max pooling over `N×C×H×W`; also returns the flat argmax
/// input index of every output.
pub fn maxpool2x2(x: &FloatTensor) -> Result<(FloatTensor, Vec<usize>)> {
    let d = x.dims();
    if d.len() != 4 {
        return Err(Error::ShapeMismatch {
            left: d.to_vec(),
            right: vec![0, 0, 0, 0],
        });
    }
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddPooling { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    let xs = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[i] > xs[best] {
                        best = i;
                    }
                }
                out.push(xs[best]);
                idx.push(best);
            }
        }
    }
    Ok((FloatTensor::from_vec(&[n, c, oh, ow], out)?, idx))
}

pub(crate) fn maxpool_backward(in_dims: &[usize], argmax: &[usize], dy: &FloatTensor) -> FloatTensor {
    let mut dx = vec![0.0f32; in_dims.iter().product()];
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx[i] += g;
    }
    FloatTensor::from_vec(in_dims, dx).expect("dims from forward")
}

/// Inverted dropout. Returns the output and the per-element multiplier.
pub fn dropout<R: Rng + ?Sized>(x: &FloatTensor, p: f32, rng: &mut R, train: bool) -> (FloatTensor, Vec<f32>) {
    if !train || p <= 0.0 {
        return (x.clone(), vec![1.0; x.len()]);
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..x.len())
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    (FloatTensor::new(x.shape().clone(), data).expect("same shape"), mask)
}

pub(crate) fn scale_by(dy: &FloatTensor, mask: &[f32]) -> FloatTensor {
    let data = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
    FloatTensor::new(dy.shape().clone(), data).expect("same shape")
}

/// `N×...` to `N×(product of the rest)`.
pub fn flatten(x: &FloatTensor) -> FloatTensor {
    let n = x.dims()[0];
    let rest = x.len() / n;
    x.clone().reshape(&[n, rest]).expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::NO_FAULTS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_geom(c: usize, o: usize, k: usize, pad: usize, h: usize, w: usize) -> Geometry {
        Geometry::Conv2d {
            in_channels: c,
            out_channels: o,
            kernel: k,
            stride: 1,
            padding: pad,
            in_h: h,
            in_w: w,
        }
    }

    /// Direct nested-loop convolution in f64.
    fn reference_conv(g: &Geometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let Geometry::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            in_h,
            in_w,
        } = *g
        else {
            unreachable!()
        };
        let (oh, ow) = g.out_hw();
        let mut out = vec![0.0; out_channels * oh * ow];
        for o in 0..out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..in_channels {
                        for ki in 0..kernel {
                            for kj in 0..kernel {
                                let iy = (oy * stride + ki) as isize - padding as isize;
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < in_h && (ix as usize) < in_w {
                                    acc += x[(c * in_h + iy as usize) * in_w + ix as usize]
                                        * w[((o * in_channels + c) * kernel + ki) * kernel + kj];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn frozen_layer(g: Geometry, seed: u64, in_max: f32, out_max: f32) -> QLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = QLayer::init(g, &mut rng);
        l.input_observer = RangeObserver::frozen_at(in_max, 0.01).unwrap();
        l.output_observer = RangeObserver::frozen_at(out_max, 0.01).unwrap();
        l
    }

    fn random_input(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn empty_plan_matches_float_conv_within_quantization_bound() {
        let g = conv_geom(2, 3, 3, 1, 5, 5);
        let l = frozen_layer(g, 1, 1.0, 4.0);
        let xs = random_input(2 * 25, 2);
        let x = FloatTensor::from_vec(&[1, 2, 5, 5], xs.clone()).unwrap();
        let y = l.forward_eval(&x, &[&NO_FAULTS], 0, true).unwrap();
        let s = l.frozen_scales().unwrap();
        let xf: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let wf: Vec<f64> = l.weight.iter().map(|&v| v as f64).collect();
        let bf: Vec<f64> = l.bias.iter().map(|&v| v as f64).collect();
        let reference = reference_conv(&g, &xf, &wf, &bf);
        // Error budget: input and weight rounding through every product,
        // bias rounding, output rounding.
        let (si, sw, so) = (s.input.scale() as f64, s.weight.scale() as f64, s.output.scale() as f64);
        let w_abs: f64 = wf.iter().map(|w| w.abs()).fold(0.0, f64::max);
        let fan = g.fan_in() as f64;
        let bound = fan * (si / 2.0 * w_abs + sw / 2.0 * 1.0 + si * sw / 4.0)
            + s.accumulator.scale() as f64 / 2.0
            + so / 2.0;
        for (got, want) in y.data().iter().zip(&reference) {
            assert!(
                (*got as f64 - want).abs() <= bound + 1e-6,
                "got {got}, want {want}, bound {bound}"
            );
        }
    }

    #[test]
    fn empty_plan_equals_fake_quantized_reference_exactly() {
        let g = conv_geom(2, 3, 3, 1, 4, 4);
        let l = frozen_layer(g, 3, 1.0, 3.0);
        let xs = random_input(32, 4);
        let x = FloatTensor::from_vec(&[1, 2, 4, 4], xs.clone()).unwrap();
        let y = l.forward_eval(&x, &[&NO_FAULTS], 0, true).unwrap();
        let s = l.frozen_scales().unwrap();
        // Integer-code reference: exact i64 convolution, then DQ/Q/DQ.
        let xi: Vec<f64> = xs.iter().map(|&v| s.input.quantize_value(v) as f64).collect();
        let wi: Vec<f64> = l.weight.iter().map(|&v| s.weight.quantize_value(v) as f64).collect();
        let bi: Vec<f64> = l.bias.iter().map(|&v| s.accumulator.quantize_value(v) as f64).collect();
        let acc = reference_conv(&g, &xi, &wi, &bi);
        for (got, a) in y.data().iter().zip(&acc) {
            let pre = s.accumulator.dequantize_value(*a as i32);
            let want = s.output.dequantize_value(s.output.quantize_value(pre));
            assert_eq!(*got, want);
        }
    }

    #[test]
    fn output_sign_flip_moves_one_element_by_128_steps() {
        let g = Geometry::Linear {
            in_features: 4,
            out_features: 3,
        };
        let l = frozen_layer(g, 5, 1.0, 2.0);
        let x = FloatTensor::from_vec(&[1, 4], random_input(4, 6)).unwrap();
        let clean = l.forward_eval(&x, &[&NO_FAULTS], 0, true).unwrap();
        let mut f = LayerFaults::default();
        f.push(FaultSite::O8, 1, 7);
        let hit = l.forward_eval(&x, &[&f], 0, true).unwrap();
        let so = l.frozen_scales().unwrap().output;
        let before = so.quantize_value(clean.data()[1]);
        let step = if before >= 0 { -128 } else { 128 };
        assert_eq!(hit.data()[1], so.dequantize_value(before + step));
        assert_eq!(hit.data()[0], clean.data()[0]);
        assert_eq!(hit.data()[2], clean.data()[2]);
    }

    #[test]
    fn accumulator_is_clamped_to_32_bits() {
        let g = Geometry::Linear {
            in_features: 1,
            out_features: 1,
        };
        // Bias large enough that its own code saturates at i32::MAX; adding
        // the product (127 * 127) must clamp rather than wrap.
        let mut l = QLayer::new(g, vec![1.0], vec![1e30]).unwrap();
        l.input_observer = RangeObserver::new(0.01).unwrap();
        l.output_observer = RangeObserver::new(0.01).unwrap();
        let x = FloatTensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let (y, tr) = l.forward_train(&x, &[&NO_FAULTS], 0, true).unwrap();
        let s = tr.scales.unwrap();
        let top = s.accumulator.dequantize_value(i32::MAX);
        assert_eq!(y.data()[0], s.output.dequantize_value(s.output.quantize_value(top)));
        assert_eq!(tr.mask_acc, vec![false]);
        assert_eq!(tr.mask_bias, vec![false]);
    }

    #[test]
    fn double_flip_restores_clean_forward() {
        let g = conv_geom(1, 2, 3, 1, 4, 4);
        let l = frozen_layer(g, 8, 1.0, 2.0);
        let x = FloatTensor::from_vec(&[1, 1, 4, 4], random_input(16, 9)).unwrap();
        let clean = l.forward_eval(&x, &[&NO_FAULTS], 0, true).unwrap();
        let mut f = LayerFaults::default();
        for site in FaultSite::ALL {
            f.push(site, 1, 3);
            f.push(site, 1, 3);
        }
        assert_eq!(l.forward_eval(&x, &[&f], 0, true).unwrap(), clean);
    }

    #[test]
    fn target_outside_site_is_rejected() {
        let g = Geometry::Linear {
            in_features: 2,
            out_features: 3,
        };
        let l = frozen_layer(g, 1, 1.0, 1.0);
        let x = FloatTensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap();
        let mut f = LayerFaults::default();
        f.push(FaultSite::W8, 6, 0);
        assert!(matches!(
            l.forward_eval(&x, &[&f], 4, true),
            Err(Error::TargetOutOfRange { layer: 4, .. })
        ));
    }

    #[test]
    fn saturated_input_gets_zero_gradient() {
        let g = Geometry::Linear {
            in_features: 2,
            out_features: 1,
        };
        let mut l = QLayer::new(g, vec![0.5, -0.25], vec![0.0]).unwrap();
        // momentum 0.5: ema goes 1.0 -> 0.5 * 1.0 + 0.5 * 3.0 = 2.0, so the
        // element at 3.0 lies beyond the input clamp range.
        l.input_observer = RangeObserver::new(0.5).unwrap();
        l.input_observer.observe_abs_max(1.0).unwrap();
        let x = FloatTensor::from_vec(&[1, 2], vec![0.5, 3.0]).unwrap();
        let (_, tr) = l.forward_train(&x, &[&NO_FAULTS], 0, true).unwrap();
        let (dx, _) = l
            .backward(&tr, &FloatTensor::from_vec(&[1, 1], vec![1.0]).unwrap())
            .unwrap();
        assert_ne!(dx.data()[0], 0.0);
        assert_eq!(dx.data()[1], 0.0);
    }

    #[test]
    fn dropout_eval_identity_and_train_mask() {
        let x = FloatTensor::from_vec(&[1, 8], vec![1.0; 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, _) = dropout(&x, 0.25, &mut rng, false);
        assert_eq!(y, x);
        let (y, mask) = dropout(&x, 0.5, &mut rng, true);
        for (v, m) in y.data().iter().zip(&mask) {
            assert!(*v == 0.0 || *v == 2.0);
            assert_eq!(*v, *m);
        }
        let g = scale_by(&FloatTensor::from_vec(&[1, 8], vec![1.0; 8]).unwrap(), &mask);
        for (gv, m) in g.data().iter().zip(&mask) {
            if *m == 0.0 {
                assert_eq!(*gv, 0.0);
            }
        }
    }

    #[test]
    fn small_float_layers() {
        let x = FloatTensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let p = FloatTensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2(&p).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
        let odd = FloatTensor::from_vec(&[1, 1, 3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(maxpool2x2(&odd), Err(Error::OddPooling { h: 3, w: 2 })));
        let f = flatten(&FloatTensor::zeros(crate::tensor::Shape::new(vec![2, 3, 2, 2]).unwrap()));
        assert_eq!(f.dims(), &[2, 12]);
    }
}
