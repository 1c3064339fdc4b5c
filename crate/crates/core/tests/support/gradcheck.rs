//! Backward pass of a conv + linear model against central differences of an
//! independent f64 implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qfi_core::layers::{Geometry, QLayer};
use qfi_core::model::{Layer, ModelGraph, Plans};
use qfi_core::train::cross_entropy;
use qfi_core::FloatTensor;

const C_IN: usize = 2;
const C_OUT: usize = 3;
const H: usize = 5;
const K: usize = 3;
const PAD: usize = 1;
const CLASSES: usize = 4;
const BATCH: usize = 2;

struct Params {
    conv_w: Vec<f64>,
    conv_b: Vec<f64>,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
}

fn conv_ref(p: &Params, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; C_OUT * H * H];
    for o in 0..C_OUT {
        for i in 0..H {
            for j in 0..H {
                let mut acc = p.conv_b[o];
                for c in 0..C_IN {
                    for ki in 0..K {
                        for kj in 0..K {
                            let (r, s) = (i + ki, j + kj);
                            if r < PAD || s < PAD || r - PAD >= H || s - PAD >= H {
                                continue;
                            }
                            acc += p.conv_w[((o * C_IN + c) * K + ki) * K + kj] * x[(c * H + r - PAD) * H + s - PAD];
                        }
                    }
                }
                y[(o * H + i) * H + j] = acc;
            }
        }
    }
    y
}

fn loss_ref(p: &Params, xs: &[f64], labels: &[usize]) -> f64 {
    let in_len = C_IN * H * H;
    let feat = C_OUT * H * H;
    let mut total = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let h = conv_ref(p, &xs[s * in_len..(s + 1) * in_len]);
        let logits: Vec<f64> = (0..CLASSES)
            .map(|k| p.fc_b[k] + (0..feat).map(|f| p.fc_w[k * feat + f] * h[f]).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        total += z.ln() + m - logits[label];
    }
    total / labels.len() as f64
}

/// Worst relative error over every parameter and the number of parameters
/// checked. The relative error uses `max(|fd|, 1e-3)` as denominator.
pub fn run(seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
    let feat = C_OUT * H * H;
    let p = Params {
        conv_w: draw(C_OUT * C_IN * K * K, 0.5),
        conv_b: draw(C_OUT, 0.2),
        fc_w: draw(CLASSES * feat, 0.3),
        fc_b: draw(CLASSES, 0.2),
    };
    let xs = draw(BATCH * C_IN * H * H, 1.0);
    let labels = [1usize, 3];

    // Values exactly representable in f32, so both implementations see the
    // same numbers.
    let f = |v: &[f64]| -> Vec<f32> { v.iter().map(|&x| x as f32).collect() };
    let round = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| x as f32 as f64).collect() };
    let p = Params {
        conv_w: round(&p.conv_w),
        conv_b: round(&p.conv_b),
        fc_w: round(&p.fc_w),
        fc_b: round(&p.fc_b),
    };
    let xs = round(&xs);

    let conv = Geometry::Conv2d {
        in_channels: C_IN,
        out_channels: C_OUT,
        kernel: K,
        stride: 1,
        padding: PAD,
        in_h: H,
        in_w: H,
    };
    let fc = Geometry::Linear {
        in_features: feat,
        out_features: CLASSES,
    };
    let mut model = ModelGraph::new(
        "toy",
        vec![C_IN, H, H],
        vec![
            Layer::Quant(QLayer::new(conv, f(&p.conv_w), f(&p.conv_b)).unwrap()),
            Layer::Flatten,
            Layer::Quant(QLayer::new(fc, f(&p.fc_w), f(&p.fc_b)).unwrap()),
        ],
    )
    .unwrap();
    model.set_quantized(false);

    let x = FloatTensor::from_vec(&[BATCH, C_IN, H, H], f(&xs)).unwrap();
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let (logits, trace) = model.forward_train(&x, Plans::None, &mut unused).unwrap();
    let (loss, grad) = cross_entropy(&logits, &labels).unwrap();
    assert!((loss as f64 - loss_ref(&p, &xs, &labels)).abs() < 1e-5);
    let grads = model.backward(Some(&trace), &grad).unwrap();
    let conv_g = grads[0].as_ref().unwrap();
    let fc_g = grads[2].as_ref().unwrap();
    assert!(grads[1].is_none());

    let h = 1e-4;
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut check = |name: &str, analytic: &[f32], field: fn(&mut Params) -> &mut Vec<f64>| {
        let mut q = Params {
            conv_w: p.conv_w.clone(),
            conv_b: p.conv_b.clone(),
            fc_w: p.fc_w.clone(),
            fc_b: p.fc_b.clone(),
        };
        for (i, &g) in analytic.iter().enumerate() {
            let orig = field(&mut q)[i];
            field(&mut q)[i] = orig + h;
            let up = loss_ref(&q, &xs, &labels);
            field(&mut q)[i] = orig - h;
            let down = loss_ref(&q, &xs, &labels);
            field(&mut q)[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (g as f64 - fd).abs() / fd.abs().max(1e-3);
            if rel > worst {
                worst = rel;
                if rel > 1e-3 {
                    eprintln!("{name}[{i}]: analytic {g} vs finite difference {fd}");
                }
            }
            checked += 1;
        }
    };
    check("conv.weight", &conv_g.weight, |p| &mut p.conv_w);
    check("conv.bias", &conv_g.bias, |p| &mut p.conv_b);
    check("fc.weight", &fc_g.weight, |p| &mut p.fc_w);
    check("fc.bias", &fc_g.bias, |p| &mut p.fc_b);
    assert_eq!(checked, C_OUT * C_IN * K * K + C_OUT + CLASSES * feat + CLASSES);
    (worst, checked)
}
