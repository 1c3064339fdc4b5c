//! Layer graph, fault routing and the CCDF preset.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fault::{BitBudget, BudgetEntry, FaultPlan, FaultSite, LayerFaults, NO_FAULTS};
use crate::layers::{
    dropout, flatten, maxpool2x2, maxpool_backward, relu, relu_backward, scale_by, Geometry, LayerGrads,
    QLayer, QTrace,
};
use crate::rng::{stream, Domain};
use crate::tensor::FloatTensor;

pub const CCDF_NAME: &str = "ccdf";
pub const MNIST_INPUT: [usize; 3] = [1, 28, 28];

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Quant(QLayer),
    Relu,
    MaxPool2,
    Dropout { p: f32 },
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Quant(q) => match q.geometry {
                Geometry::Conv2d { .. } => "conv2d",
                Geometry::Linear { .. } => "linear",
            },
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2x2",
            Layer::Dropout { .. } => "dropout",
            Layer::Flatten => "flatten",
        }
    }

    pub fn as_quant(&self) -> Option<&QLayer> {
        match self {
            Layer::Quant(q) => Some(q),
            _ => None,
        }
    }

    /// Per-sample output dims for per-sample input dims.
    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Quant(q) => {
                if input != q.geometry.input_dims() {
                    return Err(Error::ShapeMismatch {
                        left: input.to_vec(),
                        right: q.geometry.input_dims(),
                    });
                }
                Ok(q.geometry.output_dims())
            }
            Layer::Relu | Layer::Dropout { .. } => Ok(input.to_vec()),
            Layer::MaxPool2 => match input {
                [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![*c, h / 2, w / 2]),
                [_, h, w] => Err(Error::OddPooling { h: *h, w: *w }),
                _ => Err(Error::ShapeMismatch {
                    left: input.to_vec(),
                    right: vec![0, 0, 0],
                }),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which fault plans a forward pass sees.
#[derive(Debug, Clone, Copy)]
pub enum Plans<'a> {
    None,
    /// One plan applied to every sample of the batch (activation targets hit
    /// the same element of each sample).
    Shared(&'a FaultPlan),
    /// One plan per sample.
    PerSample(&'a [FaultPlan]),
}

/// Cached activations of a training forward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
enum LayerTrace {
    Quant(Box<QTrace>),
    Relu(FloatTensor),
    Pool { in_dims: Vec<usize>, argmax: Vec<usize> },
    Dropout(Vec<f32>),
    Flatten(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    input_dims: Vec<usize>,
    layers: Vec<Layer>,
    /// Per-sample output dims of every layer.
    shapes: Vec<Vec<usize>>,
    quantized: bool,
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input_dims: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_dims.clone();
        for l in &layers {
            cur = l.output_dims(&cur)?;
            shapes.push(cur.clone());
        }
        Ok(ModelGraph {
            name: name.into(),
            input_dims,
            layers,
            shapes,
            quantized: true,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.layers.iter_mut()
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> &[usize] {
        self.shapes.last().map_or(&self.input_dims, |s| s)
    }

    pub fn quant_layers(&self) -> impl Iterator<Item = (usize, &QLayer)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_quant().map(|q| (i, q)))
    }

    pub fn quant_layers_mut(&mut self) -> impl Iterator<Item = (usize, &mut QLayer)> {
        self.layers.iter_mut().enumerate().filter_map(|(i, l)| match l {
            Layer::Quant(q) => Some((i, q)),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.quant_layers().map(|(_, q)| q.param_count()).sum()
    }

    /// Toggle the quantization pipeline. With it off every module is the
    /// identity and no faults can be injected.
    pub fn set_quantized(&mut self, on: bool) {
        self.quantized = on;
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized
    }

    pub fn freeze(&mut self) {
        for (_, q) in self.quant_layers_mut() {
            q.freeze();
        }
    }

    pub fn unfreeze(&mut self) {
        for (_, q) in self.quant_layers_mut() {
            q.unfreeze();
        }
    }

    /// Group a plan's targets by layer, validating every address.
    pub fn route(&self, plan: &FaultPlan) -> Result<Vec<LayerFaults>> {
        let mut routed = vec![LayerFaults::default(); self.layers.len()];
        for t in plan.targets() {
            let layer = self.layers.get(t.layer).ok_or(Error::DanglingTarget {
                layer: t.layer,
                layers: self.layers.len(),
            })?;
            let q = layer.as_quant().ok_or(Error::NotQuantized {
                layer: t.layer,
                kind: layer.kind(),
            })?;
            let len = q.geometry.site_elements(t.site);
            if t.element >= len {
                return Err(Error::TargetOutOfRange {
                    layer: t.layer,
                    site: t.site,
                    element: t.element,
                    len,
                });
            }
            routed[t.layer].push(t.site, t.element, t.bit);
        }
        Ok(routed)
    }

    fn routed_plans(&self, plans: Plans<'_>, batch: usize) -> Result<Vec<Vec<LayerFaults>>> {
        match plans {
            Plans::None => Ok(Vec::new()),
            Plans::Shared(p) => Ok(vec![self.route(p)?]),
            Plans::PerSample(ps) => {
                if ps.len() != batch {
                    return Err(Error::PlanCount {
                        expected: batch,
                        got: ps.len(),
                    });
                }
                ps.iter().map(|p| self.route(p)).collect()
            }
        }
    }

    fn check_batch(&self, x: &FloatTensor) -> Result<usize> {
        let d = x.dims();
        if d.len() != self.input_dims.len() + 1 || d[1..] != self.input_dims[..] {
            let mut want = vec![d[0]];
            want.extend(&self.input_dims);
            return Err(Error::ShapeMismatch {
                left: d.to_vec(),
                right: want,
            });
        }
        Ok(d[0])
    }

    /// Evaluation forward: frozen observers, dropout off.
    pub fn forward(&self, x: &FloatTensor, plans: Plans<'_>) -> Result<FloatTensor> {
        self.run_eval(x, plans, None)
    }

    /// Evaluation forward that also returns every layer's output.
    pub fn activations(&self, x: &FloatTensor, plans: Plans<'_>) -> Result<Vec<FloatTensor>> {
        let mut acts = Vec::with_capacity(self.layers.len());
        self.run_eval(x, plans, Some(&mut acts))?;
        Ok(acts)
    }

    fn run_eval(&self, x: &FloatTensor, plans: Plans<'_>, mut keep: Option<&mut Vec<FloatTensor>>) -> Result<FloatTensor> {
        let n = self.check_batch(x)?;
        let routed = self.routed_plans(plans, n)?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(k) = keep.as_mut() {
                if i > 0 {
                    k.push(cur.clone());
                }
            }
            cur = match layer {
                Layer::Quant(q) => {
                    let faults = per_sample(&routed, plans, i, n);
                    q.forward_eval(&cur, &faults, i, self.quantized)?
                }
                Layer::Relu => relu(&cur),
                Layer::MaxPool2 => maxpool2x2(&cur)?.0,
                Layer::Dropout { .. } => cur,
                Layer::Flatten => flatten(&cur),
            };
        }
        if let Some(k) = keep {
            k.push(cur.clone());
        }
        Ok(cur)
    }

    /// Training forward: observers update, dropout active, trace kept.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        x: &FloatTensor,
        plans: Plans<'_>,
        dropout_rng: &mut R,
    ) -> Result<(FloatTensor, ForwardTrace)> {
        let n = self.check_batch(x)?;
        let routed = self.routed_plans(plans, n)?;
        let quantized = self.quantized;
        let mut cur = x.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (next, t) = match layer {
                Layer::Quant(q) => {
                    let faults = per_sample(&routed, plans, i, n);
                    let (y, t) = q.forward_train(&cur, &faults, i, quantized)?;
                    (y, LayerTrace::Quant(Box::new(t)))
                }
                Layer::Relu => (relu(&cur), LayerTrace::Relu(cur)),
                Layer::MaxPool2 => {
                    let (y, argmax) = maxpool2x2(&cur)?;
                    (
                        y,
                        LayerTrace::Pool {
                            in_dims: cur.dims().to_vec(),
                            argmax,
                        },
                    )
                }
                Layer::Dropout { p } => {
                    let (y, mask) = dropout(&cur, *p, dropout_rng, true);
                    (y, LayerTrace::Dropout(mask))
                }
                Layer::Flatten => (flatten(&cur), LayerTrace::Flatten(cur.dims().to_vec())),
            };
            traces.push(t);
            cur = next;
        }
        Ok((cur, ForwardTrace { layers: traces }))
    }

    /// Gradients for every quantized layer (`None` for plain layers), in
    /// layer order.
    pub fn backward(&self, trace: Option<&ForwardTrace>, grad_logits: &FloatTensor) -> Result<Vec<Option<LayerGrads>>> {
        let trace = trace.ok_or(Error::MissingTrace)?;
        if trace.layers.len() != self.layers.len() {
            return Err(Error::MissingTrace);
        }
        let mut grads = vec![None; self.layers.len()];
        let mut dy = grad_logits.clone();
        for (i, (layer, t)) in self.layers.iter().zip(&trace.layers).enumerate().rev() {
            dy = match (layer, t) {
                (Layer::Quant(q), LayerTrace::Quant(qt)) => {
                    let (dx, g) = q.backward(qt, &dy)?;
                    grads[i] = Some(g);
                    dx
                }
                (Layer::Relu, LayerTrace::Relu(x)) => relu_backward(x, &dy),
                (Layer::MaxPool2, LayerTrace::Pool { in_dims, argmax }) => maxpool_backward(in_dims, argmax, &dy),
                (Layer::Dropout { .. }, LayerTrace::Dropout(mask)) => scale_by(&dy, mask),
                (Layer::Flatten, LayerTrace::Flatten(dims)) => dy.reshape(dims)?,
                _ => return Err(Error::MissingTrace),
            };
        }
        Ok(grads)
    }

    /// Vulnerable bits of one single-sample forward pass.
    pub fn bit_budget(&self) -> BitBudget {
        count_vulnerable_bits(self, &self.input_dims).expect("shapes resolved at construction")
    }
}

fn per_sample<'a>(routed: &'a [Vec<LayerFaults>], plans: Plans<'_>, layer: usize, n: usize) -> Vec<&'a LayerFaults> {
    match plans {
        Plans::None => vec![&NO_FAULTS; n],
        Plans::Shared(_) => vec![&routed[0][layer]; n],
        Plans::PerSample(_) => routed.iter().map(|r| &r[layer]).collect(),
    }
}

/// Bits exposed by every quantized layer's five sites for one sample of the
/// given shape; plain layers expose nothing.
pub fn count_vulnerable_bits(model: &ModelGraph, input_dims: &[usize]) -> Result<BitBudget> {
    let mut cur = input_dims.to_vec();
    let mut entries = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        let out = l.output_dims(&cur)?;
        if let Layer::Quant(q) = l {
            for site in FaultSite::ALL {
                entries.push(BudgetEntry {
                    layer: i,
                    site,
                    elements: q.geometry.site_elements(site),
                });
            }
        }
        cur = out;
    }
    Ok(BitBudget::from_entries(entries))
}

/// Two 3×3 convolutions (16 and 32 channels) with ReLU and 2×2 pooling,
/// dropout 0.25, and one fully-connected layer to 10 logits.
pub fn build_ccdf(seed: u64) -> ModelGraph {
    let mut rng = stream(seed, Domain::Init, 0, 0, 0);
    let conv1 = Geometry::Conv2d {
        in_channels: 1,
        out_channels: 16,
        kernel: 3,
        stride: 1,
        padding: 1,
        in_h: 28,
        in_w: 28,
    };
    let conv2 = Geometry::Conv2d {
        in_channels: 16,
        out_channels: 32,
        kernel: 3,
        stride: 1,
        padding: 1,
        in_h: 14,
        in_w: 14,
    };
    let fc = Geometry::Linear {
        in_features: 32 * 7 * 7,
        out_features: 10,
    };
    let layers = vec![
        Layer::Quant(QLayer::init(conv1, &mut rng)),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Quant(QLayer::init(conv2, &mut rng)),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Dropout { p: 0.25 },
        Layer::Flatten,
        Layer::Quant(QLayer::init(fc, &mut rng)),
    ];
    ModelGraph::new(CCDF_NAME, MNIST_INPUT.to_vec(), layers).expect("preset shapes are consistent")
}
