//! Conventional and fault-aware training, and faulted evaluation.

use crate::checkpoint::{keys, Checkpoint};
use crate::data::{batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::fault::{draw_fault_plan, BitBudget, FaultPlan, FaultSite};
use crate::model::{ModelGraph, Plans};
use crate::par::{map_indexed, Parallelism};
use crate::rng::{stream, Domain};
use crate::tensor::{argmax, FloatTensor};

/// How many training faults a plan covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlanGranularity {
    /// One plan per mini-batch forward, shared by its samples.
    #[default]
    Batch,
    /// An independent plan for every sample.
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    /// 0 is conventional training.
    pub faults_per_forward: u64,
    pub protected_sites: Vec<FaultSite>,
    pub granularity: PlanGranularity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 1,
            faults_per_forward: 0,
            protected_sites: vec![FaultSite::B32, FaultSite::O32],
            granularity: PlanGranularity::Batch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    /// Protection only matters when faults are injected.
    fn effective_protection(&self) -> String {
        if self.faults_per_forward == 0 {
            FaultSite::format_list(&[])
        } else {
            FaultSite::format_list(&self.protected_sites)
        }
    }

    /// Stable one-line echo stored with the checkpoint.
    pub fn echo(&self) -> String {
        format!(
            "epochs={} batch={} lr={} momentum={} seed={} faults={} protect={} plans={}",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.momentum,
            self.seed,
            self.faults_per_forward,
            self.effective_protection(),
            match self.granularity {
                PlanGranularity::Batch => "batch",
                PlanGranularity::Sample => "sample",
            }
        )
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot) / N`.
pub fn cross_entropy(logits: &FloatTensor, labels: &[usize]) -> Result<(f32, FloatTensor)> {
    let d = logits.dims();
    if d.len() != 2 || d[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            left: d.to_vec(),
            right: vec![labels.len(), d.last().copied().unwrap_or(0)],
        });
    }
    let (n, k) = (d[0], d[1]);
    if n == 0 || k == 0 {
        return Err(Error::EmptyTensor);
    }
    let mut grad = vec![0.0f32; n * k];
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelRange { label, classes: k });
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() - (row[label] as f64 - max);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad[i * k + j] = ((e / sum - onehot) / n as f64) as f32;
        }
    }
    Ok(((total / n as f64) as f32, FloatTensor::from_vec(d, grad)?))
}

/// One line of training progress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f32,
    /// Running accuracy over the epoch so far.
    pub train_acc: f64,
}

impl std::fmt::Display for Progress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{:.6},{:.4}", self.epoch, self.batch, self.loss, self.train_acc)
    }
}

/// Train `model` and return it frozen inside a checkpoint. When `test`
/// is given its fault-free accuracy is recorded in the metadata.
pub fn train(
    mut model: ModelGraph,
    data: &LabeledDataset,
    test: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&Progress),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let budget = model.bit_budget().restrict(&cfg.protected_sites, None);
    if cfg.faults_per_forward > budget.total() {
        return Err(Error::TooManyFaults {
            requested: cfg.faults_per_forward,
            available: budget.total(),
        });
    }
    model.unfreeze();
    let mut velocity: Vec<(Vec<f32>, Vec<f32>)> = model
        .quant_layers()
        .map(|(_, q)| (vec![0.0; q.weight.len()], vec![0.0; q.bias.len()]))
        .collect();

    let mut train_acc = 0.0;
    for epoch in 0..cfg.epochs {
        let (mut correct, mut seen) = (0usize, 0usize);
        for (b, idx) in batches(data.len(), cfg.batch_size, cfg.seed, epoch as u64).iter().enumerate() {
            let (x, labels) = data.gather(idx);
            let plans = training_plans(&budget, cfg, epoch, b, idx.len())?;
            let plans = match &plans {
                None => Plans::None,
                Some(p) if cfg.granularity == PlanGranularity::Batch => Plans::Shared(&p[0]),
                Some(p) => Plans::PerSample(p),
            };
            let drop_rng = stream(cfg.seed, Domain::Dropout, epoch as u64, b as u64, 0);
            let diverged = |e| match e {
                Error::InvalidScale(_) | Error::NonFinite { .. } => Error::Diverged {
                    epoch,
                    batch: b,
                    loss: f32::NAN,
                },
                e => e,
            };
            // Ranges calibrate on the fault-free pass of the batch (same
            // dropout mask); the faulted pass then runs on those scales.
            // Letting observers see flipped values ratchets every range up.
            let faulted = !matches!(plans, Plans::None);
            if faulted {
                model
                    .forward_train(&x, Plans::None, &mut drop_rng.clone())
                    .map_err(diverged)?;
                model.freeze();
            }
            let forward = model.forward_train(&x, plans, &mut drop_rng.clone());
            if faulted {
                model.unfreeze();
            }
            let (logits, trace) = forward.map_err(diverged)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            let k = logits.dims()[1];
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
                .count();
            seen += labels.len();

            let grads = model.backward(Some(&trace), &grad)?;
            let grads = grads.into_iter().flatten();
            for (((_, q), g), (vw, vb)) in model.quant_layers_mut().zip(grads).zip(velocity.iter_mut()) {
                sgd_step(&mut q.weight, &g.weight, vw, cfg);
                sgd_step(&mut q.bias, &g.bias, vb, cfg);
            }
            check_observers(&model, epoch, b, loss)?;
            train_acc = correct as f64 / seen as f64;
            progress(&Progress {
                epoch,
                batch: b,
                loss,
                train_acc,
            });
        }
    }

    let mut ckpt = Checkpoint::new(model);
    ckpt.set_meta(keys::CONFIG, cfg.echo());
    ckpt.set_meta(keys::SEED, cfg.seed.to_string());
    ckpt.set_meta(keys::FAULTS, cfg.faults_per_forward.to_string());
    ckpt.set_meta(keys::PROTECTED, cfg.effective_protection());
    ckpt.set_meta(keys::TRAIN_ACCURACY, format!("{train_acc:.6}"));
    if let Some(test) = test {
        let acc = evaluate(&ckpt.model, test, &FaultSpec::clean(), Parallelism::default())?;
        ckpt.set_meta(keys::TEST_ACCURACY, format!("{:.6}", acc.accuracy()));
        ckpt.set_meta(keys::TEST_SAMPLES, acc.total.to_string());
    }
    Ok(ckpt)
}

fn training_plans(
    budget: &BitBudget,
    cfg: &TrainConfig,
    epoch: usize,
    batch: usize,
    len: usize,
) -> Result<Option<Vec<FaultPlan>>> {
    if cfg.faults_per_forward == 0 {
        return Ok(None);
    }
    let count = match cfg.granularity {
        PlanGranularity::Batch => 1,
        PlanGranularity::Sample => len,
    };
    (0..count)
        .map(|i| {
            let mut rng = stream(cfg.seed, Domain::TrainFaults, epoch as u64, batch as u64, i as u64);
            draw_fault_plan(budget, cfg.faults_per_forward, &mut rng)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn sgd_step(param: &mut [f32], grad: &[f32], velocity: &mut [f32], cfg: &TrainConfig) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g;
        *p -= cfg.learning_rate * *v;
    }
}

fn check_observers(model: &ModelGraph, epoch: usize, batch: usize, loss: f32) -> Result<()> {
    let finite = model.quant_layers().all(|(_, q)| {
        q.input_observer.ema_abs_max().is_finite()
            && q.output_observer.ema_abs_max().is_finite()
            && q.weight.iter().chain(&q.bias).all(|v| v.is_finite())
    });
    if finite {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            batch,
            loss,
        })
    }
}

/// Which faults an evaluation injects, and from which random streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultSpec {
    pub n_faults: u64,
    pub protected: Vec<FaultSite>,
    /// Restrict injection to one site kind across all layers.
    pub site_filter: Option<FaultSite>,
    pub seed: u64,
    pub repeat: u64,
}

impl FaultSpec {
    pub fn clean() -> Self {
        FaultSpec {
            n_faults: 0,
            protected: Vec::new(),
            site_filter: None,
            seed: 0,
            repeat: 0,
        }
    }

    /// Population the plans are drawn from.
    pub fn population(&self, model: &ModelGraph) -> BitBudget {
        model.bit_budget().restrict(&self.protected, self.site_filter)
    }

    /// Stream cell: the fault count, tagged with the filtered site.
    fn cell(&self) -> u64 {
        let tag = self.site_filter.map_or(0, |s| s.slot() as u64 + 1);
        self.n_faults | (tag << 56)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOutcome {
    pub correct: usize,
    pub total: usize,
}

impl EvalOutcome {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Samples per forward call during evaluation.
pub const EVAL_CHUNK: usize = 50;

/// Accuracy over `data` with a fresh plan of `spec.n_faults` bits for every
/// sample. Sample `i` always draws from the same stream, so the result does
/// not depend on chunking or thread count.
pub fn evaluate(model: &ModelGraph, data: &LabeledDataset, spec: &FaultSpec, mode: Parallelism) -> Result<EvalOutcome> {
    let budget = spec.population(model);
    if spec.n_faults > budget.total() {
        return Err(Error::TooManyFaults {
            requested: spec.n_faults,
            available: budget.total(),
        });
    }
    let chunks = data.len().div_ceil(EVAL_CHUNK);
    let cell = spec.cell();
    let counts = map_indexed(chunks, mode, |c| -> Result<usize> {
        let idx: Vec<usize> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(data.len())).collect();
        let (x, labels) = data.gather(&idx);
        let logits = if spec.n_faults == 0 {
            model.forward(&x, Plans::None)?
        } else {
            let plans = idx
                .iter()
                .map(|&i| {
                    let mut rng = stream(spec.seed, Domain::EvalFaults, cell, spec.repeat, i as u64);
                    draw_fault_plan(&budget, spec.n_faults, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            model.forward(&x, Plans::PerSample(&plans))?
        };
        let k = logits.dims()[1];
        Ok(labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
            .count())
    });
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(EvalOutcome {
        correct,
        total: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_ccdf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln10() {
        let x = FloatTensor::from_vec(&[2, 10], vec![0.3; 20]).unwrap();
        let (loss, _) = cross_entropy(&x, &[4, 9]).unwrap();
        assert!((loss - std::f32::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn dominant_logit_gives_near_zero_loss() {
        let mut v = vec![0.0; 10];
        v[2] = 50.0;
        let x = FloatTensor::from_vec(&[1, 10], v).unwrap();
        assert!(cross_entropy(&x, &[2]).unwrap().0 < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let x = FloatTensor::from_vec(&[1, 10], vec![0.0; 10]).unwrap();
        assert!(matches!(
            cross_entropy(&x, &[10]),
            Err(Error::LabelRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = [1usize, 7, 3];
        // f64 oracle of the same loss.
        let loss64 = |l: &[f64]| -> f64 {
            (0..3)
                .map(|i| {
                    let row = &l[i * 10..(i + 1) * 10];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    s.ln() + m - row[labels[i]]
                })
                .sum::<f64>()
                / 3.0
        };
        let x = FloatTensor::from_vec(&[3, 10], logits.iter().map(|&v| v as f32).collect()).unwrap();
        let (_, grad) = cross_entropy(&x, &labels).unwrap();
        let h = 1e-5;
        for j in 0..30 {
            let mut p = logits.clone();
            p[j] += h;
            let mut m = logits.clone();
            m[j] -= h;
            let fd = (loss64(&p) - loss64(&m)) / (2.0 * h);
            let g = grad.data()[j] as f64;
            assert!((g - fd).abs() <= 1e-5 * fd.abs().max(1e-2), "j={j} g={g} fd={fd}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tiny_data(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n * 784).map(|_| rng.random::<f32>()).collect();
        let labels = (0..n).map(|_| rng.random_range(0..10u8)).collect();
        LabeledDataset::new(images, labels).unwrap()
    }

    fn tiny_cfg(faults: u64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            faults_per_forward: faults,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(24, 1);
        let a = train(build_ccdf(3), &data, None, &tiny_cfg(4), |_| {}).unwrap();
        let b = train(build_ccdf(3), &data, None, &tiny_cfg(4), |_| {}).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(a.model.quant_layers().all(|(_, q)| q.input_observer.is_frozen()));
    }

    #[test]
    fn zero_fault_fat_equals_conventional() {
        let data = tiny_data(16, 2);
        let conv = TrainConfig {
            protected_sites: vec![],
            ..tiny_cfg(0)
        };
        let a = train(build_ccdf(3), &data, None, &conv, |_| {}).unwrap();
        let b = train(build_ccdf(3), &data, None, &tiny_cfg(0), |_| {}).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn faulted_training_keeps_clean_ranges() {
        let data = tiny_data(24, 6);
        let clean = train(build_ccdf(3), &data, None, &tiny_cfg(0), |_| {}).unwrap();
        let fat = train(build_ccdf(3), &data, None, &tiny_cfg(4000), |_| {}).unwrap();
        for ((_, a), (_, b)) in clean.model.quant_layers().zip(fat.model.quant_layers()) {
            for (x, y) in [
                (a.input_observer.ema_abs_max(), b.input_observer.ema_abs_max()),
                (a.output_observer.ema_abs_max(), b.output_observer.ema_abs_max()),
            ] {
                assert!(y.is_finite() && y / x < 1.5 && x / y < 1.5, "clean {x} vs faulted {y}");
            }
        }
    }

    #[test]
    fn progress_reports_every_batch() {
        let data = tiny_data(20, 3);
        let mut lines = Vec::new();
        train(build_ccdf(0), &data, None, &tiny_cfg(0), |p| lines.push(p.to_string())).unwrap();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("0,0,"));
        assert_eq!(lines[2].split(',').count(), 4);
    }

    #[test]
    fn evaluation_is_independent_of_parallelism() {
        let data = tiny_data(120, 4);
        let ckpt = train(build_ccdf(5), &data, None, &tiny_cfg(0), |_| {}).unwrap();
        let spec = FaultSpec {
            n_faults: 64,
            protected: vec![FaultSite::B32, FaultSite::O32],
            site_filter: None,
            seed: 9,
            repeat: 1,
        };
        let seq = evaluate(&ckpt.model, &data, &spec, Parallelism::Sequential).unwrap();
        let par = evaluate(&ckpt.model, &data, &spec, Parallelism::Rayon).unwrap();
        assert_eq!(seq, par);
        let clean = evaluate(&ckpt.model, &data, &FaultSpec::clean(), Parallelism::Sequential).unwrap();
        let zero = evaluate(
            &ckpt.model,
            &data,
            &FaultSpec {
                n_faults: 0,
                ..spec.clone()
            },
            Parallelism::Sequential,
        )
        .unwrap();
        assert_eq!(clean, zero);
    }

    #[test]
    fn too_many_faults_rejected() {
        let model = build_ccdf(0);
        let spec = FaultSpec {
            n_faults: 2_000,
            site_filter: Some(FaultSite::B32),
            ..FaultSpec::clean()
        };
        assert!(matches!(
            evaluate(&model, &tiny_data(2, 0), &spec, Parallelism::Sequential),
            Err(Error::TooManyFaults { available: 1856, .. })
        ));
    }
}
