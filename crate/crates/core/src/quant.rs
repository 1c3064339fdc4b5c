//! Symmetric signed fake quantization and range observers.
//!
//! `Q`: `x_int = clamp(round_half_even(x / s), -2^(b-1), 2^(b-1) - 1)`,
//! `DQ`: `x_hat = s * x_int`.

use crate::error::{Error, Result};
use crate::tensor::{int_range, FloatTensor, IntTensor};

/// Default EMA momentum for activation observers.
pub const OBSERVER_MOMENTUM: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    scale: f32,
    bits: u32,
}

impl QuantParams {
    pub fn new(scale: f32, bits: u32) -> Result<Self> {
        int_range(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidScale(scale));
        }
        Ok(QuantParams { scale, bits })
    }

    /// Scale mapping `abs_max` onto the largest positive code.
    pub fn from_abs_max(abs_max: f32, bits: u32) -> Result<Self> {
        if abs_max <= 0.0 {
            return Err(Error::ZeroRange);
        }
        let qmax = qmax(bits)?;
        QuantParams::new((abs_max as f64 / qmax as f64) as f32, bits)
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Inclusive float interval that quantizes without clamping.
    pub fn float_range(&self) -> (f64, f64) {
        let (lo, hi) = int_range(self.bits).expect("validated width");
        (lo as f64 * self.scale as f64, hi as f64 * self.scale as f64)
    }

    pub fn quantize_value(&self, x: f32) -> i32 {
        let (lo, hi) = int_range(self.bits).expect("validated width");
        let r = (x as f64 / self.scale as f64).round_ties_even();
        r.clamp(lo as f64, hi as f64) as i32
    }

    pub fn dequantize_value(&self, q: i32) -> f32 {
        (q as f64 * self.scale as f64) as f32
    }
}

fn qmax(bits: u32) -> Result<i64> {
    Ok(int_range(bits)?.1 as i64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    ints: IntTensor,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(ints: IntTensor, params: QuantParams) -> Result<Self> {
        if ints.width() != params.bits() {
            return Err(Error::BitWidth(ints.width()));
        }
        Ok(QuantizedTensor { ints, params })
    }

    pub fn ints(&self) -> &IntTensor {
        &self.ints
    }

    pub(crate) fn ints_mut(&mut self) -> &mut IntTensor {
        &mut self.ints
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }
}

pub fn quantize(x: &FloatTensor, p: QuantParams) -> Result<QuantizedTensor> {
    x.check_finite()?;
    let data = x.data().iter().map(|&v| p.quantize_value(v)).collect();
    Ok(QuantizedTensor {
        ints: IntTensor::new_unchecked(x.shape().clone(), data, p.bits()),
        params: p,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> FloatTensor {
    let p = q.params;
    let data = q.ints.data().iter().map(|&v| p.dequantize_value(v)).collect();
    FloatTensor::new(q.ints.shape().clone(), data).expect("shape preserved")
}

pub fn fake_quantize(x: &FloatTensor, p: QuantParams) -> Result<FloatTensor> {
    Ok(dequantize(&quantize(x, p)?))
}

/// Bias and accumulator share the product scale so integer bias addition is
/// exact on the accumulator grid.
/// Fails with `InvalidScale` if the product over- or underflows `f32`.
pub fn derived_accumulator_params(input: QuantParams, weight: QuantParams) -> Result<QuantParams> {
    QuantParams::new(input.scale * weight.scale, 32)
}

/// EMA of the per-batch absolute maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeObserver {
    ema_abs_max: f32,
    momentum: f32,
    frozen: bool,
    seen: bool,
}

impl Default for RangeObserver {
    fn default() -> Self {
        RangeObserver::new(OBSERVER_MOMENTUM).expect("default momentum is valid")
    }
}

impl RangeObserver {
    pub fn new(momentum: f32) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!(
                "observer momentum {momentum} not in (0, 1)"
            )));
        }
        Ok(RangeObserver {
            ema_abs_max: 0.0,
            momentum,
            frozen: false,
            seen: false,
        })
    }

    /// Rebuild a calibrated, frozen observer (checkpoint load).
    pub fn frozen_at(ema_abs_max: f32, momentum: f32) -> Result<Self> {
        let mut o = RangeObserver::new(momentum)?;
        if !(ema_abs_max.is_finite() && ema_abs_max >= 0.0) {
            return Err(Error::InvalidScale(ema_abs_max));
        }
        o.ema_abs_max = ema_abs_max;
        o.seen = ema_abs_max > 0.0;
        o.frozen = true;
        Ok(o)
    }

    pub fn ema_abs_max(&self) -> f32 {
        self.ema_abs_max
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn observe(&mut self, x: &FloatTensor) -> Result<()> {
        self.observe_abs_max(x.abs_max())
    }

    pub fn observe_abs_max(&mut self, m: f32) -> Result<()> {
        if self.frozen {
            return Err(Error::ObserverFrozen);
        }
        if !m.is_finite() {
            return Err(Error::NonFinite { index: 0, value: m });
        }
        if self.seen {
            self.ema_abs_max = (1.0 - self.momentum) * self.ema_abs_max + self.momentum * m;
        } else {
            self.ema_abs_max = m;
            self.seen = m > 0.0;
        }
        Ok(())
    }

    pub fn params(&self, bits: u32) -> Result<QuantParams> {
        scale_from_observer(self, bits)
    }
}

pub fn scale_from_observer(o: &RangeObserver, bits: u32) -> Result<QuantParams> {
    QuantParams::from_abs_max(o.ema_abs_max, bits)
}
