//! Bit-flip fault model.
//!
//! Every quantized layer exposes five sites whose integer values can be hit.
//! A [`BitBudget`] lists how many bits each (layer, site) holds during one
//! single-sample forward pass; a [`FaultPlan`] is a uniform draw without
//! replacement from that population.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::quant::QuantizedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FaultSite {
    I8,
    W8,
    B32,
    O32,
    O8,
}

impl FaultSite {
    pub const ALL: [FaultSite; 5] = [
        FaultSite::I8,
        FaultSite::W8,
        FaultSite::B32,
        FaultSite::O32,
        FaultSite::O8,
    ];

    pub fn width(self) -> u32 {
        match self {
            FaultSite::I8 | FaultSite::W8 | FaultSite::O8 => 8,
            FaultSite::B32 | FaultSite::O32 => 32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultSite::I8 => "i8",
            FaultSite::W8 => "w8",
            FaultSite::B32 => "b32",
            FaultSite::O32 => "o32",
            FaultSite::O8 => "o8",
        }
    }

    pub(crate) fn slot(self) -> usize {
        self as usize
    }

    /// Parse a comma separated list such as `b32,o32`; `none` or an empty
    /// string is the empty set.
    pub fn parse_list(s: &str) -> Result<Vec<FaultSite>> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Vec::new());
        }
        let mut out: Vec<FaultSite> = s
            .split([',', ';', '+'])
            .map(|t| t.parse())
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }

    /// Canonical `b32;o32` form used in CSV cells, `none` for the empty set.
    pub fn format_list(sites: &[FaultSite]) -> String {
        if sites.is_empty() {
            return "none".to_string();
        }
        let mut sorted = sites.to_vec();
        sorted.sort();
        sorted.dedup();
        sorted.iter().map(|s| s.name()).collect::<Vec<_>>().join(";")
    }
}

impl fmt::Display for FaultSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "i8" => Ok(FaultSite::I8),
            "w8" => Ok(FaultSite::W8),
            "b32" => Ok(FaultSite::B32),
            "o32" => Ok(FaultSite::O32),
            "o8" => Ok(FaultSite::O8),
            other => Err(Error::UnknownSite(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FaultTarget {
    pub layer: usize,
    pub site: FaultSite,
    pub element: usize,
    /// 0 is the least significant bit.
    pub bit: u32,
}

impl fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.layer, self.site, self.element, self.bit)
    }
}

impl FromStr for FaultTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(',').collect();
        let bad = || Error::Config(format!("malformed fault target line `{s}`"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let site: FaultSite = parts[1].parse()?;
        let bit: u32 = parts[3].trim().parse().map_err(|_| bad())?;
        if bit >= site.width() {
            return Err(Error::BitIndex {
                bit,
                width: site.width(),
            });
        }
        Ok(FaultTarget {
            layer: parts[0].trim().parse().map_err(|_| bad())?,
            site,
            element: parts[2].trim().parse().map_err(|_| bad())?,
            bit,
        })
    }
}

/// Distinct targets for one forward pass, kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    targets: Vec<FaultTarget>,
}

impl FaultPlan {
    pub fn empty() -> Self {
        FaultPlan::default()
    }

    pub fn from_targets(mut targets: Vec<FaultTarget>) -> Result<Self> {
        targets.sort();
        if let Some(w) = targets.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate fault target {}", w[0])));
        }
        if let Some(t) = targets.iter().find(|t| t.bit >= t.site.width()) {
            return Err(Error::BitIndex {
                bit: t.bit,
                width: t.site.width(),
            });
        }
        Ok(FaultPlan { targets })
    }

    pub fn targets(&self) -> &[FaultTarget] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// One `layer,site,element,bit` line per target.
    pub fn to_text(&self) -> String {
        self.targets.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let targets = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        FaultPlan::from_targets(targets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetEntry {
    pub layer: usize,
    pub site: FaultSite,
    /// Elements of the site's tensor for a single sample.
    pub elements: usize,
}

impl BudgetEntry {
    pub fn bits(&self) -> u64 {
        self.elements as u64 * self.site.width() as u64
    }
}

/// Vulnerable-bit population of one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitBudget {
    entries: Vec<BudgetEntry>,
    /// Exclusive prefix sums of `bits()`, plus the total at the end.
    offsets: Vec<u64>,
}

impl BitBudget {
    pub fn from_entries(entries: Vec<BudgetEntry>) -> Self {
        let entries: Vec<BudgetEntry> = entries.into_iter().filter(|e| e.elements > 0).collect();
        let mut offsets = Vec::with_capacity(entries.len() + 1);
        let mut acc = 0u64;
        offsets.push(0);
        for e in &entries {
            acc += e.bits();
            offsets.push(acc);
        }
        BitBudget { entries, offsets }
    }

    pub fn entries(&self) -> &[BudgetEntry] {
        &self.entries
    }

    pub fn total(&self) -> u64 {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn count(&self, layer: usize, site: FaultSite) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.layer == layer && e.site == site)
            .map(BudgetEntry::bits)
            .sum()
    }

    pub fn site_total(&self, site: FaultSite) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.site == site)
            .map(BudgetEntry::bits)
            .sum()
    }

    /// Population left after removing protected sites and, optionally,
    /// keeping only one site.
    pub fn restrict(&self, protected: &[FaultSite], only: Option<FaultSite>) -> BitBudget {
        BitBudget::from_entries(
            self.entries
                .iter()
                .copied()
                .filter(|e| !protected.contains(&e.site))
                .filter(|e| only.is_none_or(|s| s == e.site))
                .collect(),
        )
    }

    /// Map a flat bit index in `0..total()` to its target. Within an entry
    /// bits are element-major: `index = element * width + bit`.
    pub fn locate(&self, index: u64) -> FaultTarget {
        assert!(index < self.total(), "bit index {index} beyond budget");
        let slot = self.offsets.partition_point(|&o| o <= index) - 1;
        let e = self.entries[slot];
        let local = index - self.offsets[slot];
        let width = e.site.width() as u64;
        FaultTarget {
            layer: e.layer,
            site: e.site,
            element: (local / width) as usize,
            bit: (local % width) as u32,
        }
    }
}

pub fn fault_rate(n_faults: u64, budget: &BitBudget) -> Result<f64> {
    match budget.total() {
        0 => Err(Error::EmptyBudget),
        total => Ok(n_faults as f64 / total as f64),
    }
}

/// Draw `n` distinct bits uniformly from the whole population.
pub fn draw_fault_plan<R: Rng + ?Sized>(budget: &BitBudget, n: u64, rng: &mut R) -> Result<FaultPlan> {
    let total = budget.total();
    if n > total {
        return Err(Error::TooManyFaults {
            requested: n,
            available: total,
        });
    }
    if n == 0 {
        return Ok(FaultPlan::empty());
    }
    let picks = rand::seq::index::sample(rng, total as usize, n as usize);
    let mut targets: Vec<FaultTarget> = picks.into_iter().map(|i| budget.locate(i as u64)).collect();
    targets.sort();
    Ok(FaultPlan { targets })
}

/// XOR bit `bit` of the `width`-bit two's-complement encoding of `value`.
pub fn flip_bit(value: i32, bit: u32, width: u32) -> Result<i32> {
    if bit >= width {
        return Err(Error::BitIndex { bit, width });
    }
    match width {
        8 => {
            if !(i8::MIN as i32..=i8::MAX as i32).contains(&value) {
                return Err(Error::OutOfRange {
                    index: 0,
                    value: value as i64,
                    width,
                });
            }
            Ok(((value as i8 as u8) ^ (1u8 << bit)) as i8 as i32)
        }
        32 => Ok(((value as u32) ^ (1u32 << bit)) as i32),
        w => Err(Error::BitWidth(w)),
    }
}

/// Copy of `q` with every targeted bit flipped. Targets must all name the
/// same site, whose width matches `q`.
pub fn apply_faults(q: &QuantizedTensor, targets: &[FaultTarget]) -> Result<QuantizedTensor> {
    let mut out = q.clone();
    let width = q.params().bits();
    let ints = out.ints_mut();
    let len = ints.len();
    for t in targets {
        if t.site.width() != width {
            return Err(Error::BitWidth(t.site.width()));
        }
        if t.element >= len {
            return Err(Error::ElementIndex {
                index: t.element,
                len,
            });
        }
        let v = &mut ints.data_mut()[t.element];
        *v = flip_bit(*v, t.bit, width)?;
    }
    Ok(out)
}

/// Flips addressed to one layer, grouped by site.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerFaults {
    sites: [Vec<(usize, u32)>; 5],
}

impl LayerFaults {
    pub fn push(&mut self, site: FaultSite, element: usize, bit: u32) {
        self.sites[site.slot()].push((element, bit));
    }

    pub fn site(&self, site: FaultSite) -> &[(usize, u32)] {
        &self.sites[site.slot()]
    }

    pub fn is_empty(&self) -> bool {
        self.sites.iter().all(Vec::is_empty)
    }

    /// Flip in place; `data` holds one tensor of the given site.
    pub(crate) fn apply(&self, site: FaultSite, data: &mut [i32], layer: usize) -> Result<()> {
        for &(element, bit) in self.site(site) {
            let len = data.len();
            let v = data.get_mut(element).ok_or(Error::TargetOutOfRange {
                layer,
                site,
                element,
                len,
            })?;
            *v = flip_bit(*v, bit, site.width())?;
        }
        Ok(())
    }
}

pub(crate) static NO_FAULTS: LayerFaults = LayerFaults {
    sites: [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()],
};
