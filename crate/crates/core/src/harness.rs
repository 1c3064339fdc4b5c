//! Fault-count sweeps, per-module sweeps and the FAT comparison, with
//! Student-t confidence intervals and CSV persistence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::checkpoint::Checkpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fault::FaultSite;
use crate::model::ModelGraph;
use crate::par::Parallelism;
use crate::train::{evaluate, FaultSpec};

pub const SWEEP: &str = "sweep";
pub const MODULE_SWEEP: &str = "module-sweep";
pub const FAT_REFERENCE: &str = "fat-reference";
pub const FAT: &str = "fat";

pub const CSV_HEADER: [&str; 10] = [
    "experiment",
    "model",
    "protected_sites",
    "site_filter",
    "n_faults",
    "fault_rate",
    "repeat",
    "seed",
    "n_samples",
    "accuracy",
];

pub const DEFAULT_FAULT_GRID: [u64; 12] = [0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub fault_counts: Vec<u64>,
    pub repeats: usize,
    pub master_seed: u64,
    pub protected_sites: Vec<FaultSite>,
    pub site_filter: Option<FaultSite>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            fault_counts: DEFAULT_FAULT_GRID.to_vec(),
            repeats: 3,
            master_seed: 1,
            protected_sites: Vec::new(),
            site_filter: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fault_counts.is_empty() {
            return Err(Error::Config("fault grid is empty".into()));
        }
        if self.fault_counts.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "fault grid {:?} must be nondecreasing",
                self.fault_counts
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub model: String,
    pub protected_sites: Vec<FaultSite>,
    pub site_filter: Option<FaultSite>,
    pub n_faults: u64,
    pub fault_rate: f32,
    pub repeat: u64,
    pub seed: u64,
    pub n_samples: usize,
    pub accuracy: f32,
}

impl ResultRow {
    fn sort_key(&self) -> (String, String, String, u64, u64) {
        (
            self.experiment.clone(),
            filter_name(self.site_filter).to_string(),
            FaultSite::format_list(&self.protected_sites),
            self.n_faults,
            self.repeat,
        )
    }
}

fn filter_name(f: Option<FaultSite>) -> &'static str {
    f.map_or("all", FaultSite::name)
}

fn parse_filter(s: &str) -> Result<Option<FaultSite>> {
    match s {
        "all" => Ok(None),
        s => s.parse().map(Some),
    }
}

/// Sort rows by (experiment, site filter, protection, n_faults, repeat).
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by_key(ResultRow::sort_key);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CIStat {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl CIStat {
    pub fn lo(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn hi(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn overlaps(&self, other: &CIStat) -> bool {
        self.lo() <= other.hi() && other.lo() <= self.hi()
    }
}

/// Two-sided Student-t quantile `t_{0.975, df}`.
pub fn t975(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64)
        .expect("df >= 1")
        .inverse_cdf(0.975)
}

/// Mean and 95% half-width `t_{0.975,n-1} · s / √n`.
pub fn ci95(values: &[f64]) -> Result<CIStat> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewRepeats(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let half_width = if var == 0.0 {
        0.0
    } else {
        t975(n - 1) * var.sqrt() / (n as f64).sqrt()
    };
    Ok(CIStat { mean, half_width, n })
}

/// Rows for every (count, repeat) cell of one checkpoint.
fn sweep_rows(
    experiment: &str,
    model: &ModelGraph,
    data: &LabeledDataset,
    cfg: &SweepConfig,
    mode: Parallelism,
) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.fault_counts.len() * cfg.repeats);
    let mut counts = cfg.fault_counts.clone();
    counts.dedup();
    for &n in &counts {
        for repeat in 0..cfg.repeats as u64 {
            let spec = FaultSpec {
                n_faults: n,
                protected: cfg.protected_sites.clone(),
                site_filter: cfg.site_filter,
                seed: cfg.master_seed,
                repeat,
            };
            let pop = spec.population(model).total();
            if n > pop {
                return Err(Error::TooManyFaults {
                    requested: n,
                    available: pop,
                });
            }
            let acc = evaluate(model, data, &spec, mode)?;
            rows.push(ResultRow {
                experiment: experiment.to_string(),
                model: model.name.clone(),
                protected_sites: cfg.protected_sites.clone(),
                site_filter: cfg.site_filter,
                n_faults: n,
                fault_rate: (n as f64 / pop as f64) as f32,
                repeat,
                seed: cfg.master_seed,
                n_samples: acc.total,
                accuracy: acc.accuracy() as f32,
            });
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Accuracy against the number of faults per inference.
pub fn run_fault_sweep(
    model: &ModelGraph,
    data: &LabeledDataset,
    cfg: &SweepConfig,
    mode: Parallelism,
) -> Result<Vec<ResultRow>> {
    sweep_rows(SWEEP, model, data, cfg, mode)
}

/// Nearest integer count for `rate` over `population` bits, ties up.
pub fn rate_to_count(rate: f64, population: u64) -> u64 {
    (rate * population as f64 + 0.5).floor() as u64
}

/// Faults confined to one site kind, specified as rates over that site's
/// own population.
pub fn run_module_sweep(
    model: &ModelGraph,
    data: &LabeledDataset,
    site: FaultSite,
    rates: &[f64],
    cfg: &SweepConfig,
    mode: Parallelism,
) -> Result<Vec<ResultRow>> {
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("fault rate {r} outside [0, 1]")));
    }
    let pop = model.bit_budget().site_total(site);
    let mut counts: Vec<u64> = rates.iter().map(|&r| rate_to_count(r, pop)).collect();
    counts.sort_unstable();
    let cfg = SweepConfig {
        fault_counts: counts,
        protected_sites: Vec::new(),
        site_filter: Some(site),
        ..cfg.clone()
    };
    sweep_rows(MODULE_SWEEP, model, data, &cfg, mode)
}

/// Evaluate the reference model and, for every nonzero count, the FAT model
/// trained with that count, on the same grid and seeds. A count of zero uses
/// the reference checkpoint in both arms.
pub fn run_fat_comparison(
    reference: &Checkpoint,
    fat: &BTreeMap<u64, Checkpoint>,
    data: &LabeledDataset,
    cfg: &SweepConfig,
    reference_unprotected: bool,
    mode: Parallelism,
) -> Result<Vec<ResultRow>> {
    let ref_cfg = SweepConfig {
        protected_sites: if reference_unprotected {
            Vec::new()
        } else {
            cfg.protected_sites.clone()
        },
        ..cfg.clone()
    };
    let mut rows = sweep_rows(FAT_REFERENCE, &reference.model, data, &ref_cfg, mode)?;
    for &n in &cfg.fault_counts {
        if rows.iter().any(|r| r.experiment == FAT && r.n_faults == n) {
            continue;
        }
        let model = match n {
            0 => &reference.model,
            n => &fat
                .get(&n)
                .ok_or_else(|| Error::Config(format!("no FAT checkpoint trained with {n} faults")))?
                .model,
        };
        let one = SweepConfig {
            fault_counts: vec![n],
            ..cfg.clone()
        };
        rows.extend(sweep_rows(FAT, model, data, &one, mode)?);
    }
    sort_rows(&mut rows);
    Ok(rows)
}

fn fmt_f32(v: f32) -> String {
    format!("{v:.8e}")
}

pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(rows, file)
}

pub fn write_csv_to<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.model.clone(),
            FaultSite::format_list(&r.protected_sites),
            filter_name(r.site_filter).to_string(),
            r.n_faults.to_string(),
            fmt_f32(r.fault_rate),
            r.repeat.to_string(),
            r.seed.to_string(),
            r.n_samples.to_string(),
            fmt_f32(r.accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<csv>".into(),
        source: e,
    })?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(file)
}

pub fn read_csv_from<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = rd.records();
    let header = records.next().ok_or(Error::CsvRow {
        line: 1,
        detail: "missing header".into(),
    })??;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::CsvRow {
            line: 1,
            detail: format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |detail: String| Error::CsvRow { line, detail };
        if rec.len() != CSV_HEADER.len() {
            return Err(bad(format!("{} fields, expected {}", rec.len(), CSV_HEADER.len())));
        }
        let field = |i: usize| &rec[i];
        let num = |i: usize| -> Result<u64> {
            field(i)
                .parse()
                .map_err(|_| bad(format!("{} `{}` is not an integer", CSV_HEADER[i], field(i))))
        };
        let float = |i: usize| -> Result<f32> {
            field(i)
                .parse()
                .map_err(|_| bad(format!("{} `{}` is not a number", CSV_HEADER[i], field(i))))
        };
        let row = ResultRow {
            experiment: field(0).to_string(),
            model: field(1).to_string(),
            protected_sites: FaultSite::parse_list(field(2)).map_err(|e| bad(e.to_string()))?,
            site_filter: parse_filter(field(3)).map_err(|e| bad(e.to_string()))?,
            n_faults: num(4)?,
            fault_rate: float(5)?,
            repeat: num(6)?,
            seed: num(7)?,
            n_samples: num(8)? as usize,
            accuracy: float(9)?,
        };
        if !(0.0..=1.0).contains(&row.accuracy) || !(0.0..=1.0).contains(&row.fault_rate) {
            return Err(bad("accuracy and fault_rate must lie in [0, 1]".into()));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Repeats of one (experiment, model, protection, filter, count) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub experiment: String,
    pub model: String,
    pub protected_sites: Vec<FaultSite>,
    pub site_filter: Option<FaultSite>,
    pub n_faults: u64,
    pub fault_rate: f32,
    pub accuracies: Vec<f64>,
}

impl CellSummary {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// `None` for a single repeat.
    pub fn ci(&self) -> Option<CIStat> {
        ci95(&self.accuracies).ok()
    }
}

/// Group rows into cells in canonical order.
pub fn summarize(rows: &[ResultRow]) -> Vec<CellSummary> {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut cells: Vec<CellSummary> = Vec::new();
    for r in sorted {
        match cells.last_mut() {
            Some(c)
                if c.experiment == r.experiment
                    && c.model == r.model
                    && c.protected_sites == r.protected_sites
                    && c.site_filter == r.site_filter
                    && c.n_faults == r.n_faults =>
            {
                c.accuracies.push(r.accuracy as f64)
            }
            _ => cells.push(CellSummary {
                experiment: r.experiment,
                model: r.model,
                protected_sites: r.protected_sites,
                site_filter: r.site_filter,
                n_faults: r.n_faults,
                fault_rate: r.fault_rate,
                accuracies: vec![r.accuracy as f64],
            }),
        }
    }
    cells
}

/// Markdown table of per-cell mean ± 95% half-width.
pub fn markdown_report(rows: &[ResultRow]) -> String {
    let mut out = String::new();
    out.push_str("| experiment | model | protected | filter | n_faults | fault_rate | repeats | mean accuracy | ± 95% CI |\n");
    out.push_str("|---|---|---|---|---:|---:|---:|---:|---:|\n");
    for c in summarize(rows) {
        let hw = c.ci().map_or("n/a".to_string(), |s| format!("{:.6}", s.half_width));
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.3e} | {} | {:.6} | {} |",
            c.experiment,
            c.model,
            FaultSite::format_list(&c.protected_sites),
            filter_name(c.site_filter),
            c.n_faults,
            c.fault_rate,
            c.accuracies.len(),
            c.mean(),
            hw
        );
    }
    out
}

/// Largest grid count reached before the mean accuracy first falls more
/// than `tolerance` below `baseline`. Cells must share one experiment.
pub fn max_tolerated_faults(cells: &[CellSummary], baseline: f64, tolerance: f64) -> Option<u64> {
    let mut best = None;
    for c in cells {
        if c.mean() < baseline - tolerance {
            break;
        }
        best = Some(c.n_faults);
    }
    best
}

/// Each step down the grid either does not raise the mean or stays within
/// overlapping confidence intervals.
pub fn nonincreasing_up_to_ci(cells: &[CellSummary]) -> bool {
    cells.windows(2).all(|w| {
        let (a, b) = (&w[0], &w[1]);
        if b.mean() <= a.mean() {
            return true;
        }
        matches!((a.ci(), b.ci()), (Some(x), Some(y)) if x.overlaps(&y))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(experiment: &str, n: u64, repeat: u64, acc: f32) -> ResultRow {
        ResultRow {
            experiment: experiment.into(),
            model: "ccdf".into(),
            protected_sites: vec![FaultSite::B32, FaultSite::O32],
            site_filter: None,
            n_faults: n,
            fault_rate: n as f32 / 357_968.0,
            repeat,
            seed: 7,
            n_samples: 2000,
            accuracy: acc,
        }
    }

    #[test]
    fn t_quantiles_match_table() {
        assert!((t975(2) - 4.302653).abs() < 1e-6);
        assert!((t975(1) - 12.7062).abs() < 1e-4);
    }

    #[test]
    fn ci95_examples() {
        let s = ci95(&[0.9, 0.92, 0.94]).unwrap();
        assert!((s.mean - 0.92).abs() < 1e-12);
        assert!((s.half_width - 4.302653 * 0.02 / 3f64.sqrt()).abs() < 1e-6);
        assert!((s.half_width - 0.049683).abs() < 1e-6);
        assert_eq!(ci95(&[0.5, 0.5, 0.5]).unwrap().half_width, 0.0);
        let s = ci95(&[0.0, 1.0]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert!((s.half_width - 6.3531).abs() < 1e-4);
        assert!(matches!(ci95(&[1.0]), Err(Error::TooFewRepeats(1))));
    }

    #[test]
    fn csv_round_trip() {
        let mut rows = vec![row(SWEEP, 0, 0, 0.9871), row(SWEEP, 4, 1, 0.5), row(FAT, 1, 2, 1.0 / 3.0)];
        rows[1].site_filter = Some(FaultSite::O32);
        rows[1].protected_sites = vec![];
        let mut buf = Vec::new();
        write_csv_to(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("experiment,model,protected_sites,site_filter,n_faults,fault_rate,repeat,seed,n_samples,accuracy\n"));
        assert_eq!(read_csv_from(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut buf = Vec::new();
        write_csv_to(&[], &mut buf).unwrap();
        assert_eq!(buf, format!("{}\n", CSV_HEADER.join(",")).into_bytes());
        assert!(read_csv_from(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = format!("{}\nsweep,ccdf,none,all,1,1e-6,0,1,10,0.5\nsweep,ccdf,none,all,x,1e-6,0,1,10,0.5\n", CSV_HEADER.join(","));
        match read_csv_from(text.as_bytes()) {
            Err(Error::CsvRow { line: 3, detail }) => assert!(detail.contains("n_faults")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rate_rounding_ties_up() {
        assert_eq!(rate_to_count(0.5, 3), 2);
        assert_eq!(rate_to_count(0.25, 2), 1);
        assert_eq!(rate_to_count(0.0, 1000), 0);
        assert_eq!(rate_to_count(1e-3, 1856), 2);
    }

    #[test]
    fn tolerated_faults_use_first_crossing() {
        let rows: Vec<ResultRow> = [(0, 0.99), (1, 0.985), (2, 0.975), (4, 0.985), (8, 0.5)]
            .iter()
            .flat_map(|&(n, a)| (0..3).map(move |r| row(SWEEP, n, r, a)))
            .collect();
        let cells = summarize(&rows);
        assert_eq!(cells.len(), 5);
        assert_eq!(max_tolerated_faults(&cells, 0.99, 0.01), Some(1));
        assert!(nonincreasing_up_to_ci(&cells[..3]));
        assert!(!nonincreasing_up_to_ci(&cells));
    }

    #[test]
    fn report_has_one_line_per_cell() {
        let rows = vec![row(SWEEP, 0, 0, 0.9), row(SWEEP, 0, 1, 0.92), row(SWEEP, 0, 2, 0.94), row(SWEEP, 8, 0, 0.1)];
        let md = markdown_report(&rows);
        assert_eq!(md.lines().count(), 4);
        assert!(md.contains("| 0.920000 | 0.049683 |"));
        assert!(md.contains("| n/a |"));
    }
}
