use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use qfi_core::checkpoint::keys;
use qfi_core::harness::{self, markdown_report, run_fat_comparison, run_fault_sweep, run_module_sweep};
use qfi_core::train::PlanGranularity;
use qfi_core::{
    build_ccdf, ci95, evaluate, train, Checkpoint, FaultSite, FaultSpec, LabeledDataset, Parallelism, Split,
    SweepConfig, TrainConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "qfi", version, about = "Quantized CNN bit-flip fault injection on MNIST")]
struct Cli {
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Conventional training of the CCDF model.
    Train(TrainArgs),
    /// Fault-aware training: faults injected in every training forward.
    FatTrain {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        faults: u64,
        #[arg(long, default_value = "b32,o32")]
        protect: String,
        /// One plan per mini-batch or one per sample.
        #[arg(long, default_value = "batch", value_parser = ["batch", "sample"])]
        plans: String,
        /// Fine-tune this checkpoint instead of starting from fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Faulted accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 0)]
        faults: u64,
        /// Inject only into this site kind.
        #[arg(long)]
        site: Option<String>,
    },
    /// Accuracy over a grid of fault counts.
    Sweep {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', default_values_t = harness::DEFAULT_FAULT_GRID)]
        faults: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Faults confined to one site kind, given as rates over its population.
    ModuleSweep {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        site: String,
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reference against FAT checkpoints on one fault grid.
    FatCompare {
        #[command(flatten)]
        eval: EvalArgs,
        /// FAT checkpoint trained with N faults, as `N=path`; repeatable.
        #[arg(long = "fat", value_parser = parse_fat_ckpt)]
        fat: Vec<(u64, PathBuf)>,
        #[arg(long, value_delimiter = ',', required = true)]
        faults: Vec<u64>,
        /// Inject into every site of the reference model.
        #[arg(long)]
        reference_unprotected: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vulnerable bits per layer and site.
    CountBits {
        /// Defaults to a freshly built CCDF model.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "none")]
        protect: String,
    },
    /// Markdown summary (mean ± 95% CI) of result CSVs.
    Report {
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Train on the first N training images only.
    #[arg(long)]
    train_samples: Option<usize>,
    /// Print a progress line every N batches.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "none")]
    protect: String,
    /// Evaluate on the first N test images only.
    #[arg(long)]
    samples: Option<usize>,
}

fn parse_fat_ckpt(s: &str) -> Result<(u64, PathBuf), String> {
    let (n, path) = s.split_once('=').ok_or("expected N=path")?;
    let n = n.parse().map_err(|_| format!("`{n}` is not a fault count"))?;
    Ok((n, PathBuf::from(path)))
}

fn sites(s: &str) -> anyhow::Result<Vec<FaultSite>> {
    FaultSite::parse_list(s).map_err(|e| anyhow!(UsageError(e.to_string())))
}

fn site(s: &str) -> anyhow::Result<FaultSite> {
    s.parse().map_err(|e: qfi_core::Error| anyhow!(UsageError(e.to_string())))
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_test(dir: &Path, samples: Option<usize>) -> anyhow::Result<LabeledDataset> {
    let data = LabeledDataset::load_mnist(dir, Split::Test)?;
    Ok(match samples {
        Some(n) => data.head(n),
        None => data,
    })
}

fn run_train(
    args: &TrainArgs,
    faults: u64,
    protect: Vec<FaultSite>,
    plans: PlanGranularity,
    init: Option<&Path>,
) -> anyhow::Result<()> {
    let model = match init {
        Some(p) => Checkpoint::load(p)?.model,
        None => build_ccdf(args.seed),
    };
    let mut data = LabeledDataset::load_mnist(&args.data_dir, Split::Train)?;
    if let Some(n) = args.train_samples {
        data = data.head(n);
    }
    let test = LabeledDataset::load_mnist(&args.data_dir, Split::Test)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        momentum: args.momentum,
        seed: args.seed,
        faults_per_forward: faults,
        protected_sites: protect,
        granularity: plans,
    };
    cfg.validate().map_err(|e| anyhow!(UsageError(e.to_string())))?;
    let start = Instant::now();
    let every = args.log_every.max(1);
    let batches = data.len().div_ceil(cfg.batch_size);
    println!("epoch,batch,loss,train_acc");
    let mut ckpt = train(model, &data, Some(&test), &cfg, |p| {
        if p.batch % every == 0 || p.batch + 1 == batches {
            println!("{p}");
        }
    })?;
    if let Some(p) = init {
        ckpt.set_meta(keys::INIT, p.display().to_string());
    }
    ckpt.save(&args.out)?;
    eprintln!(
        "saved {} (test accuracy {}, {:.1}s)",
        args.out.display(),
        ckpt.meta(keys::TEST_ACCURACY).unwrap_or("?"),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn sweep_config(eval: &EvalArgs, faults: Vec<u64>, protect: Vec<FaultSite>) -> SweepConfig {
    SweepConfig {
        fault_counts: faults,
        repeats: eval.repeats,
        master_seed: eval.seed,
        protected_sites: protect,
        site_filter: None,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mode = Parallelism::default();
    match cli.cmd {
        Command::Train(args) => run_train(&args, 0, Vec::new(), PlanGranularity::Batch, None),
        Command::FatTrain {
            train,
            faults,
            protect,
            plans,
            init,
        } => {
            let plans = if plans == "sample" {
                PlanGranularity::Sample
            } else {
                PlanGranularity::Batch
            };
            run_train(&train, faults, sites(&protect)?, plans, init.as_deref())
        }
        Command::Eval { eval, faults, site: s } => {
            let ckpt = Checkpoint::load(&eval.ckpt)?;
            let data = load_test(&eval.data_dir, eval.samples)?;
            let filter = s.as_deref().map(site).transpose()?;
            let protected = sites(&eval.protect)?;
            let repeats = if faults == 0 { 1 } else { eval.repeats.max(1) };
            let mut accs = Vec::with_capacity(repeats);
            for repeat in 0..repeats as u64 {
                let spec = FaultSpec {
                    n_faults: faults,
                    protected: protected.clone(),
                    site_filter: filter,
                    seed: eval.seed,
                    repeat,
                };
                let out = evaluate(&ckpt.model, &data, &spec, mode)?;
                println!("repeat {repeat}: accuracy {:.6} ({}/{})", out.accuracy(), out.correct, out.total);
                accs.push(out.accuracy());
            }
            match ci95(&accs) {
                Ok(s) => println!("accuracy {:.6} ± {:.6} (95% CI, {} repeats)", s.mean, s.half_width, s.n),
                Err(_) => println!("accuracy {:.6}", accs[0]),
            }
            Ok(())
        }
        Command::Sweep { eval, faults, out } => {
            let ckpt = Checkpoint::load(&eval.ckpt)?;
            let data = load_test(&eval.data_dir, eval.samples)?;
            let cfg = sweep_config(&eval, faults, sites(&eval.protect)?);
            cfg.validate().map_err(|e| anyhow!(UsageError(e.to_string())))?;
            let rows = run_fault_sweep(&ckpt.model, &data, &cfg, mode)?;
            harness::write_csv(&rows, &out)?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::ModuleSweep {
            eval,
            site: s,
            rates,
            out,
        } => {
            let ckpt = Checkpoint::load(&eval.ckpt)?;
            let data = load_test(&eval.data_dir, eval.samples)?;
            let cfg = sweep_config(&eval, vec![0], Vec::new());
            let rows = run_module_sweep(&ckpt.model, &data, site(&s)?, &rates, &cfg, mode)?;
            harness::write_csv(&rows, &out)?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::FatCompare {
            eval,
            fat,
            faults,
            reference_unprotected,
            out,
        } => {
            let reference = Checkpoint::load(&eval.ckpt)?;
            let mut fat_ckpts = BTreeMap::new();
            for (n, path) in fat {
                fat_ckpts.insert(n, Checkpoint::load(&path).with_context(|| format!("FAT checkpoint for {n} faults"))?);
            }
            let data = load_test(&eval.data_dir, eval.samples)?;
            let protect = if eval.protect == "none" {
                "b32,o32"
            } else {
                eval.protect.as_str()
            };
            let cfg = sweep_config(&eval, faults, sites(protect)?);
            let rows = run_fat_comparison(&reference, &fat_ckpts, &data, &cfg, reference_unprotected, mode)?;
            harness::write_csv(&rows, &out)?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::CountBits { ckpt, protect } => {
            let model = match ckpt {
                Some(p) => Checkpoint::load(&p)?.model,
                None => build_ccdf(0),
            };
            let budget = model.bit_budget();
            let protected = sites(&protect)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "layer,site,elements,width,bits")?;
            for e in budget.entries() {
                writeln!(out, "{},{},{},{},{}", e.layer, e.site, e.elements, e.site.width(), e.bits())?;
            }
            for s in FaultSite::ALL {
                writeln!(out, "site {s}: {}", budget.site_total(s))?;
            }
            writeln!(out, "total: {}", budget.total())?;
            if !protected.is_empty() {
                writeln!(
                    out,
                    "unprotected ({} protected): {}",
                    FaultSite::format_list(&protected),
                    budget.restrict(&protected, None).total()
                )?;
            }
            Ok(())
        }
        Command::Report { input, out } => {
            let mut rows = Vec::new();
            for p in &input {
                rows.extend(harness::read_csv(p)?);
            }
            let md = markdown_report(&rows);
            match out {
                Some(p) => std::fs::write(&p, md).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{md}"),
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<qfi_core::Error>() {
        Some(e) if e.is_data_error() => EXIT_DATA,
        Some(qfi_core::Error::TooManyFaults { .. } | qfi_core::Error::Config(_) | qfi_core::Error::UnknownSite(_)) => {
            EXIT_USAGE
        }
        _ if err.chain().any(|e| e.is::<std::io::Error>()) => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(k) = cli.threads {
        #[cfg(feature = "parallel")]
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
        #[cfg(not(feature = "parallel"))]
        let _ = k;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
