//! Command-line entry points: gen-synth, distill, sweep, report.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench_io::{
    emit_report, gen_synth, load_csv, load_labels, read_records, save_csv, save_labels, save_summary_csv,
    write_aggregate_csv, write_records, write_run_meta, SynthSpec,
};
use crate::barycenter::BarycenterParams;
use crate::dadil::DadilParams;
use crate::distill::{distill_wbt_with_plan, DmParams, Method};
use crate::distributions::{standardize, MultiDomainDataset};
use crate::eval::{aggregate, run_method, sweep, ClassifierParams, MethodParams, SweepConfig};
use crate::ot::SinkhornParams;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "otdistill", version, about = "Distill labeled target summaries from shifted source domains")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the scalar seed fields of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for `sweep` (default: available parallelism).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log filter, e.g. `info` or `otdistill=debug`; falls back to OTDISTILL_LOG.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-domain dataset and its hidden target labels.
    GenSynth(GenSynthArgs),
    /// Distill one summary.
    Distill(DistillArgs),
    /// Run the method x SPC x seed grid.
    Sweep,
    /// Aggregate CSV and SVG chart from a records file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub rotation: Option<f64>,
    #[arg(long)]
    pub translation: Option<f64>,
    #[arg(long)]
    pub scale_jitter: Option<f64>,
    #[arg(long)]
    pub class_sep: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub method: Method,
    #[arg(long, default_value_t = 1)]
    pub spc: usize,
    /// Also write the stage-2 transport plan (wbt only).
    #[arg(long)]
    pub dump_plan: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Records file written by `sweep`.
    #[arg(long)]
    pub records: PathBuf,
}

/// The JSON experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Dataset CSV; when absent, `synth` is generated in memory.
    pub dataset: Option<PathBuf>,
    /// Hidden target labels (one class name per line) for `dataset`.
    pub target_labels: Option<PathBuf>,
    pub synth: SynthSpec,
    pub benchmark: Option<String>,
    pub methods: Vec<Method>,
    pub spc_values: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Seed for single runs (`distill`).
    pub seed: u64,
    pub standardize: bool,
    pub ot: SinkhornParams,
    pub barycenter: BarycenterParams,
    pub dm: DmParams,
    pub dadil: DadilParams,
    pub classifier: ClassifierParams,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        Self {
            dataset: None,
            target_labels: None,
            synth: SynthSpec::default(),
            benchmark: None,
            methods: sweep.methods,
            spc_values: sweep.spc_values,
            seeds: sweep.seeds,
            seed: 0,
            standardize: true,
            ot: SinkhornParams::default(),
            barycenter: BarycenterParams::default(),
            dm: DmParams::default(),
            dadil: DadilParams::default(),
            classifier: ClassifierParams::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn method_params(&self) -> MethodParams {
        MethodParams {
            ot: self.ot.clone(),
            barycenter: self.barycenter.clone(),
            dm: self.dm.clone(),
            dadil: self.dadil.clone(),
        }
    }

    pub fn benchmark_name(&self) -> String {
        match (&self.benchmark, &self.dataset) {
            (Some(b), _) => b.clone(),
            (None, Some(p)) => p.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned()),
            (None, None) => "synthetic".into(),
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            benchmark: self.benchmark_name(),
            methods: self.methods.clone(),
            spc_values: self.spc_values.clone(),
            seeds: self.seeds.clone(),
            standardize: self.standardize,
            params: self.method_params(),
            classifier: self.classifier.clone(),
        }
    }

    /// The dataset plus hidden target labels when they are known.
    pub fn load_dataset(&self) -> Result<(MultiDomainDataset, Option<Vec<usize>>)> {
        match &self.dataset {
            Some(path) => {
                let ds = load_csv(path)?;
                let labels = match &self.target_labels {
                    Some(p) => Some(load_labels(p, ds.class_names())?),
                    None => None,
                };
                Ok((ds, labels))
            }
            None => {
                let (ds, hidden) = gen_synth(&self.synth)?;
                Ok((ds, Some(hidden)))
            }
        }
    }
}

fn init_logging(level: Option<&str>) {
    let mut builder = env_logger::Builder::new();
    builder.filter_level(log::LevelFilter::Warn);
    if let Ok(env) = std::env::var("OTDISTILL_LOG") {
        builder.parse_filters(&env);
    }
    if let Some(level) = level {
        builder.parse_filters(level);
    }
    builder.format_timestamp(None);
    let _ = builder.try_init();
}

fn output_dir(cli: &Cli, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cli.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Parse-free entry point used by `main` and the tests.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    init_logging(cli.log_level.as_deref());
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if cli.jobs == Some(0) {
        return Err(Error::ConfigInvalid("--jobs must be positive".into()));
    }
    let out = output_dir(&cli, &cfg)?;
    match &cli.command {
        Command::GenSynth(args) => cmd_gen_synth(&mut cfg, args, &out),
        Command::Distill(args) => cmd_distill(&cfg, args, &out),
        Command::Sweep => cmd_sweep(&cfg, cli.jobs, &out),
        Command::Report(args) => emit_report(&read_records(&args.records)?, &out),
    }
}

fn cmd_gen_synth(cfg: &mut ExperimentConfig, args: &GenSynthArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let s = &mut cfg.synth;
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(args.domains, s.n_domains);
    set!(args.classes, s.n_classes);
    set!(args.dim, s.d);
    set!(args.samples, s.samples_per_domain);
    set!(args.rotation, s.shift.rotation_max_deg);
    set!(args.translation, s.shift.translation_scale);
    set!(args.scale_jitter, s.shift.scale_jitter);
    set!(args.class_sep, s.class_sep);
    set!(args.noise, s.noise);
    let (ds, hidden) = gen_synth(s)?;
    let data = out.join("synth.csv");
    let labels = out.join("synth_target_labels.txt");
    save_csv(&data, &ds)?;
    save_labels(&labels, &hidden, ds.class_names())?;
    Ok(vec![data, labels])
}

fn cmd_distill(cfg: &ExperimentConfig, args: &DistillArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let (ds, hidden) = cfg.load_dataset()?;
    let (work, scaler) = if cfg.standardize {
        let (d, s) = standardize(&ds)?;
        (d, Some(s))
    } else {
        (ds.clone(), None)
    };
    let params = cfg.method_params();
    let mut written = Vec::new();
    let summary = if args.method == Method::Wbt && args.dump_plan {
        let (summary, plan) = distill_wbt_with_plan(&work, args.spc, &params.ot, &params.barycenter, cfg.seed)?;
        let path = out.join(format!("plan_wbt_spc{}.json", args.spc));
        fs::write(&path, serde_json::to_string(&plan.to_json())? + "\n")?;
        written.push(path);
        summary
    } else {
        run_method(args.method, &work, hidden.as_deref(), args.spc, cfg.seed, &params, None)?
    };
    // summaries go back to the original feature units
    let exported = match &scaler {
        Some(s) => {
            let mut copy = summary.clone();
            copy.measure = summary.measure.with_support(s.inverse_transform(summary.measure.support()))?;
            copy
        }
        None => summary.clone(),
    };
    let stem = format!("summary_{}_spc{}", args.method, args.spc);
    let csv = out.join(format!("{stem}.csv"));
    save_summary_csv(&csv, &exported, ds.class_names())?;
    let diag = out.join(format!("{stem}.json"));
    fs::write(&diag, serde_json::to_string_pretty(&summary.diagnostics_json())? + "\n")?;
    written.push(csv);
    written.push(diag);
    Ok(written)
}

fn cmd_sweep(cfg: &ExperimentConfig, jobs: Option<usize>, out: &Path) -> Result<Vec<PathBuf>> {
    let (ds, hidden) = cfg.load_dataset()?;
    let hidden = hidden.ok_or_else(|| {
        Error::ConfigInvalid("sweep needs target labels: set `target_labels` or use `synth`".into())
    })?;
    let records = sweep(&ds, &hidden, &cfg.sweep_config(), jobs)?;
    let records_path = out.join("records.jsonl");
    let agg_path = out.join("aggregate.csv");
    let meta_path = out.join("run_meta.json");
    write_records(&records_path, &records)?;
    write_aggregate_csv(&agg_path, &aggregate(&records))?;
    write_run_meta(&meta_path, &records)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} sweep cells failed", records.len());
    }
    Ok(vec![records_path, agg_path, meta_path])
}

/// Process entry: parse, run, map errors onto exit codes.
pub fn main_exit() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category().as_str());
            e.category().exit_code()
        }
    }
}
