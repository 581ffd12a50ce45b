use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use expcli::sweep::{backbone, draw_truth};
use expcli::{fit_rate, plotdata, run_sweep, verify, CliError, Column, ExperimentConfig, Result, Suite, VerifyOptions};
use replora_core::attention_moe::{lora_msa_forward, merge_adapter, msa_forward, HeadAdapter, MsaWeights, TokenSequence};
use replora_core::estimation::{fit, GradientTerm, LsProblem};
use replora_core::parameterization::{merge_and_discard, RepLoraMlp, DEFAULT_HIDDEN};
use replora_core::voronoi_metrics::{family_loss, l2_mu_error};
use replora_core::{gen_dataset, Activation, Dataset, RngStream};

#[derive(Parser)]
#[command(name = "replora", version, about = "LoRA-as-MoE estimation experiments")]
struct Cli {
    /// Experiment configuration (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw the truth and write a dataset CSV (plus truth and backbone JSON).
    GenData {
        #[arg(long)]
        n: usize,
    },
    /// Fit one dataset and report objective, loss and L2(mu) error.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Optional `step,objective` trace output.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the (n, trial) grid and write the sweep CSV.
    Sweep,
    /// Log-log slope of the per-n median of a sweep column.
    Rate {
        csv: PathBuf,
        #[arg(long, default_value = "l2_mu_error")]
        column: String,
    },
    /// Run verification suites: all, gradients, moe-equivalence, merge, losses, assumptions, ppt.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
        /// Drop one gradient term (gate-score, expert-value, log-weight).
        #[arg(long, hide = true)]
        mutate_gradient: Option<String>,
    },
    /// Merge a random RepLoRA adapter and compare forwards.
    MergeDemo {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 5)]
        tokens: usize,
    },
    /// Per-n quantile table of a sweep column.
    Plotdata {
        csv: PathBuf,
        #[arg(long, default_value = "l2_mu_error")]
        column: String,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if cli.out.is_some() {
        c.output = cli.out.clone();
    }
    c.validate()?;
    Ok(c)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn sidecar(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::GenData { n } => {
            let c = load_config(&cli)?;
            let out = c
                .output
                .clone()
                .ok_or_else(|| CliError::Usage("gen-data needs --out".into()))?;
            let b = backbone(&c)?;
            let truth = draw_truth(&c, c.seed)?;
            let ds = gen_dataset(&b, &truth.to_measure()?, *n, c.noise_std, c.input_dist, c.seed)?;
            ds.write_csv(BufWriter::new(File::create(&out)?))?;
            fs::write(sidecar(&out, ".truth.json"), truth.to_json()?)?;
            fs::write(sidecar(&out, ".backbone.json"), b.to_json()?)?;
            eprintln!("wrote {} samples to {}", ds.len(), out.display());
            Ok(true)
        }
        Cmd::Fit { data, trace } => {
            let c = load_config(&cli)?;
            let ds = Dataset::read_csv(File::open(data)?, c.noise_std, c.seed)?;
            let b = backbone(&c)?;
            let truth = draw_truth(&c, c.seed)?;
            let problem = LsProblem::new(b.clone(), ds, c.spec(c.fitted_experts), c.theta_box)?;
            let r = fit(&problem, &c.optimizer.fit_options(&truth, c.seed))?;
            let loss = family_loss(&r.raw_params, &truth, c.r_exp)?;
            let l2 = l2_mu_error(&b, &r.raw_params, &truth, c.mc_samples, c.input_dist, c.seed)?;
            println!(
                "objective={:e} {}={:e} l2_mu_error={l2:e} restarts={} discarded={}",
                r.final_objective,
                loss.label(),
                loss.value,
                r.restarts_used,
                r.restarts_discarded
            );
            if let Some(t) = trace {
                r.write_trace_csv(BufWriter::new(File::create(t)?))?;
            }
            if let Some(o) = &c.output {
                fs::write(o, r.to_json()?)?;
            }
            Ok(true)
        }
        Cmd::Sweep => {
            let c = load_config(&cli)?;
            let recs = run_sweep(&c, cli.workers)?;
            let failed = recs.iter().filter(|r| !r.is_ok()).count();
            if c.output.is_none() {
                print!("{}", expcli::sweep::records_to_csv(&recs));
            }
            eprintln!("{} records, {failed} failed", recs.len());
            Ok(true)
        }
        Cmd::Rate { csv, column } => {
            let f = fit_rate(csv, Column::parse(column)?)?;
            println!("{}", serde_json::to_string_pretty(&f)?);
            Ok(true)
        }
        Cmd::Verify { suite, mutate_gradient } => {
            let suites = Suite::select(suite)?;
            let mutate = match mutate_gradient.as_deref() {
                None => None,
                Some("gate-score") => Some(GradientTerm::GateScore),
                Some("expert-value") => Some(GradientTerm::ExpertValue),
                Some("log-weight") => Some(GradientTerm::LogWeight),
                Some(other) => return Err(CliError::Usage(format!("unknown gradient term `{other}`"))),
            };
            let report = verify(&suites, &VerifyOptions { mutate_gradient: mutate })?;
            for c in &report.checks {
                println!("{c}");
            }
            Ok(report.passed())
        }
        Cmd::MergeDemo {
            dim,
            heads,
            rank,
            tokens,
        } => {
            if *heads == 0 || dim % heads != 0 || *rank == 0 || *rank > dim / heads {
                return Err(CliError::Usage("need heads | dim and 1 <= rank <= dim/heads".into()));
            }
            let mut rng = RngStream::new(cli.seed.unwrap_or(0), 0);
            let dh = dim / heads;
            let w = MsaWeights::random(*dim, *heads, &mut rng)?;
            let x = TokenSequence::random(*tokens, *dim, &mut rng)?;
            let nets: Vec<_> = (0..*heads)
                .map(|_| RepLoraMlp::sample(*rank, *dim, dh, DEFAULT_HIDDEN, Activation::SIGMOID, &mut rng))
                .collect();
            let mlp = nets
                .iter()
                .map(|p| HeadAdapter::from_replora(p, 1.0))
                .collect::<replora_core::Result<Vec<_>>>()?;
            let merged = nets
                .iter()
                .map(|p| merge_and_discard(p))
                .collect::<replora_core::Result<Vec<_>>>()?;
            let plain: Vec<_> = merged
                .iter()
                .map(|f| HeadAdapter {
                    b_q: f.b_q.clone(),
                    a_q: f.a_q.clone(),
                    b_v: f.b_v.clone(),
                    a_v: f.a_v.clone(),
                    scale: 1.0,
                })
                .collect();
            let y = lora_msa_forward(&x, &w, &mlp)?;
            let d1 = y.max_abs_diff(&lora_msa_forward(&x, &w, &plain)?)?;
            let d2 = y.max_abs_diff(&msa_forward(&x, &merge_adapter(&w, &plain)?)?)?;
            println!("mlp vs merged factors: max |diff| = {d1:e}");
            println!("adapted vs merged base weights: max |diff| = {d2:e}");
            if let Some(o) = &cli.out {
                fs::write(o, serde_json::to_string_pretty(&merged)?)?;
            }
            Ok(d1 <= 1e-12 && d2 <= 1e-12)
        }
        Cmd::Plotdata { csv, column } => {
            let recs = expcli::sweep::read_records(csv)?;
            emit(cli.out.as_deref(), &plotdata(&recs, Column::parse(column)?))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
