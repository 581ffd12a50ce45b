use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use replora_core::estimation::{fit, normalize_log_weights, LsProblem};
use replora_core::voronoi_metrics::{family_loss, l2_mu_error};
use replora_core::{gen_dataset, FamilyParams, FixedBackbone, RngStream};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const CSV_HEADER: &str = "n,trial,seed,family,loss_name,loss_value,l2_mu_error,final_objective,wall_ms,status";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub n: usize,
    pub trial: usize,
    pub seed: u64,
    pub family: String,
    pub loss_name: String,
    pub loss_value: f64,
    pub l2_mu_error: f64,
    pub final_objective: f64,
    pub wall_ms: u64,
    pub status: String,
}

impl SweepRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:?},{:?},{:?},{},{}",
            self.n,
            self.trial,
            self.seed,
            self.family,
            self.loss_name,
            self.loss_value,
            self.l2_mu_error,
            self.final_objective,
            self.wall_ms,
            self.status
        )
    }

    fn key(&self) -> (usize, usize, u64) {
        (self.n, self.trial, self.seed)
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of cell `(n, trial)`; independent of the family so that sweeps of
/// different families see the same data seeds.
pub fn cell_seed(seed: u64, n: usize, trial: usize) -> u64 {
    mix(mix(mix(seed) ^ n as u64) ^ trial as u64)
}

const TRUTH_STREAM: u64 = 0x7;

/// The true parameters, log-weights normalized to `logsumexp = 0`.
pub fn draw_truth(config: &ExperimentConfig, seed: u64) -> Result<FamilyParams> {
    let mut rng = RngStream::new(seed, TRUTH_STREAM);
    let mut t = config.spec(config.true_experts).sample(&mut rng, config.truth_scale)?;
    normalize_log_weights(&mut t);
    Ok(t)
}

pub fn backbone(config: &ExperimentConfig) -> Result<FixedBackbone> {
    Ok(FixedBackbone::random(config.dim, config.backbone_seed, config.identity_key)?)
}

fn mc_seed(config: &ExperimentConfig) -> u64 {
    mix(config.seed ^ 0x4D43)
}

/// Generates data for one cell, fits, and scores the fit.
pub fn run_cell(
    config: &ExperimentConfig,
    backbone: &FixedBackbone,
    fixed_truth: Option<&FamilyParams>,
    n: usize,
    trial: usize,
) -> SweepRecord {
    let seed = cell_seed(config.seed, n, trial);
    let start = Instant::now();
    let mut rec = SweepRecord {
        n,
        trial,
        seed,
        family: config.family.as_str().to_string(),
        loss_name: String::new(),
        loss_value: f64::NAN,
        l2_mu_error: f64::NAN,
        final_objective: f64::NAN,
        wall_ms: 0,
        status: "ok".into(),
    };
    let outcome = (|| -> Result<()> {
        let truth = match fixed_truth {
            Some(t) => t.clone(),
            None => draw_truth(config, seed)?,
        };
        let data = gen_dataset(
            backbone,
            &truth.to_measure()?,
            n,
            config.noise_std,
            config.input_dist,
            seed,
        )?;
        let problem = LsProblem::new(backbone.clone(), data, config.spec(config.fitted_experts), config.theta_box)?;
        let fitted = fit(&problem, &config.optimizer.fit_options(&truth, seed))?;
        let loss = family_loss(&fitted.raw_params, &truth, config.r_exp)?;
        rec.loss_name = loss.label();
        rec.loss_value = loss.value;
        rec.final_objective = fitted.final_objective;
        rec.l2_mu_error = l2_mu_error(
            backbone,
            &fitted.raw_params,
            &truth,
            config.mc_samples,
            config.input_dist,
            mc_seed(config),
        )?;
        Ok(())
    })();
    if let Err(e) = outcome {
        warn!("cell n={n} trial={trial} failed: {e}");
        rec.status = "failed".into();
    }
    if config.record_timing {
        rec.wall_ms = start.elapsed().as_millis() as u64;
    }
    rec
}

pub fn records_to_csv(records: &[SweepRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn read_records(path: &Path) -> Result<Vec<SweepRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header.join(",") != CSV_HEADER {
        return Err(CliError::Usage(format!(
            "{} does not have the sweep header `{CSV_HEADER}`",
            path.display()
        )));
    }
    rdr.deserialize().map(|r| r.map_err(CliError::from)).collect()
}

/// Completed records of a partially written file. A torn last line (from an
/// interrupted run) is ignored.
fn read_partial(path: &Path) -> Result<Vec<SweepRecord>> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    match lines.next().transpose()? {
        Some(h) if h == CSV_HEADER => {}
        _ => {
            return Err(CliError::Usage(format!(
                "{} exists but is not a sweep CSV",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        let text = format!("{CSV_HEADER}\n{line}\n");
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        match rdr.deserialize::<SweepRecord>().next() {
            Some(Ok(r)) => out.push(r),
            _ => warn!("skipping unreadable line in {}: {line}", path.display()),
        }
    }
    Ok(out)
}

fn sorted(records: impl IntoIterator<Item = SweepRecord>) -> Vec<SweepRecord> {
    let map: BTreeMap<_, _> = records.into_iter().map(|r| (r.key(), r)).collect();
    let mut v: Vec<_> = map.into_values().collect();
    v.sort_by_key(|r| (r.n, r.trial));
    v
}

/// Runs every `(n, trial)` cell on a pool of `workers` threads. With an
/// output path, records are appended as they finish, completed cells of an
/// existing file are skipped, and the file is finally rewritten sorted by
/// `(n, trial)`. The result does not depend on the worker count.
pub fn run_sweep(config: &ExperimentConfig, workers: usize) -> Result<Vec<SweepRecord>> {
    config.validate()?;
    let backbone = backbone(config)?;
    let fixed = if config.fixed_truth {
        Some(draw_truth(config, config.seed)?)
    } else {
        None
    };
    let out = config.output.as_deref();
    let mut done = Vec::new();
    if let Some(p) = out {
        if p.exists() {
            done = read_partial(p)?;
            let fam = config.family.as_str();
            if let Some(r) = done.iter().find(|r| r.family != fam) {
                return Err(CliError::Usage(format!(
                    "{} holds {} records; cannot resume a {fam} sweep into it",
                    p.display(),
                    r.family
                )));
            }
            info!("resuming: {} records already in {}", done.len(), p.display());
        } else {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, format!("{CSV_HEADER}\n"))?;
        }
    }
    let finished: std::collections::HashSet<_> = done.iter().map(|r| r.key()).collect();
    let cells: Vec<(usize, usize)> = config
        .n_grid
        .iter()
        .flat_map(|&n| (0..config.trials).map(move |t| (n, t)))
        .filter(|&(n, t)| !finished.contains(&(n, t, cell_seed(config.seed, n, t))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build worker pool: {e}")))?;
    let (tx, rx) = mpsc::channel::<SweepRecord>();
    let new_records = std::thread::scope(|scope| -> Result<Vec<SweepRecord>> {
        let writer = scope.spawn(move || -> Result<Vec<SweepRecord>> {
            let mut file = match out {
                Some(p) => Some(OpenOptions::new().append(true).open(p)?),
                None => None,
            };
            let mut got = Vec::new();
            for rec in rx {
                if let Some(f) = file.as_mut() {
                    writeln!(f, "{}", rec.csv_line())?;
                    f.flush()?;
                }
                got.push(rec);
            }
            Ok(got)
        });
        pool.install(|| {
            cells.par_iter().for_each_with(tx, |tx, &(n, t)| {
                let rec = run_cell(config, &backbone, fixed.as_ref(), n, t);
                let _ = tx.send(rec);
            })
        });
        writer.join().expect("writer thread panicked")
    })?;
    let all = sorted(done.into_iter().chain(new_records));
    if let Some(p) = out {
        let tmp = p.with_extension("csv.tmp");
        fs::write(&tmp, records_to_csv(&all))?;
        fs::rename(&tmp, p)?;
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InitKind, OptimizerConfig};

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            n_grid: vec![60, 120],
            trials: 2,
            mc_samples: 500,
            optimizer: OptimizerConfig {
                steps: 30,
                restarts: 1,
                ..OptimizerConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn cell_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for n in [250, 500, 1000] {
            for t in 0..20 {
                assert!(seen.insert(cell_seed(1, n, t)));
            }
        }
    }

    #[test]
    fn oracle_noiseless_cell_is_exact() {
        let c = ExperimentConfig {
            n_grid: vec![100],
            trials: 1,
            noise_std: 0.0,
            optimizer: OptimizerConfig {
                init: InitKind::Oracle,
                steps: 5,
                restarts: 1,
                ..OptimizerConfig::default()
            },
            mc_samples: 1000,
            ..ExperimentConfig::default()
        };
        let r = run_sweep(&c, 1).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].is_ok());
        assert!(r[0].loss_value <= 1e-8, "{}", r[0].loss_value);
        assert!(r[0].l2_mu_error <= 1e-8, "{}", r[0].l2_mu_error);
        assert_eq!(r[0].loss_name, "D2");
    }

    #[test]
    fn csv_roundtrip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let c = ExperimentConfig {
            output: Some(path.clone()),
            ..tiny()
        };
        let full = run_sweep(&c, 2).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(read_records(&path).unwrap(), full);

        // Drop the last two records plus a torn line; a rerun restores them.
        let text = String::from_utf8(bytes.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let partial = format!("{}\n{}", lines[..lines.len() - 2].join("\n"), "120,1,99");
        fs::write(&path, partial).unwrap();
        run_sweep(&c, 1).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn failed_cells_are_recorded() {
        let c = tiny();
        let wrong = draw_truth(
            &ExperimentConfig {
                family: replora_core::Family::FreeLowRank,
                ..tiny()
            },
            0,
        )
        .unwrap();
        let r = run_cell(&c, &backbone(&c).unwrap(), Some(&wrong), 60, 0);
        assert_eq!(r.status, "failed");
        assert!(r.loss_value.is_nan());
        assert!(r.csv_line().ends_with(",NaN,NaN,NaN,0,failed"));
    }
}
