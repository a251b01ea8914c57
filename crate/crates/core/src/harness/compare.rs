use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_metrics, train, ExperimentConfig, RegSection, Result};
use crate::rlcore::RegularizerKind;

/// Per-mode means over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: RegularizerKind,
    pub seeds: Vec<u64>,
    pub final_avg_at_k: f64,
    pub best_avg_at_k: f64,
    pub final_entropy: f64,
    pub final_response_length: f64,
    pub final_entropy_per_seed: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Trains every mode on every seed under `out_dir/<mode>_seed<s>` and writes
/// `comparison.csv` (one row per mode) and `trajectories.csv` (seed-mean
/// entropy and response length per mode and step).
///
/// A mode takes its default coefficient unless it is the base config's own
/// regularizer kind, in which case the base settings are kept.
pub fn compare(base: &ExperimentConfig, modes: &[RegularizerKind], seeds: &[u64], out_dir: &Path) -> Result<Vec<CompareRow>> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut traj = BufWriter::new(File::create(out_dir.join("trajectories.csv"))?);
    writeln!(traj, "mode,step,entropy,resp_len")?;
    for &mode in modes {
        let mut finals = Vec::new();
        let mut bests = Vec::new();
        let mut ents = Vec::new();
        let mut lens = Vec::new();
        let mut curves: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            if cfg.reg.kind != mode {
                cfg.reg = RegSection {
                    kind: mode,
                    ..RegSection::default()
                };
            }
            let dir = out_dir.join(format!("{mode}_seed{seed}"));
            let summary = train(&cfg, Some(&dir))?;
            finals.push(summary.final_avg_at_k);
            bests.push(summary.best_avg_at_k);
            ents.push(summary.final_entropy);
            lens.push(summary.final_response_length);
            for r in read_metrics(&dir.join("metrics.jsonl"))? {
                let e = curves.entry(r.step).or_insert((0.0, 0.0, 0));
                e.0 += r.mean_token_entropy;
                e.1 += r.mean_response_length;
                e.2 += 1;
            }
        }
        for (step, (e, l, n)) in curves {
            writeln!(traj, "{mode},{step},{},{}", e / n as f64, l / n as f64)?;
        }
        rows.push(CompareRow {
            mode,
            seeds: seeds.to_vec(),
            final_avg_at_k: mean(&finals),
            best_avg_at_k: mean(&bests),
            final_entropy: mean(&ents),
            final_response_length: mean(&lens),
            final_entropy_per_seed: ents,
        });
    }
    traj.flush()?;

    let mut csv = BufWriter::new(File::create(out_dir.join("comparison.csv"))?);
    writeln!(csv, "mode,n_seeds,final_avg_at_k,best_avg_at_k,final_entropy,final_resp_len")?;
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.mode,
            r.seeds.len(),
            r.final_avg_at_k,
            r.best_avg_at_k,
            r.final_entropy,
            r.final_response_length
        )?;
    }
    csv.flush()?;
    Ok(rows)
}
