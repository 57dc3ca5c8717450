use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::optimize::BEST_SO_FAR;
use crate::output::{self, Log};
use crate::Failure;

pub const REPORT: &str = "report.csv";

/// Expands each argument into run directories: itself if it holds a
/// best-so-far file, else its immediate subdirectories that do (sorted).
pub fn collect_runs(args: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for arg in args {
        if arg.join(BEST_SO_FAR).is_file() {
            runs.push(arg.clone());
            continue;
        }
        if !arg.is_dir() {
            bail!(flowbo::Error::Config(format!("{} is not a run directory", arg.display())));
        }
        let mut found: Vec<PathBuf> = fs::read_dir(arg)
            .with_context(|| format!("reading {}", arg.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(BEST_SO_FAR).is_file())
            .collect();
        if found.is_empty() {
            bail!(flowbo::Error::Config(format!(
                "{} contains no {BEST_SO_FAR}",
                arg.display()
            )));
        }
        found.sort();
        runs.extend(found);
    }
    Ok(runs)
}

pub fn read_curve(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut curve = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let value = line
            .split(',')
            .nth(1)
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| {
                flowbo::Error::Config(format!("{} line {}: expected call_index,best_y", path.display(), i + 1))
            })?;
        curve.push(value);
    }
    Ok(curve)
}

/// Per-call mean and standard error across curves. Shorter curves are
/// carried forward at their final value.
pub fn aggregate(curves: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    let n = curves.len() as f64;
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = curves
                .iter()
                .filter_map(|c| c.get(i).or_else(|| c.last()).copied())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let se = if vals.len() < 2 {
                0.0
            } else {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() as f64 - 1.0);
                (var / n).sqrt()
            };
            (mean, se)
        })
        .collect()
}

pub fn run(args: &[PathBuf], output_dir: &Path, log: &Log) -> Result<(), Failure> {
    let runs = collect_runs(args)?;
    let curves = runs
        .iter()
        .map(|r| read_curve(&r.join(BEST_SO_FAR)))
        .collect::<Result<Vec<_>>>()?;
    let stats = aggregate(&curves);
    output::ensure_dir(output_dir)?;
    let n = curves.len();
    output::write_csv(
        &output_dir.join(REPORT),
        "call_index,mean_best_y,stderr_best_y,n_runs",
        stats.iter().enumerate().map(|(i, (m, s))| format!("{i},{m},{s},{n}")),
    )?;
    log.info(format!("merged {n} runs into {}", output_dir.join(REPORT).display()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_curve_is_its_own_mean() {
        let stats = aggregate(&[vec![0.1, 0.5, 0.5]]);
        assert_eq!(stats, vec![(0.1, 0.0), (0.5, 0.0), (0.5, 0.0)]);
    }

    #[test]
    fn identical_runs_have_zero_error() {
        let c = vec![0.2, 0.4, 0.9];
        let stats = aggregate(&vec![c.clone(); 5]);
        for ((m, s), v) in stats.iter().zip(&c) {
            assert!((m - v).abs() < 1e-15);
            assert_eq!(*s, 0.0);
        }
    }

    #[test]
    fn constants_average_to_themselves_and_forward_fill() {
        let stats = aggregate(&[vec![3.0, 3.0], vec![3.0]]);
        assert_eq!(stats, vec![(3.0, 0.0), (3.0, 0.0)]);
        let stats = aggregate(&[vec![0.0, 1.0], vec![2.0, 3.0]]);
        assert_eq!(stats[1].0, 2.0);
        assert!((stats[1].1 - 1.0).abs() < 1e-12);
    }
}
