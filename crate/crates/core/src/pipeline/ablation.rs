use std::fmt::Write as _;
use std::time::Instant;

use super::model::build_model;
use super::train::train;
use crate::config::{AblationName, LossVariant, Mode, ModelConfig};
use crate::datapack::FeatureSample;
use crate::error::Result;

/// One training run of the matrix. `variant` is an ablation name
/// (`full`, `no-escm`, ...) or a loss variant (`c_t_only`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: String,
    pub mode: Mode,
    pub seed: u64,
    pub accuracy: f64,
    pub epochs_run: usize,
    pub wall_seconds: f64,
}

/// Seed-averaged accuracies of one table row.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub fully: Option<f64>,
    pub weakly: Option<f64>,
}

pub const CSV_HEADER: &str = "variant,mode,seed,accuracy,epochs_run,wall_seconds";

fn run_one(cfg: &ModelConfig, variant: &str, train_set: &[FeatureSample], val: &[FeatureSample]) -> Result<AblationRun> {
    let start = Instant::now();
    let out = train(build_model(cfg)?, train_set, val)?;
    let run = AblationRun {
        variant: variant.to_string(),
        mode: cfg.mode,
        seed: cfg.train.seed,
        accuracy: out.best_val,
        epochs_run: out.epochs_run,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    log::info!(
        "{} {} seed {}: accuracy {:.4} after {} epochs",
        run.variant,
        run.mode,
        run.seed,
        run.accuracy,
        run.epochs_run
    );
    Ok(run)
}

/// Structural ablations x both settings x seeds.
pub fn ablation_matrix(
    base: &ModelConfig,
    names: &[AblationName],
    modes: &[Mode],
    seeds: &[u64],
    train_set: &[FeatureSample],
    val: &[FeatureSample],
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for &name in names {
        for &mode in modes {
            for &seed in seeds {
                let mut cfg = *base;
                cfg.ablation = name.ablation();
                cfg.mode = mode;
                cfg.variant = LossVariant::Full;
                cfg.train.seed = seed;
                runs.push(run_one(&cfg, name.as_str(), train_set, val)?);
            }
        }
    }
    Ok(runs)
}

/// Objective variants of both settings on the full model.
pub fn loss_matrix(base: &ModelConfig, seeds: &[u64], train_set: &[FeatureSample], val: &[FeatureSample]) -> Result<Vec<AblationRun>> {
    let grid = [
        (Mode::Fully, LossVariant::CtOnly),
        (Mode::Fully, LossVariant::CeAvps),
        (Mode::Fully, LossVariant::Full),
        (Mode::Weakly, LossVariant::BceOnly),
        (Mode::Weakly, LossVariant::Full),
    ];
    let mut runs = Vec::new();
    for (mode, variant) in grid {
        for &seed in seeds {
            let mut cfg = *base;
            cfg.ablation = AblationName::Full.ablation();
            cfg.mode = mode;
            cfg.variant = variant;
            cfg.train.seed = seed;
            runs.push(run_one(&cfg, &variant.to_string(), train_set, val)?);
        }
    }
    Ok(runs)
}

pub fn to_csv(runs: &[AblationRun]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{},{:.3}",
            r.variant, r.mode, r.seed, r.accuracy, r.epochs_run, r.wall_seconds
        );
    }
    out
}

pub fn mean_accuracy(runs: &[AblationRun], variant: &str, mode: Mode) -> Option<f64> {
    let xs: Vec<f64> = runs
        .iter()
        .filter(|r| r.variant == variant && r.mode == mode)
        .map(|r| r.accuracy)
        .collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |a| format!("{:.1}", 100.0 * a))
}

/// Rows in the structural-ablation table order.
pub fn table2_rows(runs: &[AblationRun]) -> Vec<AblationRow> {
    AblationName::ALL
        .iter()
        .map(|n| AblationRow {
            label: n.table_label().to_string(),
            fully: mean_accuracy(runs, n.as_str(), Mode::Fully),
            weakly: mean_accuracy(runs, n.as_str(), Mode::Weakly),
        })
        .collect()
}

pub fn table2(runs: &[AblationRun]) -> String {
    let rows = table2_rows(runs);
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("Method".len());
    let mut out = format!("{:<w$}  {:>16}  {:>17}\n", "Method", "Fully-supervised", "Weakly-supervised");
    for r in rows {
        let _ = writeln!(out, "{:<w$}  {:>16}  {:>17}", r.label, cell(r.fully), cell(r.weakly));
    }
    out
}

pub fn table3(runs: &[AblationRun]) -> String {
    let rows = [
        ("Fully", "L_c+L_t", LossVariant::CtOnly, Mode::Fully),
        ("Fully", "L_ce+lambda*L_avps", LossVariant::CeAvps, Mode::Fully),
        ("Fully", "L_c+L_t+L_avps(Ours)", LossVariant::Full, Mode::Fully),
        ("Weakly", "L_bce", LossVariant::BceOnly, Mode::Weakly),
        ("Weakly", "2L_bce+L_s-bce(Ours)", LossVariant::Full, Mode::Weakly),
    ];
    let mut out = format!("{:<8}{:<24}{:>10}\n", "Setting", "Method", "VSCG");
    for (setting, label, variant, mode) in rows {
        let acc = mean_accuracy(runs, &variant.to_string(), mode);
        let _ = writeln!(out, "{setting:<8}{label:<24}{:>10}", cell(acc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(variant: &str, mode: Mode, seed: u64, accuracy: f64) -> AblationRun {
        AblationRun {
            variant: variant.into(),
            mode,
            seed,
            accuracy,
            epochs_run: 3,
            wall_seconds: 0.5,
        }
    }

    #[test]
    fn table2_has_four_rows_in_order() {
        let mut runs = Vec::new();
        for n in AblationName::ALL {
            for m in [Mode::Fully, Mode::Weakly] {
                runs.push(run(n.as_str(), m, 0, 0.5));
                runs.push(run(n.as_str(), m, 1, 0.7));
            }
        }
        let rows = table2_rows(&runs);
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["Full model(Ours)", "w/o ESCM", "w/o CERE", "w/o common CERE"]);
        assert!(rows.iter().all(|r| (r.fully.unwrap() - 0.6).abs() < 1e-12 && r.weakly.is_some()));
        let text = table2(&runs);
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(1).unwrap().contains("60.0"));
    }

    #[test]
    fn csv_layout() {
        let csv = to_csv(&[run("no-cere", Mode::Weakly, 4, 0.25)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some("no-cere,weakly,4,0.250000,3,0.500"));
    }

    #[test]
    fn table3_missing_rows_show_dash() {
        let text = table3(&[run("c_t_only", Mode::Fully, 0, 0.9)]);
        assert!(text.contains("90.0"));
        assert_eq!(text.matches(" -").count(), 4);
    }
}
