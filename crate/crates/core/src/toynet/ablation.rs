use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::config::{ToyNetConfig, TrainConfig, Variant};
use super::eval::evaluate_net;
use super::net::ToyNet;
use super::synth::{synth_dataset, DataSpec, Style};
use super::train::{train, TrainLog};

pub const ABLATION_CSV_HEADER: &str = "variant,seed,miou";
pub const SUMMARY_CSV_HEADER: &str = "variant,seeds,mean_miou,std_miou";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    /// The variant field is overridden per run.
    pub net: ToyNetConfig,
    /// The seed field is overridden per run.
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub style: Style,
    pub train_count: usize,
    pub test_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation (`n − 1`); 0 for a single seed.
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn summary(&self) -> Vec<VariantSummary> {
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        variants
            .into_iter()
            .map(|v| {
                let xs: Vec<f64> = self.rows.iter().filter(|r| r.variant == v).map(|r| r.miou).collect();
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let std = if xs.len() > 1 {
                    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                VariantSummary { variant: v, seeds: xs.len(), mean, std }
            })
            .collect()
    }

    pub fn mean(&self, variant: Variant) -> Option<f64> {
        self.summary().into_iter().find(|s| s.variant == variant).map(|s| s.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.variant, r.seed, r.miou).unwrap();
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_CSV_HEADER}\n");
        for s in self.summary() {
            writeln!(out, "{},{},{},{}", s.variant, s.seeds, s.mean, s.std).unwrap();
        }
        out
    }
}

/// Training and held-out sets for one seed: the test scenes follow the training
/// scenes under the same seed.
pub fn seed_data(cfg: &AblationConfig, seed: u64) -> (DataSpec, DataSpec) {
    let train = DataSpec { style: cfg.style, seed, count: cfg.train_count, start: 0 };
    (train, train.following(cfg.test_count))
}

/// Trains and evaluates every variant on every seed. Within a seed all variants
/// see the same data, schedule and shared initial weights.
pub fn ablation_run(cfg: &AblationConfig, mut on_row: impl FnMut(&AblationRow)) -> Result<AblationReport> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() || cfg.train_count == 0 || cfg.test_count == 0 {
        return Err(Error::Config("ablation needs variants, seeds, training and test scenes".into()));
    }
    for v in &cfg.variants {
        cfg.net.with_variant(*v).validate()?;
    }
    let mut report = AblationReport::default();
    for &seed in &cfg.seeds {
        let (train_spec, test_spec) = seed_data(cfg, seed);
        let train_set = synth_dataset(&train_spec, cfg.net.input_size, cfg.net.classes)?;
        let test_set = synth_dataset(&test_spec, cfg.net.input_size, cfg.net.classes)?;
        for &variant in &cfg.variants {
            let mut net = ToyNet::new(cfg.net.with_variant(variant), seed)?;
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            train(&mut net, &train_set, &tc, &mut TrainLog::default())?;
            let row = AblationRow { variant, seed, miou: evaluate_net(&net, &test_set)?.miou };
            on_row(&row);
            report.rows.push(row);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let rows = [0.5, 0.7, 0.6]
            .iter()
            .enumerate()
            .map(|(i, &m)| AblationRow { variant: Variant::Fdl, seed: i as u64, miou: m })
            .chain(std::iter::once(AblationRow { variant: Variant::Baseline, seed: 0, miou: 0.4 }))
            .collect();
        let r = AblationReport { rows };
        let s = r.summary();
        assert_eq!(s.len(), 2);
        assert!((s[0].mean - 0.6).abs() < 1e-15);
        assert!((s[0].std - 0.1).abs() < 1e-15);
        assert_eq!(s[1].std, 0.0);
        assert_eq!(r.to_csv().lines().count(), 5);
        assert!(r.summary_csv().starts_with("variant,seeds,mean_miou,std_miou\nfdl,3,"));
    }

    #[test]
    fn single_run_matches_direct_evaluation() {
        let net_cfg = ToyNetConfig {
            input_size: 16,
            widths: [4, 4, 8],
            ppm_channels: 2,
            context_channels: 8,
            fusion_channels: 8,
            dct_block: 2,
            classes: 3,
            ..ToyNetConfig::default()
        };
        let cfg = AblationConfig {
            net: net_cfg.clone(),
            train: TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() },
            variants: vec![Variant::Fdl],
            seeds: vec![5],
            style: Style::Night,
            train_count: 4,
            test_count: 3,
        };
        let report = ablation_run(&cfg, |_| {}).unwrap();
        assert_eq!(report.rows.len(), 1);

        let (tr, te) = seed_data(&cfg, 5);
        let mut net = ToyNet::new(net_cfg.with_variant(Variant::Fdl), 5).unwrap();
        let train_set = synth_dataset(&tr, 16, 3).unwrap();
        let tc = TrainConfig { seed: 5, ..cfg.train.clone() };
        train(&mut net, &train_set, &tc, &mut TrainLog::default()).unwrap();
        let direct = evaluate_net(&net, &synth_dataset(&te, 16, 3).unwrap()).unwrap().miou;
        assert_eq!(report.rows[0].miou, direct);
    }
}
