//! Multi-run drivers: model comparison, modulation-law ablation, top-k and
//! head-count sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::ModelKind;
use super::train::{train, TrainConfig};
use crate::co4::{EqVariant, LatentInit};
use crate::{Error, Result};

/// Final metrics of one run in a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub key: String,
    pub label: String,
    pub seed: u64,
    pub val_acc: f64,
    pub train_loss: f64,
}

pub const GRID_HEADER: &str = "key,label,seed,val_acc,train_loss";

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = format!("{GRID_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.key, r.label, r.seed, r.val_acc, r.train_loss);
    }
    s
}

/// Runs every configuration on every seed, configurations outermost.
pub fn run_grid(configs: &[(String, String, TrainConfig)], seeds: &[u64], data: &Dataset) -> Result<Vec<GridRow>> {
    let mut rows = Vec::with_capacity(configs.len() * seeds.len());
    for (key, label, cfg) in configs {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let run = train(&c, data, None)?;
            rows.push(GridRow {
                key: key.clone(),
                label: label.clone(),
                seed,
                val_acc: run.manifest.final_val_acc(),
                train_loss: run.manifest.final_train_loss(),
            });
        }
    }
    Ok(rows)
}

/// Accuracy of `key` on `seed`.
pub fn lookup(rows: &[GridRow], key: &str, seed: u64) -> Option<f64> {
    rows.iter().find(|r| r.key == key && r.seed == seed).map(|r| r.val_acc)
}

pub fn mean_acc(rows: &[GridRow], key: &str) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.key == key).map(|r| r.val_acc).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Parses a comma-separated list of variant ids or names; `all` selects
/// every variant.
pub fn parse_variants(list: &str) -> Result<Vec<EqVariant>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(EqVariant::ALL.to_vec());
    }
    let v = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(EqVariant::parse)
        .collect::<Result<Vec<_>>>()?;
    if v.is_empty() {
        return Err(Error::config("empty variant list"));
    }
    Ok(v)
}

/// Co4 configurations differing only in the modulation law. The base is
/// switched to learned latents, which the variants require.
pub fn ablation_configs(base: &TrainConfig, variants: &[EqVariant]) -> Vec<(String, String, TrainConfig)> {
    variants
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            c.model.kind = ModelKind::Co4;
            c.model.co4.variant = LatentInit::NormalInit;
            c.model.co4.eq_variant = v;
            (v.id().to_string(), v.name().to_string(), c)
        })
        .collect()
}

pub fn ablate(base: &TrainConfig, variants: &[EqVariant], seeds: &[u64], data: &Dataset) -> Result<Vec<GridRow>> {
    run_grid(&ablation_configs(base, variants), seeds, data)
}

pub fn k_sweep_configs(base: &TrainConfig, ks: &[usize]) -> Vec<(String, String, TrainConfig)> {
    ks.iter()
        .map(|&k| {
            let mut c = base.clone();
            c.model.kind = ModelKind::Co4;
            c.model.co4.readout = crate::co4::Readout::TopkAttn;
            c.model.co4.k = k;
            (k.to_string(), format!("k={k}"), c)
        })
        .collect()
}

pub fn heads_configs(base: &TrainConfig, heads: &[usize]) -> Vec<(String, String, TrainConfig)> {
    heads
        .iter()
        .map(|&h| {
            let mut c = base.clone();
            c.model.co4.heads = h;
            c.model.vit.heads = h;
            (h.to_string(), format!("heads={h}"), c)
        })
        .collect()
}

/// Co4 and ViT runs sharing data order, optimizer and width.
pub fn comparison_configs(co4: &TrainConfig) -> Vec<(String, String, TrainConfig)> {
    let mut vit = co4.clone();
    vit.model.kind = ModelKind::Vit;
    let mut c = co4.clone();
    c.model.kind = ModelKind::Co4;
    vec![("co4".into(), "co4".into(), c), ("vit".into(), "vit".into(), vit)]
}

/// Whether accuracy never rises again once `k` passes the best value.
pub fn non_increasing_after_peak(acc_by_k: &[f64]) -> bool {
    let Some(peak) = (0..acc_by_k.len()).max_by(|&a, &b| acc_by_k[a].total_cmp(&acc_by_k[b]).then(b.cmp(&a))) else {
        return true;
    };
    acc_by_k[peak..].windows(2).all(|w| w[1] <= w[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::data::{load_dataset, DatasetSpec};

    #[test]
    fn variant_parsing() {
        assert_eq!(parse_variants("all").unwrap().len(), 5);
        assert_eq!(parse_variants("1,3").unwrap(), vec![EqVariant::Canonical, EqVariant::CrossContext]);
        assert!(matches!(parse_variants("1,9"), Err(Error::Config(_))));
        assert!(matches!(parse_variants(""), Err(Error::Config(_))));
        let cfgs = ablation_configs(&TrainConfig::default(), &EqVariant::ALL);
        let keys: Vec<&str> = cfgs.iter().map(|c| c.0.as_str()).collect();
        assert_eq!(keys, ["1", "2", "3", "4", "5"]);
        assert!(cfgs.iter().all(|c| c.2.model.co4.variant == LatentInit::NormalInit));
    }

    #[test]
    fn peak_shape() {
        assert!(non_increasing_after_peak(&[0.5, 0.7, 0.6, 0.6, 0.4]));
        assert!(!non_increasing_after_peak(&[0.5, 0.7, 0.6, 0.65]));
        assert!(non_increasing_after_peak(&[]));
    }

    #[test]
    fn tiny_ablation_grid() {
        let mut base = TrainConfig {
            data: DatasetSpec::blobs(2, 64, 32),
            epochs: 1,
            batch_size: 32,
            ..TrainConfig::default()
        };
        base.model.embed_dim = 8;
        base.model.co4.mlp_hidden = 8;
        base.model.co4.k = 2;
        let data = load_dataset(&base.data).unwrap();
        let rows = ablate(&base, &EqVariant::ALL, &[1, 2], &data).unwrap();
        assert_eq!(rows.len(), 10);
        let csv = grid_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), GRID_HEADER);
        assert!(csv.lines().nth(1).unwrap().starts_with("1,canonical,1,"));
        assert!(lookup(&rows, "5", 2).is_some());
        assert!((0.0..=1.0).contains(&mean_acc(&rows, "3")));
    }
}
