//! Inference runtime scaling and MAC accounting.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::co4::{Co4Config, Co4Layer, LatentInit, Readout};
use crate::macs::{self, MacCounts, MacModel, Term};
use crate::nn::{ParamSet, Params};
use crate::tensor::Tensor;
use crate::vit::Mhsa;
use crate::{par, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchModel {
    /// Learned latents with top-k attention readout.
    Co4Topk,
    /// Projection latents with MLP readout.
    Co4Mlp,
    /// One multi-head self-attention sublayer.
    Vit,
}

impl BenchModel {
    pub const ALL: [BenchModel; 3] = [BenchModel::Co4Topk, BenchModel::Co4Mlp, BenchModel::Vit];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchModel::Co4Topk => "co4_topk",
            BenchModel::Co4Mlp => "co4_mlp",
            BenchModel::Vit => "vit",
        }
    }
}

impl std::str::FromStr for BenchModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BenchModel::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown bench model {s:?}; expected co4_topk, co4_mlp or vit")))
    }
}

/// How `k` follows `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRule {
    Fixed(usize),
    Sqrt,
}

impl KRule {
    pub fn k(self, n: usize) -> usize {
        match self {
            KRule::Fixed(k) => k.min(n),
            KRule::Sqrt => ((n as f64).sqrt().ceil() as usize).min(n),
        }
    }
}

impl std::str::FromStr for KRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "sqrt" {
            return Ok(KRule::Sqrt);
        }
        s.trim()
            .parse()
            .map(KRule::Fixed)
            .map_err(|_| Error::config(format!("k rule must be 'sqrt' or an integer, got {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub model: BenchModel,
    pub ns: Vec<usize>,
    pub embed_dim: usize,
    pub k_rule: KRule,
    pub repetitions: usize,
    pub warmup: usize,
    pub batch: usize,
    pub seed: u64,
    /// Each timed sample repeats the forward pass until it spans this long.
    pub min_sample_ms: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: BenchModel::Co4Topk,
            ns: vec![256, 512, 1024, 2048, 4096],
            embed_dim: 128,
            k_rule: KRule::Sqrt,
            repetitions: 5,
            warmup: 1,
            batch: 1,
            seed: 0,
            min_sample_ms: 20.0,
        }
    }
}

impl BenchConfig {
    /// `k` used at length `n`; 0 for the attention baseline, which has none.
    pub fn k_for(&self, n: usize) -> usize {
        match self.model {
            BenchModel::Vit => 0,
            _ => self.k_rule.k(n),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ns.contains(&0) || self.ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("N sweep must be non-empty, positive and strictly ascending"));
        }
        if self.repetitions < 5 {
            return Err(Error::config(format!("repetitions must be >= 5, got {}", self.repetitions)));
        }
        if self.embed_dim == 0 || self.batch == 0 {
            return Err(Error::config("embed_dim and batch must be positive"));
        }
        Ok(())
    }
}

/// A single benchmarked layer and its parameters.
pub struct BenchNet {
    params: ParamSet,
    layer: Layer,
}

enum Layer {
    Co4(Co4Layer),
    Vit(Mhsa),
}

impl BenchNet {
    pub fn new(model: BenchModel, n: usize, e: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layer = match model {
            BenchModel::Vit => Layer::Vit(Mhsa::new(&mut params, "attn", e, 1, &mut rng)),
            BenchModel::Co4Topk | BenchModel::Co4Mlp => {
                let cfg = co4_bench_config(model, n, e, k);
                Layer::Co4(Co4Layer::new(&mut params, "co4", cfg, &mut rng)?)
            }
        };
        Ok(BenchNet { params, layer })
    }

    fn forward<'t>(&self, p: &Params<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        match &self.layer {
            Layer::Co4(l) => Ok(l.forward(p, x)?.features),
            Layer::Vit(m) => Ok(m.forward(p, x)?.0),
        }
    }

    /// One inference pass without gradient recording.
    pub fn run(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        Ok(self.forward(&p, &tape.constant(x.clone()))?.value().clone())
    }
}

/// Layer configuration used for the Co4 benchmark models.
pub fn co4_bench_config(model: BenchModel, n: usize, e: usize, k: usize) -> Co4Config {
    let (variant, readout) = match model {
        BenchModel::Co4Mlp => (LatentInit::ProjectionInit, Readout::MlpOnly),
        _ => (LatentInit::NormalInit, Readout::TopkAttn),
    };
    Co4Config {
        embed_dim: e,
        num_tokens: n,
        k,
        variant,
        readout,
        mlp_hidden: 2 * e,
        ..Co4Config::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub n: usize,
    pub k: usize,
    pub inner_loops: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log(median) against log(N).
    pub slope: f64,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

fn bench_input(batch: usize, n: usize, e: usize, seed: u64) -> Tensor {
    Tensor::randn(&[batch, n, e], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xB5))
}

/// Times one model over the N sweep on the calling thread only.
pub fn bench_runtime(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    par::sequential(|| {
        let mut rows = Vec::with_capacity(cfg.ns.len());
        for &n in &cfg.ns {
            let k = cfg.k_for(n);
            let net = BenchNet::new(cfg.model, n, cfg.embed_dim, k, cfg.seed)?;
            let x = bench_input(cfg.batch, n, cfg.embed_dim, cfg.seed);
            for _ in 0..cfg.warmup {
                net.run(&x)?;
            }
            let t = Instant::now();
            net.run(&x)?;
            let once = t.elapsed().as_secs_f64() * 1e3;
            let inner = ((cfg.min_sample_ms / once.max(1e-6)).ceil() as usize).max(1);
            let mut samples = Vec::with_capacity(cfg.repetitions);
            for _ in 0..cfg.repetitions {
                let t = Instant::now();
                for _ in 0..inner {
                    net.run(&x)?;
                }
                samples.push(t.elapsed().as_secs_f64() * 1e3 / inner as f64);
            }
            samples.sort_by(f64::total_cmp);
            let row = BenchRow {
                model: cfg.model.as_str().to_string(),
                n,
                k,
                inner_loops: inner,
                median_ms: quantile(&samples, 0.5),
                p10_ms: quantile(&samples, 0.1),
                p90_ms: quantile(&samples, 0.9),
            };
            log::info!("{} N={n}: median {:.3} ms ({} inner loops)", row.model, row.median_ms, inner);
            rows.push(row);
        }
        let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.median_ms).collect();
        Ok(BenchReport {
            model: cfg.model.as_str().to_string(),
            slope: if rows.len() > 1 { loglog_slope(&xs, &ys) } else { f64::NAN },
            rows,
        })
    })
}

pub const RUNTIME_HEADER: &str = "model,n,k,inner_loops,median_ms,p10_ms,p90_ms";

pub fn runtime_csv(reports: &[BenchReport], deterministic: bool) -> String {
    let mut s = format!("{RUNTIME_HEADER}\n");
    for r in reports.iter().flat_map(|r| &r.rows) {
        if deterministic {
            let _ = writeln!(s, "{},{},{},0,0,0,0", r.model, r.n, r.k);
        } else {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.model, r.n, r.k, r.inner_loops, r.median_ms, r.p10_ms, r.p90_ms
            );
        }
    }
    s
}

/// Instrumented counts of one forward pass.
pub fn op_counts(model: BenchModel, n: usize, e: usize, k: usize, batch: usize, seed: u64) -> Result<MacCounts> {
    let net = BenchNet::new(model, n, e, k, seed)?;
    let x = bench_input(batch, n, e, seed);
    let (out, counts) = macs::measure(|| net.run(&x));
    out?;
    Ok(counts)
}

pub const OPCOUNTS_HEADER: &str = "model,n,k,term,macs";

pub fn opcounts_csv(rows: &[(BenchModel, usize, usize, MacCounts)]) -> String {
    let mut s = format!("{OPCOUNTS_HEADER}\n");
    for (m, n, k, c) in rows {
        for (term, v) in c.iter() {
            let _ = writeln!(s, "{},{n},{k},{},{v}", m.as_str(), term.name());
        }
    }
    s
}

/// One row of a MAC audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub term: String,
    pub counted: u64,
    pub modeled: u64,
}

impl AuditRow {
    pub fn rel_err(&self) -> f64 {
        (self.counted as f64 - self.modeled as f64).abs() / (self.modeled as f64).max(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacAudit {
    pub n: usize,
    pub e: usize,
    pub k: usize,
    pub rows: Vec<AuditRow>,
    pub counted_total: u64,
    pub modeled_total: u64,
    /// The closed form with unit constants, for reference.
    pub closed_form: u64,
    /// Work outside the modeled terms.
    pub unmodeled: Vec<(String, u64)>,
}

impl MacAudit {
    pub fn rel_err(&self) -> f64 {
        (self.counted_total as f64 - self.modeled_total as f64).abs() / self.modeled_total as f64
    }
}

/// Counts one single-head Co4 top-k forward pass (batch 1) and sets it
/// against the term-wise cost model.
pub fn mac_audit(n: usize, e: usize, k: usize, seed: u64) -> Result<MacAudit> {
    let counts = op_counts(BenchModel::Co4Topk, n, e, k, 1, seed)?;
    let model = macs::co4_term_model(n as u64, e as u64, k as u64, 1);
    let rows: Vec<AuditRow> = model
        .iter()
        .map(|&(term, modeled)| AuditRow {
            term: term.name().to_string(),
            counted: counts.get(term),
            modeled,
        })
        .collect();
    let unmodeled = [Term::Scoring, Term::Readout, Term::Other]
        .iter()
        .map(|&t| (t.name().to_string(), counts.get(t)))
        .collect();
    Ok(MacAudit {
        n,
        e,
        k,
        counted_total: rows.iter().map(|r| r.counted).sum(),
        modeled_total: rows.iter().map(|r| r.modeled).sum(),
        closed_form: macs::macs_estimate(MacModel::Co4, 1, n as u64, e as u64, k as u64, n as u64),
        rows,
        unmodeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let x = [256.0, 512.0, 1024.0, 2048.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.7)).collect();
        assert!((loglog_slope(&x, &y) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn quantiles() {
        let d = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&d, 0.5), 3.0);
        assert!((quantile(&d, 0.1) - 1.4).abs() < 1e-12);
        assert_eq!(quantile(&d, 1.0), 5.0);
    }

    #[test]
    fn config_checks() {
        let ok = BenchConfig::default();
        assert!(ok.validate().is_ok());
        assert!(BenchConfig {
            ns: vec![512, 256],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(BenchConfig {
            repetitions: 4,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert_eq!(KRule::Sqrt.k(200), 15);
        assert_eq!("sqrt".parse::<KRule>().unwrap(), KRule::Sqrt);
        assert_eq!("8".parse::<KRule>().unwrap(), KRule::Fixed(8));
        assert!("co4".parse::<BenchModel>().is_err());
    }

    #[test]
    fn small_sweep_runs_and_reports() {
        let cfg = BenchConfig {
            model: BenchModel::Vit,
            ns: vec![8, 16],
            embed_dim: 8,
            min_sample_ms: 0.5,
            ..BenchConfig::default()
        };
        let rep = bench_runtime(&cfg).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.rows.iter().all(|r| r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms));
        let csv = runtime_csv(&[rep], true);
        assert_eq!(
            csv,
            "model,n,k,inner_loops,median_ms,p10_ms,p90_ms\nvit,8,0,0,0,0,0\nvit,16,0,0,0,0,0\n"
        );
    }

    #[test]
    fn op_counts_are_deterministic() {
        for m in BenchModel::ALL {
            let a = op_counts(m, 32, 16, 6, 1, 1).unwrap();
            let b = op_counts(m, 32, 16, 6, 1, 1).unwrap();
            assert_eq!(a, b);
            assert!(a.total() > 0);
        }
        let mlp = op_counts(BenchModel::Co4Mlp, 32, 16, 6, 1, 1).unwrap();
        assert_eq!(mlp.get(Term::Attention), 0);
    }

    #[test]
    fn audit_terms() {
        let a = mac_audit(196, 64, 14, 3).unwrap();
        let get = |t: &str| a.rows.iter().find(|r| r.term == t).unwrap().clone();
        assert_eq!(get("projection").counted, get("projection").modeled);
        assert_eq!(get("modulation").counted, get("modulation").modeled);
        assert_eq!(get("attention").counted, get("attention").modeled);
        assert!(get("topk").counted <= get("topk").modeled + 14 * 14);
        assert!(a.rel_err() < 0.10);
    }
}
