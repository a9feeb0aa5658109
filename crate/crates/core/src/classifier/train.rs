//! Training loop, evaluation, run manifests and metric files.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{self, Batch, Dataset, DatasetSpec, ImageSet, CIFAR_MEAN, CIFAR_STD, DIGEST_SEED};
use super::model::{Classifier, ClassifierConfig};
use crate::autodiff::Tape;
use crate::mod_laws::ModRegime;
use crate::nn::{cosine_lr, AdamW, OptConfig, ParamSet};
use crate::{par, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ClassifierConfig,
    pub data: DatasetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub opt: OptConfig,
    pub seed: u64,
    /// Single-threaded kernels and zeroed wall-clock columns.
    pub deterministic: bool,
    /// Build batches on a background thread.
    pub prefetch: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ClassifierConfig::default(),
            data: DatasetSpec::default(),
            epochs: 5,
            batch_size: 64,
            opt: OptConfig::default(),
            seed: 0,
            deterministic: false,
            prefetch: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.opt.lr >= 0.0) || !self.opt.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.opt.lr)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.train_limit.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let full = self.epochs * self.steps_per_epoch();
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub train_ms: f64,
    pub val_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub parallel_feature: bool,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: par::threads(),
            parallel_feature: cfg!(feature = "parallel"),
        }
    }
}

/// Record of one training run. Epoch records are only ever appended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub normalization: Normalization,
    pub environment: Environment,
    pub num_params: usize,
    pub steps: usize,
    /// FNV-1a digest of every training batch in order.
    pub token_digest: String,
    pub epochs: Vec<EpochRecord>,
}

impl RunManifest {
    pub fn final_val_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_acc)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub struct Trained {
    pub manifest: RunManifest,
    pub model: Classifier,
    pub params: ParamSet,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,acc,wall_ms";

/// `epoch,split,loss,acc,wall_ms` rows, two per epoch.
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{},train,{},{},{}", r.epoch, r.train_loss, r.train_acc, r.train_ms);
        let _ = writeln!(s, "{},val,{},{},{}", r.epoch, r.val_loss, r.val_acc, r.val_ms);
    }
    s
}

/// Mean loss and accuracy over `set` without recording gradients.
pub fn evaluate(model: &Classifier, ps: &ParamSet, set: &ImageSet, batch: usize, patch: usize) -> Result<(f64, f64)> {
    let order: Vec<usize> = (0..set.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for b in data::epoch_batches(set, &order, batch, patch) {
        let b = b?;
        let tape = Tape::no_grad();
        let p = ps.bind(&tape);
        let (logits, _) = model.forward(&p, &tape.constant(b.tokens))?;
        loss += logits.cross_entropy(&b.labels)?.value().item()? * b.labels.len() as f64;
        correct += count_correct(logits.value().data(), &b.labels);
    }
    let n = set.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

fn count_correct(logits: &[f64], labels: &[usize]) -> usize {
    let c = logits.len() / labels.len().max(1);
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits[i * c..(i + 1) * c];
            let arg = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            arg == y
        })
        .count()
}

fn elapsed_ms(t: Instant, deterministic: bool) -> f64 {
    if deterministic {
        0.0
    } else {
        t.elapsed().as_secs_f64() * 1e3
    }
}

/// Trains a classifier on `data`. With `out`, writes `manifest.json` after
/// every epoch, `metrics.csv` and a `checkpoint/` directory.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<Trained> {
    cfg.validate()?;
    if cfg.deterministic {
        par::sequential(|| train_inner(cfg, data, out))
    } else {
        train_inner(cfg, data, out)
    }
}

fn train_inner(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<Trained> {
    let spec = &data.spec;
    let patch = spec.patch_size;
    let (model, mut ps) = Classifier::new(&cfg.model, spec.patch_dim(), spec.num_tokens(), spec.num_classes, cfg.seed)?;
    let mut opt = AdamW::new(cfg.opt.clone(), &ps);
    let total = cfg.total_steps();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut manifest = RunManifest {
        model: cfg.model.kind.as_str().to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        normalization: Normalization {
            mean: CIFAR_MEAN,
            std: CIFAR_STD,
        },
        environment: Environment::current(),
        num_params: ps.num_scalars(),
        steps: 0,
        token_digest: String::new(),
        epochs: Vec::new(),
    };
    let mut digest = DIGEST_SEED;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if step >= total {
            break;
        }
        let t0 = Instant::now();
        let order = data::epoch_order(data.train.len(), cfg.seed, epoch);
        let batches: Box<dyn Iterator<Item = Result<Batch>>> = if cfg.prefetch {
            Box::new(data::prefetch_batches(data.train.clone(), order, cfg.batch_size, patch, 2).into_iter())
        } else {
            Box::new(data::epoch_batches(&data.train, &order, cfg.batch_size, patch))
        };
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in batches {
            if step >= total {
                break;
            }
            let batch = batch?;
            digest = data::digest(&batch.tokens, digest);
            let tape = Tape::new();
            let p = ps.bind(&tape);
            let (logits, diags) = model.forward(&p, &tape.constant(batch.tokens))?;
            let loss = logits.cross_entropy(&batch.labels)?;
            let lv = loss.value().item()?;
            if !lv.is_finite() {
                return Err(Error::numeric(nan_diagnostic(step, &diags)));
            }
            let grads = p.grads(&tape.backward(&loss)?);
            correct += count_correct(logits.value().data(), &batch.labels);
            seen += batch.labels.len();
            loss_sum += lv * batch.labels.len() as f64;
            drop(p);
            drop(tape);
            let lr = cosine_lr(cfg.opt.lr, cfg.opt.warmup_steps, total, step);
            opt.step(&mut ps, &grads, lr)?;
            step += 1;
        }
        let train_ms = elapsed_ms(t0, cfg.deterministic);
        let t1 = Instant::now();
        let (val_loss, val_acc) = evaluate(&model, &ps, &data.val, cfg.batch_size, patch)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_loss,
            val_acc,
            train_ms,
            val_ms: elapsed_ms(t1, cfg.deterministic),
        };
        log::info!(
            "{} seed {} epoch {}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            manifest.model,
            cfg.seed,
            epoch,
            rec.train_loss,
            rec.train_acc,
            rec.val_loss,
            rec.val_acc
        );
        manifest.epochs.push(rec);
        manifest.steps = step;
        manifest.token_digest = format!("{digest:016x}");
        if let Some(dir) = out {
            manifest.save(dir.join("manifest.json"))?;
        }
    }
    if let Some(dir) = out {
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&manifest.epochs))?;
        ps.save(dir.join("checkpoint"))?;
    }
    Ok(Trained {
        manifest,
        model,
        params: ps,
    })
}

fn nan_diagnostic(step: usize, diags: &[crate::co4::Co4Diagnostics]) -> String {
    match diags.last() {
        Some(d) => format!(
            "non-finite loss at step {step}: mean|R| = {}, mean|C| = {}, regime = {}",
            d.mean_abs_r,
            d.mean_abs_c,
            d.regime.as_str()
        ),
        None => format!(
            "non-finite loss at step {step}: no modulation diagnostics, regime = {}",
            ModRegime::AiAc.as_str()
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::data::load_dataset;
    use crate::classifier::model::ModelKind;
    use crate::co4::{Co4Config, LatentInit, Readout};

    fn tiny(kind: ModelKind) -> TrainConfig {
        let mut cfg = TrainConfig {
            data: DatasetSpec::blobs(2, 256, 128),
            epochs: 2,
            batch_size: 32,
            ..TrainConfig::default()
        };
        cfg.model.kind = kind;
        cfg.model.embed_dim = 16;
        cfg.model.co4 = Co4Config {
            variant: LatentInit::ProjectionInit,
            readout: Readout::MlpOnly,
            mlp_hidden: 32,
            ..Co4Config::default()
        };
        cfg.model.vit.mlp_hidden = 32;
        cfg.opt.lr = 3e-3;
        cfg
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut cfg = tiny(ModelKind::Co4);
        cfg.opt.lr = 0.0;
        cfg.epochs = 1;
        let data = load_dataset(&cfg.data).unwrap();
        let run = train(&cfg, &data, None).unwrap();
        let (_, init) = Classifier::new(&cfg.model, cfg.data.patch_dim(), cfg.data.num_tokens(), 2, cfg.seed).unwrap();
        assert_eq!(run.params.values(), init.values());
        assert_eq!(run.manifest.steps, 8);
    }

    #[test]
    fn repeated_runs_match() {
        let mut cfg = tiny(ModelKind::Co4);
        cfg.deterministic = true;
        let data = load_dataset(&cfg.data).unwrap();
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(a.manifest.final_train_loss(), b.manifest.final_train_loss());
        cfg.deterministic = false;
        cfg.prefetch = true;
        let c = train(&cfg, &data, None).unwrap();
        assert!((a.manifest.final_train_loss() - c.manifest.final_train_loss()).abs() < 1e-9);
    }

    #[test]
    fn paired_models_see_identical_tokens() {
        let co4 = tiny(ModelKind::Co4);
        let vit = tiny(ModelKind::Vit);
        let data = load_dataset(&co4.data).unwrap();
        let a = train(&co4, &data, None).unwrap();
        let b = train(&vit, &data, None).unwrap();
        assert_eq!(a.manifest.token_digest, b.manifest.token_digest);
        assert_eq!(a.manifest.steps, b.manifest.steps);
    }

    #[test]
    fn two_blob_problem_is_learned_within_200_steps() {
        let mut cfg = tiny(ModelKind::Co4);
        cfg.data = DatasetSpec::blobs(2, 6400, 400);
        cfg.epochs = 1;
        cfg.max_steps = Some(200);
        let data = load_dataset(&cfg.data).unwrap();
        let run = train(&cfg, &data, None).unwrap();
        assert!(run.manifest.steps <= 200);
        assert!(run.manifest.final_val_acc() >= 0.95, "val acc {}", run.manifest.final_val_acc());
    }

    #[test]
    fn outputs_are_written_and_reloadable() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(ModelKind::Vit);
        cfg.deterministic = true;
        let data = load_dataset(&cfg.data).unwrap();
        let run = train(&cfg, &data, Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 1 + 2 * cfg.epochs);
        assert!(lines[1].ends_with(",0"));
        let m = RunManifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(m, run.manifest);
        let mut ps = run.params.clone();
        ps.get_mut(crate::nn::ParamSet::ids(&run.params).next().unwrap()).data_mut()[0] = 99.0;
        ps.load(dir.path().join("checkpoint")).unwrap();
        assert_eq!(ps.values(), run.params.values());
    }

    #[test]
    fn diagnostic_names_the_regime() {
        let msg = nan_diagnostic(3, &[]);
        assert!(msg.contains("step 3") && msg.contains("AI_AC"));
    }
}
