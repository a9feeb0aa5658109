//! The Co4 block.
//!
//! Latent queries, keys and values (evidence) are modulated by the token
//! projections (context) and an optional belief state `mu`. The modulated
//! `Qm`, `Km`, `Vm` then feed either top-k attention over the most salient
//! tokens or a token-wise MLP on `Vm` alone.
//!
//! Two latent layouts are supported. With one latent per token the
//! modulation is elementwise. With fewer latents than tokens each latent is
//! broadcast against every token and the results are averaged over latents,
//! costing `l * N * E` per product.

mod topk;

pub use topk::{topk_indices, topk_select};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::sdpa;
use crate::autodiff::Var;
use crate::macs::{self, Term};
use crate::mod_laws::{classify_regime_amplitudes, ModRegime, RegimeThresholds};
use crate::nn::{LayerNorm, Linear, ParamId, ParamSet, Params};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentInit {
    /// Learned latents drawn from `N(0, latent_std^2)`.
    NormalInit,
    /// Latents are the token projections themselves.
    ProjectionInit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    TopkAttn,
    MlpOnly,
}

/// Token salience used to pick the top-k rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFn {
    /// L2 norm of the token's `Vm` row.
    VmNorm,
    /// `sum_e |Qm * Km|` over the token's row.
    QmKm,
}

/// Modulation equation sets compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqVariant {
    /// `Qm = Qx + Ql Kx`, `Km = Kx + Kl Qx`, `Vm = Vx^2 + 2Vx + Qm Km (1 + |Vl|)`.
    Canonical,
    /// `Qm = Ql + Ql Qx`, `Km = Kl + Kl Kx`, canonical `Vm`.
    SelfContext,
    /// `Qm = Ql + Ql Kx`, `Km = Kl + Kl Qx`, canonical `Vm`.
    CrossContext,
    /// Canonical `Qm`, `Km`; `Vm = Vx`.
    PlainValue,
    /// Canonical `Qm`, `Km`; `Vm = Vx + Vl Qm Km`.
    LinearValue,
}

impl EqVariant {
    pub const ALL: [EqVariant; 5] = [
        EqVariant::Canonical,
        EqVariant::SelfContext,
        EqVariant::CrossContext,
        EqVariant::PlainValue,
        EqVariant::LinearValue,
    ];

    pub fn id(self) -> u8 {
        match self {
            EqVariant::Canonical => 1,
            EqVariant::SelfContext => 2,
            EqVariant::CrossContext => 3,
            EqVariant::PlainValue => 4,
            EqVariant::LinearValue => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EqVariant::Canonical => "canonical",
            EqVariant::SelfContext => "self_context",
            EqVariant::CrossContext => "cross_context",
            EqVariant::PlainValue => "plain_value",
            EqVariant::LinearValue => "linear_value",
        }
    }

    /// Accepts the numeric id (1-5) or the name.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        EqVariant::ALL
            .into_iter()
            .find(|v| s == v.id().to_string() || s.eq_ignore_ascii_case(v.name()))
            .ok_or_else(|| Error::config(format!("unknown modulation variant {s:?}; expected 1-5")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Co4Config {
    pub embed_dim: usize,
    pub num_tokens: usize,
    /// Number of latents; `None` means one per token.
    pub num_latents: Option<usize>,
    pub variant: LatentInit,
    pub readout: Readout,
    pub k: usize,
    /// Step size of the multiplicative belief update.
    pub alpha_mu: f64,
    pub iterations: usize,
    pub relu_cap: f64,
    /// Heads of the top-k readout attention.
    pub heads: usize,
    /// Enforce `k <= ceil(sqrt(N))`.
    pub strict_k: bool,
    /// Initial value of every belief-state entry.
    pub mu_init: f64,
    /// Belief-state entries are clamped to `[-mu_clip, mu_clip]`.
    pub mu_clip: f64,
    pub latent_std: f64,
    pub mlp_hidden: usize,
    pub score: ScoreFn,
    pub eq_variant: EqVariant,
    pub thresholds: RegimeThresholds,
}

impl Default for Co4Config {
    fn default() -> Self {
        Co4Config {
            embed_dim: 128,
            num_tokens: 64,
            num_latents: None,
            variant: LatentInit::NormalInit,
            readout: Readout::TopkAttn,
            k: 8,
            alpha_mu: 0.0,
            iterations: 1,
            relu_cap: 6.0,
            heads: 1,
            strict_k: false,
            mu_init: 0.0,
            mu_clip: 10.0,
            latent_std: 0.02,
            mlp_hidden: 256,
            score: ScoreFn::VmNorm,
            eq_variant: EqVariant::Canonical,
            thresholds: RegimeThresholds::default(),
        }
    }
}

impl Co4Config {
    pub fn latents(&self) -> usize {
        self.num_latents.unwrap_or(self.num_tokens)
    }

    /// One latent per token.
    pub fn is_elementwise(&self) -> bool {
        self.latents() == self.num_tokens
    }

    /// Single pass without belief dynamics.
    pub fn single_step(&self) -> bool {
        self.iterations == 1 && self.alpha_mu == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_tokens;
        let bad = |m: String| Err(Error::config(m));
        if self.embed_dim == 0 || n == 0 {
            return bad("embed_dim and num_tokens must be positive".into());
        }
        if self.readout == Readout::TopkAttn {
            if self.k == 0 || self.k > n {
                return bad(format!("k = {} must lie in 1..={n}", self.k));
            }
            let limit = (n as f64).sqrt().ceil() as usize;
            if self.strict_k && self.k > limit {
                return bad(format!("k = {} exceeds ceil(sqrt({n})) = {limit}", self.k));
            }
        }
        let l = self.latents();
        if l == 0 || l > n {
            return bad(format!("num_latents = {l} must lie in 1..={n}"));
        }
        if l < n && self.variant == LatentInit::ProjectionInit {
            return bad("fewer latents than tokens requires normal_init".into());
        }
        if self.variant == LatentInit::ProjectionInit && self.eq_variant != EqVariant::Canonical {
            return bad("equation variants apply to normal_init only".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.alpha_mu >= 0.0) || !self.alpha_mu.is_finite() {
            return bad(format!("alpha_mu must be finite and >= 0, got {}", self.alpha_mu));
        }
        if !(self.relu_cap > 0.0) {
            return bad(format!("relu_cap must be positive, got {}", self.relu_cap));
        }
        if !(self.mu_clip > 0.0) || !self.mu_init.is_finite() {
            return bad("mu_clip must be positive and mu_init finite".into());
        }
        if !(self.latent_std > 0.0) || self.mlp_hidden == 0 {
            return bad("latent_std and mlp_hidden must be positive".into());
        }
        Ok(())
    }
}

/// `N(0, std^2)` latents, deterministic per seed.
pub fn init_latents(shape: &[usize], std: f64, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Modulation with learned latents. `mu`, when present, is added to the
/// contexts `Qx` and `Kx` and to `Qm`, `Km` inside the value law.
#[allow(clippy::too_many_arguments)]
pub fn modulate_normal_init<'t>(
    qx: &Var<'t>,
    kx: &Var<'t>,
    vx: &Var<'t>,
    ql: &Var<'t>,
    kl: &Var<'t>,
    vl: &Var<'t>,
    mu: Option<&Var<'t>>,
    eq: EqVariant,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let plus_mu = |v: &Var<'t>| match mu {
        Some(m) => v.add(m),
        None => Ok(v.clone()),
    };
    let (cq, ck) = (plus_mu(qx)?, plus_mu(kx)?);
    let (qm, km) = match eq {
        EqVariant::SelfContext => (ql.add(&ql.mul(&cq)?)?, kl.add(&kl.mul(&ck)?)?),
        EqVariant::CrossContext => (ql.add(&ql.mul(&ck)?)?, kl.add(&kl.mul(&cq)?)?),
        _ => (cq.add(&ql.mul(&ck)?)?, ck.add(&kl.mul(&cq)?)?),
    };
    let vm = match eq {
        EqVariant::PlainValue => vx.clone(),
        EqVariant::LinearValue => vx.add(&vl.mul(&qm)?.mul(&km)?)?,
        _ => {
            let evidence = vx.square().add(&vx.mul_scalar(2.0))?;
            let coupling = plus_mu(&qm)?.mul(&plus_mu(&km)?)?;
            evidence.add(&coupling.mul(&vl.abs().add_scalar(1.0))?)?
        }
    };
    Ok((qm, km, vm))
}

/// Modulation with latents aliased to the projections. `mu`, when present,
/// is added to the contexts `Kx` and `Qx`.
pub fn modulate_projection_init<'t>(
    ql: &Var<'t>,
    kl: &Var<'t>,
    vl: &Var<'t>,
    qx: &Var<'t>,
    kx: &Var<'t>,
    mu: Option<&Var<'t>>,
    relu_cap: f64,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let plus_mu = |v: &Var<'t>| match mu {
        Some(m) => v.add(m),
        None => Ok(v.clone()),
    };
    let qm = ql.add(&ql.mul(&plus_mu(kx)?)?)?;
    let km = kl.add(&kl.mul(&plus_mu(qx)?)?)?;
    let raw = vl
        .square()
        .add(&vl.mul_scalar(2.0))?
        .add(&qm.mul(&km)?.mul(&vl.abs().add_scalar(1.0))?)?;
    let vm = raw.relu_alpha(relu_cap)?;
    Ok((qm, km, vm))
}

/// Aggregate prediction error `|Qm-Ql| + |Km-Kl| + |Vm-Vl|`.
pub fn prediction_error<'t>(m: [&Var<'t>; 3], l: [&Var<'t>; 3]) -> Result<Var<'t>> {
    let e = m[0].sub(l[0])?.abs();
    let e = e.add(&m[1].sub(l[1])?.abs())?;
    e.add(&m[2].sub(l[2])?.abs())
}

/// `mu <- clamp(mu * (1 + alpha E))`. `err` may carry extra broadcast axes
/// relative to `mu`; it is averaged down to `mu`'s shape.
pub fn update_belief<'t>(mu: &Var<'t>, err: &Var<'t>, alpha: f64, clip: f64) -> Result<Var<'t>> {
    if !err.value().is_finite() {
        return Err(Error::numeric("non-finite prediction error in belief update"));
    }
    let mut e = err.clone();
    let target = mu.shape().to_vec();
    let pad = e.shape().len() - target.len();
    for ax in (0..e.shape().len()).rev() {
        let want = if ax < pad { 1 } else { target[ax - pad] };
        if e.shape()[ax] != want {
            e = e.mean_axis(ax)?;
        }
    }
    let e = e.reshape(&target)?;
    Ok(mu.mul(&e.mul_scalar(alpha).add_scalar(1.0))?.clamp(-clip, clip))
}

#[derive(Clone, Copy, Debug)]
enum ReadoutParams {
    TopK { wo: ParamId },
    Mlp { fc1: Linear, fc2: Linear },
}

#[derive(Clone, Copy, Debug)]
struct Latents {
    ql: ParamId,
    kl: ParamId,
    vl: ParamId,
}

/// A Co4 block with its parameters registered in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Co4Layer {
    cfg: Co4Config,
    ln: LayerNorm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    latents: Option<Latents>,
    readout: ReadoutParams,
}

/// Per-forward diagnostics.
#[derive(Clone, Debug)]
pub struct Co4Diagnostics {
    /// `(B, N)` token scores (top-k readout only).
    pub scores: Option<Tensor>,
    /// Selected token indices per batch row (top-k readout only).
    pub selected: Option<Vec<Vec<usize>>>,
    pub regime: ModRegime,
    pub mean_abs_r: f64,
    pub mean_abs_c: f64,
    pub mu_mean_abs: Option<f64>,
}

/// Intermediate values, exposed for tests and gradient probes.
pub struct Co4Trace<'t> {
    pub qx: Var<'t>,
    pub kx: Var<'t>,
    pub vx: Var<'t>,
    pub ql: Var<'t>,
    pub kl: Var<'t>,
    pub vl: Var<'t>,
    pub qm: Var<'t>,
    pub km: Var<'t>,
    pub vm: Var<'t>,
    pub mu: Option<Var<'t>>,
}

pub struct Co4Output<'t> {
    /// `(B, k, E)` for the top-k readout, `(B, N, E)` for the MLP readout.
    pub features: Var<'t>,
    pub diag: Co4Diagnostics,
    pub trace: Co4Trace<'t>,
}

impl Co4Layer {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cfg: Co4Config, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let ln = LayerNorm::new(ps, &format!("{name}.ln"), e);
        let mut proj = |tag: &str, rng: &mut R| ps.add(format!("{name}.{tag}"), crate::nn::xavier(e, e, rng), true);
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        let latents = match cfg.variant {
            LatentInit::ProjectionInit => None,
            LatentInit::NormalInit => {
                let shape = [cfg.latents(), e];
                let seed = rng.next_u64();
                let mut lat = |tag: &str, s: u64| ps.add(format!("{name}.{tag}"), init_latents(&shape, cfg.latent_std, s), false);
                Some(Latents {
                    ql: lat("ql", seed),
                    kl: lat("kl", seed.wrapping_add(1)),
                    vl: lat("vl", seed.wrapping_add(2)),
                })
            }
        };
        let readout = match cfg.readout {
            Readout::TopkAttn => ReadoutParams::TopK {
                wo: ps.add(format!("{name}.wo"), crate::nn::xavier(e, e, rng), true),
            },
            Readout::MlpOnly => ReadoutParams::Mlp {
                fc1: Linear::new(ps, &format!("{name}.fc1"), e, cfg.mlp_hidden, true, rng),
                fc2: Linear::new(ps, &format!("{name}.fc2"), cfg.mlp_hidden, e, true, rng),
            },
        };
        Ok(Co4Layer {
            cfg,
            ln,
            wq,
            wk,
            wv,
            latents,
            readout,
        })
    }

    pub fn config(&self) -> &Co4Config {
        &self.cfg
    }

    pub fn projection_ids(&self) -> [ParamId; 3] {
        [self.wq, self.wk, self.wv]
    }

    pub fn latent_ids(&self) -> Option<[ParamId; 3]> {
        self.latents.map(|l| [l.ql, l.kl, l.vl])
    }

    /// Forward pass on `(B, N, E)` tokens.
    pub fn forward<'t>(&self, p: &Params<'t>, x: &Var<'t>) -> Result<Co4Output<'t>> {
        let cfg = &self.cfg;
        let shape = x.shape().to_vec();
        if shape.len() != 3 || shape[1] != cfg.num_tokens || shape[2] != cfg.embed_dim {
            return Err(Error::shape(format!(
                "Co4 layer expects (B, {}, {}), got {shape:?}",
                cfg.num_tokens, cfg.embed_dim
            )));
        }
        let (b, n, e) = (shape[0], shape[1], shape[2]);
        let tape = x.tape();
        let h = macs::scoped(Term::Other, || self.ln.forward(p, x))?;
        let (qx, kx, vx) = macs::scoped(Term::Projection, || -> Result<_> {
            Ok((h.matmul(p.get(self.wq))?, h.matmul(p.get(self.wk))?, h.matmul(p.get(self.wv))?))
        })?;

        let expanded = !cfg.is_elementwise();
        let l = cfg.latents();
        // token-side operands and latents, laid out so broadcasting pairs them
        let (tq, tk, tv, ql, kl, vl) = match self.latents {
            None => (qx.clone(), kx.clone(), vx.clone(), qx.clone(), kx.clone(), vx.clone()),
            Some(lat) => {
                let (ql, kl, vl) = (p.get(lat.ql).clone(), p.get(lat.kl).clone(), p.get(lat.vl).clone());
                if expanded {
                    let t = |v: &Var<'t>| v.reshape(&[b, 1, n, e]);
                    let r = |v: &Var<'t>| v.reshape(&[l, 1, e]);
                    (t(&qx)?, t(&kx)?, t(&vx)?, r(&ql)?, r(&kl)?, r(&vl)?)
                } else {
                    (qx.clone(), kx.clone(), vx.clone(), ql, kl, vl)
                }
            }
        };

        let mu_shape: Vec<usize> = if expanded { vec![b, l, 1, e] } else { vec![b, n, e] };
        let mut mu = (!(cfg.single_step() && cfg.mu_init == 0.0)).then(|| tape.constant(Tensor::full(&mu_shape, cfg.mu_init)));

        let mut out = None;
        for _ in 0..cfg.iterations {
            let (qm, km, vm) = macs::scoped(Term::Modulation, || match self.latents {
                None => modulate_projection_init(&ql, &kl, &vl, &qx, &kx, mu.as_ref(), cfg.relu_cap),
                Some(_) => modulate_normal_init(&tq, &tk, &tv, &ql, &kl, &vl, mu.as_ref(), cfg.eq_variant),
            })?;
            if !cfg.single_step() {
                let cur = mu.as_ref().expect("belief state present outside single-step mode");
                let next = macs::scoped(Term::Other, || -> Result<_> {
                    let err = prediction_error([&qm, &km, &vm], [&ql, &kl, &vl])?;
                    update_belief(cur, &err, cfg.alpha_mu, cfg.mu_clip)
                })?;
                mu = Some(next);
            }
            out = Some((qm, km, vm));
        }
        let (mut qm, mut km, mut vm) = out.expect("iterations >= 1");
        if expanded {
            let collapse = |v: &Var<'t>| -> Result<Var<'t>> { v.mean_axis(1)?.reshape(&[b, n, e]) };
            qm = macs::scoped(Term::Modulation, || collapse(&qm))?;
            km = macs::scoped(Term::Modulation, || collapse(&km))?;
            vm = macs::scoped(Term::Modulation, || collapse(&vm))?;
        }

        let r_amp = ql.value().mean_abs();
        let c_amp = context_amplitude(&kx, mu.as_ref(), expanded, [b, n, e])?;
        let mut diag = Co4Diagnostics {
            scores: None,
            selected: None,
            regime: classify_regime_amplitudes(r_amp, c_amp, cfg.thresholds),
            mean_abs_r: r_amp,
            mean_abs_c: c_amp,
            mu_mean_abs: mu.as_ref().map(|m| m.value().mean_abs()),
        };

        let features = match self.readout {
            ReadoutParams::TopK { wo } => {
                let scores = macs::scoped(Term::Scoring, || token_scores(cfg.score, &qm, &km, &vm));
                let selected = macs::scoped(Term::TopK, || topk_select(&scores, cfg.k))?;
                let flat: Vec<usize> = selected.iter().flatten().copied().collect();
                let k = cfg.k;
                let (qs, ks, vs) = (qm.gather_rows(&flat, k)?, km.gather_rows(&flat, k)?, vm.gather_rows(&flat, k)?);
                let (att, _) = sdpa(&qs, &ks, &vs, cfg.heads)?;
                let proj = macs::scoped(Term::Readout, || att.matmul(p.get(wo)))?;
                diag.scores = Some(scores);
                diag.selected = Some(selected);
                x.gather_rows(&flat, k)?.add(&proj)?
            }
            ReadoutParams::Mlp { fc1, fc2 } => macs::scoped(Term::Readout, || -> Result<_> {
                let hdn = fc1.forward(p, &vm)?.gelu();
                x.add(&fc2.forward(p, &hdn)?)
            })?,
        };
        Ok(Co4Output {
            features,
            diag,
            trace: Co4Trace {
                qx,
                kx,
                vx,
                ql,
                kl,
                vl,
                qm,
                km,
                vm,
                mu,
            },
        })
    }
}

/// Mean absolute context `Kx + mu` over tokens.
fn context_amplitude(kx: &Var<'_>, mu: Option<&Var<'_>>, expanded: bool, [b, n, e]: [usize; 3]) -> Result<f64> {
    let Some(mu) = mu else {
        return Ok(kx.value().mean_abs());
    };
    let c = if expanded {
        kx.value().reshape(&[b, 1, n, e])?.add(mu.value())?
    } else {
        kx.value().add(mu.value())?
    };
    Ok(c.mean_abs())
}

/// `(B, N)` salience scores from the modulated rows.
pub fn token_scores(score: ScoreFn, qm: &Var<'_>, km: &Var<'_>, vm: &Var<'_>) -> Tensor {
    let shape = vm.shape();
    let (b, n, e) = (shape[0], shape[1], shape[2]);
    let data: Vec<f64> = match score {
        ScoreFn::VmNorm => vm
            .value()
            .data()
            .chunks(e)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
        ScoreFn::QmKm => qm
            .value()
            .data()
            .chunks(e)
            .zip(km.value().data().chunks(e))
            .map(|(q, k)| q.iter().zip(k).map(|(a, b)| (a * b).abs()).sum())
            .collect(),
    };
    macs::add((b * n * e) as u64);
    Tensor::from_parts(vec![b, n], data)
}
