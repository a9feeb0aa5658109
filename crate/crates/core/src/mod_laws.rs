//! Cooperation laws between evidence `R` and context `C`.
//!
//! Differentiable forms operate on [`Var`]s; [`scalar`] holds the same laws
//! on plain `f64`s for simulators and plotting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Operating regime of a two-point unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModRegime {
    /// Apical isolation / weak cooperation: both streams weak.
    AiAc,
    /// Apical amplification: strong evidence, context modulates.
    Aa,
    /// Apical drive: strong context, weak evidence.
    Ad,
    /// Both streams strong.
    AdAwake,
}

impl ModRegime {
    pub const ALL: [ModRegime; 4] = [ModRegime::AiAc, ModRegime::Aa, ModRegime::Ad, ModRegime::AdAwake];

    pub fn as_str(self) -> &'static str {
        match self {
            ModRegime::AiAc => "AI_AC",
            ModRegime::Aa => "AA",
            ModRegime::Ad => "AD",
            ModRegime::AdAwake => "AD_AWAKE",
        }
    }
}

impl fmt::Display for ModRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Activation bands used by [`classify_regime`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub low: f64,
    pub high: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds { low: 0.1, high: 1.0 }
    }
}

impl RegimeThresholds {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(Error::config(format!("regime thresholds need low < high, got ({low}, {high})")));
        }
        Ok(RegimeThresholds { low, high })
    }
}

/// Tags a regime from mean absolute evidence and context amplitudes.
///
/// A stream is "high" at or above `high`. Strong evidence with non-high
/// context is AA, strong context with non-high evidence is AD, both strong
/// is AD+Awake, anything else is AI/AC. Values between the bands count as
/// moderate, which is what AA expects of its context.
pub fn classify_regime_amplitudes(r: f64, c: f64, th: RegimeThresholds) -> ModRegime {
    let (rh, ch) = (r >= th.high, c >= th.high);
    match (rh, ch) {
        (true, true) => ModRegime::AdAwake,
        (true, false) => ModRegime::Aa,
        (false, true) => ModRegime::Ad,
        (false, false) => ModRegime::AiAc,
    }
}

pub fn classify_regime(r: &Tensor, c: &Tensor, th: RegimeThresholds) -> ModRegime {
    classify_regime_amplitudes(r.mean_abs(), c.mean_abs(), th)
}

/// Context-driven law: `C1^2 + 2 C1 + C2 (1 + |R|)`.
pub fn mod_ad<'t>(r: &Var<'t>, c1: &Var<'t>, c2: &Var<'t>) -> Result<Var<'t>> {
    let fc = c1.square().add(&c1.mul_scalar(2.0))?;
    fc.add(&interaction(r, c2)?)
}

/// Evidence-driven additive law: `R + R C`.
pub fn mod_aa<'t>(r: &Var<'t>, c: &Var<'t>) -> Result<Var<'t>> {
    r.add(&r.mul(c)?)
}

/// Maximal-coherence law: `R1 + C (1 + |R2|)`, where `R1` already carries
/// the evidence term.
pub fn mod_ad_awake<'t>(r1: &Var<'t>, r2: &Var<'t>, c: &Var<'t>) -> Result<Var<'t>> {
    r1.add(&interaction(r2, c)?)
}

/// `C^2 + 2C + C (1 + |R|)`.
pub fn mod_fig1c<'t>(r: &Var<'t>, c: &Var<'t>) -> Result<Var<'t>> {
    mod_ad(r, c, c)
}

/// `R^2 + 2R + C (1 + |R|)`.
pub fn mod_fig1d<'t>(r: &Var<'t>, c: &Var<'t>) -> Result<Var<'t>> {
    let fr = r.square().add(&r.mul_scalar(2.0))?;
    mod_ad_awake(&fr, r, c)
}

/// `C (1 + |R|)`.
pub fn interaction<'t>(r: &Var<'t>, c: &Var<'t>) -> Result<Var<'t>> {
    c.mul(&r.abs().add_scalar(1.0))
}

/// Exponent bound applied before `exp` and `2^x`.
pub const EXP_SATURATION: f64 = 700.0;

/// Alternative asynchronous transfer functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TmVariant {
    Tm1,
    Tm2,
    Tm3,
    Tm4,
}

impl TmVariant {
    pub const ALL: [TmVariant; 4] = [TmVariant::Tm1, TmVariant::Tm2, TmVariant::Tm3, TmVariant::Tm4];
}

impl FromStr for TmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tm1" => Ok(TmVariant::Tm1),
            "tm2" => Ok(TmVariant::Tm2),
            "tm3" => Ok(TmVariant::Tm3),
            "tm4" => Ok(TmVariant::Tm4),
            other => Err(Error::config(format!("unknown transfer variant {other:?}"))),
        }
    }
}

/// TM1 `R(1+exp(RC))/2`, TM2 `R + RC`, TM3 `R(1+tanh(RC))`, TM4 `R 2^(RC)`.
pub fn tm_transfer<'t>(variant: TmVariant, r: &Var<'t>, c: &Var<'t>) -> Result<Var<'t>> {
    let rc = r.mul(c)?;
    let out = match variant {
        TmVariant::Tm1 => {
            let e = rc.clamp(-EXP_SATURATION, EXP_SATURATION).exp();
            r.mul(&e.add_scalar(1.0))?.mul_scalar(0.5)
        }
        TmVariant::Tm2 => r.add(&rc)?,
        TmVariant::Tm3 => r.mul(&rc.tanh().add_scalar(1.0))?,
        TmVariant::Tm4 => {
            let e = rc.clamp(-EXP_SATURATION, EXP_SATURATION).mul_scalar(std::f64::consts::LN_2).exp();
            r.mul(&e)?
        }
    };
    if out.value().is_finite() {
        return Ok(out);
    }
    log::warn!("{variant:?} overflowed; saturating to the largest finite value");
    let bound = f64::MAX;
    Ok(out.clamp(-bound, bound))
}

/// Logistic component `1 / (1 + exp(-(x - theta) / s))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    pub theta: f64,
    pub s: f64,
}

impl SigmoidParams {
    pub fn new(theta: f64, s: f64) -> Result<Self> {
        if !(s > 0.0) || !theta.is_finite() || !s.is_finite() {
            return Err(Error::config(format!("sigmoid needs finite theta and s > 0, got ({theta}, {s})")));
        }
        Ok(SigmoidParams { theta, s })
    }

    pub fn eval(&self, x: f64) -> f64 {
        crate::autodiff::sigmoid((x - self.theta) / self.s)
    }
}

/// Burst components: `p1b(b)`, `p2a(a)`, `p2b(b)`, `ph2a(a)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstParams {
    pub p1b: SigmoidParams,
    pub p2a: SigmoidParams,
    pub p2b: SigmoidParams,
    pub ph2a: SigmoidParams,
}

impl Default for BurstParams {
    fn default() -> Self {
        BurstParams {
            p1b: SigmoidParams { theta: 1.0, s: 0.25 },
            p2a: SigmoidParams { theta: 1.0, s: 0.25 },
            p2b: SigmoidParams { theta: 2.0, s: 0.25 },
            ph2a: SigmoidParams { theta: 2.0, s: 0.25 },
        }
    }
}

/// Evaluated component probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BurstComponents {
    pub p1b: f64,
    pub p2a: f64,
    pub p2b: f64,
    pub ph2a: f64,
}

impl BurstParams {
    pub fn components(&self, b: f64, a: f64) -> BurstComponents {
        BurstComponents {
            p1b: self.p1b.eval(b),
            p2a: self.p2a.eval(a),
            p2b: self.p2b.eval(b),
            ph2a: self.ph2a.eval(a),
        }
    }
}

/// Basal/apical input level pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BurstRegime {
    LL,
    HL,
    LH,
    HH,
}

impl BurstRegime {
    pub const ALL: [BurstRegime; 4] = [BurstRegime::LL, BurstRegime::LH, BurstRegime::HL, BurstRegime::HH];

    pub fn as_str(self) -> &'static str {
        match self {
            BurstRegime::LL => "LL",
            BurstRegime::HL => "HL",
            BurstRegime::LH => "LH",
            BurstRegime::HH => "HH",
        }
    }

    /// The cooperation regime each input pairing corresponds to.
    pub fn mod_regime(self) -> ModRegime {
        match self {
            BurstRegime::LL => ModRegime::AiAc,
            BurstRegime::HL => ModRegime::Aa,
            BurstRegime::LH => ModRegime::Ad,
            BurstRegime::HH => ModRegime::AdAwake,
        }
    }
}

impl FromStr for BurstRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LL" | "00" => Ok(BurstRegime::LL),
            "LH" | "01" => Ok(BurstRegime::LH),
            "HL" | "10" => Ok(BurstRegime::HL),
            "HH" | "11" => Ok(BurstRegime::HH),
            other => Err(Error::config(format!("unknown regime {other:?}"))),
        }
    }
}

/// Burst probability composed from already-evaluated components.
pub fn burst_prob_from(regime: BurstRegime, p: BurstComponents) -> f64 {
    let ll = p.p1b * p.p2a;
    let hl = p.p1b * p.p2b + ll * (1.0 - p.p2b);
    match regime {
        BurstRegime::LL => ll,
        BurstRegime::HL => hl,
        BurstRegime::LH => p.ph2a + ll * (1.0 - p.ph2a),
        BurstRegime::HH => p.ph2a + hl * (1.0 - p.ph2a),
    }
}

pub fn burst_prob(regime: BurstRegime, b: f64, a: f64, params: &BurstParams) -> f64 {
    burst_prob_from(regime, params.components(b, a))
}

/// The same laws on scalars.
pub mod scalar {
    use super::{TmVariant, EXP_SATURATION};

    pub fn mod_ad(r: f64, c1: f64, c2: f64) -> f64 {
        c1 * c1 + 2.0 * c1 + c2 * (1.0 + r.abs())
    }

    pub fn mod_aa(r: f64, c: f64) -> f64 {
        r + r * c
    }

    pub fn mod_ad_awake(r1: f64, r2: f64, c: f64) -> f64 {
        r1 + c * (1.0 + r2.abs())
    }

    pub fn mod_fig1c(r: f64, c: f64) -> f64 {
        mod_ad(r, c, c)
    }

    pub fn mod_fig1d(r: f64, c: f64) -> f64 {
        mod_ad_awake(r * r + 2.0 * r, r, c)
    }

    /// Derivative of [`mod_fig1d`] with respect to `r` (0 subgradient of
    /// `|r|` at 0).
    pub fn mod_fig1d_dr(r: f64, c: f64) -> f64 {
        2.0 * r
            + 2.0
            + c * if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            }
    }

    pub fn relu_alpha(x: f64, alpha: f64) -> f64 {
        x.clamp(0.0, alpha)
    }

    pub fn tm_transfer(variant: TmVariant, r: f64, c: f64) -> f64 {
        let rc = r * c;
        let sat = rc.clamp(-EXP_SATURATION, EXP_SATURATION);
        let out = match variant {
            TmVariant::Tm1 => 0.5 * r * (1.0 + sat.exp()),
            TmVariant::Tm2 => r + rc,
            TmVariant::Tm3 => r * (1.0 + rc.tanh()),
            TmVariant::Tm4 => r * sat.exp2(),
        };
        if out.is_finite() {
            out
        } else {
            log::warn!("{variant:?} overflowed; saturating to the largest finite value");
            out.clamp(-f64::MAX, f64::MAX)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    fn eval2(f: for<'t> fn(&Var<'t>, &Var<'t>) -> Result<Var<'t>>, a: f64, b: f64) -> f64 {
        let tape = Tape::no_grad();
        f(&tape.constant(s(a)), &tape.constant(s(b))).unwrap().value().item().unwrap()
    }

    #[test]
    fn mod_ad_examples() {
        let tape = Tape::new();
        let r = tape.leaf(s(3.7));
        let z = tape.constant(s(0.0));
        let out = mod_ad(&r, &z, &z).unwrap();
        assert_eq!(out.value().item().unwrap(), 0.0);
        let g = tape.backward(&out.sum()).unwrap();
        assert_eq!(g.get_or_zeros(&r).data(), &[0.0]);
        let one = tape.constant(s(1.0));
        let zero_r = tape.constant(s(0.0));
        assert_eq!(mod_ad(&zero_r, &one, &one).unwrap().value().item().unwrap(), 4.0);
    }

    #[test]
    fn mod_aa_examples() {
        assert_eq!(eval2(mod_aa, 1.0, 0.0), 1.0);
        assert_eq!(eval2(mod_aa, 2.0, 0.5), 3.0);
        assert_eq!(eval2(mod_aa, 0.0, 5.0), 0.0);
    }

    #[test]
    fn mod_fig1d_examples() {
        assert_eq!(eval2(mod_fig1d, 0.0, 0.0), 0.0);
        assert_eq!(eval2(mod_fig1d, 1.0, 1.0), 5.0);
        assert_eq!(eval2(mod_fig1d, -1.0, 0.0), -1.0);
        assert_eq!(scalar::mod_fig1d(1.0, 1.0), 5.0);
        assert_eq!(scalar::mod_fig1c(0.5, 1.0), 1.0 + 2.0 + 1.5);
    }

    #[test]
    fn tm_examples() {
        let tm = |v, r, c| {
            let tape = Tape::no_grad();
            tm_transfer(v, &tape.constant(s(r)), &tape.constant(s(c)))
                .unwrap()
                .value()
                .item()
                .unwrap()
        };
        assert_eq!(tm(TmVariant::Tm2, 1.0, 0.0), 1.0);
        assert_eq!(tm(TmVariant::Tm4, 1.0, 1.0), 2.0);
        assert_eq!(tm(TmVariant::Tm1, 1.0, 0.0), 1.0);
        assert_eq!(tm(TmVariant::Tm3, 2.0, 0.0), 2.0);
        for v in TmVariant::ALL {
            assert!(tm(v, 1e6, 1e6).is_finite());
            assert!(scalar::tm_transfer(v, 1e6, 1e6).is_finite());
            assert!(scalar::tm_transfer(v, -1e6, 1e6).is_finite());
            assert_eq!(tm(v, 0.3, -0.7), scalar::tm_transfer(v, 0.3, -0.7));
        }
    }

    #[test]
    fn laws_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let r = Tensor::uniform(&[5], -2.0, 2.0, &mut rng).map(|v| if v.abs() < 1e-2 { 0.5 } else { v });
            let c = Tensor::uniform(&[5], -2.0, 2.0, &mut rng);
            let c2 = Tensor::uniform(&[5], -2.0, 2.0, &mut rng);
            let ins = [r, c, c2];
            let errs = [
                gradcheck(&ins, 1e-5, |_, v| Ok(mod_ad(&v[0], &v[1], &v[2])?.sum())).unwrap(),
                gradcheck(&ins, 1e-5, |_, v| Ok(mod_aa(&v[0], &v[1])?.sum())).unwrap(),
                gradcheck(&ins, 1e-5, |_, v| Ok(mod_ad_awake(&v[0], &v[2], &v[1])?.sum())).unwrap(),
                gradcheck(&ins, 1e-5, |_, v| Ok(mod_fig1d(&v[0], &v[1])?.sum())).unwrap(),
                gradcheck(&ins, 1e-5, |_, v| Ok(tm_transfer(TmVariant::Tm1, &v[0], &v[1])?.sum())).unwrap(),
                gradcheck(&ins, 1e-5, |_, v| Ok(tm_transfer(TmVariant::Tm3, &v[0], &v[1])?.sum())).unwrap(),
                gradcheck(&ins, 1e-5, |_, v| Ok(tm_transfer(TmVariant::Tm4, &v[0], &v[1])?.sum())).unwrap(),
            ];
            for e in errs {
                assert!(e < 1e-5, "{errs:?}");
            }
        }
    }

    #[test]
    fn burst_pinned_components() {
        let half = BurstComponents {
            p1b: 0.5,
            p2a: 0.5,
            p2b: 0.5,
            ph2a: 0.5,
        };
        let got: Vec<f64> = [BurstRegime::LL, BurstRegime::HL, BurstRegime::LH, BurstRegime::HH]
            .iter()
            .map(|&r| burst_prob_from(r, half))
            .collect();
        assert_eq!(got, vec![0.25, 0.375, 0.625, 0.6875]);
        let one = BurstComponents {
            p1b: 1.0,
            p2a: 1.0,
            p2b: 1.0,
            ph2a: 1.0,
        };
        assert_eq!(burst_prob_from(BurstRegime::HH, one), 1.0);
    }

    #[test]
    fn burst_monotone_on_grid() {
        let p = BurstParams::default();
        for i in 0..50 {
            for j in 0..50 {
                let (b, a) = (i as f64 * 0.08, j as f64 * 0.08);
                let [ll, hl, lh, hh] =
                    [BurstRegime::LL, BurstRegime::HL, BurstRegime::LH, BurstRegime::HH].map(|r| burst_prob(r, b, a, &p));
                assert!(ll <= hl && hl <= hh && ll <= lh && lh <= hh);
            }
        }
    }

    #[test]
    fn burst_in_unit_interval_for_random_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let mut sp = || SigmoidParams::new(rng.random_range(-3.0..3.0), rng.random_range(0.01..3.0)).unwrap();
            let p = BurstParams {
                p1b: sp(),
                p2a: sp(),
                p2b: sp(),
                ph2a: sp(),
            };
            let (b, a) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            for r in BurstRegime::ALL {
                let v = burst_prob(r, b, a, &p);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn sigmoid_params_validated() {
        assert!(SigmoidParams::new(0.0, 0.0).is_err());
        assert!(SigmoidParams::new(0.0, -1.0).is_err());
        assert!(RegimeThresholds::new(1.0, 0.1).is_err());
    }

    #[test]
    fn regime_examples() {
        let th = RegimeThresholds::new(0.1, 1.0).unwrap();
        let f = |r: f64, c: f64| classify_regime(&Tensor::full(&[4], r), &Tensor::full(&[4], -c), th);
        assert_eq!(f(0.01, 0.01), ModRegime::AiAc);
        assert_eq!(f(2.0, 0.01), ModRegime::Aa);
        assert_eq!(f(2.0, 0.5), ModRegime::Aa);
        assert_eq!(f(0.01, 2.0), ModRegime::Ad);
        assert_eq!(f(2.0, 2.0), ModRegime::AdAwake);
    }

    proptest! {
        #[test]
        fn fig1d_gradient_is_evidence_anchored(r in -50.0f64..50.0, c in -50.0f64..50.0) {
            let d = scalar::mod_fig1d_dr(r, 0.0);
            if (r + 1.0).abs() > 1e-9 {
                prop_assert!(d != 0.0);
            }
            prop_assert!(scalar::mod_fig1d_dr(r, c).abs() <= 2.0 * r.abs() + 2.0 + c.abs());
        }

        #[test]
        fn fig1d_autodiff_matches_closed_form(r in -5.0f64..5.0, c in -5.0f64..5.0) {
            prop_assume!(r.abs() > 1e-9);
            let tape = Tape::new();
            let rv = tape.leaf(s(r));
            let cv = tape.constant(s(c));
            let g = tape.backward(&mod_fig1d(&rv, &cv).unwrap()).unwrap();
            let got = g.get(&rv).unwrap().data()[0];
            prop_assert!((got - scalar::mod_fig1d_dr(r, c)).abs() < 1e-12);
        }

        #[test]
        fn relu_alpha_in_range(x in -1e6f64..1e6, alpha in 1e-3f64..100.0) {
            let tape = Tape::no_grad();
            let y = tape.constant(s(x)).relu_alpha(alpha).unwrap().value().item().unwrap();
            prop_assert!((0.0..=alpha).contains(&y));
        }
    }
}
