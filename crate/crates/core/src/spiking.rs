//! Adaptive leaky integrate-and-fire somata driven by a context-modulated
//! current.
//!
//! Units: mV, ms, pF and pA. Input levels are given in nA and converted.
//! The leak is the usual restoring term `-(V - E_L) / tau_s`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::mod_laws::BurstRegime;
use crate::{par, Error, Result};

/// Largest accepted integration step in ms.
pub const MAX_DT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuronParams {
    pub tau_s: f64,
    pub c_s: f64,
    pub e_l: f64,
    /// Adaptation increment per spike, pA.
    pub b: f64,
    pub v_thresh: f64,
    pub thresh_inc: f64,
    pub thresh_tau: f64,
    pub v_reset: f64,
    pub tau_ws: f64,
}

impl Default for NeuronParams {
    fn default() -> Self {
        NeuronParams {
            tau_s: 16.0,
            c_s: 370.0,
            e_l: -70.0,
            b: 200.0,
            v_thresh: -50.0,
            thresh_inc: 2.0,
            thresh_tau: 27.0,
            v_reset: -70.0,
            tau_ws: 100.0,
        }
    }
}

impl NeuronParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0 && self.thresh_tau > 0.0 && self.tau_ws > 0.0) {
            return Err(Error::config("time constants must be positive"));
        }
        if !(self.c_s > 0.0) {
            return Err(Error::config("capacitance must be positive"));
        }
        Ok(())
    }

    /// Smallest constant current (pA) that eventually fires a resting cell.
    pub fn rheobase_pa(&self) -> f64 {
        (self.v_thresh - self.e_l) * self.c_s / self.tau_s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronState {
    pub v: f64,
    pub w: f64,
    pub thresh: f64,
}

impl NeuronState {
    pub fn rest(p: &NeuronParams) -> Self {
        NeuronState {
            v: p.e_l,
            w: 0.0,
            thresh: p.v_thresh,
        }
    }
}

/// `I_s + I_c (0.1 + |I_s|) + I_c I_u (2 + |I_s|)`
pub fn mod_current(i_s: f64, i_c: f64, i_u: f64) -> f64 {
    i_s + i_c * (0.1 + i_s.abs()) + i_c * i_u * (2.0 + i_s.abs())
}

/// One forward-Euler step with input current `i_pa`. Returns the new state
/// and whether it spiked.
pub fn step_neuron(s: &NeuronState, i_pa: f64, p: &NeuronParams, dt: f64) -> Result<(NeuronState, bool)> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::config(format!("dt = {dt} ms outside (0, {MAX_DT}]")));
    }
    let dv = -(s.v - p.e_l) / p.tau_s + (i_pa - s.w) / p.c_s;
    let mut next = NeuronState {
        v: s.v + dt * dv,
        w: s.w - dt * s.w / p.tau_ws,
        thresh: s.thresh + dt * (p.v_thresh - s.thresh) / p.thresh_tau,
    };
    let spiked = next.v >= next.thresh;
    if spiked {
        next.v = p.v_reset;
        next.thresh += p.thresh_inc;
        next.w += p.b;
    }
    Ok((next, spiked))
}

/// Spike times of one neuron with burst membership.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub neuron: usize,
    pub times: Vec<f64>,
    pub burst: Vec<bool>,
}

/// A spike belongs to a burst when a neighbouring spike lies closer than
/// `window` ms.
pub fn burst_flags(times: &[f64], window: f64) -> Vec<bool> {
    (0..times.len())
        .map(|i| (i > 0 && times[i] - times[i - 1] < window) || (i + 1 < times.len() && times[i + 1] - times[i] < window))
        .collect()
}

/// Current levels in nA for the low and high settings of each stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeLevels {
    pub r_low: f64,
    pub r_high: f64,
    pub c_low: f64,
    pub c_high: f64,
}

impl Default for RegimeLevels {
    fn default() -> Self {
        RegimeLevels {
            r_low: 0.5,
            r_high: 1.0,
            c_low: 0.05,
            c_high: 1.0,
        }
    }
}

impl RegimeLevels {
    /// `(I_s, I_c, I_u)` in nA; the universal input follows the context level.
    pub fn inputs(&self, regime: BurstRegime) -> (f64, f64, f64) {
        let (r, c) = match regime {
            BurstRegime::LL => (self.r_low, self.c_low),
            BurstRegime::HL => (self.r_high, self.c_low),
            BurstRegime::LH => (self.r_low, self.c_high),
            BurstRegime::HH => (self.r_high, self.c_high),
        };
        (r, c, c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub duration_ms: f64,
    pub population: usize,
    /// Standard deviation of the additive current noise, nA.
    pub noise_std: f64,
    /// Noise is redrawn on this grid so that it does not depend on `dt`.
    pub noise_dt: f64,
    pub burst_isi: f64,
    pub levels: RegimeLevels,
    /// Multiplies the context input; `-1` gives incoherent context.
    pub context_sign: f64,
    /// Drop context and universal inputs.
    pub context_blind: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.05,
            duration_ms: 10_000.0,
            population: 150,
            noise_std: 0.05,
            noise_dt: 0.1,
            burst_isi: 16.0,
            levels: RegimeLevels::default(),
            context_sign: 1.0,
            context_blind: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(Error::config(format!("dt = {} ms outside (0, {MAX_DT}]", self.dt)));
        }
        let ratio = self.noise_dt / self.dt;
        if !(self.noise_dt > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(Error::config("noise_dt must be a positive multiple of dt"));
        }
        if !(self.duration_ms > 0.0) || self.population == 0 || !(self.burst_isi > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::config("duration, population and burst window must be positive"));
        }
        Ok(())
    }

    /// Noise-free drive of `regime` in pA.
    pub fn drive_pa(&self, regime: BurstRegime) -> f64 {
        let (s, c, u) = self.levels.inputs(regime);
        let m = if self.context_blind {
            mod_current(s, 0.0, 0.0)
        } else {
            mod_current(s, self.context_sign * c, u)
        };
        m * 1000.0
    }
}

/// Simulates one neuron under a constant drive plus held Gaussian noise.
/// `observe` sees every state with its threshold.
pub fn simulate_neuron(
    drive_pa: f64,
    cfg: &SimConfig,
    p: &NeuronParams,
    seed: u64,
    neuron: usize,
    mut observe: impl FnMut(&NeuronState),
) -> Result<SpikeTrain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(neuron as u64);
    let normal = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let steps = (cfg.duration_ms / cfg.dt).round() as usize;
    let hold = (cfg.noise_dt / cfg.dt).round() as usize;
    let mut s = NeuronState::rest(p);
    let mut noise = 0.0;
    let mut times = Vec::new();
    for t in 0..steps {
        if t % hold == 0 {
            noise = if cfg.noise_std > 0.0 {
                normal.sample(&mut rng) * 1000.0
            } else {
                0.0
            };
        }
        let (next, spiked) = step_neuron(&s, drive_pa + noise, p, cfg.dt)?;
        s = next;
        observe(&s);
        if spiked {
            times.push((t + 1) as f64 * cfg.dt);
        }
    }
    let burst = burst_flags(&times, cfg.burst_isi);
    Ok(SpikeTrain { neuron, times, burst })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: String,
    pub i_s: f64,
    pub i_c: f64,
    pub i_u: f64,
    pub drive_na: f64,
    pub spikes: usize,
    pub burst_spikes: usize,
    /// Fraction of spikes inside bursts; 0 without spikes.
    pub p_burst: f64,
    pub mean_rate_hz: f64,
}

pub struct RegimeRun {
    pub summary: RegimeSummary,
    pub trains: Vec<SpikeTrain>,
}

/// Stream seed of one regime; distinct regimes draw distinct noise.
fn regime_seed(seed: u64, regime: BurstRegime) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ regime as u64
}

pub fn run_regime(regime: BurstRegime, cfg: &SimConfig, p: &NeuronParams, seed: u64) -> Result<RegimeRun> {
    cfg.validate()?;
    p.validate()?;
    let drive = cfg.drive_pa(regime);
    let rs = regime_seed(seed, regime);
    let trains = par::map_range(cfg.population, |n| simulate_neuron(drive, cfg, p, rs, n, |_| {}))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let spikes: usize = trains.iter().map(|t| t.times.len()).sum();
    let burst_spikes: usize = trains.iter().map(|t| t.burst.iter().filter(|&&b| b).count()).sum();
    let (i_s, i_c, i_u) = cfg.levels.inputs(regime);
    let summary = RegimeSummary {
        regime: regime.as_str().to_string(),
        i_s,
        i_c,
        i_u,
        drive_na: drive / 1000.0,
        spikes,
        burst_spikes,
        p_burst: if spikes == 0 { 0.0 } else { burst_spikes as f64 / spikes as f64 },
        mean_rate_hz: spikes as f64 / cfg.population as f64 / (cfg.duration_ms / 1000.0),
    };
    Ok(RegimeRun { summary, trains })
}

pub fn run_regime_grid(regimes: &[BurstRegime], cfg: &SimConfig, p: &NeuronParams, seed: u64) -> Result<Vec<RegimeRun>> {
    regimes.iter().map(|&r| run_regime(r, cfg, p, seed)).collect()
}

pub const RASTER_HEADER: &str = "neuron_id,time_ms,is_burst";

/// Raster rows ordered by time, then neuron.
pub fn raster_csv(trains: &[SpikeTrain]) -> String {
    let mut rows: Vec<(f64, usize, bool)> = trains
        .iter()
        .flat_map(|t| t.times.iter().zip(&t.burst).map(move |(&time, &b)| (time, t.neuron, b)))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut s = format!("{RASTER_HEADER}\n");
    for (time, n, b) in rows {
        let _ = writeln!(s, "{n},{time},{}", u8::from(b));
    }
    s
}

/// Summary document with the settings that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridReport {
    pub seed: u64,
    pub sim: SimConfig,
    pub neuron: NeuronParams,
    pub regimes: Vec<RegimeSummary>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn short(duration: f64, population: usize) -> SimConfig {
        SimConfig {
            duration_ms: duration,
            population,
            ..SimConfig::default()
        }
    }

    #[test]
    fn mod_current_examples() {
        assert_eq!(mod_current(0.7, 0.0, 3.0), 0.7);
        assert!((mod_current(1.0, 1.0, 0.0) - 2.1).abs() < 1e-15);
        assert!((mod_current(1.0, 1.0, 1.0) - 5.1).abs() < 1e-15);
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let p = NeuronParams::default();
        let s = NeuronState::rest(&p);
        let (n, spiked) = step_neuron(&s, 0.0, &p, 0.05).unwrap();
        assert_eq!(n, s);
        assert!(!spiked);
        assert!(matches!(step_neuron(&s, 0.0, &p, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn stronger_current_shortens_intervals() {
        let p = NeuronParams::default();
        let cfg = SimConfig {
            noise_std: 0.0,
            duration_ms: 2000.0,
            ..SimConfig::default()
        };
        let isi = |i: f64| {
            let t = simulate_neuron(i, &cfg, &p, 0, 0, |_| {}).unwrap().times;
            let tail = &t[t.len() / 2..];
            (tail[tail.len() - 1] - tail[0]) / (tail.len() - 1) as f64
        };
        let (a, b, c) = (isi(700.0), isi(1200.0), isi(2500.0));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn threshold_relaxes_after_a_spike() {
        let p = NeuronParams::default();
        let dt = 0.05;
        let mut s = NeuronState {
            v: p.v_thresh + 1.0,
            ..NeuronState::rest(&p)
        };
        let (n, spiked) = step_neuron(&s, 0.0, &p, dt).unwrap();
        assert!(spiked);
        s = n;
        let steps = (5.0 * p.thresh_tau / dt).round() as usize;
        for _ in 0..steps {
            s = step_neuron(&s, 0.0, &p, dt).unwrap().0;
        }
        let analytic = p.thresh_inc * (-5.0f64).exp();
        assert!((s.thresh - p.v_thresh).abs() <= 0.01 * p.v_thresh.abs());
        assert!(((s.thresh - p.v_thresh) - analytic).abs() < 1e-3);
    }

    #[test]
    fn bursts_by_interval() {
        assert_eq!(
            burst_flags(&[1.0, 5.0, 40.0, 100.0, 110.0], 16.0),
            vec![true, true, false, true, true]
        );
        assert!(burst_flags(&[], 16.0).is_empty());
    }

    #[test]
    fn silent_population_has_zero_burst_probability() {
        let cfg = SimConfig {
            levels: RegimeLevels {
                r_low: 0.0,
                c_low: 0.0,
                ..RegimeLevels::default()
            },
            noise_std: 0.0,
            ..short(500.0, 5)
        };
        let run = run_regime(BurstRegime::LL, &cfg, &NeuronParams::default(), 1).unwrap();
        assert_eq!(run.summary.spikes, 0);
        assert_eq!(run.summary.p_burst, 0.0);
    }

    #[test]
    fn identical_seeds_identical_rasters() {
        let cfg = short(300.0, 6);
        let p = NeuronParams::default();
        let a = run_regime(BurstRegime::HH, &cfg, &p, 3).unwrap();
        let b = crate::par::sequential(|| run_regime(BurstRegime::HH, &cfg, &p, 3).unwrap());
        assert_eq!(raster_csv(&a.trains), raster_csv(&b.trains));
        assert!(a.summary.spikes > 0);
    }

    #[test]
    fn burstiness_grows_from_ll_to_hh() {
        let cfg = short(2000.0, 20);
        let p = NeuronParams::default();
        for seed in 0..3 {
            let runs = run_regime_grid(&[BurstRegime::LL, BurstRegime::HH], &cfg, &p, seed).unwrap();
            assert!(runs[0].summary.p_burst < runs[1].summary.p_burst);
        }
    }

    #[test]
    fn incoherent_context_fires_less_than_context_blind() {
        let p = NeuronParams::default();
        for regime in [BurstRegime::HH, BurstRegime::LH] {
            let incoherent = SimConfig {
                context_sign: -1.0,
                ..short(1000.0, 10)
            };
            let blind = SimConfig {
                context_blind: true,
                ..short(1000.0, 10)
            };
            let a = run_regime(regime, &incoherent, &p, 2).unwrap().summary.spikes;
            let b = run_regime(regime, &blind, &p, 2).unwrap().summary.spikes;
            assert!(a <= b, "{a} > {b}");
        }
    }

    #[test]
    fn raster_format() {
        let t = vec![
            SpikeTrain {
                neuron: 1,
                times: vec![2.0, 3.0],
                burst: vec![true, true],
            },
            SpikeTrain {
                neuron: 0,
                times: vec![2.5],
                burst: vec![false],
            },
        ];
        assert_eq!(raster_csv(&t), "neuron_id,time_ms,is_burst\n1,2,1\n0,2.5,0\n1,3,1\n");
        assert_eq!(raster_csv(&[]), "neuron_id,time_ms,is_burst\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn membrane_stays_bounded(drive in 0.0f64..6000.0, seed in 0u64..1000) {
            let p = NeuronParams::default();
            let cfg = short(400.0, 1);
            let mut ok = true;
            simulate_neuron(drive, &cfg, &p, seed, 0, |s| {
                ok &= s.v >= p.v_reset - 20.0 && s.v <= s.thresh + 5.0;
            }).unwrap();
            prop_assert!(ok);
        }
    }
}
