//! Multiply-accumulate accounting.
//!
//! Two halves: closed-form cost models ([`macs_estimate`]) and a
//! thread-local instrumented counter that tensor kernels bump as they run.
//! Counts are attributed to whichever [`Term`] is active via [`scoped`].

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

/// Cost bucket a counted operation is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Projection,
    Modulation,
    Scoring,
    TopK,
    Attention,
    Readout,
    Other,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::Projection,
        Term::Modulation,
        Term::Scoring,
        Term::TopK,
        Term::Attention,
        Term::Readout,
        Term::Other,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Term::Projection => "projection",
            Term::Modulation => "modulation",
            Term::Scoring => "scoring",
            Term::TopK => "topk",
            Term::Attention => "attention",
            Term::Readout => "readout",
            Term::Other => "other",
        }
    }
}

struct State {
    current: Term,
    counts: [u64; 7],
}

thread_local! {
    static STATE: RefCell<State> = const {
        RefCell::new(State { current: Term::Other, counts: [0; 7] })
    };
}

/// Adds `n` MACs (or comparisons, inside [`Term::TopK`]) to the active term.
#[inline]
pub fn add(n: u64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let i = s.current.index();
        s.counts[i] += n;
    });
}

/// Runs `f` with `term` as the active bucket.
pub fn scoped<R>(term: Term, f: impl FnOnce() -> R) -> R {
    let prev = STATE.with(|s| std::mem::replace(&mut s.borrow_mut().current, term));
    let out = f();
    STATE.with(|s| s.borrow_mut().current = prev);
    out
}

pub fn reset() {
    STATE.with(|s| s.borrow_mut().counts = [0; 7]);
}

pub fn snapshot() -> MacCounts {
    STATE.with(|s| MacCounts { counts: s.borrow().counts })
}

/// Counts `f`'s work in isolation, leaving the outer tally untouched.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, MacCounts) {
    let saved = STATE.with(|s| std::mem::take(&mut s.borrow_mut().counts));
    let out = f();
    let counts = STATE.with(|s| {
        let mut s = s.borrow_mut();
        let c = s.counts;
        for (acc, v) in s.counts.iter_mut().zip(saved) {
            *acc += v;
        }
        c
    });
    (out, MacCounts { counts })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounts {
    counts: [u64; 7],
}

impl MacCounts {
    pub fn get(&self, term: Term) -> u64 {
        self.counts[term.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Term, u64)> + '_ {
        Term::ALL.iter().map(move |&t| (t, self.get(t)))
    }
}

/// Closed-form cost models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacModel {
    /// `L (P E^2 + P^2 E)`
    Standard,
    /// `L (Lq E^2 + P E^2 + Lq P E)`
    Co4Basic,
    /// `L (N E^2 + N E + ceil(N log2 k) + k^2 E)`
    Co4,
}

impl std::str::FromStr for MacModel {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "standard" | "vit" => Ok(MacModel::Standard),
            "co4-basic" | "co4_basic" | "basic" => Ok(MacModel::Co4Basic),
            "co4" | "co4-topk" | "co4_topk" => Ok(MacModel::Co4),
            other => Err(crate::Error::config(format!("unknown MAC model '{other}'"))),
        }
    }
}

/// Evaluates a closed-form MAC model. `l` is the latent count, only used by
/// [`MacModel::Co4Basic`]; `k` only by [`MacModel::Co4`]. The `N log2 k`
/// term is rounded up to the next integer.
pub fn macs_estimate(model: MacModel, layers: u64, n: u64, e: u64, k: u64, l: u64) -> u64 {
    let per_layer = match model {
        MacModel::Standard => n * e * e + n * n * e,
        MacModel::Co4Basic => l * e * e + n * e * e + l * n * e,
        MacModel::Co4 => n * e * e + n * e + topk_log_term(n, k) + k * k * e,
    };
    layers * per_layer
}

/// Term-wise cost of one Co4 top-k layer with learned latents, keeping the
/// constant factors of the closed form: three projections, six elementwise
/// products in the modulation laws, the top-k selection and the two
/// attention products plus score scaling.
pub fn co4_term_model(n: u64, e: u64, k: u64, heads: u64) -> Vec<(Term, u64)> {
    vec![
        (Term::Projection, 3 * n * e * e),
        (Term::Modulation, 6 * n * e),
        (Term::TopK, topk_log_term(n, k)),
        (Term::Attention, 2 * k * k * e + heads * k * k),
    ]
}

/// `ceil(n * log2(k))`, zero for `k <= 1`.
pub fn topk_log_term(n: u64, k: u64) -> u64 {
    if k <= 1 {
        return 0;
    }
    let v = n as f64 * (k as f64).log2();
    // guard against 12.000000001-style float noise on exact powers of two
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r as u64
    } else {
        v.ceil() as u64
    }
}
