//! Pre-norm transformer encoder blocks used as the attention baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::sdpa;
use crate::autodiff::Var;
use crate::macs::{self, Term};
use crate::nn::{LayerNorm, Linear, ParamSet, Params};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub embed_dim: usize,
    pub num_tokens: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    /// Include the feed-forward sublayer.
    pub ffn: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            embed_dim: 128,
            num_tokens: 64,
            heads: 1,
            layers: 1,
            mlp_hidden: 256,
            ffn: true,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_hidden == 0 || self.num_tokens == 0 {
            return Err(Error::config("layers, mlp_hidden and num_tokens must be positive"));
        }
        Ok(())
    }
}

/// Multi-head self-attention sublayer: `x + Wo * attn(LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct Mhsa {
    pub ln: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, e: usize, heads: usize, rng: &mut R) -> Self {
        Mhsa {
            ln: LayerNorm::new(ps, &format!("{name}.ln"), e),
            q: Linear::new(ps, &format!("{name}.q"), e, e, true, rng),
            k: Linear::new(ps, &format!("{name}.k"), e, e, true, rng),
            v: Linear::new(ps, &format!("{name}.v"), e, e, true, rng),
            o: Linear::new(ps, &format!("{name}.o"), e, e, true, rng),
            heads,
        }
    }

    /// Returns the residual output and the `(B, H, N, N)` attention weights.
    pub fn forward<'t>(&self, p: &Params<'t>, x: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = macs::scoped(Term::Other, || self.ln.forward(p, x))?;
        let (q, k, v) = macs::scoped(Term::Projection, || -> Result<_> {
            Ok((self.q.forward(p, &h)?, self.k.forward(p, &h)?, self.v.forward(p, &h)?))
        })?;
        let (att, weights) = sdpa(&q, &k, &v, self.heads)?;
        let o = macs::scoped(Term::Projection, || self.o.forward(p, &att))?;
        Ok((x.add(&o)?, weights))
    }
}

/// Feed-forward sublayer: `x + W2 GELU(W1 LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub ln: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, e: usize, hidden: usize, rng: &mut R) -> Self {
        Ffn {
            ln: LayerNorm::new(ps, &format!("{name}.ln"), e),
            fc1: Linear::new(ps, &format!("{name}.fc1"), e, hidden, true, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, e, true, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Params<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        macs::scoped(Term::Readout, || {
            let h = self.fc1.forward(p, &self.ln.forward(p, x)?)?.gelu();
            x.add(&self.fc2.forward(p, &h)?)
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VitBlock {
    pub attn: Mhsa,
    pub ffn: Option<Ffn>,
}

impl VitBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cfg: &VitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let attn = Mhsa::new(ps, &format!("{name}.attn"), cfg.embed_dim, cfg.heads, rng);
        let ffn = cfg
            .ffn
            .then(|| Ffn::new(ps, &format!("{name}.ffn"), cfg.embed_dim, cfg.mlp_hidden, rng));
        Ok(VitBlock { attn, ffn })
    }

    pub fn forward<'t>(&self, p: &Params<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let (y, _) = self.attn.forward(p, x)?;
        match &self.ffn {
            Some(f) => f.forward(p, &y),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(e: usize, heads: usize, seed: u64) -> (ParamSet, Mhsa) {
        let mut ps = ParamSet::new();
        let m = Mhsa::new(&mut ps, "a", e, heads, &mut ChaCha8Rng::seed_from_u64(seed));
        // non-trivial biases and norms
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for id in ps.ids().collect::<Vec<_>>() {
            let shape = ps.get(id).shape().to_vec();
            if shape.len() == 1 {
                let t = Tensor::uniform(&shape, 0.5, 1.5, &mut rng);
                ps.set(id, t).unwrap();
            }
        }
        (ps, m)
    }

    /// Direct per-head double loop.
    fn naive_mhsa(ps: &ParamSet, m: &Mhsa, x: &Tensor) -> Tensor {
        let (b, n, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = m.heads;
        let d = e / h;
        let (g, be) = (ps.get(m.ln.gamma).data(), ps.get(m.ln.beta).data());
        let lin = |row: &[f64], l: &Linear| -> Vec<f64> {
            let w = ps.get(l.w).data();
            let bias = ps.get(l.b.unwrap()).data();
            (0..e)
                .map(|j| bias[j] + (0..e).map(|i| row[i] * w[i * e + j]).sum::<f64>())
                .collect()
        };
        let mut out = x.data().to_vec();
        for bi in 0..b {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|t| {
                    let r = &x.data()[(bi * n + t) * e..(bi * n + t + 1) * e];
                    let mean = r.iter().sum::<f64>() / e as f64;
                    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / e as f64;
                    r.iter()
                        .enumerate()
                        .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + be[j])
                        .collect()
                })
                .collect();
            let q: Vec<Vec<f64>> = rows.iter().map(|r| lin(r, &m.q)).collect();
            let k: Vec<Vec<f64>> = rows.iter().map(|r| lin(r, &m.k)).collect();
            let v: Vec<Vec<f64>> = rows.iter().map(|r| lin(r, &m.v)).collect();
            for i in 0..n {
                let mut att = vec![0.0; e];
                for hh in 0..h {
                    let s: Vec<f64> = (0..n)
                        .map(|j| (0..d).map(|c| q[i][hh * d + c] * k[j][hh * d + c]).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..n {
                        let w = (s[j] - mx).exp() / z;
                        for c in 0..d {
                            att[hh * d + c] += w * v[j][hh * d + c];
                        }
                    }
                }
                let o = lin(&att, &m.o);
                for j in 0..e {
                    out[(bi * n + i) * e + j] += o[j];
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out).unwrap()
    }

    #[test]
    fn matches_naive_oracle() {
        for (heads, seed) in [(1, 1), (2, 2), (4, 3)] {
            let (ps, m) = setup(8, heads, seed);
            let x = Tensor::uniform(&[2, 5, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 10));
            let tape = Tape::no_grad();
            let p = ps.bind(&tape);
            let (y, w) = m.forward(&p, &tape.constant(x.clone())).unwrap();
            assert!(y.value().max_abs_diff(&naive_mhsa(&ps, &m, &x)) < 1e-10);
            for row in w.value().data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (ps, m) = setup(4, 1, 4);
        let x = Tensor::uniform(&[1, 1, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let tape = Tape::no_grad();
        let p = ps.bind(&tape);
        let xv = tape.constant(x.clone());
        let (y, w) = m.forward(&p, &xv).unwrap();
        assert_eq!(w.value().data(), &[1.0]);
        let h = m.ln.forward(&p, &xv).unwrap();
        let expect = xv.add(&m.o.forward(&p, &m.v.forward(&p, &h).unwrap()).unwrap()).unwrap();
        assert!(y.value().max_abs_diff(expect.value()) < 1e-12);
    }

    #[test]
    fn uniform_keys_give_uniform_weights() {
        let (mut ps, m) = setup(4, 1, 6);
        let kw = ps.get(m.k.w).shape().to_vec();
        ps.set(m.k.w, Tensor::zeros(&kw)).unwrap();
        let tape = Tape::no_grad();
        let p = ps.bind(&tape);
        let x = Tensor::uniform(&[1, 7, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let (_, w) = m.forward(&p, &tape.constant(x)).unwrap();
        assert!(w.value().data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-12));
    }

    #[test]
    fn permutation_equivariant() {
        let mut ps = ParamSet::new();
        let cfg = VitConfig {
            embed_dim: 8,
            num_tokens: 6,
            heads: 2,
            mlp_hidden: 16,
            ..VitConfig::default()
        };
        let blk = VitBlock::new(&mut ps, "b", &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let x = Tensor::uniform(&[1, 6, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let perm = [3, 0, 5, 1, 4, 2];
        let px = Tensor::from_fn(&[1, 6, 8], |i| x.data()[perm[i / 8] * 8 + i % 8]);
        let tape = Tape::no_grad();
        let p = ps.bind(&tape);
        let y = blk.forward(&p, &tape.constant(x)).unwrap();
        let py = blk.forward(&p, &tape.constant(px)).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                let a = py.value().data()[i * 8 + j];
                let b = y.value().data()[src * 8 + j];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_gradcheck() {
        let mut ps = ParamSet::new();
        let cfg = VitConfig {
            embed_dim: 4,
            num_tokens: 3,
            heads: 2,
            mlp_hidden: 6,
            ..VitConfig::default()
        };
        let blk = VitBlock::new(&mut ps, "b", &cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let mut inputs = ps.values();
        inputs.push(Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(11)));
        let err = gradcheck(&inputs, 1e-5, |_, v| {
            let (params, x) = v.split_at(v.len() - 1);
            Ok(blk.forward(&Params::from_vars(params.to_vec()), &x[0])?.tanh().mean())
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
