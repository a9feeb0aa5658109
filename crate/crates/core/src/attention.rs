//! Scaled dot-product attention shared by the readout and the baseline.

use crate::autodiff::Var;
use crate::macs::{self, Term};
use crate::{Error, Result};

/// Multi-head attention on `(B, T, E)` inputs, `E` split into `heads`
/// groups, scores scaled by `1/sqrt(E/heads)`. Returns the `(B, T, E)`
/// output and the `(B, H, T, T)` attention weights.
pub fn sdpa<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>, heads: usize) -> Result<(Var<'t>, Var<'t>)> {
    let shape = q.shape().to_vec();
    if shape.len() != 3 || k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
        return Err(Error::shape(format!(
            "attention needs equal (B, T, E) inputs, got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (b, t, e) = (shape[0], shape[1], shape[2]);
    if heads == 0 || e % heads != 0 {
        return Err(Error::config(format!("embedding {e} not divisible by {heads} heads")));
    }
    let d = e / heads;
    let split = |x: &Var<'t>| -> Result<Var<'t>> {
        if heads == 1 {
            x.reshape(&[b, 1, t, d])
        } else {
            x.reshape(&[b, t, heads, d])?.permute(&[0, 2, 1, 3])
        }
    };
    macs::scoped(Term::Attention, || {
        let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);
        let scores = qh.matmul(&kh.transpose_last2()?)?.mul_scalar(1.0 / (d as f64).sqrt());
        let attn = scores.softmax_last();
        let out = attn.matmul(&vh)?;
        let out = if heads == 1 {
            out.reshape(&[b, t, e])?
        } else {
            out.permute(&[0, 2, 1, 3])?.reshape(&[b, t, e])?
        };
        Ok((out, attn))
    })
}
