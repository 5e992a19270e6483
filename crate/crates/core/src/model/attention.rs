use super::layers::{LayerNorm, Linear};
use super::params::{Binding, ParamStore};
use crate::error::{CtsError, Result};
use crate::tensor::{RngState, Scalar, Tape, Var};

/// Scaled dot-product attention over `[.., P, d_h]` operands.
///
/// Returns the attended values and the attention weights `[.., P, P]`,
/// whose rows sum to one.
pub fn sdpa<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, scale_dim: usize) -> Result<(Var, Var)> {
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, T::from_f64(1.0 / (scale_dim as f64).sqrt()));
    let weights = tape.softmax_lastdim(scores)?;
    let out = tape.bmm(weights, v, false)?;
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    /// Width under the square root of the score scaling.
    pub scale_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        scale_dim: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(CtsError::config(format!(
                "token width {} is not divisible into {} heads",
                d, heads
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
            scale_dim,
        })
    }

    fn split<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let t = tape.reshape(x, &[s[0], s[1], self.heads, s[2] / self.heads])?;
        tape.permute(t, &[0, 2, 1, 3])
    }

    /// Self-attention on `[N, P, d]` tokens; also returns `[N, h, P, P]`
    /// attention weights.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] % self.heads != 0 {
            return Err(CtsError::config(format!(
                "attention input {:?} incompatible with {} heads",
                s, self.heads
            )));
        }
        let q = self.q.forward(tape, b, x)?;
        let k = self.k.forward(tape, b, x)?;
        let v = self.v.forward(tape, b, x)?;
        let (q, k, v) = (self.split(tape, q)?, self.split(tape, k)?, self.split(tape, v)?);
        let (o, weights) = sdpa(tape, q, k, v, self.scale_dim)?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &s)?;
        Ok((self.out.forward(tape, b, o)?, weights))
    }
}

/// Position-wise feed-forward network with hidden width `factor * d`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, factor: usize, rng: &mut RngState) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, factor * d, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), factor * d, d, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Binding,
        x: Var,
        dropout: f64,
        training: bool,
        rng: &mut RngState,
    ) -> Result<Var> {
        let h = self.fc1.forward(tape, b, x)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, dropout, training, rng)?;
        self.fc2.forward(tape, b, h)
    }
}

/// Pre-norm Transformer block:
/// `x1 = x + drop(mha(norm1(x)))`, `out = x1 + drop(ffn(norm2(x1)))`.
#[derive(Clone, Debug)]
pub struct TransBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        scale_dim: usize,
        ffn_factor: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(TransBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, scale_dim, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_factor, rng),
        })
    }

    /// Returns the block output and the attention weights.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Binding,
        x: Var,
        dropout: f64,
        training: bool,
        rng: &mut RngState,
    ) -> Result<(Var, Var)> {
        let h = self.norm1.forward(tape, b, x)?;
        let (a, weights) = self.attn.forward(tape, b, h)?;
        let a = tape.dropout(a, dropout, training, rng)?;
        let x1 = tape.add(x, a)?;
        let h = self.norm2.forward(tape, b, x1)?;
        let f = self.ffn.forward(tape, b, h, dropout, training, rng)?;
        let f = tape.dropout(f, dropout, training, rng)?;
        Ok((tape.add(x1, f)?, weights))
    }
}
