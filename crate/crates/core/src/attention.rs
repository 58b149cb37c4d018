//! Multi-head scaled dot-product attention and pre-norm encoder layers.
//!
//! Attention weights are returned alongside every output so the fusion gate
//! can expose them as [`AttentionRecord`]s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::Var;
use crate::Scalar;

/// Projection matrices of one multi-head attention block. All four are
/// `d_model×d_model`, without biases.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub d_model: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

/// Output of an attention call with its per-head post-softmax weights.
pub struct Attended<'a, T> {
    pub output: Var<'a, T>,
    pub weights: Vec<Var<'a, T>>,
}

impl AttentionParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible into {n_heads} heads"
            )));
        }
        let mut mat = |suffix: &str| store.add(format!("{name}.{suffix}"), init.xavier(d_model, d_model));
        Ok(Self {
            n_heads,
            d_model,
            w_q: mat("w_q")?,
            w_k: mat("w_k")?,
            w_v: mat("w_v")?,
            w_o: mat("w_o")?,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn check_width<T: Scalar>(&self, what: &str, x: Var<'_, T>) -> Result<()> {
        if x.cols() != self.d_model {
            return Err(Error::Dimension(format!(
                "{what} has width {}, attention expects d_model = {}",
                x.cols(),
                self.d_model
            )));
        }
        Ok(())
    }

    /// Projects keys and values. Split out so decoders can cache them.
    pub fn project_kv<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        keys: Var<'a, T>,
        values: Var<'a, T>,
    ) -> Result<(Var<'a, T>, Var<'a, T>)> {
        self.check_width("keys", keys)?;
        self.check_width("values", values)?;
        if keys.rows() != values.rows() {
            return Err(Error::Dimension(format!(
                "{} keys but {} values",
                keys.rows(),
                values.rows()
            )));
        }
        if keys.rows() == 0 {
            return Err(Error::Dimension("attention over zero keys".into()));
        }
        Ok((
            keys.matmul(ctx.param(self.w_k)?)?,
            values.matmul(ctx.param(self.w_v)?)?,
        ))
    }

    /// Attends from raw queries over already-projected keys and values.
    pub fn attend<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        queries: Var<'a, T>,
        k_proj: Var<'a, T>,
        v_proj: Var<'a, T>,
        causal: bool,
    ) -> Result<Attended<'a, T>> {
        self.check_width("queries", queries)?;
        let q = queries.matmul(ctx.param(self.w_q)?)?;
        let dk = self.d_k();
        let scale = T::of(1.0 / (dk as f64).sqrt());
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k_proj, v_proj)
            } else {
                (
                    q.slice_cols(h * dk, dk)?,
                    k_proj.slice_cols(h * dk, dk)?,
                    v_proj.slice_cols(h * dk, dk)?,
                )
            };
            let scores = qh.matmul(kh.transpose()?)?.scale(scale)?;
            let p = if causal {
                scores.causal_softmax_rows()?
            } else {
                scores.softmax_rows()?
            };
            heads.push(p.matmul(vh)?);
            weights.push(p);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            ctx.tape().concat_cols(&heads)?
        };
        Ok(Attended {
            output: joined.matmul(ctx.param(self.w_o)?)?,
            weights,
        })
    }

    /// `softmax(QKᵀ/√d_k)V` per head, heads concatenated and output-projected.
    pub fn forward<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        queries: Var<'a, T>,
        keys: Var<'a, T>,
        values: Var<'a, T>,
        causal: bool,
    ) -> Result<Attended<'a, T>> {
        let (k, v) = self.project_kv(ctx, keys, values)?;
        self.attend(ctx, queries, k, v, causal)
    }
}

/// Multi-head attention returning the output and a labelled weight record.
pub fn mha<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    params: &AttentionParams,
    queries: Var<'a, T>,
    keys: Var<'a, T>,
    values: Var<'a, T>,
    query_labels: Vec<String>,
    key_labels: Vec<String>,
) -> Result<(Var<'a, T>, AttentionRecord)> {
    let att = params.forward(ctx, queries, keys, values, false)?;
    let record = AttentionRecord::from_weights(&att.weights, query_labels, key_labels);
    Ok((att.output, record))
}

/// Post-softmax attention weights of every head, `[head][query][key]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub n_heads: usize,
    pub query_labels: Vec<String>,
    pub key_labels: Vec<String>,
    pub heads: Vec<Vec<Vec<f64>>>,
}

impl AttentionRecord {
    pub fn from_weights<T: Scalar>(weights: &[Var<'_, T>], query_labels: Vec<String>, key_labels: Vec<String>) -> Self {
        let heads: Vec<Vec<Vec<f64>>> = weights.iter().map(|w| w.value().to_f64_rows()).collect();
        Self {
            n_heads: heads.len(),
            query_labels,
            key_labels,
            heads,
        }
    }

    pub fn query_len(&self) -> usize {
        self.heads.first().map_or(0, Vec::len)
    }

    pub fn key_len(&self) -> usize {
        self.heads
            .first()
            .and_then(|h| h.first())
            .map_or(0, Vec::len)
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.heads
            .iter()
            .flatten()
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Weight on the key named `label`, averaged over heads and query rows.
    pub fn mass(&self, label: &str) -> Result<f64> {
        let k = self
            .key_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        let mut total = 0.0;
        let mut count = 0usize;
        for head in &self.heads {
            for row in head {
                total += row[k];
                count += 1;
            }
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    pub fn to_document(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Pre-norm transformer encoder layer: norm → self-attention → add, then
/// norm → feed-forward → add.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: AttentionParams,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d_model)?,
            attn: AttentionParams::new(store, init, &format!("{name}.attn"), d_model, n_heads)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d_model)?,
            ff: FeedForward::new(store, init, &format!("{name}.ff"), d_model)?,
        })
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        Ok(self.forward_with_weights(ctx, x)?.output)
    }

    /// Like [`forward`](Self::forward) but also returns the self-attention weights.
    pub fn forward_with_weights<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Attended<'a, T>> {
        if x.rows() == 0 {
            return Err(Error::Dimension("encoder layer over zero tokens".into()));
        }
        let z = self.attn_norm.forward(ctx, x)?;
        let att = self.attn.forward(ctx, z, z, z, false)?;
        let x = x.add(att.output)?;
        let z = self.ff_norm.forward(ctx, x)?;
        let x = x.add(self.ff.forward(ctx, z)?)?;
        Ok(Attended {
            output: x,
            weights: att.weights,
        })
    }
}
