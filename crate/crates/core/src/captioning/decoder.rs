//! Memory-conditioned transformer decoder.
//!
//! Each block runs causal self-attention, cross-attention over the encoded
//! multi-granularity tokens, and a feed-forward sublayer, all pre-norm. The
//! norms are memory-conditioned: the gain and bias of every layer norm are
//! shifted per position by a projection of the relational memory state
//! reached after consuming that position's input token.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::memory::RelationalMemory;
use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear, LAYER_NORM_EPS};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: usize,
    pub memory_slots: usize,
    /// Longest input sequence (positions) the decoder accepts.
    pub max_len: usize,
}

/// Layer norm whose gain and bias receive a per-row shift computed from the
/// memory summary.
#[derive(Debug, Clone)]
pub struct MemoryNorm {
    pub norm: LayerNorm,
    /// Memory summary → `[gain shift | bias shift]`.
    pub shift: Linear,
}

impl MemoryNorm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize) -> Result<Self> {
        let norm = LayerNorm::new(store, name, d)?;
        let weight = store.add(format!("{name}.shift.weight"), init.normal(d, 2 * d, 0.02))?;
        let bias = store.add(format!("{name}.shift.bias"), Tensor::zeros(1, 2 * d))?;
        Ok(Self {
            norm,
            shift: Linear {
                weight,
                bias: Some(bias),
                d_in: d,
                d_out: 2 * d,
            },
        })
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>, memory: Var<'a, T>) -> Result<Var<'a, T>> {
        let d = x.cols();
        let normed = x.normalize_rows(T::of(LAYER_NORM_EPS))?;
        let shift = self.shift.forward(ctx, memory)?;
        let gain = shift.slice_cols(0, d)?.add_row(ctx.param(self.norm.gain)?)?;
        let bias = shift.slice_cols(d, d)?.add_row(ctx.param(self.norm.bias)?)?;
        Ok(normed.mul(gain)?.add(bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_norm: MemoryNorm,
    pub self_attn: AttentionParams,
    pub cross_norm: MemoryNorm,
    pub cross_attn: AttentionParams,
    pub ff_norm: MemoryNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embed: ParamId,
    pub memory: RelationalMemory,
    /// Flattened memory `1×(S·d)` → `1×d`, followed by a ReLU.
    pub memory_summary: Linear,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: MemoryNorm,
    pub output: Linear,
}

/// Sinusoidal position codes for positions `start..start + rows`.
pub fn positional_encoding<T: Scalar>(start: usize, rows: usize, d: usize) -> Tensor<T> {
    Tensor::from_shape_fn(rows, d, |i, j| {
        let pos = (start + i) as f64;
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = pos / rate;
        T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Cached state for token-by-token decoding without a gradient tape.
#[derive(Clone)]
pub struct DecoderState<T> {
    position: usize,
    memory: Rc<Tensor<T>>,
    self_kv: Vec<(Rc<Tensor<T>>, Rc<Tensor<T>>)>,
    cross_kv: Rc<Vec<(Rc<Tensor<T>>, Rc<Tensor<T>>)>>,
}

impl<T: Scalar> DecoderState<T> {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn memory(&self) -> &Tensor<T> {
        &self.memory
    }
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, config: DecoderConfig) -> Result<Self> {
        let d = config.d_model;
        if config.vocab_size == 0 || config.max_len == 0 || config.layers == 0 {
            return Err(Error::Config("decoder needs a vocabulary, a positive max_len and at least one layer".into()));
        }
        let embed = store.add("decoder.embed", init.normal(config.vocab_size, d, 1.0))?;
        let memory = RelationalMemory::new(store, init, "decoder.memory", config.memory_slots, d, config.n_heads)?;
        let memory_summary = Linear::new(store, init, "decoder.memory_summary", config.memory_slots * d, d, true)?;
        let layers = (0..config.layers)
            .map(|i| {
                let name = format!("decoder.layer.{i}");
                Ok(DecoderLayer {
                    self_norm: MemoryNorm::new(store, init, &format!("{name}.self_norm"), d)?,
                    self_attn: AttentionParams::new(store, init, &format!("{name}.self_attn"), d, config.n_heads)?,
                    cross_norm: MemoryNorm::new(store, init, &format!("{name}.cross_norm"), d)?,
                    cross_attn: AttentionParams::new(store, init, &format!("{name}.cross_attn"), d, config.n_heads)?,
                    ff_norm: MemoryNorm::new(store, init, &format!("{name}.ff_norm"), d)?,
                    ff: FeedForward::new(store, init, &format!("{name}.ff"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = MemoryNorm::new(store, init, "decoder.final_norm", d)?;
        let output = Linear::new(store, init, "decoder.output", d, config.vocab_size, true)?;
        Ok(Self {
            config,
            embed,
            memory,
            memory_summary,
            layers,
            final_norm,
            output,
        })
    }

    /// Every memory→norm shift projection, outermost first.
    pub fn norm_shift_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let mut push = |n: &MemoryNorm| {
            ids.push(n.shift.weight);
            ids.extend(n.shift.bias);
        };
        for l in &self.layers {
            push(&l.self_norm);
            push(&l.cross_norm);
            push(&l.ff_norm);
        }
        push(&self.final_norm);
        ids
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Data("decoder input is empty".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn summarise<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, flat: Var<'a, T>) -> Result<Var<'a, T>> {
        Ok(self.memory_summary.forward(ctx, flat)?.relu()?)
    }

    /// Teacher-forced logits `T×V` for input ids over encoded context tokens.
    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, ids: &[u32], context: Var<'a, T>) -> Result<Var<'a, T>> {
        self.check_tokens(ids)?;
        let d = self.config.d_model;
        let tape = ctx.tape();
        let positions: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let embedded = ctx.param(self.embed)?.embedding(&positions)?;

        let mut memory = self.memory.initial(ctx)?;
        let mut states = Vec::with_capacity(ids.len());
        for t in 0..ids.len() {
            memory = self.memory.update(ctx, memory, embedded.slice_rows(t, 1)?)?.memory;
            states.push(memory.reshape(vec![1, self.memory.slots * d])?);
        }
        let summary = self.summarise(ctx, tape.concat_rows(&states)?)?;

        let mut x = embedded.add(ctx.constant(positional_encoding(0, ids.len(), d)))?;
        for layer in &self.layers {
            let z = layer.self_norm.forward(ctx, x, summary)?;
            x = x.add(layer.self_attn.forward(ctx, z, z, z, true)?.output)?;
            let z = layer.cross_norm.forward(ctx, x, summary)?;
            x = x.add(layer.cross_attn.forward(ctx, z, context, context, false)?.output)?;
            let z = layer.ff_norm.forward(ctx, x, summary)?;
            x = x.add(layer.ff.forward(ctx, z)?)?;
        }
        let x = self.final_norm.forward(ctx, x, summary)?;
        self.output.forward(ctx, x)
    }

    /// Prepares incremental decoding over fixed context tokens.
    pub fn start<T: Scalar>(&self, params: &ParamStore<T>, context: &Tensor<T>) -> Result<DecoderState<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, false);
        let c = ctx.constant(context.clone());
        let cross_kv = self
            .layers
            .iter()
            .map(|l| {
                let (k, v) = l.cross_attn.project_kv(&ctx, c, c)?;
                Ok((k.value(), v.value()))
            })
            .collect::<Result<Vec<_>>>()?;
        let d = self.config.d_model;
        let empty = Rc::new(Tensor::zeros(0, d));
        Ok(DecoderState {
            position: 0,
            memory: Rc::new(params.get(self.memory.initial).clone()),
            self_kv: vec![(Rc::clone(&empty), Rc::clone(&empty)); self.layers.len()],
            cross_kv: Rc::new(cross_kv),
        })
    }

    /// Feeds one token and returns the logits for the next position.
    ///
    /// Produces exactly the values of the matching row of [`forward`](Self::forward).
    pub fn step<T: Scalar>(&self, params: &ParamStore<T>, state: &mut DecoderState<T>, token: u32) -> Result<Vec<T>> {
        if state.position >= self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: state.position + 1,
                max: self.config.max_len,
            });
        }
        self.check_tokens(&[token])?;
        let d = self.config.d_model;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, false);
        let e = ctx.param(self.embed)?.embedding(&[token as usize])?;
        let memory = tape.leaf(Rc::clone(&state.memory), false);
        let memory = self.memory.update(&ctx, memory, e)?.memory;
        let summary = self.summarise(&ctx, memory.reshape(vec![1, self.memory.slots * d])?)?;

        let mut x = e.add(ctx.constant(positional_encoding(state.position, 1, d)))?;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.self_norm.forward(&ctx, x, summary)?;
            let (k_new, v_new) = layer.self_attn.project_kv(&ctx, z, z)?;
            let (k_old, v_old) = &state.self_kv[i];
            let k = tape.concat_rows(&[tape.leaf(Rc::clone(k_old), false), k_new])?;
            let v = tape.concat_rows(&[tape.leaf(Rc::clone(v_old), false), v_new])?;
            x = x.add(layer.self_attn.attend(&ctx, z, k, v, false)?.output)?;
            state.self_kv[i] = (k.value(), v.value());

            let z = layer.cross_norm.forward(&ctx, x, summary)?;
            let (ck, cv) = &state.cross_kv[i];
            let ck = tape.leaf(Rc::clone(ck), false);
            let cv = tape.leaf(Rc::clone(cv), false);
            x = x.add(layer.cross_attn.attend(&ctx, z, ck, cv, false)?.output)?;
            let z = layer.ff_norm.forward(&ctx, x, summary)?;
            x = x.add(layer.ff.forward(&ctx, z)?)?;
        }
        let x = self.final_norm.forward(&ctx, x, summary)?;
        let logits = self.output.forward(&ctx, x)?.value();
        state.memory = memory.value();
        state.position += 1;
        Ok(logits.data().to_vec())
    }
}
