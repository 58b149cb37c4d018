//! Gated relational memory updated once per decoded token.
//!
//! The memory is an `S×d` slot matrix. Each step attends from the slots over
//! `[memory; token embedding]`, refines the result with a small MLP, and
//! blends it into the previous state through sigmoid input and forget gates:
//!
//! `M' = forget ⊙ M + input ⊙ tanh(candidate)`

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::Scalar;

#[derive(Debug, Clone)]
pub struct RelationalMemory {
    pub slots: usize,
    pub d_model: usize,
    pub initial: ParamId,
    pub attn: AttentionParams,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    /// Token embedding → `[input | forget]` gate pre-activations.
    pub gate_input: Linear,
    /// `tanh(M)` → `[input | forget]` gate pre-activations.
    pub gate_memory: Linear,
    pub input_bias: ParamId,
    pub forget_bias: ParamId,
}

/// Memory state after one update and the gate activations that produced it.
pub struct MemoryStep<'a, T> {
    pub memory: Var<'a, T>,
    pub input_gate: Var<'a, T>,
    pub forget_gate: Var<'a, T>,
}

impl RelationalMemory {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        slots: usize,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if slots == 0 {
            return Err(Error::Config("memory needs at least one slot".into()));
        }
        let eye = Tensor::from_shape_fn(slots, d_model, |i, j| if i == j { T::one() } else { T::zero() });
        Ok(Self {
            slots,
            d_model,
            initial: store.add(format!("{name}.initial"), eye)?,
            attn: AttentionParams::new(store, init, &format!("{name}.attn"), d_model, n_heads)?,
            mlp_in: Linear::new(store, init, &format!("{name}.mlp_in"), d_model, d_model, true)?,
            mlp_out: Linear::new(store, init, &format!("{name}.mlp_out"), d_model, d_model, true)?,
            gate_input: Linear::new(store, init, &format!("{name}.gate_input"), d_model, 2 * d_model, false)?,
            gate_memory: Linear::new(store, init, &format!("{name}.gate_memory"), d_model, 2 * d_model, false)?,
            input_bias: store.add(format!("{name}.input_bias"), Tensor::zeros(1, d_model))?,
            forget_bias: store.add(format!("{name}.forget_bias"), Tensor::full(1, d_model, T::one()))?,
        })
    }

    pub fn initial<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>) -> Result<Var<'a, T>> {
        ctx.param(self.initial)
    }

    /// One gated update of the slot matrix from the previous token embedding.
    pub fn update<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        memory: Var<'a, T>,
        embedding: Var<'a, T>,
    ) -> Result<MemoryStep<'a, T>> {
        let d = self.d_model;
        if embedding.rows() != 1 || embedding.cols() != d {
            return Err(Error::Dimension(format!(
                "memory update expects a 1×{d} embedding, got {:?}",
                embedding.shape()
            )));
        }
        if memory.rows() != self.slots || memory.cols() != d {
            return Err(Error::Dimension(format!(
                "memory must be {}×{d}, got {:?}",
                self.slots,
                memory.shape()
            )));
        }
        let tape = ctx.tape();
        let with_input = tape.concat_rows(&[memory, embedding])?;
        let attended = memory.add(self.attn.forward(ctx, memory, with_input, with_input, false)?.output)?;
        let refined = self.mlp_in.forward(ctx, attended)?.relu()?;
        let refined = self.mlp_out.forward(ctx, refined)?.relu()?;
        let candidate = attended.add(refined)?;

        let from_memory = self.gate_memory.forward(ctx, memory.tanh()?)?;
        let from_input = self.gate_input.forward(ctx, embedding)?;
        let gates = from_memory.add_row(from_input)?;
        let input_gate = gates
            .slice_cols(0, d)?
            .add_row(ctx.param(self.input_bias)?)?
            .sigmoid()?;
        let forget_gate = gates
            .slice_cols(d, d)?
            .add_row(ctx.param(self.forget_bias)?)?
            .sigmoid()?;
        let next = input_gate
            .mul(candidate.tanh()?)?
            .add(forget_gate.mul(memory)?)?;
        Ok(MemoryStep {
            memory: next,
            input_gate,
            forget_gate,
        })
    }
}
