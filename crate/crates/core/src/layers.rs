//! Small parameterised building blocks shared by the encoder and decoder.

use crate::error::Result;
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.xavier(d_in, d_out))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(1, d_out))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let y = x.matmul(ctx.param(self.weight)?)?;
        match self.bias {
            Some(b) => Ok(y.add_row(ctx.param(b)?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(1, d, T::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, d))?,
        })
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        Ok(x.layer_norm(ctx.param(self.gain)?, ctx.param(self.bias)?, T::of(LAYER_NORM_EPS))?)
    }
}

/// Position-wise `relu(x W1 + b1) W2 + b2` with inner width `4·d`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, init, &format!("{name}.inner"), d, 4 * d, true)?,
            outer: Linear::new(store, init, &format!("{name}.outer"), 4 * d, d, true)?,
        })
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let h = self.inner.forward(ctx, x)?.relu()?;
        self.outer.forward(ctx, h)
    }
}
