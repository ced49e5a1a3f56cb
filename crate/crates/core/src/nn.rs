//! Parameter groups and the pre-norm transformer block.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::DEFAULT_LN_EPS;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Declares a struct of named tensors together with a mirror struct of tape
/// variables, plus helpers to enumerate and bind them in declaration order.
#[macro_export]
macro_rules! param_group {
    ($(#[$m:meta])* pub struct $name:ident / $vars:ident { $($field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $(pub $field: $crate::tensor::Tensor,)*
        }

        #[derive(Debug, Clone, Copy)]
        pub struct $vars<'t> {
            $(pub $field: $crate::autodiff::Var<'t>,)*
        }

        impl $name {
            pub const FIELD_NAMES: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn tensors(&self) -> Vec<&$crate::tensor::Tensor> {
                vec![$(&self.$field),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut $crate::tensor::Tensor> {
                vec![$(&mut self.$field),*]
            }

            /// Registers every tensor as a trainable leaf.
            pub fn bind<'t>(&self, tape: &'t $crate::autodiff::Tape) -> $vars<'t> {
                $vars { $($field: tape.param(self.$field.clone()),)* }
            }

            /// Registers every tensor as a frozen leaf.
            pub fn bind_frozen<'t>(&self, tape: &'t $crate::autodiff::Tape) -> $vars<'t> {
                $vars { $($field: tape.constant(self.$field.clone()),)* }
            }

            pub fn from_tensors(mut it: impl Iterator<Item = $crate::tensor::Tensor>) -> Option<Self> {
                Some($name { $($field: it.next()?,)* })
            }
        }

        impl<'t> $vars<'t> {
            pub fn to_vec(&self) -> Vec<$crate::autodiff::Var<'t>> {
                vec![$(self.$field),*]
            }

            pub fn from_slice(vars: &[$crate::autodiff::Var<'t>]) -> Self {
                let mut it = vars.iter().copied();
                $vars { $($field: it.next().expect(concat!("missing variable for ", stringify!($name))),)* }
            }
        }
    };
}

/// Gaussian matrix with standard deviation `1/√fan_in`.
pub fn init_matrix(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    Tensor::matrix(fan_in, fan_out, rng.normals(fan_in * fan_out, std)).expect("positive dims")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.mlp_hidden == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::arg(format!(
                "block dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

param_group! {
    /// Weights of one pre-norm transformer block. Matrices map row vectors:
    /// `y = x · W + b`.
    pub struct BlockParams / BlockVars {
        ln1_gain, ln1_bias,
        wq, bq, wk, bk, wv, bv, wo, bo,
        ln2_gain, ln2_bias,
        w1, b1, w2, b2,
    }
}

impl BlockParams {
    pub fn init(cfg: &BlockConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.dim;
        let h = cfg.mlp_hidden;
        let zeros = |n| Tensor::zeros(&[1, n]);
        let ones = |n| Tensor::filled(&[1, n], 1.0);
        BlockParams {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            wq: init_matrix(rng, d, d),
            bq: zeros(d),
            wk: init_matrix(rng, d, d),
            bk: zeros(d),
            wv: init_matrix(rng, d, d),
            bv: zeros(d),
            wo: init_matrix(rng, d, d),
            bo: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            w1: init_matrix(rng, d, h),
            b1: zeros(h),
            w2: init_matrix(rng, h, d),
            b2: zeros(d),
        }
    }

    pub fn config(&self, heads: usize) -> BlockConfig {
        BlockConfig {
            dim: self.wq.shape()[0],
            heads,
            mlp_hidden: self.w1.shape()[1],
        }
    }
}

/// `x + MHA(LN₁(x))`, then `h + MLP(LN₂(h))`, on a `len × dim` sequence.
pub fn attention_block_vars<'t>(x: Var<'t>, p: &BlockVars<'t>, heads: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    let dim = p.wq.shape()[0];
    if shape.len() != 2 || shape[1] != dim {
        return Err(Error::arg(format!(
            "attention block expects a len x {dim} sequence, got {shape:?}"
        )));
    }
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::arg(format!("{heads} heads do not divide dim {dim}")));
    }
    let tape = x.tape();
    let head_dim = dim / heads;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();

    let h = x
        .layer_norm(DEFAULT_LN_EPS)?
        .mul_row(p.ln1_gain)?
        .add_row(p.ln1_bias)?;
    let q = h.matmul(p.wq)?.add_row(p.bq)?;
    let k = h.matmul(p.wk)?.add_row(p.bk)?;
    let v = h.matmul(p.wv)?.add_row(p.bv)?;
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let start = head * head_dim;
        let qh = q.slice_cols(start, head_dim)?;
        let kh = k.slice_cols(start, head_dim)?;
        let vh = v.slice_cols(start, head_dim)?;
        let attn = qh.matmul_bt(kh)?.scale(inv_sqrt)?.softmax()?;
        outs.push(attn.matmul(vh)?);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let x = x.add(merged.matmul(p.wo)?.add_row(p.bo)?)?;

    let h = x
        .layer_norm(DEFAULT_LN_EPS)?
        .mul_row(p.ln2_gain)?
        .add_row(p.ln2_bias)?;
    let m = h
        .matmul(p.w1)?
        .add_row(p.b1)?
        .gelu()?
        .matmul(p.w2)?
        .add_row(p.b2)?;
    x.add(m)
}

/// Forward-only evaluation of one transformer block.
pub fn attention_block(x: &Tensor, params: &BlockParams, heads: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = params.bind_frozen(&tape);
    Ok(attention_block_vars(xv, &pv, heads)?.value())
}
