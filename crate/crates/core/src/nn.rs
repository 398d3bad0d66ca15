//! Parameterized building blocks shared by the networks.

use alloc::format;

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{he_normal, normal, ParamId, Params};
use crate::scalar::Scalar;
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::Tensor;

/// Weight initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for layers followed by ReLU.
    He,
    /// `N(0, 1 / fan_in)`, for linear outputs.
    Lecun,
    /// `N(0, 0.01 / fan_in)`, for regression heads that should start near zero.
    Small,
    Zero,
}

fn init<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, how: Init) -> Tensor<S> {
    match how {
        Init::He => he_normal(rng, shape, fan_in),
        Init::Lecun => normal(rng, shape, libm::sqrt(1.0 / fan_in.max(1) as f64)),
        Init::Small => normal(rng, shape, libm::sqrt(0.01 / fan_in.max(1) as f64)),
        Init::Zero => Tensor::zeros(shape),
    }
}

/// Dense layer on row vectors: `[N, in] -> [N, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut Params<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        how: Init,
        rng: &mut R,
    ) -> Self {
        let w = params.add(format!("{name}.w"), init(rng, &[fan_in, fan_out], fan_in, how));
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(params, b);
                tape.add_bias(y, b, 1)
            }
            None => Ok(y),
        }
    }
}

/// Pointwise channel projection on channel-first tokens: `[in, N] -> [out, N]`.
///
/// Same map as a 1x1 convolution on `[in, H, W]` flattened to `[in, H*W]`.
#[derive(Clone, Debug)]
pub struct Proj {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Proj {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut Params<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        how: Init,
        rng: &mut R,
    ) -> Self {
        let w = params.add(format!("{name}.w"), init(rng, &[fan_out, fan_in], fan_in, how));
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[0] != self.fan_in {
            return Err(Error::Shape { op: "proj", detail: format!("input {:?}, expected [{}, N]", s, self.fan_in) });
        }
        let w = tape.param(params, self.w);
        let y = tape.matmul(w, x)?;
        match self.b {
            Some(b) => {
                let b = tape.param(params, b);
                tape.add_bias(y, b, 0)
            }
            None => Ok(y),
        }
    }

    /// Applies the projection to a `[in, H, W]` map.
    pub fn forward_map<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape { op: "proj", detail: format!("input {:?}, expected [C, H, W]", s) });
        }
        let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
        let y = self.forward(tape, params, flat)?;
        tape.reshape(y, &[self.fan_out, s[1], s[2]])
    }
}

/// 2-D convolution `[in, H, W] -> [out, H', W']` with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut Params<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        how: Init,
        rng: &mut R,
    ) -> Self {
        let w = params.add(format!("{name}.w"), init(rng, &[fan_out, fan_in, kernel, kernel], fan_in * kernel * kernel, how));
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b, spec, fan_in, fan_out }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.w);
        let y = tape.conv2d(x, w, self.spec)?;
        match self.b {
            Some(b) => {
                let b = tape.param(params, b);
                tape.add_bias(y, b, 0)
            }
            None => Ok(y),
        }
    }
}
