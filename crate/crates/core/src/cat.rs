//! Bidirectional cross-attention fusion of image features and the hand prior.
//!
//! Spatial positions are tokens and channels are features. Internally every
//! stream is kept channel-first as `[d_model, N]` with `N = H * W` in
//! row-major order. For each stream `x` a block computes
//!
//! ```text
//! Q_x, K_x, V_x = pointwise projections of F_x, PE added to Q_x and K_x
//! F_{I->P} = Q_P + MHA(Q_P, K_I, V_I)      F_{P->I} = Q_I + MHA(Q_I, K_P, V_P)
//! F_P' = MLP(F_P + F_{I->P})               F_I' = MLP(F_I + F_{P->I})
//! ```
//!
//! with `MLP(z) = z + W2 relu(W1 z)`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Init, Proj};
use crate::param::Params;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_D_MODEL: usize = 256;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_BLOCKS: usize = 2;
pub const FUSED_CHANNELS: usize = 256;
const PE_TEMPERATURE: f64 = 10_000.0;

/// 2-D sinusoidal position table `[d_model, h * w]`.
///
/// The first half of the channels encodes the row, the second half the
/// column; within each half channel `2i` is `sin(p * w_i)` and `2i + 1` is
/// `cos(p * w_i)` with `w_i = T^(-4i / d_model)`.
pub fn sinusoidal_table(d_model: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if d_model == 0 || !d_model.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!("positional encoding needs d_model divisible by 4, got {d_model}")));
    }
    let half = d_model / 2;
    let n = h * w;
    let mut t = alloc::vec![0.0; d_model * n];
    for tok in 0..n {
        let (row, col) = ((tok / w) as f64, (tok % w) as f64);
        for (offset, pos) in [(0, row), (half, col)] {
            for i in 0..half / 2 {
                let freq = libm::pow(PE_TEMPERATURE, -(2.0 * i as f64) / half as f64);
                t[(offset + 2 * i) * n + tok] = libm::sin(pos * freq);
                t[(offset + 2 * i + 1) * n + tok] = libm::cos(pos * freq);
            }
        }
    }
    Ok(t)
}

/// Adds the position table to a token matrix `[d_model, h * w]`.
pub fn positional_encode<S: Scalar>(tape: &mut Tape<S>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[1] != h * w {
        return Err(Error::Shape { op: "positional_encode", detail: format!("tokens {:?} for a {h}x{w} grid", s) });
    }
    let table = sinusoidal_table(s[0], h, w)?;
    let pe = tape.constant(Tensor::from_fn(&[s[0], h * w], |i| S::from_f64(table[i])));
    tape.add(x, pe)
}

/// Multi-head scaled dot-product attention on channel-first tokens.
///
/// `q: [d, N]`, `k, v: [d, M]`. Returns `[d, N]` and the per-head attention
/// matrices `[N, M]` (rows are queries).
pub fn multi_head_attention<S: Scalar>(tape: &mut Tape<S>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[0] != sk[0] || heads == 0 || sq[0] % heads != 0 {
        return Err(Error::Shape { op: "attention", detail: format!("q {:?}, k {:?}, v {:?}, heads {heads}", sq, sk, sv) });
    }
    let dh = sq[0] / heads;
    let inv = S::from_f64(1.0 / libm::sqrt(dh as f64));
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 0, h * dh, dh)?;
        let kh = tape.slice(k, 0, h * dh, dh)?;
        let vh = tape.slice(v, 0, h * dh, dh)?;
        let qt = tape.transpose(qh)?;
        let logits = tape.matmul(qt, kh)?;
        let logits = tape.scale(logits, inv)?;
        let a = tape.softmax(logits, 1)?;
        let at = tape.transpose(a)?;
        outs.push(tape.matmul(vh, at)?);
        weights.push(a);
    }
    Ok((tape.concat(&outs, 0)?, weights))
}

/// Residual two-layer perceptron applied per token.
#[derive(Clone, Debug)]
pub struct TokenMlp {
    pub fc1: Proj,
    pub fc2: Proj,
}

impl TokenMlp {
    pub fn new<S: Scalar, R: Rng + ?Sized>(params: &mut Params<S>, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            fc1: Proj::new(params, &format!("{name}.fc1"), d, 2 * d, true, Init::He, rng),
            fc2: Proj::new(params, &format!("{name}.fc2"), 2 * d, d, true, Init::Lecun, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, z: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, params, z)?;
        let h = tape.relu(h)?;
        let h = self.fc2.forward(tape, params, h)?;
        tape.add(z, h)
    }
}

/// Query/key/value projections of one stream.
#[derive(Clone, Debug)]
pub struct Qkv {
    pub q: Proj,
    pub k: Proj,
    pub v: Proj,
}

impl Qkv {
    pub fn new<S: Scalar, R: Rng + ?Sized>(params: &mut Params<S>, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            q: Proj::new(params, &format!("{name}.q"), d, d, true, Init::Lecun, rng),
            k: Proj::new(params, &format!("{name}.k"), d, d, true, Init::Lecun, rng),
            v: Proj::new(params, &format!("{name}.v"), d, d, true, Init::Lecun, rng),
        }
    }

    /// `(Q + pe, K + pe, V)` for tokens `x: [d, N]` and a position table `pe: [d, N]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, x: Var, pe: Var) -> Result<(Var, Var, Var)> {
        let q = self.q.forward(tape, params, x)?;
        let k = self.k.forward(tape, params, x)?;
        let v = self.v.forward(tape, params, x)?;
        let q = tape.add(q, pe)?;
        let k = tape.add(k, pe)?;
        Ok((q, k, v))
    }
}

/// Places the position table for a `h x w` grid on the tape, repeated
/// `copies` times along the token axis.
pub fn table_constant<S: Scalar>(tape: &mut Tape<S>, d_model: usize, grid: (usize, usize), copies: usize) -> Result<Var> {
    let table = sinusoidal_table(d_model, grid.0, grid.1)?;
    let n = grid.0 * grid.1;
    let t = Tensor::from_fn(&[d_model, copies * n], |i| {
        let (c, tok) = (i / (copies * n), i % (copies * n));
        S::from_f64(table[c * n + tok % n])
    });
    Ok(tape.constant(t))
}

/// Everything a block computed, for inspection in tests.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub image: Var,
    pub prior: Var,
    /// Attention of prior queries over image tokens, one matrix per head.
    pub prior_to_image: Vec<Var>,
    /// Attention of image queries over prior tokens, one matrix per head.
    pub image_to_prior: Vec<Var>,
}

/// One bidirectional cross-attention block.
#[derive(Clone, Debug)]
pub struct CatBlock {
    pub image: Qkv,
    pub prior: Qkv,
    pub image_mlp: TokenMlp,
    pub prior_mlp: TokenMlp,
    pub heads: usize,
    pub d_model: usize,
}

impl CatBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut Params<S>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(d_model, heads)?;
        Ok(Self {
            image: Qkv::new(params, &format!("{name}.image"), d_model, rng),
            prior: Qkv::new(params, &format!("{name}.prior"), d_model, rng),
            image_mlp: TokenMlp::new(params, &format!("{name}.image_mlp"), d_model, rng),
            prior_mlp: TokenMlp::new(params, &format!("{name}.prior_mlp"), d_model, rng),
            heads,
            d_model,
        })
    }

    /// `f_i, f_p: [d_model, h * w]` tokens.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &Params<S>,
        f_i: Var,
        f_p: Var,
        grid: (usize, usize),
    ) -> Result<BlockTrace> {
        let pe = table_constant(tape, self.d_model, grid, 1)?;
        self.forward_with_table(tape, params, f_i, f_p, pe)
    }

    /// [`CatBlock::forward`] with an explicit position table `[d_model, N]`.
    pub fn forward_with_table<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &Params<S>,
        f_i: Var,
        f_p: Var,
        pe: Var,
    ) -> Result<BlockTrace> {
        if tape.shape(f_i) != tape.shape(f_p) || tape.shape(f_i) != tape.shape(pe) || tape.shape(f_i)[0] != self.d_model {
            return Err(Error::Shape {
                op: "cross_attend",
                detail: format!(
                    "image {:?}, prior {:?}, table {:?}, d_model {}",
                    tape.shape(f_i),
                    tape.shape(f_p),
                    tape.shape(pe),
                    self.d_model
                ),
            });
        }
        let (qi, ki, vi) = self.image.forward(tape, params, f_i, pe)?;
        let (qp, kp, vp) = self.prior.forward(tape, params, f_p, pe)?;
        let (att_p, w_p) = multi_head_attention(tape, qp, ki, vi, self.heads)?;
        let (att_i, w_i) = multi_head_attention(tape, qi, kp, vp, self.heads)?;
        let to_p = tape.add(qp, att_p)?;
        let to_i = tape.add(qi, att_i)?;
        let zp = tape.add(f_p, to_p)?;
        let zi = tape.add(f_i, to_i)?;
        let prior = self.prior_mlp.forward(tape, params, zp)?;
        let image = self.image_mlp.forward(tape, params, zi)?;
        Ok(BlockTrace { image, prior, prior_to_image: w_p, image_to_prior: w_i })
    }
}

fn check_heads(d_model: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d_model.is_multiple_of(heads) || !d_model.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "d_model {d_model} must be divisible by 4 and by the head count {heads}"
        )));
    }
    Ok(())
}

/// Standard self-attention layer: `z = x + MHA(x)`, `out = MLP(z)`.
#[derive(Clone, Debug)]
pub struct SelfAttentionLayer {
    pub qkv: Qkv,
    pub mlp: TokenMlp,
    pub heads: usize,
}

impl SelfAttentionLayer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut Params<S>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(d_model, heads)?;
        Ok(Self { qkv: Qkv::new(params, name, d_model, rng), mlp: TokenMlp::new(params, &format!("{name}.mlp"), d_model, rng), heads })
    }

    /// `x: [d, 2N]`, image tokens then prior tokens; `pe: [d, 2N]` repeats
    /// the grid table for both halves.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, x: Var, pe: Var) -> Result<(Var, Vec<Var>)> {
        let (q, k, v) = self.qkv.forward(tape, params, x, pe)?;
        let (att, w) = multi_head_attention(tape, q, k, v, self.heads)?;
        let z = tape.add(x, att)?;
        Ok((self.mlp.forward(tape, params, z)?, w))
    }
}

/// Fusion variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CatVariant {
    #[default]
    Cat,
    PlainTransformer,
}

impl CatVariant {
    pub fn name(self) -> &'static str {
        match self {
            CatVariant::Cat => "cat",
            CatVariant::PlainTransformer => "plain_transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cat" => Ok(CatVariant::Cat),
            "plain_transformer" => Ok(CatVariant::PlainTransformer),
            other => Err(Error::InvalidArgument(format!("unknown cat variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatConfig {
    pub blocks: usize,
    pub heads: usize,
    pub d_model: usize,
    pub variant: CatVariant,
    pub out_channels: usize,
}

impl Default for CatConfig {
    fn default() -> Self {
        Self { blocks: DEFAULT_BLOCKS, heads: DEFAULT_HEADS, d_model: DEFAULT_D_MODEL, variant: CatVariant::Cat, out_channels: FUSED_CHANNELS }
    }
}

#[derive(Clone, Debug)]
enum Layers {
    Cross(Vec<CatBlock>),
    Plain(Vec<SelfAttentionLayer>),
}

/// Entry projections, attention layers and the fusing 1x1 convolution.
#[derive(Clone, Debug)]
pub struct CatStack {
    entry_image: Proj,
    entry_prior: Proj,
    layers: Layers,
    fuse: Proj,
    d_model: usize,
}

/// Output of [`CatStack::forward`] with the attention matrices of every layer.
#[derive(Clone, Debug)]
pub struct FuseTrace {
    pub fused: Var,
    pub attention: Vec<Var>,
}

impl CatStack {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        params: &mut Params<S>,
        name: &str,
        image_channels: usize,
        prior_channels: usize,
        cfg: &CatConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::InvalidArgument("at least one attention block is required".into()));
        }
        check_heads(cfg.d_model, cfg.heads)?;
        let d = cfg.d_model;
        let entry_image = Proj::new(params, &format!("{name}.entry_image"), image_channels, d, true, Init::Lecun, rng);
        let entry_prior = Proj::new(params, &format!("{name}.entry_prior"), prior_channels, d, true, Init::Lecun, rng);
        let layers = match cfg.variant {
            CatVariant::Cat => Layers::Cross(
                (0..cfg.blocks)
                    .map(|b| CatBlock::new(params, &format!("{name}.block{b}"), d, cfg.heads, rng))
                    .collect::<Result<_>>()?,
            ),
            CatVariant::PlainTransformer => Layers::Plain(
                (0..cfg.blocks)
                    .map(|b| SelfAttentionLayer::new(params, &format!("{name}.layer{b}"), d, cfg.heads, rng))
                    .collect::<Result<_>>()?,
            ),
        };
        let fuse = Proj::new(params, &format!("{name}.fuse"), 2 * d, cfg.out_channels, true, Init::Lecun, rng);
        Ok(Self { entry_image, entry_prior, layers, fuse, d_model: d })
    }

    pub fn blocks(&self) -> usize {
        match &self.layers {
            Layers::Cross(b) => b.len(),
            Layers::Plain(l) => l.len(),
        }
    }

    pub fn cross_blocks(&self) -> &[CatBlock] {
        match &self.layers {
            Layers::Cross(b) => b,
            Layers::Plain(_) => &[],
        }
    }

    /// `f_i: [C_img, H, W]`, `f_p: [C_prior, H, W]` -> `[out_channels, H, W]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Params<S>, f_i: Var, f_p: Var) -> Result<FuseTrace> {
        let (si, sp) = (tape.shape(f_i).to_vec(), tape.shape(f_p).to_vec());
        if si.len() != 3 || sp.len() != 3 || si[1..] != sp[1..] {
            return Err(Error::Shape { op: "cat_fuse", detail: format!("image {:?}, prior {:?}", si, sp) });
        }
        let grid = (si[1], si[2]);
        let n = grid.0 * grid.1;
        let ti = tape.reshape(f_i, &[si[0], n])?;
        let tp = tape.reshape(f_p, &[sp[0], n])?;
        let mut xi = self.entry_image.forward(tape, params, ti)?;
        let mut xp = self.entry_prior.forward(tape, params, tp)?;
        let mut attention = Vec::new();
        let joined = match &self.layers {
            Layers::Cross(blocks) => {
                let pe = table_constant(tape, self.d_model, grid, 1)?;
                for b in blocks {
                    let t = b.forward_with_table(tape, params, xi, xp, pe)?;
                    attention.extend(t.prior_to_image);
                    attention.extend(t.image_to_prior);
                    xi = t.image;
                    xp = t.prior;
                }
                tape.concat(&[xi, xp], 0)?
            }
            Layers::Plain(layers) => {
                let pe = table_constant(tape, self.d_model, grid, 2)?;
                let mut x = tape.concat(&[xi, xp], 1)?;
                for l in layers {
                    let (y, w) = l.forward(tape, params, x, pe)?;
                    attention.extend(w);
                    x = y;
                }
                let a = tape.slice(x, 1, 0, n)?;
                let b = tape.slice(x, 1, n, n)?;
                tape.concat(&[a, b], 0)?
            }
        };
        debug_assert_eq!(tape.shape(joined)[0], 2 * self.d_model);
        let fused = self.fuse.forward(tape, params, joined)?;
        let out_ch = tape.shape(fused)[0];
        let fused = tape.reshape(fused, &[out_ch, grid.0, grid.1])?;
        Ok(FuseTrace { fused, attention })
    }
}
