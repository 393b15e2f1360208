use super::{NetConfig, NoiseNet};
use crate::clip::Clip;
use crate::diffusion::NoiseEstimator;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Parameters of one [`NoiseNet`] recorded on a specific tape.
///
/// The handles are only meaningful on the tape passed to [`NoiseNet::bind`].
pub struct Bound<'a, S> {
    net: &'a NoiseNet<S>,
    vars: Vec<Var>,
}

/// The six per-block modulation vectors, each `[1, C_p]`.
#[derive(Clone, Copy, Debug)]
pub struct BlockModulation {
    pub shift_msa: Var,
    pub scale_msa: Var,
    pub gate_msa: Var,
    pub shift_mlp: Var,
    pub scale_mlp: Var,
    pub gate_mlp: Var,
}

/// Output of a transformer block plus its per-head attention matrices.
pub struct BlockTrace {
    pub out: Var,
    pub attention: Vec<Var>,
}

const STEM: usize = 7;
const PER_BLOCK: usize = 10;

impl<'a, S: Scalar> Bound<'a, S> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn net(&self) -> &'a NoiseNet<S> {
        self.net
    }

    fn block_var(&self, i: usize, field: usize) -> Var {
        self.vars[STEM + PER_BLOCK * i + field]
    }

    fn tail(&self, field: usize) -> Var {
        self.vars[STEM + PER_BLOCK * self.net.config.blocks + field]
    }
}

fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// `layer_norm(x)·(1 + scale) + shift`
pub fn ada_ln<S: Scalar>(tape: &mut Tape<S>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let one_plus = tape.add_scalar(scale, S::one());
    let scaled = tape.mul_row(n, one_plus)?;
    tape.add_row(scaled, shift)
}

/// Sinusoidal featurization of a time step, `[1, width]`: cosines then sines
/// over geometrically spaced frequencies `10000^(−i/(width/2))`.
pub fn time_features<S: Scalar>(t: usize, width: usize) -> Tensor<S> {
    let half = width / 2;
    Tensor::from_fn(&[1, width], |i| {
        let k = i % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        S::of(if i < half { arg.cos() } else { arg.sin() })
    })
}

/// Full-width self-attention + MLP block with adaptive norm modulation:
///
/// `y = x + g_msa ⊙ MSA(adaLN(x, s_msa, c_msa))`
/// `out = y + g_mlp ⊙ MLP(adaLN(y, s_mlp, c_mlp))`
pub fn transformer_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    weights: &[Var],
    m: &BlockModulation,
    heads: usize,
) -> Result<BlockTrace> {
    let [qkv_w, qkv_b, proj_w, proj_b, w1, b1, w2, b2, ..] = weights else {
        return Err(Error::shape("transformer block needs eight weight tensors"));
    };
    let width = match tape.shape(x) {
        [_, c] => *c,
        s => return Err(Error::shape(format!("tokens must be [P, C], got {s:?}"))),
    };
    if heads == 0 || width % heads != 0 {
        return Err(Error::shape(format!("{width} channels over {heads} heads")));
    }
    let hd = width / heads;

    let h = ada_ln(tape, x, m.shift_msa, m.scale_msa)?;
    let qkv = linear(tape, h, *qkv_w, *qkv_b)?;
    let inv_sqrt = S::one() / S::of(hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = tape.slice_cols(qkv, i * hd, hd)?;
        let k = tape.slice_cols(qkv, width + i * hd, hd)?;
        let v = tape.slice_cols(qkv, 2 * width + i * hd, hd)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, inv_sqrt);
        let a = tape.softmax(scores);
        attention.push(a);
        outs.push(tape.matmul(a, v)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let attn = linear(tape, merged, *proj_w, *proj_b)?;
    let gated = tape.mul_row(attn, m.gate_msa)?;
    let y = tape.add(x, gated)?;

    let h = ada_ln(tape, y, m.shift_mlp, m.scale_mlp)?;
    let h = linear(tape, h, *w1, *b1)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, *w2, *b2)?;
    let gated = tape.mul_row(h, m.gate_mlp)?;
    let out = tape.add(y, gated)?;
    Ok(BlockTrace { out, attention })
}

impl<S: Scalar> NoiseNet<S> {
    /// Records every parameter on `tape` in [`super::NetParams::tensors`] order.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound<'_, S> {
        let vars = self.params.tensors().into_iter().map(|t| tape.param(t)).collect();
        Bound { net: self, vars }
    }
}

impl<S: Scalar> Bound<'_, S> {
    fn config(&self) -> &NetConfig {
        &self.net.config
    }

    /// Sinusoidal features through the two-layer MLP, `[1, C_p]`.
    pub fn time_embed(&self, tape: &mut Tape<S>, t: usize) -> Result<Var> {
        let feats = tape.constant(&time_features(t, self.config().patch.width));
        let h = linear(tape, feats, self.vars[3], self.vars[4])?;
        let h = tape.silu(h);
        linear(tape, h, self.vars[5], self.vars[6])
    }

    /// 3D-convolution patch partition of a `[2C, T, H, W]` input into `[P, C_p]`
    /// tokens (time-major, then rows, then columns) plus the positional table.
    pub fn patch_partition(&self, tape: &mut Tape<S>, input: &Tensor<S>) -> Result<Var> {
        let cfg = *self.config();
        let g = cfg.input_grid();
        if input.shape() != [g.channels, g.frames, g.height, g.width] {
            return Err(Error::shape(format!(
                "network input {:?} does not match configured geometry {:?}",
                input.shape(),
                [g.channels, g.frames, g.height, g.width]
            )));
        }
        let x = tape.constant(input);
        let ts = cfg.patch.ts;
        let ss = cfg.patch.ss;
        let conv = tape.conv3d(x, self.vars[0], (ts, ss, ss))?;
        let c = cfg.patch.width;
        let p = cfg.tokens();
        let flat = tape.reshape(conv, &[c, p])?;
        let tokens = tape.transpose(flat)?;
        let tokens = tape.add_row(tokens, self.vars[1])?;
        tape.add(tokens, self.vars[2])
    }

    /// Per-block modulation from the shared time embedding.
    pub fn modulation(&self, tape: &mut Tape<S>, block: usize, temb_act: Var) -> Result<BlockModulation> {
        let c = self.config().patch.width;
        let all = linear(tape, temb_act, self.block_var(block, 8), self.block_var(block, 9))?;
        let mut part = |i: usize| tape.slice_cols(all, i * c, c);
        Ok(BlockModulation {
            shift_msa: part(0)?,
            scale_msa: part(1)?,
            gate_msa: part(2)?,
            shift_mlp: part(3)?,
            scale_mlp: part(4)?,
            gate_mlp: part(5)?,
        })
    }

    pub fn apply_block(&self, tape: &mut Tape<S>, block: usize, x: Var, m: &BlockModulation) -> Result<BlockTrace> {
        let w: Vec<Var> = (0..8).map(|f| self.block_var(block, f)).collect();
        transformer_block(tape, x, &w, m, self.config().heads)
    }

    /// Final modulated norm, linear head, and un-patching into `[C, T, H, W]`.
    pub fn head_to_noise(&self, tape: &mut Tape<S>, x: Var, temb_act: Var) -> Result<Var> {
        let cfg = *self.config();
        if tape.shape(x) != [cfg.tokens(), cfg.patch.width] {
            return Err(Error::shape(format!(
                "head expects [{}, {}] tokens, got {:?}",
                cfg.tokens(),
                cfg.patch.width,
                tape.shape(x)
            )));
        }
        let c = cfg.patch.width;
        let m = linear(tape, temb_act, self.tail(0), self.tail(1))?;
        let shift = tape.slice_cols(m, 0, c)?;
        let scale = tape.slice_cols(m, c, c)?;
        let h = ada_ln(tape, x, shift, scale)?;
        let patches = linear(tape, h, self.tail(2), self.tail(3))?;
        let g = cfg.clip;
        tape.gather(patches, self.net.unpatch_index(), &g.shape())
    }

    /// `ε(x_t, cond, t)`: channel concat, patch partition, blocks, head.
    pub fn forward(&self, tape: &mut Tape<S>, x_t: &Clip<S>, cond: &Clip<S>, t: usize) -> Result<Var> {
        let g = self.config().clip;
        if x_t.geometry() != g || cond.geometry() != g {
            return Err(Error::shape(format!(
                "network configured for {g:?}, got x_t {:?} and condition {:?}",
                x_t.geometry(),
                cond.geometry()
            )));
        }
        let input = x_t.concat_channels(cond)?;
        let mut x = self.patch_partition(tape, &input)?;
        let temb = self.time_embed(tape, t)?;
        let act = tape.silu(temb);
        for b in 0..self.config().blocks {
            let m = self.modulation(tape, b, act)?;
            x = self.apply_block(tape, b, x, &m)?.out;
        }
        self.head_to_noise(tape, x, act)
    }
}

impl<S: Scalar> NoiseEstimator<S> for Bound<'_, S> {
    fn estimate(&self, tape: &mut Tape<S>, x_t: &Clip<S>, cond: &Clip<S>, t: usize) -> Result<Var> {
        self.forward(tape, x_t, cond, t)
    }
}

impl<S: Scalar> NoiseEstimator<S> for NoiseNet<S> {
    fn estimate(&self, tape: &mut Tape<S>, x_t: &Clip<S>, cond: &Clip<S>, t: usize) -> Result<Var> {
        let bound = self.bind(tape);
        bound.forward(tape, x_t, cond, t)
    }
}
