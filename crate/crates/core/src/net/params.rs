use super::NetConfig;
use crate::error::{Error, Result};
use crate::rng::NoiseRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<S> {
    pub qkv_w: Tensor<S>,
    pub qkv_b: Tensor<S>,
    pub proj_w: Tensor<S>,
    pub proj_b: Tensor<S>,
    pub mlp_w1: Tensor<S>,
    pub mlp_b1: Tensor<S>,
    pub mlp_w2: Tensor<S>,
    pub mlp_b2: Tensor<S>,
    /// Projects the time embedding to the six modulation vectors.
    pub mod_w: Tensor<S>,
    pub mod_b: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<S> {
    pub patch_w: Tensor<S>,
    pub patch_b: Tensor<S>,
    pub pos_embed: Tensor<S>,
    pub time_w1: Tensor<S>,
    pub time_b1: Tensor<S>,
    pub time_w2: Tensor<S>,
    pub time_b2: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_mod_w: Tensor<S>,
    pub final_mod_b: Tensor<S>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
}

const BLOCK_FIELDS: [&str; 10] = [
    "qkv_w", "qkv_b", "proj_w", "proj_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "mod_w", "mod_b",
];

impl<S: Scalar> BlockParams<S> {
    fn tensors(&self) -> [&Tensor<S>; 10] {
        [
            &self.qkv_w,
            &self.qkv_b,
            &self.proj_w,
            &self.proj_b,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
            &self.mod_w,
            &self.mod_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 10] {
        [
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.mod_w,
            &mut self.mod_b,
        ]
    }
}

fn xavier<S: Scalar>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut NoiseRng) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| S::of(rng.uniform_in(-a, a))).with_grad()
}

fn normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut NoiseRng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of(std * rng.gaussian())).with_grad()
}

fn zeros<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    Tensor::zeros(shape).with_grad()
}

impl<S: Scalar> NetParams<S> {
    pub fn init(cfg: &NetConfig, rng: &mut NoiseRng) -> Self {
        let c = cfg.patch.width;
        let hidden = c * cfg.mlp_ratio;
        let ig = cfg.input_grid();
        let k_in = ig.patch_len();
        let k_out = cfg.output_grid().patch_len();
        let patch = xavier::<S>(c, k_in, k_in, c, rng);
        let patch_w = Tensor::new(
            &[c, ig.channels, ig.ts, ig.ss, ig.ss],
            patch.into_data(),
        )
        .expect("patch kernel shape")
        .with_grad();
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                qkv_w: xavier(c, 3 * c, c, c, rng),
                qkv_b: zeros(&[3 * c]),
                proj_w: xavier(c, c, c, c, rng),
                proj_b: zeros(&[c]),
                mlp_w1: xavier(c, hidden, c, hidden, rng),
                mlp_b1: zeros(&[hidden]),
                mlp_w2: xavier(hidden, c, hidden, c, rng),
                mlp_b2: zeros(&[c]),
                mod_w: zeros(&[c, 6 * c]),
                mod_b: zeros(&[6 * c]),
            })
            .collect();
        Self {
            patch_w,
            patch_b: zeros(&[c]),
            pos_embed: zeros(&[cfg.tokens(), c]),
            time_w1: normal(&[c, c], 0.02, rng),
            time_b1: zeros(&[c]),
            time_w2: normal(&[c, c], 0.02, rng),
            time_b2: zeros(&[c]),
            blocks,
            final_mod_w: zeros(&[c, 2 * c]),
            final_mod_b: zeros(&[2 * c]),
            head_w: zeros(&[c, k_out]),
            head_b: zeros(&[k_out]),
        }
    }

    /// Expected shape of every tensor, in [`NetParams::tensors`] order.
    pub fn expected_shapes(cfg: &NetConfig) -> Vec<Vec<usize>> {
        let c = cfg.patch.width;
        let hidden = c * cfg.mlp_ratio;
        let ig = cfg.input_grid();
        let k_out = cfg.output_grid().patch_len();
        let mut v = vec![
            vec![c, ig.channels, ig.ts, ig.ss, ig.ss],
            vec![c],
            vec![cfg.tokens(), c],
            vec![c, c],
            vec![c],
            vec![c, c],
            vec![c],
        ];
        for _ in 0..cfg.blocks {
            v.extend([
                vec![c, 3 * c],
                vec![3 * c],
                vec![c, c],
                vec![c],
                vec![c, hidden],
                vec![hidden],
                vec![hidden, c],
                vec![c],
                vec![c, 6 * c],
                vec![6 * c],
            ]);
        }
        v.extend([vec![c, 2 * c], vec![2 * c], vec![c, k_out], vec![k_out]]);
        v
    }

    pub fn check_shapes(&self, cfg: &NetConfig) -> Result<()> {
        let want = Self::expected_shapes(cfg);
        let have = self.tensors();
        if want.len() != have.len() {
            return Err(Error::shape(format!(
                "parameter set has {} tensors, configuration needs {}",
                have.len(),
                want.len()
            )));
        }
        for ((name, t), w) in self.names().iter().zip(have).zip(want) {
            if t.shape() != w.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {name} has shape {:?}, configuration needs {w:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Every tensor in a fixed order: stem, blocks, head.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut v = vec![
            &self.patch_w,
            &self.patch_b,
            &self.pos_embed,
            &self.time_w1,
            &self.time_b1,
            &self.time_w2,
            &self.time_b2,
        ];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([
            &self.final_mod_w,
            &self.final_mod_b,
            &self.head_w,
            &self.head_b,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.pos_embed,
            &mut self.time_w1,
            &mut self.time_b1,
            &mut self.time_w2,
            &mut self.time_b2,
        ];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend([
            &mut self.final_mod_w,
            &mut self.final_mod_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = [
            "patch_w", "patch_b", "pos_embed", "time_w1", "time_b1", "time_w2", "time_b2",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..self.blocks.len() {
            v.extend(BLOCK_FIELDS.iter().map(|f| format!("blocks.{i}.{f}")));
        }
        v.extend(
            ["final_mod_w", "final_mod_b", "head_w", "head_b"]
                .iter()
                .map(|s| s.to_string()),
        );
        v
    }

    /// Rebuilds a parameter set from tensors in [`NetParams::tensors`] order.
    pub fn from_tensors(cfg: &NetConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let want = Self::expected_shapes(cfg);
        if tensors.len() != want.len() {
            return Err(Error::shape(format!(
                "got {} tensors, configuration needs {}",
                tensors.len(),
                want.len()
            )));
        }
        let mut it = tensors.into_iter().map(|t| t.with_grad());
        let mut next = || it.next().expect("length checked");
        let (patch_w, patch_b, pos_embed) = (next(), next(), next());
        let (time_w1, time_b1, time_w2, time_b2) = (next(), next(), next(), next());
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                qkv_w: next(),
                qkv_b: next(),
                proj_w: next(),
                proj_b: next(),
                mlp_w1: next(),
                mlp_b1: next(),
                mlp_w2: next(),
                mlp_b2: next(),
                mod_w: next(),
                mod_b: next(),
            })
            .collect();
        let p = Self {
            patch_w,
            patch_b,
            pos_embed,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            blocks,
            final_mod_w: next(),
            final_mod_b: next(),
            head_w: next(),
            head_b: next(),
        };
        p.check_shapes(cfg)?;
        Ok(p)
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for t in self.tensors_mut() {
            t.clear_grad();
        }
    }

    pub fn cast<T: Scalar>(&self) -> NetParams<T> {
        NetParams {
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            pos_embed: self.pos_embed.cast(),
            time_w1: self.time_w1.cast(),
            time_b1: self.time_b1.cast(),
            time_w2: self.time_w2.cast(),
            time_b2: self.time_b2.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    qkv_w: b.qkv_w.cast(),
                    qkv_b: b.qkv_b.cast(),
                    proj_w: b.proj_w.cast(),
                    proj_b: b.proj_b.cast(),
                    mlp_w1: b.mlp_w1.cast(),
                    mlp_b1: b.mlp_b1.cast(),
                    mlp_w2: b.mlp_w2.cast(),
                    mlp_b2: b.mlp_b2.cast(),
                    mod_w: b.mod_w.cast(),
                    mod_b: b.mod_b.cast(),
                })
                .collect(),
            final_mod_w: self.final_mod_w.cast(),
            final_mod_b: self.final_mod_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}
