//! Temporal 1-D U-Net that predicts the clean state from a projected noisy
//! state and a diffusion step.
//!
//! Down path: two kernel-2 convolutions (`T -> T-1 -> T-2`), a kernel-1
//! middle block, then two kernel-2 transposed convolutions back to `T` with
//! skip connections, and a kernel-1 output head. Each block is
//! conv, channel norm, GELU, plus a projected step embedding.

use maskplan_tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::StateLayout;
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channel widths of the three levels.
    pub channels: [usize; 3],
    /// Sinusoidal embedding width (even).
    pub embed_dim: usize,
    /// Width of the shared step-embedding MLP.
    pub embed_hidden: usize,
    pub norm_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128],
            embed_dim: 32,
            embed_hidden: 64,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    w: ParamId,
    b: ParamId,
    gain: ParamId,
    bias: ParamId,
    emb_w: ParamId,
    emb_b: ParamId,
    transposed: bool,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: UNetConfig,
    pub layout: StateLayout,
    pub diffusion_steps: usize,
    pub params: ParamStore,
    emb_w: ParamId,
    emb_b: ParamId,
    blocks: Vec<Block>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Sinusoidal features of a diffusion step, `[sin(n f_i), cos(n f_i)]`.
pub fn step_embedding(n: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (n as f64 * f).sin();
        out[half + i] = (n as f64 * f).cos();
    }
    out
}

fn uniform_tensor<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl Denoiser {
    pub fn new(config: UNetConfig, layout: StateLayout, diffusion_steps: usize, seed: u64) -> Result<Self> {
        if layout.horizon < 3 {
            return Err(Error::Config(format!(
                "the denoiser needs horizon >= 3, got {}",
                layout.horizon
            )));
        }
        if config.embed_dim < 2 || config.embed_dim % 2 != 0 || config.channels.contains(&0) {
            return Err(Error::Config("embedding dim must be even and channels positive".into()));
        }
        let mut rng = seeded(seed);
        let mut p = ParamStore::new();
        let (e, h) = (config.embed_dim, config.embed_hidden);
        let emb_w = p.add("step.w", uniform_tensor(&[e, h], e, &mut rng));
        let emb_b = p.add("step.b", Tensor::zeros(&[h]));
        let d = layout.rows();
        let [c1, c2, c3] = config.channels;
        // (name, cin, cout, kernel, transposed)
        let plan = [
            ("down1", d, c1, 2, false),
            ("down2", c1, c2, 2, false),
            ("mid", c2, c3, 1, false),
            ("up2", c3 + c2, c2, 2, true),
            ("up1", c2 + c1, c1, 2, true),
        ];
        let mut blocks = Vec::new();
        for (name, cin, cout, k, transposed) in plan {
            let shape = if transposed { [cin, cout, k] } else { [cout, cin, k] };
            blocks.push(Block {
                w: p.add(format!("{name}.w"), uniform_tensor(&shape, cin * k, &mut rng)),
                b: p.add(format!("{name}.b"), Tensor::zeros(&[cout])),
                gain: p.add(format!("{name}.gain"), Tensor::ones(&[cout])),
                bias: p.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
                emb_w: p.add(format!("{name}.emb.w"), uniform_tensor(&[h, cout], h, &mut rng)),
                emb_b: p.add(format!("{name}.emb.b"), Tensor::zeros(&[cout])),
                transposed,
            });
        }
        let out_w = p.add("out.w", uniform_tensor(&[d, c1, 1], c1, &mut rng));
        let out_b = p.add("out.b", Tensor::zeros(&[d]));
        Ok(Self {
            config,
            layout,
            diffusion_steps,
            params: p,
            emb_w,
            emb_b,
            blocks,
            out_w,
            out_b,
        })
    }

    fn block(&self, g: &mut Graph, p: &Bound, blk: &Block, x: Var, temb: Var) -> Result<Var> {
        let y = if blk.transposed {
            g.conv_transpose1d(x, p[blk.w], Some(p[blk.b]))?
        } else {
            g.conv1d(x, p[blk.w], Some(p[blk.b]))?
        };
        let y = g.norm(y, p[blk.gain], p[blk.bias], 1, self.config.norm_eps)?;
        let y = g.gelu(y)?;
        let e = g.matmul(temb, p[blk.emb_w])?;
        let e = g.add_bias(e, p[blk.emb_b])?;
        Ok(g.add_expand(y, e)?)
    }

    /// `x: [B, D, T]` projected noisy states, one step per batch element.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, steps: &[usize]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let l = &self.layout;
        if s != [steps.len(), l.rows(), l.horizon] {
            return Err(Error::Shape(format!(
                "denoiser input {s:?}, expected [{}, {}, {}]",
                steps.len(),
                l.rows(),
                l.horizon
            )));
        }
        if let Some(n) = steps.iter().find(|&&n| n == 0 || n > self.diffusion_steps) {
            return Err(Error::Config(format!(
                "step {n} outside 1..={}",
                self.diffusion_steps
            )));
        }
        let e = self.config.embed_dim;
        let feats: Vec<f64> = steps.iter().flat_map(|&n| step_embedding(n, e)).collect();
        let feats = g.constant(Tensor::new(&[steps.len(), e], feats)?);
        let temb = g.matmul(feats, p[self.emb_w])?;
        let temb = g.add_bias(temb, p[self.emb_b])?;
        let temb = g.gelu(temb)?;

        let b = &self.blocks;
        let d1 = self.block(g, p, &b[0], x, temb)?;
        let d2 = self.block(g, p, &b[1], d1, temb)?;
        let m = self.block(g, p, &b[2], d2, temb)?;
        let cat = g.concat(&[m, d2], 1)?;
        let u2 = self.block(g, p, &b[3], cat, temb)?;
        let cat = g.concat(&[u2, d1], 1)?;
        let u1 = self.block(g, p, &b[4], cat, temb)?;
        Ok(g.conv1d(u1, p[self.out_w], Some(p[self.out_b]))?)
    }

    /// Batched inference on flat `[B, D, T]` inputs.
    pub fn denoise(&self, inputs: &[f64], steps: &[usize]) -> Result<Vec<f64>> {
        let l = &self.layout;
        let x = Tensor::new(&[steps.len(), l.rows(), l.horizon], inputs.to_vec())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(x);
        let y = self.forward(&mut g, &p, x, steps)?;
        let out = g.value(y).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok(out)
    }
}
