//! Encoder architecture: stacked affine + nonlinearity + layernorm blocks
//! with swappable task heads, and hand-rolled reverse-mode backward passes.
//!
//! Block affine weights and biases are prunable; layernorm gains/biases and
//! every head stay dense. The `Encoder` itself is a stateless description:
//! all state lives in a `ParamStore`, so the same architecture can drive
//! many parameter sets.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Param, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlin {
    Gelu,
    Relu,
    Tanh,
    Identity,
}

impl Nonlin {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlin::Gelu => gelu(x),
            Nonlin::Relu => x.max(0.0),
            Nonlin::Tanh => x.tanh(),
            Nonlin::Identity => x,
        }
    }

    fn deriv(self, x: f64) -> f64 {
        match self {
            Nonlin::Gelu => gelu_deriv(x),
            Nonlin::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlin::Tanh => 1.0 - x.tanh() * x.tanh(),
            Nonlin::Identity => 1.0,
        }
    }
}

// tanh approximation of GELU, with an analytically matching derivative.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub nonlin: Nonlin,
    /// Include biases in the prunable set (config-flagged; on by default).
    #[serde(default = "default_true")]
    pub prune_biases: bool,
}

fn default_true() -> bool {
    true
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, blocks: usize) -> Self {
        EncoderConfig { input_dim, hidden_dim, blocks, nonlin: Nonlin::Gelu, prune_biases: true }
    }
}

/// A named affine head attached on top of the encoder (or, for pretraining
/// projections, applied to raw features). Never prunable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Stateless architecture description. Parameters live in a `ParamStore`
/// produced by [`Encoder::init_store`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub heads: BTreeMap<String, HeadSpec>,
}

/// Per-block forward activations needed by the backward pass.
pub struct BlockCache {
    input: Tensor,    // T x in
    pre_act: Tensor, // T x H
    normed: Tensor,  // T x H (x-hat, before gain/bias)
    inv_std: Vec<f64>,
}

pub struct Cache {
    blocks: Vec<BlockCache>,
    pub output: Tensor, // T x H embeddings
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        Encoder { cfg, heads: BTreeMap::new() }
    }

    pub fn with_head(mut self, name: &str, in_dim: usize, out_dim: usize) -> Self {
        self.heads.insert(name.to_string(), HeadSpec { in_dim, out_dim });
        self
    }

    /// Attach a classification head on top of the encoder output.
    pub fn with_task_head(self, name: &str, out_dim: usize) -> Self {
        let h = self.cfg.hidden_dim;
        self.with_head(name, h, out_dim)
    }

    fn block_in_dim(&self, b: usize) -> usize {
        if b == 0 {
            self.cfg.input_dim
        } else {
            self.cfg.hidden_dim
        }
    }

    /// Initialize a fresh parameter store. Head init is derived from the
    /// head name only, so identical heads get identical weights regardless
    /// of which other heads exist.
    pub fn init_store(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let h = self.cfg.hidden_dim;
        for b in 0..self.cfg.blocks {
            let fan_in = self.block_in_dim(b);
            let mut w = Tensor::zeros(vec![fan_in, h]);
            let mut r = rng::stream(seed, &format!("init/block{b}"));
            rng::fill_normal(&mut r, w.data_mut(), 1.0 / (fan_in as f64).sqrt());
            let mut bias = Tensor::zeros(vec![h]);
            rng::fill_normal(&mut r, bias.data_mut(), 0.01);
            let pb = self.cfg.prune_biases;
            store.insert(Param::new(format!("block{b}.weight"), w, true)).unwrap();
            store.insert(Param::new(format!("block{b}.bias"), bias, pb)).unwrap();
            store
                .insert(Param::new(format!("block{b}.ln_gain"), Tensor::filled(vec![h], 1.0), false))
                .unwrap();
            store
                .insert(Param::new(format!("block{b}.ln_bias"), Tensor::zeros(vec![h]), false))
                .unwrap();
        }
        for (name, spec) in &self.heads {
            let mut w = Tensor::zeros(vec![spec.in_dim, spec.out_dim]);
            let mut r = rng::stream(seed, &format!("init/head/{name}"));
            rng::fill_normal(&mut r, w.data_mut(), 1.0 / (spec.in_dim as f64).sqrt());
            let mut bias = Tensor::zeros(vec![spec.out_dim]);
            rng::fill_normal(&mut r, bias.data_mut(), 0.01);
            store.insert(Param::new(format!("head.{name}.weight"), w, false)).unwrap();
            store.insert(Param::new(format!("head.{name}.bias"), bias, false)).unwrap();
        }
        store
    }

    /// Forward pass over a T x F sequence, returning T x H embeddings and
    /// the activation cache for backward.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Cache> {
        if x.cols() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "batch feature dim {} != model input dim {}",
                x.cols(),
                self.cfg.input_dim
            )));
        }
        let t = x.rows();
        let h = self.cfg.hidden_dim;
        let mut cur = x.clone();
        let mut blocks = Vec::with_capacity(self.cfg.blocks);
        for b in 0..self.cfg.blocks {
            let w = store.value(&format!("block{b}.weight"));
            let bias = store.value(&format!("block{b}.bias"));
            let gain = store.value(&format!("block{b}.ln_gain"));
            let lnb = store.value(&format!("block{b}.ln_bias"));

            let pre = affine(&cur, w, bias);
            let mut post = Tensor::zeros(vec![t, h]);
            for (p, a) in post.data_mut().iter_mut().zip(pre.data()) {
                *p = self.cfg.nonlin.apply(*a);
            }
            // layernorm over the hidden dim, per frame
            let mut normed = Tensor::zeros(vec![t, h]);
            let mut out = Tensor::zeros(vec![t, h]);
            let mut inv_std = Vec::with_capacity(t);
            for r in 0..t {
                let row = post.row(r);
                let mean = row.iter().sum::<f64>() / h as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std.push(is);
                let nr = normed.row_mut(r);
                for j in 0..h {
                    nr[j] = (row[j] - mean) * is;
                }
                let orow = out.row_mut(r);
                for j in 0..h {
                    orow[j] = normed.at(r, j) * gain.data()[j] + lnb.data()[j];
                }
            }
            blocks.push(BlockCache { input: cur, pre_act: pre, normed, inv_std });
            cur = out;
        }
        Ok(Cache { blocks, output: cur })
    }

    /// Backward pass: accumulates parameter gradients into `store` and
    /// returns the gradient with respect to the input sequence.
    pub fn backward(&self, store: &mut ParamStore, cache: &Cache, d_out: &Tensor) -> Tensor {
        let h = self.cfg.hidden_dim;
        let mut d_cur = d_out.clone();
        for b in (0..self.cfg.blocks).rev() {
            let bc = &cache.blocks[b];
            let t = bc.input.rows();
            let gain = store.value(&format!("block{b}.ln_gain")).clone();

            // layernorm backward
            let mut d_gain = vec![0.0; h];
            let mut d_lnb = vec![0.0; h];
            let mut d_post = Tensor::zeros(vec![t, h]);
            for r in 0..t {
                let dy = d_cur.row(r);
                let xhat = bc.normed.row(r);
                for j in 0..h {
                    d_gain[j] += dy[j] * xhat[j];
                    d_lnb[j] += dy[j];
                }
                let dxhat: Vec<f64> = (0..h).map(|j| dy[j] * gain.data()[j]).collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / h as f64;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / h as f64;
                let is = bc.inv_std[r];
                let dp = d_post.row_mut(r);
                for j in 0..h {
                    dp[j] = is * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
            store.add_grad(&format!("block{b}.ln_gain"), &d_gain);
            store.add_grad(&format!("block{b}.ln_bias"), &d_lnb);

            // nonlinearity backward
            let mut d_pre = d_post;
            for (dp, a) in d_pre.data_mut().iter_mut().zip(bc.pre_act.data()) {
                *dp *= self.cfg.nonlin.deriv(*a);
            }

            // affine backward
            let w = store.value(&format!("block{b}.weight")).clone();
            let (dw, db, d_in) = affine_backward(&bc.input, &w, &d_pre);
            store.add_grad(&format!("block{b}.weight"), dw.data());
            store.add_grad(&format!("block{b}.bias"), &db);
            d_cur = d_in;
        }
        d_cur
    }

    pub fn head_forward(&self, store: &ParamStore, head: &str, input: &Tensor) -> Result<Tensor> {
        let spec = self
            .heads
            .get(head)
            .ok_or_else(|| Error::config(format!("unknown head `{head}`")))?;
        if input.cols() != spec.in_dim {
            return Err(Error::Shape(format!(
                "head `{head}` expects dim {}, got {}",
                spec.in_dim,
                input.cols()
            )));
        }
        let w = store.value(&format!("head.{head}.weight"));
        let b = store.value(&format!("head.{head}.bias"));
        Ok(affine(input, w, b))
    }

    /// Backward through a head; returns gradient with respect to its input.
    pub fn head_backward(
        &self,
        store: &mut ParamStore,
        head: &str,
        input: &Tensor,
        d_out: &Tensor,
    ) -> Tensor {
        let w = store.value(&format!("head.{head}.weight")).clone();
        let (dw, db, d_in) = affine_backward(input, &w, d_out);
        store.add_grad(&format!("head.{head}.weight"), dw.data());
        store.add_grad(&format!("head.{head}.bias"), &db);
        d_in
    }
}

/// y = x W + b for a T x in input and in x out weight.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let t = x.rows();
    let (fin, fout) = (w.rows(), w.cols());
    debug_assert_eq!(x.cols(), fin);
    let mut y = Tensor::zeros(vec![t, fout]);
    for r in 0..t {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        yr.copy_from_slice(b.data());
        for (i, &xi) in xr.iter().enumerate() {
            if xi != 0.0 {
                let wrow = w.row(i);
                for j in 0..fout {
                    yr[j] += xi * wrow[j];
                }
            }
        }
    }
    y
}

fn affine_backward(x: &Tensor, w: &Tensor, d_y: &Tensor) -> (Tensor, Vec<f64>, Tensor) {
    let t = x.rows();
    let (fin, fout) = (w.rows(), w.cols());
    let mut dw = Tensor::zeros(vec![fin, fout]);
    let mut db = vec![0.0; fout];
    let mut dx = Tensor::zeros(vec![t, fin]);
    for r in 0..t {
        let xr = x.row(r);
        let dyr = d_y.row(r);
        for j in 0..fout {
            db[j] += dyr[j];
        }
        for i in 0..fin {
            let dwrow = dw.row_mut(i);
            let xi = xr[i];
            for j in 0..fout {
                dwrow[j] += xi * dyr[j];
            }
        }
        let dxr = dx.row_mut(r);
        for i in 0..fin {
            let wrow = w.row(i);
            let mut acc = 0.0;
            for j in 0..fout {
                acc += wrow[j] * dyr[j];
            }
            dxr[i] = acc;
        }
    }
    (dw, db, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Encoder {
        Encoder::new(EncoderConfig::new(3, 4, 2)).with_task_head("t", 5)
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let enc = tiny();
        let mut store = enc.init_store(0);
        for p in store.iter_mut() {
            if p.name.contains("weight") || p.name.contains("bias") {
                p.value.fill(0.0);
            }
        }
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        let cache = enc.forward(&store, &x).unwrap();
        let logits = enc.head_forward(&store, "t", &cache.output).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_block_passes_input_through() {
        // single affine block with identity weights, no nonlinearity, and
        // layernorm neutralized by zero gain offsetting... instead bypass
        // layernorm effects by checking the affine output directly.
        let w = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = Tensor::zeros(vec![3]);
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.0, 0.5, -0.5]).unwrap();
        let y = affine(&x, &w, &b);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn forward_matches_straight_line_reevaluation() {
        // Independent oracle: re-evaluate the 2-block net with explicit
        // loops written from the layer definitions, no shared code paths
        // beyond raw arithmetic.
        let enc = Encoder::new(EncoderConfig {
            input_dim: 3,
            hidden_dim: 4,
            blocks: 2,
            nonlin: Nonlin::Tanh,
            prune_biases: true,
        });
        let store = enc.init_store(42);
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.7, 1.3, 0.4, 0.0, -0.2]).unwrap();
        let got = enc.forward(&store, &x).unwrap().output;

        let mut frames: Vec<Vec<f64>> = (0..2).map(|r| x.row(r).to_vec()).collect();
        for b in 0..2 {
            let w = store.value(&format!("block{b}.weight"));
            let bias = store.value(&format!("block{b}.bias"));
            let gain = store.value(&format!("block{b}.ln_gain"));
            let lnb = store.value(&format!("block{b}.ln_bias"));
            let fin = w.rows();
            frames = frames
                .iter()
                .map(|f| {
                    let mut a = vec![0.0; 4];
                    for j in 0..4 {
                        let mut s = bias.data()[j];
                        for i in 0..fin {
                            s += f[i] * w.at(i, j);
                        }
                        a[j] = s.tanh();
                    }
                    let mean = a.iter().sum::<f64>() / 4.0;
                    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
                    let is = 1.0 / (var + 1e-5).sqrt();
                    (0..4)
                        .map(|j| (a[j] - mean) * is * gain.data()[j] + lnb.data()[j])
                        .collect()
                })
                .collect();
        }
        for r in 0..2 {
            for j in 0..4 {
                assert!((got.at(r, j) - frames[r][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let enc = tiny();
        let store = enc.init_store(1);
        let x = Tensor::new(vec![3, 3], vec![0.5; 9]).unwrap();
        let a = enc.forward(&store, &x).unwrap().output;
        let b = enc.forward(&store, &x).unwrap().output;
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let enc = tiny();
        let store = enc.init_store(0);
        let x = Tensor::zeros(vec![2, 7]);
        assert!(enc.forward(&store, &x).is_err());
    }

    #[test]
    fn head_swap_keeps_encoder_param_count() {
        let a = Encoder::new(EncoderConfig::new(3, 4, 2)).with_task_head("a", 5);
        let b = Encoder::new(EncoderConfig::new(3, 4, 2)).with_task_head("b", 9);
        let count = |e: &Encoder| {
            e.init_store(0)
                .iter()
                .filter(|p| !p.name.starts_with("head."))
                .map(|p| p.value.len())
                .sum::<usize>()
        };
        assert_eq!(count(&a), count(&b));
    }
}
