//! Success-rate regressor.
//!
//! Each block refines the entity token with pre-norm residual sublayers:
//!
//! ```text
//! x = x + SelfAttn(LN(x))                 // one token: softmax weight is 1
//! x = x + CrossAttn(LN(x), attributes)    // masked slots excluded
//! x = x + FFN(LN(x))                      // GELU
//! ```
//!
//! The head is `sigmoid(w2 · tanh(W1 · LN(x) + b1) + b2)`.
//!
//! With a single query token, self-attention reduces to `W_o (W_v h)`; the
//! query/key projections would receive no gradient and are omitted.
//! Gradients are computed by hand and checked against central differences
//! in the test suite.

use serde::{Deserialize, Serialize};

use super::embedding::NodeEmbedding;
use super::PredictorError;
use crate::rng::DetRng;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub attribute_slots: usize,
}

impl ModelConfig {
    pub fn new(dim: usize, max_depth: usize) -> Self {
        ModelConfig { dim, layers: 2, hidden: 128, head_hidden: 64, attribute_slots: max_depth.saturating_sub(1) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(rows: usize, cols: usize, rng: &mut DetRng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Linear {
            rows,
            cols,
            weight: (0..rows * cols).map(|_| rng.uniform(-a, a)).collect(),
            bias: vec![0.0; rows],
        }
    }

    fn zeros_like(&self) -> Self {
        Linear { rows: self.rows, cols: self.cols, weight: vec![0.0; self.weight.len()], bias: vec![0.0; self.rows] }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    /// Accumulate parameter gradients into `grad` and return `dL/dx`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.cols];
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[r] += g;
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            let grow = &mut grad.weight[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                grow[c] += g * x[c];
                dx[c] += g * row[c];
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm { gain: vec![1.0; dim], bias: vec![0.0; dim] }
    }

    fn zeros_like(&self) -> Self {
        LayerNorm { gain: vec![0.0; self.gain.len()], bias: vec![0.0; self.bias.len()] }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, LnCache) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let y = xhat.iter().zip(&self.gain).zip(&self.bias).map(|((h, g), b)| h * g + b).collect();
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, cache: &LnCache, dy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let n = dy.len() as f64;
        let mut dxhat = vec![0.0; dy.len()];
        for i in 0..dy.len() {
            grad.gain[i] += dy[i] * cache.xhat[i];
            grad.bias[i] += dy[i];
            dxhat[i] = dy[i] * self.gain[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(&cache.xhat).map(|(d, h)| d * h).sum::<f64>() / n;
        dxhat
            .iter()
            .zip(&cache.xhat)
            .map(|(d, h)| cache.inv_std * (d - mean_d - h * mean_dx))
            .collect()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_K * (u + GELU_C * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_K * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_value: Linear,
    pub self_out: Linear,
    pub ln_cross: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub cross_out: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

struct BlockCache {
    ln1: LnCache,
    h1: Vec<f64>,
    v_self: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    q: Vec<f64>,
    active: Vec<usize>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    context: Vec<f64>,
    ln3: LnCache,
    h3: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

impl Block {
    fn init(cfg: &ModelConfig, rng: &mut DetRng) -> Self {
        let d = cfg.dim;
        Block {
            ln_self: LayerNorm::new(d),
            self_value: Linear::init(d, d, rng),
            self_out: Linear::init(d, d, rng),
            ln_cross: LayerNorm::new(d),
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            cross_out: Linear::init(d, d, rng),
            ln_ffn: LayerNorm::new(d),
            ffn_in: Linear::init(cfg.hidden, d, rng),
            ffn_out: Linear::init(d, cfg.hidden, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Block {
            ln_self: self.ln_self.zeros_like(),
            self_value: self.self_value.zeros_like(),
            self_out: self.self_out.zeros_like(),
            ln_cross: self.ln_cross.zeros_like(),
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            cross_out: self.cross_out.zeros_like(),
            ln_ffn: self.ln_ffn.zeros_like(),
            ffn_in: self.ffn_in.zeros_like(),
            ffn_out: self.ffn_out.zeros_like(),
        }
    }

    fn forward(&self, x0: &[f64], attrs: &[Vec<f64>], mask: &[bool]) -> (Vec<f64>, BlockCache) {
        let (h1, ln1) = self.ln_self.forward(x0);
        let v_self = self.self_value.forward(&h1);
        let x1 = add(x0, &self.self_out.forward(&v_self));

        let (h2, ln2) = self.ln_cross.forward(&x1);
        let q = self.query.forward(&h2);
        let active: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
        let keys: Vec<Vec<f64>> = active.iter().map(|&j| self.key.forward(&attrs[j])).collect();
        let values: Vec<Vec<f64>> = active.iter().map(|&j| self.value.forward(&attrs[j])).collect();
        let scale = 1.0 / (q.len() as f64).sqrt();
        let scores: Vec<f64> = keys.iter().map(|k| dot(&q, k) * scale).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut context = vec![0.0; q.len()];
        for (a, v) in alpha.iter().zip(&values) {
            context.iter_mut().zip(v).for_each(|(c, v)| *c += a * v);
        }
        let x2 = if active.is_empty() { x1 } else { add(&x1, &self.cross_out.forward(&context)) };

        let (h3, ln3) = self.ln_ffn.forward(&x2);
        let u = self.ffn_in.forward(&h3);
        let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let x3 = add(&x2, &self.ffn_out.forward(&g));
        let cache = BlockCache { ln1, h1, v_self, ln2, h2, q, active, keys, values, alpha, context, ln3, h3, u, g };
        (x3, cache)
    }

    fn backward(&self, c: &BlockCache, attrs: &[Vec<f64>], dx3: &[f64], grad: &mut Block) -> Vec<f64> {
        // feed-forward
        let dg = self.ffn_out.backward(&c.g, dx3, &mut grad.ffn_out);
        let du: Vec<f64> = dg.iter().zip(&c.u).map(|(d, u)| d * gelu_grad(*u)).collect();
        let dh3 = self.ffn_in.backward(&c.h3, &du, &mut grad.ffn_in);
        let mut dx2 = dx3.to_vec();
        add_assign(&mut dx2, &self.ln_ffn.backward(&c.ln3, &dh3, &mut grad.ln_ffn));

        // cross-attention
        let mut dx1 = dx2.clone();
        if !c.active.is_empty() {
            let dctx = self.cross_out.backward(&c.context, &dx2, &mut grad.cross_out);
            let dalpha: Vec<f64> = c.values.iter().map(|v| dot(&dctx, v)).collect();
            let weighted: f64 = c.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
            let scale = 1.0 / (c.q.len() as f64).sqrt();
            let mut dq = vec![0.0; c.q.len()];
            for (n, &j) in c.active.iter().enumerate() {
                let dscore = c.alpha[n] * (dalpha[n] - weighted);
                let dv: Vec<f64> = dctx.iter().map(|d| d * c.alpha[n]).collect();
                self.value.backward(&attrs[j], &dv, &mut grad.value);
                let dk: Vec<f64> = c.q.iter().map(|q| q * dscore * scale).collect();
                self.key.backward(&attrs[j], &dk, &mut grad.key);
                dq.iter_mut().zip(&c.keys[n]).for_each(|(d, k)| *d += k * dscore * scale);
            }
            let dh2 = self.query.backward(&c.h2, &dq, &mut grad.query);
            add_assign(&mut dx1, &self.ln_cross.backward(&c.ln2, &dh2, &mut grad.ln_cross));
        }

        // self-attention over the single entity token
        let dv = self.self_out.backward(&c.v_self, &dx1, &mut grad.self_out);
        let dh1 = self.self_value.backward(&c.h1, &dv, &mut grad.self_value);
        let mut dx0 = dx1;
        add_assign(&mut dx0, &self.ln_self.backward(&c.ln1, &dh1, &mut grad.ln_self));
        dx0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub norm: LayerNorm,
    pub hidden: Linear,
    pub out: Linear,
}

/// Cross-attention success-rate predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub blocks: Vec<Block>,
    pub head: Head,
}

/// Intermediate values kept for the backward pass.
pub struct ForwardTrace {
    blocks: Vec<BlockCache>,
    head_ln: LnCache,
    head_in: Vec<f64>,
    tanh: Vec<f64>,
    output: f64,
}

impl ForwardTrace {
    pub fn output(&self) -> f64 {
        self.output
    }
}

impl PredictorModel {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = DetRng::keyed(seed, "predictor-init");
        let blocks = (0..config.layers).map(|_| Block::init(&config, &mut rng)).collect();
        let head = Head {
            norm: LayerNorm::new(config.dim),
            hidden: Linear::init(config.head_hidden, config.dim, &mut rng),
            out: Linear::init(1, config.head_hidden, &mut rng),
        };
        PredictorModel { config, seed, blocks, head }
    }

    pub fn zeros_like(&self) -> Self {
        PredictorModel {
            config: self.config,
            seed: self.seed,
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            head: Head {
                norm: self.head.norm.zeros_like(),
                hidden: self.head.hidden.zeros_like(),
                out: self.head.out.zeros_like(),
            },
        }
    }

    fn check_shape(&self, input: &NodeEmbedding) -> Result<(), PredictorError> {
        let d = self.config.dim;
        let ok = input.entity.len() == d
            && input.attributes.len() == self.config.attribute_slots
            && input.mask.len() == self.config.attribute_slots
            && input.attributes.iter().all(|r| r.len() == d);
        if ok {
            Ok(())
        } else {
            Err(PredictorError::Shape(format!(
                "expected entity[{d}] and {}x{d} attributes",
                self.config.attribute_slots
            )))
        }
    }

    pub fn forward(&self, input: &NodeEmbedding) -> Result<ForwardTrace, PredictorError> {
        self.check_shape(input)?;
        let mut x = input.entity.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, &input.attributes, &input.mask);
            caches.push(cache);
            x = next;
        }
        let (head_in, head_ln) = self.head.norm.forward(&x);
        let tanh: Vec<f64> = self.head.hidden.forward(&head_in).into_iter().map(f64::tanh).collect();
        let logit = self.head.out.forward(&tanh)[0];
        Ok(ForwardTrace { blocks: caches, head_ln, head_in, tanh, output: sigmoid(logit) })
    }

    pub fn predict(&self, input: &NodeEmbedding) -> Result<f64, PredictorError> {
        Ok(self.forward(input)?.output)
    }

    /// Accumulate `d_output · ∂output/∂θ` into `grad`.
    pub fn backward(&self, input: &NodeEmbedding, trace: &ForwardTrace, d_output: f64, grad: &mut PredictorModel) {
        let y = trace.output;
        let dlogit = d_output * y * (1.0 - y);
        let dt = self.head.out.backward(&trace.tanh, &[dlogit], &mut grad.head.out);
        let dz: Vec<f64> = dt.iter().zip(&trace.tanh).map(|(d, t)| d * (1.0 - t * t)).collect();
        let dhead = self.head.hidden.backward(&trace.head_in, &dz, &mut grad.head.hidden);
        let mut dx = self.head.norm.backward(&trace.head_ln, &dhead, &mut grad.head.norm);
        for ((block, cache), g) in self.blocks.iter().zip(&trace.blocks).zip(grad.blocks.iter_mut()).rev() {
            dx = block.backward(cache, &input.attributes, &dx, g);
        }
    }

    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        fn lin<'a>(out: &mut Vec<(String, &'a mut Vec<f64>)>, name: String, l: &'a mut Linear) {
            out.push((format!("{name}.weight"), &mut l.weight));
            out.push((format!("{name}.bias"), &mut l.bias));
        }
        fn ln<'a>(out: &mut Vec<(String, &'a mut Vec<f64>)>, name: String, l: &'a mut LayerNorm) {
            out.push((format!("{name}.gain"), &mut l.gain));
            out.push((format!("{name}.bias"), &mut l.bias));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            ln(&mut out, format!("blocks.{i}.ln_self"), &mut b.ln_self);
            lin(&mut out, format!("blocks.{i}.self_value"), &mut b.self_value);
            lin(&mut out, format!("blocks.{i}.self_out"), &mut b.self_out);
            ln(&mut out, format!("blocks.{i}.ln_cross"), &mut b.ln_cross);
            lin(&mut out, format!("blocks.{i}.query"), &mut b.query);
            lin(&mut out, format!("blocks.{i}.key"), &mut b.key);
            lin(&mut out, format!("blocks.{i}.value"), &mut b.value);
            lin(&mut out, format!("blocks.{i}.cross_out"), &mut b.cross_out);
            ln(&mut out, format!("blocks.{i}.ln_ffn"), &mut b.ln_ffn);
            lin(&mut out, format!("blocks.{i}.ffn_in"), &mut b.ffn_in);
            lin(&mut out, format!("blocks.{i}.ffn_out"), &mut b.ffn_out);
        }
        ln(&mut out, "head.norm".into(), &mut self.head.norm);
        lin(&mut out, "head.hidden".into(), &mut self.head.hidden);
        lin(&mut out, "head.out".into(), &mut self.head.out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.clone().tensors_mut().iter().map(|(_, t)| t.len()).sum()
    }

    /// Zero the output map so every prediction is sigmoid(0) = 0.5.
    pub fn zero_head(&mut self) {
        self.head.out.weight.iter_mut().for_each(|w| *w = 0.0);
        self.head.out.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PredictorError> {
        serde_json::from_str(s).map_err(|e| PredictorError::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(cfg: &ModelConfig, active: usize, seed: u64) -> NodeEmbedding {
        let mut rng = DetRng::new(seed);
        let mut v = |n: usize| (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<f64>>();
        NodeEmbedding {
            entity: v(cfg.dim),
            attributes: (0..cfg.attribute_slots)
                .map(|i| if i < active { v(cfg.dim) } else { vec![0.0; cfg.dim] })
                .collect(),
            mask: (0..cfg.attribute_slots).map(|i| i < active).collect(),
        }
    }

    fn small() -> ModelConfig {
        ModelConfig { dim: 6, layers: 2, hidden: 8, head_hidden: 5, attribute_slots: 2 }
    }

    #[test]
    fn zero_head_outputs_half() {
        let mut m = PredictorModel::init(small(), 1);
        m.zero_head();
        for s in 0..5 {
            assert_eq!(m.predict(&input(&small(), (s % 3) as usize, s)).unwrap(), 0.5);
        }
    }

    #[test]
    fn masked_rows_are_ignored() {
        let m = PredictorModel::init(small(), 2);
        let mut x = input(&small(), 0, 7);
        let base = m.predict(&x).unwrap();
        x.attributes[0] = vec![9.0; 6];
        x.attributes[1] = vec![-3.0; 6];
        assert_eq!(m.predict(&x).unwrap(), base);
        let mut y = input(&small(), 1, 8);
        let base = m.predict(&y).unwrap();
        y.attributes[1] = vec![5.0; 6];
        assert_eq!(m.predict(&y).unwrap(), base);
    }

    #[test]
    fn output_in_unit_interval_and_shape_checked() {
        let m = PredictorModel::init(small(), 3);
        let p = m.predict(&input(&small(), 2, 1)).unwrap();
        assert!((0.0..=1.0).contains(&p));
        let mut bad = input(&small(), 2, 1);
        bad.entity.pop();
        assert!(matches!(m.predict(&bad), Err(PredictorError::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = PredictorModel::init(small(), 4);
        assert_eq!(PredictorModel::from_json(&m.to_json()).unwrap(), m);
    }
}
