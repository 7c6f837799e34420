//! Named parameter tensors and their layout.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attention::{BehaviorWeights, MoeWeights};
use super::config::{Layout, ModelConfig};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape, data: vec![0.0; n] }
    }

    /// Gains are vectors; everything else the optimizer decays.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() >= 2
    }
}

/// All learnable tensors in a fixed order (see [`ParamIndex`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|t| Tensor::zeros(t.name.clone(), t.shape.clone())).collect() }
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].data
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn fill(&mut self, v: f64) {
        for t in &mut self.tensors {
            t.data.fill(v);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// `self += other`, tensor by tensor in order.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorIndex {
    pub norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub eq: usize,
    pub ek: usize,
    pub ev: usize,
    pub wo: usize,
    pub wg: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIndex {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub behavior: Option<BehaviorIndex>,
    pub moe_norm: usize,
    pub eb: usize,
    /// `(w1, w2)` for roles `0..=l`.
    pub experts: Vec<(usize, usize)>,
}

/// Positions of each tensor inside [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIndex {
    pub embed: usize,
    pub layers: Vec<LayerIndex>,
    pub final_norm: usize,
    /// Shared head (generative) or item head (ranking).
    pub head: usize,
    pub behavior_head: Option<usize>,
}

#[derive(Clone, Copy)]
enum Init {
    /// Norm gains.
    One,
    /// Normal with this standard deviation.
    Normal(f64),
}

impl ParamIndex {
    /// Builds the index and the ordered `(name, shape, init)` list.
    fn layout(cfg: &ModelConfig) -> (Self, Vec<(String, Vec<usize>, Init)>) {
        let (d, a, inner) = (cfg.dim, cfg.attention_width(), cfg.inner_dim);
        let nb = cfg.behavior_vocab();
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            specs.push((name, shape, init));
            specs.len() - 1
        };
        let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
        let out_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let out_fan = |n: usize| Init::Normal(out_scale / (n as f64).sqrt());

        let embed = push("embed".into(), vec![cfg.vocab_size(), d], Init::Normal(1.0));
        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let attn_norm = push(p("attn.norm"), vec![d], Init::One);
            let wq = push(p("attn.wq"), vec![d, a], fan(d));
            let wk = push(p("attn.wk"), vec![d, a], fan(d));
            let wv = push(p("attn.wv"), vec![d, a], fan(d));
            let wo = push(p("attn.wo"), vec![a, d], out_fan(a));
            let behavior = cfg.behavior_layer.then(|| BehaviorIndex {
                norm: push(p("behavior.norm"), vec![d], Init::One),
                wq: push(p("behavior.wq"), vec![d, a], fan(d)),
                wk: push(p("behavior.wk"), vec![d, a], fan(d)),
                wv: push(p("behavior.wv"), vec![d, a], fan(d)),
                eq: push(p("behavior.eq"), vec![nb, a], Init::Normal(0.5)),
                ek: push(p("behavior.ek"), vec![nb, a], Init::Normal(0.5)),
                ev: push(p("behavior.ev"), vec![nb, a], Init::Normal(0.5)),
                wo: push(p("behavior.wo"), vec![a, d], out_fan(a)),
                wg: push(p("behavior.wg"), vec![d, d], fan(d)),
            });
            let moe_norm = push(p("moe.norm"), vec![d], Init::One);
            let eb = push(p("moe.eb"), vec![nb, d], Init::Normal(1.0));
            let experts = (0..=cfg.sid_len)
                .map(|j| {
                    let in_w = if j == 0 { d } else { 2 * d };
                    let w1 = push(p(&format!("moe.expert{j}.w1")), vec![in_w, inner], fan(in_w));
                    let w2 = push(p(&format!("moe.expert{j}.w2")), vec![inner, d], out_fan(inner));
                    (w1, w2)
                })
                .collect();
            layers.push(LayerIndex { attn_norm, wq, wk, wv, wo, behavior, moe_norm, eb, experts });
        }
        let final_norm = push("final_norm".into(), vec![d], Init::One);
        let (head, behavior_head) = match cfg.layout {
            Layout::Generative => (push("head".into(), vec![d, cfg.vocab_size()], Init::Normal(0.02)), None),
            Layout::Ranking => (
                push("item_head".into(), vec![d, cfg.sid_vocab()], Init::Normal(0.02)),
                Some(push("behavior_head".into(), vec![d, nb], Init::Normal(0.02))),
            ),
        };
        (Self { embed, layers, final_norm, head, behavior_head }, specs)
    }

    pub fn new(cfg: &ModelConfig) -> Self {
        Self::layout(cfg).0
    }

    /// Expected `(name, shape)` list, for validating loaded tensors.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        Self::layout(cfg).1.into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn behavior_weights<'a>(&self, layer: usize, cfg: &ModelConfig, p: &'a ModelParams) -> Option<BehaviorWeights<'a>> {
        let b = self.layers[layer].behavior.as_ref()?;
        Some(BehaviorWeights {
            dim: cfg.dim,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            wq: p.get(b.wq),
            wk: p.get(b.wk),
            wv: p.get(b.wv),
            eq: p.get(b.eq),
            ek: p.get(b.ek),
            ev: p.get(b.ev),
            wo: p.get(b.wo),
            wg: p.get(b.wg),
        })
    }

    pub fn moe_weights<'a>(&self, layer: usize, cfg: &ModelConfig, p: &'a ModelParams) -> MoeWeights<'a> {
        let li = &self.layers[layer];
        MoeWeights {
            dim: cfg.dim,
            inner: cfg.inner_dim,
            eb: p.get(li.eb),
            experts: li.experts.iter().map(|&(a, b)| (p.get(a), p.get(b))).collect(),
        }
    }
}

/// Initialized parameters for `cfg`, deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let (_, specs) = ParamIndex::layout(cfg);
    let mut rng = rng::seeded(seed);
    let tensors = specs
        .into_iter()
        .map(|(name, shape, init)| {
            let mut t = Tensor::zeros(name, shape);
            match init {
                Init::One => t.data.fill(1.0),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    t.data.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
                }
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams { tensors })
}

/// Checks that `params` has exactly the tensors `cfg` expects.
pub fn check_params(cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let expected = ParamIndex::expected_shapes(cfg);
    if expected.len() != params.tensors.len() {
        return Err(Error::Shape(format!("expected {} tensors, found {}", expected.len(), params.tensors.len())));
    }
    for ((name, shape), t) in expected.iter().zip(&params.tensors) {
        if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                t.name, t.shape
            )));
        }
    }
    if !params.all_finite() {
        return Err(Error::Numeric("parameters contain non-finite values".into()));
    }
    Ok(())
}
