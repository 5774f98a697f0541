//! Named parameter tensors and their initialisation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::diffcore::{Float, Tape, Tensor, Var};

/// Toy-scale model dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub fusion_layers: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
    pub text_len: usize,
    pub region_text_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            width: 64,
            heads: 4,
            layers: 2,
            fusion_layers: 2,
            mlp_ratio: 4,
            embed_dim: 32,
            text_len: 32,
            region_text_len: 16,
            vocab_size: super::Vocab::builtin().len(),
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: String| Err(EncoderError::Params(m));
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return fail(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} not divisible into {} heads", self.width, self.heads));
        }
        if self.region_text_len > self.text_len {
            return fail("region text length exceeds the position table".into());
        }
        if self.width == 0 || self.embed_dim == 0 || self.vocab_size < 3 {
            return fail("width, embed_dim and vocabulary must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = first extent.
    FanIn,
    Uniform(f64),
    Zeros,
    Ones,
}

/// Prefixes of the encoder and projection parameters (the subset tracked by
/// the momentum shadow).
pub const MOMENTUM_PREFIXES: [&str; 4] = ["vision.", "text.", "proj_v.", "proj_t."];

pub fn is_momentum_tracked(name: &str) -> bool {
    MOMENTUM_PREFIXES.iter().any(|p| name.starts_with(p))
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.width;
    let hidden = d * cfg.mlp_ratio;
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));
    let linear = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, i: usize, o: usize| {
        push(format!("{p}.w"), vec![i, o], Init::FanIn);
        push(format!("{p}.b"), vec![o], Init::Zeros);
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.g"), vec![d], Init::Ones);
        push(format!("{p}.b"), vec![d], Init::Zeros);
    };
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for part in ["q", "k", "v", "o"] {
            linear(push, &format!("{p}.{part}"), d, d);
        }
    };
    let mlp = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        linear(push, &format!("{p}.fc1"), d, hidden);
        linear(push, &format!("{p}.fc2"), hidden, d);
    };
    let patch_dim = cfg.patch * cfg.patch * 3;

    linear(&mut push, "vision.patch", patch_dim, d);
    push("vision.cls".into(), vec![d], Init::Uniform(0.02));
    push("vision.pos".into(), vec![cfg.num_patches() + 1, d], Init::Uniform(0.02));
    for l in 0..cfg.layers {
        let p = format!("vision.blocks.{l}");
        norm(&mut push, &format!("{p}.ln1"));
        attn(&mut push, &format!("{p}.attn"));
        norm(&mut push, &format!("{p}.ln2"));
        mlp(&mut push, &format!("{p}.mlp"));
    }
    norm(&mut push, "vision.ln_f");

    push("text.tok".into(), vec![cfg.vocab_size, d], Init::Uniform(1.0 / (d as f64).sqrt()));
    push("text.pos".into(), vec![cfg.text_len, d], Init::Uniform(0.02));
    for l in 0..cfg.layers {
        let p = format!("text.blocks.{l}");
        norm(&mut push, &format!("{p}.ln1"));
        attn(&mut push, &format!("{p}.attn"));
        norm(&mut push, &format!("{p}.ln2"));
        mlp(&mut push, &format!("{p}.mlp"));
    }
    norm(&mut push, "text.ln_f");

    for l in 0..cfg.fusion_layers {
        let p = format!("fusion.blocks.{l}");
        norm(&mut push, &format!("{p}.ln_self"));
        attn(&mut push, &format!("{p}.self_attn"));
        norm(&mut push, &format!("{p}.ln_cross"));
        norm(&mut push, &format!("{p}.ln_kv"));
        attn(&mut push, &format!("{p}.cross_attn"));
        norm(&mut push, &format!("{p}.ln_mlp"));
        mlp(&mut push, &format!("{p}.mlp"));
    }
    norm(&mut push, "fusion.ln_f");

    push("proj_v.w".into(), vec![d, cfg.embed_dim], Init::FanIn);
    push("proj_t.w".into(), vec![d, cfg.embed_dim], Init::FanIn);
    linear(&mut push, "match_head", d, 2);
    linear(&mut push, "box_head", d, 4);
    specs
}

/// All parameter tensors of the model, keyed by hierarchical name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }
}

impl<T: Float> ParamStore<T> {
    /// Fan-scaled uniform initialisation, drawn in a fixed layout order.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamStore<T> {
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::FanIn => {
                    let a = 1.0 / (shape[0] as f64).sqrt();
                    (0..n).map(|_| T::c(rng.gen_range(-a..a))).collect()
                }
                Init::Uniform(a) => (0..n).map(|_| T::c(rng.gen_range(-a..a))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            tensors.insert(name, Tensor::new(shape, data).expect("layout shapes"));
        }
        ParamStore { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> ParamStore<T> {
        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copy of the parameters whose names satisfy `keep`.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParamStore<T> {
        let tensors = self.tensors.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        ParamStore { tensors }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Records every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        let vars = self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad))).collect();
        Bound { vars }
    }
}

/// Parameter names mapped to their leaves on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter '{name}' is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Rebinds `name` to `var` and returns the previous leaf.
    pub fn replace(&mut self, name: &str, var: Var) -> Option<Var> {
        self.vars.insert(name.to_string(), var)
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads<T: Float>(&self, tape: &Tape<T>) -> BTreeMap<String, Vec<T>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| tape.grad(*v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_unique_and_deterministic() {
        let cfg = ModelConfig::default();
        let a = ParamStore::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = ParamStore::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.len(), layout(&cfg).len());
        assert!(a.get("proj_v.w").is_some() && a.get("proj_v.b").is_none());
        assert_eq!(a.get("vision.pos").unwrap().shape(), &[65, 64]);
    }

    #[test]
    fn momentum_subset() {
        let cfg = ModelConfig::default();
        let p = ParamStore::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let shadow = p.subset(is_momentum_tracked);
        assert!(shadow.names().all(|n| !n.starts_with("fusion.") && !n.starts_with("match_head")));
        assert!(shadow.get("text.tok").is_some() && shadow.get("proj_t.w").is_some());
        assert!(shadow.get("box_head.w").is_none());
    }
}
