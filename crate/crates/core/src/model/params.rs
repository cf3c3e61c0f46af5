use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError};
use crate::tensor::{NdArray, Scalar};

/// Every weight of the backbone and projection head, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    tensors: BTreeMap<String, NdArray<T>>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    /// Normal with std `1 / sqrt(fan_in)`, `fan_in` being the first axis.
    FanIn,
    Zeros,
    Ones,
}

/// Names, shapes and initializers in creation order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let m = cfg.embed_dim;
    let p = cfg.patch_size;
    let hm = m * cfg.mlp_ratio;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    push("patch_embed.weight".into(), vec![3 * p * p, m], Init::FanIn);
    push("patch_embed.bias".into(), vec![m], Init::Zeros);
    push("cls_token".into(), vec![1, m], Init::Normal);
    push("cls_pos".into(), vec![1, m], Init::Normal);
    for i in 0..cfg.depth {
        for part in ["temporal", "spatial"] {
            let pre = format!("blocks.{i}.{part}");
            push(format!("{pre}.norm.gain"), vec![m], Init::Ones);
            push(format!("{pre}.norm.bias"), vec![m], Init::Zeros);
            push(format!("{pre}.qkv.weight"), vec![m, 3 * m], Init::FanIn);
            push(format!("{pre}.qv.bias"), vec![2 * m], Init::Zeros);
            let proj = if part == "temporal" && cfg.zero_init_temporal_proj {
                Init::Zeros
            } else {
                Init::FanIn
            };
            push(format!("{pre}.proj.weight"), vec![m, m], proj);
            push(format!("{pre}.proj.bias"), vec![m], Init::Zeros);
        }
        let pre = format!("blocks.{i}.mlp");
        push(format!("{pre}.norm.gain"), vec![m], Init::Ones);
        push(format!("{pre}.norm.bias"), vec![m], Init::Zeros);
        push(format!("{pre}.fc1.weight"), vec![m, hm], Init::FanIn);
        push(format!("{pre}.fc1.bias"), vec![hm], Init::Zeros);
        push(format!("{pre}.fc2.weight"), vec![hm, m], Init::FanIn);
        push(format!("{pre}.fc2.bias"), vec![m], Init::Zeros);
    }
    push("norm.gain".into(), vec![m], Init::Ones);
    push("norm.bias".into(), vec![m], Init::Zeros);
    push("head.fc1.weight".into(), vec![m, cfg.proj_hidden], Init::FanIn);
    push("head.fc1.bias".into(), vec![cfg.proj_hidden], Init::Zeros);
    push("head.fc2.weight".into(), vec![cfg.proj_hidden, cfg.proj_bottleneck], Init::FanIn);
    push("head.fc2.bias".into(), vec![cfg.proj_bottleneck], Init::Zeros);
    push("head.last.weight_v".into(), vec![cfg.proj_bottleneck, cfg.proj_out], Init::FanIn);
    out
}

impl ModelParams<f32> {
    /// Seeded initialization: weight matrices normal with std
    /// `1 / sqrt(fan_in)`, class token and its encoding normal with
    /// `init_std`, zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let tensors = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Normal => NdArray::from_fn(&shape, |_| normal.sample(&mut rng) as f32),
                    Init::FanIn => {
                        let scale = 1.0 / (shape[0] as f64).sqrt();
                        NdArray::from_fn(&shape, |_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32)
                    }
                    Init::Zeros => NdArray::zeros(&shape),
                    Init::Ones => NdArray::ones(&shape),
                };
                (name, value)
            })
            .collect();
        Ok(Self { tensors })
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_map(tensors: BTreeMap<String, NdArray<T>>) -> Self {
        Self { tensors }
    }

    pub fn into_map(self) -> BTreeMap<String, NdArray<T>> {
        self.tensors
    }

    /// Expected names and shapes for `cfg`.
    pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Checks that the name set and every shape match `cfg`.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expected = Self::expected_shapes(cfg);
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(ModelError::MissingParam(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::NameMismatch(format!(
                        "`{name}` has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(ModelError::NameMismatch(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NdArray<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut NdArray<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(NdArray::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Errors unless both sets hold the same names with the same shapes.
    pub fn check_same_layout(&self, other: &Self) -> Result<(), ModelError> {
        if self.tensors.len() != other.tensors.len() {
            return Err(ModelError::NameMismatch(format!(
                "{} vs {} parameters",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, a) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(ModelError::NameMismatch(format!("`{name}` missing on one side"))),
                Some(b) if a.shape() != b.shape() => {
                    return Err(ModelError::NameMismatch(format!(
                        "`{name}`: {:?} vs {:?}",
                        a.shape(),
                        b.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Weight decay applies to weight matrices only, never to gains, biases or
/// the class token.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with(".weight_v")
}
