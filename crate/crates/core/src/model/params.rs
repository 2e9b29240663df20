//! Named weights: initialization, binding onto a graph, and checkpoint I/O.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scenegen::mix_seed;
use crate::tensor::{ptv, Float, Graph, Tensor, Var};

use super::{CameraInput, ModelConfig, ModelError, Variant, TIME_DIM};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "model.json";
const WEIGHT_DIR: &str = "weights";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Normal with standard deviation `1/√fan_in`.
    Lecun,
    /// Normal with standard deviation 0.02.
    Embedding,
    Zero,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Every weight of a configuration: name, shape and initializer.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let (d, c) = (cfg.d, cfg.latent_dim());
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    push("embed.w".into(), vec![c, d], Lecun);
    push("embed.b".into(), vec![d], Zero);
    push("src.tag".into(), vec![d], Embedding);
    push("time.w".into(), vec![TIME_DIM, d], Lecun);
    push("time.b".into(), vec![d], Zero);
    push("head.w".into(), vec![d, c], Zero);
    push("head.b".into(), vec![c], Zero);
    let v = cfg.variant;
    if cfg.camera_in_dim() > 0 {
        for i in 0..4 {
            let fan_in = if i == 0 { cfg.camera_in_dim() } else { d };
            push(format!("cam.l{i}.w"), vec![fan_in, d], Lecun);
            push(format!("cam.l{i}.b"), vec![d], Zero);
        }
    }
    if v.camera_input() == CameraInput::PluckerField {
        push("plucker.w".into(), vec![cfg.plucker_dim(), d], Zero);
    }
    if v.uses_render() {
        push("render.hole".into(), vec![d], Embedding);
    }
    for b in 0..cfg.depth {
        for p in ["q", "k", "v", "o"] {
            push(format!("blk{b}.attn.{p}"), vec![d, d], Lecun);
        }
        push(format!("blk{b}.ff.w1"), vec![d, 4 * d], Lecun);
        push(format!("blk{b}.ff.b1"), vec![4 * d], Zero);
        push(format!("blk{b}.ff.w2"), vec![4 * d, d], Lecun);
        push(format!("blk{b}.ff.b2"), vec![d], Zero);
        for (name, init) in cross_weights(v) {
            push(format!("blk{b}.{name}"), vec![d, d], init);
        }
    }
    out
}

/// Cross-attention weights of one block for a variant.
fn cross_weights(v: Variant) -> Vec<(&'static str, Init)> {
    use Init::*;
    match v {
        Variant::PoseOnly => vec![
            ("cross.q", Lecun),
            ("cross.k_cam", Lecun),
            ("cross.v_cam", Lecun),
            ("cross.proj", Zero),
        ],
        Variant::RenderOnly | Variant::BaselineFusionPlucker => vec![
            ("cross.q", Lecun),
            ("cross.k_render", Lecun),
            ("cross.v_render", Lecun),
            ("cross.proj", Zero),
        ],
        Variant::QuerySharedRt | Variant::QuerySharedPlucker | Variant::NoKvConcat => vec![
            ("cross.q", Lecun),
            ("cross.k_render", Lecun),
            ("cross.v_render", Lecun),
            ("cross.k_cam", Lecun),
            ("cross.v_cam", Lecun),
            ("cross.proj", Zero),
        ],
        Variant::NoQueryShared | Variant::BaselineFusionRt => vec![
            ("cross_cam.q", Lecun),
            ("cross_cam.k", Lecun),
            ("cross_cam.v", Lecun),
            ("cross_cam.proj", Zero),
            ("cross_render.q", Lecun),
            ("cross_render.k", Lecun),
            ("cross_render.v", Lecun),
            ("cross_render.proj", Zero),
        ],
    }
}

/// Whether a weight is a zero-initialized gate of a conditioning path.
pub fn is_injection_gate(name: &str) -> bool {
    name.ends_with(".proj") || name == "plucker.w"
}

/// Whether a weight only sees the proxy render.
pub fn is_render_pathway(name: &str) -> bool {
    name.contains("render")
}

/// Weights updated when everything except attention and the conditioning
/// modules is frozen.
pub fn is_attention_group(name: &str) -> bool {
    name.contains(".attn.")
        || name.contains(".cross")
        || name.starts_with("cam.")
        || name.starts_with("plucker.")
        || name.starts_with("render.")
}

/// Named model weights in a fixed (sorted) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Graph variables of bound weights.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::MissingWeight(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    weights: Vec<WeightEntry>,
}

impl<T: Float> Params<T> {
    /// Deterministic initialization; each weight draws from its own stream
    /// keyed by `(seed, name)`, so adding a weight never perturbs the others.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let std = match init {
                Init::Zero => 0.0,
                Init::Embedding => 0.02,
                Init::Lecun => 1.0 / (shape[0] as f64).sqrt(),
            };
            let data: Vec<f64> = if init == Init::Zero {
                vec![0.0; n]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, fnv1a(&name)));
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect()
            };
            tensors.insert(name, Tensor::from_f64(shape, &data)?);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    /// Records every weight as a leaf; `trainable` decides which need gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Float>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Fills every weight selected by `pick` with normal values of the given
    /// standard deviation. Used to move off the zero-initialized point in tests
    /// and probes.
    pub fn randomize(&mut self, seed: u64, std: f64, pick: impl Fn(&str) -> bool) {
        for (name, t) in self.tensors.iter_mut() {
            if !pick(name) {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a(name)));
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = T::from_f64c(z * std);
            }
        }
    }

    /// Writes `model.json` and one PTV1 file per weight under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let ck = |msg: String| ModelError::Checkpoint {
            path: dir.display().to_string(),
            msg,
        };
        fs::create_dir_all(dir.join(WEIGHT_DIR)).map_err(|e| ck(e.to_string()))?;
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            weights: self
                .tensors
                .iter()
                .map(|(name, t)| WeightEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| ck(e.to_string()))?;
        fs::write(dir.join(MANIFEST), text + "\n").map_err(|e| ck(e.to_string()))?;
        for (name, t) in &self.tensors {
            ptv::write(&dir.join(WEIGHT_DIR).join(format!("{name}.ptv")), t)?;
        }
        Ok(())
    }

    /// Reads a checkpoint, validating each tensor against the manifest and the
    /// manifest against the layout of its configuration. When `expected` is
    /// given the stored configuration must produce the same weight shapes.
    pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<Self, ModelError> {
        let ck = |msg: String| ModelError::Checkpoint {
            path: dir.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| ck(e.to_string()))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| ck(format!("{MANIFEST}: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(ck(format!(
                "format version {} (expected {CHECKPOINT_VERSION})",
                manifest.format_version
            )));
        }
        manifest.config.validate()?;
        let want: BTreeMap<String, Vec<usize>> = layout(expected.unwrap_or(&manifest.config))
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        for entry in &manifest.weights {
            match want.get(&entry.name) {
                None => return Err(ck(format!("unexpected weight {}", entry.name))),
                Some(s) if *s != entry.shape => {
                    return Err(ck(format!(
                        "weight {} has shape {:?}, configuration expects {:?}",
                        entry.name, entry.shape, s
                    )))
                }
                _ => {}
            }
        }
        if let Some(missing) = want.keys().find(|n| !manifest.weights.iter().any(|e| &e.name == *n)) {
            return Err(ck(format!("missing weight {missing}")));
        }
        let mut tensors = BTreeMap::new();
        for entry in &manifest.weights {
            let t: Tensor<T> = ptv::read(&dir.join(WEIGHT_DIR).join(format!("{}.ptv", entry.name)))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(ck(format!(
                    "weight {} file has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            tensors.insert(entry.name.clone(), t);
        }
        Ok(Self {
            config: expected.cloned().unwrap_or(manifest.config),
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_gates_are_zero() {
        let cfg = ModelConfig {
            d: 8,
            depth: 2,
            heads: 2,
            patch: 2,
            variant: Variant::QuerySharedRt,
            seed: 3,
        };
        let a = Params::<f32>::init(&cfg).unwrap();
        let b = Params::<f32>::init(&cfg).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            if is_injection_gate(name) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(a.get("blk1.cross.proj").is_some());
        assert!(a.get("cam.l3.w").is_some());
    }

    #[test]
    fn every_variant_has_a_distinct_layout() {
        for v in Variant::ALL {
            let cfg = ModelConfig {
                d: 8,
                depth: 1,
                heads: 2,
                patch: 2,
                variant: v,
                seed: 0,
            };
            let p = Params::<f64>::init(&cfg).unwrap();
            assert_eq!(p.get("render.hole").is_some(), v.uses_render(), "{v}");
            assert_eq!(p.get("plucker.w").is_some(), v == Variant::BaselineFusionPlucker);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_shape_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            d: 8,
            depth: 1,
            heads: 2,
            patch: 2,
            variant: Variant::PoseOnly,
            seed: 1,
        };
        let p = Params::<f32>::init(&cfg).unwrap();
        p.save(dir.path()).unwrap();
        let back = Params::<f32>::load(dir.path(), None).unwrap();
        assert_eq!(back, p);
        let wider = ModelConfig { d: 12, ..cfg };
        let err = Params::<f32>::load(dir.path(), Some(&wider)).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }
}
