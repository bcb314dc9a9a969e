use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::flow_ops::volume_channels;
use crate::tensor::{read_checkpoint, write_checkpoint, Scalar, Shape, Tape, Tensor, Var};

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Shared Siamese extractor.
    Extractor,
    /// Per-level pyramid convolutions.
    Pyramid(usize),
    /// Per-level correlation encoders.
    Encoder(usize),
    /// Recurrent cell, including the upsampling deconvolution.
    Gru,
    /// Flow regression head.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zero,
    /// Uniform in `(-a, a)`.
    Uniform(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub group: ParamGroup,
    init: Init,
}

fn conv_weight(out_c: usize, in_c: usize, k: usize) -> Shape {
    Shape::new(out_c, in_c, k, k)
}

fn bias(c: usize) -> Shape {
    Shape::new(1, 1, 1, c)
}

/// The full, ordered parameter registry for a configuration.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    // He-uniform bound for leaky-ReLU layers.
    let he = |fan_in: usize| (6.0 / ((1.0 + cfg.leaky_slope * cfg.leaky_slope) * fan_in as f64)).sqrt();
    let mut conv = |name: &str, out_c: usize, in_c: usize, k: usize, group: ParamGroup, bound: f64, with_bias: bool| {
        specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: conv_weight(out_c, in_c, k),
            group,
            init: Init::Uniform(bound),
        });
        if with_bias {
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: bias(out_c),
                group,
                init: Init::Zero,
            });
        }
    };
    let (k1, km, k) = (cfg.conv1_kernel, cfg.mid_kernel, cfg.kernel);
    let (c1, cf, cp, ce, ch, chd) = (
        cfg.conv1_channels,
        cfg.feature_channels,
        cfg.pyramid_channels,
        cfg.encoder_channels,
        cfg.hidden_channels,
        cfg.head_channels,
    );
    use ParamGroup::*;
    conv("extractor.conv1", c1, 3, k1, Extractor, he(3 * k1 * k1), true);
    conv("extractor.conv2", cf, c1, km, Extractor, he(c1 * km * km), true);
    conv("extractor.conv3", cf, cf, km, Extractor, he(cf * km * km), true);
    for l in 0..cfg.num_scales {
        conv(&format!("pyramid.{l}"), cp, cf, k, Pyramid(l), he(cf * k * k), true);
    }
    for (l, &d) in cfg.max_displacements.iter().enumerate() {
        let vc = volume_channels(d);
        conv(&format!("encoder.{l}.conv0"), ce, vc, k, Encoder(l), he(vc * k * k), true);
        conv(&format!("encoder.{l}.conv1"), ce, ce, k, Encoder(l), he(ce * k * k), true);
        conv(&format!("encoder.{l}.conv2"), ce, ce, k, Encoder(l), he(ce * k * k), true);
    }
    let small = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    for gate in ["z", "r", "h"] {
        conv(&format!("gru.w_{gate}"), ch, ce, k, Gru, small(ce * k * k), true);
        conv(&format!("gru.u_{gate}"), ch, ch, k, Gru, small(ch * k * k), false);
    }
    // Each output pixel of a stride-2 deconvolution sees (kernel/2)^2 taps per channel.
    let taps = ch * (cfg.deconv_kernel / 2).pow(2);
    conv("gru.up", ch, ch, cfg.deconv_kernel, Gru, (3.0 / taps as f64).sqrt(), true);
    let head_in = cf + cfg.num_scales * ch;
    conv("head.conv0", chd, head_in, k, Head, he(head_in * k * k), true);
    conv("head.conv1", 2, chd, k, Head, 0.1 * small(chd * k * k), true);
    specs
}

/// Named learnable tensors, keyed by the registry names of [`param_specs`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization: fan-in scaled uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let t = match spec.init {
                Init::Zero => Tensor::zeros(spec.shape),
                Init::Uniform(a) => {
                    let data = (0..spec.shape.len()).map(|_| T::of(rng.random_range(-a..a))).collect();
                    Tensor::from_vec(spec.shape, data)?
                }
            };
            tensors.insert(spec.name, t);
        }
        Ok(ModelParams { tensors })
    }

    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let mut tensors: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, t) in named {
            if tensors.insert(name.clone(), t).is_some() {
                return Err(ModelError::Param(format!("parameter `{name}` appears twice")));
            }
        }
        let specs = param_specs(cfg);
        for spec in &specs {
            let t = tensors
                .get(&spec.name)
                .ok_or_else(|| ModelError::Param(format!("missing parameter `{}`", spec.name)))?;
            if t.shape() != spec.shape {
                return Err(ModelError::Param(format!(
                    "parameter `{}` has shape {}, config expects {}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        if tensors.len() != specs.len() {
            let extra: Vec<_> = tensors
                .keys()
                .filter(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .collect();
            return Err(ModelError::Param(format!("unexpected parameters: {}", extra.join(", "))));
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
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

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.shape().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = File::create(path).map_err(|e| ModelError::Io(path.display().to_string(), e))?;
        write_checkpoint(BufWriter::new(file), self.iter())?;
        Ok(())
    }

    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let file = File::open(path).map_err(|e| ModelError::Io(path.display().to_string(), e))?;
        let named = read_checkpoint(BufReader::new(file))?;
        Self::from_named(cfg, named)
    }
}

/// Tape handles for every parameter of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Param(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Rebinds `name` to another tape value, e.g. a perturbed copy in a
    /// finite-difference check.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<Var, ModelError> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| ModelError::Param(format!("missing parameter `{name}`")))?;
        Ok(std::mem::replace(slot, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique_and_complete() {
        let cfg = ModelConfig::default();
        let specs = param_specs(&cfg);
        let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
        for gate in ["z", "r", "h"] {
            assert!(names.contains(&format!("gru.w_{gate}.weight")));
            assert!(names.contains(&format!("gru.u_{gate}.weight")));
        }
        assert!(names.contains(&"gru.up.weight".to_string()));
        let enc0 = specs.iter().find(|s| s.name == "encoder.0.conv0.weight").unwrap();
        assert_eq!(enc0.shape.c(), 121);
        let enc3 = specs.iter().find(|s| s.name == "encoder.3.conv0.weight").unwrap();
        assert_eq!(enc3.shape.c(), 441);
    }

    #[test]
    fn gru_gate_kernels_are_odd() {
        for s in param_specs(&ModelConfig::default()) {
            if s.group == ParamGroup::Gru && s.name != "gru.up.weight" && s.name.ends_with("weight") {
                assert_eq!(s.shape.h() % 2, 1, "{}", s.name);
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::tiny();
        let a = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let c = ModelParams::<f32>::init(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.get("head.conv0.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::<f32>::init(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        p.save(&path).unwrap();
        let q = ModelParams::<f32>::load(&path, &cfg).unwrap();
        for ((na, ta), (nb, tb)) in p.iter().zip(q.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn load_rejects_mismatched_config() {
        let p = ModelParams::<f32>::init(&ModelConfig::tiny(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        p.save(&path).unwrap();
        assert!(ModelParams::<f32>::load(&path, &ModelConfig::default()).is_err());
    }
}
