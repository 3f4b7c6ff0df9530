use std::collections::HashMap;

use super::{ModelConfig, ModelError};
use crate::numeric::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform { fan_in: usize },
    Normal { std: f64 },
    Const(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Trainable,
    /// Running statistics; saved with the model but never differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: Kind,
}

/// The ordered table of every tensor a configuration owns.
///
/// Order is the canonical construction order; snapshots and optimizers rely
/// on it.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        out.push(ParamSpec { name, shape, init, kind: Kind::Trainable });
    };
    let (c, d, s) = (cfg.n_channels, cfg.embed_dim, cfg.spatial_maps);
    let (h, dh, p) = (cfg.n_heads, cfg.head_dim(), cfg.n_patches());
    let zero = Init::Const(0.0);
    let one = Init::Const(1.0);
    let u = |fan_in| Init::Uniform { fan_in };
    let pos = Init::Normal { std: 0.02 };

    add("temporal_tok.pw.weight".into(), vec![d, c], u(c));
    add("temporal_tok.bn.gain".into(), vec![d], one);
    add("temporal_tok.bn.bias".into(), vec![d], zero);
    add("temporal_tok.dw.weight".into(), vec![d, cfg.temporal_kernel], u(cfg.temporal_kernel));
    add("temporal_tok.dw.bias".into(), vec![d], zero);

    add("spatial_tok.conv.weight".into(), vec![s, cfg.spatial_kernel], u(cfg.spatial_kernel));
    add("spatial_tok.conv.bias".into(), vec![s], zero);
    add("spatial_tok.bn.gain".into(), vec![s], one);
    add("spatial_tok.bn.bias".into(), vec![s], zero);
    let flat = s * cfg.spatial_pooled();
    add("spatial_tok.proj.weight".into(), vec![flat, d], u(flat));
    add("spatial_tok.proj.bias".into(), vec![d], zero);

    if cfg.use_positional_embedding {
        add("temporal_pos".into(), vec![p, d], pos);
        add("spatial_pos".into(), vec![c, d], pos);
    }

    let hidden = cfg.ffn_hidden();
    let mode = cfg.integration_mode;
    for l in 0..cfg.temporal_depth {
        let mut ffn = |stream: &str| {
            let pre = format!("layers.{l}.{stream}_ffn");
            add(format!("{pre}.ln.gain"), vec![d], one);
            add(format!("{pre}.ln.bias"), vec![d], zero);
            add(format!("{pre}.fc1.weight"), vec![d, hidden], u(d));
            add(format!("{pre}.fc1.bias"), vec![hidden], zero);
            add(format!("{pre}.fc2.weight"), vec![hidden, d], u(hidden));
            add(format!("{pre}.fc2.bias"), vec![d], zero);
        };
        ffn("temporal");
        if l < cfg.spatial_depth {
            ffn("spatial");
        }
        let mut interaction = |block: &str, with_pos: bool| {
            let pre = format!("layers.{l}.{block}");
            if !cfg.use_tsia {
                let name = if block == "tsia" { "concat" } else { "concat_rev" };
                add(format!("layers.{l}.{name}.weight"), vec![2 * d, d], u(2 * d));
                return;
            }
            for w in ["w1", "w2", "wt1"] {
                add(format!("{pre}.{w}"), vec![d, d], u(d));
            }
            if cfg.use_cosine_gate {
                add(format!("{pre}.wphi"), vec![d, d], u(d));
            }
            add(format!("{pre}.wk"), vec![d, d], u(d));
            if with_pos && cfg.use_electrode_pos_embedding {
                let shape = if cfg.shared_electrode_pos { vec![c, dh] } else { vec![h, c, dh] };
                add(format!("{pre}.e_pos"), shape, pos);
            }
            add(format!("{pre}.w_out"), vec![d, d], u(d));
        };
        if mode.updates_temporal() {
            interaction("tsia", true);
        }
        if mode.updates_spatial() && l < cfg.spatial_depth {
            interaction("tsia_rev", false);
        }
    }

    if cfg.fusion_mode == super::FusionMode::Adaptive {
        let fh = cfg.fusion_hidden();
        add("fusion.cwlp".into(), vec![c], Init::Const(1.0 / c as f64));
        add("fusion.att.fc1.weight".into(), vec![d, fh], u(d));
        add("fusion.att.fc1.bias".into(), vec![fh], zero);
        add("fusion.att.fc2.weight".into(), vec![fh, 1], u(fh));
        add("fusion.att.fc2.bias".into(), vec![1], zero);
    }

    let ch = cfg.classifier_hidden;
    add("head.fc1.weight".into(), vec![2 * d, ch], u(2 * d));
    add("head.fc1.bias".into(), vec![ch], zero);
    add("head.fc2.weight".into(), vec![ch, cfg.n_classes], u(ch));
    add("head.fc2.bias".into(), vec![cfg.n_classes], zero);

    for (bn, n) in [("temporal_tok.bn", d), ("spatial_tok.bn", s)] {
        out.push(ParamSpec { name: format!("{bn}.running_mean"), shape: vec![n], init: zero, kind: Kind::Buffer });
        out.push(ParamSpec { name: format!("{bn}.running_var"), shape: vec![n], init: one, kind: Kind::Buffer });
    }
    out
}

/// Named tensors of one configured network.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    kinds: Vec<Kind>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    /// Draws initial values. Each tensor uses its own stream keyed by name,
    /// so variants that share a name also share its initial value.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        let tensors = specs
            .iter()
            .map(|spec| {
                let mut rng = RngStream::named(seed, &spec.name);
                match spec.init {
                    Init::Uniform { fan_in } => {
                        let a = 1.0 / (fan_in as f64).sqrt();
                        Tensor::from_fn(&spec.shape, |_| rng.uniform(-a, a))
                    }
                    Init::Normal { std } => Tensor::from_fn(&spec.shape, |_| rng.normal(0.0, std)),
                    Init::Const(v) => Tensor::filled(&spec.shape, v),
                }
            })
            .collect();
        Ok(Self::assemble(&specs, tensors))
    }

    /// Builds a table from explicit values, checking names and shapes
    /// against the configuration.
    pub fn from_named(cfg: &ModelConfig, mut values: HashMap<String, Tensor>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in &specs {
            let t = values.remove(&spec.name).ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            tensors.push(t);
        }
        if let Some(extra) = values.keys().min() {
            return Err(ModelError::UnknownParam(extra.clone()));
        }
        Ok(Self::assemble(&specs, tensors))
    }

    fn assemble(specs: &[ParamSpec], tensors: Vec<Tensor>) -> Self {
        let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { kinds: specs.iter().map(|s| s.kind).collect(), names, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self, i: usize) -> Kind {
        self.kinds[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Trainable tensors in table order.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .zip(&self.kinds)
            .zip(self.tensors.iter_mut())
            .filter(|((_, k), _)| **k == Kind::Trainable)
            .map(|((n, _), t)| (n.as_str(), t))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().zip(&self.kinds).filter(|(_, k)| **k == Kind::Trainable).map(|(t, _)| t.numel()).sum()
    }

    /// Rounds every value to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}
