//! Batched forward pass recorded on a [`Tape`].
//!
//! Activations carry a leading batch axis: inputs are `[B, C, T]`, temporal
//! tokens `[B, P, D]`, spatial tokens `[B, C, D]`. Head-split tensors are
//! `[B, H, rows, d_h]` where head `h` owns feature columns
//! `h·d_h .. (h+1)·d_h`.

use super::params::Kind;
use super::{FusionMode, ModelConfig, ModelError, Params};
use crate::numeric::{BatchStats, RngStream, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Attention quantities of one interaction layer, batched over trials.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTrace {
    /// `[B, H, C, C]`
    pub sacm: Option<Tensor>,
    /// `[B, H, C]`
    pub omega: Option<Tensor>,
    /// `[B, H, d_h, d_h]`
    pub tcam: Option<Tensor>,
    /// Temporal tokens entering and leaving the interaction, `[B, P, D]`.
    pub pre_tsia: Option<Tensor>,
    pub post_tsia: Option<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// `[B, P]`
    pub alpha: Option<Tensor>,
}

/// Outputs of the spatial-context half of an interaction.
#[derive(Clone, Copy, Debug)]
pub struct SacmOut {
    /// Pooled context, `[B, D]`.
    pub s_pool: Var,
    pub affinity: Var,
    pub omega: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TcamOut {
    /// Refined target per head, `[B, H, R, d_h]`.
    pub refined: Var,
    pub affinity: Var,
}

/// One forward evaluation: the tape, bound parameters and per-call state.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    cfg: &'a ModelConfig,
    params: &'a Params,
    vars: Vec<Option<Var>>,
    mode: Mode,
    rng: RngStream,
    stats: Vec<(String, BatchStats)>,
    trace: Option<ForwardTrace>,
}

impl<'a> Ctx<'a> {
    /// Binds every trainable tensor as a tape leaf.
    pub fn new(
        cfg: &'a ModelConfig,
        params: &'a Params,
        tape: &'a mut Tape,
        mode: Mode,
        rng: RngStream,
        requires_grad: bool,
    ) -> Self {
        let vars = (0..params.len())
            .map(|i| (params.kind(i) == Kind::Trainable).then(|| tape.leaf(params.tensor(i).clone(), requires_grad)))
            .collect();
        Self { tape, cfg, params, vars, mode, rng, stats: Vec::new(), trace: None }
    }

    /// Uses caller-provided handles for the trainable tensors, in table order.
    pub fn with_vars(
        cfg: &'a ModelConfig,
        params: &'a Params,
        tape: &'a mut Tape,
        trainable: &[Var],
        mode: Mode,
        rng: RngStream,
    ) -> Result<Self, ModelError> {
        let mut it = trainable.iter();
        let mut vars = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            if params.kind(i) == Kind::Trainable {
                let v = *it.next().ok_or_else(|| ModelError::MissingParam(params.names()[i].clone()))?;
                if tape.shape(v) != params.tensor(i).shape() {
                    return Err(ModelError::ParamShape {
                        name: params.names()[i].clone(),
                        expected: params.tensor(i).shape().to_vec(),
                        found: tape.shape(v).to_vec(),
                    });
                }
                vars.push(Some(v));
            } else {
                vars.push(None);
            }
        }
        if it.next().is_some() {
            return Err(ModelError::UnknownParam("<extra bound tensor>".into()));
        }
        Ok(Self { tape, cfg, params, vars, mode, rng, stats: Vec::new(), trace: None })
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(ForwardTrace::default());
    }

    pub fn take_trace(&mut self) -> Option<ForwardTrace> {
        self.trace.take()
    }

    /// Batch statistics gathered by train-mode batch norms, keyed by layer.
    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats)
    }

    /// Bound handles in table order (trainable tensors only).
    pub fn bound(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (self.params.names()[i].clone(), v)))
            .collect()
    }

    pub fn param(&self, name: &str) -> Result<Var, ModelError> {
        self.params
            .position(name)
            .and_then(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    fn buffer(&self, name: &str) -> Result<&'a [f64], ModelError> {
        let params: &'a Params = self.params;
        params.get(name).map(Tensor::data).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// `x · W + b` over the last axis.
    fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var, ModelError> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let mut y = self.tape.matmul(x, w)?;
        if bias {
            let b = self.param(&format!("{prefix}.bias"))?;
            y = self.tape.add(y, b)?;
        }
        Ok(y)
    }

    fn batchnorm(&mut self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let gain = self.param(&format!("{prefix}.gain"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        if self.train() {
            let (y, stats) = self.tape.batchnorm_train(x, gain, bias, BN_EPS)?;
            self.stats.push((prefix.to_string(), stats));
            Ok(y)
        } else {
            let mean = self.buffer(&format!("{prefix}.running_mean"))?;
            let var = self.buffer(&format!("{prefix}.running_var"))?;
            Ok(self.tape.batchnorm_eval(x, gain, bias, mean, var, BN_EPS)?)
        }
    }

    fn check_input(&self, x: Var) -> Result<usize, ModelError> {
        let s = self.tape.shape(x);
        let (c, t) = (self.cfg.n_channels, self.cfg.n_samples);
        if s.len() != 3 || s[1] != c || s[2] != t {
            return Err(ModelError::InputShape { expected: vec![0, c, t], found: s.to_vec() });
        }
        Ok(s[0])
    }

    /// `[B, C, T] → [B, P, D]`: pointwise conv, batch norm, depthwise conv,
    /// GELU, average pooling.
    pub fn temporal_tokenize(&mut self, x: Var) -> Result<Var, ModelError> {
        self.check_input(x)?;
        let cfg = self.cfg;
        let pw = self.param("temporal_tok.pw.weight")?;
        let y = self.tape.conv1d_pointwise(x, pw, None)?;
        let y = self.batchnorm("temporal_tok.bn", y)?;
        let (dw, dwb) = (self.param("temporal_tok.dw.weight")?, self.param("temporal_tok.dw.bias")?);
        let y = self.tape.conv1d_depthwise(y, dw, Some(dwb))?;
        let y = self.tape.gelu(y)?;
        let y = self.tape.avgpool1d(y, cfg.pool_window, cfg.pool_stride)?;
        Ok(self.tape.permute(y, &[0, 2, 1])?)
    }

    /// `[B, C, T] → [B, C, D]`: each channel passes alone through a shared
    /// conv, GELU, batch norm and pooling, then a shared linear map.
    pub fn spatial_tokenize(&mut self, x: Var) -> Result<Var, ModelError> {
        let b = self.check_input(x)?;
        let cfg = self.cfg;
        let (c, t, s) = (cfg.n_channels, cfg.n_samples, cfg.spatial_maps);
        let xr = self.tape.reshape(x, &[b * c, 1, t])?;
        let w = self.param("spatial_tok.conv.weight")?;
        let w = self.tape.reshape(w, &[s, 1, cfg.spatial_kernel])?;
        let bias = self.param("spatial_tok.conv.bias")?;
        let y = self.tape.conv1d(xr, w, Some(bias), 1)?;
        let y = self.tape.gelu(y)?;
        let y = self.batchnorm("spatial_tok.bn", y)?;
        let y = self.tape.avgpool1d(y, cfg.pool_window, cfg.pool_stride)?;
        let y = self.tape.reshape(y, &[b, c, s * cfg.spatial_pooled()])?;
        self.linear(y, "spatial_tok.proj", true)
    }

    /// Pre-norm residual MLP, `z + drop(fc2(gelu(fc1(ln(z)))))`.
    pub fn ffn(&mut self, prefix: &str, z: Var) -> Result<Var, ModelError> {
        let g = self.param(&format!("{prefix}.ln.gain"))?;
        let b = self.param(&format!("{prefix}.ln.bias"))?;
        let y = self.tape.layernorm(z, g, b, LN_EPS)?;
        let y = self.linear(y, &format!("{prefix}.fc1"), true)?;
        let y = self.tape.gelu(y)?;
        let y = self.linear(y, &format!("{prefix}.fc2"), true)?;
        let train = self.train();
        let y = self.tape.dropout(y, self.cfg.dropout, &mut self.rng, train)?;
        Ok(self.tape.add(z, y)?)
    }

    /// `[B, R, D] → [B, H, R, d_h]`
    fn split_heads(&mut self, x: Var) -> Result<Var, ModelError> {
        let s = self.tape.shape(x).to_vec();
        let (h, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let y = self.tape.reshape(x, &[s[0], s[1], h, dh])?;
        Ok(self.tape.permute(y, &[0, 2, 1, 3])?)
    }

    /// `[B, H, R, d_h] → [B, R, D]`
    fn merge_heads(&mut self, x: Var) -> Result<Var, ModelError> {
        let s = self.tape.shape(x).to_vec();
        let y = self.tape.permute(x, &[0, 2, 1, 3])?;
        Ok(self.tape.reshape(y, &[s[0], s[2], s[1] * s[3]])?)
    }

    /// Spatial context: per-head token affinity, norm-based importance and
    /// the importance-weighted pooled summary.
    pub fn sacm(&mut self, prefix: &str, context: Var, with_pos: bool) -> Result<SacmOut, ModelError> {
        let (h, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let b = self.tape.shape(context)[0];
        let q = self.tape.shape(context)[1];
        let pos_name = format!("{prefix}.e_pos");
        let pos = if with_pos && self.has(&pos_name) {
            let e = self.param(&pos_name)?;
            Some(if self.cfg.shared_electrode_pos {
                self.tape.reshape(e, &[q, 1, dh])?
            } else {
                self.tape.permute(e, &[1, 0, 2])?
            })
        } else {
            None
        };
        let project = |ctx: &mut Self, w: &str| -> Result<Var, ModelError> {
            let w = ctx.param(&format!("{prefix}.{w}"))?;
            let y = ctx.tape.matmul(context, w)?;
            let mut y = ctx.tape.reshape(y, &[b, q, h, dh])?;
            if let Some(e) = pos {
                y = ctx.tape.add(y, e)?;
            }
            Ok(ctx.tape.permute(y, &[0, 2, 1, 3])?)
        };
        let y1 = project(self, "w1")?;
        let y2 = project(self, "w2")?;
        let scores = self.tape.matmul_t(y1, y2, false, true)?;
        let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let affinity = self.tape.softmax(scores, -1)?;
        let mixed = self.tape.matmul(affinity, y1)?;
        let norms = self.tape.l2norm(y1, -1)?;
        let omega = self.tape.softmax(norms, -1)?;
        let w = self.tape.reshape(omega, &[b, h, 1, q])?;
        let pooled = self.tape.matmul(w, mixed)?;
        let s_pool = self.tape.reshape(pooled, &[b, h * dh])?;
        Ok(SacmOut { s_pool, affinity, omega })
    }

    /// Feature-dimension attention over a cosine-gated projection of the
    /// target tokens.
    pub fn tcam(&mut self, prefix: &str, target: Var) -> Result<TcamOut, ModelError> {
        let r = self.tape.shape(target)[1];
        let wt1 = self.param(&format!("{prefix}.wt1"))?;
        let mut x1 = self.tape.matmul(target, wt1)?;
        let phi = format!("{prefix}.wphi");
        if self.has(&phi) {
            let wphi = self.param(&phi)?;
            let arg = self.tape.matmul(target, wphi)?;
            let gate = self.tape.cos(arg)?;
            x1 = self.tape.mul(x1, gate)?;
        }
        let wk = self.param(&format!("{prefix}.wk"))?;
        let k = self.tape.matmul(target, wk)?;
        let x1 = self.split_heads(x1)?;
        let k = self.split_heads(k)?;
        let scores = self.tape.matmul_t(x1, k, true, false)?;
        let scores = self.tape.scale(scores, 1.0 / (r as f64).sqrt())?;
        let affinity = self.tape.softmax(scores, -1)?;
        let refined = self.tape.matmul(x1, affinity)?;
        Ok(TcamOut { refined, affinity })
    }

    /// Refines `target` `[B, R, D]` under the pooled context of `context`
    /// `[B, Q, D]`, projected by a bias-free output map.
    pub fn tsia(&mut self, prefix: &str, target: Var, context: Var, with_pos: bool) -> Result<(Var, SacmOut, TcamOut), ModelError> {
        let (h, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let b = self.tape.shape(target)[0];
        let sacm = self.sacm(prefix, context, with_pos)?;
        let tcam = self.tcam(prefix, target)?;
        let gate = self.tape.reshape(sacm.s_pool, &[b, h, 1, dh])?;
        let gated = self.tape.mul(tcam.refined, gate)?;
        let merged = self.merge_heads(gated)?;
        let w_out = self.param(&format!("{prefix}.w_out"))?;
        Ok((self.tape.matmul(merged, w_out)?, sacm, tcam))
    }

    /// Interaction without attention: `[target ; mean(context)] · W`.
    fn concat_interaction(&mut self, name: &str, target: Var, context: Var) -> Result<Var, ModelError> {
        let shape = self.tape.shape(target).to_vec();
        let d = shape[2];
        let m = self.tape.mean_axis(context, 1)?;
        let m = self.tape.reshape(m, &[shape[0], 1, d])?;
        let m = self.tape.broadcast_to(m, &shape)?;
        let cat = self.tape.concat(&[target, m], 2)?;
        let w = self.param(&format!("{name}.weight"))?;
        Ok(self.tape.matmul(cat, w)?)
    }

    /// Runs the interactive blocks from initial tokens.
    pub fn encode_tokens(&mut self, zt0: Var, zs0: Var) -> Result<(Var, Var), ModelError> {
        let cfg = self.cfg;
        let mode = cfg.integration_mode;
        let (mut zt, mut zs) = (zt0, zs0);
        for l in 0..cfg.temporal_depth {
            let spatial_active = l < cfg.spatial_depth;
            if spatial_active {
                zs = self.ffn(&format!("layers.{l}.spatial_ffn"), zs)?;
            }
            let ht = self.ffn(&format!("layers.{l}.temporal_ffn"), zt)?;
            let mut layer = LayerTrace::default();
            let new_zt = if mode.updates_temporal() {
                if cfg.use_tsia {
                    let (o, sacm, tcam) = self.tsia(&format!("layers.{l}.tsia"), ht, zs, true)?;
                    if self.trace.is_some() {
                        layer.sacm = Some(self.tape.value(sacm.affinity).clone());
                        layer.omega = Some(self.tape.value(sacm.omega).clone());
                        layer.tcam = Some(self.tape.value(tcam.affinity).clone());
                    }
                    o
                } else {
                    self.concat_interaction(&format!("layers.{l}.concat"), ht, zs)?
                }
            } else {
                ht
            };
            if mode.updates_spatial() && spatial_active {
                zs = if cfg.use_tsia {
                    self.tsia(&format!("layers.{l}.tsia_rev"), zs, ht, false)?.0
                } else {
                    self.concat_interaction(&format!("layers.{l}.concat_rev"), zs, ht)?
                };
            }
            zt = new_zt;
            if let Some(trace) = self.trace.as_mut() {
                layer.pre_tsia = Some(self.tape.value(ht).clone());
                layer.post_tsia = Some(self.tape.value(zt).clone());
                trace.layers.push(layer);
            }
        }
        Ok((zt, zs))
    }

    /// Tokenizers plus optional positional embeddings.
    pub fn tokenize(&mut self, x: Var) -> Result<(Var, Var), ModelError> {
        let mut zt = self.temporal_tokenize(x)?;
        let mut zs = self.spatial_tokenize(x)?;
        if self.cfg.use_positional_embedding {
            let tp = self.param("temporal_pos")?;
            let sp = self.param("spatial_pos")?;
            zt = self.tape.add(zt, tp)?;
            zs = self.tape.add(zs, sp)?;
        }
        Ok((zt, zs))
    }

    pub fn encode(&mut self, x: Var) -> Result<(Var, Var), ModelError> {
        let (zt, zs) = self.tokenize(x)?;
        self.encode_tokens(zt, zs)
    }

    /// `[B, P, D] × [B, C, D] → [B, 2D]`.
    pub fn fuse(&mut self, zt: Var, zs: Var) -> Result<Var, ModelError> {
        let s = self.tape.shape(zt).to_vec();
        let (b, p, d) = (s[0], s[1], s[2]);
        let (t_pool, s_pool) = match self.cfg.fusion_mode {
            FusionMode::MeanConcat => (self.tape.mean_axis(zt, 1)?, self.tape.mean_axis(zs, 1)?),
            FusionMode::Adaptive => {
                let c = self.cfg.n_channels;
                let w = self.param("fusion.cwlp")?;
                let w = self.tape.reshape(w, &[1, c])?;
                let zs_pool = self.tape.matmul(w, zs)?;
                let zs_pool = self.tape.reshape(zs_pool, &[b, d])?;
                let a = self.linear(zt, "fusion.att.fc1", true)?;
                let a = self.tape.relu(a)?;
                let a = self.linear(a, "fusion.att.fc2", true)?;
                let a = self.tape.reshape(a, &[b, p])?;
                let alpha = self.tape.softmax(a, -1)?;
                if let Some(trace) = self.trace.as_mut() {
                    trace.alpha = Some(self.tape.value(alpha).clone());
                }
                let a = self.tape.reshape(alpha, &[b, 1, p])?;
                let zt_pool = self.tape.matmul(a, zt)?;
                (self.tape.reshape(zt_pool, &[b, d])?, zs_pool)
            }
        };
        Ok(self.tape.concat(&[t_pool, s_pool], 1)?)
    }

    pub fn classify(&mut self, u: Var) -> Result<Var, ModelError> {
        let y = self.linear(u, "head.fc1", true)?;
        let y = self.tape.relu(y)?;
        self.linear(y, "head.fc2", true)
    }

    /// Logits `[B, K]` for inputs `[B, C, T]`.
    pub fn forward(&mut self, x: Var) -> Result<Var, ModelError> {
        let (zt, zs) = self.encode(x)?;
        let u = self.fuse(zt, zs)?;
        self.classify(u)
    }
}

/// A configured network with its tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LiDsn {
    pub cfg: ModelConfig,
    pub params: Params,
}

impl LiDsn {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = Params::init(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: Params) -> Result<Self, ModelError> {
        cfg.validate()?;
        let expected = super::params::param_specs(&cfg);
        if expected.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "configuration expects {} tensors, table has {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, spec) in expected.iter().enumerate() {
            if params.names()[i] != spec.name || params.tensor(i).shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: params.tensor(i).shape().to_vec(),
                });
            }
        }
        Ok(Self { cfg, params })
    }

    /// Eval-mode forward context without gradient tracking.
    pub fn ctx<'a>(&'a self, tape: &'a mut Tape, mode: Mode, rng: RngStream, requires_grad: bool) -> Ctx<'a> {
        Ctx::new(&self.cfg, &self.params, tape, mode, rng, requires_grad)
    }

    /// Eval-mode logits `[B, K]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.logits_traced(x, false)?.0)
    }

    pub fn logits_traced(&self, x: &Tensor, trace: bool) -> Result<(Tensor, Option<ForwardTrace>), ModelError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut ctx = self.ctx(&mut tape, Mode::Eval, RngStream::new(0, 0), false);
        if trace {
            ctx.enable_trace();
        }
        let out = ctx.forward(xv)?;
        let tr = ctx.take_trace();
        Ok((tape.value(out).clone(), tr))
    }

    /// Applies momentum updates from train-mode batch statistics.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)], momentum: f64) {
        for (prefix, st) in stats {
            let unbias = if st.count > 1 { st.count as f64 / (st.count - 1) as f64 } else { 1.0 };
            if let Some(m) = self.params.get_mut(&format!("{prefix}.running_mean")) {
                for (r, &v) in m.data_mut().iter_mut().zip(&st.mean) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
            if let Some(m) = self.params.get_mut(&format!("{prefix}.running_var")) {
                for (r, &v) in m.data_mut().iter_mut().zip(&st.var) {
                    *r = (1.0 - momentum) * *r + momentum * v * unbias;
                }
            }
        }
    }
}
