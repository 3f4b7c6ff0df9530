//! Finite-difference checks of the network and each of its blocks.

use super::{Ctx, FusionMode, IntegrationMode, LiDsn, ModelConfig, ModelError, Mode, Params};
use crate::numeric::{grad_check, GradCheck, RngStream, Tape, Tensor, TensorError, Var};
use crate::model::params::Kind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    TemporalTokenizer,
    SpatialTokenizer,
    Ffn,
    Sacm,
    Tcam,
    Tsia,
    Fuse,
    /// Full forward pass and weighted cross-entropy in train mode.
    Network,
}

impl Block {
    pub const ALL: [Block; 8] = [
        Block::TemporalTokenizer,
        Block::SpatialTokenizer,
        Block::Ffn,
        Block::Sacm,
        Block::Tcam,
        Block::Tsia,
        Block::Fuse,
        Block::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::TemporalTokenizer => "temporal_tokenize",
            Block::SpatialTokenizer => "spatial_tokenize",
            Block::Ffn => "ffn_block",
            Block::Sacm => "sacm_context",
            Block::Tcam => "tcam_refine",
            Block::Tsia => "tsia",
            Block::Fuse => "adaptive_fuse",
            Block::Network => "forward+loss",
        }
    }

    fn owns(self, name: &str) -> bool {
        match self {
            Block::TemporalTokenizer => name.starts_with("temporal_tok."),
            Block::SpatialTokenizer => name.starts_with("spatial_tok."),
            Block::Ffn => name.starts_with("layers.0.temporal_ffn."),
            Block::Sacm => ["w1", "w2", "e_pos"].iter().any(|w| name == format!("layers.0.tsia.{w}")),
            Block::Tcam => ["wt1", "wphi", "wk"].iter().any(|w| name == format!("layers.0.tsia.{w}")),
            Block::Tsia => name.starts_with("layers.0.tsia."),
            Block::Fuse => name.starts_with("fusion."),
            Block::Network => true,
        }
    }
}

const RELU_MARGIN: f64 = 5e-5;

fn to_tensor_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::InvalidArgument { op: "model", detail: other.to_string() },
    }
}

/// Checks gradients of `block` with respect to its inputs and its own
/// parameters. The block output is contracted against fixed random weights
/// so every output coordinate matters. Attention blocks force a
/// configuration that contains them; dropout is disabled.
pub fn block_grad_check(block: Block, cfg: &ModelConfig, seed: u64) -> Result<GradCheck, ModelError> {
    let cfg = match block {
        Block::Sacm | Block::Tcam | Block::Tsia => {
            ModelConfig { integration_mode: IntegrationMode::St2t, use_tsia: true, ..cfg.clone() }
        }
        Block::Fuse => ModelConfig { fusion_mode: FusionMode::Adaptive, ..cfg.clone() },
        _ => cfg.clone(),
    };
    let cfg = ModelConfig { dropout: 0.0, ..cfg };
    let mut model = LiDsn::new(cfg.clone(), seed)?;
    // A generic point: initial values are special (zero biases, unit gains).
    let mut jitter = RngStream::named(seed, "grad-check-jitter");
    for i in 0..model.params.len() {
        if model.params.kind(i) == Kind::Trainable {
            model.params.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v += jitter.normal(0.0, 0.1));
        }
    }
    let model = model;
    let mut rng = RngStream::named(seed, "grad-check");
    let b = 2;
    let (c, t, d, p) = (cfg.n_channels, cfg.n_samples, cfg.embed_dim, cfg.n_patches());
    let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.normal(0.0, 1.0));
    let mut draw_inputs = || -> Vec<Tensor> {
        match block {
            Block::TemporalTokenizer | Block::SpatialTokenizer | Block::Network => vec![draw(&[b, c, t])],
            Block::Ffn | Block::Tcam => vec![draw(&[b, p, d])],
            Block::Sacm => vec![draw(&[b, c, d])],
            Block::Tsia | Block::Fuse => vec![draw(&[b, p, d]), draw(&[b, c, d])],
        }
    };
    let mut inputs = draw_inputs();
    if matches!(block, Block::Fuse | Block::Network) {
        // Redraw until every ReLU input sits well outside the step size.
        for _ in 0..100 {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&cfg, &model.params, &mut tape, Mode::Train, RngStream::new(seed, 0), false);
            let vs: Vec<Var> = inputs.iter().map(|x| ctx.tape.constant(x.clone())).collect();
            if block == Block::Network {
                ctx.forward(vs[0])?;
            } else {
                let u = ctx.fuse(vs[0], vs[1])?;
                ctx.classify(u)?;
            }
            if tape.relu_margin() > RELU_MARGIN {
                break;
            }
            inputs = draw_inputs();
        }
    }
    let labels: Vec<usize> = (0..b).map(|i| i % cfg.n_classes).collect();
    let weights: Vec<f64> = (0..cfg.n_classes).map(|k| 0.5 + k as f64 * 0.75).collect();
    let n_in = inputs.len();

    let owned: Vec<usize> = (0..model.params.len())
        .filter(|&i| model.params.kind(i) == Kind::Trainable && block.owns(&model.params.names()[i]))
        .collect();
    let mut all = inputs;
    all.extend(owned.iter().map(|&i| model.params.tensor(i).clone()));

    let mode = if matches!(block, Block::TemporalTokenizer | Block::SpatialTokenizer | Block::Network) {
        Mode::Train
    } else {
        Mode::Eval
    };
    let params: &Params = &model.params;
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var, TensorError> {
        let (ins, mine) = vars.split_at(n_in);
        let mut bound = Vec::new();
        let mut k = 0;
        for i in 0..params.len() {
            if params.kind(i) != Kind::Trainable {
                continue;
            }
            if owned.get(k) == Some(&i) {
                bound.push(mine[k]);
                k += 1;
            } else {
                bound.push(tape.constant(params.tensor(i).clone()));
            }
        }
        let mut ctx = Ctx::with_vars(&cfg, params, tape, &bound, mode, RngStream::new(seed, 0)).map_err(to_tensor_err)?;
        let out = match block {
            Block::TemporalTokenizer => ctx.temporal_tokenize(ins[0]),
            Block::SpatialTokenizer => ctx.spatial_tokenize(ins[0]),
            Block::Ffn => ctx.ffn("layers.0.temporal_ffn", ins[0]),
            Block::Sacm => ctx.sacm("layers.0.tsia", ins[0], true).map(|s| s.s_pool),
            Block::Tcam => ctx.tcam("layers.0.tsia", ins[0]).map(|t| t.refined),
            Block::Tsia => ctx.tsia("layers.0.tsia", ins[0], ins[1], true).map(|o| o.0),
            Block::Fuse => ctx.fuse(ins[0], ins[1]),
            Block::Network => ctx
                .forward(ins[0])
                .and_then(|l| Ok(ctx.tape.weighted_cross_entropy(l, &labels, &weights)?)),
        }
        .map_err(to_tensor_err)?;
        if block == Block::Network {
            return Ok(out);
        }
        let shape = tape.shape(out).to_vec();
        let mut prng = RngStream::named(seed, "grad-check-probe");
        let w = tape.constant(Tensor::from_fn(&shape, |_| prng.uniform(-1.0, 1.0)));
        let y = tape.mul(out, w)?;
        tape.sum(y)
    };
    Ok(grad_check(f, &all)?)
}

/// A randomly varied tiny configuration for gradient checks.
pub fn random_tiny_config(seed: u64) -> ModelConfig {
    use super::{FusionMode, IntegrationMode};
    let mut r = RngStream::named(seed, "tiny-config");
    let modes = [IntegrationMode::St2t, IntegrationMode::St2s, IntegrationMode::Bidir, IntegrationMode::None];
    let mut cfg = ModelConfig::tiny();
    cfg.n_channels = 2 + r.below(3);
    cfg.n_classes = 2 + r.below(2);
    cfg.n_heads = [1, 2, 4][r.below(3)];
    cfg.embed_dim = 8;
    cfg.spatial_maps = 1 + r.below(3);
    cfg.temporal_kernel = [3, 5, 7][r.below(3)];
    cfg.spatial_kernel = [1, 3][r.below(2)];
    cfg.temporal_depth = 1 + r.below(2);
    cfg.spatial_depth = 1 + r.below(cfg.temporal_depth);
    cfg.integration_mode = if seed == 0 { IntegrationMode::St2t } else { modes[r.below(4)] };
    cfg.use_cosine_gate = r.below(4) != 0;
    cfg.use_electrode_pos_embedding = r.below(4) != 0;
    cfg.shared_electrode_pos = r.below(3) == 0;
    cfg.use_positional_embedding = r.below(4) != 0;
    cfg.fusion_mode = if r.below(4) == 0 { FusionMode::MeanConcat } else { FusionMode::Adaptive };
    cfg
}
