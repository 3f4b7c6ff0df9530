use super::{Ctx, ModelConfig, ModelError, Mode, Params};
use crate::numeric::{RngStream, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cost {
    /// Trainable scalars (running statistics excluded).
    pub params: usize,
    /// Floating-point operations of one eval-mode forward on one trial.
    pub flops: u64,
}

/// Exact parameter tally and a FLOP count measured by recording one
/// forward pass.
///
/// A multiply-add counts as two operations. Element-wise ops count one per
/// output, softmax four (shift, exp, sum, divide), layer norm seven, eval
/// batch norm two; reshapes, permutes, slices and concatenations are free.
pub fn count_params_flops(cfg: &ModelConfig) -> Result<Cost, ModelError> {
    let params = Params::init(cfg, 0)?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, cfg.n_channels, cfg.n_samples]));
    let mut ctx = Ctx::new(cfg, &params, &mut tape, Mode::Eval, RngStream::new(0, 0), false);
    ctx.forward(x)?;
    Ok(Cost { params: params.trainable_count(), flops: tape.flops() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionMode;

    #[test]
    fn mean_concat_removes_fusion_parameters() {
        let cfg = ModelConfig::default();
        let full = count_params_flops(&cfg).unwrap();
        let mean = count_params_flops(&ModelConfig { fusion_mode: FusionMode::MeanConcat, ..cfg.clone() }).unwrap();
        let (c, d) = (cfg.n_channels, cfg.embed_dim);
        assert_eq!(full.params - mean.params, c + (d * d / 2 + d / 2 + d / 2 + 1));
    }
}
