use super::{LiDsn, ModelError, Mode};
use crate::numeric::{RngStream, Tape, Tensor};

/// `|∂ logit_k / ∂ X|` for one trial `[C, T]`, scaled so the largest entry
/// is 1 (left at zero when the gradient vanishes).
pub fn saliency(model: &LiDsn, x: &Tensor, class: usize) -> Result<Tensor, ModelError> {
    let cfg = &model.cfg;
    if class >= cfg.n_classes {
        return Err(ModelError::InvalidClass { index: class, n_classes: cfg.n_classes });
    }
    let (c, t) = (cfg.n_channels, cfg.n_samples);
    if x.shape() != [c, t] {
        return Err(ModelError::InputShape { expected: vec![1, c, t], found: x.shape().to_vec() });
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().reshaped(&[1, c, t])?, true);
    let mut ctx = model.ctx(&mut tape, Mode::Eval, RngStream::new(0, 0), false);
    let logits = ctx.forward(xv)?;
    let picked = tape.slice(logits, 1, class, 1)?;
    let loss = tape.sum(picked)?;
    let grads = tape.backward(loss)?;
    let g = grads.get(xv).expect("input is a gradient leaf");
    let mut map = Tensor::from_fn(&[c, t], |i| g.data()[i].abs());
    let max = map.max_abs();
    if max > 0.0 {
        map.data_mut().iter_mut().for_each(|v| *v /= max);
    }
    Ok(map)
}
