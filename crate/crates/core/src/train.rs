//! Gradient computation for the noise estimator, shared by pretraining and
//! self-training.

use crate::clip::Clip;
use crate::diffusion::{training_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::net::NoiseNet;
use crate::parallel;
use crate::scalar::Scalar;
use crate::tensor::{kernels, AdamState, Tape, Tensor};

/// One noise-prediction training example.
#[derive(Clone, Debug)]
pub struct TrainSample<S> {
    pub target: Clip<S>,
    pub cond: Clip<S>,
    pub t: usize,
    pub eps: Clip<S>,
    /// `[T, H, W]` region mask; `None` trains on every pixel.
    pub mask: Option<Tensor<S>>,
}

/// Loss value and per-parameter gradients (in `NetParams::tensors` order).
pub fn loss_and_grads<S: Scalar>(
    net: &NoiseNet<S>,
    sample: &TrainSample<S>,
    schedule: &NoiseSchedule,
) -> Result<(S, Vec<Vec<S>>)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let loss = training_loss(
        &bound,
        &mut tape,
        &sample.target,
        &sample.cond,
        sample.t,
        &sample.eps,
        sample.mask.as_ref(),
        schedule,
    )?;
    let value = tape.value(loss)[0];
    let vars = bound.vars().to_vec();
    let sizes: Vec<usize> = net.params.tensors().iter().map(|t| t.numel()).collect();
    let mut grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .zip(sizes)
        .map(|(&v, n)| grads.take(v).unwrap_or_else(|| vec![S::zero(); n]))
        .collect();
    Ok((value, out))
}

/// Mean loss and mean gradients over a batch. Examples run in parallel; the
/// reduction adds them in batch order.
pub fn batch_gradients<S: Scalar>(
    net: &NoiseNet<S>,
    batch: &[TrainSample<S>],
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<Vec<S>>)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    let results = parallel::map(batch, |s| loss_and_grads(net, s, schedule));
    let mut total = 0.0;
    let mut acc: Option<Vec<Vec<S>>> = None;
    for r in results {
        let (loss, grads) = r?;
        total += loss.to_f64_lossy();
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => {
                for (dst, src) in a.iter_mut().zip(&grads) {
                    kernels::axpy(S::one(), src, dst);
                }
            }
        }
    }
    let inv = S::one() / S::of(batch.len() as f64);
    let mut grads = acc.expect("non-empty batch");
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite(format!("training loss {mean}")));
    }
    Ok((mean, grads))
}

/// Installs `grads` into the parameters' gradient buffers and takes one Adam step.
pub fn apply_gradients<S: Scalar>(
    net: &mut NoiseNet<S>,
    grads: Vec<Vec<S>>,
    adam: &mut AdamState<S>,
) -> Result<()> {
    let mut params = net.params.tensors_mut();
    if params.len() != grads.len() {
        return Err(Error::shape("gradient count does not match parameter count"));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p.set_grad(g)?;
    }
    adam.step(&mut params)?;
    for p in params {
        p.clear_grad();
    }
    Ok(())
}

/// Gradient step on a batch; returns the mean loss.
pub fn train_step<S: Scalar>(
    net: &mut NoiseNet<S>,
    batch: &[TrainSample<S>],
    schedule: &NoiseSchedule,
    adam: &mut AdamState<S>,
) -> Result<f64> {
    let (loss, grads) = batch_gradients(net, batch, schedule)?;
    apply_gradients(net, grads, adam)?;
    Ok(loss)
}
