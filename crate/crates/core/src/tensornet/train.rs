use super::model::{loss_and_grad, ModelSpec};
use super::params::ModelParams;
use crate::datahub::{augment, Dataset};
use crate::rngkit::RngStreamSuite;
use crate::{Error, Result};

/// `params - lr * grad`, element by element.
pub fn sgd_step(params: &ModelParams, grad: &ModelParams, lr: f32) -> Result<ModelParams> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grad, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(params: &mut ModelParams, grad: &ModelParams, lr: f32) -> Result<()> {
    if !params.same_layout(grad) {
        return Err(Error::invalid("gradient layout does not match parameters"));
    }
    for (v, g) in params.values_mut().iter_mut().zip(grad.values()) {
        *v -= lr * g;
    }
    Ok(())
}

/// Local optimisation settings shared by every client in an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub augment: bool,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ModelParams,
    pub sample_count: usize,
    /// Sample-weighted mean batch loss over the final epoch; `0.0` when no
    /// epoch ran.
    pub mean_loss: f64,
    pub steps: usize,
}

/// Plain minibatch SGD over one client's samples.
///
/// Each epoch reshuffles the client's indices with `suite.shuffle`, walks
/// them in `batch_size` chunks (keeping the short tail batch), optionally
/// augments each batch from `suite.augment`, and samples dropout masks from
/// `suite.dropout`. The result is a pure function of the arguments.
pub fn train_local(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    settings: &LocalTraining,
    suite: &mut RngStreamSuite,
) -> Result<LocalOutcome> {
    if indices.is_empty() {
        return Err(Error::invalid("client has no samples"));
    }
    if settings.batch_size < 1 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut local = params.clone();
    let mut order = indices.to_vec();
    let mut steps = 0;
    let mut mean_loss = 0.0;
    for _ in 0..settings.epochs {
        suite.shuffle.shuffle(&mut order);
        let mut weighted = 0.0f64;
        for chunk in order.chunks(settings.batch_size) {
            let (mut batch, labels) = data.gather(chunk)?;
            if settings.augment {
                batch = augment(&batch, &mut suite.augment)?;
            }
            let (loss, grad) = loss_and_grad(spec, &local, &batch, &labels, Some(&mut suite.dropout))?;
            sgd_step_in_place(&mut local, &grad, settings.lr)?;
            weighted += loss * chunk.len() as f64;
            steps += 1;
        }
        mean_loss = weighted / order.len() as f64;
    }
    Ok(LocalOutcome {
        params: local,
        sample_count: indices.len(),
        mean_loss,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::generate_synthetic;
    use crate::rngkit::make_stream;
    use crate::tensornet::init_params;
    use std::sync::Arc;

    fn bits(p: &ModelParams) -> Vec<u32> {
        p.values().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn sgd_arithmetic_and_zero_lr() {
        let layout = Arc::new(crate::tensornet::Layout::new(vec![crate::tensornet::LayoutEntry::new(
            "w",
            vec![2],
        )]));
        let p = ModelParams::new(layout.clone(), vec![1.0, 2.0]).unwrap();
        let g = ModelParams::new(layout, vec![1.0, 1.0]).unwrap();
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap().values(), &[0.5, 1.5]);
        assert_eq!(bits(&sgd_step(&p, &g, 0.0).unwrap()), bits(&p));

        let other = ModelParams::zeros(Arc::new(crate::tensornet::Layout::new(vec![])));
        assert!(sgd_step(&p, &other, 0.1).is_err());
    }

    fn setup() -> (ModelSpec, ModelParams, Dataset) {
        let spec = ModelSpec::mlp([1, 6, 6], 8, 4, 0.25);
        let data = generate_synthetic(4, 125, [1, 6, 6], 3).unwrap();
        let params = init_params(&spec, &mut make_stream(1)).unwrap();
        (spec, params, data)
    }

    #[test]
    fn zero_epochs_leave_params_untouched() {
        let (spec, params, data) = setup();
        let settings = LocalTraining {
            epochs: 0,
            batch_size: 10,
            lr: 0.1,
            augment: false,
        };
        let idx: Vec<usize> = (0..50).collect();
        let out = train_local(&spec, &params, &data, &idx, &settings, &mut RngStreamSuite::new(1, 0, 0)).unwrap();
        assert_eq!(bits(&out.params), bits(&params));
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn step_count_and_determinism() {
        let (spec, params, data) = setup();
        let settings = LocalTraining {
            epochs: 5,
            batch_size: 50,
            lr: 0.05,
            augment: true,
        };
        let idx: Vec<usize> = (0..500).collect();
        let run = || train_local(&spec, &params, &data, &idx, &settings, &mut RngStreamSuite::new(7, 3, 2)).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.steps, 50);
        assert_eq!(a.sample_count, 500);
        assert_eq!(bits(&a.params), bits(&b.params));
        assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());

        let from_thread = std::thread::scope(|s| s.spawn(run).join().unwrap());
        assert_eq!(bits(&a.params), bits(&from_thread.params));
    }

    #[test]
    fn partial_batches_are_kept() {
        let (spec, params, data) = setup();
        let settings = LocalTraining {
            epochs: 2,
            batch_size: 32,
            lr: 0.05,
            augment: false,
        };
        let idx: Vec<usize> = (0..70).collect();
        let out = train_local(&spec, &params, &data, &idx, &settings, &mut RngStreamSuite::new(7, 3, 2)).unwrap();
        assert_eq!(out.steps, 6);
        let bad = LocalTraining { batch_size: 0, ..settings };
        assert!(train_local(&spec, &params, &data, &idx, &bad, &mut RngStreamSuite::new(7, 3, 2)).is_err());
    }
}
