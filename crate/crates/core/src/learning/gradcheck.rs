use rand::Rng;

use crate::error::{Error, Result};
use crate::kinematics::TrajectoryRanges;
use crate::rng::{stream, Purpose};

use super::net::{BnMode, Mode, Model};
use super::train::{batch_loss, loss_and_grad, loss_regime};
use super::{ConvBlock, Example, Head, NetInput, NetworkSpec, Variant};

pub const MAX_CHECK_PARAMS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over the compared entries; entries whose
    /// absolute error is below 1e-7 count as 0.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because a ReLU or smooth-L1 kink lies within ±h.
    pub skipped: usize,
}

fn loss_and_pattern(model: &Model<f64>, batch: &[&Example]) -> (f64, Vec<bool>) {
    let inputs: Vec<_> = batch.iter().map(|e| &e.input).collect();
    let cache = model.forward(&inputs, BnMode::Batch);
    let mut pattern = cache.relu_pattern();
    pattern.extend(loss_regime(model, batch, &cache));
    (batch_loss(model, batch, &cache), pattern)
}

/// Compares `loss_and_grad` against central differences with step `h` on
/// every trainable entry. The model must be in train mode.
pub fn gradient_check_model(model: &Model<f64>, batch: &[Example], h: f64) -> Result<GradCheckReport> {
    if model.mode() != Mode::Train {
        return Err(Error::Mode("eval"));
    }
    let refs: Vec<&Example> = batch.iter().collect();
    let analytic = loss_and_grad(model, &refs)?.grad;
    let (_, base) = loss_and_pattern(model, &refs);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let (lp, pp) = loss_and_pattern(&probe, &refs);
        probe.params_mut()[i] = orig - h;
        let (lm, pm) = loss_and_pattern(&probe, &refs);
        probe.params_mut()[i] = orig;
        if pp != base || pm != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let diff = (a - numeric).abs();
        let rel = if diff < 1e-7 {
            0.0
        } else {
            diff / a.abs().max(numeric.abs())
        };
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// Random batch matching `spec`: sparse occupancy, parameters in [−1, 1],
/// mixed labels and volumes.
pub fn random_batch(spec: &NetworkSpec, n: usize, rng: &mut impl Rng) -> Vec<Example> {
    let cells: usize = spec.input_dims.iter().product();
    let max_count = spec.pool.pow(3) as u16;
    (0..n)
        .map(|k| Example {
            input: NetInput {
                params: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                occ: match spec.variant {
                    Variant::TrajNet => vec![],
                    Variant::VoxelNet => {
                        let mut occ = Vec::new();
                        for i in 0..cells {
                            if rng.random_bool(0.35) {
                                occ.push((i as u32, rng.random_range(1..=max_count)));
                            }
                        }
                        occ
                    }
                },
            },
            label: k % 2 == 0,
            volume: rng.random_range(0.0..900.0),
        })
        .collect()
}

/// Max relative error over `n_trials` randomly initialized models of
/// `spec`, each checked on a fresh batch of four.
pub fn gradient_check(spec: &NetworkSpec, n_trials: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..n_trials {
        let mut model = Model::<f64>::init(spec, seed.wrapping_add(trial as u64))?;
        if model.param_count() > MAX_CHECK_PARAMS {
            return Err(Error::Spec(format!(
                "gradient check needs at most {MAX_CHECK_PARAMS} parameters, spec has {}",
                model.param_count()
            )));
        }
        let mut rng = stream(seed, Purpose::Misc, trial as u64);
        // move batch-norm affine parameters and the bias off their defaults
        for t in model.tensors().to_vec() {
            if t.buffer || !(t.name.contains(".bn.") || t.name == "out.bias") {
                continue;
            }
            let (lo, hi) = if t.name.ends_with(".bn.weight") {
                (0.5, 1.5)
            } else {
                (-0.3, 0.3)
            };
            for v in model.tensor_mut(&t.name).unwrap() {
                *v = rng.random_range(lo..hi);
            }
        }
        let batch = random_batch(spec, 4, &mut rng);
        let r = gradient_check_model(&model, &batch, 1e-4)?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

/// Small random specs alternating between `traj_net` and `voxel_net`, all
/// within the gradient-check parameter budget.
pub fn tiny_specs(seed: u64, n: usize) -> Vec<NetworkSpec> {
    let mut rng = stream(seed, Purpose::Misc, u64::MAX);
    let ranges = TrajectoryRanges {
        lo: [-1.0; 6],
        hi: [1.0; 6],
    };
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let head = if rng.random_bool(0.5) {
            Head::Classifier
        } else {
            Head::Regressor
        };
        let fc: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(3..=12)).collect();
        let spec = if out.len() % 2 == 0 {
            NetworkSpec {
                fc_widths: fc,
                ..NetworkSpec::traj_net(head, ranges)
            }
        } else {
            NetworkSpec {
                input_dims: [
                    rng.random_range(3..=8),
                    rng.random_range(3..=8),
                    rng.random_range(2..=4),
                ],
                pool: rng.random_range(1..=2),
                conv_blocks: (0..rng.random_range(1..=2))
                    .map(|_| ConvBlock {
                        out_channels: rng.random_range(2..=4),
                        stride: rng.random_range(1..=2),
                    })
                    .collect(),
                fc_widths: fc,
                ..NetworkSpec::voxel_net(head, ranges)
            }
        };
        if Model::<f64>::zeros(&spec)
            .map(|m| m.param_count() <= MAX_CHECK_PARAMS)
            .unwrap_or(false)
        {
            out.push(spec);
        }
    }
    out
}
