//! Finite-difference verification of the TPC layer backward pass across
//! aggregation modes, masking, missing data and padding.

use tpconv_core::gradcheck::{finite_diff_grad, rel_err};
use tpconv_core::rng::{rng_normal, rng_uniform, Rng};
use tpconv_core::tensor::Tensor;
use tpconv_core::timefuncs::{ActivationId, TimeFunctionId, ALL_TIME_FUNCTIONS};
use tpconv_core::tpc::{tpc_backward, tpc_forward, Aggregation, IrregularBatch, TpcConfig};

/// Random batch with missing entries and one padded sample. Times live in
/// [0, 0.5] so every h function stays clear of its non-smooth loci.
fn random_batch(rng: &mut Rng, bsz: usize, m: usize, l: usize, missing: f64) -> IrregularBatch {
    let mut values = rng_normal(rng, 0.0, 1.0, &[bsz, m, l]).unwrap();
    let mut observed = Tensor::zeros(&[bsz, m, l]);
    let mut valid_len = vec![l; bsz];
    if bsz > 1 {
        valid_len[bsz - 1] = l - 2; // exercise padding
    }
    for b in 0..bsz {
        for li in 0..m {
            for j in 0..l {
                let k = (b * m + li) * l + j;
                if j < valid_len[b] && rng.next_f64() >= missing {
                    observed.data_mut()[k] = 1.0;
                } else {
                    values.data_mut()[k] = 0.0;
                }
            }
        }
    }
    let mut times = Tensor::zeros(&[bsz, l]);
    for b in 0..bsz {
        let mut t = 0.0;
        for j in 0..l {
            t += rng.uniform(0.01, 0.5 / l as f64);
            times.data_mut()[b * l + j] = t;
        }
    }
    IrregularBatch::new(values, observed, times, valid_len).unwrap()
}

fn check_config(cfg: &TpcConfig, batch: &IrregularBatch, probe_seed: u64) {
    let mut rng = Rng::from_seed(probe_seed);
    let (out, cache) = tpc_forward(batch, cfg).unwrap();
    let probe = rng_uniform(&mut rng, 0.5, 1.5, out.shape()).unwrap();
    let loss = |c: &TpcConfig| -> f64 {
        let (o, _) = tpc_forward(batch, c).unwrap();
        o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let grads = tpc_backward(&cache, &probe).unwrap();
    for (q, g) in grads.iter().enumerate() {
        let analytic = [&g.theta1, &g.theta2, &g.theta3, &g.theta4];
        for which in 0..4 {
            let current = match which {
                0 => cfg.kernels[q].theta1.clone(),
                1 => cfg.kernels[q].theta2.clone(),
                2 => cfg.kernels[q].theta3.clone(),
                3 => cfg.kernels[q].theta4.clone(),
                _ => unreachable!(),
            };
            let fd = finite_diff_grad(
                |t: &Tensor| {
                    let mut c = cfg.clone();
                    match which {
                        0 => c.kernels[q].theta1 = t.clone(),
                        1 => c.kernels[q].theta2 = t.clone(),
                        2 => c.kernels[q].theta3 = t.clone(),
                        3 => c.kernels[q].theta4 = t.clone(),
                        _ => unreachable!(),
                    }
                    Ok(loss(&c))
                },
                &current,
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic[which].data().iter().zip(fd.data()) {
                assert!(
                    rel_err(*a, *n) < 1e-4,
                    "kernel {q} ({}) theta{}: analytic {a} vs fd {n}",
                    cfg.kernels[q].h,
                    which + 1
                );
            }
        }
    }
}

#[test]
fn tpc_backward_matches_finite_differences_sum_mode() {
    let mut rng = Rng::from_seed(3001);
    let (m, z, p) = (2, 2, 5);
    let cfg = TpcConfig::new(
        m,
        z,
        p,
        &ALL_TIME_FUNCTIONS,
        ActivationId::Sigmoid,
        Aggregation::Sum,
        false,
        &mut rng,
    )
    .unwrap();
    let batch = random_batch(&mut rng, 3, m, 9, 0.3);
    check_config(&cfg, &batch, 91);
}

#[test]
fn tpc_backward_matches_finite_differences_mean_mode_with_all_h() {
    // two passes cover all ten h functions across five-kernel layers
    let mut rng = Rng::from_seed(3002);
    let (m, z, p) = (2, 1, 5);
    for half in 0..2 {
        let funcs = &ALL_TIME_FUNCTIONS[half * 5..(half + 1) * 5];
        let cfg = TpcConfig::new(
            m,
            z,
            p,
            funcs,
            ActivationId::Sigmoid,
            Aggregation::Mean,
            false,
            &mut rng,
        )
        .unwrap();
        let batch = random_batch(&mut rng, 2, m, 8, 0.4);
        check_config(&cfg, &batch, 92 + half as u64);
    }
}

#[test]
fn tpc_backward_matches_finite_differences_masked_center() {
    let mut rng = Rng::from_seed(3003);
    let (m, z, p) = (1, 2, 4);
    let cfg = TpcConfig::new(
        m,
        z,
        p,
        &[
            TimeFunctionId::Sin,
            TimeFunctionId::Exp,
            TimeFunctionId::Tanh,
            TimeFunctionId::Sq,
        ],
        ActivationId::Sigmoid,
        Aggregation::Mean,
        true,
        &mut rng,
    )
    .unwrap();
    let batch = random_batch(&mut rng, 2, m, 10, 0.2);
    check_config(&cfg, &batch, 93);
}

#[test]
fn per_step_classifier_gradients_match_finite_differences() {
    use tpconv_core::data::SeriesRecord;
    use tpconv_core::models::{classify_per_step, ModelConfig, Task, TpcnnModel};
    use tpconv_core::train::{batch_loss_and_grads, nll_per_step_loss_and_grad, step_valid_mask};

    let mut rng = Rng::from_seed(3005);
    let l = 8;
    // two records with a missing tail step and per-step labels
    let records: Vec<SeriesRecord> = (0..2)
        .map(|i| {
            let mut t = 0.0;
            let times: Vec<f64> = (0..l)
                .map(|_| {
                    t += rng.uniform(0.01, 0.06);
                    t
                })
                .collect();
            let mut values: Vec<f64> = (0..l).map(|_| rng.normal(0.0, 1.0)).collect();
            let mut observed = vec![1u8; l];
            observed[l - 1] = 0;
            values[l - 1] = 0.0;
            let step_labels: Vec<usize> = values.iter().map(|&v| usize::from(v > 0.0)).collect();
            SeriesRecord {
                id: format!("ps-{i}"),
                times,
                values: vec![values],
                observed: vec![observed],
                label: None,
                step_labels: Some(step_labels),
            }
        })
        .collect();
    let batch = &tpconv_core::data::batchify(&records, 2, Some(l)).unwrap()[0];
    let model = TpcnnModel::init(
        ModelConfig {
            task: Task::PerStepClassification,
            m: 1,
            seq_len: l,
            tpc_p: 3,
            tpc_z: 1,
            functions: vec![TimeFunctionId::Sin, TimeFunctionId::Tanh],
            conv_channels: vec![4],
            conv_ksize: 3,
            head_hidden: 5,
            num_classes: 2,
            ..ModelConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    let (loss, analytic) = batch_loss_and_grads(&model, batch, &records).unwrap();
    assert!(loss.is_finite());
    let valid = step_valid_mask(batch);
    let labels: Vec<Vec<usize>> = records
        .iter()
        .map(|r| {
            let mut row = vec![usize::MAX; l];
            row[..l].copy_from_slice(r.step_labels.as_ref().unwrap());
            row
        })
        .collect();
    let names = model.param_names();
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let mut plus = model.clone();
            plus.params_mut()[pi].data_mut()[k] += 1e-5;
            let mut minus = model.clone();
            minus.params_mut()[pi].data_mut()[k] -= 1e-5;
            let eval = |m: &tpconv_core::models::TpcnnModel| {
                let (probs, _) = classify_per_step(batch, m).unwrap();
                nll_per_step_loss_and_grad(&probs, &labels, &valid)
                    .unwrap()
                    .0
            };
            let fd = (eval(&plus) - eval(&minus)) / 2e-5;
            let a = grad.data()[k];
            if a.abs() < 1e-7 && fd.abs() < 1e-7 {
                continue; // below the fd noise floor
            }
            assert!(
                rel_err(a, fd) < 1e-4,
                "{}[{k}]: analytic {a} vs fd {fd}",
                names[pi]
            );
        }
    }
}

#[test]
fn tpc_backward_with_identity_and_tanh_activations() {
    let mut rng = Rng::from_seed(3004);
    for sigma in [ActivationId::Identity, ActivationId::Tanh] {
        let cfg = TpcConfig::new(
            2,
            1,
            3,
            &[
                TimeFunctionId::Lin,
                TimeFunctionId::Cos,
                TimeFunctionId::Cube,
            ],
            sigma,
            Aggregation::Sum,
            false,
            &mut rng,
        )
        .unwrap();
        let batch = random_batch(&mut rng, 2, 2, 7, 0.25);
        check_config(&cfg, &batch, 94);
    }
}
