use super::*;

use crate::numerics::gaussian;

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "entry {i}: {x} vs {y} (diff {})",
            (x - y).abs()
        );
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn small_model(seed: u64, input: usize, hidden: &[usize], classes: usize) -> MlpModel {
    let mut rng = Rng::from_seed(seed);
    MlpModel::new(input, hidden, classes, &mut rng).unwrap()
}

fn written_memory(model: &MlpModel, beta: f64, tau: f64, seed: u64, classes: usize) -> CategoricalMemory {
    let mut mem = CategoricalMemory::new(model.num_classes(), model.feature_dim(), beta, tau).unwrap();
    let mut rng = Rng::from_seed(seed);
    for i in 0..classes {
        let f = gaussian(&mut rng, model.feature_dim(), 0.0, 1.0).unwrap();
        mem.write_update(i, &f).unwrap();
    }
    mem
}

#[test]
fn forward_matches_layer_by_layer_oracle() {
    let model = small_model(2, 5, &[7, 4], 3);
    let mem = written_memory(&model, 0.9, 0.1, 3, 3);
    let mut rng = Rng::from_seed(4);
    let x = gaussian(&mut rng, 5, 0.0, 1.0).unwrap();

    let got = forward(&model, &mem, &x, ReadModeSpec::Attention, Similarity::Cosine).unwrap();

    // Hand-rolled oracle: plain nested loops, no shared helpers.
    let mut h = x.clone();
    for (l, layer) in model.layers().iter().enumerate() {
        let mut next = vec![0.0; layer.weight.rows()];
        for (i, n) in next.iter_mut().enumerate() {
            let mut acc = layer.bias[i];
            for (j, hj) in h.iter().enumerate() {
                acc += layer.weight.get(i, j) * hj;
            }
            *n = acc;
        }
        if l + 1 < model.layers().len() {
            for v in next.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        h = next;
    }
    assert_close(&got.feature, &h, 1e-12);

    let read = mem.read(&h, crate::memory::ReadMode::Attention, Similarity::Cosine).unwrap();
    let aug: Vec<f64> = h.iter().zip(&read.response).map(|(a, b)| a + b).collect();
    let mut logits = vec![0.0; 3];
    for (i, l) in logits.iter_mut().enumerate() {
        let mut acc = model.classifier().bias[i];
        for (j, a) in aug.iter().enumerate() {
            acc += model.classifier().weight.get(i, j) * a;
        }
        *l = acc;
    }
    assert_close(&got.logits, &logits, 1e-12);
}

#[test]
fn forward_with_empty_memory_equals_module_free_baseline() {
    let model = small_model(11, 6, &[8, 5], 4);
    let mem = CategoricalMemory::new(4, 5, 0.9, 0.1).unwrap();
    let mut rng = Rng::from_seed(12);
    let x = gaussian(&mut rng, 6, 0.0, 1.0).unwrap();

    let got = forward(&model, &mem, &x, ReadModeSpec::Attention, Similarity::Cosine).unwrap();

    // Oracle that skips the memory module entirely.
    let mut h = x.clone();
    for (l, layer) in model.layers().iter().enumerate() {
        let mut next = matvec(&layer.weight, &h).unwrap();
        for (n, b) in next.iter_mut().zip(&layer.bias) {
            *n += b;
        }
        if l + 1 < model.layers().len() {
            for v in next.iter_mut() {
                *v = v.max(0.0);
            }
        }
        h = next;
    }
    let mut logits = matvec(&model.classifier().weight, &h).unwrap();
    for (l, b) in logits.iter_mut().zip(&model.classifier().bias) {
        *l += b;
    }
    assert_eq!(got.logits, logits, "augmentation with zero response must be exact");
    assert_eq!(got.feature, got.augmented);
}

#[test]
fn forward_single_class_memory_adds_the_prototype() {
    let model = small_model(21, 4, &[6, 3], 1);
    let mut mem = CategoricalMemory::new(1, 3, 0.9, 0.1).unwrap();
    mem.write_update(0, &[0.5, -1.0, 2.0]).unwrap();
    let x = [0.4, 0.2, -0.7, 1.1];
    let got = forward(&model, &mem, &x, ReadModeSpec::Attention, Similarity::Cosine).unwrap();
    let expected: Vec<f64> = got
        .feature
        .iter()
        .zip(mem.prototype(0))
        .map(|(f, m)| f + m)
        .collect();
    assert_eq!(got.augmented, expected);
}

#[test]
fn cross_entropy_uniform_logits() {
    for c in [2, 5, 17] {
        let (loss, _) = cross_entropy(&vec![0.3; c], 0).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_saturated_correct_label() {
    let mut logits = vec![-30.0; 6];
    logits[2] = 30.0;
    let (loss, _) = cross_entropy(&logits, 2).unwrap();
    assert!(loss <= 1e-9, "{loss}");
}

#[test]
fn cross_entropy_rejects_bad_label() {
    assert!(matches!(
        cross_entropy(&[0.0, 1.0], 2),
        Err(Error::IndexOutOfRange { .. })
    ));
}

#[test]
fn cross_entropy_grad_matches_finite_differences() {
    let mut rng = Rng::from_seed(31);
    let logits = gaussian(&mut rng, 7, 0.0, 2.0).unwrap();
    let label = 3;
    let (_, grad) = cross_entropy(&logits, label).unwrap();
    let h = 1e-6;
    for i in 0..logits.len() {
        let mut plus = logits.clone();
        plus[i] += h;
        let mut minus = logits.clone();
        minus[i] -= h;
        let fd = (cross_entropy(&plus, label).unwrap().0 - cross_entropy(&minus, label).unwrap().0)
            / (2.0 * h);
        assert!(rel_err(grad[i], fd) <= 1e-6, "logit {i}: {} vs {fd}", grad[i]);
    }
}

// ---------------------------------------------------------------------------
// Full backward vs. finite differences
// ---------------------------------------------------------------------------

/// Loss via an independent forward + cross-entropy composition.
fn loss_of(
    model: &MlpModel,
    mem: &CategoricalMemory,
    x: &[f64],
    label: usize,
    config: &TrainConfig,
) -> f64 {
    let out = forward(model, mem, x, config.read_mode, config.similarity).unwrap();
    cross_entropy(&out.logits, label).unwrap().0
}

/// Central finite differences over every trainable tensor and the input.
fn check_all_grads(
    model: &MlpModel,
    mem: &CategoricalMemory,
    x: &[f64],
    label: usize,
    config: &TrainConfig,
) {
    let out = backward(model, mem, x, label, config).unwrap();
    let h = 1e-6;

    let fd_of = |m: &MlpModel, xs: &[f64]| loss_of(m, mem, xs, label, config);

    for (l, (dw, db)) in out.grads.layers.iter().enumerate() {
        for r in 0..dw.rows() {
            for c in 0..dw.cols() {
                let mut plus = model.clone();
                let cur = plus.layers[l].weight.get(r, c);
                plus.layers[l].weight.set(r, c, cur + h);
                let mut minus = model.clone();
                let cur = minus.layers[l].weight.get(r, c);
                minus.layers[l].weight.set(r, c, cur - h);
                let fd = (fd_of(&plus, x) - fd_of(&minus, x)) / (2.0 * h);
                assert!(
                    rel_err(dw.get(r, c), fd) <= 1e-5,
                    "layer {l} weight ({r},{c}): analytic {} vs fd {fd}",
                    dw.get(r, c)
                );
            }
            let mut plus = model.clone();
            plus.layers[l].bias[r] += h;
            let mut minus = model.clone();
            minus.layers[l].bias[r] -= h;
            let fd = (fd_of(&plus, x) - fd_of(&minus, x)) / (2.0 * h);
            assert!(rel_err(db[r], fd) <= 1e-5, "layer {l} bias {r}");
        }
    }

    let (dw, db) = &out.grads.classifier;
    for r in 0..dw.rows() {
        for c in 0..dw.cols() {
            let mut plus = model.clone();
            let cur = plus.classifier.weight.get(r, c);
            plus.classifier.weight.set(r, c, cur + h);
            let mut minus = model.clone();
            let cur = minus.classifier.weight.get(r, c);
            minus.classifier.weight.set(r, c, cur - h);
            let fd = (fd_of(&plus, x) - fd_of(&minus, x)) / (2.0 * h);
            assert!(
                rel_err(dw.get(r, c), fd) <= 1e-5,
                "classifier weight ({r},{c}): analytic {} vs fd {fd}",
                dw.get(r, c)
            );
        }
        let mut plus = model.clone();
        plus.classifier.bias[r] += h;
        let mut minus = model.clone();
        minus.classifier.bias[r] -= h;
        let fd = (fd_of(&plus, x) - fd_of(&minus, x)) / (2.0 * h);
        assert!(rel_err(db[r], fd) <= 1e-5, "classifier bias {r}");
    }

    if let Some((dw, db)) = &out.grads.predictor {
        for r in 0..dw.rows() {
            for c in 0..dw.cols() {
                let mut plus = model.clone();
                let p = plus.predictor.as_mut().unwrap();
                p.weight.set(r, c, p.weight.get(r, c) + h);
                let mut minus = model.clone();
                let p = minus.predictor.as_mut().unwrap();
                p.weight.set(r, c, p.weight.get(r, c) - h);
                let fd = (fd_of(&plus, x) - fd_of(&minus, x)) / (2.0 * h);
                assert!(
                    rel_err(dw.get(r, c), fd) <= 1e-5,
                    "predictor weight ({r},{c})"
                );
            }
            let mut plus = model.clone();
            plus.predictor.as_mut().unwrap().bias[r] += h;
            let mut minus = model.clone();
            minus.predictor.as_mut().unwrap().bias[r] -= h;
            let fd = (fd_of(&plus, x) - fd_of(&minus, x)) / (2.0 * h);
            assert!(rel_err(db[r], fd) <= 1e-5, "predictor bias {r}");
        }
    }

    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let fd = (fd_of(model, &plus) - fd_of(model, &minus)) / (2.0 * h);
        assert!(
            rel_err(out.grads.input[i], fd) <= 1e-5,
            "input {i}: analytic {} vs fd {fd}",
            out.grads.input[i]
        );
    }
}

#[test]
fn backward_matches_finite_differences_across_modes() {
    for (seed, spec) in [
        (100u64, ReadModeSpec::Attention),
        (101, ReadModeSpec::Equal),
        (102, ReadModeSpec::TopK { k: 2 }),
        (103, ReadModeSpec::Predicted),
    ] {
        let mut model = small_model(seed, 4, &[6, 5], 4);
        if spec == ReadModeSpec::Predicted {
            model.enable_predictor(&mut Rng::substream(seed, 1));
        }
        let mem = written_memory(&model, 0.9, 0.1, seed ^ 0xbeef, 4);
        let mut rng = Rng::substream(seed, 2);
        let x = gaussian(&mut rng, 4, 0.0, 1.0).unwrap();
        let config = TrainConfig {
            read_mode: spec,
            ..TrainConfig::default()
        };
        check_all_grads(&model, &mem, &x, 1, &config);
    }
}

#[test]
fn backward_without_attention_gradient_matches_frozen_weight_oracle() {
    let model = small_model(200, 4, &[6, 5], 3);
    let mem = written_memory(&model, 0.9, 0.1, 201, 3);
    let mut rng = Rng::from_seed(202);
    let x = gaussian(&mut rng, 4, 0.0, 1.0).unwrap();
    let label = 2;
    let config = TrainConfig {
        backprop_through_attention: false,
        ..TrainConfig::default()
    };

    let out = backward(&model, &mem, &x, label, &config).unwrap();

    // With the stop-gradient, the analytic gradient corresponds to a forward
    // pass whose attention weights are pinned at their base-point values.
    let base = forward(&model, &mem, &x, config.read_mode, config.similarity).unwrap();
    let fixed_weights = base.read.weights.clone();
    let frozen_loss = |m: &MlpModel, xs: &[f64]| -> f64 {
        let mut h = xs.to_vec();
        for (l, layer) in m.layers().iter().enumerate() {
            let mut next = matvec(&layer.weight, &h).unwrap();
            for (n, b) in next.iter_mut().zip(&layer.bias) {
                *n += b;
            }
            if l + 1 < m.layers().len() {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            h = next;
        }
        let mut aug = h.clone();
        for (i, w) in fixed_weights.iter().enumerate() {
            if *w != 0.0 {
                for (a, p) in aug.iter_mut().zip(mem.prototype(i)) {
                    *a += w * p;
                }
            }
        }
        let mut logits = matvec(&m.classifier().weight, &aug).unwrap();
        for (l, b) in logits.iter_mut().zip(&m.classifier().bias) {
            *l += b;
        }
        cross_entropy(&logits, label).unwrap().0
    };

    let h = 1e-6;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let fd = (frozen_loss(&model, &plus) - frozen_loss(&model, &minus)) / (2.0 * h);
        assert!(
            rel_err(out.grads.input[i], fd) <= 1e-5,
            "input {i}: analytic {} vs frozen fd {fd}",
            out.grads.input[i]
        );
    }
    for r in 0..3 {
        for c in 0..model.feature_dim() {
            let mut plus = model.clone();
            let cur = plus.classifier.weight.get(r, c);
            plus.classifier.weight.set(r, c, cur + h);
            let mut minus = model.clone();
            let cur = minus.classifier.weight.get(r, c);
            minus.classifier.weight.set(r, c, cur - h);
            let fd = (frozen_loss(&plus, &x) - frozen_loss(&minus, &x)) / (2.0 * h);
            assert!(rel_err(out.grads.classifier.0.get(r, c), fd) <= 1e-5);
        }
    }
}

#[test]
fn backward_on_off_differ_exactly_by_the_attention_jacobian_term() {
    let model = small_model(300, 5, &[6, 4], 3);
    let mem = written_memory(&model, 0.9, 0.1, 301, 3);
    let mut rng = Rng::from_seed(302);
    let x = gaussian(&mut rng, 5, 0.0, 1.0).unwrap();
    let on = TrainConfig::default();
    let off = TrainConfig {
        backprop_through_attention: false,
        ..TrainConfig::default()
    };

    let out_on = backward(&model, &mem, &x, 0, &on).unwrap();
    let out_off = backward(&model, &mem, &x, 0, &off).unwrap();
    assert_eq!(out_on.loss, out_off.loss, "the flag only affects gradients");

    // The feature-level difference is the read-path Jacobian term.
    let (_, dlogits) = cross_entropy(&out_on.logits, 0).unwrap();
    let d_aug = matvec_t(&model.classifier().weight, &dlogits).unwrap();
    let rb = mem
        .read_backward(
            &out_on.feature,
            crate::memory::ReadMode::Attention,
            Similarity::Cosine,
            &d_aug,
        )
        .unwrap();
    let term: Vec<f64> = rb.grad_input.iter().zip(&d_aug).map(|(a, b)| a - b).collect();

    // Propagate the term alone through the MLP transpose and compare with
    // the difference of the two input gradients.
    let mut g = term;
    for l in (0..model.layers().len()).rev() {
        if l + 1 < model.layers().len() {
            let trace_pre = {
                // recompute pre-activations up to layer l
                let mut h = x.clone();
                let mut pre = Vec::new();
                for (i, layer) in model.layers().iter().enumerate() {
                    let mut next = matvec(&layer.weight, &h).unwrap();
                    for (n, b) in next.iter_mut().zip(&layer.bias) {
                        *n += b;
                    }
                    pre.push(next.clone());
                    if i + 1 < model.layers().len() {
                        for v in next.iter_mut() {
                            *v = v.max(0.0);
                        }
                    }
                    h = next;
                }
                pre
            };
            for (gi, zi) in g.iter_mut().zip(&trace_pre[l]) {
                if *zi <= 0.0 {
                    *gi = 0.0;
                }
            }
        }
        g = matvec_t(&model.layers()[l].weight, &g).unwrap();
    }
    let diff: Vec<f64> = out_on
        .grads
        .input
        .iter()
        .zip(&out_off.grads.input)
        .map(|(a, b)| a - b)
        .collect();
    assert_close(&diff, &g, 1e-12);
}

#[test]
fn backward_is_linear_over_duplicated_samples() {
    let model = small_model(400, 4, &[5, 3], 3);
    let mem = written_memory(&model, 0.9, 0.1, 401, 3);
    let mut rng = Rng::from_seed(402);
    let x = gaussian(&mut rng, 4, 0.0, 1.0).unwrap();
    let config = TrainConfig::default();

    let single = backward(&model, &mem, &x, 1, &config).unwrap();
    let mut batch = Gradients::zeros_like(&model);
    batch.accumulate(&single.grads);
    batch.accumulate(&single.grads);

    for (l, (dw, db)) in batch.layers.iter().enumerate() {
        for (a, b) in dw.data().iter().zip(single.grads.layers[l].0.data()) {
            assert_eq!(*a, 2.0 * b);
        }
        for (a, b) in db.iter().zip(&single.grads.layers[l].1) {
            assert_eq!(*a, 2.0 * b);
        }
    }
    for (a, b) in batch.input.iter().zip(&single.grads.input) {
        assert_eq!(*a, 2.0 * b);
    }
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

#[test]
fn sgd_step_zero_lr_is_identity() {
    let mut p = vec![1.0, -2.0];
    let mut v = vec![0.0, 0.0];
    sgd_step(&mut p, &[0.3, -0.4], &mut v, 0.0, 0.9, 1e-4).unwrap();
    assert_eq!(p, vec![1.0, -2.0]);
}

#[test]
fn sgd_step_fixed_point() {
    let mut p = vec![1.0, -2.0];
    let mut v = vec![0.0, 0.0];
    sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
    assert_eq!(p, vec![1.0, -2.0]);
    assert_eq!(v, vec![0.0, 0.0]);
}

#[test]
fn sgd_step_matches_hand_computed_scalar_recursion() {
    let (lr, momentum, wd) = (0.1, 0.9, 1e-4);
    let mut p = vec![1.0];
    let mut v = vec![0.0];
    sgd_step(&mut p, &[0.5], &mut v, lr, momentum, wd).unwrap();
    sgd_step(&mut p, &[0.5], &mut v, lr, momentum, wd).unwrap();

    // Hand recursion.
    let g1 = 0.5 + wd * 1.0;
    let v1 = g1;
    let p1 = 1.0 - lr * v1;
    let g2 = 0.5 + wd * p1;
    let v2 = momentum * v1 + g2;
    let p2 = p1 - lr * v2;
    assert!((p[0] - p2).abs() <= 1e-15, "{} vs {p2}", p[0]);
    assert!((v[0] - v2).abs() <= 1e-15);
}

#[test]
fn sgd_step_rejects_mismatched_shapes() {
    let mut p = vec![0.0; 2];
    let mut v = vec![0.0; 2];
    assert!(sgd_step(&mut p, &[0.0; 3], &mut v, 0.1, 0.9, 0.0).is_err());
}

#[test]
fn lr_schedule_decays_once() {
    let config = TrainConfig::default();
    assert_eq!(lr_at(0, &config), (4e-3, 2e-2));
    assert_eq!(lr_at(39, &config), (4e-3, 2e-2));
    let (b, n) = lr_at(40, &config);
    assert!((b - 4e-4).abs() < 1e-18);
    assert!((n - 2e-3).abs() < 1e-18);
    assert_eq!(lr_at(40, &config), lr_at(59, &config));

    let constant = TrainConfig {
        lr_decay_epoch: 60,
        epochs: 60,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(0, &constant), lr_at(59, &constant));
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = small_model(500, 6, &[8, 4], 5);
    model.enable_predictor(&mut Rng::substream(500, 1));
    let mut memory = written_memory(&model, 0.8, 0.2, 501, 5);
    memory.set_frozen(true);
    let ck = Checkpoint {
        model,
        memory,
        read_mode: ReadModeSpec::TopK { k: 3 },
        similarity: Similarity::Cosine,
    };
    let bytes = ck.to_bytes();
    let restored = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(restored.to_bytes(), bytes);
    assert_eq!(restored, ck);
}

#[test]
fn checkpoint_rejects_malformed_input() {
    let model = small_model(600, 3, &[4], 2);
    let memory = CategoricalMemory::new(2, 4, 0.9, 0.1).unwrap();
    let ck = Checkpoint {
        model,
        memory,
        read_mode: ReadModeSpec::Attention,
        similarity: Similarity::Cosine,
    };
    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'Z';
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

#[test]
fn model_init_is_seed_deterministic() {
    let a = small_model(7, 5, &[6, 4], 3);
    let b = small_model(7, 5, &[6, 4], 3);
    assert_eq!(a, b);
    let c = small_model(8, 5, &[6, 4], 3);
    assert_ne!(a, c);
}

#[test]
fn read_mode_spec_labels() {
    assert_eq!(ReadModeSpec::Attention.label(), "attention");
    assert_eq!(ReadModeSpec::TopK { k: 5 }.label(), "topk_5");
}

#[test]
fn config_validation_catches_bad_fields() {
    let mut c = TrainConfig::default();
    c.beta = 1.0;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.lr_decay_epoch = c.epochs + 1;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.batch_size = 0;
    assert!(c.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}
