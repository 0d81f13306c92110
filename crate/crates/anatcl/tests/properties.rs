//! Randomized invariant checks. Each property encodes a contract that must
//! hold for arbitrary valid inputs, not just the worked examples.

use proptest::prelude::*;

use anatcl::anatomy::{degree_matrix, fit_normalizer, DegreeMode, MeasureSet, RoiTable};
use anatcl::cohort::{augment, generate, plain_folds, split_folds, LabelRule, LatentFactor, SyntheticConfig};
use anatcl::losses::{
    age_degree, weighted_contrastive_weights, yaware_loss, LossConfig, LossVariant,
};
use anatcl::model::{effective_lr, Checkpoint, EncoderConfig, Parameters, TrainConfig};
use anatcl::numgrad::{Tape, Tensor};
use anatcl::probe::Standardizer;

fn unit_rows_strategy(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(
        proptest::collection::vec(-1.0f64..1.0, d..=d).prop_filter_map(
            "rows must have usable norm",
            |v| {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (norm > 1e-3).then(|| v.iter().map(|x| x / norm).collect::<Vec<f64>>())
            },
        ),
        n..=n,
    )
}

fn loss_of(z: &[Vec<f64>], weights: &[f64], tau: f64) -> f64 {
    let mut tape = Tape::new();
    let zv = tape.leaf(Tensor::from_rows(z).unwrap());
    let out = weighted_contrastive_weights(&mut tape, zv, weights, tau).unwrap();
    tape.value(out).item().unwrap()
}

fn yaware_of(z: &[Vec<f64>], ages: &[f64], sigma: f64, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let zv = tape.leaf(Tensor::from_rows(z).unwrap());
    let out = yaware_loss(&mut tape, zv, ages, sigma, tau).unwrap();
    tape.value(out).item().unwrap()
}

/// Random rotation built from Givens rotations over random coordinate pairs.
fn rotate(z: &[Vec<f64>], planes: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut out = z.to_vec();
    for &(i, j, theta) in planes {
        let (s, c) = theta.sin_cos();
        for row in out.iter_mut() {
            let (a, b) = (row[i], row[j]);
            row[i] = c * a - s * b;
            row[j] = s * a + c * b;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn age_kernel_is_bounded_symmetric(
        a in 6.0f64..88.0,
        b in 6.0f64..88.0,
        sigma in 0.5f64..20.0,
    ) {
        let w = age_degree(a, b, sigma);
        // Mathematically w > 0, but exp underflows to +0.0 once the age gap
        // exceeds roughly 38 sigma, so only nonnegativity is guaranteed.
        prop_assert!(w.is_finite() && w >= 0.0 && w <= 1.0);
        prop_assert_eq!(w, age_degree(b, a, sigma));
        prop_assert_eq!(age_degree(a, a, sigma), 1.0);
    }

    #[test]
    fn degree_matrices_are_valid_weights(seed in 0u64..1000) {
        let ms = MeasureSet::standard_three();
        let n_measures = ms.count();
        let subjects = 6usize;
        let k = 16usize;
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            0.5 + 1.5 * ((state >> 11) as f64 / (1u64 << 53) as f64)
        };
        let ids: Vec<String> = (0..subjects).map(|i| format!("p{}", i)).collect();
        let values: Vec<f64> = (0..subjects * k * n_measures).map(|_| next()).collect();
        let table = RoiTable::new(ids.clone(), k, ms, values).unwrap();
        let stats = fit_normalizer(&table).unwrap();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();

        for (mode, stats) in [(DegreeMode::Local, Some(&stats)), (DegreeMode::Global, None)] {
            let m = degree_matrix(&table, &refs, mode, stats).unwrap();
            let v = m.values();
            for i in 0..subjects {
                prop_assert_eq!(v[i * subjects + i], 1.0);
                for j in 0..subjects {
                    prop_assert!((0.0..=1.0).contains(&v[i * subjects + j]));
                    prop_assert_eq!(v[i * subjects + j], v[j * subjects + i]);
                }
            }
        }
    }

    #[test]
    fn contrastive_loss_is_finite_and_nonnegative(
        z in unit_rows_strategy(5, 3),
        w_seed in 1u64..500,
    ) {
        let n = z.len();
        let mut state = w_seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            0.05 + 0.95 * ((state >> 11) as f64 / (1u64 << 53) as f64)
        };
        let weights: Vec<f64> = (0..n * n).map(|_| next()).collect();
        let loss = loss_of(&z, &weights, 0.1);
        prop_assert!(loss.is_finite());
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn loss_ignores_per_anchor_weight_scale(
        z in unit_rows_strategy(5, 3),
        scale in 0.01f64..100.0,
        anchor in 0usize..5,
    ) {
        let n = z.len();
        let base: Vec<f64> = (0..n * n).map(|i| 0.1 + ((i * 37) % 17) as f64 / 17.0).collect();
        let mut scaled = base.clone();
        for j in 0..n {
            scaled[anchor * n + j] *= scale;
        }
        let a = loss_of(&z, &base, 0.1);
        let b = loss_of(&z, &scaled, 0.1);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn loss_is_rotation_invariant(
        z in unit_rows_strategy(5, 4),
        thetas in proptest::collection::vec(0.0f64..std::f64::consts::TAU, 6),
    ) {
        let ages = [12.0, 30.0, 47.0, 61.0, 80.0];
        let planes: Vec<(usize, usize, f64)> = thetas
            .iter()
            .enumerate()
            .map(|(idx, t)| ((idx % 4), ((idx + 1) % 4), *t))
            .filter(|(i, j, _)| i != j)
            .collect();
        let rotated = rotate(&z, &planes);
        let a = yaware_of(&z, &ages, 5.0, 0.1);
        let b = yaware_of(&rotated, &ages, 5.0, 0.1);
        prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
    }

    #[test]
    fn folds_partition_the_index_range(n in 10usize..120, k in 2usize..8, seed in 0u64..99) {
        prop_assume!(k <= n);
        let folds = plain_folds(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![false; n];
        for fold in &folds {
            for &i in fold {
                prop_assert!(!seen[i], "index {} appears twice", i);
                seen[i] = true;
            }
        }
        prop_assert!(seen.into_iter().all(|s| s));
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn stratified_folds_balance_both_classes(seed in 0u64..40, threshold in 20.0f64..70.0) {
        let mut cfg = SyntheticConfig::new(48);
        cfg.input_dim = 8;
        cfg.seed = seed;
        cfg.label_rules = vec![LabelRule {
            name: "grp".into(),
            factor: LatentFactor::Age,
            threshold,
            flip_prob: 0.0,
        }];
        let cohort = generate(&cfg).unwrap();
        let labels = cohort.label_values("grp").unwrap();
        let pos_total = labels.iter().filter(|v| **v != 0.0).count();
        prop_assume!(pos_total >= 4 && pos_total <= 44);

        let folds = split_folds(&cohort, 4, Some("grp"), seed).unwrap();
        let pos: Vec<usize> = folds
            .iter()
            .map(|f| f.iter().filter(|i| labels[**i] != 0.0).count())
            .collect();
        let neg: Vec<usize> = folds
            .iter()
            .map(|f| f.iter().filter(|i| labels[**i] == 0.0).count())
            .collect();
        prop_assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 1, "{:?}", pos);
        prop_assert!(neg.iter().max().unwrap() - neg.iter().min().unwrap() <= 1, "{:?}", neg);
    }

    #[test]
    fn augment_is_identity_at_zero_strength(
        x in proptest::collection::vec(-3.0f64..3.0, 4..40),
        seed in 0u64..1000,
    ) {
        let out = augment(&x, 0.0, 0.0, seed);
        prop_assert_eq!(out, x);
    }

    #[test]
    fn effective_lr_decays_and_stays_positive(base in 1e-6f64..1.0, epoch in 0usize..500) {
        let lr = effective_lr(base, epoch);
        prop_assert!(lr > 0.0 && lr <= base);
        prop_assert!(effective_lr(base, epoch + 10) < lr);
        // Flat within a decade.
        prop_assert_eq!(effective_lr(base, epoch - epoch % 10), lr);
    }

    #[test]
    fn standardizer_centers_and_scales_fit_rows(seed in 0u64..200) {
        let mut cfg = SyntheticConfig::new(30);
        cfg.input_dim = 8;
        cfg.seed = seed;
        let cohort = generate(&cfg).unwrap();
        let idx: Vec<usize> = (0..cohort.len()).collect();
        let x = cohort.x_tensor(&idx).unwrap();
        let train: Vec<usize> = (0..20).collect();
        let scaler = Standardizer::fit(&x, &train).unwrap();
        let z = scaler.apply_rows(&x, &train).unwrap();
        for col in 0..8 {
            let vals: Vec<f64> = (0..20).map(|r| z.row(r)[col]).collect();
            let mean = vals.iter().sum::<f64>() / 20.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 20.0;
            prop_assert!(mean.abs() < 1e-9, "col {} mean {}", col, mean);
            prop_assert!((var - 1.0).abs() < 1e-9, "col {} var {}", col, var);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        enc_seed in 0u64..50,
        hidden in proptest::collection::vec(2usize..10, 0..3),
        aux in proptest::option::of(1usize..4),
    ) {
        let encoder = EncoderConfig {
            input_dim: 6,
            hidden,
            representation_dim: 5,
            projection_dim: 3,
            seed: enc_seed,
        };
        let params = Parameters::init(&encoder, aux).unwrap();
        let state = anatcl::model::AdamState::new(&params);
        let rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(enc_seed);
        let ckpt = Checkpoint {
            encoder_config: encoder,
            train_config: TrainConfig::new(LossConfig::new(LossVariant::Yaware)),
            params,
            state,
            epoch: enc_seed as u32,
            rng: anatcl::model::RngState::capture(&rng),
        };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
