//! The pretraining loop: shuffled mini-batches, per-variant loss assembly,
//! Adam updates on the stepped schedule, and the per-epoch loss trace.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anatomy::{degree_matrix, fit_normalizer, DegreeMode, NormalizationStats, RoiTable};
use crate::cohort::{augment_with_rng, write_atomic, Cohort, AUGMENT_DROPOUT};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, expw_loss, l1_age_loss, anat_sup_loss, simclr_loss, yaware_loss, DegreeMatrix,
    LossConfig, LossVariant,
};
use crate::numgrad::{Tape, Tensor, Var};

use super::adam::{adam_step, effective_lr, AdamState};
use super::checkpoint::{Checkpoint, RngState};
use super::encoder::{
    aux_on_tape, encode_on_tape, forward_on_tape, EncoderConfig, ParamVars, Parameters,
};

/// Optimization settings. Defaults: lr 1e-4 decayed by 0.9 every 10
/// epochs, batch size 32, 300 epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// View-augmentation noise scale; 0 feeds raw features (no dropout).
    pub augment_strength: f64,
}

impl TrainConfig {
    pub fn new(loss: LossConfig) -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 300,
            loss,
            seed: 0,
            augment_strength: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !self.augment_strength.is_finite() || self.augment_strength < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "augment_strength must be finite and >= 0, got {}",
                self.augment_strength
            )));
        }
        Ok(())
    }
}

/// Per-batch inputs already resolved for one loss variant.
pub struct BatchInputs<'a> {
    pub x: Var,
    pub ages: &'a [f64],
    pub degrees: Option<&'a DegreeMatrix>,
    pub targets: Option<&'a [Vec<f64>]>,
}

/// Assemble the configured loss for one batch on an existing tape. Shared
/// by the training loop and the finite-difference harness.
pub fn batch_loss(
    tape: &mut Tape,
    vars: &ParamVars,
    inputs: &BatchInputs,
    config: &LossConfig,
) -> Result<Var> {
    let tau = config.temperature();
    match config.variant() {
        LossVariant::Simclr => {
            let (_, z) = forward_on_tape(tape, vars, inputs.x)?;
            simclr_loss(tape, z, tau)
        }
        LossVariant::Yaware => {
            let (_, z) = forward_on_tape(tape, vars, inputs.x)?;
            yaware_loss(tape, z, inputs.ages, config.sigma(), tau)
        }
        LossVariant::Expw => {
            let (_, z) = forward_on_tape(tape, vars, inputs.x)?;
            expw_loss(tape, z, inputs.ages, config.sigma(), tau)
        }
        LossVariant::AnatclLocal
        | LossVariant::AnatclGlobal
        | LossVariant::AnatsslLocal
        | LossVariant::AnatsslGlobal => {
            let (_, z) = forward_on_tape(tape, vars, inputs.x)?;
            combined_loss(tape, z, inputs.ages, inputs.degrees, config)
        }
        LossVariant::L1Age => {
            let h = encode_on_tape(tape, vars, inputs.x)?;
            let pred = aux_on_tape(tape, vars, h)?;
            l1_age_loss(tape, pred, inputs.ages)
        }
        LossVariant::L1Anat => {
            let targets = inputs.targets.ok_or_else(|| {
                Error::InvalidConfig("l1_anat needs mean-descriptor targets".into())
            })?;
            let h = encode_on_tape(tape, vars, inputs.x)?;
            let pred = aux_on_tape(tape, vars, h)?;
            anat_sup_loss(tape, pred, targets)
        }
    }
}

/// Mean global descriptor per subject: for each measure, the mean of its
/// raw values over all ROIs. Targets for the supervised anatomical
/// baseline.
pub fn mean_global_descriptors(table: &RoiTable, ids: &[&str]) -> Result<Vec<Vec<f64>>> {
    let k = table.roi_count();
    let n_measures = table.measures().count();
    ids.iter()
        .map(|id| {
            let s = table.subject_index(id)?;
            Ok((0..n_measures)
                .map(|m| (0..k).map(|roi| table.value(s, roi, m)).sum::<f64>() / k as f64)
                .collect())
        })
        .collect()
}

/// The trained model plus its per-epoch mean loss trace.
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<f64>,
}

/// Run the full pretraining loop. Deterministic given (cohort, configs).
pub fn pretrain(
    cohort: &Cohort,
    encoder_config: &EncoderConfig,
    train_config: &TrainConfig,
) -> Result<PretrainOutput> {
    encoder_config.validate()?;
    train_config.validate()?;
    if cohort.len() < 2 {
        return Err(Error::InvalidConfig(
            "pretraining needs at least 2 subjects".into(),
        ));
    }
    if encoder_config.input_dim != cohort.x_width() {
        return Err(Error::WidthMismatch {
            expected: encoder_config.input_dim,
            actual: cohort.x_width(),
        });
    }
    let variant = train_config.loss.variant();
    let table = match (variant.needs_roi_table(), cohort.roi_table()) {
        (true, None) => {
            return Err(Error::MissingDegrees {
                variant: variant.name().to_string(),
            })
        }
        (_, table) => table,
    };

    // Variant-specific precomputation, all fit on the pretraining cohort.
    let stats: Option<NormalizationStats> = match variant {
        LossVariant::AnatclLocal | LossVariant::AnatsslLocal => {
            Some(fit_normalizer(table.expect("checked above"))?)
        }
        _ => None,
    };
    let all_ids = cohort.ids();
    let all_targets: Option<Vec<Vec<f64>>> = match variant {
        LossVariant::L1Anat => Some(mean_global_descriptors(
            table.expect("checked above"),
            &all_ids,
        )?),
        _ => None,
    };
    let aux_out = match variant {
        LossVariant::L1Age => Some(1),
        LossVariant::L1Anat => Some(table.expect("checked above").measures().count()),
        _ => None,
    };

    let mut params = Parameters::init(encoder_config, aux_out)?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let ages = cohort.ages();
    let strength = train_config.augment_strength;
    let dropout = if strength > 0.0 { AUGMENT_DROPOUT } else { 0.0 };

    let mut trace = Vec::with_capacity(train_config.epochs);
    for epoch in 0..train_config.epochs {
        let mut order: Vec<usize> = (0..cohort.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let lr = effective_lr(train_config.learning_rate, epoch);

        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(train_config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let diag = |e: Error| match e {
                Error::NonFinite { .. } => Error::NanLoss {
                    epoch: epoch + 1,
                    batch: batch_idx + 1,
                },
                other => other,
            };
            let loss_value =
                train_batch(cohort, chunk, &mut params, &mut state, &mut rng, lr, TrainStep {
                    variant,
                    config: &train_config.loss,
                    ages: &ages,
                    stats: stats.as_ref(),
                    targets: all_targets.as_deref(),
                    table,
                    strength,
                    dropout,
                })
                .map_err(diag)?;
            epoch_sum += loss_value;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::InvalidConfig(
                "every batch was smaller than 2 subjects".into(),
            ));
        }
        trace.push(epoch_sum / batches as f64);
    }

    let checkpoint = Checkpoint {
        encoder_config: encoder_config.clone(),
        train_config: train_config.clone(),
        params,
        state,
        epoch: train_config.epochs as u32,
        rng: RngState::capture(&rng),
    };
    Ok(PretrainOutput { checkpoint, trace })
}

struct TrainStep<'a> {
    variant: LossVariant,
    config: &'a LossConfig,
    ages: &'a [f64],
    stats: Option<&'a NormalizationStats>,
    targets: Option<&'a [Vec<f64>]>,
    table: Option<&'a RoiTable>,
    strength: f64,
    dropout: f64,
}

fn train_batch(
    cohort: &Cohort,
    chunk: &[usize],
    params: &mut Parameters,
    state: &mut AdamState,
    rng: &mut ChaCha8Rng,
    lr: f64,
    step: TrainStep,
) -> Result<f64> {
    let subjects = cohort.subjects();
    let b = chunk.len();

    // Views. SimCLR gets two per subject in block layout (i pairs with
    // i + b); everything else gets one stochastic view.
    let rows: Vec<Vec<f64>> = if step.variant == LossVariant::Simclr {
        let mut rows = vec![Vec::new(); 2 * b];
        for (i, s) in chunk.iter().enumerate() {
            let x = &subjects[*s].x;
            rows[i] = augment_with_rng(x, step.strength, step.dropout, rng);
            rows[b + i] = augment_with_rng(x, step.strength, step.dropout, rng);
        }
        rows
    } else {
        chunk
            .iter()
            .map(|s| augment_with_rng(&subjects[*s].x, step.strength, step.dropout, rng))
            .collect()
    };
    let x = Tensor::from_rows(&rows)?;

    let batch_ages: Vec<f64> = chunk.iter().map(|s| step.ages[*s]).collect();
    let degrees = match step.variant {
        LossVariant::AnatclLocal | LossVariant::AnatsslLocal => {
            let ids: Vec<&str> = chunk.iter().map(|s| subjects[*s].id.as_str()).collect();
            Some(degree_matrix(
                step.table.expect("roi table checked at entry"),
                &ids,
                DegreeMode::Local,
                step.stats,
            )?)
        }
        LossVariant::AnatclGlobal | LossVariant::AnatsslGlobal => {
            let ids: Vec<&str> = chunk.iter().map(|s| subjects[*s].id.as_str()).collect();
            Some(degree_matrix(
                step.table.expect("roi table checked at entry"),
                &ids,
                DegreeMode::Global,
                None,
            )?)
        }
        _ => None,
    };
    let batch_targets: Option<Vec<Vec<f64>>> = step
        .targets
        .map(|all| chunk.iter().map(|s| all[*s].clone()).collect());

    let mut tape = Tape::new();
    let vars = ParamVars::leaf(&mut tape, params);
    let xv = tape.leaf(x);
    let inputs = BatchInputs {
        x: xv,
        ages: &batch_ages,
        degrees: degrees.as_ref(),
        targets: batch_targets.as_deref(),
    };
    let loss = batch_loss(&mut tape, &vars, &inputs, step.config)?;
    let loss_value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let grad_tensors: Vec<Tensor> = vars.all().iter().map(|v| grads.wrt(*v)).collect();
    adam_step(params, &grad_tensors, state, lr)?;
    Ok(loss_value)
}

/// Persist the per-epoch trace as CSV `epoch,mean_loss` (1-based epochs).
pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut bytes);
        w.write_record(["epoch", "mean_loss"])?;
        for (i, loss) in trace.iter().enumerate() {
            w.write_record([(i + 1).to_string(), loss.to_string()])?;
        }
        w.flush()?;
    }
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate, SyntheticConfig};
    use crate::model::encoder::forward;
    use crate::numgrad::finite_diff_check;

    fn small_cohort(n: usize, seed: u64) -> Cohort {
        let mut cfg = SyntheticConfig::new(n);
        cfg.input_dim = 16;
        cfg.seed = seed;
        generate(&cfg).unwrap()
    }

    fn small_encoder(seed: u64) -> EncoderConfig {
        EncoderConfig {
            input_dim: 16,
            hidden: vec![12],
            representation_dim: 8,
            projection_dim: 6,
            seed,
        }
    }

    fn quick_train(loss: LossConfig, epochs: usize) -> TrainConfig {
        let mut t = TrainConfig::new(loss);
        t.epochs = epochs;
        t.batch_size = 8;
        t.learning_rate = 1e-3;
        t
    }

    #[test]
    fn trace_is_bitwise_deterministic() {
        let cohort = small_cohort(12, 0);
        let enc = small_encoder(1);
        let train = quick_train(LossConfig::new(LossVariant::Yaware), 2);
        let a = pretrain(&cohort, &enc, &train).unwrap();
        let b = pretrain(&cohort, &enc, &train).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert_eq!(a.checkpoint.rng, b.checkpoint.rng);
        assert_eq!(a.trace.len(), 2);
    }

    #[test]
    fn anatcl_without_roi_table_is_missing_degrees() {
        let full = small_cohort(12, 0);
        let stripped = Cohort::new(full.subjects().to_vec(), None).unwrap();
        let enc = small_encoder(1);
        let train = quick_train(LossConfig::new(LossVariant::AnatclGlobal), 1);
        match pretrain(&stripped, &enc, &train) {
            Err(Error::MissingDegrees { variant }) => assert_eq!(variant, "anatcl_global"),
            other => panic!("expected MissingDegrees, got {:?}", other.err()),
        }
    }

    #[test]
    fn loss_decreases_over_thirty_epochs() {
        let cohort = small_cohort(48, 5);
        let enc = small_encoder(2);
        let train = quick_train(LossConfig::new(LossVariant::Yaware), 30);
        let out = pretrain(&cohort, &enc, &train).unwrap();
        assert!(
            out.trace[29] < out.trace[0],
            "trace start {} end {}",
            out.trace[0],
            out.trace[29]
        );
        assert!(out.trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn every_variant_trains_one_epoch() {
        let cohort = small_cohort(12, 3);
        let enc = small_encoder(4);
        for variant in LossVariant::ALL {
            let train = quick_train(LossConfig::new(variant), 1);
            let out = pretrain(&cohort, &enc, &train)
                .unwrap_or_else(|e| panic!("variant {} failed: {}", variant, e));
            assert!(out.trace[0].is_finite(), "variant {}", variant);
        }
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let cohort = small_cohort(16, 7);
        let enc = small_encoder(4);
        let mut train = quick_train(LossConfig::new(LossVariant::Yaware), 1);
        train.learning_rate = 1e300;
        match pretrain(&cohort, &enc, &train) {
            Err(Error::NanLoss { epoch, batch }) => {
                assert_eq!(epoch, 1);
                assert_eq!(batch, 2);
            }
            other => panic!("expected NanLoss, got {:?}", other.err().map(|e| e.to_string())),
        }
    }

    #[test]
    fn trailing_singleton_batch_is_dropped() {
        let cohort = small_cohort(17, 9);
        let enc = small_encoder(4);
        let train = quick_train(LossConfig::new(LossVariant::Yaware), 1);
        // 17 subjects with batch 8 leave a final chunk of 1; training must
        // skip it rather than feed a single subject to a contrastive loss.
        let out = pretrain(&cohort, &enc, &train).unwrap();
        assert!(out.trace[0].is_finite());
    }

    #[test]
    fn head_mutation_leaves_h_unchanged() {
        let cohort = small_cohort(12, 11);
        let enc = small_encoder(6);
        let train = quick_train(LossConfig::new(LossVariant::Yaware), 2);
        let out = pretrain(&cohort, &enc, &train).unwrap();
        let x = cohort.x_tensor(&[0, 1, 2]).unwrap();
        let (h1, _) = forward(&out.checkpoint.params, &x).unwrap();
        let mut mutated = out.checkpoint.params.clone();
        for a in mutated.head.iter_mut() {
            a.w = Tensor::zeros(a.w.shape().to_vec());
            a.b = Tensor::zeros(a.b.shape().to_vec());
        }
        let (h2, _) = forward(&mutated, &x).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn combined_loss_gradient_passes_finite_difference() {
        // End-to-end check through the full network and the Eq. 6 loss on
        // a 4-subject batch with a width-8 two-layer encoder.
        let cohort = small_cohort(10, 13);
        let enc = EncoderConfig {
            input_dim: 16,
            hidden: vec![8],
            representation_dim: 8,
            projection_dim: 4,
            seed: 5,
        };
        let params = Parameters::init(&enc, None).unwrap();
        let x = cohort.x_tensor(&[0, 1, 2, 3]).unwrap();
        let ages: Vec<f64> = cohort.ages()[..4].to_vec();
        let ids: Vec<&str> = cohort.ids()[..4].to_vec();
        let table = cohort.roi_table().unwrap();
        let degrees = degree_matrix(table, &ids, DegreeMode::Global, None).unwrap();
        let config = LossConfig::new(LossVariant::AnatclGlobal);

        let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let err = finite_diff_check(
            |tape, vars| {
                let pv = ParamVars::from_ordered(vars, 2, false)?;
                let xv = tape.leaf(x.clone());
                let inputs = BatchInputs {
                    x: xv,
                    ages: &ages,
                    degrees: Some(&degrees),
                    targets: None,
                };
                batch_loss(tape, &pv, &inputs, &config)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative gradient error {}", err);
    }

    #[test]
    fn loss_trace_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_loss_trace(&path, &[2.5, 1.75]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,mean_loss\n1,2.5\n2,1.75\n");
    }
}
