//! The six subcommands. Each runs in two phases: prepare (read + validate
//! everything; failures exit 1) and execute (compute + write artifacts;
//! failures exit 2). No command writes outside its --out directory.

use std::io::Write;
use std::path::Path;

use anatcl::anatomy::{degree_matrix, fit_normalizer, DegreeMode};
use anatcl::cohort::{augment, generate, save_embeddings, Cohort};
use anatcl::losses::{LossConfig, LossVariant};
use anatcl::model::{
    batch_loss, forward, mean_global_descriptors, pretrain as run_pretraining, write_loss_trace,
    BatchInputs, Checkpoint, EncoderConfig, ParamVars, Parameters,
};
use anatcl::numgrad::{finite_diff_check, Tensor};
use anatcl::probe::{cross_validate, feature_study as feature_study_rows, write_probe_results, ProbeKind};

use crate::config::{
    echo_pretrain, echo_synth, RunConfig, PRETRAIN_KEYS, PROBE_KEYS, SYNTH_KEYS,
};
use crate::CliError;

const GRADCHECK_BOUND: f64 = 1e-4;

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::validation(format!("cannot create output dir {}: {}", dir.display(), e))
    })
}

fn load_cohort(dir: &Path) -> Result<Cohort, CliError> {
    Cohort::load_dir(dir)
        .map_err(|e| CliError::validation(format!("cohort {}: {}", dir.display(), e)))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path)
        .map_err(|e| CliError::validation(format!("checkpoint {}: {}", path.display(), e)))
}

fn check_width(encoder: &EncoderConfig, cohort: &Cohort) -> Result<(), CliError> {
    if encoder.input_dim != cohort.x_width() {
        return Err(CliError::validation(format!(
            "encoder input_dim {} does not match cohort feature width {}",
            encoder.input_dim,
            cohort.x_width()
        )));
    }
    Ok(())
}

fn write_artifact(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let write = || -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| CliError::runtime(format!("cannot write {}: {}", path.display(), e)))
}

pub fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let run = RunConfig::load(config)?;
    run.reject_foreign_keys("synth", SYNTH_KEYS)?;
    let synth_config = run.synthetic_config(seed)?;
    prepare_out(out)?;

    let cohort = generate(&synth_config).map_err(|e| CliError::runtime(e))?;
    cohort.save_dir(out).map_err(|e| CliError::runtime(e))?;
    write_artifact(
        &out.join("resolved.cfg"),
        echo_synth(&synth_config, "anatcl synth").as_bytes(),
    )?;
    eprintln!(
        "wrote {} subjects ({} features, {} ROI rows) to {}",
        cohort.len(),
        cohort.x_width(),
        cohort.roi_table().map_or(0, |t| t.subject_ids().len()),
        out.display()
    );
    Ok(())
}

pub fn pretrain(
    config: Option<&Path>,
    cohort_dir: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let run = RunConfig::load(config)?;
    run.reject_foreign_keys("pretrain", PRETRAIN_KEYS)?;
    let cohort = load_cohort(cohort_dir)?;
    let encoder = run.encoder_config(cohort.x_width())?;
    check_width(&encoder, &cohort)?;
    let train = run.train_config(seed)?;
    if train.loss.variant().needs_roi_table() && cohort.roi_table().is_none() {
        return Err(CliError::validation(format!(
            "variant {} needs anatomical degrees but {} is missing",
            train.loss.variant(),
            cohort_dir.join("roi.csv").display()
        )));
    }
    prepare_out(out)?;

    let output = run_pretraining(&cohort, &encoder, &train).map_err(|e| CliError::runtime(e))?;
    output
        .checkpoint
        .save(&out.join("model.ckpt"))
        .map_err(|e| CliError::runtime(e))?;
    write_loss_trace(&out.join("trace.csv"), &output.trace)
        .map_err(|e| CliError::runtime(e))?;
    write_artifact(
        &out.join("resolved.cfg"),
        echo_pretrain(&encoder, &train, "anatcl pretrain").as_bytes(),
    )?;
    eprintln!(
        "pretrained {} for {} epochs on {} subjects; final mean loss {:.6}",
        train.loss.variant(),
        train.epochs,
        cohort.len(),
        output.trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn embed(checkpoint: &Path, cohort_dir: &Path, out: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cohort = load_cohort(cohort_dir)?;
    check_width(&ckpt.encoder_config, &cohort)?;
    prepare_out(out)?;

    let indices: Vec<usize> = (0..cohort.len()).collect();
    let x = cohort.x_tensor(&indices).map_err(|e| CliError::runtime(e))?;
    let (h, _z) = forward(&ckpt.params, &x).map_err(|e| CliError::runtime(e))?;
    let ids: Vec<String> = cohort.ids().into_iter().map(str::to_string).collect();
    save_embeddings(&out.join("embeddings.csv"), &ids, &h)
        .map_err(|e| CliError::runtime(e))?;
    write_artifact(
        &out.join("resolved.cfg"),
        echo_pretrain(&ckpt.encoder_config, &ckpt.train_config, "anatcl embed").as_bytes(),
    )?;
    eprintln!(
        "wrote {}x{} embeddings to {}",
        h.rows(),
        h.cols(),
        out.join("embeddings.csv").display()
    );
    Ok(())
}

pub fn probe(
    config: Option<&Path>,
    checkpoint: &Path,
    cohort_dir: &Path,
    task: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let run = RunConfig::load(config)?;
    run.reject_foreign_keys("probe", PROBE_KEYS)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let cohort = load_cohort(cohort_dir)?;
    check_width(&ckpt.encoder_config, &cohort)?;
    cohort
        .target_values(task)
        .map_err(|e| CliError::validation(e))?;
    let kind = if task == "age" {
        ProbeKind::Ridge
    } else {
        ProbeKind::Logistic
    };
    let folds = run.folds()?;
    let probe_seed = run.probe_seed(seed)?;
    prepare_out(out)?;

    let result = cross_validate(&cohort, &ckpt, task, kind, folds, probe_seed)
        .map_err(|e| CliError::runtime(e))?;
    write_probe_results(&out.join("probe_results.csv"), &[result.clone()])
        .map_err(|e| CliError::runtime(e))?;
    let mut echo = echo_pretrain(&ckpt.encoder_config, &ckpt.train_config, "anatcl probe");
    echo.push_str(&format!(
        "# task = {}, probe = {}\nfolds = {}\nprobe_seed = {}\n",
        task,
        kind.name(),
        folds,
        probe_seed
    ));
    write_artifact(&out.join("resolved.cfg"), echo.as_bytes())?;
    eprintln!(
        "{} probe on task `{}`: {} = {:.4} +/- {:.4} over {} folds",
        kind.name(),
        task,
        result.metric,
        result.mean,
        result.std,
        folds
    );
    Ok(())
}

/// Finite-difference verification of every loss variant through a small
/// two-layer encoder on a synthetic batch of 4 subjects.
pub fn gradcheck(seed: Option<u64>) -> Result<(), CliError> {
    let seed = seed.unwrap_or(2002);
    let mut cfg = anatcl::cohort::SyntheticConfig::new(40);
    cfg.input_dim = 12;
    cfg.seed = seed;
    let cohort = generate(&cfg).map_err(|e| CliError::runtime(e))?;
    let table = cohort.roi_table().expect("generator always builds a table");
    let stats = fit_normalizer(table).map_err(|e| CliError::runtime(e))?;
    let chunk = [0usize, 1, 2, 3];
    let ids: Vec<&str> = chunk.iter().map(|i| cohort.ids()[*i]).collect();
    let ages: Vec<f64> = chunk.iter().map(|i| cohort.ages()[*i]).collect();
    let x4 = cohort.x_tensor(&chunk).map_err(|e| CliError::runtime(e))?;
    let mut rows = Vec::new();
    for pass in 0..2u64 {
        for i in &chunk {
            rows.push(augment(&cohort.subjects()[*i].x, 0.3, 0.1, seed ^ (77 + pass)));
        }
    }
    let x8 = Tensor::from_rows(&rows).map_err(|e| CliError::runtime(e))?;
    let local = degree_matrix(table, &ids, DegreeMode::Local, Some(&stats))
        .map_err(|e| CliError::runtime(e))?;
    let global =
        degree_matrix(table, &ids, DegreeMode::Global, None).map_err(|e| CliError::runtime(e))?;
    let targets = mean_global_descriptors(table, &ids).map_err(|e| CliError::runtime(e))?;

    let encoder = EncoderConfig {
        input_dim: 12,
        hidden: vec![8],
        representation_dim: 8,
        projection_dim: 4,
        seed: 21,
    };

    let mut failures = Vec::new();
    for variant in LossVariant::ALL {
        let aux_out = match variant {
            LossVariant::L1Age => Some(1),
            LossVariant::L1Anat => Some(cfg.measures.count()),
            _ => None,
        };
        let params = Parameters::init(&encoder, aux_out).map_err(|e| CliError::runtime(e))?;
        let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let config = LossConfig::new(variant);
        let x = if variant == LossVariant::Simclr { &x8 } else { &x4 };
        let degrees = match variant {
            LossVariant::AnatclLocal | LossVariant::AnatsslLocal => Some(&local),
            LossVariant::AnatclGlobal | LossVariant::AnatsslGlobal => Some(&global),
            _ => None,
        };
        let err = finite_diff_check(
            |tape, vars| {
                let pv = ParamVars::from_ordered(vars, encoder.hidden.len() + 1, aux_out.is_some())?;
                let xv = tape.leaf(x.clone());
                let inputs = BatchInputs {
                    x: xv,
                    ages: &ages,
                    degrees,
                    targets: Some(&targets),
                };
                batch_loss(tape, &pv, &inputs, &config)
            },
            &tensors,
            1e-5,
        )
        .map_err(|e| CliError::runtime(format!("gradcheck {}: {}", variant, e)))?;
        println!("{}: max relative error {:.3e}", variant, err);
        if !(err < GRADCHECK_BOUND) {
            failures.push(format!("{} at {:.3e}", variant, err));
        }
    }
    if !failures.is_empty() {
        return Err(CliError::runtime(format!(
            "gradient check exceeded {:.0e}: {}",
            GRADCHECK_BOUND,
            failures.join(", ")
        )));
    }
    Ok(())
}

pub fn feature_study(
    config: Option<&Path>,
    cohort_dir: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let run = RunConfig::load(config)?;
    run.reject_foreign_keys("feature-study", PROBE_KEYS)?;
    let cohort = load_cohort(cohort_dir)?;
    let table = cohort.roi_table().ok_or_else(|| {
        CliError::validation(format!(
            "feature-study needs anatomical measures but {} is missing",
            cohort_dir.join("roi.csv").display()
        ))
    })?;
    let folds = run.folds()?;
    let probe_seed = run.probe_seed(seed)?;
    prepare_out(out)?;

    let rows = feature_study_rows(table, &cohort.ages(), folds, probe_seed)
        .map_err(|e| CliError::runtime(e))?;
    let mut csv = String::from("measure,neg_mae_mean,neg_mae_std,r2_mean,r2_std\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.measure.name(),
            row.neg_mae.mean,
            row.neg_mae.std,
            row.r2.mean,
            row.r2.std
        ));
    }
    write_artifact(&out.join("feature_study.csv"), csv.as_bytes())?;
    write_artifact(
        &out.join("resolved.cfg"),
        format!(
            "# anatcl feature-study\nfolds = {}\nprobe_seed = {}\n",
            folds, probe_seed
        )
        .as_bytes(),
    )?;
    for row in &rows {
        eprintln!(
            "{}: r2 {:.4} +/- {:.4}, neg_mae {:.4}",
            row.measure.name(),
            row.r2.mean,
            row.r2.std,
            row.neg_mae.mean
        );
    }
    Ok(())
}
