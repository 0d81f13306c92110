//! Synthetic cohort generation, cohort file ingestion, view augmentation,
//! stratified fold splitting, and embedding persistence.
//!
//! The generator is a latent factor model: age and a head-size factor
//! drive the ROI measures with documented signs (cortical thickness falls
//! with age, volume and surface track size), and the input vector x is an
//! affine mixing of the latents plus Gaussian noise. With zero noise the
//! age is exactly affine in x, which gives downstream probes a known
//! recoverability ceiling.

use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::anatomy::{Atlas, Measure, MeasureSet, RoiTable};
use crate::error::{Error, Result};
use crate::numgrad::Tensor;

/// Fraction of coordinates zeroed by view augmentation.
pub const AUGMENT_DROPOUT: f64 = 0.1;

/// One participant record.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub x: Vec<f64>,
    pub age: f64,
    pub sex: u8,
    pub labels: BTreeMap<String, f64>,
}

/// A validated set of subjects plus an optional aligned ROI table.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    subjects: Vec<Subject>,
    roi: Option<RoiTable>,
}

impl Cohort {
    pub fn new(subjects: Vec<Subject>, roi: Option<RoiTable>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::EmptyTable);
        }
        let width = subjects[0].x.len();
        let label_keys: Vec<&String> = subjects[0].labels.keys().collect();
        for (i, s) in subjects.iter().enumerate() {
            if subjects[..i].iter().any(|t| t.id == s.id) {
                return Err(Error::IdMismatch(format!("duplicate subject id '{}'", s.id)));
            }
            if s.x.len() != width {
                return Err(Error::WidthMismatch {
                    expected: width,
                    actual: s.x.len(),
                });
            }
            if !(5.0..=95.0).contains(&s.age) {
                return Err(Error::DomainError {
                    op: "cohort",
                    detail: format!("subject {} has age {} outside [5, 95]", s.id, s.age),
                });
            }
            if s.sex > 1 {
                return Err(Error::DomainError {
                    op: "cohort",
                    detail: format!("subject {} has sex {}, expected 0 or 1", s.id, s.sex),
                });
            }
            if s.labels.keys().collect::<Vec<_>>() != label_keys {
                return Err(Error::IdMismatch(format!(
                    "subject {} has a different label set",
                    s.id
                )));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::DomainError {
                    op: "cohort",
                    detail: format!("subject {} has non-finite features", s.id),
                });
            }
        }
        if let Some(table) = &roi {
            for s in &subjects {
                if table.subject_index(&s.id).is_err() {
                    return Err(Error::IdMismatch(format!(
                        "roi table is missing subject '{}'",
                        s.id
                    )));
                }
            }
        }
        Ok(Self { subjects, roi })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn roi_table(&self) -> Option<&RoiTable> {
        self.roi.as_ref()
    }

    pub fn x_width(&self) -> usize {
        self.subjects[0].x.len()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn ages(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.age).collect()
    }

    /// Values of one label across all subjects, in cohort order.
    pub fn label_values(&self, name: &str) -> Result<Vec<f64>> {
        self.subjects
            .iter()
            .map(|s| {
                s.labels
                    .get(name)
                    .copied()
                    .ok_or_else(|| Error::LabelMissing(name.to_string()))
            })
            .collect()
    }

    /// Resolve a task column: `age` and `sex` map to the built-in fields,
    /// anything else to a label column.
    pub fn target_values(&self, task: &str) -> Result<Vec<f64>> {
        match task {
            "age" => Ok(self.ages()),
            "sex" => Ok(self.subjects.iter().map(|s| s.sex as f64).collect()),
            label => self.label_values(label),
        }
    }

    pub fn label_names(&self) -> Vec<&str> {
        self.subjects[0].labels.keys().map(String::as_str).collect()
    }

    /// Feature matrix for a subset of subjects, rows in the given order.
    pub fn x_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|i| self.subjects[*i].x.clone())
            .collect();
        Tensor::from_rows(&rows)
    }

    /// Write `subjects.csv`, `features.csv`, and `roi.csv` (when present).
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let labels = self.label_names();

        let mut subjects = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut subjects);
            let mut header = vec!["id".to_string(), "age".into(), "sex".into()];
            header.extend(labels.iter().map(|l| l.to_string()));
            w.write_record(&header)?;
            for s in &self.subjects {
                let mut row = vec![s.id.clone(), s.age.to_string(), s.sex.to_string()];
                row.extend(labels.iter().map(|l| s.labels[*l].to_string()));
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        write_atomic(&dir.join("subjects.csv"), &subjects)?;

        let mut features = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut features);
            let width = self.x_width();
            let mut header = vec!["id".to_string()];
            header.extend((0..width).map(|i| format!("x_{}", i)));
            w.write_record(&header)?;
            for s in &self.subjects {
                let mut row = vec![s.id.clone()];
                row.extend(s.x.iter().map(f64::to_string));
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        write_atomic(&dir.join("features.csv"), &features)?;

        if let Some(table) = &self.roi {
            let mut roi = Vec::new();
            table.write_csv(&mut roi)?;
            write_atomic(&dir.join("roi.csv"), &roi)?;
        }
        Ok(())
    }

    /// Load a cohort directory written by `save_dir` (or by hand).
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let subjects_path = dir.join("subjects.csv");
        let features_path = dir.join("features.csv");
        for p in [&subjects_path, &features_path] {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }

        let file = subjects_path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(&subjects_path)?;
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols.len() < 3 || cols[0] != "id" || cols[1] != "age" || cols[2] != "sex" {
            return Err(Error::MalformedRow {
                file,
                line: 1,
                detail: "header must start with id,age,sex".into(),
            });
        }
        let label_names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
        let mut subjects = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or_default();
            let bad = |detail: String| Error::MalformedRow {
                file: subjects_path.display().to_string(),
                line,
                detail,
            };
            if record.len() != 3 + label_names.len() {
                return Err(bad(format!(
                    "expected {} fields, got {}",
                    3 + label_names.len(),
                    record.len()
                )));
            }
            let age: f64 = record[1]
                .parse()
                .map_err(|_| bad(format!("bad age '{}'", &record[1])))?;
            let sex: u8 = match &record[2] {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("bad sex '{}', expected 0 or 1", other))),
            };
            let mut labels = BTreeMap::new();
            for (name, raw) in label_names.iter().zip(record.iter().skip(3)) {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| bad(format!("bad value '{}' for label {}", raw, name)))?;
                labels.insert(name.clone(), v);
            }
            subjects.push(Subject {
                id: record[0].to_string(),
                x: Vec::new(),
                age,
                sex,
                labels,
            });
        }

        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(&features_path)?;
        let width = rdr.headers()?.len().saturating_sub(1);
        let mut features: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or_default();
            let bad = |detail: String| Error::MalformedRow {
                file: features_path.display().to_string(),
                line,
                detail,
            };
            if record.len() != width + 1 {
                return Err(bad(format!(
                    "expected {} fields, got {}",
                    width + 1,
                    record.len()
                )));
            }
            let id = record[0].to_string();
            let x: Vec<f64> = record
                .iter()
                .skip(1)
                .map(|raw| {
                    raw.parse::<f64>()
                        .map_err(|_| bad(format!("bad feature value '{}'", raw)))
                })
                .collect::<Result<_>>()?;
            if features.insert(id.clone(), x).is_some() {
                return Err(Error::IdMismatch(format!(
                    "duplicate id '{}' in features.csv",
                    id
                )));
            }
        }
        for s in &mut subjects {
            s.x = features.remove(&s.id).ok_or_else(|| {
                Error::IdMismatch(format!("features.csv is missing subject '{}'", s.id))
            })?;
        }
        if let Some(extra) = features.keys().next() {
            return Err(Error::IdMismatch(format!(
                "features.csv has unknown subject '{}'",
                extra
            )));
        }

        let roi_path = dir.join("roi.csv");
        let roi = if roi_path.exists() {
            Some(RoiTable::read_csv_path(&roi_path)?)
        } else {
            None
        };
        Self::new(subjects, roi)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Latent factors that label rules can threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentFactor {
    Age,
    Size,
    Sex,
}

impl LatentFactor {
    pub fn name(self) -> &'static str {
        match self {
            LatentFactor::Age => "age",
            LatentFactor::Size => "size",
            LatentFactor::Sex => "sex",
        }
    }
}

impl std::str::FromStr for LatentFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "age" => Ok(LatentFactor::Age),
            "size" => Ok(LatentFactor::Size),
            "sex" => Ok(LatentFactor::Sex),
            other => Err(Error::InvalidConfig(format!(
                "unknown latent factor '{}'",
                other
            ))),
        }
    }
}

impl std::fmt::Display for LatentFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Binary phenotype built by thresholding a latent factor, with label
/// noise applied as an independent flip.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRule {
    pub name: String,
    pub factor: LatentFactor,
    pub threshold: f64,
    pub flip_prob: f64,
}

/// Everything the generator needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub input_dim: usize,
    pub atlas: Atlas,
    pub measures: MeasureSet,
    pub noise_scale: f64,
    pub label_rules: Vec<LabelRule>,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(n_subjects: usize) -> Self {
        Self {
            n_subjects,
            input_dim: 128,
            atlas: Atlas::Desikan,
            measures: MeasureSet::standard_three(),
            noise_scale: 1.0,
            label_rules: vec![LabelRule {
                name: "elderly".into(),
                factor: LatentFactor::Age,
                threshold: 60.0,
                flip_prob: 0.05,
            }],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 10 {
            return Err(Error::InvalidConfig(format!(
                "n_subjects must be >= 10, got {}",
                self.n_subjects
            )));
        }
        let latents = 3 + self.measures.count();
        if self.input_dim < latents {
            return Err(Error::InvalidConfig(format!(
                "input_dim must be >= {} to mix all latent factors, got {}",
                latents, self.input_dim
            )));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise_scale must be finite and >= 0, got {}",
                self.noise_scale
            )));
        }
        for rule in &self.label_rules {
            if rule.name.is_empty()
                || !rule
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_')
            {
                return Err(Error::InvalidConfig(format!(
                    "label name '{}' must be nonempty [A-Za-z0-9_]",
                    rule.name
                )));
            }
            if ["id", "age", "sex"].contains(&rule.name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "label name '{}' collides with a reserved column",
                    rule.name
                )));
            }
            if !(0.0..=1.0).contains(&rule.flip_prob) {
                return Err(Error::InvalidConfig(format!(
                    "flip_prob must be in [0, 1], got {}",
                    rule.flip_prob
                )));
            }
            if !rule.threshold.is_finite() {
                return Err(Error::InvalidConfig("threshold must be finite".into()));
            }
        }
        for (i, rule) in self.label_rules.iter().enumerate() {
            if self.label_rules[..i].iter().any(|r| r.name == rule.name) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate label name '{}'",
                    rule.name
                )));
            }
        }
        Ok(())
    }
}

struct MeasureModel {
    base_lo: f64,
    base_hi: f64,
    // value = base * (intercept + age_coef * age_n + size factor
    //         + subj_coef * c + roi_noise * eps), all noise scaled.
    intercept: f64,
    age_coef: f64,
    uses_size: bool,
    subj_coef: f64,
    roi_noise: f64,
}

fn measure_model(m: Measure) -> MeasureModel {
    match m {
        Measure::CtMean => MeasureModel {
            base_lo: 2.2,
            base_hi: 3.2,
            intercept: 1.2,
            age_coef: -0.25,
            uses_size: false,
            subj_coef: 0.06,
            roi_noise: 0.03,
        },
        Measure::CtStd => MeasureModel {
            base_lo: 0.3,
            base_hi: 0.6,
            intercept: 1.0,
            age_coef: 0.05,
            uses_size: false,
            subj_coef: 0.08,
            roi_noise: 0.05,
        },
        Measure::Gmv => MeasureModel {
            base_lo: 3000.0,
            base_hi: 9000.0,
            intercept: 1.5,
            age_coef: -0.8,
            uses_size: true,
            subj_coef: 0.0,
            roi_noise: 0.05,
        },
        Measure::SurfaceArea => MeasureModel {
            base_lo: 800.0,
            base_hi: 2600.0,
            intercept: 1.1,
            age_coef: -0.15,
            uses_size: true,
            subj_coef: 0.0,
            roi_noise: 0.04,
        },
        Measure::IntegratedMeanCurv => MeasureModel {
            base_lo: 1.5,
            base_hi: 3.0,
            intercept: 1.0,
            age_coef: 0.1,
            uses_size: false,
            subj_coef: 0.07,
            roi_noise: 0.05,
        },
        // Pure noise by design: no age or size loading at all.
        Measure::GaussianCurvIndex => MeasureModel {
            base_lo: 0.5,
            base_hi: 1.5,
            intercept: 1.0,
            age_coef: 0.0,
            uses_size: false,
            subj_coef: 0.15,
            roi_noise: 0.1,
        },
        Measure::IntrinsicCurvIndex => MeasureModel {
            base_lo: 0.3,
            base_hi: 0.9,
            intercept: 1.0,
            age_coef: 0.08,
            uses_size: false,
            subj_coef: 0.06,
            roi_noise: 0.06,
        },
    }
}

/// Feature noise std at noise_scale = 1, relative to latent mixing weights
/// drawn from U(-1, 1).
const X_NOISE_STD: f64 = 0.5;

/// Generate a reproducible synthetic cohort from the latent factor model.
pub fn generate(config: &SyntheticConfig) -> Result<Cohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.atlas.roi_count();
    let measures = config.measures.measures();
    let n_measures = measures.len();
    let latents = 3 + n_measures;

    // Fixed mixing matrix (input_dim x latents), drawn before any subject.
    let mixing: Vec<f64> = (0..config.input_dim * latents)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();

    // Per-(measure, roi) base values.
    let models: Vec<MeasureModel> = measures.iter().map(|m| measure_model(*m)).collect();
    let mut bases = vec![0.0; n_measures * k];
    for (mi, model) in models.iter().enumerate() {
        for roi in 0..k {
            bases[mi * k + roi] = rng.random_range(model.base_lo..model.base_hi);
        }
    }
    let base_means: Vec<f64> = (0..n_measures)
        .map(|mi| bases[mi * k..(mi + 1) * k].iter().sum::<f64>() / k as f64)
        .collect();

    let mut subjects = Vec::with_capacity(config.n_subjects);
    let mut roi_values = Vec::with_capacity(config.n_subjects * k * n_measures);
    for idx in 0..config.n_subjects {
        let age: f64 = rng.random_range(6.0..88.0);
        let age_n = (age - 6.0) / 82.0;
        let sex: u8 = if rng.random_range(0.0..1.0) < 0.5 { 0 } else { 1 };
        let size_eps: f64 = rng.sample(StandardNormal);
        let size = 1.0 + 0.1 * size_eps + 0.08 * sex as f64;
        let subj_c: Vec<f64> = (0..n_measures).map(|_| rng.sample(StandardNormal)).collect();

        // ROI values for this subject, (roi, measure) order to match RoiTable.
        let mut measure_means = vec![0.0; n_measures];
        for roi in 0..k {
            for (mi, model) in models.iter().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                let mut factor = model.intercept
                    + model.age_coef * age_n
                    + config.noise_scale * model.subj_coef * subj_c[mi]
                    + config.noise_scale * model.roi_noise * eps;
                if model.uses_size {
                    factor *= size;
                }
                let value = (bases[mi * k + roi] * factor).max(1e-3);
                roi_values.push(value);
                measure_means[mi] += value;
            }
        }
        for (mi, mean) in measure_means.iter_mut().enumerate() {
            *mean /= k as f64 * base_means[mi];
        }

        // x = mixing @ latent + noise. At the default noise_scale the
        // per-coordinate noise rivals the latent signal, like real
        // morphometry: the noise vector is drawn once per subject, so it
        // acts as a stable subject fingerprint that purely instance-level
        // objectives are free to encode instead of the latents.
        let mut latent = vec![age_n, size, sex as f64];
        latent.extend(&measure_means);
        let mut x = Vec::with_capacity(config.input_dim);
        for i in 0..config.input_dim {
            let mixed: f64 = latent
                .iter()
                .enumerate()
                .map(|(j, l)| mixing[i * latents + j] * l)
                .sum();
            let eps: f64 = rng.sample(StandardNormal);
            x.push(mixed + config.noise_scale * X_NOISE_STD * eps);
        }

        let mut labels = BTreeMap::new();
        for rule in &config.label_rules {
            let value = match rule.factor {
                LatentFactor::Age => age,
                LatentFactor::Size => size,
                LatentFactor::Sex => sex as f64,
            };
            let mut label = if value > rule.threshold { 1.0 } else { 0.0 };
            if rng.random_range(0.0..1.0) < rule.flip_prob {
                label = 1.0 - label;
            }
            labels.insert(rule.name.clone(), label);
        }

        subjects.push(Subject {
            id: format!("sub-{:05}", idx),
            x,
            age,
            sex,
            labels,
        });
    }

    let ids = subjects.iter().map(|s| s.id.clone()).collect();
    let table = RoiTable::new(ids, k, config.measures.clone(), roi_values)?;
    Cohort::new(subjects, Some(table))
}

/// Additive Gaussian noise scaled by the coordinate std of `x`, then
/// coordinate dropout. Deterministic given the RNG state.
pub fn augment_with_rng<R: Rng>(x: &[f64], strength: f64, dropout: f64, rng: &mut R) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    let noisy: Vec<f64> = x
        .iter()
        .map(|v| {
            let eps: f64 = rng.sample(StandardNormal);
            v + strength * sd * eps
        })
        .collect();
    noisy
        .into_iter()
        .map(|v| {
            if rng.random_range(0.0..1.0) < dropout {
                0.0
            } else {
                v
            }
        })
        .collect()
}

/// Seeded wrapper around `augment_with_rng`.
pub fn augment(x: &[f64], strength: f64, dropout: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment_with_rng(x, strength, dropout, &mut rng)
}

/// Unstratified k-fold split of `0..n`: seeded shuffle, then round-robin.
pub fn plain_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::InvalidConfig(format!(
            "fold count must be in [2, {}], got {}",
            n, k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, idx) in order.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    Ok(folds)
}

/// Split subjects into k disjoint folds. With `stratify`, subjects are
/// grouped by task value != 0 and dealt round-robin so per-fold class
/// counts stay within one subject of each other.
pub fn split_folds(
    cohort: &Cohort,
    k: usize,
    stratify: Option<&str>,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > cohort.len() {
        return Err(Error::InvalidConfig(format!(
            "fold count must be in [2, {}], got {}",
            cohort.len(),
            k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    shuffle(&mut order, &mut rng);

    let groups: Vec<Vec<usize>> = match stratify {
        None => vec![order],
        Some(name) => {
            let values = cohort.target_values(name)?;
            let pos: Vec<usize> = order.iter().copied().filter(|i| values[*i] != 0.0).collect();
            let neg: Vec<usize> = order.iter().copied().filter(|i| values[*i] == 0.0).collect();
            vec![pos, neg]
        }
    };

    let mut folds = vec![Vec::new(); k];
    let mut next = 0usize;
    for group in groups {
        for idx in group {
            folds[next % k].push(idx);
            next += 1;
        }
    }
    Ok(folds)
}

fn shuffle<R: Rng>(indices: &mut [usize], rng: &mut R) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Write representations as CSV `id,h_0,...`.
pub fn save_embeddings(path: &Path, ids: &[String], h: &Tensor) -> Result<()> {
    if h.rows() != ids.len() {
        return Err(Error::LengthMismatch {
            left: ids.len(),
            right: h.rows(),
        });
    }
    let d = h.cols();
    let mut bytes = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut bytes);
        let mut header = vec!["id".to_string()];
        header.extend((0..d).map(|i| format!("h_{}", i)));
        w.write_record(&header)?;
        for (i, id) in ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(h.row(i).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Read embeddings written by `save_embeddings`.
pub fn load_embeddings(path: &Path) -> Result<(Vec<String>, Tensor)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let width = rdr.headers()?.len().saturating_sub(1);
    if width == 0 {
        return Err(Error::WidthMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let mut ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or_default();
        if record.len() != width + 1 {
            return Err(Error::WidthMismatch {
                expected: width + 1,
                actual: record.len(),
            });
        }
        ids.push(record[0].to_string());
        let row: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|raw| {
                raw.parse::<f64>().map_err(|_| Error::MalformedRow {
                    file: path.display().to_string(),
                    line,
                    detail: format!("bad embedding value '{}'", raw),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    Ok((ids, Tensor::from_rows(&rows)?))
}
