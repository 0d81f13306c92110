//! Regional anatomy descriptors and similarity degrees.
//!
//! A subject's cortical morphometry lives in a [`RoiTable`]: one value per
//! (subject, ROI, measure). From it we derive local descriptors ψ^k (one
//! vector per region, normalized to \[0,1\]) and global descriptors ω^j (one
//! raw vector per measure spanning all regions), then similarity degrees
//! α (cross-region average) and β (cross-measure average).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read as IoRead;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{DegreeKind, DegreeMatrix};

/// Cortical parcellation used by the synthetic generator and configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Atlas {
    Desikan,
    Destrieux,
}

impl Atlas {
    pub fn roi_count(self) -> usize {
        match self {
            Atlas::Desikan => 68,
            Atlas::Destrieux => 148,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Atlas::Desikan => "desikan",
            Atlas::Destrieux => "destrieux",
        }
    }
}

impl FromStr for Atlas {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desikan" => Ok(Atlas::Desikan),
            "destrieux" => Ok(Atlas::Destrieux),
            other => Err(Error::InvalidConfig(format!("unknown atlas '{}'", other))),
        }
    }
}

impl fmt::Display for Atlas {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One anatomical measurement aggregated per ROI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Measure {
    CtMean,
    CtStd,
    Gmv,
    SurfaceArea,
    IntegratedMeanCurv,
    GaussianCurvIndex,
    IntrinsicCurvIndex,
}

impl Measure {
    pub const ALL: [Measure; 7] = [
        Measure::CtMean,
        Measure::CtStd,
        Measure::Gmv,
        Measure::SurfaceArea,
        Measure::IntegratedMeanCurv,
        Measure::GaussianCurvIndex,
        Measure::IntrinsicCurvIndex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::CtMean => "ct_mean",
            Measure::CtStd => "ct_std",
            Measure::Gmv => "gmv",
            Measure::SurfaceArea => "surface_area",
            Measure::IntegratedMeanCurv => "integrated_mean_curv",
            Measure::GaussianCurvIndex => "gaussian_curv_index",
            Measure::IntrinsicCurvIndex => "intrinsic_curv_index",
        }
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown measure '{}'", s)))
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered, duplicate-free selection of measures.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeasureSet {
    measures: Vec<Measure>,
}

impl MeasureSet {
    pub fn new(measures: Vec<Measure>) -> Result<Self> {
        if measures.is_empty() {
            return Err(Error::InvalidConfig("measure set is empty".into()));
        }
        for (i, m) in measures.iter().enumerate() {
            if measures[..i].contains(m) {
                return Err(Error::InvalidConfig(format!("duplicate measure '{}'", m)));
            }
        }
        Ok(Self { measures })
    }

    /// The paper's default trio: CT mean, GMV, surface area.
    pub fn standard_three() -> Self {
        Self {
            measures: vec![Measure::CtMean, Measure::Gmv, Measure::SurfaceArea],
        }
    }

    /// All seven measures (the L7/G7 variants).
    pub fn all_seven() -> Self {
        Self {
            measures: Measure::ALL.to_vec(),
        }
    }

    pub fn count(&self) -> usize {
        self.measures.len()
    }

    pub fn measures(&self) -> &[Measure] {
        &self.measures
    }

    pub fn index_of(&self, m: Measure) -> Option<usize> {
        self.measures.iter().position(|x| *x == m)
    }
}

/// Per-subject, per-ROI, per-measure anatomical values.
///
/// Values are stored row-major as (subject, roi, measure) and must be
/// nonnegative (anatomical measures are magnitudes).
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTable {
    subject_ids: Vec<String>,
    roi_count: usize,
    measures: MeasureSet,
    values: Vec<f64>,
}

impl RoiTable {
    pub fn new(
        subject_ids: Vec<String>,
        roi_count: usize,
        measures: MeasureSet,
        values: Vec<f64>,
    ) -> Result<Self> {
        if roi_count == 0 {
            return Err(Error::InvalidConfig("roi_count must be positive".into()));
        }
        let expected = subject_ids.len() * roi_count * measures.count();
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                left: expected,
                right: values.len(),
            });
        }
        for (i, id) in subject_ids.iter().enumerate() {
            if subject_ids[..i].contains(id) {
                return Err(Error::IdMismatch(format!("duplicate subject id '{}'", id)));
            }
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::DomainError {
                op: "roi_table",
                detail: format!("values must be finite and nonnegative, got {}", v),
            });
        }
        Ok(Self {
            subject_ids,
            roi_count,
            measures,
            values,
        })
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn roi_count(&self) -> usize {
        self.roi_count
    }

    pub fn measures(&self) -> &MeasureSet {
        &self.measures
    }

    pub fn subject_index(&self, id: &str) -> Result<usize> {
        self.subject_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    pub fn value(&self, subject: usize, roi: usize, measure: usize) -> f64 {
        let n = self.measures.count();
        self.values[(subject * self.roi_count + roi) * n + measure]
    }

    /// Parse from CSV with header `subject_id,roi_index,measure_name,value`.
    ///
    /// The measure set is inferred from the distinct measure names present
    /// (kept in canonical order) and the ROI count from the largest index.
    /// Every (subject, roi, measure) combination must appear exactly once.
    pub fn read_csv<R: IoRead>(reader: R, file: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        {
            let headers = rdr.headers()?;
            let expected = ["subject_id", "roi_index", "measure_name", "value"];
            if headers.iter().collect::<Vec<_>>() != expected {
                return Err(Error::MalformedRow {
                    file: file.to_string(),
                    line: 1,
                    detail: format!("header must be {:?}", expected.join(",")),
                });
            }
        }

        struct Row {
            subject: String,
            roi: usize,
            measure: Measure,
            value: f64,
        }
        let mut rows: Vec<Row> = Vec::new();
        let mut subject_order: Vec<String> = Vec::new();
        let mut measures_seen = [false; Measure::ALL.len()];
        let mut max_roi = 0usize;

        for record in rdr.records() {
            let record = record?;
            let line = record
                .position()
                .map(|p| p.line())
                .unwrap_or_default();
            let bad = |detail: String| Error::MalformedRow {
                file: file.to_string(),
                line,
                detail,
            };
            if record.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", record.len())));
            }
            let subject = record[0].to_string();
            let roi: usize = record[1]
                .parse()
                .map_err(|_| bad(format!("bad roi_index '{}'", &record[1])))?;
            let measure: Measure = record[2]
                .parse()
                .map_err(|_| bad(format!("unknown measure_name '{}'", &record[2])))?;
            let value: f64 = record[3]
                .parse()
                .map_err(|_| bad(format!("bad value '{}'", &record[3])))?;
            if !value.is_finite() || value < 0.0 {
                return Err(bad(format!(
                    "value must be finite and nonnegative, got {}",
                    value
                )));
            }
            if !subject_order.contains(&subject) {
                subject_order.push(subject.clone());
            }
            measures_seen[Measure::ALL.iter().position(|m| *m == measure).unwrap()] = true;
            max_roi = max_roi.max(roi);
            rows.push(Row {
                subject,
                roi,
                measure,
                value,
            });
        }

        if rows.is_empty() {
            return Err(Error::EmptyTable);
        }
        let measures = MeasureSet::new(
            Measure::ALL
                .into_iter()
                .zip(measures_seen)
                .filter_map(|(m, seen)| seen.then_some(m))
                .collect(),
        )?;
        let roi_count = max_roi + 1;
        let n = measures.count();

        let mut values = vec![f64::NAN; subject_order.len() * roi_count * n];
        let subject_idx: BTreeMap<&str, usize> = subject_order
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        for row in &rows {
            let s = subject_idx[row.subject.as_str()];
            let m = measures.index_of(row.measure).unwrap();
            let slot = &mut values[(s * roi_count + row.roi) * n + m];
            if !slot.is_nan() {
                return Err(Error::MalformedRow {
                    file: file.to_string(),
                    line: 0,
                    detail: format!(
                        "duplicate entry for subject {}, roi {}, measure {}",
                        row.subject, row.roi, row.measure
                    ),
                });
            }
            *slot = row.value;
        }
        for (i, v) in values.iter().enumerate() {
            if v.is_nan() {
                let s = i / (roi_count * n);
                let roi = (i / n) % roi_count;
                let m = i % n;
                return Err(Error::MissingEntry {
                    subject: subject_order[s].clone(),
                    roi,
                    measure: measures.measures()[m].name().to_string(),
                });
            }
        }
        Self::new(subject_order, roi_count, measures, values)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, &path.display().to_string())
    }

    /// Write in the same CSV schema `read_csv` accepts, rows ordered by
    /// (subject, roi, measure).
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["subject_id", "roi_index", "measure_name", "value"])?;
        let n = self.measures.count();
        for (s, id) in self.subject_ids.iter().enumerate() {
            for roi in 0..self.roi_count {
                for (m, measure) in self.measures.measures().iter().enumerate() {
                    wtr.write_record([
                        id.as_str(),
                        &roi.to_string(),
                        measure.name(),
                        &self.values[(s * self.roi_count + roi) * n + m].to_string(),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// K vectors ψ^k of length N, normalized componentwise to \[0,1\].
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDescriptorSet {
    pub psi: Vec<Vec<f64>>,
}

/// N vectors ω^j of length K, raw measure values.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptorSet {
    pub omega: Vec<Vec<f64>>,
}

/// Min-max statistics per (roi, measure) column, fit on pretraining data.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    roi_count: usize,
    measures: MeasureSet,
    mins: Vec<f64>,
    maxs: Vec<f64>,
}

impl NormalizationStats {
    pub fn roi_count(&self) -> usize {
        self.roi_count
    }

    pub fn measures(&self) -> &MeasureSet {
        &self.measures
    }

    /// Map a raw value into \[0,1\]; out-of-range values clamp, constant
    /// columns map to 0.5.
    pub fn apply(&self, roi: usize, measure: usize, v: f64) -> f64 {
        let i = roi * self.measures.count() + measure;
        let (lo, hi) = (self.mins[i], self.maxs[i]);
        if hi > lo {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }
}

/// Fit min-max normalization on every (roi, measure) column of `table`.
pub fn fit_normalizer(table: &RoiTable) -> Result<NormalizationStats> {
    if table.subject_ids().is_empty() {
        return Err(Error::EmptyTable);
    }
    let (k, n) = (table.roi_count(), table.measures().count());
    let mut mins = vec![f64::INFINITY; k * n];
    let mut maxs = vec![f64::NEG_INFINITY; k * n];
    for s in 0..table.subject_ids().len() {
        for roi in 0..k {
            for m in 0..n {
                let v = table.value(s, roi, m);
                let i = roi * n + m;
                mins[i] = mins[i].min(v);
                maxs[i] = maxs[i].max(v);
            }
        }
    }
    Ok(NormalizationStats {
        roi_count: k,
        measures: table.measures().clone(),
        mins,
        maxs,
    })
}

/// Normalized per-region descriptors ψ^k for one subject.
pub fn local_descriptors(
    table: &RoiTable,
    subject: &str,
    stats: &NormalizationStats,
) -> Result<LocalDescriptorSet> {
    if stats.roi_count() != table.roi_count() || stats.measures() != table.measures() {
        return Err(Error::AtlasMismatch {
            expected: format!(
                "{} ROIs x {} measures",
                stats.roi_count(),
                stats.measures().count()
            ),
            actual: format!(
                "{} ROIs x {} measures",
                table.roi_count(),
                table.measures().count()
            ),
        });
    }
    let s = table.subject_index(subject)?;
    let (k, n) = (table.roi_count(), table.measures().count());
    let psi = (0..k)
        .map(|roi| {
            (0..n)
                .map(|m| stats.apply(roi, m, table.value(s, roi, m)))
                .collect()
        })
        .collect();
    Ok(LocalDescriptorSet { psi })
}

/// Raw per-measure descriptors ω^j for one subject.
pub fn global_descriptors(table: &RoiTable, subject: &str) -> Result<GlobalDescriptorSet> {
    let s = table.subject_index(subject)?;
    let (k, n) = (table.roi_count(), table.measures().count());
    let omega = (0..n)
        .map(|m| (0..k).map(|roi| table.value(s, roi, m)).collect())
        .collect();
    Ok(GlobalDescriptorSet { omega })
}

/// Cosine similarity, clamped to [-1, 1]. Bitwise-identical inputs return
/// exactly 1 so self-degrees are exact.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let zero = |x: &[f64]| x.iter().all(|v| *v == 0.0);
    if zero(u) || zero(v) {
        return Err(Error::ZeroVector);
    }
    if u == v {
        return Ok(1.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Per-term similarity inside a degree mean. Min-max normalization sends
/// every column minimum to 0, so a subject sitting at the minimum of all
/// measures of one ROI has a legitimately all-zero ψ^k; such a vector
/// carries no similarity evidence and contributes 0 rather than an error.
fn similarity_or_zero(u: &[f64], v: &[f64]) -> Result<f64> {
    let zero = |x: &[f64]| x.iter().all(|v| *v == 0.0);
    if zero(u) || zero(v) {
        return Ok(0.0);
    }
    cosine(u, v)
}

/// Local degree α: average cosine of the per-region descriptors.
pub fn local_degree(a: &LocalDescriptorSet, b: &LocalDescriptorSet) -> Result<f64> {
    if a.psi.len() != b.psi.len() {
        return Err(Error::DimensionMismatch(format!(
            "ROI counts {} vs {}",
            a.psi.len(),
            b.psi.len()
        )));
    }
    if a.psi.is_empty() {
        return Err(Error::DimensionMismatch("empty descriptor set".into()));
    }
    if a.psi == b.psi {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for (pa, pb) in a.psi.iter().zip(&b.psi) {
        total += similarity_or_zero(pa, pb)?;
    }
    Ok(total / a.psi.len() as f64)
}

/// Global degree β: average cosine of the per-measure descriptors.
pub fn global_degree(a: &GlobalDescriptorSet, b: &GlobalDescriptorSet) -> Result<f64> {
    if a.omega.len() != b.omega.len() {
        return Err(Error::DimensionMismatch(format!(
            "measure counts {} vs {}",
            a.omega.len(),
            b.omega.len()
        )));
    }
    if a.omega.is_empty() {
        return Err(Error::DimensionMismatch("empty descriptor set".into()));
    }
    if a.omega == b.omega {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for (oa, ob) in a.omega.iter().zip(&b.omega) {
        total += similarity_or_zero(oa, ob)?;
    }
    Ok(total / a.omega.len() as f64)
}

/// Which degree a pairwise matrix holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegreeMode {
    Local,
    Global,
}

/// Pairwise degree matrix for a batch of subjects. `stats` is required for
/// `DegreeMode::Local` (γ must already be fit on the pretraining split).
pub fn degree_matrix(
    table: &RoiTable,
    subjects: &[&str],
    mode: DegreeMode,
    stats: Option<&NormalizationStats>,
) -> Result<DegreeMatrix> {
    let b = subjects.len();
    if b < 2 {
        return Err(Error::InvalidConfig(format!(
            "degree matrix needs at least 2 subjects, got {}",
            b
        )));
    }
    let mut values = vec![0.0; b * b];
    match mode {
        DegreeMode::Local => {
            let stats = stats.ok_or_else(|| {
                Error::InvalidConfig("local degree matrix requires normalization stats".into())
            })?;
            let descs: Vec<LocalDescriptorSet> = subjects
                .iter()
                .map(|id| local_descriptors(table, id, stats))
                .collect::<Result<_>>()?;
            for i in 0..b {
                values[i * b + i] = local_degree(&descs[i], &descs[i])?;
                for j in (i + 1)..b {
                    let d = local_degree(&descs[i], &descs[j])?;
                    values[i * b + j] = d;
                    values[j * b + i] = d;
                }
            }
            DegreeMatrix::new(DegreeKind::LocalAnat, b, values)
        }
        DegreeMode::Global => {
            let descs: Vec<GlobalDescriptorSet> = subjects
                .iter()
                .map(|id| global_descriptors(table, id))
                .collect::<Result<_>>()?;
            for i in 0..b {
                values[i * b + i] = global_degree(&descs[i], &descs[i])?;
                for j in (i + 1)..b {
                    let d = global_degree(&descs[i], &descs[j])?;
                    values[i * b + j] = d;
                    values[j * b + i] = d;
                }
            }
            DegreeMatrix::new(DegreeKind::GlobalAnat, b, values)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(subjects: usize, k: usize, measures: MeasureSet, seed: u64) -> RoiTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = measures.count();
        let values = (0..subjects * k * n)
            .map(|_| rng.random_range(0.1..10.0))
            .collect();
        let ids = (0..subjects).map(|i| format!("s{:03}", i)).collect();
        RoiTable::new(ids, k, measures, values).unwrap()
    }

    #[test]
    fn atlas_roi_counts() {
        assert_eq!(Atlas::Desikan.roi_count(), 68);
        assert_eq!(Atlas::Destrieux.roi_count(), 148);
    }

    #[test]
    fn measure_set_rejects_duplicates() {
        assert!(MeasureSet::new(vec![Measure::Gmv, Measure::Gmv]).is_err());
        assert_eq!(MeasureSet::standard_three().count(), 3);
        assert_eq!(MeasureSet::all_seven().count(), 7);
    }

    #[test]
    fn roi_table_rejects_negative_values() {
        let r = RoiTable::new(
            vec!["a".into()],
            1,
            MeasureSet::new(vec![Measure::Gmv]).unwrap(),
            vec![-1.0],
        );
        assert!(matches!(r, Err(Error::DomainError { .. })));
    }

    #[test]
    fn normalizer_midpoint_and_clamp() {
        let ms = MeasureSet::new(vec![Measure::Gmv]).unwrap();
        let t = RoiTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            1,
            ms,
            vec![2.0, 4.0, 6.0],
        )
        .unwrap();
        let stats = fit_normalizer(&t).unwrap();
        assert_abs_diff_eq!(stats.apply(0, 0, 4.0), 0.5);
        assert_abs_diff_eq!(stats.apply(0, 0, 2.0), 0.0);
        assert_abs_diff_eq!(stats.apply(0, 0, 10.0), 1.0);
        assert_abs_diff_eq!(stats.apply(0, 0, 0.0), 0.0);
    }

    #[test]
    fn normalizer_constant_column_maps_to_half() {
        let ms = MeasureSet::new(vec![Measure::Gmv]).unwrap();
        let t = RoiTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            1,
            ms,
            vec![5.0, 5.0, 5.0],
        )
        .unwrap();
        let stats = fit_normalizer(&t).unwrap();
        assert_abs_diff_eq!(stats.apply(0, 0, 5.0), 0.5);
        assert_abs_diff_eq!(stats.apply(0, 0, 99.0), 0.5);
    }

    #[test]
    fn local_descriptors_shape_and_range() {
        let t = table(10, 68, MeasureSet::standard_three(), 7);
        let stats = fit_normalizer(&t).unwrap();
        let d = local_descriptors(&t, "s003", &stats).unwrap();
        assert_eq!(d.psi.len(), 68);
        assert!(d.psi.iter().all(|v| v.len() == 3));
        assert!(d
            .psi
            .iter()
            .flatten()
            .all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn global_descriptors_are_raw_column_slices() {
        let t = table(5, 68, MeasureSet::standard_three(), 8);
        let d = global_descriptors(&t, "s002").unwrap();
        assert_eq!(d.omega.len(), 3);
        assert_eq!(d.omega[1].len(), 68);
        let s = t.subject_index("s002").unwrap();
        for roi in 0..68 {
            assert_eq!(d.omega[1][roi], t.value(s, roi, 1));
        }
    }

    #[test]
    fn unknown_subject_is_reported() {
        let t = table(3, 4, MeasureSet::standard_three(), 9);
        assert!(matches!(
            global_descriptors(&t, "nope"),
            Err(Error::UnknownSubject(_))
        ));
    }

    #[test]
    fn cosine_basics() {
        assert_abs_diff_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            1.0 / 2.0f64.sqrt(),
            epsilon = 1e-12
        );
        let u = [0.3, 0.7, 0.1];
        assert_eq!(cosine(&u, &u).unwrap(), 1.0);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector)
        ));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn local_degree_hand_example() {
        // K=2: A = {[1,0],[1,0]}, B = {[0,1],[1,0]} -> (0 + 1)/2.
        let a = LocalDescriptorSet {
            psi: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        };
        let b = LocalDescriptorSet {
            psi: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        };
        assert_abs_diff_eq!(local_degree(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn zero_roi_contributes_zero_similarity() {
        // Min-max γ zeroes the column-minimum subject; the all-zero ψ^k
        // must count as similarity 0, not break the whole degree.
        let a = LocalDescriptorSet {
            psi: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
        };
        let b = LocalDescriptorSet {
            psi: vec![vec![0.5, 0.5], vec![1.0, 0.0]],
        };
        assert_abs_diff_eq!(local_degree(&a, &b).unwrap(), 0.5);
        assert_eq!(local_degree(&a, &b).unwrap(), local_degree(&b, &a).unwrap());
        // Self-degree stays exactly 1 even with a zero region.
        assert_eq!(local_degree(&a, &a).unwrap(), 1.0);

        let ga = GlobalDescriptorSet {
            omega: vec![vec![0.0, 0.0], vec![2.0, 1.0]],
        };
        let gb = GlobalDescriptorSet {
            omega: vec![vec![1.0, 3.0], vec![2.0, 1.0]],
        };
        assert_abs_diff_eq!(global_degree(&ga, &gb).unwrap(), 0.5);
        assert_eq!(global_degree(&ga, &ga).unwrap(), 1.0);
    }

    #[test]
    fn degrees_match_brute_force_oracle() {
        let t = table(24, 68, MeasureSet::standard_three(), 11);
        let stats = fit_normalizer(&t).unwrap();
        let (a, b) = ("s004", "s017");
        let da = local_descriptors(&t, a, &stats).unwrap();
        let db = local_descriptors(&t, b, &stats).unwrap();
        let alpha = local_degree(&da, &db).unwrap();

        // Independent evaluation straight from the definition.
        let (sa, sb) = (
            t.subject_index(a).unwrap(),
            t.subject_index(b).unwrap(),
        );
        let mut expected = 0.0;
        for roi in 0..68 {
            let u: Vec<f64> = (0..3)
                .map(|m| stats.apply(roi, m, t.value(sa, roi, m)))
                .collect();
            let v: Vec<f64> = (0..3)
                .map(|m| stats.apply(roi, m, t.value(sb, roi, m)))
                .collect();
            let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            expected += dot / (nu * nv);
        }
        expected /= 68.0;
        assert_abs_diff_eq!(alpha, expected, epsilon = 1e-12);

        let ga = global_descriptors(&t, a).unwrap();
        let gb = global_descriptors(&t, b).unwrap();
        let beta = global_degree(&ga, &gb).unwrap();
        let mut expected = 0.0;
        for m in 0..3 {
            let u: Vec<f64> = (0..68).map(|roi| t.value(sa, roi, m)).collect();
            let v: Vec<f64> = (0..68).map(|roi| t.value(sb, roi, m)).collect();
            let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            expected += dot / (nu * nv);
        }
        expected /= 3.0;
        assert_abs_diff_eq!(beta, expected, epsilon = 1e-12);
    }

    #[test]
    fn self_degree_is_exactly_one() {
        let t = table(6, 12, MeasureSet::standard_three(), 13);
        let stats = fit_normalizer(&t).unwrap();
        for id in t.subject_ids() {
            let d = local_descriptors(&t, id, &stats).unwrap();
            assert_eq!(local_degree(&d, &d).unwrap(), 1.0);
            let g = global_descriptors(&t, id).unwrap();
            assert_eq!(global_degree(&g, &g).unwrap(), 1.0);
        }
    }

    #[test]
    fn global_degree_scale_invariance() {
        let t = table(4, 30, MeasureSet::standard_three(), 17);
        let ga = global_descriptors(&t, "s000").unwrap();
        let gb = global_descriptors(&t, "s001").unwrap();
        let beta = global_degree(&ga, &gb).unwrap();
        let scaled = GlobalDescriptorSet {
            omega: ga.omega.iter().map(|v| v.iter().map(|x| 3.7 * x).collect()).collect(),
        };
        let beta2 = global_degree(&scaled, &gb).unwrap();
        assert_abs_diff_eq!(beta, beta2, epsilon = 1e-12);
    }

    #[test]
    fn degree_matrix_symmetric_unit_diagonal() {
        let t = table(8, 20, MeasureSet::standard_three(), 19);
        let stats = fit_normalizer(&t).unwrap();
        let ids: Vec<&str> = t.subject_ids().iter().map(String::as_str).collect();
        for mode in [DegreeMode::Local, DegreeMode::Global] {
            let m = degree_matrix(&t, &ids, mode, Some(&stats)).unwrap();
            for i in 0..8 {
                assert_eq!(m.get(i, i), 1.0);
                for j in 0..8 {
                    assert_eq!(m.get(i, j), m.get(j, i));
                    assert!((0.0..=1.0).contains(&m.get(i, j)));
                }
            }
        }
        let pair = degree_matrix(&t, &ids[..2], DegreeMode::Local, Some(&stats)).unwrap();
        let da = local_descriptors(&t, ids[0], &stats).unwrap();
        let db = local_descriptors(&t, ids[1], &stats).unwrap();
        assert_eq!(pair.get(0, 1), local_degree(&da, &db).unwrap());
    }

    #[test]
    fn local_matrix_requires_stats() {
        let t = table(3, 5, MeasureSet::standard_three(), 23);
        let ids: Vec<&str> = t.subject_ids().iter().map(String::as_str).collect();
        assert!(matches!(
            degree_matrix(&t, &ids, DegreeMode::Local, None),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let t = table(5, 7, MeasureSet::standard_three(), 29);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = RoiTable::read_csv(buf.as_slice(), "mem").unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn csv_rejects_missing_combination() {
        let csv = "subject_id,roi_index,measure_name,value\n\
                   a,0,gmv,1.0\na,1,gmv,2.0\nb,0,gmv,3.0\n";
        match RoiTable::read_csv(csv.as_bytes(), "mem") {
            Err(Error::MissingEntry { subject, roi, .. }) => {
                assert_eq!(subject, "b");
                assert_eq!(roi, 1);
            }
            other => panic!("expected MissingEntry, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn csv_rejects_bad_value_with_line() {
        let csv = "subject_id,roi_index,measure_name,value\n\
                   a,0,gmv,1.0\na,1,gmv,oops\n";
        match RoiTable::read_csv(csv.as_bytes(), "mem") {
            Err(Error::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected MalformedRow, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn csv_rejects_duplicate_entry() {
        let csv = "subject_id,roi_index,measure_name,value\n\
                   a,0,gmv,1.0\na,0,gmv,2.0\n";
        assert!(matches!(
            RoiTable::read_csv(csv.as_bytes(), "mem"),
            Err(Error::MalformedRow { .. })
        ));
    }
}
