//! Offline bi-level feature extraction from logged residual datasets.
//!
//! The raw bank holds a sine-cosine pair per (input variable, frequency
//! slot) with trainable frequencies. Training alternates sparse amplitude
//! fitting (inner, proximal subgradient steps on an L1 data loss with an
//! L1 penalty) against frequency refinement (outer, subgradient steps on
//! the data loss alone). Selection then scores the trained, amplitude-
//! weighted feature columns by PCA explained variance and keeps the top
//! `selection_count` as the deployable [`FeatureMap`].
//!
//! Everything here is deterministic: the initial frequency grid is fixed,
//! sweeps run in dataset order, and no randomness is used, so identical
//! inputs reproduce identical outputs bit for bit.

use nalgebra::{DMatrix, DVector, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{Feature, FeatureMap, LearnerInput, Trig, INPUT_DIM, RESIDUAL_DIM};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset is empty")]
    Empty,
}

/// One logged sample: learner input and measured residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRecord {
    pub z: LearnerInput,
    pub h: SVector<f64, RESIDUAL_DIM>,
}

/// Residual dataset with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDataset {
    pub records: Vec<ResidualRecord>,
    pub scenario: String,
    pub seed: u64,
}

impl ResidualDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with 13 `z` columns then 12 `h` columns; provenance in comments.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# scenario: {}\n# seed: {}\n", self.scenario, self.seed));
        let mut header: Vec<String> = (0..INPUT_DIM).map(|i| format!("z{i}")).collect();
        header.extend((0..RESIDUAL_DIM).map(|i| format!("h{i}")));
        out.push_str(&header.join(","));
        out.push('\n');
        for rec in &self.records {
            let mut fields: Vec<String> = rec.z.iter().map(|v| format!("{v:e}")).collect();
            fields.extend(rec.h.iter().map(|v| format!("{v:e}")));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, DatasetError> {
        let mut records = Vec::new();
        let mut scenario = String::new();
        let mut seed = 0u64;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("scenario:") {
                    scenario = v.trim().to_string();
                } else if let Some(v) = rest.strip_prefix("seed:") {
                    seed = v.trim().parse().unwrap_or(0);
                }
                continue;
            }
            if line.starts_with("z0") {
                continue; // header
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != INPUT_DIM + RESIDUAL_DIM {
                return Err(DatasetError::Parse {
                    line: lineno + 1,
                    message: format!("expected {} fields, got {}", INPUT_DIM + RESIDUAL_DIM, fields.len()),
                });
            }
            let parse = |s: &str| -> Result<f64, DatasetError> {
                s.trim().parse().map_err(|e| DatasetError::Parse {
                    line: lineno + 1,
                    message: format!("bad number {s}: {e}"),
                })
            };
            let mut z = LearnerInput::zeros();
            for i in 0..INPUT_DIM {
                z[i] = parse(fields[i])?;
            }
            let mut h = SVector::<f64, RESIDUAL_DIM>::zeros();
            for i in 0..RESIDUAL_DIM {
                h[i] = parse(fields[INPUT_DIM + i])?;
            }
            records.push(ResidualRecord { z, h });
        }
        if records.is_empty() {
            return Err(DatasetError::Empty);
        }
        Ok(ResidualDataset {
            records,
            scenario,
            seed,
        })
    }
}

/// Data-loss variant for the bi-level optimization. The amplitude penalty
/// is always L1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataLoss {
    /// Absolute-error loss, the procedural default.
    #[default]
    L1,
    /// Squared-error loss, kept for the convex-inner-problem variant.
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Frequency slots per input variable.
    pub frequencies_per_variable: usize,
    /// Initial frequency grid bounds, rad per unit (log-spaced).
    pub freq_min: f64,
    pub freq_max: f64,
    /// Inner amplitude sweeps per epoch.
    pub inner_steps: usize,
    /// Alternation epochs.
    pub epochs: usize,
    /// Learning rate shared by both levels.
    pub learning_rate: f64,
    /// L1 amplitude penalty.
    pub regularization: f64,
    /// Features kept by the selection stage.
    pub selection_count: usize,
    pub data_loss: DataLoss,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            frequencies_per_variable: 32,
            freq_min: 0.01,
            freq_max: 10.0,
            inner_steps: 4,
            epochs: 6,
            learning_rate: 5e-3,
            regularization: 1e-4,
            selection_count: 30,
            data_loss: DataLoss::L1,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<(), ExtractorError> {
        if self.frequencies_per_variable == 0
            || self.inner_steps == 0
            || self.epochs == 0
            || self.learning_rate <= 0.0
            || self.regularization < 0.0
            || self.selection_count == 0
        {
            return Err(ExtractorError::BadConfig);
        }
        if self.selection_count > 2 * INPUT_DIM * self.frequencies_per_variable {
            return Err(ExtractorError::SelectionTooLarge);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ExtractorError {
    #[error("configuration fields must be positive")]
    BadConfig,
    #[error("selection count exceeds the raw feature bank")]
    SelectionTooLarge,
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Trainable bank: one frequency per (variable, slot), evaluated as a
/// sine-cosine pair. Raw index layout: `2*(variable*M + slot)` for sin,
/// `+1` for cos.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    /// `frequencies[variable][slot]`.
    pub frequencies: Vec<Vec<f64>>,
}

impl FeatureBank {
    /// Log-spaced grid replicated for every input variable.
    pub fn log_grid(config: &ExtractorConfig) -> Self {
        let m = config.frequencies_per_variable;
        let mut grid = Vec::with_capacity(m);
        for j in 0..m {
            let t = if m == 1 { 0.0 } else { j as f64 / (m - 1) as f64 };
            grid.push(config.freq_min * (config.freq_max / config.freq_min).powf(t));
        }
        FeatureBank {
            frequencies: vec![grid; INPUT_DIM],
        }
    }

    pub fn slots(&self) -> usize {
        self.frequencies[0].len()
    }

    pub fn num_raw(&self) -> usize {
        2 * INPUT_DIM * self.slots()
    }

    pub fn raw_index(&self, variable: usize, slot: usize, trig: Trig) -> usize {
        2 * (variable * self.slots() + slot)
            + match trig {
                Trig::Sin => 0,
                Trig::Cos => 1,
            }
    }

    pub fn feature(&self, raw: usize) -> Feature {
        let pair = raw / 2;
        let variable = pair / self.slots();
        let slot = pair % self.slots();
        Feature {
            variable,
            trig: if raw % 2 == 0 { Trig::Sin } else { Trig::Cos },
            frequency: self.frequencies[variable][slot],
        }
    }

    pub fn evaluate_into(&self, z: &LearnerInput, out: &mut DVector<f64>) {
        debug_assert_eq!(out.len(), self.num_raw());
        let m = self.slots();
        for variable in 0..INPUT_DIM {
            let zi = z[variable];
            for slot in 0..m {
                let arg = self.frequencies[variable][slot] * zi;
                let (s, c) = arg.sin_cos();
                let base = 2 * (variable * m + slot);
                out[base] = s;
                out[base + 1] = c;
            }
        }
    }
}

/// Output of [`run_bilevel`].
#[derive(Debug, Clone)]
pub struct BilevelResult {
    pub bank: FeatureBank,
    /// Amplitudes, `num_raw x 12`.
    pub amplitudes: DMatrix<f64>,
    /// Mean data loss evaluated at the end of every epoch, with the
    /// pre-training loss first.
    pub loss_trajectory: Vec<f64>,
}

/// Mean data loss plus the L1 amplitude penalty (the inner objective).
pub fn inner_objective(
    dataset: &ResidualDataset,
    bank: &FeatureBank,
    amplitudes: &DMatrix<f64>,
    config: &ExtractorConfig,
) -> f64 {
    mean_data_loss(dataset, bank, amplitudes, config.data_loss)
        + config.regularization * amplitudes.iter().map(|a| a.abs()).sum::<f64>()
}

/// Mean data loss over the dataset.
pub fn mean_data_loss(
    dataset: &ResidualDataset,
    bank: &FeatureBank,
    amplitudes: &DMatrix<f64>,
    loss: DataLoss,
) -> f64 {
    let mut phi = DVector::zeros(bank.num_raw());
    let mut total = 0.0;
    for rec in &dataset.records {
        bank.evaluate_into(&rec.z, &mut phi);
        let pred = amplitudes.transpose() * &phi;
        let mut acc = 0.0;
        for i in 0..RESIDUAL_DIM {
            let e = pred[i] - rec.h[i];
            acc += match loss {
                DataLoss::L1 => e.abs(),
                DataLoss::L2 => e * e,
            };
        }
        total += acc;
    }
    total / dataset.len() as f64
}

fn residual_gradient_vector(e: f64, loss: DataLoss) -> f64 {
    match loss {
        // Subgradient of |e|, defined as 0 at the kink.
        DataLoss::L1 => {
            if e > 0.0 {
                1.0
            } else if e < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        DataLoss::L2 => 2.0 * e,
    }
}

/// Sparse amplitude fit with frozen frequencies: `sweeps` passes of
/// per-sample proximal subgradient steps. The data term takes an explicit
/// subgradient step; the L1 penalty is applied by soft-thresholding, which
/// realizes the same descent direction without oscillating around zero.
pub fn inner_amplitude_fit(
    dataset: &ResidualDataset,
    bank: &FeatureBank,
    amplitudes: &mut DMatrix<f64>,
    config: &ExtractorConfig,
    sweeps: usize,
) {
    let eta = config.learning_rate;
    let shrink = eta * config.regularization;
    let mut phi = DVector::zeros(bank.num_raw());
    for _ in 0..sweeps {
        for rec in &dataset.records {
            bank.evaluate_into(&rec.z, &mut phi);
            let pred = amplitudes.transpose() * &phi;
            let mut sign = SVector::<f64, RESIDUAL_DIM>::zeros();
            for i in 0..RESIDUAL_DIM {
                sign[i] = residual_gradient_vector(pred[i] - rec.h[i], config.data_loss);
            }
            for row in 0..bank.num_raw() {
                let p = phi[row];
                if p == 0.0 && shrink == 0.0 {
                    continue;
                }
                for col in 0..RESIDUAL_DIM {
                    let stepped = amplitudes[(row, col)] - eta * p * sign[col];
                    amplitudes[(row, col)] = soft_threshold(stepped, shrink);
                }
            }
        }
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// One dataset sweep of subgradient steps on the frequencies with frozen
/// amplitudes. The feature derivative is analytic:
/// `d sin(f z)/df = z cos(f z)`, `d cos(f z)/df = -z sin(f z)`.
pub fn outer_frequency_step(
    dataset: &ResidualDataset,
    bank: &mut FeatureBank,
    amplitudes: &DMatrix<f64>,
    config: &ExtractorConfig,
) {
    let eta = config.learning_rate;
    let m = bank.slots();
    let mut phi = DVector::zeros(bank.num_raw());
    for rec in &dataset.records {
        bank.evaluate_into(&rec.z, &mut phi);
        let pred = amplitudes.transpose() * &phi;
        let mut sign = SVector::<f64, RESIDUAL_DIM>::zeros();
        for i in 0..RESIDUAL_DIM {
            sign[i] = residual_gradient_vector(pred[i] - rec.h[i], config.data_loss);
        }
        for variable in 0..INPUT_DIM {
            let zi = rec.z[variable];
            if zi == 0.0 {
                continue;
            }
            for slot in 0..m {
                let f = bank.frequencies[variable][slot];
                let (s, c) = (f * zi).sin_cos();
                let sin_row = 2 * (variable * m + slot);
                let cos_row = sin_row + 1;
                let mut coupling = 0.0;
                for col in 0..RESIDUAL_DIM {
                    coupling += sign[col]
                        * (amplitudes[(sin_row, col)] * zi * c
                            - amplitudes[(cos_row, col)] * zi * s);
                }
                bank.frequencies[variable][slot] = f - eta * coupling;
            }
        }
    }
}

/// Alternating bi-level optimization over the whole dataset.
pub fn run_bilevel(
    dataset: &ResidualDataset,
    config: &ExtractorConfig,
) -> Result<BilevelResult, ExtractorError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ExtractorError::EmptyDataset);
    }
    let mut bank = FeatureBank::log_grid(config);
    let mut amplitudes = DMatrix::zeros(bank.num_raw(), RESIDUAL_DIM);
    let mut loss_trajectory = vec![mean_data_loss(dataset, &bank, &amplitudes, config.data_loss)];
    for _ in 0..config.epochs {
        inner_amplitude_fit(dataset, &bank, &mut amplitudes, config, config.inner_steps);
        outer_frequency_step(dataset, &mut bank, &amplitudes, config);
        loss_trajectory.push(mean_data_loss(dataset, &bank, &amplitudes, config.data_loss));
    }
    Ok(BilevelResult {
        bank,
        amplitudes,
        loss_trajectory,
    })
}

/// Selection diagnostics.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    /// Per-raw-feature explained-variance scores.
    pub scores: Vec<f64>,
    /// Fewer informative features than requested; selection proceeded and
    /// padded with the remaining indices in order.
    pub rank_deficient: bool,
}

/// Score the trained bank by PCA over the amplitude-weighted feature
/// columns and keep the `count` highest-variance raw features.
///
/// Feature k's column is `|A_k| * phi_k(Z_t)` centered over the dataset;
/// its score is the variance explained by the principal components that
/// cover 95% of the total. Amplitude weighting ties selection to the
/// trained fit: features the sparse fit zeroed out carry no variance and
/// cannot displace informative ones.
pub fn select_features(
    dataset: &ResidualDataset,
    bank: &FeatureBank,
    amplitudes: &DMatrix<f64>,
    count: usize,
) -> Result<(FeatureMap, SelectionReport), ExtractorError> {
    if dataset.is_empty() {
        return Err(ExtractorError::EmptyDataset);
    }
    let n = bank.num_raw();
    if count > n {
        return Err(ExtractorError::SelectionTooLarge);
    }
    let t_len = dataset.len() as f64;

    // Row weights: amplitude magnitude across residual outputs.
    let weights: Vec<f64> = (0..n)
        .map(|k| amplitudes.row(k).iter().map(|a| a.abs()).sum::<f64>())
        .collect();

    // Accumulate mean and second moment of the weighted feature columns.
    let mut mean = DVector::<f64>::zeros(n);
    let mut second = DMatrix::<f64>::zeros(n, n);
    let mut phi = DVector::zeros(n);
    for rec in &dataset.records {
        bank.evaluate_into(&rec.z, &mut phi);
        for k in 0..n {
            phi[k] *= weights[k];
        }
        mean += &phi;
        // Upper triangle only; symmetrized below.
        for i in 0..n {
            let pi = phi[i];
            if pi == 0.0 {
                continue;
            }
            for j in i..n {
                second[(i, j)] += pi * phi[j];
            }
        }
    }
    mean /= t_len;
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let c = second[(i, j)] / t_len - mean[i] * mean[j];
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }

    let informative = (0..n).filter(|&k| cov[(k, k)] > 1e-12).count();
    let rank_deficient = informative < count;

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let total: f64 = eig.eigenvalues.iter().filter(|&&v| v > 0.0).sum();
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for &c in &order {
        if eig.eigenvalues[c] <= 0.0 {
            break;
        }
        kept.push(c);
        cum += eig.eigenvalues[c];
        if total > 0.0 && cum >= 0.95 * total {
            break;
        }
    }

    let mut scores = vec![0.0; n];
    for &c in &kept {
        let lambda = eig.eigenvalues[c];
        for k in 0..n {
            let v = eig.eigenvectors[(k, c)];
            scores[k] += lambda * v * v;
        }
    }

    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = ranked.into_iter().take(count).collect();
    selected.sort_unstable();

    let features: Vec<Feature> = selected.iter().map(|&raw| bank.feature(raw)).collect();
    let map = FeatureMap::new(features).expect("non-empty selection");
    Ok((map, SelectionReport { scores, rank_deficient }))
}
