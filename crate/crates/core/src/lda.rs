//! Baseline classifier: PCA dimensionality reduction followed by a
//! least-squares linear discriminant with Ledoit-Wolf covariance
//! shrinkage.
//!
//! Spectrograms are flattened row-major (time-major) to vectors of
//! length 94*129 = 12126 before projection.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1};

use crate::detector::Scorer;
use crate::error::{Error, Result};
use crate::eval::LabeledSample;
use crate::signal::Spectrogram;

/// Flattened spectrogram length the pipeline expects.
pub const FLAT_LEN: usize = 94 * 129;

/// Mean and orthonormal principal directions of a training matrix.
#[derive(Debug, Clone)]
pub struct PcaModel {
    /// Feature means, length p.
    pub mean: Array1<f64>,
    /// Principal components as rows, shape (d, p), orthonormal.
    pub components: Array2<f64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    /// Project a feature vector: components * (x - mean).
    pub fn project(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let centered = &x - &self.mean;
        self.components.dot(&centered)
    }

    /// Keep only the first `d` components (they are nested).
    pub fn truncated(&self, d: usize) -> PcaModel {
        PcaModel {
            mean: self.mean.clone(),
            components: self.components.slice(ndarray::s![..d, ..]).to_owned(),
        }
    }
}

/// Fitted linear discriminant in the projected space.
#[derive(Debug, Clone)]
pub struct LdaModel {
    pub weights: Array1<f64>,
    pub bias: f64,
    /// Projected class means, negative then positive.
    pub class_means: [Array1<f64>; 2],
    /// Shrunk pooled within-class covariance.
    pub shrunk_cov: Array2<f64>,
    /// Ledoit-Wolf shrinkage intensity in [0, 1].
    pub shrinkage: f64,
}

/// Principal component analysis of the rows of `x`, keeping `d`
/// components ordered by decreasing variance.
///
/// The n x n Gram matrix is used when n < p, so fitting wide matrices
/// (p = 12126) stays tractable. The sign of each component is fixed so
/// its largest-magnitude entry is positive.
pub fn fit_pca(x: &Array2<f64>, d: usize) -> Result<PcaModel> {
    let (n, p) = x.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 2 samples, got {n}"
        )));
    }
    if d == 0 || d > n.min(p) {
        return Err(Error::InvalidArgument(format!(
            "PCA dimensionality {d} out of range [1, {}]",
            n.min(p)
        )));
    }

    let mean: Array1<f64> = x.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let centered = x - &mean.view().insert_axis(ndarray::Axis(0));

    let mut components = Array2::zeros((d, p));
    if n <= p {
        // Gram trick: eigenvectors u of Xc Xc^T give components
        // v = Xc^T u / sqrt(lambda).
        let gram = centered.dot(&centered.t());
        let gm = DMatrix::from_row_iterator(n, n, gram.iter().cloned());
        let eig = gm.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let lead = eig.eigenvalues[order[0]].max(0.0);
        if lead <= 1e-12 {
            return Err(Error::DegenerateInput(
                "all samples identical: zero-variance training matrix".into(),
            ));
        }
        for (row, &idx) in order.iter().take(d).enumerate() {
            let lambda = eig.eigenvalues[idx];
            if lambda <= 1e-12 * lead {
                return Err(Error::DegenerateInput(format!(
                    "training matrix rank < requested dimensionality {d}"
                )));
            }
            let u = eig.eigenvectors.column(idx);
            let scale = 1.0 / lambda.sqrt();
            for i in 0..p {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += centered[[k, i]] * u[k];
                }
                components[[row, i]] = acc * scale;
            }
        }
    } else {
        let cov = centered.t().dot(&centered);
        let cm = DMatrix::from_row_iterator(p, p, cov.iter().cloned());
        let eig = cm.symmetric_eigen();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let lead = eig.eigenvalues[order[0]].max(0.0);
        if lead <= 1e-12 {
            return Err(Error::DegenerateInput(
                "all samples identical: zero-variance training matrix".into(),
            ));
        }
        for (row, &idx) in order.iter().take(d).enumerate() {
            if eig.eigenvalues[idx] <= 1e-12 * lead {
                return Err(Error::DegenerateInput(format!(
                    "training matrix rank < requested dimensionality {d}"
                )));
            }
            for i in 0..p {
                components[[row, i]] = eig.eigenvectors[(i, idx)];
            }
        }
    }

    // Deterministic sign: largest-magnitude entry of each component is
    // positive.
    for mut row in components.rows_mut() {
        let mut best = 0;
        for i in 1..p {
            if row[i].abs() > row[best].abs() {
                best = i;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }

    Ok(PcaModel { mean, components })
}

/// Ledoit-Wolf shrunk covariance of centered rows:
/// `(1 - lambda) S + lambda (trace(S)/d) I` with the closed-form optimal
/// intensity clipped to [0, 1]. A zero sample covariance yields
/// lambda = 1 and an all-zero matrix (callers needing an invertible
/// covariance must reject it).
pub fn ledoit_wolf_cov(x_centered: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    let (n, d) = x_centered.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance estimation needs at least 2 samples, got {n}"
        )));
    }
    let nf = n as f64;
    let df = d as f64;
    let sample_cov = x_centered.t().dot(x_centered) / nf;
    let mu = sample_cov.diag().sum() / df;
    let cov_frob2: f64 = sample_cov.iter().map(|v| v * v).sum();

    // delta^2 = ||S - mu I||_F^2 / d
    let delta = (cov_frob2 - df * mu * mu) / df;
    // beta_bar^2 = (1/(n^2 d)) sum_k ||x_k||^4 - ||S||_F^2 / (n d)
    let sum4: f64 = x_centered
        .rows()
        .into_iter()
        .map(|r| {
            let s: f64 = r.iter().map(|v| v * v).sum();
            s * s
        })
        .sum();
    let beta_bar = (sum4 / (nf * nf) - cov_frob2 / nf) / df;

    let trace = mu * df;
    let lambda = if trace <= 1e-300 {
        1.0
    } else if delta <= 0.0 {
        0.0
    } else {
        (beta_bar.min(delta) / delta).clamp(0.0, 1.0)
    };

    let mut shrunk = sample_cov * (1.0 - lambda);
    for i in 0..d {
        shrunk[[i, i]] += lambda * mu;
    }
    Ok((shrunk, lambda))
}

/// Fit the discriminant on projected data: solve
/// `shrunk_cov * w = mu_pos - mu_neg`, with the bias placing the
/// decision midpoint at zero adjusted by log class priors.
pub fn fit_lda(z: &Array2<f64>, y: &[bool]) -> Result<LdaModel> {
    let (n, d) = z.dim();
    if n != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{n} rows but {} labels",
            y.len()
        )));
    }
    let n_pos = y.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateInput(
            "both classes must be present".into(),
        ));
    }

    let mut mean_neg = Array1::<f64>::zeros(d);
    let mut mean_pos = Array1::<f64>::zeros(d);
    for (row, &label) in z.rows().into_iter().zip(y) {
        if label {
            mean_pos += &row;
        } else {
            mean_neg += &row;
        }
    }
    mean_pos /= n_pos as f64;
    mean_neg /= n_neg as f64;

    // Pooled within-class scatter: center each row by its class mean.
    let mut within = z.clone();
    for (mut row, &label) in within.rows_mut().into_iter().zip(y) {
        row -= if label { &mean_pos } else { &mean_neg };
    }
    let (shrunk_cov, shrinkage) = ledoit_wolf_cov(&within)?;

    let cov = DMatrix::from_row_iterator(d, d, shrunk_cov.iter().cloned());
    let chol = nalgebra::linalg::Cholesky::new(cov).ok_or_else(|| {
        Error::SingularCovariance(
            "shrunk within-class covariance is not positive-definite".into(),
        )
    })?;
    let diff = DVector::from_iterator(d, (&mean_pos - &mean_neg).iter().cloned());
    let w = chol.solve(&diff);

    let weights = Array1::from_iter(w.iter().cloned());
    let midpoint = (&mean_pos + &mean_neg) * 0.5;
    let bias = -weights.dot(&midpoint) + (n_pos as f64 / n_neg as f64).ln();

    Ok(LdaModel {
        weights,
        bias,
        class_means: [mean_neg, mean_pos],
        shrunk_cov,
        shrinkage,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Complete scoring pipeline: flatten, center, project, linear score,
/// logistic map to [0, 1].
#[derive(Debug, Clone)]
pub struct LdaScorer {
    pub mean: Array1<f64>,
    pub components: Array2<f64>,
    pub weights: Array1<f64>,
    pub bias: f64,
    pub shrinkage: f64,
}

impl LdaScorer {
    pub fn from_parts(pca: &PcaModel, lda: &LdaModel) -> Self {
        Self {
            mean: pca.mean.clone(),
            components: pca.components.clone(),
            weights: lda.weights.clone(),
            bias: lda.bias,
            shrinkage: lda.shrinkage,
        }
    }

    /// Score a flattened feature vector.
    pub fn score_flat(&self, flat: ArrayView1<f64>) -> Result<f64> {
        if flat.len() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} features, got {}",
                self.mean.len(),
                flat.len()
            )));
        }
        let centered = &flat - &self.mean;
        let z = self.components.dot(&centered);
        Ok(sigmoid(self.weights.dot(&z) + self.bias))
    }

    /// Persist as flat binary: magic "LDA1", u32 p, u32 d, PCA mean and
    /// components, LDA weights, bias, and shrinkage, all little-endian
    /// f64.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(b"LDA1").map_err(io_err)?;
        let p = self.mean.len() as u32;
        let d = self.components.nrows() as u32;
        w.write_all(&p.to_le_bytes()).map_err(io_err)?;
        w.write_all(&d.to_le_bytes()).map_err(io_err)?;
        for v in self
            .mean
            .iter()
            .chain(self.components.iter())
            .chain(self.weights.iter())
        {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        w.write_all(&self.bias.to_le_bytes()).map_err(io_err)?;
        w.write_all(&self.shrinkage.to_le_bytes()).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != b"LDA1" {
            return Err(Error::MalformedModel {
                path: path.to_path_buf(),
                detail: "bad magic, expected LDA1".into(),
            });
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut read_f64 = |r: &mut BufReader<File>| -> Result<f64> {
            r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
            Ok(f64::from_le_bytes(b8))
        };
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        let p = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        let d = u32::from_le_bytes(b4) as usize;
        if p == 0 || d == 0 || d > p {
            return Err(Error::MalformedModel {
                path: path.to_path_buf(),
                detail: format!("implausible dimensions p={p} d={d}"),
            });
        }
        let mut mean = Array1::zeros(p);
        for v in mean.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let mut components = Array2::zeros((d, p));
        for v in components.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let mut weights = Array1::zeros(d);
        for v in weights.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let bias = read_f64(&mut r)?;
        let shrinkage = read_f64(&mut r)?;
        Ok(Self {
            mean,
            components,
            weights,
            bias,
            shrinkage,
        })
    }
}

impl Scorer for LdaScorer {
    fn score(&self, spec: &Spectrogram) -> Result<f64> {
        if spec.values.len() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram {}x{} does not flatten to {} features",
                spec.n_time(),
                spec.n_freq(),
                self.mean.len()
            )));
        }
        let flat = flatten(spec);
        self.score_flat(flat.view())
    }
}

/// Row-major (time-major) flattening, fixed project-wide.
pub fn flatten(spec: &Spectrogram) -> Array1<f64> {
    Array1::from_iter(spec.values.iter().cloned())
}

/// Score a spectrogram with a fitted PCA+LDA pair.
pub fn lda_score(pca: &PcaModel, lda: &LdaModel, spec: &Spectrogram) -> Result<f64> {
    LdaScorer::from_parts(pca, lda).score(spec)
}

fn f1_from_predictions(pred: &[bool], truth: &[bool]) -> f64 {
    let tp = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| p && t)
        .count() as f64;
    let fp = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| p && !t)
        .count() as f64;
    let fn_ = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| !p && t)
        .count() as f64;
    if 2.0 * tp + fp + fn_ == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

/// Build the flattened data matrix of a sample set.
pub fn flatten_samples(samples: &[LabeledSample]) -> (Array2<f64>, Vec<bool>) {
    let p = samples
        .first()
        .map(|s| s.spectrogram.values.len())
        .unwrap_or(0);
    let mut x = Array2::zeros((samples.len(), p));
    for (i, s) in samples.iter().enumerate() {
        for (j, v) in s.spectrogram.values.iter().enumerate() {
            x[[i, j]] = *v;
        }
    }
    let y = samples.iter().map(|s| s.label).collect();
    (x, y)
}

/// Pick the PCA dimensionality maximizing validation F1 on a seeded
/// 85:15 random split; ties go to the smallest candidate.
pub fn select_pca_dim(
    samples: &[LabeledSample],
    candidates: &[usize],
    seed: u64,
) -> Result<usize> {
    use rand::prelude::*;

    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty candidate list".into()));
    }
    let n = samples.len();
    if n < 4 {
        return Err(Error::DegenerateInput(
            "need at least 4 samples to split for dimension selection".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (((n as f64) * 0.85).round() as usize).clamp(2, n - 1);
    let (train_idx, val_idx) = idx.split_at(n_train);

    let train: Vec<LabeledSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let val: Vec<LabeledSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let (x_train, y_train) = flatten_samples(&train);
    let (x_val, y_val) = flatten_samples(&val);

    let p = x_train.ncols();
    let mut valid: Vec<usize> = candidates
        .iter()
        .cloned()
        .filter(|&d| d >= 1 && d <= n_train.min(p))
        .collect();
    valid.sort_unstable();
    valid.dedup();
    if valid.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no candidate dimensionality fits the data (max {})",
            n_train.min(p)
        )));
    }

    let full = fit_pca(&x_train, *valid.last().unwrap())?;
    let mut best: Option<(usize, f64)> = None;
    for &d in &valid {
        let pca = full.truncated(d);
        let z_train = project_matrix(&pca, &x_train);
        let lda = match fit_lda(&z_train, &y_train) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let scorer = LdaScorer::from_parts(&pca, &lda);
        let pred: Vec<bool> = x_val
            .rows()
            .into_iter()
            .map(|r| scorer.score_flat(r).map(|s| s >= 0.5))
            .collect::<Result<_>>()?;
        let f1 = f1_from_predictions(&pred, &y_val);
        match best {
            Some((_, best_f1)) if f1 <= best_f1 => {}
            _ => best = Some((d, f1)),
        }
    }
    best.map(|(d, _)| d).ok_or_else(|| {
        Error::DegenerateInput("no candidate produced a usable discriminant".into())
    })
}

/// Project every row of a data matrix.
pub fn project_matrix(pca: &PcaModel, x: &Array2<f64>) -> Array2<f64> {
    let centered = x - &pca.mean.view().insert_axis(ndarray::Axis(0));
    centered.dot(&pca.components.t())
}

/// Fit the full PCA+LDA pipeline on labeled samples at dimensionality
/// `d`, returning the deployable scorer and the fitted parts.
pub fn fit_pipeline(
    samples: &[LabeledSample],
    d: usize,
) -> Result<(LdaScorer, PcaModel, LdaModel)> {
    let (x, y) = flatten_samples(samples);
    let pca = fit_pca(&x, d)?;
    let z = project_matrix(&pca, &x);
    let lda = fit_lda(&z, &y)?;
    Ok((LdaScorer::from_parts(&pca, &lda), pca, lda))
}
