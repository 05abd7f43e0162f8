//! Teacher-signal construction: adaptive and conventional label smoothing,
//! prototype pseudo-labels in a PCA-reduced feature space, teacher
//! initialisation and the EMA memory bank.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit sum of a probability vector.
pub const PROB_TOLERANCE: f64 = 1e-6;

fn check_prob(values: ArrayView1<f64>, what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!(
            "{what}: entries must be finite and >= 0"
        )));
    }
    let sum: f64 = values.sum();
    if (sum - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::invalid(format!("{what}: sums to {sum}, not 1")));
    }
    Ok(())
}

/// Non-negative vector summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_prob(ArrayView1::from(values.as_slice()), "probability vector")?;
        Ok(Self(values))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        crate::losses::argmax(ArrayView1::from(self.0.as_slice()))
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Matrix whose rows are probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Array2<f64>);

impl ProbMatrix {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        for (i, row) in rows.rows().into_iter().enumerate() {
            check_prob(row, &format!("row {i}"))?;
        }
        Ok(Self(rows))
    }

    pub fn from_rows(rows: &[ProbVector]) -> Result<Self> {
        let k = rows.first().map_or(0, ProbVector::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("probability rows of unequal length"));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
        Ok(Self(
            Array2::from_shape_vec((rows.len(), k), flat).expect("consistent shape"),
        ))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Hyper-parameters of both adaptation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Labels (with confidences) kept from each oracle answer.
    pub r: usize,
    /// Weight of the smoothed oracle prediction in the initial teacher.
    pub beta: f64,
    /// Prototype softmax temperature.
    pub tau: f64,
    /// EMA momentum of the teacher bank.
    pub gamma: f64,
    /// Beta(alpha, alpha) parameter of MixUp.
    pub alpha: f64,
    /// Confidence threshold of the consistency gate.
    pub eta: f64,
    /// Logit-adjustment strength.
    pub rho: f64,
    /// Label smoothing used for the source model and hard-label answers.
    pub epsilon: f64,
    /// Epochs of each adaptation step.
    pub epochs: usize,
    /// PCA dimension for prototypes; `None` means `min(256, n - 1, e)`.
    pub pca_dim: Option<usize>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            r: 1,
            beta: 0.5,
            tau: 0.1,
            gamma: 0.7,
            alpha: 0.3,
            eta: 0.95,
            rho: 0.5,
            epsilon: 0.1,
            epochs: 30,
            pca_dim: None,
        }
    }
}

impl Hyperparams {
    /// Settings used for large-scale benchmarks: fewer epochs, lower gate.
    pub fn large_scale() -> Self {
        Self {
            eta: 0.6,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.r == 0 {
            return Err(Error::invalid("r must be at least 1"));
        }
        if !unit(self.beta) {
            return Err(Error::invalid(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !unit(self.gamma) {
            return Err(Error::invalid(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if !unit(self.epsilon) {
            return Err(Error::invalid(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau {} must be > 0", self.tau)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta {} must be > 0", self.eta)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha {} must be > 0", self.alpha)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid(format!("rho {} must be >= 0", self.rho)));
        }
        if self.pca_dim == Some(0) {
            return Err(Error::invalid("pca_dim must be positive"));
        }
        Ok(())
    }
}

/// Indices of the `r` largest entries, descending, lowest index first on
/// ties.
pub fn top_r_indices(p: &[f64], r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(r);
    idx
}

/// Keep the top-`r` entries of `p` and spread the remaining mass evenly over
/// the other `K - r` classes.
pub fn adaptive_label_smooth(p: &ProbVector, r: usize) -> Result<ProbVector> {
    let top = top_r_indices(p.as_slice(), r);
    let conf: Vec<f64> = top.iter().map(|&i| p.0[i]).collect();
    smooth_top_r(&top, &conf, p.len())
}

/// Adaptive smoothing from a truncated answer: `labels[j]` carries
/// probability `confidences[j]`, everything else shares the remainder.
pub fn smooth_top_r(labels: &[usize], confidences: &[f64], k: usize) -> Result<ProbVector> {
    let r = labels.len();
    if r == 0 || r >= k {
        return Err(Error::invalid(format!(
            "r = {r} must satisfy 1 <= r <= K - 1 = {}",
            k - 1
        )));
    }
    if confidences.len() != r {
        return Err(Error::shape("one confidence per kept label"));
    }
    if labels.iter().any(|&l| l >= k) {
        return Err(Error::invalid("kept label out of range"));
    }
    let kept: f64 = confidences.iter().sum();
    let rest = ((1.0 - kept) / (k - r) as f64).max(0.0);
    let mut out = vec![rest; k];
    for (&l, &c) in labels.iter().zip(confidences) {
        out[l] = c;
    }
    ProbVector::new(out)
}

/// `(1 - epsilon) onehot(label) + epsilon / K`.
pub fn conventional_label_smooth(label: usize, k: usize, epsilon: f64) -> Result<ProbVector> {
    if label >= k {
        return Err(Error::invalid(format!(
            "label {label} out of range for K = {k}"
        )));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut q = vec![epsilon / k as f64; k];
    q[label] += 1.0 - epsilon;
    ProbVector::new(q)
}

pub fn default_pca_dim(n: usize, e: usize) -> usize {
    256.min(n.saturating_sub(1)).min(e).max(1)
}

/// Project centred features onto their top `pca_dim` principal components
/// and L2-normalise each row.
///
/// Component signs are fixed so that the largest-magnitude loading of each
/// component is positive.
pub fn reduce_features(features: ArrayView2<f64>, pca_dim: usize) -> Result<Array2<f64>> {
    let (n, e) = features.dim();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least 2 rows"));
    }
    if pca_dim == 0 || pca_dim > n.min(e) {
        return Err(Error::invalid(format!(
            "pca_dim {pca_dim} must lie in [1, {}]",
            n.min(e)
        )));
    }
    let mean = features.mean_axis(Axis(0)).expect("n >= 2");
    let centred = &features - &mean;
    let cov = centred.t().dot(&centred) / (n - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(e, e, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut basis = Array2::zeros((e, pca_dim));
    for (j, &c) in order.iter().take(pca_dim).enumerate() {
        let col = eig.eigenvectors.column(c);
        let pivot = col.iter().copied().fold(
            0.0f64,
            |best, v| if v.abs() > best.abs() { v } else { best },
        );
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..e {
            basis[[i, j]] = sign * col[i];
        }
    }
    let mut projected = centred.dot(&basis);
    for (i, mut row) in projected.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm <= f64::EPSILON {
            return Err(Error::ZeroNorm(format!(
                "row {i} projects to the zero vector"
            )));
        }
        row /= norm;
    }
    Ok(projected)
}

/// Class centroids weighted by soft assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub matrix: Array2<f64>,
    pub class_mass: Vec<f64>,
}

impl Prototypes {
    pub fn is_defined(&self, k: usize) -> bool {
        self.class_mass[k] > 0.0
    }

    pub fn num_classes(&self) -> usize {
        self.class_mass.len()
    }
}

/// Row `k` is `sum_x w_k(x) f(x) / sum_x w_k(x)`; rows with zero mass stay
/// zero and are reported undefined.
pub fn compute_prototypes(features: ArrayView2<f64>, weights: &ProbMatrix) -> Result<Prototypes> {
    if features.nrows() != weights.nrows() {
        return Err(Error::shape(format!(
            "{} feature rows, {} weight rows",
            features.nrows(),
            weights.nrows()
        )));
    }
    let mass = weights.view().sum_axis(Axis(0));
    let mut matrix = weights.view().t().dot(&features);
    for (mut row, &m) in matrix.rows_mut().into_iter().zip(mass.iter()) {
        if m > 0.0 {
            row /= m;
        }
    }
    Ok(Prototypes {
        matrix,
        class_mass: mass.to_vec(),
    })
}

/// Softmax over defined classes of `-cosine_distance(f, C_k) / tau`;
/// undefined classes get probability zero.
pub fn prototype_pseudo_labels(
    features: ArrayView2<f64>,
    protos: &Prototypes,
    tau: f64,
) -> Result<ProbMatrix> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(format!("tau {tau} must be > 0")));
    }
    if features.ncols() != protos.matrix.ncols() {
        return Err(Error::shape("feature and prototype dimensions differ"));
    }
    let k = protos.num_classes();
    let defined: Vec<usize> = (0..k).filter(|&c| protos.is_defined(c)).collect();
    if defined.is_empty() {
        return Err(Error::invalid("no prototype is defined"));
    }
    let mut unit_protos = Vec::with_capacity(defined.len());
    for &c in &defined {
        let row = protos.matrix.row(c);
        let norm = row.dot(&row).sqrt();
        if norm <= f64::EPSILON {
            return Err(Error::ZeroNorm(format!("prototype {c}")));
        }
        unit_protos.push(&row / norm);
    }
    let mut out = Array2::zeros((features.nrows(), k));
    for (i, f) in features.rows().into_iter().enumerate() {
        let norm = f.dot(&f).sqrt();
        if norm <= f64::EPSILON {
            return Err(Error::ZeroNorm(format!("feature row {i}")));
        }
        let scores: Vec<f64> = unit_protos
            .iter()
            .map(|c| -(1.0 - f.dot(c) / norm) / tau)
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for (&c, s) in defined.iter().zip(&scores) {
            out[[i, c]] = (s - max).exp() / z;
        }
    }
    ProbMatrix::new(out)
}

/// `beta * p_src + (1 - beta) * p_proto`, row-wise.
pub fn blend(p_src: &ProbMatrix, p_proto: &ProbMatrix, beta: f64) -> Result<ProbMatrix> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta {beta} outside [0, 1]")));
    }
    if p_src.view().dim() != p_proto.view().dim() {
        return Err(Error::shape("teacher branches differ in shape"));
    }
    if beta == 1.0 {
        return Ok(p_src.clone());
    }
    if beta == 0.0 {
        return Ok(p_proto.clone());
    }
    ProbMatrix::new(&p_src.view() * beta + &(&p_proto.view() * (1.0 - beta)))
}

/// Per-example teacher distributions, refreshed at epoch boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBank {
    ids: Vec<String>,
    rows: ProbMatrix,
    epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    epoch: usize,
    entries: Vec<BankEntry>,
}

#[derive(Serialize, Deserialize)]
struct BankEntry {
    id: String,
    probs: ProbVector,
}

impl TeacherBank {
    pub fn new(ids: Vec<String>, rows: ProbMatrix) -> Result<Self> {
        if ids.len() != rows.nrows() {
            return Err(Error::shape(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.nrows()
            )));
        }
        Ok(Self {
            ids,
            rows,
            epoch: 0,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &ProbMatrix {
        &self.rows
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Teacher rows for a batch of example positions.
    pub fn select(&self, positions: &[usize]) -> Array2<f64> {
        self.rows.view().select(Axis(0), positions)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BankFile {
            epoch: self.epoch,
            entries: self
                .ids
                .iter()
                .zip(self.rows.view().rows())
                .map(|(id, row)| BankEntry {
                    id: id.clone(),
                    probs: ProbVector(row.to_vec()),
                })
                .collect(),
        };
        fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: BankFile = serde_json::from_str(&text)?;
        let ids = file.entries.iter().map(|e| e.id.clone()).collect();
        let rows: Vec<ProbVector> = file.entries.into_iter().map(|e| e.probs).collect();
        let mut bank = Self::new(ids, ProbMatrix::from_rows(&rows)?)?;
        bank.epoch = file.epoch;
        Ok(bank)
    }
}

/// Initial teacher: convex blend of smoothed oracle predictions and
/// prototype pseudo-labels.
pub fn init_teacher(
    ids: Vec<String>,
    p_src: &ProbMatrix,
    p_proto: &ProbMatrix,
    beta: f64,
) -> Result<TeacherBank> {
    TeacherBank::new(ids, blend(p_src, p_proto, beta)?)
}

/// `P <- gamma P + (1 - gamma) S`, then advance the epoch counter.
pub fn ema_update(
    bank: &mut TeacherBank,
    ids: &[String],
    student: &ProbMatrix,
    gamma: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    if ids != bank.ids.as_slice() {
        return Err(Error::shape(
            "student predictions are not aligned with the bank ids",
        ));
    }
    if student.view().dim() != bank.rows.view().dim() {
        return Err(Error::shape(
            "student predictions differ in shape from the bank",
        ));
    }
    if gamma != 1.0 {
        let next = if gamma == 0.0 {
            student.view().to_owned()
        } else {
            &bank.rows.view() * gamma + &(&student.view() * (1.0 - gamma))
        };
        bank.rows = ProbMatrix::new(next)?;
    }
    bank.epoch += 1;
    Ok(())
}

/// Convenience: probability rows of a logits matrix.
pub fn probs_from_logits(logits: ArrayView2<f64>) -> Result<ProbMatrix> {
    ProbMatrix::new(crate::losses::softmax(logits))
}

/// Uniform distribution as an array, used by tests and priors.
pub fn uniform(k: usize) -> Array1<f64> {
    Array1::from_elem(k, 1.0 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn adals_checkpoints() {
        let out = adaptive_label_smooth(&pv(&[0.4, 0.3, 0.2, 0.1]), 1).unwrap();
        assert!(close(out.as_slice(), &[0.4, 0.2, 0.2, 0.2], 1e-15));
        let out = adaptive_label_smooth(&pv(&[0.7, 0.3]), 1).unwrap();
        assert!(close(out.as_slice(), &[0.7, 0.3], 1e-15));
        let out = adaptive_label_smooth(&pv(&[0.5, 0.2, 0.15, 0.1, 0.05]), 3).unwrap();
        assert!(close(
            out.as_slice(),
            &[0.5, 0.2, 0.15, 0.075, 0.075],
            1e-15
        ));
    }

    #[test]
    fn adals_rejects_bad_r() {
        let p = pv(&[0.5, 0.5]);
        assert!(adaptive_label_smooth(&p, 2).is_err());
        assert!(adaptive_label_smooth(&p, 0).is_err());
    }

    #[test]
    fn conventional_checkpoints() {
        let q = conventional_label_smooth(2, 4, 0.1).unwrap();
        assert!(close(q.as_slice(), &[0.025, 0.025, 0.925, 0.025], 1e-15));
        assert_eq!(
            conventional_label_smooth(1, 3, 0.0).unwrap().as_slice(),
            &[0.0, 1.0, 0.0]
        );
        assert!(close(
            conventional_label_smooth(0, 4, 1.0).unwrap().as_slice(),
            &[0.25; 4],
            1e-15
        ));
        assert!(conventional_label_smooth(4, 4, 0.1).is_err());
    }

    #[test]
    fn prototypes_are_weighted_means() {
        let f = array![[1.0, 0.0], [3.0, 0.0], [0.0, 5.0]];
        let w = ProbMatrix::new(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = compute_prototypes(f.view(), &w).unwrap();
        assert_eq!(p.matrix.row(0).to_vec(), vec![2.0, 0.0]);
        assert_eq!(p.matrix.row(1).to_vec(), vec![0.0, 5.0]);
        assert_eq!(p.class_mass, vec![2.0, 1.0]);
    }

    #[test]
    fn empty_class_is_masked() {
        let f = array![[1.0, 0.0], [0.0, 1.0]];
        let w = ProbMatrix::new(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let p = compute_prototypes(f.view(), &w).unwrap();
        assert!(!p.is_defined(2));
        let pl = prototype_pseudo_labels(f.view(), &p, 0.1).unwrap();
        assert!(pl.view().column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pseudo_label_checkpoint() {
        // cosine distances 0.2 and 0.6 to two prototypes
        let f = array![[1.0, 0.0]];
        let c0 = [0.8, (1.0f64 - 0.64).sqrt()];
        let c1 = [0.4, (1.0f64 - 0.16).sqrt()];
        let protos = Prototypes {
            matrix: array![[c0[0], c0[1]], [c1[0], c1[1]]],
            class_mass: vec![1.0, 1.0],
        };
        let pl = prototype_pseudo_labels(f.view(), &protos, 0.1).unwrap();
        assert!((pl.row(0)[0] - 0.9820).abs() < 1e-4, "{:?}", pl.row(0));
        assert!((pl.row(0)[1] - 0.0180).abs() < 1e-4);
    }

    #[test]
    fn equidistant_feature_is_uniform() {
        let protos = Prototypes {
            matrix: array![[1.0, 0.0], [0.0, 1.0]],
            class_mass: vec![1.0, 1.0],
        };
        let pl = prototype_pseudo_labels(array![[1.0, 1.0]].view(), &protos, 0.1).unwrap();
        assert!(close(pl.row(0).as_slice().unwrap(), &[0.5, 0.5], 1e-15));
    }

    #[test]
    fn sharp_temperature_tends_to_onehot() {
        let protos = Prototypes {
            matrix: array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]],
            class_mass: vec![1.0; 3],
        };
        let pl = prototype_pseudo_labels(array![[2.0, 0.0]].view(), &protos, 1e-3).unwrap();
        assert!(pl.row(0)[0] > 1.0 - 1e-12);
    }

    #[test]
    fn zero_norm_feature_errors() {
        let protos = Prototypes {
            matrix: array![[1.0, 0.0], [0.0, 1.0]],
            class_mass: vec![1.0, 1.0],
        };
        assert!(matches!(
            prototype_pseudo_labels(array![[0.0, 0.0]].view(), &protos, 0.1),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn teacher_endpoints() {
        let a = ProbMatrix::new(array![[1.0, 0.0]]).unwrap();
        let b = ProbMatrix::new(array![[0.0, 1.0]]).unwrap();
        let ids = vec!["x".to_string()];
        assert_eq!(init_teacher(ids.clone(), &a, &b, 1.0).unwrap().rows(), &a);
        assert_eq!(init_teacher(ids.clone(), &a, &b, 0.0).unwrap().rows(), &b);
        let mid = init_teacher(ids, &a, &b, 0.5).unwrap();
        assert_eq!(mid.rows().row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn ema_checkpoints() {
        let ids = vec!["x".to_string()];
        let start = ProbMatrix::new(array![[1.0, 0.0]]).unwrap();
        let student = ProbMatrix::new(array![[0.0, 1.0]]).unwrap();
        let mut bank = TeacherBank::new(ids.clone(), start.clone()).unwrap();
        ema_update(&mut bank, &ids, &student, 0.7).unwrap();
        assert!(close(
            bank.rows().row(0).as_slice().unwrap(),
            &[0.7, 0.3],
            1e-15
        ));
        assert_eq!(bank.epoch(), 1);

        let mut fixed = TeacherBank::new(ids.clone(), start.clone()).unwrap();
        ema_update(&mut fixed, &ids, &student, 1.0).unwrap();
        assert_eq!(fixed.rows(), &start);

        let mut replaced = TeacherBank::new(ids.clone(), start).unwrap();
        ema_update(&mut replaced, &ids, &student, 0.0).unwrap();
        assert_eq!(replaced.rows(), &student);

        let wrong = vec!["y".to_string()];
        assert!(ema_update(&mut replaced, &wrong, &student, 0.5).is_err());
    }

    #[test]
    fn pca_rows_are_unit_norm() {
        let f = Array2::from_shape_fn((20, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let r = reduce_features(f.view(), 3).unwrap();
        assert_eq!(r.dim(), (20, 3));
        for row in r.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(reduce_features(f.view(), 6).is_err());
        assert!(reduce_features(f.slice(ndarray::s![..1, ..]), 1).is_err());
    }

    #[test]
    fn bank_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let mut bank = TeacherBank::new(
            vec!["a".into(), "b".into()],
            ProbMatrix::new(array![[0.1, 0.9], [1.0 / 3.0, 2.0 / 3.0]]).unwrap(),
        )
        .unwrap();
        bank.epoch = 4;
        bank.save(&path).unwrap();
        assert_eq!(TeacherBank::load(&path).unwrap(), bank);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        assert!(Hyperparams {
            beta: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(Hyperparams {
            tau: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(Hyperparams {
            gamma: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        let large = Hyperparams::large_scale();
        assert_eq!((large.eta, large.epochs), (0.6, 10));
    }
}
