//! Evaluation metrics: Kabsch-aligned RMSD, lDDT, sequence and nucleotide
//! recovery.

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Error, Result};
use crate::sequence::{argmax_row, Base};
use crate::tensor::Mat;

pub type Point3 = Vector3<f64>;

/// Added once under the square root of the RMSD.
pub const RMSD_EPS: f64 = 1e-6;
pub const LDDT_CUTOFF: f64 = 15.0;
pub const LDDT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Ordered C4′ positions in Å, one per residue.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneCoords(pub Vec<Point3>);

impl BackboneCoords {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid!("backbone needs at least one residue"));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(invalid!("backbone coordinates must be finite"));
        }
        Ok(BackboneCoords(points))
    }

    pub fn from_arrays(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.0
    }

    pub fn centroid(&self) -> Point3 {
        self.0.iter().sum::<Point3>() / self.0.len() as f64
    }

    /// Applies `x ↦ R x + t` to every point.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Point3) -> Self {
        BackboneCoords(self.0.iter().map(|p| rotation * p + translation).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Superposition {
    /// Proper rotation mapping the centred prediction onto the centred truth.
    pub rotation: Matrix3<f64>,
    pub rmsd: f64,
}

/// Optimal proper superposition of `pred` onto `truth`.
pub fn kabsch(truth: &BackboneCoords, pred: &BackboneCoords) -> Result<Superposition> {
    if truth.len() != pred.len() {
        return Err(invalid!(
            "coordinate sets differ in length: {} vs {}",
            truth.len(),
            pred.len()
        ));
    }
    if truth.len() < 3 {
        return Err(Error::Degenerate(format!(
            "Kabsch alignment needs at least 3 points, got {}",
            truth.len()
        )));
    }
    let ct = truth.centroid();
    let cp = pred.centroid();
    let mut h = Matrix3::<f64>::zeros();
    for (p, t) in pred.points().iter().zip(truth.points()) {
        h += (p - cp) * (t - ct).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();

    let n = truth.len() as f64;
    let msd = pred
        .points()
        .iter()
        .zip(truth.points())
        .map(|(p, t)| (rotation * (p - cp) - (t - ct)).norm_squared())
        .sum::<f64>()
        / n;
    Ok(Superposition {
        rotation,
        rmsd: (msd + RMSD_EPS).sqrt(),
    })
}

/// `√(mean squared deviation after alignment + 1e-6)`, in Å.
pub fn kabsch_rmsd(truth: &BackboneCoords, pred: &BackboneCoords) -> Result<f64> {
    kabsch(truth, pred).map(|s| s.rmsd)
}

/// Superposition-free local distance difference test over all residue pairs
/// closer than 15 Å in the reference.
pub fn lddt(truth: &BackboneCoords, pred: &BackboneCoords) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(invalid!(
            "coordinate sets differ in length: {} vs {}",
            truth.len(),
            pred.len()
        ));
    }
    if truth.len() < 2 {
        return Err(Error::UndefinedMetric("lDDT needs at least two residues".into()));
    }
    let (t, p) = (truth.points(), pred.points());
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..t.len() {
        for j in i + 1..t.len() {
            let d_true = (t[i] - t[j]).norm();
            if d_true >= LDDT_CUTOFF {
                continue;
            }
            let dev = (d_true - (p[i] - p[j]).norm()).abs();
            let kept = LDDT_THRESHOLDS.iter().filter(|&&th| dev < th).count();
            total += kept as f64 / LDDT_THRESHOLDS.len() as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedMetric(format!(
            "no residue pairs within {LDDT_CUTOFF} Å of each other"
        )));
    }
    Ok(total / pairs as f64)
}

/// Fraction of positions where the row argmax equals the target base.
pub fn sequence_recovery(target: &[Base], probs: &Mat) -> Result<f64> {
    let (hits, n) = recovery_counts(target, probs)?;
    Ok(hits as f64 / n as f64)
}

fn recovery_counts(target: &[Base], probs: &Mat) -> Result<(usize, usize)> {
    if target.len() != probs.rows() {
        return Err(invalid!(
            "target length {} differs from {} probability rows",
            target.len(),
            probs.rows()
        ));
    }
    if target.is_empty() {
        return Err(invalid!("empty target"));
    }
    if probs.cols() != 4 {
        return Err(invalid!("probability rows must have 4 entries"));
    }
    let hits = target
        .iter()
        .enumerate()
        .filter(|(i, b)| argmax_row(probs.row(*i)) == b.index())
        .count();
    Ok((hits, target.len()))
}

/// Pooled recovery: correct positions over total positions.
pub fn nt_recovery<'a>(items: impl IntoIterator<Item = (&'a [Base], &'a Mat)>) -> Result<f64> {
    let mut hits = 0;
    let mut total = 0;
    for (target, probs) in items {
        let (h, n) = recovery_counts(target, probs)?;
        hits += h;
        total += n;
    }
    if total == 0 {
        return Err(invalid!("nt_recovery needs a non-empty dataset"));
    }
    Ok(hits as f64 / total as f64)
}

/// Unweighted mean of per-sequence recoveries.
pub fn mean_sequence_recovery<'a>(
    items: impl IntoIterator<Item = (&'a [Base], &'a Mat)>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for (target, probs) in items {
        sum += sequence_recovery(target, probs)?;
        count += 1;
    }
    if count == 0 {
        return Err(invalid!("mean recovery needs a non-empty dataset"));
    }
    Ok(sum / count as f64)
}

/// One-hot probability rows for a sequence.
pub fn one_hot(seq: &[Base]) -> Mat {
    let mut m = Mat::zeros(seq.len(), 4);
    for (i, b) in seq.iter().enumerate() {
        m.set(i, b.index(), 1.0);
    }
    m
}
