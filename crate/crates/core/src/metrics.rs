//! Fréchet distance between fitted Gaussians and a pixel-level alignment
//! oracle for synthetic scenes.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::par::Exec;
use crate::synth::{glyph_mask, Color, SceneSpec, Shape, GRID, IMAGE_SIDE};

const EIG_CLAMP: f64 = -1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features`.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::data(format!("need at least 2 feature rows, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::shape("gaussian_stats", "ragged feature rows"));
    }
    let mut mean = DVector::zeros(d);
    for r in features {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in features {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok(GaussianStats { mean, cov, n })
}

/// Square roots of eigenvalues, with values below the numerical rank
/// threshold treated as zero.
fn eig_sqrt(vals: &DVector<f64>) -> DVector<f64> {
    let top = vals.amax();
    let floor = top * vals.len() as f64 * f64::EPSILON;
    vals.map(|l| if l < EIG_CLAMP || l <= floor { 0.0 } else { l.sqrt() })
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig_sqrt(&eig.eigenvalues);
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", format!("dimension {} vs {}", a.dim(), b.dim())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    // Tr (S_a S_b)^(1/2) is the nuclear norm of S_a^(1/2) S_b^(1/2); the SVD
    // avoids squaring small eigenvalues below working precision.
    let prod = sym_sqrt(&a.cov) * sym_sqrt(&b.cov);
    let tr_sqrt: f64 = prod.singular_values().sum();
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// FID between two image sets under `feature_fn`.
pub fn fid<F>(images_a: &[Image], images_b: &[Image], feature_fn: F, exec: Exec) -> Result<f64>
where
    F: Fn(&Image) -> Vec<f64> + Sync + Send,
{
    let fa = exec.map(images_a, &feature_fn);
    let fb = exec.map(images_b, &feature_fn);
    frechet_distance(&gaussian_stats(&fa)?, &gaussian_stats(&fb)?)
}

/// Pixels further than this from white in any channel count as ink.
const INK_THRESHOLD: f32 = 0.25;
/// Fraction of a cell that must be ink for it to count as occupied.
const OCCUPIED_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AssertionKind {
    Cell,
    Shape,
    Color,
    Layout,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assertion {
    pub kind: AssertionKind,
    /// Object index, `None` for the scene-level layout check.
    pub object: Option<usize>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub assertions: Vec<Assertion>,
}

impl AlignmentReport {
    pub fn score(&self) -> f64 {
        let ok = self.assertions.iter().filter(|a| a.passed).count();
        ok as f64 / self.assertions.len() as f64
    }
}

fn is_ink(px: [f32; 3]) -> bool {
    px.iter().any(|&c| 1.0 - c > INK_THRESHOLD)
}

struct CellReading {
    occupied: bool,
    shape: Shape,
    color: Color,
}

fn read_cell(image: &Image, row: usize, col: usize, masks: &[(Shape, Vec<bool>)]) -> CellReading {
    let cell = image.height() / GRID;
    let (y0, x0) = (row * cell, col * cell);
    let mut ink = Vec::with_capacity(cell * cell);
    let mut votes = [0usize; Color::ALL.len()];
    for y in 0..cell {
        for x in 0..cell {
            let px = image.pixel(y0 + y, x0 + x);
            let on = is_ink(px);
            ink.push(on);
            if on {
                let c = Color::nearest(px);
                votes[Color::ALL.iter().position(|&p| p == c).unwrap()] += 1;
            }
        }
    }
    let count = ink.iter().filter(|&&b| b).count();
    let occupied = count as f64 / (cell * cell) as f64 > OCCUPIED_FRACTION;
    let iou = |m: &[bool]| {
        let inter = m.iter().zip(&ink).filter(|(a, b)| **a && **b).count();
        let union = m.iter().zip(&ink).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    };
    let mut shape = masks[0].0;
    let mut best = f64::NEG_INFINITY;
    for (s, m) in masks {
        let v = iou(m);
        if v > best {
            best = v;
            shape = *s;
        }
    }
    // Ties resolve to the earliest palette entry.
    let mut color = Color::ALL[0];
    let mut top = 0;
    for (i, &v) in votes.iter().enumerate() {
        if v > top {
            top = v;
            color = Color::ALL[i];
        }
    }
    CellReading { occupied, shape, color }
}

/// Per-object cell/shape/color checks plus one check that exactly the
/// specified cells are occupied.
pub fn alignment_report(image: &Image, spec: &SceneSpec) -> Result<AlignmentReport> {
    if image.height() != IMAGE_SIDE || image.width() != IMAGE_SIDE {
        return Err(Error::shape(
            "alignment_oracle",
            format!("expected {IMAGE_SIDE}x{IMAGE_SIDE}, got {}x{}", image.height(), image.width()),
        ));
    }
    spec.validate()?;
    let cell = IMAGE_SIDE / GRID;
    let masks: Vec<(Shape, Vec<bool>)> = Shape::ALL.iter().map(|&s| (s, glyph_mask(s, cell))).collect();
    let readings: Vec<Vec<CellReading>> =
        (0..GRID).map(|r| (0..GRID).map(|c| read_cell(image, r, c, &masks)).collect()).collect();
    let mut assertions = Vec::new();
    for (i, o) in spec.objects.iter().enumerate() {
        let r = &readings[o.cell.0 as usize][o.cell.1 as usize];
        assertions.push(Assertion { kind: AssertionKind::Cell, object: Some(i), passed: r.occupied });
        assertions.push(Assertion { kind: AssertionKind::Shape, object: Some(i), passed: r.occupied && r.shape == o.shape });
        assertions.push(Assertion { kind: AssertionKind::Color, object: Some(i), passed: r.occupied && r.color == o.color });
    }
    let layout = (0..GRID).all(|r| {
        (0..GRID).all(|c| {
            let wanted = spec.objects.iter().any(|o| o.cell == (r as u8, c as u8));
            readings[r][c].occupied == wanted
        })
    });
    assertions.push(Assertion { kind: AssertionKind::Layout, object: None, passed: layout });
    Ok(AlignmentReport { assertions })
}

/// Fraction of alignment assertions satisfied by `image` for `spec`.
pub fn alignment_oracle(image: &Image, spec: &SceneSpec) -> Result<f64> {
    Ok(alignment_report(image, spec)?.score())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{canonical_specs, render, Relation};

    fn stats1(mean: f64, var: f64) -> GaussianStats {
        GaussianStats { mean: DVector::from_element(1, mean), cov: DMatrix::from_element(1, 1, var), n: 2 }
    }

    #[test]
    fn unbiased_covariance() {
        let s = gaussian_stats(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.cov[(0, 0)], 2.0);
        let z = gaussian_stats(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(z.cov.iter().all(|&v| v == 0.0));
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn one_dimensional_closed_forms() {
        assert!((frechet_distance(&stats1(0.0, 1.0), &stats1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-8);
        assert!((frechet_distance(&stats1(0.0, 1.0), &stats1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-8);
        let a = stats1(0.3, 2.0);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn dimension_mismatch() {
        let b = GaussianStats { mean: DVector::zeros(2), cov: DMatrix::identity(2, 2), n: 2 };
        assert!(frechet_distance(&stats1(0.0, 1.0), &b).is_err());
    }

    #[test]
    fn oracle_is_exact_on_renders() {
        for spec in canonical_specs() {
            let img = render(&spec).unwrap();
            assert_eq!(alignment_oracle(&img, &spec).unwrap(), 1.0, "{spec:?}");
        }
    }

    #[test]
    fn flipped_color_loses_one_assertion() {
        let spec = SceneSpec::pair((Shape::Circle, Color::Red), Relation::Above, (Shape::Square, Color::Blue));
        let img = render(&spec).unwrap();
        let mut wrong = spec.clone();
        wrong.objects[0].color = Color::Green;
        let rep = alignment_report(&img, &wrong).unwrap();
        assert_eq!(rep.assertions.iter().filter(|a| !a.passed).count(), 1);
        assert!(rep.score() < 1.0);
    }

    #[test]
    fn black_image_fails_color_checks() {
        let img = Image::filled(32, 32, [0.0; 3]);
        let spec = SceneSpec::single(Shape::Triangle, Color::Yellow);
        let rep = alignment_report(&img, &spec).unwrap();
        assert!(rep.assertions.iter().filter(|a| a.kind == AssertionKind::Color).all(|a| !a.passed));
        assert!(alignment_oracle(&Image::filled(16, 16, [1.0; 3]), &spec).is_err());
    }
}
