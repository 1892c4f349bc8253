//! End-to-end equivariance certificates for segmentation models.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::groups::{act_on_feature_map, rotate_resample, GroupElement, GroupKind, SymmetryGroup};
use crate::tensor::{bilinear_upsample2, Scalar, Tensor};
use crate::unet::UNet;

/// Defect of one transformation, `max_p ‖f(g·x_p) − g·f(x_p)‖₂ / ‖f(x_p)‖₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementDefect {
    pub element: String,
    /// Exact grid symmetry (pixel permutation) versus interpolated rotation.
    pub exact: bool,
    pub defect: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Every exact element is within tolerance.
    Certified,
    /// Some exact element exceeds tolerance.
    Failed,
    /// The model carries no symmetry constraint.
    NoGuarantee,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivarianceReport {
    pub family: GroupKind,
    pub probes: usize,
    pub tolerance: f64,
    pub defects: Vec<ElementDefect>,
}

impl EquivarianceReport {
    pub fn exact(&self) -> impl Iterator<Item = &ElementDefect> {
        self.defects.iter().filter(|d| d.exact)
    }

    pub fn approximate(&self) -> impl Iterator<Item = &ElementDefect> {
        self.defects.iter().filter(|d| !d.exact)
    }

    pub fn max_exact_defect(&self) -> f64 {
        self.exact().map(|d| d.defect).fold(0.0, f64::max)
    }

    pub fn verdict(&self) -> Verdict {
        if self.family == GroupKind::Trivial {
            Verdict::NoGuarantee
        } else if self.exact().all(|d| d.defect < self.tolerance) {
            Verdict::Certified
        } else {
            Verdict::Failed
        }
    }
}

impl fmt::Display for EquivarianceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "family {}: {} probes, tolerance {:.1e}",
            self.family, self.probes, self.tolerance
        )?;
        writeln!(f, "exact grid elements:")?;
        for d in self.exact() {
            let mark = if self.family == GroupKind::Trivial {
                "-"
            } else if d.defect < self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(f, "  {:<8} {:.3e}  {mark}", d.element, d.defect)?;
        }
        if self.approximate().next().is_some() {
            writeln!(f, "approximate (interpolated) elements:")?;
            for d in self.approximate() {
                writeln!(f, "  {:<8} {:.3e}", d.element, d.defect)?;
            }
        }
        let verdict = match self.verdict() {
            Verdict::Certified => "certified",
            Verdict::Failed => "FAILED",
            Verdict::NoGuarantee => "no guarantee: not equivariant by construction",
        };
        write!(f, "status: {verdict}")
    }
}

/// Elements to probe: the model's own group, or the eight grid symmetries
/// for a vanilla model (to measure how far it is from equivariant).
fn probe_elements(family: GroupKind) -> Vec<GroupElement> {
    let kind = if family == GroupKind::Trivial { GroupKind::D4 } else { family };
    SymmetryGroup::new(kind).elements().to_vec()
}

/// Zero outside the disc inscribed in the grid, so that interpolated
/// rotations compare only content that stays inside the frame.
fn disc_mask<T: Scalar>(x: &mut Tensor<T>) {
    let n = x.shape()[x.ndim() - 1];
    let c = (n as f64 - 1.0) / 2.0;
    let r2 = (n as f64 / 2.0 - 1.0).powi(2);
    for plane in x.data_mut().chunks_exact_mut(n * n) {
        for (p, v) in plane.iter_mut().enumerate() {
            let (y, xx) = ((p / n) as f64 - c, (p % n) as f64 - c);
            if y * y + xx * xx > r2 {
                *v = T::zero();
            }
        }
    }
}

fn transform<T: Scalar>(g: &GroupElement, x: &Tensor<T>) -> Result<Tensor<T>> {
    if g.is_exact_grid() {
        act_on_feature_map(g, x)
    } else {
        rotate_resample(x, g.angle_degrees())
    }
}

fn rel_l2<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        num += (x - y) * (x - y);
        den += y * y;
    }
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Low-frequency probes: uniform noise on a grid eight times coarser,
/// bilinearly upsampled. Interpolated rotations of pixel-level noise lose
/// most of its content, so smooth inputs isolate the model's own defect.
fn smooth_probes<T: Scalar>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let [b, c, h, w] = shape;
    let mut x = Tensor::<T>::uniform([b, c, h.div_ceil(8), w.div_ceil(8)], -1.0, 1.0, rng);
    while x.shape()[2] < h {
        x = bilinear_upsample2(&x)?;
    }
    Ok(x)
}

fn max_probe_defect<T: Scalar>(lhs: &Tensor<T>, rhs: &Tensor<T>, probes: usize) -> f64 {
    let per_probe = lhs.len() / probes;
    lhs.data()
        .chunks(per_probe)
        .zip(rhs.data().chunks(per_probe))
        .map(|(a, b)| rel_l2(a, b))
        .fold(0.0, f64::max)
}

/// Eval-mode defects over `probes` random inputs, evaluated as one batch.
/// Exact elements use uniform noise; interpolated ones use smooth probes
/// restricted to the inscribed disc.
pub fn certify<T: Scalar>(model: &UNet<T>, probes: usize, seed: u64, tolerance: f64) -> Result<EquivarianceReport> {
    let cfg = model.config();
    let hw = cfg.input_hw;
    let probes = probes.max(1);
    let shape = [probes, cfg.in_channels, hw, hw];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<T>::uniform(shape, -1.0, 1.0, &mut rng);
    let fx = model.predict(&x)?;
    let mut smooth: Option<(Tensor<T>, Tensor<T>)> = None;
    let mut defects = Vec::new();
    for g in probe_elements(cfg.family) {
        let exact = g.is_exact_grid();
        let defect = if g.is_identity() {
            // f(e·x) is f(x) by definition; nothing to evaluate
            0.0
        } else if exact {
            let lhs = model.predict(&transform(&g, &x)?)?;
            max_probe_defect(&lhs, &transform(&g, &fx)?, probes)
        } else {
            if smooth.is_none() {
                let mut xs = smooth_probes::<T>(shape, &mut rng)?;
                disc_mask(&mut xs);
                let fxs = model.predict(&xs)?;
                smooth = Some((xs, fxs));
            }
            let (xs, fxs) = smooth.as_ref().expect("initialized above");
            let mut lhs = model.predict(&transform(&g, xs)?)?;
            let mut rhs = transform(&g, fxs)?;
            disc_mask(&mut lhs);
            disc_mask(&mut rhs);
            max_probe_defect(&lhs, &rhs, probes)
        };
        defects.push(ElementDefect {
            element: g.to_string(),
            exact,
            defect,
        });
    }
    Ok(EquivarianceReport {
        family: cfg.family,
        probes,
        tolerance,
        defects,
    })
}

/// Default tolerance per precision.
pub fn default_tolerance<T: Scalar>() -> f64 {
    if std::mem::size_of::<T>() == 8 {
        1e-10
    } else {
        1e-4
    }
}
