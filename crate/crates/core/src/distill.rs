//! L1 distillation loss between region embeddings and teacher crop
//! embeddings, with a central-difference gradient check.
//!
//! The temperature multiplies the loss: `T * mean_regions(mean_dims |s - t|)`.

use alloc::vec::Vec;

use thiserror::Error;

use crate::math;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistillError {
    #[error("student has {student} regions, teacher has {teacher}")]
    LengthMismatch { student: usize, teacher: usize },
    #[error("region {index} has dimension {actual}, expected {expected}")]
    DimMismatch { index: usize, expected: usize, actual: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("no regions to compare")]
    Empty,
    #[error("coordinate ({region}, {dim}) sits at a non-differentiable point of the L1 loss")]
    NonSmooth { region: usize, dim: usize },
    #[error("every coordinate was excluded from the gradient check")]
    AllExcluded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdConfig {
    pub temperature: f64,
    pub dim: usize,
}

impl KdConfig {
    pub fn new(temperature: f64, dim: usize) -> Result<Self, DistillError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(DistillError::InvalidTemperature(temperature));
        }
        Ok(KdConfig { temperature, dim })
    }
}

fn check_shapes<S: AsRef<[f64]>, T: AsRef<[f64]>>(
    student: &[S],
    teacher: &[T],
    cfg: &KdConfig,
) -> Result<(), DistillError> {
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(DistillError::InvalidTemperature(cfg.temperature));
    }
    if student.len() != teacher.len() {
        return Err(DistillError::LengthMismatch {
            student: student.len(),
            teacher: teacher.len(),
        });
    }
    if student.is_empty() || cfg.dim == 0 {
        return Err(DistillError::Empty);
    }
    for (index, (s, t)) in student.iter().zip(teacher).enumerate() {
        for actual in [s.as_ref().len(), t.as_ref().len()] {
            if actual != cfg.dim {
                return Err(DistillError::DimMismatch {
                    index,
                    expected: cfg.dim,
                    actual,
                });
            }
        }
    }
    Ok(())
}

pub fn l1_kd_loss<S: AsRef<[f64]>, T: AsRef<[f64]>>(
    student: &[S],
    teacher: &[T],
    cfg: &KdConfig,
) -> Result<f64, DistillError> {
    check_shapes(student, teacher, cfg)?;
    let total: f64 = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            s.as_ref()
                .iter()
                .zip(t.as_ref())
                .map(|(a, b)| math::abs(a - b))
                .sum::<f64>()
        })
        .sum();
    // Scaling last keeps the loss exactly linear in the temperature.
    Ok(cfg.temperature * (total / (student.len() * cfg.dim) as f64))
}

/// Subgradient with respect to the student: `T * sign(s - t) / (N * D)`,
/// zero where the residual vanishes.
pub fn l1_kd_grad<S: AsRef<[f64]>, T: AsRef<[f64]>>(
    student: &[S],
    teacher: &[T],
    cfg: &KdConfig,
) -> Result<Vec<Vec<f64>>, DistillError> {
    check_shapes(student, teacher, cfg)?;
    let scale = cfg.temperature / (student.len() * cfg.dim) as f64;
    Ok(student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            s.as_ref()
                .iter()
                .zip(t.as_ref())
                .map(|(a, b)| match a.partial_cmp(b) {
                    Some(core::cmp::Ordering::Greater) => scale,
                    Some(core::cmp::Ordering::Less) => -scale,
                    _ => 0.0,
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

/// Compare the analytic subgradient with central finite differences.
///
/// Coordinates whose residual is within `10 * epsilon` of zero are skipped
/// when `exclude_non_smooth` is set, and rejected otherwise.
pub fn grad_check<S: AsRef<[f64]>, T: AsRef<[f64]>>(
    student: &[S],
    teacher: &[T],
    cfg: &KdConfig,
    epsilon: f64,
    exclude_non_smooth: bool,
) -> Result<GradCheck, DistillError> {
    let analytic = l1_kd_grad(student, teacher, cfg)?;
    let mut point: Vec<Vec<f64>> = student.iter().map(|s| s.as_ref().to_vec()).collect();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for r in 0..point.len() {
        for d in 0..cfg.dim {
            let orig = point[r][d];
            if math::abs(orig - teacher[r].as_ref()[d]) <= 10.0 * epsilon {
                if !exclude_non_smooth {
                    return Err(DistillError::NonSmooth { region: r, dim: d });
                }
                result.excluded += 1;
                continue;
            }
            point[r][d] = orig + epsilon;
            let plus = l1_kd_loss(&point, teacher, cfg)?;
            point[r][d] = orig - epsilon;
            let minus = l1_kd_loss(&point, teacher, cfg)?;
            point[r][d] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[r][d];
            let denom = math::abs(a).max(math::abs(numeric)).max(f64::MIN_POSITIVE);
            let rel = math::abs(a - numeric) / denom;
            result.max_rel_error = result.max_rel_error.max(rel);
            result.checked += 1;
        }
    }
    if result.checked == 0 {
        return Err(DistillError::AllExcluded);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use alloc::vec;

    fn random(rng: &mut Prng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect()
    }

    #[test]
    fn loss_examples() {
        let mut rng = Prng::new(1);
        let t = random(&mut rng, 4, 8);
        let cfg = KdConfig::new(3.0, 8).unwrap();
        assert_eq!(l1_kd_loss(&t, &t, &cfg).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|v| v + 0.25).collect()).collect();
        assert!((l1_kd_loss(&shifted, &t, &cfg).unwrap() - 0.75).abs() < 1e-12);
        let s = random(&mut rng, 4, 8);
        let one = l1_kd_loss(&s, &t, &KdConfig::new(1.0, 8).unwrap()).unwrap();
        let ten = l1_kd_loss(&s, &t, &KdConfig::new(10.0, 8).unwrap()).unwrap();
        assert_eq!(ten, 10.0 * one);
    }

    #[test]
    fn loss_errors() {
        let cfg = KdConfig::new(1.0, 2).unwrap();
        let a = vec![vec![0.0, 1.0]];
        let b = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(l1_kd_loss(&a, &b, &cfg), Err(DistillError::LengthMismatch { .. })));
        let c = vec![vec![0.0]];
        assert!(matches!(l1_kd_loss(&a, &c, &cfg), Err(DistillError::DimMismatch { .. })));
        assert!(KdConfig::new(0.0, 2).is_err());
    }

    #[test]
    fn gradient_signs() {
        let s = vec![vec![1.0, -1.0, 0.5]];
        let t = vec![vec![0.0, 0.0, 0.5]];
        let g = l1_kd_grad(&s, &t, &KdConfig::new(6.0, 3).unwrap()).unwrap();
        assert_eq!(g, vec![vec![2.0, -2.0, 0.0]]);
    }

    #[test]
    fn grad_check_paths() {
        let mut rng = Prng::new(2);
        let t = random(&mut rng, 5, 6);
        let s: Vec<Vec<f64>> = t
            .iter()
            .map(|r| r.iter().map(|v| v + if rng.unit_f64() < 0.5 { 0.1 } else { -0.1 }).collect())
            .collect();
        let r = grad_check(&s, &t, &KdConfig::new(10.0, 6).unwrap(), 1e-5, true).unwrap();
        assert!(r.max_rel_error < 1e-4);
        assert_eq!((r.checked, r.excluded), (30, 0));

        let mut z = s.clone();
        z[2][3] = t[2][3];
        let cfg = KdConfig::new(1.0, 6).unwrap();
        assert_eq!(grad_check(&z, &t, &cfg, 1e-5, false), Err(DistillError::NonSmooth { region: 2, dim: 3 }));
        assert_eq!(grad_check(&z, &t, &cfg, 1e-5, true).unwrap().excluded, 1);
        assert_eq!(grad_check(&t, &t, &cfg, 1e-5, true), Err(DistillError::AllExcluded));
    }
}
