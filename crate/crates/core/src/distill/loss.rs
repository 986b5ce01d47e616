//! Distillation objectives between an FP teacher and a quantized student.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean absolute difference between two outputs.
pub fn output_loss(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::shape("output_loss", teacher.shape(), student.shape()));
    }
    let s: f64 = teacher
        .data()
        .iter()
        .zip(student.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(s / teacher.numel() as f64)
}

fn unit_distance(teacher: &Tensor, student: &Tensor, tap: usize) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::shape("feature_loss", teacher.shape(), student.shape()));
    }
    let norm = |t: &Tensor| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let (nt, ns) = (norm(teacher), norm(student));
    if nt == 0.0 || ns == 0.0 {
        return Err(Error::DegenerateFeature(tap));
    }
    let d: f64 = teacher
        .data()
        .iter()
        .zip(student.data())
        .map(|(&a, &b)| (a as f64 / nt - b as f64 / ns).powi(2))
        .sum();
    Ok(d.sqrt() / teacher.numel() as f64)
}

/// Sum over taps of the L2 distance between L2-normalized features,
/// each divided by the tap's element count.
pub fn feature_loss(teacher: &[Tensor], student: &[Tensor]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teacher taps vs {} student taps",
            teacher.len(),
            student.len()
        )));
    }
    teacher
        .iter()
        .zip(student)
        .enumerate()
        .map(|(i, (t, s))| unit_distance(t, s, i))
        .sum()
}

/// `output_loss + λ · feature_loss`.
pub fn total_loss(
    teacher_out: &Tensor,
    student_out: &Tensor,
    teacher_taps: &[Tensor],
    student_taps: &[Tensor],
    lambda: f64,
) -> Result<f64> {
    Ok(output_loss(teacher_out, student_out)? + lambda * feature_loss(teacher_taps, student_taps)?)
}

/// Loss nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub output: Var,
    pub feature: Option<Var>,
}

/// Records the distillation objective for a student forward pass.
pub fn record_loss(
    tape: &mut Tape,
    student_out: Var,
    student_taps: &[Var],
    teacher_out: Arc<Tensor>,
    teacher_taps: &[Tensor],
    lambda: f32,
) -> Result<LossVars> {
    if student_taps.len() != teacher_taps.len() {
        return Err(Error::InvalidArgument("tap count mismatch".into()));
    }
    let output = tape.mean_abs_diff(student_out, teacher_out)?;
    if lambda == 0.0 || student_taps.is_empty() {
        return Ok(LossVars { total: output, output, feature: None });
    }
    let mut feature: Option<Var> = None;
    for (i, (&s, t)) in student_taps.iter().zip(teacher_taps).enumerate() {
        let d = tape.feature_distance(s, t, i)?;
        feature = Some(match feature {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    let feature = feature.expect("at least one tap");
    let weighted = tape.scale(feature, lambda);
    let total = tape.add(output, weighted)?;
    Ok(LossVars { total, output, feature: Some(feature) })
}
