use super::tensor::Tensor2;
use super::KernelError;

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &Tensor2, temperature: f64) -> Tensor2 {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i), temperature);
    }
    out
}

fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64], temperature: f64) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| ((v - max) / temperature).exp()).sum();
    max / temperature + s.ln()
}

fn check_labels(logits: &Tensor2, labels: &[u32]) -> Result<(), KernelError> {
    if labels.len() != logits.rows() {
        return Err(KernelError::Dimension(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(KernelError::EmptyBatch);
    }
    if let Some((row, &label)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= logits.cols())
    {
        return Err(KernelError::Label {
            row,
            label,
            n_classes: logits.cols(),
        });
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor2, labels: &[u32]) -> Result<(f64, Tensor2), KernelError> {
    check_labels(logits, labels)?;
    let w = 1.0 / logits.rows() as f64;
    let weights = vec![w; logits.rows()];
    weighted_cross_entropy(logits, labels, &weights)
}

/// `Σ_i weights[i] · CE_i`, with the matching gradient.
///
/// Mixing two mean losses with coefficients `a` and `b` is the same as
/// weighting the rows of each batch by `a/B₁` and `b/B₂`.
pub fn weighted_cross_entropy(
    logits: &Tensor2,
    labels: &[u32],
    weights: &[f64],
) -> Result<(f64, Tensor2), KernelError> {
    check_labels(logits, labels)?;
    if weights.len() != logits.rows() {
        return Err(KernelError::Dimension(format!(
            "{} row weights for {} logit rows",
            weights.len(),
            logits.rows()
        )));
    }
    let mut loss = 0.0;
    let mut grad = softmax_rows(logits, 1.0);
    for (i, (&label, &w)) in labels.iter().zip(weights).enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += w * ((max - row[label as usize]) + sum.ln());
        let g = grad.row_mut(i);
        g[label as usize] -= 1.0;
        g.iter_mut().for_each(|v| *v *= w);
    }
    Ok((loss, grad))
}

/// Mean KL(softmax(teacher/T) ‖ softmax(student/T)) and its gradient with
/// respect to the student logits. The teacher receives no gradient.
pub fn kd_kl(
    teacher: &Tensor2,
    student: &Tensor2,
    temperature: f64,
) -> Result<(f64, Tensor2), KernelError> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(KernelError::Config(format!(
            "distillation temperature must be positive, got {temperature}"
        )));
    }
    if teacher.shape() != student.shape() {
        return Err(KernelError::Dimension(format!(
            "teacher logits {}x{} vs student logits {}x{}",
            teacher.rows(),
            teacher.cols(),
            student.rows(),
            student.cols()
        )));
    }
    if teacher.rows() == 0 {
        return Err(KernelError::EmptyBatch);
    }
    let b = teacher.rows() as f64;
    let mut loss = 0.0;
    let mut grad = softmax_rows(student, temperature);
    for i in 0..teacher.rows() {
        let (t, s) = (teacher.row(i), student.row(i));
        let lt = log_sum_exp(t, temperature);
        let ls = log_sum_exp(s, temperature);
        let mut kl = 0.0;
        let g = grad.row_mut(i);
        for j in 0..t.len() {
            let log_pt = t[j] / temperature - lt;
            let log_ps = s[j] / temperature - ls;
            let pt = log_pt.exp();
            kl += pt * (log_pt - log_ps);
            g[j] = (g[j] - pt) / (temperature * b);
        }
        loss += kl;
    }
    Ok((loss / b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let (loss, _) = cross_entropy(&t(&[&[0.3; 4], &[-2.0; 4]]), &[1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_row_is_near_zero() {
        let (loss, _) = cross_entropy(&t(&[&[10.0, -10.0]]), &[0]).unwrap();
        // -log(e^10 / (e^10 + e^-10)) = log(1 + e^-20)
        let expect = (-20f64).exp().ln_1p();
        assert!((loss - expect).abs() < 1e-15);
        assert!((loss - 2.061e-9).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_names_row() {
        let err = cross_entropy(&t(&[&[0.0, 1.0], &[1.0, 0.0]]), &[1, 2]).unwrap_err();
        assert!(matches!(err, KernelError::Label { row: 1, label: 2, .. }));
    }

    fn fd_check(f: impl Fn(&Tensor2) -> f64, x: &Tensor2, analytic: &Tensor2) {
        let h = 1e-5;
        for k in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.data()[k];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-12);
            assert!(rel < 1e-4, "entry {k}: analytic {a}, numeric {num}");
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = t(&[&[0.2, -1.3, 0.7, 2.1], &[1.5, 0.1, -0.4, 0.0], &[-0.5, 0.9, 0.3, -2.0]]);
        let labels = [2, 0, 1];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        fd_check(|x| cross_entropy(x, &labels).unwrap().0, &logits, &g);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let z = t(&[&[0.3, -1.0, 2.0], &[5.0, 5.0, -1.0]]);
        let (loss, g) = kd_kl(&z, &z, 2.0).unwrap();
        assert!(loss.abs() < 1e-9);
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn two_class_kl_matches_closed_form() {
        let (loss, _) = kd_kl(&t(&[&[0.0, 0.0]]), &t(&[&[3f64.ln(), 0.0]]), 1.0).unwrap();
        // teacher (1/2, 1/2), student (3/4, 1/4)
        let expect = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((loss - expect).abs() < 1e-14);
        assert!((expect - (2f64.ln() - 0.5 * 3f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let teacher = t(&[&[0.5, -0.2, 1.1], &[0.0, 2.0, -1.0]]);
        let student = t(&[&[-0.3, 0.4, 0.9], &[1.2, -0.7, 0.2]]);
        for temp in [1.0, 2.0, 0.5] {
            let (_, g) = kd_kl(&teacher, &student, temp).unwrap();
            fd_check(|s| kd_kl(&teacher, s, temp).unwrap().0, &student, &g);
        }
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let z = t(&[&[0.0, 1.0]]);
        assert!(matches!(kd_kl(&z, &z, 0.0), Err(KernelError::Config(_))));
        assert!(matches!(kd_kl(&z, &z, -1.0), Err(KernelError::Config(_))));
    }
}
