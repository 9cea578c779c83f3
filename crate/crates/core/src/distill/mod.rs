//! Centering, sharpened softmaxes, the multi-view distillation loss, and the
//! EMA teacher update.
//!
//! The teacher's logits are centered by a running mean and sharpened by a low
//! temperature before softmax; the student's logits are sharpened by a higher
//! temperature. The loss is the mean cross-entropy over all
//! (teacher global view, student view) pairs excluding the pair where both
//! sides are the same crop. Teacher probabilities are constants with respect
//! to differentiation: gradients exist only for the student.

use ndarray::{Array1, Array2, ArrayViewMutD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{c, Scalar};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("center length {center} does not match logit width {logits}")]
    CenterWidth { center: usize, logits: usize },
    #[error("no valid teacher/student pairs (G={g}, V={v} after same-crop exclusion)")]
    NoPairs { g: usize, v: usize },
    #[error("pairing index {index} out of range for {v} student views")]
    PairingRange { index: usize, v: usize },
    #[error("empty batch for center update")]
    EmptyCenterBatch,
    #[error("parameter {name}: teacher shape {teacher:?} != student shape {student:?}")]
    ShapeMismatch {
        name: String,
        teacher: Vec<usize>,
        student: Vec<usize>,
    },
    #[error("parameter name mismatch at position {position}: teacher {teacher:?}, student {student:?}")]
    NameMismatch {
        position: usize,
        teacher: Option<String>,
        student: Option<String>,
    },
}

/// Serializable distillation hyperparameters; the live [`DistillState`]
/// couples these with the center vector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistillConfig {
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    /// When true, EMA momentum follows a cosine from `ema_momentum` to 1.0
    /// over the epoch budget.
    #[serde(default)]
    pub ema_cosine_to_one: bool,
    /// Optional teacher-temperature warmup: (initial_temp, warmup_epochs).
    #[serde(default)]
    pub teacher_temp_warmup: Option<(f64, usize)>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            teacher_temp: 0.04,
            student_temp: 0.1,
            center_momentum: 0.9,
            ema_momentum: 0.996,
            ema_cosine_to_one: false,
            teacher_temp_warmup: None,
        }
    }
}

/// Live distillation state: running center plus temperatures and momenta.
#[derive(Debug, Clone)]
pub struct DistillState<F> {
    pub center: Array1<F>,
    pub teacher_temp: F,
    pub student_temp: F,
    pub center_momentum: F,
    pub ema_momentum: F,
}

impl<F: Scalar> DistillState<F> {
    pub fn new(k: usize, cfg: &DistillConfig) -> Self {
        assert!(cfg.teacher_temp > 0.0 && cfg.student_temp > 0.0, "temperatures must be positive");
        assert!((0.0..=1.0).contains(&cfg.center_momentum), "center momentum in [0,1]");
        assert!((0.0..=1.0).contains(&cfg.ema_momentum), "ema momentum in [0,1]");
        Self {
            center: Array1::zeros(k),
            teacher_temp: c(cfg.teacher_temp),
            student_temp: c(cfg.student_temp),
            center_momentum: c(cfg.center_momentum),
            ema_momentum: c(cfg.ema_momentum),
        }
    }
}

fn check_finite<F: Scalar>(a: &Array2<F>, context: &'static str) -> Result<(), DistillError> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::NonFinite { context });
    }
    Ok(())
}

/// Centered, sharpened teacher probabilities: row i = softmax((z_i - c)/tau_t).
pub fn teacher_probs<F: Scalar>(
    logits: &Array2<F>,
    state: &DistillState<F>,
) -> Result<Array2<F>, DistillError> {
    check_finite(logits, "teacher logits")?;
    let k = logits.ncols();
    if state.center.len() != k {
        return Err(DistillError::CenterWidth {
            center: state.center.len(),
            logits: k,
        });
    }
    let mut out = Array2::<F>::zeros(logits.raw_dim());
    for (i, row) in logits.outer_iter().enumerate() {
        let mut shifted: Vec<F> = row
            .iter()
            .zip(state.center.iter())
            .map(|(&z, &ci)| (z - ci) / state.teacher_temp)
            .collect();
        let max = shifted.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for v in shifted.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for (j, v) in shifted.iter().enumerate() {
            out[(i, j)] = *v / denom;
        }
    }
    Ok(out)
}

/// Stable log-softmax of student logits sharpened by tau_s.
pub fn student_logprobs<F: Scalar>(
    logits: &Array2<F>,
    state: &DistillState<F>,
) -> Result<Array2<F>, DistillError> {
    check_finite(logits, "student logits")?;
    let mut out = Array2::<F>::zeros(logits.raw_dim());
    for (i, row) in logits.outer_iter().enumerate() {
        let scaled: Vec<F> = row.iter().map(|&z| z / state.student_temp).collect();
        let max = scaled.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for &v in &scaled {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        for (j, &v) in scaled.iter().enumerate() {
            out[(i, j)] = v - log_denom;
        }
    }
    Ok(out)
}

/// Validate the pairing and return, per student view, the list of teacher
/// globals it pairs with (same-crop pairs excluded).
fn build_pairs(
    g: usize,
    v: usize,
    pairing: &[usize],
) -> Result<(Vec<(usize, usize)>, usize), DistillError> {
    assert_eq!(pairing.len(), g, "pairing must list one student index per teacher view");
    for &p in pairing {
        if p >= v {
            return Err(DistillError::PairingRange { index: p, v });
        }
    }
    let mut pairs = Vec::with_capacity(g * v);
    for (gi, &same) in pairing.iter().enumerate() {
        for vi in 0..v {
            if vi != same {
                pairs.push((gi, vi));
            }
        }
    }
    if pairs.is_empty() {
        return Err(DistillError::NoPairs { g, v });
    }
    Ok((pairs.clone(), pairs.len()))
}

/// Number of loss pairs when every teacher global appears among the student
/// views: G teacher views each paired with all V student views except its
/// own crop.
pub fn pair_count(g: usize, v: usize) -> usize {
    g * v.saturating_sub(1)
}

/// Mean cross-entropy over all valid (teacher global, student view) pairs.
///
/// `pairing[g]` names the student row holding the same crop as teacher row
/// `g`; that pair is excluded so the student never just copies itself.
pub fn multiview_loss<F: Scalar>(
    teacher_logits: &Array2<F>,
    student_logits: &Array2<F>,
    pairing: &[usize],
    state: &DistillState<F>,
) -> Result<F, DistillError> {
    let (loss, _) = multiview_loss_grad_inner(teacher_logits, student_logits, pairing, state, false)?;
    Ok(loss)
}

/// Loss plus the analytic gradient with respect to the student logits.
///
/// Teacher probabilities are treated as constants; no teacher gradient
/// exists by construction.
pub fn multiview_loss_grad<F: Scalar>(
    teacher_logits: &Array2<F>,
    student_logits: &Array2<F>,
    pairing: &[usize],
    state: &DistillState<F>,
) -> Result<(F, Array2<F>), DistillError> {
    let (loss, grad) =
        multiview_loss_grad_inner(teacher_logits, student_logits, pairing, state, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn multiview_loss_grad_inner<F: Scalar>(
    teacher_logits: &Array2<F>,
    student_logits: &Array2<F>,
    pairing: &[usize],
    state: &DistillState<F>,
    want_grad: bool,
) -> Result<(F, Option<Array2<F>>), DistillError> {
    let g = teacher_logits.nrows();
    let v = student_logits.nrows();
    assert_eq!(
        teacher_logits.ncols(),
        student_logits.ncols(),
        "teacher and student logit widths must match"
    );
    let (pairs, n_pairs) = build_pairs(g, v, pairing)?;

    let p_t = teacher_probs(teacher_logits, state)?;
    let log_p_s = student_logprobs(student_logits, state)?;
    let inv_pairs = F::one() / c::<F>(n_pairs as f64);

    let mut loss = F::zero();
    for &(gi, vi) in &pairs {
        let mut ce = F::zero();
        for k in 0..p_t.ncols() {
            ce -= p_t[(gi, k)] * log_p_s[(vi, k)];
        }
        loss += ce;
    }
    loss *= inv_pairs;

    let grad = if want_grad {
        // dL/ds_v = (1/(|P| tau_s)) * sum_{g paired with v} (softmax(s_v/tau_s) - p_t(g))
        let p_s = log_p_s.mapv(|lv| lv.exp());
        let mut grad = Array2::<F>::zeros(student_logits.raw_dim());
        let scale = inv_pairs / state.student_temp;
        for &(gi, vi) in &pairs {
            for k in 0..p_s.ncols() {
                grad[(vi, k)] += (p_s[(vi, k)] - p_t[(gi, k)]) * scale;
            }
        }
        Some(grad)
    } else {
        None
    };

    Ok((loss, grad))
}

/// c <- m*c + (1-m)*mean(teacher logit rows).
pub fn update_center<F: Scalar>(
    state: &mut DistillState<F>,
    teacher_logits: &Array2<F>,
) -> Result<(), DistillError> {
    let n = teacher_logits.nrows();
    if n == 0 {
        return Err(DistillError::EmptyCenterBatch);
    }
    check_finite(teacher_logits, "teacher logits for center update")?;
    let k = teacher_logits.ncols();
    if state.center.len() != k {
        return Err(DistillError::CenterWidth {
            center: state.center.len(),
            logits: k,
        });
    }
    let m = state.center_momentum;
    let inv_n = F::one() / c::<F>(n as f64);
    for j in 0..k {
        let mut mean = F::zero();
        for i in 0..n {
            mean += teacher_logits[(i, j)];
        }
        mean *= inv_n;
        state.center[j] = m * state.center[j] + (F::one() - m) * mean;
    }
    Ok(())
}

/// theta_t <- lambda*theta_t + (1-lambda)*theta_s, elementwise, for every
/// named tensor (parameters and running statistics alike).
///
/// The two iterators must yield the same names in the same order; a mismatch
/// is reported with the offending parameter name.
pub fn ema_update<'t, 's, F: Scalar>(
    teacher: impl Iterator<Item = (String, ArrayViewMutD<'t, F>)>,
    student: impl Iterator<Item = (String, ndarray::ArrayViewD<'s, F>)>,
    lambda: F,
) -> Result<(), DistillError> {
    let one = F::one();
    let mut teacher = teacher.fuse();
    let mut student = student.fuse();
    let mut position = 0usize;
    loop {
        match (teacher.next(), student.next()) {
            (None, None) => return Ok(()),
            (Some((tn, mut tv)), Some((sn, sv))) => {
                if tn != sn {
                    return Err(DistillError::NameMismatch {
                        position,
                        teacher: Some(tn),
                        student: Some(sn),
                    });
                }
                if tv.shape() != sv.shape() {
                    return Err(DistillError::ShapeMismatch {
                        name: tn,
                        teacher: tv.shape().to_vec(),
                        student: sv.shape().to_vec(),
                    });
                }
                ndarray::Zip::from(&mut tv).and(&sv).for_each(|t, &s| {
                    *t = lambda * *t + (one - lambda) * s;
                });
                position += 1;
            }
            (t, s) => {
                return Err(DistillError::NameMismatch {
                    position,
                    teacher: t.map(|(n, _)| n),
                    student: s.map(|(n, _)| n),
                });
            }
        }
    }
}

/// Entropy of the mean teacher probability row; the collapse diagnostic.
/// Uniform output gives ln K, a collapsed teacher approaches 0.
pub fn mean_teacher_entropy<F: Scalar>(probs: &Array2<F>) -> f64 {
    let n = probs.nrows();
    if n == 0 {
        return 0.0;
    }
    let k = probs.ncols();
    let mut entropy = 0.0f64;
    for j in 0..k {
        let mut mean = 0.0f64;
        for i in 0..n {
            mean += probs[(i, j)].to_f64().unwrap();
        }
        mean /= n as f64;
        if mean > 0.0 {
            entropy -= mean * mean.ln();
        }
    }
    entropy
}
