//! Training objectives: CTC forward-backward, teacher-forced cross-entropy,
//! their convex combination, and the coefficient-MSE regularizer. Each loss
//! returns its gradient with respect to the log-probability inputs; a
//! brute-force path enumerator serves as the CTC oracle.

use crate::adapters::CoefficientVector;
use crate::error::{Error, Result};
use crate::numerics::matrix::{log_add, Matrix};

/// CTC blank token id.
pub const BLANK: usize = 0;
/// End-of-sequence token id (attention decoder).
pub const EOS: usize = 1;
/// First usable content token id.
pub const FIRST_CONTENT: usize = 2;

/// Per-batch record of every loss term. The arithmetic identities between
/// fields are established by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_s2s: f64,
    pub l_jca: f64,
    pub l_mse: f64,
    pub l_mtl: f64,
    pub lambda_ctc: f64,
    pub gamma_mtl: f64,
}

impl LossBreakdown {
    pub fn new(l_ctc: f64, l_s2s: f64, l_mse: f64, lambda_ctc: f64, gamma_mtl: f64) -> Result<Self> {
        let l_jca = jca_loss(l_ctc, l_s2s, lambda_ctc)?;
        let l_mtl = mtl_loss(l_jca, l_mse, gamma_mtl)?;
        Ok(LossBreakdown {
            l_ctc,
            l_s2s,
            l_jca,
            l_mse,
            l_mtl,
            lambda_ctc,
            gamma_mtl,
        })
    }
}

/// Minimum number of frames needed to emit `labels` (repeats require a
/// separating blank).
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn validate_ctc_inputs(log_probs: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Input("ctc: labels must be nonempty".into()));
    }
    if labels.iter().any(|&l| l == BLANK) {
        return Err(Error::Input("ctc: labels must not contain the blank id".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= log_probs.cols()) {
        return Err(Error::Input(format!(
            "ctc: label id {bad} outside vocab of size {}",
            log_probs.cols()
        )));
    }
    let need = ctc_min_frames(labels);
    if log_probs.rows() < need {
        return Err(Error::Infeasible(format!(
            "ctc: {} frames cannot align {} labels (need >= {need})",
            log_probs.rows(),
            labels.len()
        )));
    }
    Ok(())
}

fn extended_labels(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// CTC loss via the forward-backward recursion over the blank-augmented
/// lattice, in the log domain. Returns the loss and its gradient with respect
/// to `log_probs` (treated as free variables).
pub fn ctc_loss(log_probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    validate_ctc_inputs(log_probs, labels)?;
    let t_len = log_probs.rows();
    let ext = extended_labels(labels);
    let s_len = ext.len();
    let lp = |t: usize, v: usize| log_probs.get(t, v);

    // forward: alpha[t][s] includes the emission at t
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + lp(t, ext[s]);
        }
    }
    let log_p = log_add(alpha[t_len - 1][s_len - 1], alpha[t_len - 1][s_len - 2]);
    if log_p == f64::NEG_INFINITY {
        return Err(Error::Infeasible("ctc: no feasible alignment".into()));
    }

    // backward: beta[t][s] includes the emission at t
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    beta[t_len - 1][s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta[t + 1][s + 2]);
            }
            beta[t][s] = acc + lp(t, ext[s]);
        }
    }

    // d(-log P)/d log p_t(v) = -exp( lse_{s: ext[s]=v}(alpha+beta) - lp(t,v) - log P )
    let mut grad = Matrix::zeros(t_len, log_probs.cols());
    for t in 0..t_len {
        let mut per_symbol: Vec<f64> = vec![f64::NEG_INFINITY; log_probs.cols()];
        for s in 0..s_len {
            per_symbol[ext[s]] = log_add(per_symbol[ext[s]], alpha[t][s] + beta[t][s]);
        }
        for (v, &mass) in per_symbol.iter().enumerate() {
            if mass != f64::NEG_INFINITY {
                grad.set(t, v, -((mass - lp(t, v) - log_p).exp()));
            }
        }
    }
    Ok((-log_p, grad))
}

/// Oracle: enumerate every V^T frame path, collapse it (merge repeats, drop
/// blanks) and sum the probabilities of paths matching `labels`.
pub fn ctc_brute_force(log_probs: &Matrix, labels: &[usize]) -> Result<f64> {
    let t_len = log_probs.rows();
    let v_len = log_probs.cols();
    if (v_len as f64).powi(t_len as i32) > 1e6 {
        return Err(Error::Guard(format!(
            "ctc_brute_force: {v_len}^{t_len} paths exceed 1e6"
        )));
    }
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; t_len];
    loop {
        let collapsed = collapse_path(&path);
        if collapsed == labels {
            let lp: f64 = path.iter().enumerate().map(|(t, &v)| log_probs.get(t, v)).sum();
            total = log_add(total, lp);
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                return Ok(-total);
            }
            path[i] += 1;
            if path[i] < v_len {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &v in path {
        if Some(v) != prev {
            if v != BLANK {
                out.push(v);
            }
            prev = Some(v);
        }
    }
    out
}

/// Mean negative log-likelihood of [t_1, ..., t_L, eos] under teacher forcing.
/// `s2s_log_probs` must have len(targets)+1 rows. Returns the loss and its
/// gradient with respect to the log-probabilities.
pub fn s2s_loss(s2s_log_probs: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let rows = targets.len() + 1;
    if s2s_log_probs.rows() != rows {
        return Err(Error::Dimension(format!(
            "s2s: expected {rows} rows for {} targets, got {}",
            targets.len(),
            s2s_log_probs.rows()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(s2s_log_probs.rows(), s2s_log_probs.cols());
    let inv = 1.0 / rows as f64;
    for j in 0..rows {
        let tok = if j < targets.len() { targets[j] } else { EOS };
        loss -= s2s_log_probs.get(j, tok);
        grad.set(j, tok, -inv);
    }
    Ok((loss * inv, grad))
}

/// L_jca = λ·L_ctc + (1 − λ)·L_s2s
pub fn jca_loss(l_ctc: f64, l_s2s: f64, lambda_ctc: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_ctc) {
        return Err(Error::Config(format!("lambda_ctc {lambda_ctc} outside [0, 1]")));
    }
    Ok(lambda_ctc * l_ctc + (1.0 - lambda_ctc) * l_s2s)
}

/// L_MSE(α_ref, α) = (1/n) Σ (α_ref_k − α_k)², with gradient wrt α.
pub fn coeff_mse(alpha_ref: &CoefficientVector, alpha: &CoefficientVector) -> Result<(f64, Vec<f64>)> {
    if alpha_ref.len() != alpha.len() {
        return Err(Error::Config(format!(
            "coefficient length mismatch: {} vs {}",
            alpha_ref.len(),
            alpha.len()
        )));
    }
    let n = alpha.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(alpha.len());
    for (&r, &a) in alpha_ref.values().iter().zip(alpha.values()) {
        let d = r - a;
        loss += d * d;
        grad.push(-2.0 * d / n);
    }
    Ok((loss / n, grad))
}

/// L_mtl = L_jca + γ·L_MSE
pub fn mtl_loss(l_jca: f64, l_mse: f64, gamma_mtl: f64) -> Result<f64> {
    if gamma_mtl < 0.0 {
        return Err(Error::Config(format!("gamma_mtl {gamma_mtl} must be >= 0")));
    }
    Ok(l_jca + gamma_mtl * l_mse)
}

/// Full-sequence CTC log-probability (convenience wrapper used by decoding).
pub fn ctc_log_prob(log_probs: &Matrix, labels: &[usize]) -> Result<f64> {
    // empty label sequence: all-blank path mass
    if labels.is_empty() {
        let mut acc = 0.0;
        for t in 0..log_probs.rows() {
            acc += log_probs.get(t, BLANK);
        }
        return Ok(acc);
    }
    ctc_loss(log_probs, labels).map(|(loss, _)| -loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_log_probs(t: usize, v: usize) -> Matrix {
        Matrix::filled(t, v, -((v as f64).ln()))
    }

    fn random_log_probs(t: usize, v: usize, rng: &mut impl Rng) -> Matrix {
        let logits = Matrix::from_vec(t, v, (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect());
        crate::numerics::matrix::row_log_softmax(&logits)
    }

    #[test]
    fn ctc_single_frame_single_label() {
        // p1(a) = 0.6 with a = 2
        let mut lp = Matrix::filled(1, 3, (0.2f64).ln());
        lp.set(0, 2, (0.6f64).ln());
        let (loss, _) = ctc_loss(&lp, &[2]).unwrap();
        assert!((loss - (-(0.6f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn ctc_two_frames_uniform() {
        // T=2, labels=[a], uniform over {blank, a, b}: P = 3 * (1/9) = 1/3
        let lp = uniform_log_probs(2, 3);
        let (loss, _) = ctc_loss(&lp, &[1]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_repeat_needs_blank() {
        // T=3, labels=[a,a]: only path (a, blank, a) → P = 1/27
        let lp = uniform_log_probs(3, 3);
        let (loss, _) = ctc_loss(&lp, &[1, 1]).unwrap();
        assert!((loss - 3.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_matches_brute_force_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let t = rng.gen_range(1..=6);
            let v = rng.gen_range(2..=4);
            let l = rng.gen_range(1..=3.min(t));
            let labels: Vec<usize> = (0..l).map(|_| rng.gen_range(1..v)).collect();
            let lp = random_log_probs(t, v, &mut rng);
            match ctc_loss(&lp, &labels) {
                Ok((loss, _)) => {
                    let oracle = ctc_brute_force(&lp, &labels).unwrap();
                    assert!(
                        (loss - oracle).abs() < 1e-9,
                        "T={t} V={v} labels={labels:?}: {loss} vs {oracle}"
                    );
                }
                Err(Error::Infeasible(_)) => {
                    assert!(lp.rows() < ctc_min_frames(&labels));
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn ctc_infeasible_when_too_short() {
        let lp = uniform_log_probs(1, 3);
        let err = ctc_loss(&lp, &[1, 2]).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        // brute force: empty path set → +inf loss
        let bf = ctc_brute_force(&lp, &[1, 2]).unwrap();
        assert!(bf.is_infinite() && bf > 0.0);
    }

    #[test]
    fn ctc_rejects_blank_in_labels() {
        let lp = uniform_log_probs(3, 3);
        assert!(matches!(ctc_loss(&lp, &[0]), Err(Error::Input(_))));
        assert!(matches!(ctc_loss(&lp, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..20 {
            let t = rng.gen_range(2..=5);
            let v = rng.gen_range(2..=4);
            let labels: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(1..v)).collect();
            if t < ctc_min_frames(&labels) {
                continue;
            }
            let mut lp = random_log_probs(t, v, &mut rng);
            let (_, grad) = ctc_loss(&lp, &labels).unwrap();
            let h = 1e-6;
            for e in 0..t * v {
                let orig = lp.data()[e];
                lp.data_mut()[e] = orig + h;
                let fp = ctc_loss(&lp, &labels).unwrap().0;
                lp.data_mut()[e] = orig - h;
                let fm = ctc_loss(&lp, &labels).unwrap().0;
                lp.data_mut()[e] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grad.data()[e];
                assert!(
                    crate::numerics::rel_err(an, fd) < 1e-4,
                    "entry {e}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn ctc_posterior_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let t = rng.gen_range(2..=6);
            let lp = random_log_probs(t, 4, &mut rng);
            let labels = vec![rng.gen_range(1..4), rng.gen_range(1..4)];
            if t < ctc_min_frames(&labels) {
                continue;
            }
            let (_, grad) = ctc_loss(&lp, &labels).unwrap();
            for frame in 0..t {
                let s: f64 = grad.row(frame).iter().map(|g| -g).sum();
                assert!((s - 1.0).abs() < 1e-9, "frame {frame} posterior sum {s}");
            }
        }
    }

    #[test]
    fn ctc_nonnegative_for_normalized_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..50 {
            let t = rng.gen_range(3..=6);
            let lp = random_log_probs(t, 3, &mut rng);
            let (loss, _) = ctc_loss(&lp, &[1]).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn s2s_uniform_is_log_v() {
        let v = 5;
        let lp = Matrix::filled(3, v, -(v as f64).ln());
        let (loss, _) = s2s_loss(&lp, &[2, 3]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn s2s_confident_goes_to_zero() {
        let targets = [2usize, 3];
        let mut lp = Matrix::filled(3, 5, -50.0);
        lp.set(0, 2, -1e-9);
        lp.set(1, 3, -1e-9);
        lp.set(2, EOS, -1e-9);
        let (loss, _) = s2s_loss(&lp, &targets).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn s2s_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut lp = random_log_probs(3, 4, &mut rng);
        let targets = [2usize, 3];
        let (_, grad) = s2s_loss(&lp, &targets).unwrap();
        let h = 1e-6;
        for e in 0..lp.data().len() {
            let orig = lp.data()[e];
            lp.data_mut()[e] = orig + h;
            let fp = s2s_loss(&lp, &targets).unwrap().0;
            lp.data_mut()[e] = orig - h;
            let fm = s2s_loss(&lp, &targets).unwrap().0;
            lp.data_mut()[e] = orig;
            assert!(crate::numerics::rel_err(grad.data()[e], (fp - fm) / (2.0 * h)) < 1e-6);
        }
    }

    #[test]
    fn jca_arithmetic() {
        assert!((jca_loss(2.0, 1.0, 0.3).unwrap() - 1.3).abs() < 1e-12);
        assert_eq!(jca_loss(2.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(jca_loss(2.0, 1.0, 1.0).unwrap(), 2.0);
        assert!(jca_loss(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn mse_arithmetic() {
        let r = CoefficientVector::one_hot(4, 0);
        let a = CoefficientVector::uniform(4);
        let (loss, _) = coeff_mse(&r, &a).unwrap();
        assert!((loss - 0.1875).abs() < 1e-12);
        let (zero, _) = coeff_mse(&a, &a).unwrap();
        assert_eq!(zero, 0.0);
        let bad = CoefficientVector::uniform(3);
        assert!(coeff_mse(&r, &bad).is_err());
    }

    #[test]
    fn mtl_arithmetic() {
        assert!((mtl_loss(1.3, 0.1875, 0.01).unwrap() - 1.301875).abs() < 1e-12);
        assert_eq!(mtl_loss(1.3, 0.5, 0.0).unwrap(), 1.3);
        assert!(mtl_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn breakdown_identities() {
        let b = LossBreakdown::new(2.0, 1.0, 0.1875, 0.3, 0.01).unwrap();
        assert!((b.l_jca - (b.lambda_ctc * b.l_ctc + (1.0 - b.lambda_ctc) * b.l_s2s)).abs() < 1e-12);
        assert!((b.l_mtl - (b.l_jca + b.gamma_mtl * b.l_mse)).abs() < 1e-12);
        assert!(b.l_jca >= b.l_ctc.min(b.l_s2s) && b.l_jca <= b.l_ctc.max(b.l_s2s));
        assert!(b.l_mtl >= b.l_jca);
    }
}
