//! Decoding: greedy CTC collapse, joint attention-beam search with CTC
//! prefix-score interpolation, and the token error rate metric.

use crate::adapters::{AccentEmbedding, CoefficientVector};
use crate::error::{Error, Result};
use crate::losses::{BLANK, EOS, FIRST_CONTENT};
use crate::model::Model;
use crate::numerics::matrix::Matrix;
use crate::numerics::{log_add, log_sum_exp};

/// Best-path decode: per-frame argmax (lowest id on ties), merge repeats,
/// drop blanks.
pub fn ctc_greedy(log_probs: &Matrix) -> Vec<usize> {
    let mut path = Vec::with_capacity(log_probs.rows());
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut best = 0;
        for (v, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = v;
            }
        }
        path.push(best);
    }
    crate::losses::collapse_path(&path)
}

/// CTC prefix-probability recursion state for one hypothesis. `r_n[t]` and
/// `r_b[t]` hold the log mass of alignments over frames 0..=t that collapse
/// exactly to the prefix and end in a nonblank / blank frame.
#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<usize>,
    /// log probability that the prefix is a prefix of the collapsed output.
    psi: f64,
}

impl CtcPrefixState {
    /// State of the empty prefix: all-blank mass ends blank at every frame.
    pub fn initial(log_probs: &Matrix) -> Self {
        let t_len = log_probs.rows();
        let mut r_b = Vec::with_capacity(t_len);
        let mut acc = 0.0;
        for t in 0..t_len {
            acc += log_probs.get(t, BLANK);
            r_b.push(acc);
        }
        CtcPrefixState {
            r_n: vec![f64::NEG_INFINITY; t_len],
            r_b,
            last: None,
            psi: 0.0,
        }
    }

    /// Extends the prefix by a non-blank, non-eos token. Returns the new
    /// state; its `psi` is the new prefix score.
    pub fn extend(&self, log_probs: &Matrix, c: usize) -> CtcPrefixState {
        debug_assert!(c != BLANK && c != EOS);
        let t_len = log_probs.rows();
        let mut r_n = vec![f64::NEG_INFINITY; t_len];
        let mut r_b = vec![f64::NEG_INFINITY; t_len];
        let repeat = self.last == Some(c);
        let mut psi_terms = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let p_c = log_probs.get(t, c);
            let p_blank = log_probs.get(t, BLANK);
            // mass of the parent prefix available for starting c at frame t:
            // blank-ending always; nonblank-ending only when c differs from
            // the parent's last token (a repeat needs a separating blank)
            let phi = if t == 0 {
                if self.last.is_none() { 0.0 } else { f64::NEG_INFINITY }
            } else {
                let mut m = self.r_b[t - 1];
                if !repeat {
                    m = log_add(m, self.r_n[t - 1]);
                }
                m
            };
            let prev_n = if t == 0 { f64::NEG_INFINITY } else { r_n[t - 1] };
            let prev_b = if t == 0 { f64::NEG_INFINITY } else { r_b[t - 1] };
            r_n[t] = p_c + log_add(prev_n, phi);
            r_b[t] = p_blank + log_add(prev_b, prev_n);
            psi_terms.push(phi + p_c);
        }
        CtcPrefixState {
            r_n,
            r_b,
            last: Some(c),
            psi: log_sum_exp(&psi_terms),
        }
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    /// log probability that the collapse over all T frames equals the prefix
    /// exactly (the score used when a hypothesis ends).
    pub fn total_log_prob(&self) -> f64 {
        match self.r_n.last() {
            Some(&n) => log_add(n, *self.r_b.last().unwrap()),
            None => 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub s2s_score: f64,
    pub ctc_score: f64,
    pub joint_score: f64,
}

struct LiveHypothesis {
    tokens: Vec<usize>,
    s2s_score: f64,
    ctc_state: CtcPrefixState,
    joint_score: f64,
}

/// ctc_weight·ctc + (1−ctc_weight)·s2s, with zero weights dropping their
/// term entirely so a −inf score on the unused side cannot produce NaN.
pub fn interpolate(ctc_weight: f64, ctc: f64, s2s: f64) -> f64 {
    let a = if ctc_weight == 0.0 { 0.0 } else { ctc_weight * ctc };
    let b = if ctc_weight == 1.0 { 0.0 } else { (1.0 - ctc_weight) * s2s };
    a + b
}

/// Total order on hypotheses: higher joint score first, then shorter tokens,
/// then lexicographically smaller tokens.
fn better(score_a: f64, tokens_a: &[usize], score_b: f64, tokens_b: &[usize]) -> bool {
    if score_a != score_b {
        return score_a > score_b;
    }
    if tokens_a.len() != tokens_b.len() {
        return tokens_a.len() < tokens_b.len();
    }
    tokens_a < tokens_b
}

/// Step-synchronous beam search over content tokens and eos, scoring each
/// expansion by ctc_weight·Δctc + (1−ctc_weight)·Δs2s. `next_log_probs` maps
/// a token prefix to the decoder's log distribution over the next token.
pub fn joint_beam_search(
    ctc_log_probs: &Matrix,
    next_log_probs: &mut dyn FnMut(&[usize]) -> Result<Vec<f64>>,
    beam: usize,
    ctc_weight: f64,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam < 1 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&ctc_weight) {
        return Err(Error::Config(format!(
            "ctc_weight must be in [0, 1], got {ctc_weight}"
        )));
    }
    let vocab = ctc_log_probs.cols();
    let w = ctc_weight;

    let mut live = vec![LiveHypothesis {
        tokens: vec![],
        s2s_score: 0.0,
        ctc_state: CtcPrefixState::initial(ctc_log_probs),
        joint_score: 0.0,
    }];
    let mut best_ended: Option<Hypothesis> = None;

    for _ in 0..=max_len {
        let mut expanded: Vec<LiveHypothesis> = Vec::new();
        for hyp in &live {
            let row = next_log_probs(&hyp.tokens)?;
            if row.len() != vocab {
                return Err(Error::Dimension(format!(
                    "decoder row has {} entries, vocab is {vocab}",
                    row.len()
                )));
            }

            // ending on eos: CTC contributes the full-sequence score
            let s2s = hyp.s2s_score + row[EOS];
            let ctc = hyp.ctc_state.total_log_prob();
            let joint = interpolate(w, ctc, s2s);
            let candidate = Hypothesis {
                tokens: hyp.tokens.clone(),
                s2s_score: s2s,
                ctc_score: ctc,
                joint_score: joint,
            };
            let replace = match &best_ended {
                Some(b) => better(joint, &candidate.tokens, b.joint_score, &b.tokens),
                None => true,
            };
            if replace {
                best_ended = Some(candidate);
            }

            if hyp.tokens.len() < max_len {
                for c in FIRST_CONTENT..vocab {
                    let state = hyp.ctc_state.extend(ctc_log_probs, c);
                    let s2s = hyp.s2s_score + row[c];
                    let joint = interpolate(w, state.psi(), s2s);
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(c);
                    expanded.push(LiveHypothesis {
                        tokens,
                        s2s_score: s2s,
                        ctc_state: state,
                        joint_score: joint,
                    });
                }
            }
        }
        if expanded.is_empty() {
            break;
        }
        expanded.sort_by(|a, b| {
            if better(a.joint_score, &a.tokens, b.joint_score, &b.tokens) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        expanded.truncate(beam);
        live = expanded;
    }

    Ok(best_ended.expect("eos expansion always yields an ended hypothesis"))
}

/// Joint beam decode of one utterance through the model.
pub fn decode_utterance(
    model: &Model,
    features: &Matrix,
    z: Option<&AccentEmbedding>,
    beam: usize,
    ctc_weight: f64,
) -> Result<(Hypothesis, Option<CoefficientVector>)> {
    let (enc, alpha) = model.encode(features, z)?;
    let ctc_lp = model.ctc_log_probs(&enc);
    let mut step = |prefix: &[usize]| -> Result<Vec<f64>> {
        let lp = model.decoder_log_probs(&enc, prefix)?;
        Ok(lp.row(lp.rows() - 1).to_vec())
    };
    let hyp = joint_beam_search(&ctc_lp, &mut step, beam, ctc_weight, model.config.max_len)?;
    Ok((hyp, alpha))
}

/// Levenshtein distance with unit costs over token ids.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance divided by reference length.
pub fn token_error_rate(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("reference sequence must be nonempty".into()));
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ctc_loss;
    use crate::numerics::row_log_softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_log_probs(t: usize, v: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let logits = Matrix::from_vec(t, v, (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect());
        row_log_softmax(&logits)
    }

    #[test]
    fn greedy_collapse_examples() {
        // argmax path [a, a, blank, a] collapses to [a, a]
        let rows: Vec<Vec<f64>> = vec![
            vec![0.1, 0.1, 0.8],
            vec![0.2, 0.1, 0.7],
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.2, 0.7],
        ];
        let m = Matrix::from_rows(
            &rows
                .iter()
                .map(|r| r.iter().map(|p: &f64| p.ln()).collect())
                .collect::<Vec<Vec<f64>>>(),
        );
        assert_eq!(ctc_greedy(&m), vec![2, 2]);

        let blanks = Matrix::from_rows(&[vec![0.0, -1.0, -1.0], vec![0.0, -1.0, -1.0]]);
        assert_eq!(ctc_greedy(&blanks), Vec::<usize>::new());

        // exact tie prefers the lowest id
        let tie = Matrix::from_rows(&[vec![-1.0, -2.0, -1.0]]);
        assert_eq!(ctc_greedy(&tie), Vec::<usize>::new());
    }

    #[test]
    fn prefix_single_frame() {
        let lp = row_log_softmax(&Matrix::from_rows(&[vec![0.3, -0.4, 1.1]]));
        let s = CtcPrefixState::initial(&lp).extend(&lp, 2);
        assert!((s.psi() - lp.get(0, 2)).abs() < 1e-12);
        assert!((s.total_log_prob() - lp.get(0, 2)).abs() < 1e-12);
    }

    #[test]
    fn prefix_full_sequence_matches_ctc_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let t = rng.gen_range(2..=6);
            let v = rng.gen_range(3..=5);
            let l = rng.gen_range(1..=3.min(t));
            let lp = random_log_probs(t, v, &mut rng);
            let labels: Vec<usize> = (0..l).map(|_| rng.gen_range(FIRST_CONTENT..v)).collect();
            if crate::losses::ctc_min_frames(&labels) > t {
                continue;
            }
            let mut state = CtcPrefixState::initial(&lp);
            for &c in &labels {
                state = state.extend(&lp, c);
            }
            let (loss, _) = ctc_loss(&lp, &labels).unwrap();
            assert!(
                (state.total_log_prob() + loss).abs() < 1e-9,
                "prefix {:?}: {} vs {}",
                labels,
                state.total_log_prob(),
                -loss
            );
        }
    }

    #[test]
    fn prefix_probability_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let lp = random_log_probs(5, 4, &mut rng);
            let mut state = CtcPrefixState::initial(&lp);
            let mut prev = state.psi();
            for _ in 0..3 {
                let c = rng.gen_range(FIRST_CONTENT..4);
                state = state.extend(&lp, c);
                assert!(state.psi() <= prev + 1e-12);
                prev = state.psi();
            }
        }
    }

    /// Deterministic pseudo-decoder: the next-token distribution depends on
    /// the whole prefix through a seeded hash.
    fn fake_decoder(vocab: usize, seed: u64) -> impl FnMut(&[usize]) -> Result<Vec<f64>> {
        move |prefix: &[usize]| {
            let mut h = seed;
            for &t in prefix {
                h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let m = row_log_softmax(&Matrix::row_vector(&logits));
            Ok(m.row(0).to_vec())
        }
    }

    /// Exhaustive search over all token sequences up to max_len with the same
    /// joint scoring rule.
    fn exhaustive_best(
        ctc_lp: &Matrix,
        next: &mut dyn FnMut(&[usize]) -> Result<Vec<f64>>,
        ctc_weight: f64,
        max_len: usize,
    ) -> Hypothesis {
        let vocab = ctc_lp.cols();
        let w = ctc_weight;
        let mut best: Option<Hypothesis> = None;
        let mut stack = vec![(vec![], 0.0f64, CtcPrefixState::initial(ctc_lp))];
        while let Some((tokens, s2s, state)) = stack.pop() {
            let row = next(&tokens).unwrap();
            let ended_s2s = s2s + row[EOS];
            let ended_ctc = state.total_log_prob();
            let joint = interpolate(w, ended_ctc, ended_s2s);
            let replace = match &best {
                Some(b) => better(joint, &tokens, b.joint_score, &b.tokens),
                None => true,
            };
            if replace {
                best = Some(Hypothesis {
                    tokens: tokens.clone(),
                    s2s_score: ended_s2s,
                    ctc_score: ended_ctc,
                    joint_score: joint,
                });
            }
            if tokens.len() < max_len {
                for c in FIRST_CONTENT..vocab {
                    let mut t = tokens.clone();
                    t.push(c);
                    stack.push((t, s2s + row[c], state.extend(ctc_lp, c)));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn beam_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vocab = 5; // blank, eos, 3 content tokens
        let max_len = 3;
        for case in 0..50 {
            let ctc_lp = random_log_probs(4, vocab, &mut rng);
            let seed = rng.gen();
            // beam covering every sequence: 3^3 = 27 < 64
            let got = joint_beam_search(&ctc_lp, &mut fake_decoder(vocab, seed), 64, 0.3, max_len)
                .unwrap();
            let want = exhaustive_best(&ctc_lp, &mut fake_decoder(vocab, seed), 0.3, max_len);
            assert_eq!(got.tokens, want.tokens, "case {case}");
            assert!((got.joint_score - want.joint_score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_is_greedy_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vocab = 5;
        for _ in 0..20 {
            let ctc_lp = random_log_probs(4, vocab, &mut rng);
            let seed = rng.gen();
            let beam1 =
                joint_beam_search(&ctc_lp, &mut fake_decoder(vocab, seed), 1, 0.3, 3).unwrap();

            // greedy joint decoding: keep only the single best expansion
            let mut next = fake_decoder(vocab, seed);
            let mut tokens: Vec<usize> = vec![];
            let mut s2s = 0.0;
            let mut state = CtcPrefixState::initial(&ctc_lp);
            let mut best: Option<Hypothesis> = None;
            loop {
                let row = next(&tokens).unwrap();
                let ended_s2s = s2s + row[EOS];
                let ended_ctc = state.total_log_prob();
                let joint = interpolate(0.3, ended_ctc, ended_s2s);
                let replace = match &best {
                    Some(b) => better(joint, &tokens, b.joint_score, &b.tokens),
                    None => true,
                };
                if replace {
                    best = Some(Hypothesis {
                        tokens: tokens.clone(),
                        s2s_score: ended_s2s,
                        ctc_score: ended_ctc,
                        joint_score: joint,
                    });
                }
                if tokens.len() == 3 {
                    break;
                }
                let mut chosen: Option<(usize, f64, CtcPrefixState, f64)> = None;
                for c in FIRST_CONTENT..vocab {
                    let st = state.extend(&ctc_lp, c);
                    let cand_s2s = s2s + row[c];
                    let joint = interpolate(0.3, st.psi(), cand_s2s);
                    let take = match &chosen {
                        Some((cc, _, _, cj)) => {
                            let mut a = tokens.clone();
                            a.push(c);
                            let mut b = tokens.clone();
                            b.push(*cc);
                            better(joint, &a, *cj, &b)
                        }
                        None => true,
                    };
                    if take {
                        chosen = Some((c, cand_s2s, st, joint));
                    }
                }
                let (c, cand_s2s, st, _) = chosen.unwrap();
                tokens.push(c);
                s2s = cand_s2s;
                state = st;
            }
            assert_eq!(beam1.tokens, best.unwrap().tokens);
        }
    }

    #[test]
    fn zero_ctc_weight_is_attention_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vocab = 5;
        let ctc_lp = random_log_probs(4, vocab, &mut rng);
        let other_ctc = random_log_probs(4, vocab, &mut rng);
        let seed = rng.gen();
        let a = joint_beam_search(&ctc_lp, &mut fake_decoder(vocab, seed), 8, 0.0, 3).unwrap();
        let b = joint_beam_search(&other_ctc, &mut fake_decoder(vocab, seed), 8, 0.0, 3).unwrap();
        // with weight 0 the CTC matrix cannot influence the result
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn config_errors() {
        let lp = Matrix::zeros(2, 4);
        let mut next = fake_decoder(4, 1);
        assert!(matches!(
            joint_beam_search(&lp, &mut next, 0, 0.3, 3),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            joint_beam_search(&lp, &mut next, 2, 1.5, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(token_error_rate(&[2, 3, 4], &[2, 3, 4]).unwrap(), 0.0);
        assert!((token_error_rate(&[2, 3, 4], &[2, 9, 4]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_error_rate(&[2, 3], &[]).unwrap(), 1.0);
        assert!(token_error_rate(&[], &[2]).is_err());
        // insertion-heavy hypothesis can exceed 1
        assert_eq!(token_error_rate(&[2], &[3, 4, 5]).unwrap(), 3.0);
    }
}
