//! Finite-difference audit of every hand-derived backward pass. Each case
//! builds seeded random instances, accumulates analytic gradients, and
//! compares them entry by entry against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{
    AccentEmbedding, AdapterUnit, Basis, CoefficientVector, Connection, GatedAdapter, MultiBasis,
    Predictor,
};
use crate::losses::{coeff_mse, ctc_loss, jca_loss, mtl_loss, s2s_loss};
use crate::model::attention::MultiHeadAttention;
use crate::model::blocks::{DecoderBlock, EncoderBlock, FeedForward};
use crate::numerics::layers::{Embedding, LayerNorm, Linear};
use crate::numerics::matrix::{row_log_softmax, Matrix};
use crate::numerics::param::{join, zero_grads, Parameter, Params};
use crate::numerics::{max_grad_rel_err, REL_TOL};

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn randomize(m: &mut impl Params, limit: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit("", &mut |_, p| {
        let vals = (0..p.value.data().len())
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        p.value = Matrix::from_vec(p.value.rows(), p.value.cols(), vals);
    });
}

fn weighted_sum(out: &Matrix, weights: &Matrix) -> f64 {
    out.hadamard(weights).data().iter().sum()
}

const INSTANCES: usize = 20;

/// Runs every registered case and returns one result per case.
pub fn run_suite() -> Vec<GradCheckResult> {
    let mut results = Vec::new();

    results.push(check("linear", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = Linear::xavier(4, 3, &mut rng);
        let x = random_matrix(3, 4, &mut rng);
        let w = random_matrix(3, 3, &mut rng);
        zero_grads(&mut layer);
        let (_, cache) = layer.forward(&x);
        layer.backward(&cache, &w);
        max_grad_rel_err(&mut layer, |l| {
            let (y, _) = l.forward(&x);
            weighted_sum(&y, &w)
        })
    }));

    results.push(check("layer_norm", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = LayerNorm::new(5);
        randomize(&mut layer, 0.8, seed ^ 1);
        let x = random_matrix(3, 5, &mut rng);
        let w = random_matrix(3, 5, &mut rng);
        zero_grads(&mut layer);
        let (_, cache) = layer.forward(&x);
        layer.backward(&cache, &w);
        max_grad_rel_err(&mut layer, |l| {
            let (y, _) = l.forward(&x);
            weighted_sum(&y, &w)
        })
    }));

    results.push(check("embedding", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = Embedding::xavier(6, 4, &mut rng);
        let ids = vec![1usize, 4, 1, 0];
        let w = random_matrix(4, 4, &mut rng);
        zero_grads(&mut layer);
        let (_, cache) = layer.forward(&ids);
        layer.backward(&cache, &w);
        max_grad_rel_err(&mut layer, |l| {
            let (y, _) = l.forward(&ids);
            weighted_sum(&y, &w)
        })
    }));

    results.push(check("attention", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = MultiHeadAttention::new(4, 2, &mut rng);
        let x = random_matrix(3, 4, &mut rng);
        let w = random_matrix(3, 4, &mut rng);
        zero_grads(&mut layer);
        let (_, cache) = layer.forward(&x, &x, false).unwrap();
        layer.backward(&cache, &w);
        max_grad_rel_err(&mut layer, |l| {
            let (y, _) = l.forward(&x, &x, false).unwrap();
            weighted_sum(&y, &w)
        })
    }));

    results.push(check("attention_causal", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = MultiHeadAttention::new(4, 2, &mut rng);
        let x = random_matrix(3, 4, &mut rng);
        let w = random_matrix(3, 4, &mut rng);
        zero_grads(&mut layer);
        let (_, cache) = layer.forward(&x, &x, true).unwrap();
        layer.backward(&cache, &w);
        max_grad_rel_err(&mut layer, |l| {
            let (y, _) = l.forward(&x, &x, true).unwrap();
            weighted_sum(&y, &w)
        })
    }));

    results.push(check("feed_forward", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = FeedForward::new(4, 6, &mut rng);
        let x = random_matrix(3, 4, &mut rng);
        let w = random_matrix(3, 4, &mut rng);
        zero_grads(&mut layer);
        let (_, cache) = layer.forward(&x);
        layer.backward(&cache, &w);
        max_grad_rel_err(&mut layer, |l| {
            let (y, _) = l.forward(&x);
            weighted_sum(&y, &w)
        })
    }));

    results.push(check("encoder_block", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block = EncoderBlock::new(4, 2, 6, &mut rng);
        let x = random_matrix(3, 4, &mut rng);
        let w = random_matrix(3, 4, &mut rng);
        zero_grads(&mut block);
        let (_, cache) = block.forward(&x).unwrap();
        block.backward(&cache, &w);
        max_grad_rel_err(&mut block, |b| {
            let (y, _) = b.forward(&x).unwrap();
            weighted_sum(&y, &w)
        })
    }));

    results.push(check("decoder_block", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block = DecoderBlock::new(4, 2, 6, &mut rng);
        let x = random_matrix(3, 4, &mut rng);
        let memory = random_matrix(5, 4, &mut rng);
        let w = random_matrix(3, 4, &mut rng);
        zero_grads(&mut block);
        let (_, cache) = block.forward(&x, &memory).unwrap();
        block.backward(&cache, &w);
        max_grad_rel_err(&mut block, |b| {
            let (y, _) = b.forward(&x, &memory).unwrap();
            weighted_sum(&y, &w)
        })
    }));

    results.push(check("gated_adapter", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = GatedAdapter::new(3, 4);
        randomize(&mut layer, 0.6, seed ^ 2);
        let z = AccentEmbedding::new((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let h = random_matrix(3, 4, &mut rng);
        let w = random_matrix(3, 4, &mut rng);
        zero_grads(&mut layer);
        let (_, cache) = layer.forward(&h, &z).unwrap();
        layer.backward(&cache, &w);
        max_grad_rel_err(&mut layer, |l| {
            let (y, _) = l.forward(&h, &z).unwrap();
            weighted_sum(&y, &w)
        })
    }));

    for (name, connection) in [
        ("basis_scaling_only", Connection::ScalingOnly),
        ("basis_shifting_only", Connection::ShiftingOnly),
        ("basis_both", Connection::Both),
    ] {
        results.push(check(name, move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut basis = Basis::new(4, 2, connection, &mut rng);
            randomize(&mut basis, 0.6, seed ^ 3);
            let h = random_matrix(3, 4, &mut rng);
            let w = random_matrix(3, 4, &mut rng);
            zero_grads(&mut basis);
            let (_, cache) = basis.forward(&h);
            basis.backward(&cache, &w);
            max_grad_rel_err(&mut basis, |b| {
                let (y, _) = b.forward(&h);
                weighted_sum(&y, &w)
            })
        }));
    }

    results.push(check("multi_basis", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = MultiBasis::new(4, 2, 3, Connection::Both, &mut rng);
        randomize(&mut layer, 0.6, seed ^ 4);
        let h = random_matrix(3, 4, &mut rng);
        let w = random_matrix(3, 4, &mut rng);
        let alpha = CoefficientVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        zero_grads(&mut layer);
        let (_, cache) = layer.forward(&h, &alpha);
        layer.backward(&cache, &w);
        max_grad_rel_err(&mut layer, |l| {
            let (y, _) = l.forward(&h, &alpha);
            weighted_sum(&y, &w)
        })
    }));

    results.push(check("predictor_coeff_mse", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut predictor = Predictor::new(3, &[5], 4, &mut rng);
        let z = AccentEmbedding::new((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let reference = CoefficientVector::one_hot(4, seed as usize % 4);
        zero_grads(&mut predictor);
        let (alpha, cache) = predictor.forward(&z).unwrap();
        let (_, dalpha) = coeff_mse(&reference, &alpha).unwrap();
        predictor.backward(&cache, &dalpha);
        max_grad_rel_err(&mut predictor, |p| {
            let (alpha, _) = p.forward(&z).unwrap();
            coeff_mse(&reference, &alpha).unwrap().0
        })
    }));

    results.push(check("combined_unit", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = AdapterUnit::Combined {
            gated: GatedAdapter::new(3, 4),
            multi: MultiBasis::new(4, 2, 2, Connection::Both, &mut rng),
        };
        randomize(&mut unit, 0.5, seed ^ 5);
        let z = AccentEmbedding::new((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let alpha = CoefficientVector::new(vec![0.6, 0.4]).unwrap();
        let h = random_matrix(3, 4, &mut rng);
        let w = random_matrix(3, 4, &mut rng);
        zero_grads(&mut unit);
        let (_, cache) = unit.forward(&h, &z, Some(&alpha)).unwrap();
        unit.backward(&cache, &w);
        max_grad_rel_err(&mut unit, |u| {
            let (y, _) = u.forward(&h, &z, Some(&alpha)).unwrap();
            weighted_sum(&y, &w)
        })
    }));

    results.push(check("loss_ctc", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut holder = LogitHolder::random(5, 4, &mut rng);
        let labels = vec![2usize, 3];
        zero_grads(&mut holder);
        let lp = row_log_softmax(&holder.logits.value);
        let (_, d_lp) = ctc_loss(&lp, &labels).unwrap();
        let d_logits = crate::numerics::layers::log_softmax_backward(&lp, &d_lp);
        holder.logits.grad.add_assign(&d_logits);
        max_grad_rel_err(&mut holder, |h| {
            let lp = row_log_softmax(&h.logits.value);
            ctc_loss(&lp, &labels).unwrap().0
        })
    }));

    results.push(check("loss_s2s", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut holder = LogitHolder::random(3, 4, &mut rng);
        let targets = vec![2usize, 3];
        zero_grads(&mut holder);
        let lp = row_log_softmax(&holder.logits.value);
        let (_, d_lp) = s2s_loss(&lp, &targets).unwrap();
        let d_logits = crate::numerics::layers::log_softmax_backward(&lp, &d_lp);
        holder.logits.grad.add_assign(&d_logits);
        max_grad_rel_err(&mut holder, |h| {
            let lp = row_log_softmax(&h.logits.value);
            s2s_loss(&lp, &targets).unwrap().0
        })
    }));

    results.push(check("loss_jca", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pair = LogitPair {
            ctc: LogitHolder::random(5, 4, &mut rng),
            s2s: LogitHolder::random(3, 4, &mut rng),
        };
        let labels = vec![2usize, 3];
        let lambda = 0.3;
        zero_grads(&mut pair);
        let ctc_lp = row_log_softmax(&pair.ctc.logits.value);
        let s2s_lp = row_log_softmax(&pair.s2s.logits.value);
        let (_, d_ctc) = ctc_loss(&ctc_lp, &labels).unwrap();
        let (_, d_s2s) = s2s_loss(&s2s_lp, &labels).unwrap();
        pair.ctc.logits.grad.add_assign(
            &crate::numerics::layers::log_softmax_backward(&ctc_lp, &d_ctc.scale(lambda)),
        );
        pair.s2s.logits.grad.add_assign(
            &crate::numerics::layers::log_softmax_backward(&s2s_lp, &d_s2s.scale(1.0 - lambda)),
        );
        max_grad_rel_err(&mut pair, |p| {
            let ctc_lp = row_log_softmax(&p.ctc.logits.value);
            let s2s_lp = row_log_softmax(&p.s2s.logits.value);
            let (lc, _) = ctc_loss(&ctc_lp, &labels).unwrap();
            let (ls, _) = s2s_loss(&s2s_lp, &labels).unwrap();
            jca_loss(lc, ls, lambda).unwrap()
        })
    }));

    results.push(check("loss_mtl", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut combo = MtlCombo {
            pair: LogitPair {
                ctc: LogitHolder::random(5, 4, &mut rng),
                s2s: LogitHolder::random(3, 4, &mut rng),
            },
            predictor: Predictor::new(3, &[], 4, &mut rng),
        };
        let labels = vec![2usize, 3];
        let z = AccentEmbedding::new((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let reference = CoefficientVector::one_hot(4, 1);
        let (lambda, gamma) = (0.3, 0.5);
        zero_grads(&mut combo);
        let ctc_lp = row_log_softmax(&combo.pair.ctc.logits.value);
        let s2s_lp = row_log_softmax(&combo.pair.s2s.logits.value);
        let (_, d_ctc) = ctc_loss(&ctc_lp, &labels).unwrap();
        let (_, d_s2s) = s2s_loss(&s2s_lp, &labels).unwrap();
        let (alpha, pcache) = combo.predictor.forward(&z).unwrap();
        let (_, dalpha) = coeff_mse(&reference, &alpha).unwrap();
        combo.pair.ctc.logits.grad.add_assign(
            &crate::numerics::layers::log_softmax_backward(&ctc_lp, &d_ctc.scale(lambda)),
        );
        combo.pair.s2s.logits.grad.add_assign(
            &crate::numerics::layers::log_softmax_backward(&s2s_lp, &d_s2s.scale(1.0 - lambda)),
        );
        let dalpha_scaled: Vec<f64> = dalpha.iter().map(|g| g * gamma).collect();
        combo.predictor.backward(&pcache, &dalpha_scaled);
        max_grad_rel_err(&mut combo, |c| {
            let ctc_lp = row_log_softmax(&c.pair.ctc.logits.value);
            let s2s_lp = row_log_softmax(&c.pair.s2s.logits.value);
            let (lc, _) = ctc_loss(&ctc_lp, &labels).unwrap();
            let (ls, _) = s2s_loss(&s2s_lp, &labels).unwrap();
            let (alpha, _) = c.predictor.forward(&z).unwrap();
            let (lm, _) = coeff_mse(&reference, &alpha).unwrap();
            mtl_loss(jca_loss(lc, ls, lambda).unwrap(), lm, gamma).unwrap()
        })
    }));

    results
}

/// Worst error of `case` over the seeded instances.
fn check(name: &str, case: impl Fn(u64) -> f64) -> GradCheckResult {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        worst = worst.max(case(1000 + i as u64));
    }
    GradCheckResult {
        name: name.to_string(),
        instances: INSTANCES,
        max_rel_err: worst,
    }
}

/// Free logits treated as parameters so losses can be finite-differenced
/// directly at their inputs.
struct LogitHolder {
    logits: Parameter,
}

impl LogitHolder {
    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        LogitHolder {
            logits: Parameter::from_matrix(random_matrix(rows, cols, rng)),
        }
    }
}

impl Params for LogitHolder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join(prefix, "logits"), &mut self.logits);
    }
}

struct LogitPair {
    ctc: LogitHolder,
    s2s: LogitHolder,
}

impl Params for LogitPair {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.ctc.visit(&join(prefix, "ctc"), f);
        self.s2s.visit(&join(prefix, "s2s"), f);
    }
}

struct MtlCombo {
    pair: LogitPair,
    predictor: Predictor,
}

impl Params for MtlCombo {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.pair.visit(prefix, f);
        self.predictor.visit(&join(prefix, "predictor"), f);
    }
}
