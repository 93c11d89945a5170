//! Staged training: baseline fit, zero-init adapter injection inside the
//! frozen baseline, and full finetuning, all on plain gradient descent with
//! the warmup schedule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::accents::{kmeans_fit, make_reference_targets};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::losses::{coeff_mse, ctc_loss, s2s_loss};
use crate::model::checkpoint::Checkpoint;
use crate::model::Model;
use crate::numerics::param::{zero_grads, Params};

use super::eval::split_metrics;
use super::{noam_lr, write_metrics_csv, MetricsRow, MtlMode, Stage, TrainConfig};

const KMEANS_RESTARTS: u64 = 8;

fn check_model_matches_corpus(config: &TrainConfig, corpus: &Corpus) -> Result<()> {
    if config.model.feat_dim != corpus.spec.feat_dim {
        return Err(Error::Config(format!(
            "model feat_dim {} != corpus feat_dim {}",
            config.model.feat_dim, corpus.spec.feat_dim
        )));
    }
    if config.model.vocab_size != corpus.spec.vocab_size() {
        return Err(Error::Config(format!(
            "model vocab_size {} != corpus vocab size {}",
            config.model.vocab_size,
            corpus.spec.vocab_size()
        )));
    }
    if config.model.max_len < corpus.spec.token_len_range.1 {
        return Err(Error::Config(format!(
            "model max_len {} < longest corpus sequence {}",
            config.model.max_len, corpus.spec.token_len_range.1
        )));
    }
    Ok(())
}

/// Majority cluster per accent over the training embeddings.
fn accent_cluster_map(
    cluster: &crate::accents::ClusterModel,
    corpus: &Corpus,
) -> Result<BTreeMap<String, usize>> {
    let mut votes: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    for u in &corpus.train {
        let c = crate::accents::kmeans_assign(cluster, &u.embedding)?;
        *votes.entry(u.accent.clone()).or_default().entry(c).or_insert(0) += 1;
    }
    Ok(votes
        .into_iter()
        .map(|(accent, counts)| {
            let best = counts
                .into_iter()
                .max_by_key(|&(c, n)| (n, std::cmp::Reverse(c)))
                .map(|(c, _)| c)
                .expect("accent has at least one utterance");
            (accent, best)
        })
        .collect())
}

/// Runs one training stage and writes per-epoch checkpoints plus the metrics
/// CSV into `out_dir`. Returns the final checkpoint and all metric rows
/// (epoch 0 holds the pre-training state).
pub fn train_stage(
    config: &TrainConfig,
    corpus: &Corpus,
    init: Option<Checkpoint>,
    out_dir: &Path,
) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    config.validate()?;
    check_model_matches_corpus(config, corpus)?;
    std::fs::create_dir_all(out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cluster = None;
    let mut accent_to_cluster = BTreeMap::new();

    let mut model: Model = match config.stage {
        Stage::Baseline => {
            if init.is_some() {
                return Err(Error::Usage("baseline stage starts from scratch, not a checkpoint".into()));
            }
            Model::new(config.model.clone(), &mut rng)?
        }
        Stage::InjectFrozen => {
            let ckpt = init.ok_or_else(|| {
                Error::Usage("inject_frozen requires a baseline checkpoint (--init)".into())
            })?;
            if ckpt.model.has_adapter() {
                return Err(Error::Usage("checkpoint already contains adapters".into()));
            }
            let mut model = ckpt.model;
            if model.config != config.model {
                return Err(Error::Config("model configuration differs from checkpoint".into()));
            }
            let spec = config.adapter.clone();
            if spec.embed_dim != corpus.spec.embed_dim {
                return Err(Error::Config(format!(
                    "adapter embed_dim {} != corpus embed_dim {}",
                    spec.embed_dim, corpus.spec.embed_dim
                )));
            }
            if spec.mode == crate::adapters::AdapterMode::None {
                return Err(Error::Config("inject_frozen requires an adapter mode".into()));
            }
            // separate stream so baseline parameters and the data order are
            // unaffected by adapter initialization
            let mut adapter_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ad4f);
            model.inject_adapters(spec.clone(), &mut adapter_rng)?;

            if config.mtl_mode != MtlMode::None {
                if !spec.uses_predictor() {
                    return Err(Error::Config(
                        "mtl regularization needs a coefficient predictor (multi or combined mode)".into(),
                    ));
                }
                let table = corpus.train_embedding_table();
                // Lloyd with random point init can merge two tight accent
                // clusters; deterministic restarts keep the best of several
                // seeded fits
                let mut fitted = kmeans_fit(&table, spec.n_bases, config.seed, 100)?;
                for restart in 1..KMEANS_RESTARTS {
                    let candidate =
                        kmeans_fit(&table, spec.n_bases, config.seed.wrapping_add(restart), 100)?;
                    if candidate.inertia < fitted.inertia {
                        fitted = candidate;
                    }
                }
                accent_to_cluster = accent_cluster_map(&fitted, corpus)?;
                cluster = Some(fitted);
            }
            model
        }
        Stage::FinetuneAll => {
            let ckpt = init.ok_or_else(|| {
                Error::Usage("finetune_all requires an injected checkpoint (--init)".into())
            })?;
            if !ckpt.model.has_adapter() {
                return Err(Error::Usage("finetune_all requires a checkpoint with adapters".into()));
            }
            cluster = ckpt.cluster;
            accent_to_cluster = ckpt.accent_to_cluster;
            ckpt.model
        }
    };

    if config.mtl_mode != MtlMode::None && cluster.is_none() {
        return Err(Error::Config(
            "mtl regularization requires the clustering fitted at injection".into(),
        ));
    }

    let frozen = |name: &str| config.stage == Stage::InjectFrozen && !name.starts_with("adapter");
    let reference_mode = config.reference_mode();
    let lambda = config.lambda_ctc;
    let gamma = config.gamma_mtl;

    let mut metrics = Vec::new();
    let record_epoch = |model: &Model, epoch: usize, metrics: &mut Vec<MetricsRow>| -> Result<()> {
        for (split, utts) in [("train", &corpus.train), ("cv", &corpus.cv)] {
            let row = split_metrics(
                model,
                cluster.as_ref(),
                reference_mode,
                utts,
                lambda,
                gamma,
                epoch,
                split,
            )?;
            metrics.push(row);
        }
        Ok(())
    };

    record_epoch(&model, 0, &mut metrics)?;
    save_epoch(&model, &cluster, &accent_to_cluster, out_dir, 0)?;

    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            zero_grads(&mut model);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let u = &corpus.train[i];
                let z = model.has_adapter().then_some(&u.embedding);
                let (out, _, cache) = model.forward(&u.features, &u.tokens, z)?;
                let (_, d_ctc) = ctc_loss(&out.ctc_log_probs, &u.tokens)?;
                let (_, d_s2s) = s2s_loss(&out.s2s_log_probs, &u.tokens)?;
                let d_alpha = match (&cluster, &out.alpha, reference_mode) {
                    (Some(cl), Some(alpha), Some(mode)) => {
                        let reference = make_reference_targets(cl, &u.embedding, mode)?;
                        let (_, grad) = coeff_mse(&reference, alpha)?;
                        Some(grad.iter().map(|g| g * gamma * scale).collect::<Vec<f64>>())
                    }
                    _ => None,
                };
                model.backward(
                    &cache,
                    &d_ctc.scale(lambda * scale),
                    &d_s2s.scale((1.0 - lambda) * scale),
                    d_alpha.as_deref(),
                );
            }
            step += 1;
            let lr = noam_lr(step, config.base_lr, config.model.d_model, config.warmup_steps);
            model.visit("", &mut |name, p| {
                if frozen(name) {
                    // frozen parameters stay bit-identical; discard any
                    // gradient that reached them
                    p.zero_grad();
                } else {
                    p.value.add_assign_scaled(&p.grad, -lr);
                }
            });
        }
        record_epoch(&model, epoch, &mut metrics)?;
        save_epoch(&model, &cluster, &accent_to_cluster, out_dir, epoch)?;
    }

    write_metrics_csv(&out_dir.join("metrics.csv"), &metrics)?;
    let mut final_ckpt = Checkpoint::new(model);
    final_ckpt.cluster = cluster;
    final_ckpt.accent_to_cluster = accent_to_cluster;
    Ok((final_ckpt, metrics))
}

fn save_epoch(
    model: &Model,
    cluster: &Option<crate::accents::ClusterModel>,
    accent_to_cluster: &BTreeMap<String, usize>,
    out_dir: &Path,
    epoch: usize,
) -> Result<()> {
    let mut ckpt = Checkpoint::new(model.clone());
    ckpt.cluster = cluster.clone();
    ckpt.accent_to_cluster = accent_to_cluster.clone();
    ckpt.save(&epoch_path(out_dir, epoch))
}

pub fn epoch_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Paths of the last `k` epoch checkpoints under `out_dir`, ascending.
pub fn last_epoch_paths(out_dir: &Path, k: usize) -> Result<Vec<PathBuf>> {
    let mut epochs: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(out_dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(num) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(e) = num.parse::<usize>() {
                epochs.push((e, path));
            }
        }
    }
    if epochs.len() < k {
        return Err(Error::Usage(format!(
            "requested last {k} checkpoints but only {} exist",
            epochs.len()
        )));
    }
    epochs.sort_by_key(|(e, _)| *e);
    Ok(epochs.split_off(epochs.len() - k).into_iter().map(|(_, p)| p).collect())
}
