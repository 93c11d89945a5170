//! Synthetic multi-accent corpus. Per-accent distortion is a diagonal scale
//! plus shift of token prototype frames, which is exactly the transformation
//! family the gated adapter can undo, so adaptation gains are measurable at
//! desk scale instead of hoped for.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accents::EmbeddingTable;
use crate::adapters::AccentEmbedding;
use crate::error::{Error, Result};
use crate::losses::FIRST_CONTENT;
use crate::numerics::matrix::Matrix;
use crate::numerics::standard_normal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utt_id: String,
    pub accent: String,
    pub tokens: Vec<usize>,
    pub features: Matrix,
    pub embedding: AccentEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    #[serde(default = "default_n_accents")]
    pub n_accents: usize,
    /// Content token count; ids start at 2 (0 = blank, 1 = eos).
    #[serde(default = "default_vocab_content")]
    pub vocab_content: usize,
    #[serde(default = "default_feat_dim")]
    pub feat_dim: usize,
    #[serde(default = "default_frames_per_token")]
    pub frames_per_token: usize,
    #[serde(default = "default_token_len_range")]
    pub token_len_range: (usize, usize),
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_scale_range")]
    pub accent_scale_range: (f64, f64),
    #[serde(default = "default_shift_range")]
    pub accent_shift_range: (f64, f64),
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_cv_size")]
    pub cv_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_embed_spread")]
    pub embed_spread: f64,
    /// Per-dimension mean/variance normalization of each utterance. Off by
    /// default: it cancels exactly the distortion family this corpus uses,
    /// which would leave nothing for accent adaptation to recover.
    #[serde(default)]
    pub apply_cmvn: bool,
    /// Accent labels excluded from the train split (still present in cv and
    /// test) for unseen-accent evaluation.
    #[serde(default)]
    pub holdout_accents: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_accents() -> usize {
    4
}
fn default_vocab_content() -> usize {
    5
}
fn default_feat_dim() -> usize {
    8
}
fn default_frames_per_token() -> usize {
    3
}
fn default_token_len_range() -> (usize, usize) {
    (2, 6)
}
fn default_noise_sigma() -> f64 {
    0.05
}
fn default_scale_range() -> (f64, f64) {
    (0.5, 2.0)
}
fn default_shift_range() -> (f64, f64) {
    (-1.0, 1.0)
}
fn default_train_size() -> usize {
    400
}
fn default_cv_size() -> usize {
    100
}
fn default_test_size() -> usize {
    100
}
fn default_embed_dim() -> usize {
    8
}
fn default_embed_spread() -> f64 {
    0.1
}

impl Default for CorpusSpec {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_accents < 1
            || self.vocab_content < 1
            || self.feat_dim < 1
            || self.frames_per_token < 1
            || self.train_size < 1
            || self.cv_size < 1
            || self.test_size < 1
            || self.embed_dim < 1
        {
            return Err(Error::Config("corpus counts must be >= 1".into()));
        }
        let (lo, hi) = self.token_len_range;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!(
                "token length range ({lo}, {hi}) is not well ordered"
            )));
        }
        if self.accent_scale_range.1 < self.accent_scale_range.0
            || self.accent_shift_range.1 < self.accent_shift_range.0
        {
            return Err(Error::Config("accent distortion ranges must be well ordered".into()));
        }
        if self.accent_scale_range.0 <= 0.0 {
            return Err(Error::Config("accent scales must be positive".into()));
        }
        if self.noise_sigma < 0.0 || self.embed_spread < 0.0 {
            return Err(Error::Config("noise parameters must be nonnegative".into()));
        }
        // frames_per_token >= 2 would also work for repeat-free sequences;
        // require T = L*fpt >= 2L+1, i.e. fpt >= 3 when L can be 1
        if self.frames_per_token * lo < 2 * lo + 1 {
            return Err(Error::Config(format!(
                "frames_per_token {} too small for alignment feasibility",
                self.frames_per_token
            )));
        }
        Ok(())
    }

    /// Total vocabulary including blank and eos.
    pub fn vocab_size(&self) -> usize {
        self.vocab_content + FIRST_CONTENT
    }

    pub fn accent_label(a: usize) -> String {
        format!("acc{a}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub cv: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub spec: CorpusSpec,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "cv" => Ok(&self.cv),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!("unknown split {other:?}"))),
        }
    }

    pub fn embedding_table(&self) -> EmbeddingTable {
        let mut table = EmbeddingTable::new();
        for u in self.train.iter().chain(&self.cv).chain(&self.test) {
            table
                .push(u.utt_id.clone(), u.accent.clone(), u.embedding.clone())
                .expect("corpus utt_ids unique");
        }
        table
    }

    pub fn train_embedding_table(&self) -> EmbeddingTable {
        let mut table = EmbeddingTable::new();
        for u in &self.train {
            table
                .push(u.utt_id.clone(), u.accent.clone(), u.embedding.clone())
                .expect("corpus utt_ids unique");
        }
        table
    }
}

/// Per-accent diagonal distortion parameters.
#[derive(Clone, Debug)]
pub struct AccentDistortion {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Deterministic generation: token prototypes, per-accent distortions and
/// embedding anchors all derive from the spec seed.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let (corpus, _, _) = generate_corpus_with_internals(spec)?;
    Ok(corpus)
}

/// Also returns the token prototypes and accent distortions for tests that
/// verify the distortion family is adapter-recoverable.
pub fn generate_corpus_with_internals(
    spec: &CorpusSpec,
) -> Result<(Corpus, Vec<Vec<f64>>, Vec<AccentDistortion>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let prototypes: Vec<Vec<f64>> = (0..spec.vocab_content)
        .map(|_| (0..spec.feat_dim).map(|_| standard_normal(&mut rng)).collect())
        .collect();

    let distortions: Vec<AccentDistortion> = (0..spec.n_accents)
        .map(|_| AccentDistortion {
            scale: (0..spec.feat_dim)
                .map(|_| rng.gen_range(spec.accent_scale_range.0..=spec.accent_scale_range.1))
                .collect(),
            shift: (0..spec.feat_dim)
                .map(|_| rng.gen_range(spec.accent_shift_range.0..=spec.accent_shift_range.1))
                .collect(),
        })
        .collect();

    let embed_anchors: Vec<Vec<f64>> = (0..spec.n_accents)
        .map(|_| (0..spec.embed_dim).map(|_| standard_normal(&mut rng)).collect())
        .collect();

    let train_accents: Vec<usize> = (0..spec.n_accents)
        .filter(|a| !spec.holdout_accents.contains(&CorpusSpec::accent_label(*a)))
        .collect();
    if train_accents.is_empty() {
        return Err(Error::Config("every accent is held out of training".into()));
    }

    let make_split = |name: &str, size: usize, accents: &[usize], rng: &mut ChaCha8Rng| {
        let mut utts = Vec::with_capacity(size);
        for i in 0..size {
            let a = accents[i % accents.len()];
            let len = rng.gen_range(spec.token_len_range.0..=spec.token_len_range.1);
            let tokens: Vec<usize> = (0..len)
                .map(|_| FIRST_CONTENT + rng.gen_range(0..spec.vocab_content))
                .collect();
            let d = &distortions[a];
            let t_len = len * spec.frames_per_token;
            let mut features = Matrix::zeros(t_len, spec.feat_dim);
            for (j, &tok) in tokens.iter().enumerate() {
                let proto = &prototypes[tok - FIRST_CONTENT];
                for f in 0..spec.frames_per_token {
                    let row = features.row_mut(j * spec.frames_per_token + f);
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = d.scale[c] * proto[c]
                            + d.shift[c]
                            + spec.noise_sigma * standard_normal(rng);
                    }
                }
            }
            if spec.apply_cmvn {
                features = cmvn(&features);
            }
            let embedding: Vec<f64> = embed_anchors[a]
                .iter()
                .map(|&v| v + spec.embed_spread * standard_normal(rng))
                .collect();
            utts.push(Utterance {
                utt_id: format!("{name}_{i:05}"),
                accent: CorpusSpec::accent_label(a),
                tokens,
                features,
                embedding: AccentEmbedding::new(embedding).expect("finite by construction"),
            });
        }
        utts
    };

    let all_accents: Vec<usize> = (0..spec.n_accents).collect();
    let train = make_split("train", spec.train_size, &train_accents, &mut rng);
    let cv = make_split("cv", spec.cv_size, &all_accents, &mut rng);
    let test = make_split("test", spec.test_size, &all_accents, &mut rng);

    Ok((
        Corpus {
            train,
            cv,
            test,
            spec: spec.clone(),
        },
        prototypes,
        distortions,
    ))
}

/// Per-dimension mean subtraction and variance normalization over the
/// utterance; population variance, eps = 1e-8.
pub fn cmvn(features: &Matrix) -> Matrix {
    const EPS: f64 = 1e-8;
    let t = features.rows() as f64;
    let mut out = features.clone();
    for c in 0..features.cols() {
        let mut mean = 0.0;
        for r in 0..features.rows() {
            mean += features.get(r, c);
        }
        mean /= t;
        let mut var = 0.0;
        for r in 0..features.rows() {
            let d = features.get(r, c) - mean;
            var += d * d;
        }
        var /= t;
        let inv = 1.0 / (var + EPS).sqrt();
        for r in 0..features.rows() {
            out.set(r, c, (features.get(r, c) - mean) * inv);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct UtteranceLine {
    utt_id: String,
    accent: String,
    tokens: Vec<usize>,
    features: Vec<Vec<f64>>,
}

fn write_split(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in utts {
        let line = UtteranceLine {
            utt_id: u.utt_id.clone(),
            accent: u.accent.clone(),
            tokens: u.tokens.clone(),
            features: (0..u.features.rows()).map(|r| u.features.row(r).to_vec()).collect(),
        };
        let json = serde_json::to_string(&line).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(out, "{json}")?;
    }
    Ok(())
}

fn read_split(path: &Path, embeddings: &EmbeddingTable) -> Result<Vec<Utterance>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut utts = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parsed: UtteranceLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let rows = parsed.features.len();
        let cols = parsed.features.first().map(|r| r.len()).unwrap_or(0);
        if parsed.features.iter().any(|r| r.len() != cols) {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("ragged feature rows in {}", parsed.utt_id),
            });
        }
        let features = Matrix::from_vec(rows, cols, parsed.features.into_iter().flatten().collect());
        let record = embeddings.get(&parsed.utt_id).ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: format!("no embedding for {}", parsed.utt_id),
        })?;
        utts.push(Utterance {
            utt_id: parsed.utt_id,
            accent: parsed.accent,
            tokens: parsed.tokens,
            features,
            embedding: record.embedding.clone(),
        });
    }
    Ok(utts)
}

/// Persists splits as JSON lines plus the embeddings CSV and the spec.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_split(&dir.join("train.jsonl"), &corpus.train)?;
    write_split(&dir.join("cv.jsonl"), &corpus.cv)?;
    write_split(&dir.join("test.jsonl"), &corpus.test)?;
    crate::accents::save_embeddings(&corpus.embedding_table(), &dir.join("embeddings.csv"))?;
    let spec_toml = toml::to_string_pretty(&corpus.spec).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(dir.join("corpus.toml"), spec_toml)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let spec_text = std::fs::read_to_string(dir.join("corpus.toml"))?;
    let spec: CorpusSpec = toml::from_str(&spec_text).map_err(|e| Error::Serde(e.to_string()))?;
    let embeddings = crate::accents::load_embeddings(&dir.join("embeddings.csv"))?;
    Ok(Corpus {
        train: read_split(&dir.join("train.jsonl"), &embeddings)?,
        cv: read_split(&dir.join("cv.jsonl"), &embeddings)?,
        test: read_split(&dir.join("test.jsonl"), &embeddings)?,
        spec,
    })
}

/// Token-weighted per-accent utterance counts, useful for sanity checks.
pub fn accent_counts(utts: &[Utterance]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for u in utts {
        *counts.entry(u.accent.clone()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_accents: 3,
            vocab_content: 4,
            feat_dim: 5,
            frames_per_token: 3,
            token_len_range: (2, 3),
            noise_sigma: 0.05,
            train_size: 12,
            cv_size: 6,
            test_size: 6,
            embed_dim: 4,
            embed_spread: 0.1,
            seed: 3,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn determinism() {
        let spec = small_spec();
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clean_corpus_is_tiled_prototypes() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        spec.accent_scale_range = (1.0, 1.0);
        spec.accent_shift_range = (0.0, 0.0);
        let (corpus, prototypes, _) = generate_corpus_with_internals(&spec).unwrap();
        for u in &corpus.train {
            for (j, &tok) in u.tokens.iter().enumerate() {
                let proto = &prototypes[tok - FIRST_CONTENT];
                for f in 0..spec.frames_per_token {
                    let row = u.features.row(j * spec.frames_per_token + f);
                    for (a, b) in row.iter().zip(proto) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn ctc_feasibility_margin() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        for u in corpus.train.iter().chain(&corpus.cv).chain(&corpus.test) {
            assert!(u.features.rows() >= 2 * u.tokens.len() + 1, "{}", u.utt_id);
            assert!(u.tokens.iter().all(|&t| t >= FIRST_CONTENT));
            assert!(
                u.features.rows() >= crate::losses::ctc_min_frames(&u.tokens),
                "{}",
                u.utt_id
            );
        }
    }

    #[test]
    fn unique_ids_across_splits() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let table = corpus.embedding_table();
        assert_eq!(
            table.len(),
            corpus.train.len() + corpus.cv.len() + corpus.test.len()
        );
    }

    #[test]
    fn embeddings_cluster_by_accent() {
        let mut spec = small_spec();
        spec.n_accents = 4;
        spec.train_size = 40;
        spec.embed_spread = 0.05;
        spec.embed_dim = 6;
        let corpus = generate_corpus(&spec).unwrap();
        let table = corpus.train_embedding_table();
        let model = crate::accents::kmeans_fit(&table, 4, 0, 100).unwrap();
        let mut accent_cluster: BTreeMap<String, usize> = BTreeMap::new();
        for r in table.records() {
            let c = crate::accents::kmeans_assign(&model, &r.embedding).unwrap();
            let e = accent_cluster.entry(r.accent.clone()).or_insert(c);
            assert_eq!(*e, c, "accent {} split across clusters", r.accent);
        }
        let distinct: std::collections::BTreeSet<usize> = accent_cluster.values().copied().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn holdout_excluded_from_train_only() {
        let mut spec = small_spec();
        spec.holdout_accents = vec!["acc2".into()];
        let corpus = generate_corpus(&spec).unwrap();
        assert!(corpus.train.iter().all(|u| u.accent != "acc2"));
        assert!(corpus.cv.iter().any(|u| u.accent == "acc2"));
        assert!(corpus.test.iter().any(|u| u.accent == "acc2"));
    }

    #[test]
    fn distortion_is_affinely_recoverable() {
        // on a noiseless corpus the inverse transform (1 + f) ⊙ x + g with
        // f = 1/s - 1 and g = -b/s restores the prototypes, i.e. the accent
        // distortion lies in the adapters' residual scale/shift family
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        let (corpus, prototypes, distortions) = generate_corpus_with_internals(&spec).unwrap();
        for u in &corpus.train {
            let a: usize = u.accent.strip_prefix("acc").unwrap().parse().unwrap();
            let d = &distortions[a];
            for (j, &tok) in u.tokens.iter().enumerate() {
                let proto = &prototypes[tok - FIRST_CONTENT];
                let row = u.features.row(j * spec.frames_per_token);
                for c in 0..spec.feat_dim {
                    let f = 1.0 / d.scale[c] - 1.0;
                    let g = -d.shift[c] / d.scale[c];
                    let restored = (1.0 + f) * row[c] + g;
                    assert!((restored - proto[c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn cmvn_examples() {
        let x = Matrix::from_rows(&[vec![1.0, 7.0], vec![3.0, 7.0]]);
        let y = cmvn(&x);
        assert!((y.get(0, 0) + 1.0).abs() < 1e-7);
        assert!((y.get(1, 0) - 1.0).abs() < 1e-7);
        // constant dimension maps to zero
        assert!(y.get(0, 1).abs() < 1e-9);
        assert!(y.get(1, 1).abs() < 1e-9);
    }

    #[test]
    fn cmvn_moments_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::from_vec(10, 3, (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let y = cmvn(&x);
        for c in 0..3 {
            let mean: f64 = (0..10).map(|r| y.get(r, c)).sum::<f64>() / 10.0;
            let var: f64 = (0..10).map(|r| (y.get(r, c) - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
        // the eps guard perturbs a second pass by about eps/2 relative,
        // so idempotence holds to ~1e-8, not exactly
        let z = cmvn(&y);
        for (a, b) in y.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempdir().unwrap();
        let corpus = generate_corpus(&small_spec()).unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus, loaded);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = small_spec();
        spec.token_len_range = (3, 2);
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
        let mut spec = small_spec();
        spec.frames_per_token = 2;
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
        let mut spec = small_spec();
        spec.accent_scale_range = (-1.0, 1.0);
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
    }
}
