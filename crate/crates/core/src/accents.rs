//! Accent embedding provisioning (synthetic generator and CSV loader),
//! K-means clustering and reference-coefficient targets for the MTL penalty.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AccentEmbedding, CoefficientVector};
use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::standard_normal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub utt_id: String,
    pub accent: String,
    pub embedding: AccentEmbedding,
}

/// Per-utterance embeddings with accent labels. Utterance ids are unique and
/// every embedding has the same dimension.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        EmbeddingTable { records: Vec::new() }
    }

    pub fn push(&mut self, utt_id: String, accent: String, embedding: AccentEmbedding) -> Result<()> {
        if let Some(first) = self.records.first() {
            if first.embedding.dim() != embedding.dim() {
                return Err(Error::Input(format!(
                    "embedding for {utt_id} has dimension {}, table has {}",
                    embedding.dim(),
                    first.embedding.dim()
                )));
            }
        }
        if self.records.iter().any(|r| r.utt_id == utt_id) {
            return Err(Error::Input(format!("duplicate utt_id {utt_id}")));
        }
        self.records.push(EmbeddingRecord { utt_id, accent, embedding });
        Ok(())
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.embedding.dim())
    }

    pub fn get(&self, utt_id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.utt_id == utt_id)
    }

    pub fn accents(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.accent.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

/// Frozen K-means model: centroids plus fit diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// n x embed_dim.
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each Lloyd iteration (non-increasing).
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.rows()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Matrix, point: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows() {
        let d = sq_dist(centroids.row(c), point);
        // strict inequality keeps the lowest index on ties
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Lloyd's algorithm with seeded distinct-point initialization. Empty
/// clusters are reseeded from the point farthest from its centroid.
pub fn kmeans_fit(table: &EmbeddingTable, n: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    if n < 1 {
        return Err(Error::Config("cluster count must be >= 1".into()));
    }
    let points: Vec<&[f64]> = table.records.iter().map(|r| r.embedding.values()).collect();
    if points.len() < n {
        return Err(Error::Input(format!(
            "{} points cannot form {n} clusters",
            points.len()
        )));
    }
    let dim = table.dim().expect("nonempty table has a dimension");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng);
    // prefer value-distinct seeds; fall back to arbitrary points if the data
    // has fewer distinct values than clusters
    let mut seeds: Vec<usize> = Vec::with_capacity(n);
    for &i in &order {
        if seeds.len() == n {
            break;
        }
        if seeds.iter().all(|&j| points[j] != points[i]) {
            seeds.push(i);
        }
    }
    for &i in &order {
        if seeds.len() == n {
            break;
        }
        if !seeds.contains(&i) {
            seeds.push(i);
        }
    }

    let mut centroids = Matrix::zeros(n, dim);
    for (c, &i) in seeds.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(points[i]);
    }

    let mut assignments = vec![usize::MAX; points.len()];
    let mut inertia = f64::INFINITY;
    let mut history = Vec::new();
    let mut iterations_run = 0;
    for _ in 0..max_iter {
        // assignment step
        let mut changed = false;
        let mut new_inertia = 0.0;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(&centroids, p);
            if assignments[i] != c {
                changed = true;
                assignments[i] = c;
            }
            dists[i] = d;
            new_inertia += d;
        }
        iterations_run += 1;
        debug_assert!(
            new_inertia <= inertia + 1e-9,
            "Lloyd iteration increased inertia"
        );
        inertia = new_inertia;
        history.push(inertia);
        if !changed && iterations_run > 1 {
            break;
        }

        // update step
        let mut sums = Matrix::zeros(n, dim);
        let mut counts = vec![0usize; n];
        for (i, p) in points.iter().enumerate() {
            let c = assignments[i];
            for (s, &v) in sums.row_mut(c).iter_mut().zip(*p) {
                *s += v;
            }
            counts[c] += 1;
        }
        for c in 0..n {
            if counts[c] == 0 {
                // reseed from the point farthest from its centroid
                let far = dists
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                centroids.row_mut(c).copy_from_slice(points[far]);
                dists[far] = 0.0;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }

    Ok(ClusterModel {
        centroids,
        inertia,
        iterations_run,
        inertia_history: history,
    })
}

/// Nearest centroid under squared Euclidean distance, lowest index on ties.
pub fn kmeans_assign(model: &ClusterModel, z: &AccentEmbedding) -> Result<usize> {
    if z.dim() != model.centroids.cols() {
        return Err(Error::Dimension(format!(
            "embedding dimension {} != centroid dimension {}",
            z.dim(),
            model.centroids.cols()
        )));
    }
    Ok(nearest(&model.centroids, z.values()).0)
}

/// How a cluster assignment becomes the coefficient training target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    Hard,
    Uniform,
    Soft { tau: f64 },
}

pub fn make_reference_targets(
    model: &ClusterModel,
    z: &AccentEmbedding,
    mode: ReferenceMode,
) -> Result<CoefficientVector> {
    let n = model.n_clusters();
    match mode {
        ReferenceMode::Hard => {
            let k = kmeans_assign(model, z)?;
            Ok(CoefficientVector::one_hot(n, k))
        }
        ReferenceMode::Uniform => Ok(CoefficientVector::uniform(n)),
        ReferenceMode::Soft { tau } => {
            if !(tau > 0.0) {
                return Err(Error::Config(format!("soft target temperature must be > 0, got {tau}")));
            }
            if z.dim() != model.centroids.cols() {
                return Err(Error::Dimension(format!(
                    "embedding dimension {} != centroid dimension {}",
                    z.dim(),
                    model.centroids.cols()
                )));
            }
            let mut logits: Vec<f64> = (0..n)
                .map(|c| -sq_dist(model.centroids.row(c), z.values()) / tau)
                .collect();
            crate::numerics::matrix::softmax_in_place(&mut logits);
            Ok(CoefficientVector::new(logits).expect("softmax yields a simplex vector"))
        }
    }
}

/// Synthetic stand-in for an accent-identification network: per-accent
/// Gaussian prototype plus isotropic jitter.
pub fn synth_embeddings(
    n_accents: usize,
    embed_dim: usize,
    per_accent: usize,
    spread: f64,
    seed: u64,
) -> EmbeddingTable {
    assert!(n_accents >= 1 && embed_dim >= 1 && per_accent >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = accent_prototypes(n_accents, embed_dim, &mut rng);
    let mut table = EmbeddingTable::new();
    for (a, proto) in prototypes.iter().enumerate() {
        let accent = format!("acc{a}");
        for i in 0..per_accent {
            let values: Vec<f64> = proto
                .iter()
                .map(|&p| p + spread * standard_normal(&mut rng))
                .collect();
            table
                .push(
                    format!("{accent}_utt{i:04}"),
                    accent.clone(),
                    AccentEmbedding::new(values).expect("finite by construction"),
                )
                .expect("generated ids unique");
        }
    }
    table
}

/// Seeded Gaussian prototype vectors, one per accent.
pub fn accent_prototypes(n_accents: usize, embed_dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n_accents)
        .map(|_| (0..embed_dim).map(|_| standard_normal(rng)).collect())
        .collect()
}

/// CSV with header `utt_id,accent,e0,...,e{D-1}`. Values print with 17
/// significant digits so a save/load round trip is exact.
pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let dim = table.dim().unwrap_or(0);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("utt_id".to_string())
        .chain(std::iter::once("accent".to_string()))
        .chain((0..dim).map(|i| format!("e{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for r in table.records() {
        let vals: Vec<String> = r.embedding.values().iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{},{},{}", r.utt_id, r.accent, vals.join(","))?;
    }
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "utt_id" || cols[1] != "accent" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header utt_id,accent,e0,..., got {header:?}"),
        });
    }
    let dim = cols.len() - 2;
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("e{i}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column e{i}, got {c:?}"),
            });
        }
    }
    let mut table = EmbeddingTable::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, got {}", dim + 2, fields.len()),
            });
        }
        let values: Vec<f64> = fields[2..]
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("bad float {s:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        let emb = AccentEmbedding::new(values).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        table
            .push(fields[0].to_string(), fields[1].to_string(), emb)
            .map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
    }
    Ok(table)
}
