//! Versioned on-disk model snapshots. JSON keeps floats bit-exact through
//! shortest-round-trip formatting, so save/load and averaging are testable to
//! the last bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accents::ClusterModel;
use crate::error::{Error, Result};

use super::Model;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: Model,
    /// Frozen clustering used for coefficient targets, when MTL is active.
    pub cluster: Option<ClusterModel>,
    /// Accent label to cluster index, recorded at fit time.
    pub accent_to_cluster: BTreeMap<String, usize>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model,
            cluster: None,
            accent_to_cluster: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut writer = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut writer, self).map_err(|e| Error::Serde(e.to_string()))?;
        use std::io::Write;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}

/// Arithmetic mean of every parameter tensor across checkpoints with
/// identical architecture. Non-parameter state (config, clustering) is taken
/// from the first checkpoint.
pub fn average_checkpoints(paths: &[std::path::PathBuf]) -> Result<Checkpoint> {
    if paths.is_empty() {
        return Err(Error::Usage("no checkpoints to average".into()));
    }
    let mut base = Checkpoint::load(&paths[0])?;
    let mut sums = crate::numerics::param::collect_values(&mut base.model);
    for path in &paths[1..] {
        let mut other = Checkpoint::load(path)?;
        let other_values = crate::numerics::param::collect_values(&mut other.model);
        if other_values.len() != sums.len() {
            return Err(Error::Config(format!(
                "checkpoint {} has a different architecture",
                path.display()
            )));
        }
        for ((name, acc), (other_name, value)) in sums.iter_mut().zip(&other_values) {
            if name != other_name || acc.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint {}: parameter {other_name} does not match {name}",
                    path.display()
                )));
            }
            acc.add_assign(value);
        }
    }
    let inv = 1.0 / paths.len() as f64;
    for (_, value) in &mut sums {
        *value = value.scale(inv);
    }
    crate::numerics::param::load_values(&mut base.model, &sums)?;
    Ok(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::param::Params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn toy() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut config = ModelConfig::toy(3, 5);
        config.enc_layers = 2;
        config.dec_layers = 1;
        config.d_model = 4;
        config.ffn_dim = 6;
        Model::new(config, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = toy();
        let before = crate::numerics::param::collect_values(&mut model);
        Checkpoint::new(model).save(&path).unwrap();
        let mut loaded = Checkpoint::load(&path).unwrap();
        let after = crate::numerics::param::collect_values(&mut loaded.model);
        assert_eq!(before, after);
    }

    #[test]
    fn average_of_one_is_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = toy();
        let before = crate::numerics::param::collect_values(&mut model);
        Checkpoint::new(model).save(&path).unwrap();
        let mut avg = average_checkpoints(&[path]).unwrap();
        assert_eq!(before, crate::numerics::param::collect_values(&mut avg.model));
    }

    #[test]
    fn average_of_two_is_midpoint() {
        let dir = tempdir().unwrap();
        let p0 = dir.path().join("a.ckpt");
        let p1 = dir.path().join("b.ckpt");
        let mut m0 = toy();
        let mut m1 = m0.clone();
        m0.visit("", &mut |_, p| {
            p.value = crate::numerics::matrix::Matrix::zeros(p.value.rows(), p.value.cols())
        });
        m1.visit("", &mut |_, p| {
            p.value = crate::numerics::matrix::Matrix::filled(p.value.rows(), p.value.cols(), 2.0)
        });
        Checkpoint::new(m0).save(&p0).unwrap();
        Checkpoint::new(m1).save(&p1).unwrap();
        let mut avg = average_checkpoints(&[p0, p1]).unwrap();
        avg.model.visit("", &mut |name, p| {
            for &v in p.value.data() {
                assert_eq!(v, 1.0, "{name}");
            }
        });
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ckpt = Checkpoint::new(toy());
        ckpt.format_version = 99;
        ckpt.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Config(_))));
    }
}
