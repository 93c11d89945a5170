//! Accent adapter layers: the gated scale/shift adapter, the multi-basis
//! adapter with sandglass projections, the coefficient predictor, and their
//! composition. Adapters return a contribution that the encoder block wraps
//! with a residual connection: block input becomes h + A(h, z).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{Activation, ActivationCache, LayerNorm, LayerNormCache, Linear, LinearCache};
use crate::numerics::matrix::{softmax_in_place, Matrix};
use crate::numerics::param::{join, Parameter, Params};

/// Utterance-level conditioning vector z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccentEmbedding {
    values: Vec<f64>,
}

impl AccentEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("accent embedding must be nonempty and finite".into()));
        }
        Ok(AccentEmbedding { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn as_row(&self) -> Matrix {
        Matrix::row_vector(&self.values)
    }
}

/// Simplex vector of basis interpolation weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    values: Vec<f64>,
}

impl CoefficientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Input("coefficients must be nonnegative".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("coefficients must sum to 1, got {sum}")));
        }
        Ok(CoefficientVector { values })
    }

    pub fn uniform(n: usize) -> Self {
        CoefficientVector {
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut values = vec![0.0; n];
        values[k] = 1.0;
        CoefficientVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Index of the largest coefficient (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    None,
    Gated,
    Multi,
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connection {
    ScalingOnly,
    ShiftingOnly,
    Both,
}

/// Architecture hyperparameters for adapter injection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub mode: AdapterMode,
    /// 1-based encoder block indices.
    pub positions: Vec<usize>,
    #[serde(default = "default_n_bases")]
    pub n_bases: usize,
    #[serde(default = "default_connection")]
    pub connection: Connection,
    /// Sandglass encoded dimension. The reference scale uses 128 at
    /// d_model 512; 0 means "pick from d_model at injection" via
    /// `default_bottleneck`.
    #[serde(default)]
    pub bottleneck: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub predictor_hidden: Vec<usize>,
}

fn default_n_bases() -> usize {
    4
}

fn default_connection() -> Connection {
    Connection::Both
}

pub fn default_bottleneck(d_model: usize) -> usize {
    (d_model / 4).max(4)
}

impl AdapterSpec {
    pub fn disabled() -> Self {
        AdapterSpec {
            mode: AdapterMode::None,
            positions: vec![],
            n_bases: 4,
            connection: Connection::Both,
            bottleneck: 4,
            embed_dim: 0,
            predictor_hidden: vec![],
        }
    }

    pub fn validate(&self, enc_layers: usize) -> Result<()> {
        if self.mode == AdapterMode::None {
            return Ok(());
        }
        if self.positions.is_empty() {
            return Err(Error::Config("adapter enabled but no positions given".into()));
        }
        for &p in &self.positions {
            if p < 1 || p > enc_layers {
                return Err(Error::Config(format!(
                    "adapter position {p} outside 1..={enc_layers}"
                )));
            }
        }
        let mut sorted = self.positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.positions.len() {
            return Err(Error::Config("duplicate adapter positions".into()));
        }
        if self.n_bases < 1 {
            return Err(Error::Config("n_bases must be >= 1".into()));
        }
        // bottleneck 0 is the "derive from d_model" marker resolved at
        // injection, so any value is acceptable here
        if self.embed_dim < 1 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn uses_predictor(&self) -> bool {
        matches!(self.mode, AdapterMode::Multi | AdapterMode::Combined)
    }
}

/// A_g(h, z) = f(z) ⊙ h + g(z) with f and g single dense layers under tanh.
/// All four parameter tensors start at zero so the injected adapter is the
/// identity through the residual wrap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GatedAdapter {
    pub wf: Parameter,
    pub bf: Parameter,
    pub wg: Parameter,
    pub bg: Parameter,
}

pub struct GatedCache {
    h: Matrix,
    z: Matrix,
    f: Matrix,
    g: Matrix,
}

impl GatedAdapter {
    pub fn new(embed_dim: usize, d_model: usize) -> Self {
        GatedAdapter {
            wf: Parameter::zeros(embed_dim, d_model),
            bf: Parameter::zeros(1, d_model),
            wg: Parameter::zeros(embed_dim, d_model),
            bg: Parameter::zeros(1, d_model),
        }
    }

    pub fn forward(&self, h: &Matrix, z: &AccentEmbedding) -> Result<(Matrix, GatedCache)> {
        if z.dim() != self.wf.value.rows() {
            return Err(Error::Config(format!(
                "accent embedding length {} != adapter embed_dim {}",
                z.dim(),
                self.wf.value.rows()
            )));
        }
        let zrow = z.as_row();
        let f = zrow
            .matmul(&self.wf.value)?
            .add_row_broadcast(self.bf.value.row(0))
            .map(f64::tanh);
        let g = zrow
            .matmul(&self.wg.value)?
            .add_row_broadcast(self.bg.value.row(0))
            .map(f64::tanh);
        let out = h.mul_row_broadcast(f.row(0)).add_row_broadcast(g.row(0));
        Ok((
            out,
            GatedCache {
                h: h.clone(),
                z: zrow,
                f,
                g,
            },
        ))
    }

    pub fn backward(&mut self, cache: &GatedCache, dout: &Matrix) -> Matrix {
        // out[t] = f ⊙ h[t] + g  (f, g broadcast over rows)
        let df: Vec<f64> = dout.hadamard(&cache.h).col_sums();
        let dg: Vec<f64> = dout.col_sums();
        let dh = dout.mul_row_broadcast(cache.f.row(0));

        // through tanh
        let dpre_f: Vec<f64> = df
            .iter()
            .zip(cache.f.row(0))
            .map(|(d, t)| d * (1.0 - t * t))
            .collect();
        let dpre_g: Vec<f64> = dg
            .iter()
            .zip(cache.g.row(0))
            .map(|(d, t)| d * (1.0 - t * t))
            .collect();

        let zt = cache.z.transpose();
        self.wf
            .grad
            .add_assign(&zt.matmul(&Matrix::row_vector(&dpre_f)).unwrap());
        self.bf.grad.add_assign(&Matrix::row_vector(&dpre_f));
        self.wg
            .grad
            .add_assign(&zt.matmul(&Matrix::row_vector(&dpre_g)).unwrap());
        self.bg.grad.add_assign(&Matrix::row_vector(&dpre_g));
        dh
    }
}

impl Params for GatedAdapter {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join(prefix, "wf"), &mut self.wf);
        f(&join(prefix, "bf"), &mut self.bf);
        f(&join(prefix, "wg"), &mut self.wg);
        f(&join(prefix, "bg"), &mut self.bg);
    }
}

/// Sandglass projection: LayerNorm, down-projection, ReLU, up-projection.
/// The up-projection starts at zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sandglass {
    pub ln: LayerNorm,
    pub down: Linear,
    pub up: Linear,
}

pub struct SandglassCache {
    ln: LayerNormCache,
    down: LinearCache,
    act: ActivationCache,
    up: LinearCache,
}

impl Sandglass {
    pub fn new(d_model: usize, bottleneck: usize, rng: &mut impl Rng) -> Self {
        Sandglass {
            ln: LayerNorm::new(d_model),
            down: Linear::xavier(d_model, bottleneck, rng),
            up: Linear::zeros(bottleneck, d_model),
        }
    }

    pub fn forward(&self, h: &Matrix) -> (Matrix, SandglassCache) {
        let (u, ln) = self.ln.forward(h);
        let (d, down) = self.down.forward(&u);
        let (a, act) = Activation::Relu.forward(&d);
        let (out, up) = self.up.forward(&a);
        (out, SandglassCache { ln, down, act, up })
    }

    pub fn backward(&mut self, cache: &SandglassCache, dout: &Matrix) -> Matrix {
        let da = self.up.backward(&cache.up, dout);
        let dd = Activation::backward(&cache.act, &da);
        let du = self.down.backward(&cache.down, &dd);
        self.ln.backward(&cache.ln, &du)
    }
}

impl Params for Sandglass {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.ln.visit(&join(prefix, "ln"), f);
        self.down.visit(&join(prefix, "down"), f);
        self.up.visit(&join(prefix, "up"), f);
    }
}

/// One adapter basis B_k(h) = F_k(h) ⊙ h + G_k(h), with F_k and G_k
/// independent sandglass projections. The connection mode drops one term.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Basis {
    pub scale: Option<Sandglass>,
    pub shift: Option<Sandglass>,
}

pub struct BasisCache {
    h: Matrix,
    scale: Option<(Matrix, SandglassCache)>,
    shift: Option<SandglassCache>,
}

impl Basis {
    pub fn new(d_model: usize, bottleneck: usize, connection: Connection, rng: &mut impl Rng) -> Self {
        let scale = match connection {
            Connection::ShiftingOnly => None,
            _ => Some(Sandglass::new(d_model, bottleneck, rng)),
        };
        let shift = match connection {
            Connection::ScalingOnly => None,
            _ => Some(Sandglass::new(d_model, bottleneck, rng)),
        };
        Basis { scale, shift }
    }

    pub fn forward(&self, h: &Matrix) -> (Matrix, BasisCache) {
        let mut out = Matrix::zeros(h.rows(), h.cols());
        let scale = self.scale.as_ref().map(|s| {
            let (f, cache) = s.forward(h);
            out.add_assign(&f.hadamard(h));
            (f, cache)
        });
        let shift = self.shift.as_ref().map(|s| {
            let (g, cache) = s.forward(h);
            out.add_assign(&g);
            cache
        });
        (out, BasisCache { h: h.clone(), scale, shift })
    }

    pub fn backward(&mut self, cache: &BasisCache, dout: &Matrix) -> Matrix {
        let mut dh = Matrix::zeros(dout.rows(), dout.cols());
        if let (Some(s), Some((f, sc))) = (self.scale.as_mut(), cache.scale.as_ref()) {
            dh.add_assign(&dout.hadamard(f));
            let df = dout.hadamard(&cache.h);
            dh.add_assign(&s.backward(sc, &df));
        }
        if let (Some(s), Some(sc)) = (self.shift.as_mut(), cache.shift.as_ref()) {
            dh.add_assign(&s.backward(sc, dout));
        }
        dh
    }
}

impl Params for Basis {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        if let Some(s) = self.scale.as_mut() {
            s.visit(&join(prefix, "scale"), f);
        }
        if let Some(s) = self.shift.as_mut() {
            s.visit(&join(prefix, "shift"), f);
        }
    }
}

/// Small dense network over z with ReLU between layers; α = softmax(logits).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Predictor {
    pub layers: Vec<Linear>,
}

pub struct PredictorCache {
    lin: Vec<LinearCache>,
    act: Vec<ActivationCache>,
    alpha: Vec<f64>,
}

impl Predictor {
    pub fn new(embed_dim: usize, hidden: &[usize], n_bases: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut prev = embed_dim;
        for &w in hidden {
            layers.push(Linear::xavier(prev, w, rng));
            prev = w;
        }
        layers.push(Linear::xavier(prev, n_bases, rng));
        Predictor { layers }
    }

    pub fn n_bases(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, z: &AccentEmbedding) -> Result<(CoefficientVector, PredictorCache)> {
        if z.dim() != self.layers[0].in_dim() {
            return Err(Error::Config(format!(
                "accent embedding length {} != predictor input {}",
                z.dim(),
                self.layers[0].in_dim()
            )));
        }
        let mut x = z.as_row();
        let mut lin = Vec::new();
        let mut act = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, c) = layer.forward(&x);
            lin.push(c);
            if i + 1 < self.layers.len() {
                let (a, c) = Activation::Relu.forward(&y);
                act.push(c);
                x = a;
            } else {
                x = y;
            }
        }
        let mut alpha = x.row(0).to_vec();
        softmax_in_place(&mut alpha);
        let coeff = CoefficientVector::new(alpha.clone())
            .expect("softmax output always a valid simplex vector");
        Ok((coeff, PredictorCache { lin, act, alpha }))
    }

    pub fn backward(&mut self, cache: &PredictorCache, dalpha: &[f64]) {
        // softmax backward
        let dot: f64 = dalpha.iter().zip(&cache.alpha).map(|(d, a)| d * a).sum();
        let dlogits: Vec<f64> = dalpha
            .iter()
            .zip(&cache.alpha)
            .map(|(d, a)| a * (d - dot))
            .collect();
        let mut dy = Matrix::row_vector(&dlogits);
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                dy = Activation::backward(&cache.act[i], &dy);
            }
            dy = self.layers[i].backward(&cache.lin[i], &dy);
        }
    }
}

impl Params for Predictor {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// A_m(h, z) = Σ_k α_k B_k(h). α is computed once per utterance by the shared
/// predictor and injected here, so it can also be driven directly in tests.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiBasis {
    pub bases: Vec<Basis>,
}

pub struct MultiBasisCache {
    basis_outs: Vec<Matrix>,
    basis_caches: Vec<BasisCache>,
    alpha: Vec<f64>,
}

impl MultiBasis {
    pub fn new(
        d_model: usize,
        bottleneck: usize,
        n_bases: usize,
        connection: Connection,
        rng: &mut impl Rng,
    ) -> Self {
        MultiBasis {
            bases: (0..n_bases)
                .map(|_| Basis::new(d_model, bottleneck, connection, rng))
                .collect(),
        }
    }

    pub fn forward(&self, h: &Matrix, alpha: &CoefficientVector) -> (Matrix, MultiBasisCache) {
        assert_eq!(alpha.len(), self.bases.len(), "alpha length != n_bases");
        let mut out = Matrix::zeros(h.rows(), h.cols());
        let mut basis_outs = Vec::with_capacity(self.bases.len());
        let mut basis_caches = Vec::with_capacity(self.bases.len());
        for (basis, &a) in self.bases.iter().zip(alpha.values()) {
            let (b_out, cache) = basis.forward(h);
            out.add_assign_scaled(&b_out, a);
            basis_outs.push(b_out);
            basis_caches.push(cache);
        }
        (
            out,
            MultiBasisCache {
                basis_outs,
                basis_caches,
                alpha: alpha.values().to_vec(),
            },
        )
    }

    /// Returns (dh, dα).
    pub fn backward(&mut self, cache: &MultiBasisCache, dout: &Matrix) -> (Matrix, Vec<f64>) {
        let mut dh = Matrix::zeros(dout.rows(), dout.cols());
        let mut dalpha = Vec::with_capacity(self.bases.len());
        for ((basis, b_cache), (b_out, &a)) in self
            .bases
            .iter_mut()
            .zip(&cache.basis_caches)
            .zip(cache.basis_outs.iter().zip(&cache.alpha))
        {
            dalpha.push(dout.hadamard(b_out).data().iter().sum());
            let db = dout.scale(a);
            dh.add_assign(&basis.backward(b_cache, &db));
        }
        (dh, dalpha)
    }
}

impl Params for MultiBasis {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, b) in self.bases.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("basis{i}")), f);
        }
    }
}

/// One adapter attachment at a single encoder block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum AdapterUnit {
    Gated(GatedAdapter),
    Multi(MultiBasis),
    /// Contribution = A_m(h + A_g(h, z), z); the block residual then adds h.
    Combined {
        gated: GatedAdapter,
        multi: MultiBasis,
    },
}

pub enum UnitCache {
    Gated(GatedCache),
    Multi(MultiBasisCache),
    Combined {
        gated: GatedCache,
        multi: MultiBasisCache,
    },
}

impl AdapterUnit {
    pub fn forward(
        &self,
        h: &Matrix,
        z: &AccentEmbedding,
        alpha: Option<&CoefficientVector>,
    ) -> Result<(Matrix, UnitCache)> {
        match self {
            AdapterUnit::Gated(g) => {
                let (out, cache) = g.forward(h, z)?;
                Ok((out, UnitCache::Gated(cache)))
            }
            AdapterUnit::Multi(m) => {
                let alpha = alpha.expect("multi adapter requires coefficients");
                let (out, cache) = m.forward(h, alpha);
                Ok((out, UnitCache::Multi(cache)))
            }
            AdapterUnit::Combined { gated, multi } => {
                let alpha = alpha.expect("combined adapter requires coefficients");
                let (g_out, g_cache) = gated.forward(h, z)?;
                let inner = h.add(&g_out);
                let (out, m_cache) = multi.forward(&inner, alpha);
                Ok((
                    out,
                    UnitCache::Combined {
                        gated: g_cache,
                        multi: m_cache,
                    },
                ))
            }
        }
    }

    /// Returns (dh, dα) where dα is empty for gated units.
    pub fn backward(&mut self, cache: &UnitCache, dout: &Matrix) -> (Matrix, Vec<f64>) {
        match (self, cache) {
            (AdapterUnit::Gated(g), UnitCache::Gated(c)) => (g.backward(c, dout), vec![]),
            (AdapterUnit::Multi(m), UnitCache::Multi(c)) => m.backward(c, dout),
            (AdapterUnit::Combined { gated, multi }, UnitCache::Combined { gated: gc, multi: mc }) => {
                let (d_inner, dalpha) = multi.backward(mc, dout);
                let mut dh = d_inner.clone();
                dh.add_assign(&gated.backward(gc, &d_inner));
                (dh, dalpha)
            }
            _ => unreachable!("cache kind mismatch"),
        }
    }
}

impl Params for AdapterUnit {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        match self {
            AdapterUnit::Gated(g) => g.visit(&join(prefix, "gated"), f),
            AdapterUnit::Multi(m) => m.visit(&join(prefix, "multi"), f),
            AdapterUnit::Combined { gated, multi } => {
                gated.visit(&join(prefix, "gated"), f);
                multi.visit(&join(prefix, "multi"), f);
            }
        }
    }
}

/// All adapters injected into a model: one unit per configured encoder block
/// plus a single predictor shared across positions (one α per utterance).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterStack {
    pub spec: AdapterSpec,
    pub predictor: Option<Predictor>,
    /// (0-based block index, unit), sorted by position.
    pub units: Vec<(usize, AdapterUnit)>,
}

impl AdapterStack {
    pub fn new(spec: AdapterSpec, d_model: usize, enc_layers: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate(enc_layers)?;
        let predictor = if spec.uses_predictor() {
            Some(Predictor::new(
                spec.embed_dim,
                &spec.predictor_hidden,
                spec.n_bases,
                rng,
            ))
        } else {
            None
        };
        let mut positions = spec.positions.clone();
        positions.sort_unstable();
        let mut units = Vec::new();
        for &p in &positions {
            let unit = match spec.mode {
                AdapterMode::None => unreachable!("validated above"),
                AdapterMode::Gated => AdapterUnit::Gated(GatedAdapter::new(spec.embed_dim, d_model)),
                AdapterMode::Multi => AdapterUnit::Multi(MultiBasis::new(
                    d_model,
                    spec.bottleneck,
                    spec.n_bases,
                    spec.connection,
                    rng,
                )),
                AdapterMode::Combined => AdapterUnit::Combined {
                    gated: GatedAdapter::new(spec.embed_dim, d_model),
                    multi: MultiBasis::new(d_model, spec.bottleneck, spec.n_bases, spec.connection, rng),
                },
            };
            units.push((p - 1, unit));
        }
        Ok(AdapterStack {
            spec,
            predictor,
            units,
        })
    }

    pub fn unit_at(&self, block: usize) -> Option<usize> {
        self.units.iter().position(|(p, _)| *p == block)
    }

    pub fn predict(&self, z: &AccentEmbedding) -> Result<Option<(CoefficientVector, PredictorCache)>> {
        match &self.predictor {
            Some(p) => Ok(Some(p.forward(z)?)),
            None => Ok(None),
        }
    }
}

impl Params for AdapterStack {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        if let Some(p) = self.predictor.as_mut() {
            p.visit(&join(prefix, "predictor"), f);
        }
        for (pos, unit) in self.units.iter_mut() {
            unit.visit(&join(prefix, &format!("pos{}", *pos + 1)), f);
        }
    }
}
