use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::graph::{Relation, FEATURE_DIM};

/// Message-passing architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One matrix per relation and direction plus a self matrix.
    Brgcn,
    /// Incoming relation matrices plus a self matrix.
    Rgcn,
    /// One matrix per direction shared by all relations plus a self matrix.
    ConvGnn,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "brgcn" => Ok(Variant::Brgcn),
            "rgcn" => Ok(Variant::Rgcn),
            "convgnn" => Ok(Variant::ConvGnn),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// One-hot node kind.
    Kind,
    /// One-hot of the node id hashed into [`NODE_ID_BUCKETS`] buckets.
    NodeId,
}

impl std::str::FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kind" => Ok(FeatureMode::Kind),
            "nodeid" => Ok(FeatureMode::NodeId),
            other => Err(format!("unknown feature mode `{other}`")),
        }
    }
}

pub const NODE_ID_BUCKETS: usize = 64;

impl FeatureMode {
    pub fn dim(self) -> usize {
        match self {
            FeatureMode::Kind => FEATURE_DIM,
            FeatureMode::NodeId => NODE_ID_BUCKETS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of every representation stage, input features first and the two
    /// class scores last; `dims.len() - 1` message-passing steps.
    pub dims: Vec<usize>,
    pub variant: Variant,
    pub features: FeatureMode,
    /// Dropout rate on hidden representations during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dims: vec![FEATURE_DIM, 16, 16, 2], variant: Variant::Brgcn, features: FeatureMode::Kind, dropout: 0.1 }
    }
}

impl ModelConfig {
    /// Representation stages, counting the input and the output.
    pub fn layers(&self) -> usize {
        self.dims.len()
    }

    /// Message-passing steps; also the hop count a graph cut must use.
    pub fn steps(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    /// Config with `dims[0]` adjusted to the feature mode.
    pub fn with_features(mut self, features: FeatureMode) -> Self {
        self.features = features;
        if let Some(d) = self.dims.first_mut() {
            *d = features.dim();
        }
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dims.len() < 2 {
            return Err(ModelError::Config("at least one message-passing step is required".into()));
        }
        if self.dims[0] != self.features.dim() {
            return Err(ModelError::Config(format!(
                "input width {} does not match {} features of width {}",
                self.dims[0],
                match self.features {
                    FeatureMode::Kind => "kind",
                    FeatureMode::NodeId => "node-id",
                },
                self.features.dim()
            )));
        }
        if *self.dims.last().unwrap() != 2 {
            return Err(ModelError::Config("output width must be 2".into()));
        }
        if self.dims.contains(&0) {
            return Err(ModelError::Config("zero-width layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Weights of one message-passing step. Matrices are `d_in x d_out` and act
/// on row-vector node states.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_self: Array2<f64>,
    /// Incoming-edge matrices: one per relation, or one shared (ConvGNN).
    pub w_in: Vec<Array2<f64>>,
    /// Outgoing-edge matrices; empty for RGCN.
    pub w_out: Vec<Array2<f64>>,
}

impl LayerParams {
    pub fn matrices(&self) -> impl Iterator<Item = &Array2<f64>> {
        std::iter::once(&self.w_self).chain(&self.w_in).chain(&self.w_out)
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        std::iter::once(&mut self.w_self).chain(&mut self.w_in).chain(&mut self.w_out)
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Array2<f64>| Array2::zeros(m.raw_dim());
        LayerParams {
            w_self: z(&self.w_self),
            w_in: self.w_in.iter().map(z).collect(),
            w_out: self.w_out.iter().map(z).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        ModelParams { layers: self.layers.iter().map(LayerParams::zeros_like).collect() }
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.layers.iter().flat_map(LayerParams::matrices)
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.layers.iter_mut().flat_map(LayerParams::matrices_mut)
    }

    pub fn num_parameters(&self) -> usize {
        self.matrices().map(|m| m.len()).sum()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.matrices_mut().zip(other.matrices()) {
            a.scaled_add(scale, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn relation_mats(variant: Variant) -> (usize, usize) {
    match variant {
        Variant::Brgcn => (Relation::COUNT, Relation::COUNT),
        Variant::Rgcn => (Relation::COUNT, 0),
        Variant::ConvGnn => (1, 1),
    }
}

/// Glorot-uniform weights, deterministic per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_in, n_out) = relation_mats(cfg.variant);
    let layers = cfg
        .dims
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let limit = (6.0 / (a + b) as f64).sqrt();
            let mut mat = || Array2::from_shape_fn((a, b), |_| rng.gen_range(-limit..limit));
            let w_self = mat();
            let w_in = (0..n_in).map(|_| mat()).collect();
            let w_out = (0..n_out).map(|_| mat()).collect();
            LayerParams { w_self, w_in, w_out }
        })
        .collect();
    Ok(ModelParams { layers })
}

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    w_self: MatrixJson,
    w_in: Vec<MatrixJson>,
    w_out: Vec<MatrixJson>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    config: ModelConfig,
    layers: Vec<LayerJson>,
}

fn mat_json(m: &Array2<f64>) -> MatrixJson {
    MatrixJson { rows: m.nrows(), cols: m.ncols(), data: m.iter().copied().collect() }
}

fn mat_from(m: MatrixJson) -> Result<Array2<f64>, ModelError> {
    Array2::from_shape_vec((m.rows, m.cols), m.data)
        .map_err(|e| ModelError::Checkpoint(format!("bad matrix shape: {e}")))
}

/// Config and row-major weights as JSON.
pub fn save_checkpoint(cfg: &ModelConfig, params: &ModelParams) -> String {
    let doc = CheckpointJson {
        config: cfg.clone(),
        layers: params
            .layers
            .iter()
            .map(|l| LayerJson {
                w_self: mat_json(&l.w_self),
                w_in: l.w_in.iter().map(mat_json).collect(),
                w_out: l.w_out.iter().map(mat_json).collect(),
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("checkpoint serializes")
}

pub fn load_checkpoint(text: &str) -> Result<(ModelConfig, ModelParams), ModelError> {
    let doc: CheckpointJson =
        serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    doc.config.validate()?;
    let params = ModelParams {
        layers: doc
            .layers
            .into_iter()
            .map(|l| {
                Ok(LayerParams {
                    w_self: mat_from(l.w_self)?,
                    w_in: l.w_in.into_iter().map(mat_from).collect::<Result<_, _>>()?,
                    w_out: l.w_out.into_iter().map(mat_from).collect::<Result<_, _>>()?,
                })
            })
            .collect::<Result<_, ModelError>>()?,
    };
    check_shapes(&doc.config, &params)?;
    Ok((doc.config, params))
}

/// Verifies that `params` has the layout `cfg` calls for.
pub fn check_shapes(cfg: &ModelConfig, params: &ModelParams) -> Result<(), ModelError> {
    let (n_in, n_out) = relation_mats(cfg.variant);
    if params.layers.len() != cfg.steps() {
        return Err(ModelError::Shape(format!("{} layers, expected {}", params.layers.len(), cfg.steps())));
    }
    for (l, (layer, w)) in params.layers.iter().zip(cfg.dims.windows(2)).enumerate() {
        if layer.w_in.len() != n_in || layer.w_out.len() != n_out {
            return Err(ModelError::Shape(format!("layer {l}: wrong number of relation matrices")));
        }
        if layer.matrices().any(|m| m.dim() != (w[0], w[1])) {
            return Err(ModelError::Shape(format!("layer {l}: matrices must be {}x{}", w[0], w[1])));
        }
    }
    Ok(())
}
