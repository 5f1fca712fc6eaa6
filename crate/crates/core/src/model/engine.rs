//! Sparse message passing with hand-written reverse-mode gradients.
//!
//! A step computes `Z = H W_self + sum_c (M_c H) W_c`, where each channel
//! `M_c` is a normalized sparse neighbour matrix. For BRGCN the channels are
//! the incoming and outgoing edges of every relation, each row scaled by the
//! reciprocal of that node's degree in the full graph.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{check_shapes, FeatureMode, ModelConfig, ModelParams, Variant, NODE_ID_BUCKETS};
use super::ModelError;
use crate::graph::{Direction, Label, NodeKind, Relation, SubgraphSample};

/// Class weights of the cross-entropy loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub w_benign: f64,
    pub w_vuln: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w_benign: 1.0, w_vuln: 1.0 }
    }
}

impl LossConfig {
    pub fn weight(&self, class: usize) -> f64 {
        if class == 1 {
            self.w_vuln
        } else {
            self.w_benign
        }
    }
}

const LN_EPS: f64 = 1e-12;

/// One sparse channel: `(row, col, coefficient)` triples.
#[derive(Debug, Clone, Default)]
struct Channel {
    entries: Vec<(u32, u32, f64)>,
}

impl Channel {
    fn apply(&self, h: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(h.raw_dim());
        for &(i, j, c) in &self.entries {
            let src = h.row(j as usize);
            out.row_mut(i as usize).scaled_add(c, &src);
        }
        out
    }

    fn apply_transpose_add(&self, d: &Array2<f64>, into: &mut Array2<f64>) {
        for &(i, j, c) in &self.entries {
            let src = d.row(i as usize);
            into.row_mut(j as usize).scaled_add(c, &src);
        }
    }
}

/// A subgraph prepared for a particular variant and feature mode.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub x: Array2<f64>,
    in_channels: Vec<Channel>,
    out_channels: Vec<Channel>,
    /// `(row, class)` of every labelled sample node.
    pub targets: Vec<(usize, usize)>,
    /// Rows of the sample nodes, in `sample_ids` order.
    pub sample_rows: Vec<usize>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bucket of a node id in node-id feature mode.
pub fn node_id_bucket(id: u32) -> usize {
    (splitmix(u64::from(id)) % NODE_ID_BUCKETS as u64) as usize
}

impl GraphInput {
    pub fn new(sub: &SubgraphSample, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let n = sub.nodes.len();
        let dim = cfg.features.dim();
        if cfg.dims.first() != Some(&dim) {
            return Err(ModelError::Shape(format!("input width must be {dim}")));
        }
        let mut x = Array2::zeros((n, dim));
        for (row, (&id, &kind)) in sub.nodes.iter().zip(&sub.kinds).enumerate() {
            let col = match cfg.features {
                FeatureMode::Kind => kind_col(kind),
                FeatureMode::NodeId => node_id_bucket(id),
            };
            x[[row, col]] = 1.0;
        }
        let local = |id: u32| -> Result<usize, ModelError> {
            sub.nodes.binary_search(&id).map_err(|_| ModelError::Graph(format!("edge endpoint {id} not in subgraph")))
        };
        let norm = |id: u32, rel: Relation, dir: Direction| -> Result<f64, ModelError> {
            let c = match cfg.variant {
                Variant::ConvGnn => Relation::ALL.iter().map(|&r| sub.norm(id, r, dir)).sum(),
                _ => sub.norm(id, rel, dir),
            };
            if c == 0 {
                return Err(ModelError::Graph(format!("missing carried norm for node {id}")));
            }
            Ok(1.0 / f64::from(c))
        };
        let (n_in, n_out) = super::params::relation_mats(cfg.variant);
        let mut in_channels = vec![Channel::default(); n_in];
        let mut out_channels = vec![Channel::default(); n_out];
        let channel = |rel: Relation| if cfg.variant == Variant::ConvGnn { 0 } else { rel.index() };
        for e in &sub.edges {
            let (s, d) = (local(e.src)?, local(e.dst)?);
            // Destination aggregates from its in-neighbour.
            in_channels[channel(e.rel)].entries.push((d as u32, s as u32, norm(e.dst, e.rel, Direction::In)?));
            if n_out > 0 {
                out_channels[channel(e.rel)].entries.push((s as u32, d as u32, norm(e.src, e.rel, Direction::Out)?));
            }
        }
        let mut targets = Vec::new();
        let mut sample_rows = Vec::new();
        for &s in &sub.sample_ids {
            let row = local(s)?;
            sample_rows.push(row);
            match sub.labels[row] {
                Label::Vulnerable => targets.push((row, 1)),
                Label::Benign => targets.push((row, 0)),
                Label::Unlabeled => {}
            }
        }
        Ok(GraphInput { x, in_channels, out_channels, targets, sample_rows })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

fn kind_col(kind: NodeKind) -> usize {
    kind.index()
}

struct StepCache {
    /// Input state of the step (after dropout for hidden stages).
    h: Array2<f64>,
    aggs_in: Vec<Array2<f64>>,
    aggs_out: Vec<Array2<f64>>,
    z: Array2<f64>,
    /// Dropout scaling applied to this step's output, if any.
    mask: Option<Array2<f64>>,
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn run_forward(
    g: &GraphInput,
    params: &ModelParams,
    cfg: &ModelConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, Vec<StepCache>) {
    let steps = params.layers.len();
    let mut h = g.x.clone();
    let mut caches = Vec::with_capacity(steps);
    for (l, layer) in params.layers.iter().enumerate() {
        let aggs_in: Vec<Array2<f64>> = g.in_channels.iter().map(|c| c.apply(&h)).collect();
        let aggs_out: Vec<Array2<f64>> = g.out_channels.iter().map(|c| c.apply(&h)).collect();
        let mut z = h.dot(&layer.w_self);
        for (a, w) in aggs_in.iter().zip(&layer.w_in).chain(aggs_out.iter().zip(&layer.w_out)) {
            z += &a.dot(w);
        }
        let last = l + 1 == steps;
        let (next, mask) = if last {
            (softmax_rows(&z), None)
        } else {
            let mut a = z.mapv(|v| v.max(0.0));
            let mask = match rng.as_deref_mut() {
                Some(r) if cfg.dropout > 0.0 => {
                    let keep = 1.0 - cfg.dropout;
                    let m = Array2::from_shape_fn(a.raw_dim(), |_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            (a, mask)
        };
        caches.push(StepCache { h, aggs_in, aggs_out, z, mask });
        h = next;
    }
    (h, caches)
}

/// Class probabilities for every node of `g` (rows follow `sub.nodes`).
/// Passing an RNG enables dropout.
pub fn forward(
    g: &GraphInput,
    params: &ModelParams,
    cfg: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Array2<f64>, ModelError> {
    check_shapes(cfg, params)?;
    Ok(run_forward(g, params, cfg, rng).0)
}

/// Weighted cross-entropy of one graph, averaged over its labelled nodes.
/// `targets` are `(row, class)` pairs.
pub fn loss(probs: &Array2<f64>, targets: &[(usize, usize)], lcfg: &LossConfig) -> Result<f64, ModelError> {
    if targets.is_empty() {
        return Err(ModelError::NoLabels);
    }
    let s: f64 = targets
        .iter()
        .map(|&(row, class)| -lcfg.weight(class) * probs[[row, class]].max(LN_EPS).ln())
        .sum();
    Ok(s / targets.len() as f64)
}

/// Loss and its gradient with respect to every parameter matrix.
///
/// `scale` multiplies the per-graph loss (1.0 gives the averaged loss of
/// [`loss`]); the same RNG draws give the same dropout masks as [`forward`].
pub fn backward(
    g: &GraphInput,
    params: &ModelParams,
    cfg: &ModelConfig,
    lcfg: &LossConfig,
    targets: &[(usize, usize)],
    scale: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ModelParams), ModelError> {
    check_shapes(cfg, params)?;
    if targets.is_empty() {
        return Err(ModelError::NoLabels);
    }
    let (probs, caches) = run_forward(g, params, cfg, rng);
    let value = scale * loss(&probs, targets, lcfg)?;
    let norm = scale / targets.len() as f64;
    let mut grads = params.zeros_like();

    // d loss / d z for the softmax output: w (h - y), zero where ln was clamped.
    let mut dz = Array2::<f64>::zeros(probs.raw_dim());
    for &(row, class) in targets {
        let p = probs[[row, class]];
        if p < LN_EPS {
            continue;
        }
        let w = norm * lcfg.weight(class);
        for k in 0..probs.ncols() {
            let y = if k == class { 1.0 } else { 0.0 };
            dz[[row, k]] += w * (probs[[row, k]] - y);
        }
    }

    for l in (0..caches.len()).rev() {
        let c = &caches[l];
        let layer = &params.layers[l];
        let gl = &mut grads.layers[l];
        gl.w_self = c.h.t().dot(&dz);
        for (gw, a) in gl.w_in.iter_mut().zip(&c.aggs_in) {
            *gw = a.t().dot(&dz);
        }
        for (gw, a) in gl.w_out.iter_mut().zip(&c.aggs_out) {
            *gw = a.t().dot(&dz);
        }
        if l == 0 {
            break;
        }
        let mut dh = dz.dot(&layer.w_self.t());
        for (ch, w) in g.in_channels.iter().zip(&layer.w_in) {
            ch.apply_transpose_add(&dz.dot(&w.t()), &mut dh);
        }
        for (ch, w) in g.out_channels.iter().zip(&layer.w_out) {
            ch.apply_transpose_add(&dz.dot(&w.t()), &mut dh);
        }
        // Back through the previous step's dropout and ReLU.
        let prev = &caches[l - 1];
        if let Some(m) = &prev.mask {
            dh *= m;
        }
        dh.zip_mut_with(&prev.z, |d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
        dz = dh;
    }
    Ok((value, grads))
}
