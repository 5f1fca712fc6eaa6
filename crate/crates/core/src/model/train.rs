use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::engine::{backward, forward, GraphInput, LossConfig};
use super::params::{init_params, ModelConfig, ModelParams};
use super::ModelError;
use crate::eval::{compute_metrics, Metrics};
use crate::graph::{DFGPlus, Label, SubgraphSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Subgraphs per parameter update.
    pub batch_size: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, epochs: 100, batch_size: 8, patience: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-graph training loss over the epoch.
    pub loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_f1\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.val_f1));
        }
        out
    }
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn new(p: &ModelParams) -> Self {
        Adam { m: p.zeros_like(), v: p.zeros_like(), t: 0 }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, opt: &OptimizerConfig) {
        self.t += 1;
        let c1 = 1.0 - opt.beta1.powi(self.t);
        let c2 = 1.0 - opt.beta2.powi(self.t);
        let mats = params.matrices_mut().zip(grads.matrices()).zip(self.m.matrices_mut().zip(self.v.matrices_mut()));
        for ((p, g), (m, v)) in mats {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                *p -= opt.lr * (*m / c1) / ((*v / c2).sqrt() + opt.eps);
            });
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z ^ (z >> 33)
}

/// Training unit: a prepared subgraph and its share of its graph's loss.
struct Unit {
    input: GraphInput,
    scale: f64,
}

fn units(subs: &[SubgraphSample], cfg: &ModelConfig) -> Result<Vec<Unit>, ModelError> {
    let inputs: Vec<GraphInput> = subs.iter().map(|s| GraphInput::new(s, cfg)).collect::<Result<_, _>>()?;
    // Each graph's loss is averaged over all of its labelled samples, which
    // may be spread across several subgraphs.
    let mut per_origin: BTreeMap<usize, usize> = BTreeMap::new();
    for (s, g) in subs.iter().zip(&inputs) {
        *per_origin.entry(s.origin).or_default() += g.targets.len();
    }
    Ok(subs
        .iter()
        .zip(inputs)
        .filter(|(_, g)| !g.targets.is_empty())
        .map(|(s, g)| Unit { scale: g.targets.len() as f64 / per_origin[&s.origin] as f64, input: g })
        .collect())
}

fn f1_on(units: &[Unit], params: &ModelParams, cfg: &ModelConfig) -> Result<Metrics, ModelError> {
    let pairs: Vec<Vec<(bool, bool)>> = units
        .par_iter()
        .map(|u| {
            let probs = forward(&u.input, params, cfg, None)?;
            Ok(u.input.targets.iter().map(|&(row, class)| (probs[[row, 1]] > 0.5, class == 1)).collect())
        })
        .collect::<Result<_, ModelError>>()?;
    compute_metrics(pairs.into_iter().flatten()).map_err(|e| ModelError::Config(e.to_string()))
}

/// Trains from freshly initialized parameters.
pub fn train(
    train_set: &[SubgraphSample],
    val_set: &[SubgraphSample],
    cfg: &ModelConfig,
    lcfg: &LossConfig,
    opt: &OptimizerConfig,
) -> Result<(ModelParams, History), ModelError> {
    let params = init_params(cfg, opt.seed)?;
    train_from(params, train_set, val_set, cfg, lcfg, opt)
}

/// Adam with minibatches of subgraphs and early stopping on validation F1
/// (training F1 when no validation set is given). Returns the parameters of
/// the best epoch.
pub fn train_from(
    mut params: ModelParams,
    train_set: &[SubgraphSample],
    val_set: &[SubgraphSample],
    cfg: &ModelConfig,
    lcfg: &LossConfig,
    opt: &OptimizerConfig,
) -> Result<(ModelParams, History), ModelError> {
    super::params::check_shapes(cfg, &params)?;
    let train_units = units(train_set, cfg)?;
    if train_units.is_empty() {
        return Err(ModelError::NoLabels);
    }
    let val_units = units(val_set, cfg)?;
    let graphs = train_units.iter().map(|u| u.scale).sum::<f64>().max(1.0);
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..train_units.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut history = History::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0;
    let batch = opt.batch_size.max(1);
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let results: Vec<(f64, ModelParams)> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let u = &train_units[i];
                    let mut drop = ChaCha8Rng::seed_from_u64(mix(opt.seed, epoch as u64, (b * batch + k) as u64));
                    backward(&u.input, &params, cfg, lcfg, &u.input.targets, u.scale, Some(&mut drop))
                })
                .collect::<Result<_, _>>()?;
            let mut grads = params.zeros_like();
            for (l, g) in &results {
                epoch_loss += l;
                grads.add_scaled(1.0 / chunk.len() as f64, g);
            }
            adam.step(&mut params, &grads, opt);
        }
        let loss = epoch_loss / graphs;
        if !loss.is_finite() || !params.is_finite() {
            return Err(ModelError::Diverged { epoch });
        }
        let eval_units = if val_units.is_empty() { &train_units } else { &val_units };
        let val_f1 = f1_on(eval_units, &params, cfg)?.f1;
        history.epochs.push(EpochStats { epoch, loss, val_f1 });
        if best.as_ref().is_none_or(|(f, _)| val_f1 >= *f) {
            best = Some((val_f1, params.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opt.patience {
                break;
            }
        }
    }
    Ok((best.map(|(_, p)| p).unwrap_or(params), history))
}

/// Prediction for one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodePrediction {
    pub label: Label,
    /// Probability of the vulnerable class.
    pub prob: f64,
}

fn decide(prob: f64) -> NodePrediction {
    // Ties go to benign.
    NodePrediction { label: if prob > 0.5 { Label::Vulnerable } else { Label::Benign }, prob }
}

/// Predictions for the sample nodes of each subgraph, keyed by node id.
pub fn predict(
    subs: &[SubgraphSample],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<BTreeMap<u32, NodePrediction>, ModelError> {
    let mut out = BTreeMap::new();
    for s in subs {
        let input = GraphInput::new(s, cfg)?;
        let probs = forward(&input, params, cfg, None)?;
        for (&id, &row) in s.sample_ids.iter().zip(&input.sample_rows) {
            out.insert(id, decide(probs[[row, 1]]));
        }
    }
    Ok(out)
}

/// Predictions for every node of a whole graph.
pub fn predict_graph(
    g: &DFGPlus,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<BTreeMap<u32, NodePrediction>, ModelError> {
    let all = (0..g.len() as u32).collect();
    predict(&[SubgraphSample::whole(g, &all, 0)], params, cfg)
}

/// Vulnerable-class probabilities as a column, for callers holding raw output.
pub fn vuln_probs(probs: &Array2<f64>) -> Vec<f64> {
    probs.column(1).to_vec()
}
