//! Optimizer, training loop and split evaluation.

mod adam;
mod eval;

pub use adam::{adam_step, AdamState, DEFAULT_LR};
pub use eval::{evaluate_pairs, evaluate_split, EvalReport, ImageReport};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Pair, Transform};
use crate::error::{Error, Result};
use crate::losses::{build_pseudo_mask, total_loss, LossValues, LossWeights, PerceptualExtractor, PseudoMaskConfig};
use crate::model::{ModelConfig, UniBlendNet, SIZE_MULTIPLE};
use crate::params::ModelParams;
use crate::tensor::{Graph, Tensor};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
    pub pseudo_mask: PseudoMaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            steps: 300,
            batch: 4,
            crop: 64,
            lr: DEFAULT_LR,
            seed: 1,
            pseudo_mask: PseudoMaskConfig::default(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossValues,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams<f32>,
    pub log: Vec<StepLog>,
}

impl TrainReport {
    /// Mean total loss over the first `n` logged steps.
    pub fn head_total(&self, n: usize) -> Option<f64> {
        mean_total(&self.log[..n.min(self.log.len())])
    }

    /// Mean total loss over the last `n` logged steps.
    pub fn tail_total(&self, n: usize) -> Option<f64> {
        mean_total(&self.log[self.log.len().saturating_sub(n)..])
    }
}

fn mean_total(rows: &[StepLog]) -> Option<f64> {
    (!rows.is_empty()).then(|| rows.iter().map(|r| r.losses.total).sum::<f64>() / rows.len() as f64)
}

/// Concatenates `[1, C, H, W]` tensors along the batch axis.
pub fn stack(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape(format!("stack: {:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    shape[0] *= items.len();
    Tensor::from_vec(&shape, data)
}

/// Seeded order of pair indices: a fresh shuffle per pass over the data.
struct Schedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Schedule {
    fn new(n: usize, seed: u64) -> Self {
        Schedule {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Objective of `params` on whole pairs, each at its own resolution,
/// averaged over pairs. Deterministic, so it measures the model rather than
/// the batch it happened to draw.
pub fn evaluate_loss(
    model: &ModelConfig,
    params: &ModelParams<f32>,
    pairs: &[Pair],
    weights: &LossWeights,
    pseudo_mask: &PseudoMaskConfig,
) -> Result<LossValues> {
    if pairs.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let net = UniBlendNet::new(*model)?;
    let phi = PerceptualExtractor::<f32>::new();
    let mut acc = [0.0f64; 6];
    for p in pairs {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let x = g.constant(p.input.clone());
        let y = g.constant(p.gt.clone());
        let out = net.forward(&mut g, &bound, x)?;
        let mask_pair = if model.use_mask {
            let target = build_pseudo_mask(&p.input, &p.gt, pseudo_mask)?;
            Some((out.mask, g.constant(target)))
        } else {
            None
        };
        let v = total_loss(&mut g, out.restored, y, mask_pair, weights, &phi)?.values(&g);
        for (a, b) in acc.iter_mut().zip([v.lrec, v.lssim, v.lgrad, v.lperc, v.lmask, v.total]) {
            *a += b;
        }
    }
    let n = pairs.len() as f64;
    Ok(LossValues {
        lrec: acc[0] / n,
        lssim: acc[1] / n,
        lgrad: acc[2] / n,
        lperc: acc[3] / n,
        lmask: acc[4] / n,
        total: acc[5] / n,
    })
}

/// Opens `dir` and trains on every pair in it.
pub fn train_loop(
    dir: &Path,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<TrainReport> {
    let ds = Dataset::open(dir)?;
    let pairs = (0..ds.len()).map(|i| ds.load(i)).collect::<Result<Vec<_>>>()?;
    train_pairs(&pairs, cfg, on_step)
}

/// Trains a fresh network on in-memory pairs. Deterministic in `cfg.seed`.
pub fn train_pairs(
    pairs: &[Pair],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("training needs at least one pair".into()));
    }
    if cfg.crop == 0 || !cfg.crop.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::shape(format!(
            "crop must be a positive multiple of {SIZE_MULTIPLE}, got {}",
            cfg.crop
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::Contract("batch must be positive".into()));
    }
    for p in pairs {
        let [_, _, h, w] = p.input.dims4()?;
        if cfg.crop > h || cfg.crop > w {
            return Err(Error::shape(format!("crop {} larger than pair {} ({h}x{w})", cfg.crop, p.index)));
        }
    }

    let net = UniBlendNet::new(cfg.model)?;
    let mut params: ModelParams<f32> = net.init_params(cfg.seed)?;
    let mut adam = AdamState::new(&params, cfg.lr);
    let phi = PerceptualExtractor::<f32>::new();
    let masks = if cfg.model.use_mask {
        pairs
            .iter()
            .map(|p| build_pseudo_mask(&p.input, &p.gt, &cfg.pseudo_mask))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut schedule = Schedule::new(pairs.len(), cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA06_0E47);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (mut xs, mut ys, mut ms) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.batch {
            let i = schedule.next();
            let [_, _, h, w] = pairs[i].input.dims4()?;
            let tf = Transform::sample(&mut aug_rng, h, w, cfg.crop)?;
            xs.push(tf.apply(&pairs[i].input)?);
            ys.push(tf.apply(&pairs[i].gt)?);
            if cfg.model.use_mask {
                ms.push(tf.apply(&masks[i])?);
            }
        }

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(stack(&xs)?);
        let y = g.constant(stack(&ys)?);
        let out = net.forward(&mut g, &bound, x)?;
        let mask_pair = if cfg.model.use_mask {
            Some((out.mask, g.constant(stack(&ms)?)))
        } else {
            None
        };
        let terms = total_loss(&mut g, out.restored, y, mask_pair, &cfg.weights, &phi)?;
        let row = StepLog { step, losses: terms.values(&g) };
        if !row.losses.total.is_finite() {
            return Err(Error::Contract(format!("non-finite loss at step {step}")));
        }
        g.backward(terms.total)?;
        params.collect_grads(&mut g, &bound);
        adam_step(&mut params, &mut adam)?;
        on_step(&row)?;
        log.push(row);
    }
    Ok(TrainReport { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pair, SceneSpec};

    fn pairs(n: usize) -> Vec<Pair> {
        (0..n)
            .map(|i| {
                let (input, gt) = generate_pair(&SceneSpec::sample(32, i as u64, None)).unwrap();
                Pair { index: i, input, gt }
            })
            .collect()
    }

    fn tiny(steps: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig { base_channels: 4, context_channels: 4, ..Default::default() },
            steps,
            batch: 2,
            crop: 32,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let cfg = tiny(0);
        let r = train_pairs(&pairs(2), &cfg, &mut |_| Ok(())).unwrap();
        let init: ModelParams<f32> = UniBlendNet::new(cfg.model).unwrap().init_params(cfg.seed).unwrap();
        for ((a, x), (b, y)) in r.params.iter().zip(init.iter()) {
            assert_eq!(a, b);
            assert_eq!(x.data(), y.data());
        }
        assert!(r.log.is_empty());
    }

    #[test]
    fn runs_are_deterministic_and_log_every_step() {
        let cfg = tiny(3);
        let mut seen = 0;
        let a = train_pairs(&pairs(3), &cfg, &mut |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        let b = train_pairs(&pairs(3), &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(seen, 3);
        assert_eq!(a.log, b.log);
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.data(), y.data());
        }
        assert!(a.log.iter().all(|r| r.losses.lmask > 0.0));
    }

    #[test]
    fn schedule_visits_every_pair_per_pass() {
        let mut s = Schedule::new(5, 9);
        let mut seen: Vec<usize> = (0..5).map(|_| s.next()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn bad_inputs() {
        assert!(train_pairs(&[], &tiny(1), &mut |_| Ok(())).is_err());
        let cfg = TrainConfig { crop: 64, ..tiny(1) };
        assert!(train_pairs(&pairs(1), &cfg, &mut |_| Ok(())).is_err());
    }
}
