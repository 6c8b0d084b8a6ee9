//! Semi-supervised training loop, batch construction and sliding-window
//! evaluation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::volume_tensor;
use crate::data::{augment_pair, AugmentConfig, AugmentedPair, LabelMask, Volume};
use crate::error::{config_err, numeric_err, Result};
use crate::losses::{dual_view_consistency_graph, voxel_scale, LambdaSchedule, LossBundle, DICE_EPS};
use crate::metrics::{score_volume, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::postprocess::Segmentation;
use crate::tensor::Tensor;

/// Where training and validation volumes come from.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields))]
pub enum DataSpec {
    /// Synthetic phantoms generated on the fly.
    Phantom {
        train_count: usize,
        val_count: usize,
        shape: [usize; 3],
        seed: u64,
    },
    /// A directory written by `generate`.
    Directory { path: String },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Phantom { train_count: 8, val_count: 2, shape: [32; 3], seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub data: DataSpec,
    /// Fraction of the training pool that keeps its masks, in `(0, 1]`.
    pub labeled_fraction: f64,
    pub model: ModelConfig,
    pub tau: f64,
    pub lambda_max: f64,
    pub ramp_fraction: f64,
    /// Multiply both consistency terms by `1/HWD`.
    pub voxel_scaling: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_interval: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub use_qdc: bool,
    pub use_segc: bool,
    /// Add the consistency term to labeled samples as well.
    pub consistency_on_labeled: bool,
    /// Supervise the segmentation after every query block, not just the last.
    pub aux_supervision: bool,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub augment: AugmentConfig,
    /// Sliding-window overlap fraction in `[0, 1)`.
    pub overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            labeled_fraction: 0.1,
            model: ModelConfig::default(),
            tau: 0.5,
            lambda_max: 0.1,
            ramp_fraction: 0.1,
            voxel_scaling: true,
            lr: 1e-3,
            weight_decay: 0.01,
            steps: 2000,
            eval_interval: 0,
            checkpoint_interval: 0,
            seed: 0,
            use_qdc: true,
            use_segc: true,
            consistency_on_labeled: true,
            aux_supervision: false,
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            augment: AugmentConfig::default(),
            overlap: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(config_err!("labeled_fraction must be in (0, 1], got {}", self.labeled_fraction));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config_err!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(config_err!("lambda_max must be non-negative, got {}", self.lambda_max));
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return Err(config_err!("ramp_fraction must be in [0, 1], got {}", self.ramp_fraction));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("lr must be positive and weight_decay non-negative"));
        }
        if self.labeled_per_batch == 0 {
            return Err(config_err!("labeled_per_batch must be positive"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(config_err!("overlap must be in [0, 1), got {}", self.overlap));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LambdaSchedule {
        LambdaSchedule { lambda_max: self.lambda_max, ramp_fraction: self.ramp_fraction, total_steps: self.steps }
    }

    /// Whether any consistency term can ever reach the objective.
    pub fn consistency_active(&self) -> bool {
        (self.use_segc || self.use_qdc) && self.lambda_max > 0.0
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Labeled and unlabeled training pools, intensity-standardized.
#[derive(Clone, Debug, Default)]
pub struct Pools {
    pub labeled: Vec<(Volume, LabelMask)>,
    pub unlabeled: Vec<Volume>,
}

impl Pools {
    /// The first `max(1, round(fraction·n))` samples keep their masks; the
    /// others are used without labels.
    pub fn split(samples: Vec<(Volume, LabelMask)>, labeled_fraction: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(config_err!("the training pool is empty"));
        }
        let n = samples.len();
        let n_lab = (libm::round(labeled_fraction * n as f64) as usize).clamp(1, n);
        let mut pools = Pools::default();
        for (i, (v, m)) in samples.into_iter().enumerate() {
            if i < n_lab {
                pools.labeled.push((v.standardized(), m));
            } else {
                pools.unlabeled.push(v.standardized());
            }
        }
        Ok(pools)
    }
}

/// Augmented pairs, labeled ones first.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub pairs: Vec<AugmentedPair>,
    pub labeled: usize,
}

/// Samples `labeled_per_batch` labeled and `unlabeled_per_batch` unlabeled
/// volumes with replacement and augments each into a weak/strong pair. An
/// empty unlabeled pool fills the unlabeled slots with labeled samples.
pub fn make_batch(pools: &Pools, config: &TrainConfig, seed: u64) -> Result<Batch> {
    if pools.labeled.is_empty() {
        return Err(config_err!("the labeled pool is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crop = config.model.crop;
    let mut pairs = Vec::with_capacity(config.labeled_per_batch + config.unlabeled_per_batch);
    let labeled_slots = if pools.unlabeled.is_empty() {
        config.labeled_per_batch + config.unlabeled_per_batch
    } else {
        config.labeled_per_batch
    };
    for _ in 0..labeled_slots {
        let (v, m) = &pools.labeled[rng.gen_range(0..pools.labeled.len())];
        pairs.push(augment_pair(v, Some(m), crop, &config.augment, rng.gen())?);
    }
    if !pools.unlabeled.is_empty() {
        for _ in 0..config.unlabeled_per_batch {
            let v = &pools.unlabeled[rng.gen_range(0..pools.unlabeled.len())];
            pairs.push(augment_pair(v, None, crop, &config.augment, rng.gen())?);
        }
    }
    Ok(Batch { pairs, labeled: labeled_slots })
}

/// Seed of the batch drawn at `step`.
pub fn batch_seed(seed: u64, step: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.gen()
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: AdamW,
    /// Number of completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParamStore, config: &TrainConfig) -> Self {
        let optimizer = AdamW::new(config.optimizer(), &params);
        Self { params, optimizer, step: 0 }
    }
}

/// Loss values and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub losses: LossBundle,
    pub grads: Vec<Tensor>,
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    Ok(acc)
}

fn mean_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    Ok(sum_vars(g, vars)?.map(|s| g.scale(s, 1.0 / vars.len() as f64)))
}

fn scalar_mean(g: &Graph, vars: &[Var]) -> f64 {
    if vars.is_empty() {
        0.0
    } else {
        vars.iter().map(|v| g.value(*v).item()).sum::<f64>() / vars.len() as f64
    }
}

/// Forward and backward pass of the objective on one batch at weight `lambda`.
///
/// Supervised terms use the weak views of labeled samples. Consistency pairs
/// every sample's strong and weak outputs against the rest of the batch.
/// When no consistency term can contribute, strong views and unlabeled
/// samples are not run at all.
pub fn compute_gradients(model: &Model, params: &ParamStore, batch: &Batch, config: &TrainConfig, lambda: f64) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let with_dc = config.consistency_active();
    let active = if with_dc { batch.pairs.len() } else { batch.labeled };

    let mut weak = Vec::with_capacity(active);
    let mut strong = Vec::with_capacity(active);
    for (i, pair) in batch.pairs[..active].iter().enumerate() {
        let aux = config.aux_supervision && i < batch.labeled;
        let x = g.constant(volume_tensor(&pair.weak));
        weak.push(model.forward_graph(&mut g, &bound, x, None, aux)?);
        if with_dc {
            let x = g.constant(volume_tensor(&pair.strong));
            strong.push(model.forward_graph(&mut g, &bound, x, None, false)?);
        }
    }

    let mut ce = Vec::new();
    let mut dice = Vec::new();
    let mut sup = Vec::new();
    for (out, pair) in weak.iter().zip(&batch.pairs[..batch.labeled]) {
        let mask = pair.mask_weak.as_ref().ok_or_else(|| config_err!("labeled pair without a mask"))?;
        let labels = mask.labels();
        let c = g.cross_entropy(out.segmentation, labels)?;
        let d = g.dice_loss(out.segmentation, labels, DICE_EPS)?;
        ce.push(c);
        dice.push(d);
        let mut terms = vec![c, d];
        for &a in &out.aux_segmentations {
            terms.push(g.cross_entropy(a, labels)?);
            terms.push(g.dice_loss(a, labels, DICE_EPS)?);
        }
        sup.push(sum_vars(&mut g, &terms)?.expect("non-empty"));
    }

    let mut segc = Vec::new();
    let mut qdc = Vec::new();
    if with_dc {
        let voxels: usize = config.model.crop.iter().product();
        let scale = voxel_scale(voxels, config.voxel_scaling);
        let flat = |g: &mut Graph, v: Var| -> Result<Var> {
            let n = g.value(v).len();
            g.reshape(v, &[n])
        };
        if config.use_segc {
            let s = strong.iter().map(|o| flat(&mut g, o.segmentation)).collect::<Result<Vec<_>>>()?;
            let w = weak.iter().map(|o| flat(&mut g, o.segmentation)).collect::<Result<Vec<_>>>()?;
            segc = dual_view_consistency_graph(&mut g, &s, &w, config.tau, scale)?;
        }
        if config.use_qdc {
            let s = strong.iter().map(|o| flat(&mut g, o.logits)).collect::<Result<Vec<_>>>()?;
            let w = weak.iter().map(|o| flat(&mut g, o.logits)).collect::<Result<Vec<_>>>()?;
            qdc = dual_view_consistency_graph(&mut g, &s, &w, config.tau, scale)?;
        }
    }

    let mut labeled_terms = Vec::with_capacity(batch.labeled);
    let mut unlabeled_terms = Vec::new();
    for i in 0..active {
        let dc_parts: Vec<Var> = segc.get(i).into_iter().chain(qdc.get(i)).copied().collect();
        let dc = sum_vars(&mut g, &dc_parts)?.map(|v| g.scale(v, lambda));
        if i < batch.labeled {
            let term = match dc {
                Some(dc) if config.consistency_on_labeled => g.add(sup[i], dc)?,
                _ => sup[i],
            };
            labeled_terms.push(term);
        } else if let Some(dc) = dc {
            unlabeled_terms.push(dc);
        }
    }
    let l_l = mean_vars(&mut g, &labeled_terms)?.expect("at least one labeled sample");
    let total = match mean_vars(&mut g, &unlabeled_terms)? {
        Some(l_u) => g.add(l_l, l_u)?,
        None => l_l,
    };

    let losses = LossBundle {
        l_ce: scalar_mean(&g, &ce),
        l_dice: scalar_mean(&g, &dice),
        l_segc: scalar_mean(&g, &segc),
        l_qdc: scalar_mean(&g, &qdc),
        l_total: g.value(total).item(),
        lambda_used: lambda,
    };
    for (name, v) in [
        ("l_ce", losses.l_ce),
        ("l_dice", losses.l_dice),
        ("l_segc", losses.l_segc),
        ("l_qdc", losses.l_qdc),
        ("l_total", losses.l_total),
    ] {
        if !v.is_finite() {
            return Err(numeric_err!("non-finite {name} ({v})"));
        }
    }
    let grads = params.collect_grads(&bound, &g.backward(total)?);
    for (p, grad) in params.iter().zip(&grads) {
        if !grad.all_finite() {
            return Err(numeric_err!("non-finite gradient for parameter {}", p.name));
        }
    }
    Ok(StepOutcome { losses, grads })
}

/// One optimizer step on `batch` with the scheduled weight for the current step.
pub fn train_step_on(model: &Model, state: &mut TrainState, batch: &Batch, config: &TrainConfig) -> Result<LossBundle> {
    let lambda = config.schedule().at(state.step);
    let out = compute_gradients(model, &state.params, batch, config, lambda)?;
    state.optimizer.update(&mut state.params, &out.grads)?;
    state.step += 1;
    Ok(out.losses)
}

/// Draws the batch for the current step and applies one update.
pub fn train_step(model: &Model, state: &mut TrainState, pools: &Pools, config: &TrainConfig) -> Result<LossBundle> {
    let batch = make_batch(pools, config, batch_seed(config.seed, state.step))?;
    train_step_on(model, state, &batch, config)
}

/// Window origins along one axis covering `[0, len)`; the last window is
/// flush with the end.
pub fn window_starts(len: usize, window: usize, overlap: f64) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let stride = ((window as f64 * (1.0 - overlap)) as usize).max(1);
    let mut starts: Vec<usize> = (0..=len - window).step_by(stride).collect();
    if *starts.last().expect("non-empty") != len - window {
        starts.push(len - window);
    }
    starts
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Pads each axis at the end with reflected values up to `min_dims`.
pub fn pad_reflect(volume: &Volume, min_dims: [usize; 3]) -> Result<Volume> {
    let d = volume.dims();
    let out = [d[0].max(min_dims[0]), d[1].max(min_dims[1]), d[2].max(min_dims[2])];
    if out == d {
        return Ok(volume.clone());
    }
    let mut voxels = Vec::with_capacity(out.iter().product());
    for z in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                voxels.push(volume.get(
                    reflect(z as isize, d[0]),
                    reflect(y as isize, d[1]),
                    reflect(x as isize, d[2]),
                ));
            }
        }
    }
    Volume::new(out, volume.spacing(), voxels)
}

fn crop_volume(v: &Volume, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
    let mut voxels = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] {
        for y in 0..size[1] {
            for x in 0..size[2] {
                voxels.push(v.get(origin[0] + z, origin[1] + y, origin[2] + x));
            }
        }
    }
    Volume::new(size, v.spacing(), voxels)
}

/// Full-volume class probabilities from window predictions averaged
/// uniformly where windows overlap. `predict` receives each window and its
/// origin in the padded volume and returns `window voxels × K` probabilities.
pub fn sliding_window<F>(volume: &Volume, window: [usize; 3], overlap: f64, num_classes: usize, mut predict: F) -> Result<Segmentation>
where
    F: FnMut(&Volume, [usize; 3]) -> Result<Tensor>,
{
    let dims = volume.dims();
    let padded = pad_reflect(volume, window)?;
    let pd = padded.dims();
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(pd[a], window[a], overlap)).collect();
    let mut acc = vec![0.0; pd.iter().product::<usize>() * num_classes];
    let mut hits = vec![0u32; pd.iter().product()];
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let origin = [z0, y0, x0];
                let probs = predict(&crop_volume(&padded, origin, window)?, origin)?;
                if probs.shape() != [window.iter().product::<usize>(), num_classes] {
                    return Err(config_err!("window prediction has shape {:?}", probs.shape()));
                }
                let mut rows = probs.data().chunks(num_classes);
                for z in 0..window[0] {
                    for y in 0..window[1] {
                        for x in 0..window[2] {
                            let at = ((z0 + z) * pd[1] + y0 + y) * pd[2] + x0 + x;
                            hits[at] += 1;
                            let row = rows.next().expect("window-sized prediction");
                            for (a, p) in acc[at * num_classes..(at + 1) * num_classes].iter_mut().zip(row) {
                                *a += p;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut probs = Vec::with_capacity(dims.iter().product::<usize>() * num_classes);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let at = (z * pd[1] + y) * pd[2] + x;
                let n = hits[at] as f64;
                probs.extend(acc[at * num_classes..(at + 1) * num_classes].iter().map(|a| a / n));
            }
        }
    }
    Ok(Segmentation { probs: Tensor::from_vec(&[dims.iter().product(), num_classes], probs)?, origin_shape: dims })
}

/// Sliding-window segmentation of a raw volume with the model.
pub fn infer_volume(model: &Model, params: &ParamStore, volume: &Volume, overlap: f64) -> Result<Segmentation> {
    let standardized = volume.standardized();
    sliding_window(&standardized, model.config.crop, overlap, model.config.num_classes, |w, _| {
        Ok(model.predict(params, w)?.probs)
    })
}

/// Scores predicted segmentations against named ground-truth masks.
pub fn score_predictions(predictions: &[(String, Segmentation, LabelMask)]) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(config_err!("the validation set is empty"));
    }
    let volumes = predictions
        .iter()
        .map(|(name, seg, gt)| score_volume(name, &seg.to_label_mask(gt.spacing())?, gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_volumes(volumes))
}

/// Sliding-window inference and scoring on a validation set.
pub fn evaluate(model: &Model, params: &ParamStore, validation: &[(String, Volume, LabelMask)], overlap: f64) -> Result<MetricsReport> {
    let predictions = validation
        .iter()
        .map(|(name, v, m)| Ok((name.clone(), infer_volume(model, params, v, overlap)?, m.clone())))
        .collect::<Result<Vec<_>>>()?;
    score_predictions(&predictions)
}
