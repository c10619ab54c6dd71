use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{clip_grad_norm, Adam, PlateauSchedule};
use super::samples::Sample;
use crate::data::GrayImage;
use crate::detect::{filter_detections, DetectorThresholds};
use crate::domain::{BBoxMap, Detection, DetectionSet, FdiCode, FlipAxis, MaskStack, ToothKind, NUM_TEETH};
use crate::error::{Error, Result};
use crate::loss::dice_loss;
use crate::metrics::{DiceAccumulator, EvalImage, MetricsReport};
use crate::model::{image_batch, predict_mask, target_batch, Network, NetworkConfig, PriorPyramid, Tensor};

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: Option<f64>,
    /// Validation Dice per tooth kind, incisor, canine, premolar, molar.
    pub val_dice_by_kind: [Option<f64>; 4],
    /// Whether the plateau rule reduced the rate after this epoch.
    pub lr_reduced: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Dataset(format!("bad number {s:?} in history")))
}

const HISTORY_HEADER: &str =
    "epoch,lr,train_loss,val_loss,val_dice,val_dice_incisor,val_dice_canine,val_dice_premolar,val_dice_molar,lr_reduced";

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lr).collect()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:e},{:.9},{:.9},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.train_loss,
                r.val_loss,
                fmt_opt(r.val_dice),
                fmt_opt(r.val_dice_by_kind[0]),
                fmt_opt(r.val_dice_by_kind[1]),
                fmt_opt(r.val_dice_by_kind[2]),
                fmt_opt(r.val_dice_by_kind[3]),
                r.lr_reduced as u8
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<History> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(HISTORY_HEADER) {
            return Err(Error::Dataset("history file has an unexpected header".into()));
        }
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 10 {
                return Err(Error::Dataset(format!("history row has {} fields: {line}", f.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Dataset(format!("bad number {s:?} in history")))
            };
            records.push(EpochRecord {
                epoch: num(f[0])? as usize,
                lr: num(f[1])?,
                train_loss: num(f[2])?,
                val_loss: num(f[3])?,
                val_dice: parse_opt(f[4])?,
                val_dice_by_kind: [parse_opt(f[5])?, parse_opt(f[6])?, parse_opt(f[7])?, parse_opt(f[8])?],
                lr_reduced: f[9] == "1",
            });
        }
        Ok(History { records })
    }
}

pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub best: Network,
    pub best_epoch: usize,
    pub last: Network,
    pub history: History,
    /// Optimizer steps taken.
    pub steps: u64,
}

fn check_priors(net: &Network, samples: &[Sample]) -> Result<()> {
    if net.is_gated() {
        if let Some(s) = samples.iter().find(|s| s.prior.is_none()) {
            return Err(Error::MissingPrior(s.image_id().to_string()));
        }
    }
    Ok(())
}

struct Batch {
    x: Tensor,
    target: Vec<f64>,
    prior: Option<PriorPyramid>,
}

fn make_batch(
    net: &Network,
    images: &[&GrayImage],
    masks: &[&MaskStack],
    priors: &[Option<&BBoxMap>],
) -> Result<Batch> {
    let x = image_batch(images)?;
    let target = target_batch(masks)?;
    let prior = if net.is_gated() {
        let maps: Vec<&BBoxMap> = priors.iter().map(|p| p.expect("priors checked")).collect();
        Some(PriorPyramid::new(&maps, net.config.bb_levels)?)
    } else {
        None
    };
    Ok(Batch { x, target, prior })
}

/// Per-sample loss averaged over the batch; gradient written into `dprobs`.
fn batch_loss(probs: &Tensor, target: &[f64], cfg: &TrainConfig, dprobs: Option<&mut Tensor>) -> Result<Vec<f64>> {
    let per = probs.c * probs.plane();
    let n = probs.n;
    let mut losses = Vec::with_capacity(n);
    let mut grads = Vec::new();
    for i in 0..n {
        let pred: Vec<f64> = probs.sample(i).iter().map(|&v| v as f64).collect();
        let out = dice_loss(&pred, &target[i * per..(i + 1) * per], probs.c, &cfg.loss)?;
        losses.push(out.loss);
        if dprobs.is_some() {
            grads.push(out.grad);
        }
    }
    if let Some(d) = dprobs {
        for (i, g) in grads.iter().enumerate() {
            for (dst, &v) in d.sample_mut(i).iter_mut().zip(g) {
                *dst = (v / n as f64) as f32;
            }
        }
    }
    Ok(losses)
}

fn maybe_flip(sample: &Sample, flips: bool, rng: &mut ChaCha8Rng) -> (GrayImage, MaskStack, Option<BBoxMap>) {
    let mut image = sample.prepared.image.clone();
    let mut masks = sample.prepared.masks.clone();
    let mut prior = sample.prior.clone();
    if flips {
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            if rng.random_bool(0.5) {
                image = image.flipped(axis);
                masks = masks.flipped(axis);
                prior = prior.map(|p| p.flipped(axis));
            }
        }
    }
    (image, masks, prior)
}

/// Eval-mode pass over `samples`: mean loss and a Dice accumulator.
pub fn validate(net: &Network, samples: &[Sample], cfg: &TrainConfig) -> Result<(f64, DiceAccumulator)> {
    check_priors(net, samples)?;
    let mut total = 0.0;
    let mut dice = DiceAccumulator::new();
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let images: Vec<&GrayImage> = chunk.iter().map(|s| &s.prepared.image).collect();
        let masks: Vec<&MaskStack> = chunk.iter().map(|s| &s.prepared.masks).collect();
        let priors: Vec<Option<&BBoxMap>> = chunk.iter().map(|s| s.prior.as_ref()).collect();
        let b = make_batch(net, &images, &masks, &priors)?;
        let probs = net.forward(&b.x, b.prior.as_ref())?;
        total += batch_loss(&probs, &b.target, cfg, None)?.iter().sum::<f64>();
        for (i, s) in chunk.iter().enumerate() {
            dice.add(&predict_mask(&probs, i)?, &s.prepared.masks)?;
        }
    }
    Ok((total / samples.len().max(1) as f64, dice))
}

fn kind_dice(d: &DiceAccumulator) -> [Option<f64>; 4] {
    ToothKind::ALL.map(|k| d.kind(k))
}

/// Stage-2 training. Priors are read from the samples and never modified;
/// the network starts from `seed`-determined weights.
pub fn train_stage2(train: &[Sample], val: &[Sample], net_cfg: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(format!(
            "training needs non-empty splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    let mut net = Network::new(*net_cfg, cfg.seed)?;
    check_priors(&net, train)?;
    check_priors(&net, val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut sched = PlateauSchedule::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience);
    let mut history = History::default();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        opt.lr = sched.lr;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let parts: Vec<_> = chunk
                .iter()
                .map(|&i| maybe_flip(&train[i], cfg.augment_flips, &mut rng))
                .collect();
            let images: Vec<&GrayImage> = parts.iter().map(|p| &p.0).collect();
            let masks: Vec<&MaskStack> = parts.iter().map(|p| &p.1).collect();
            let priors: Vec<Option<&BBoxMap>> = parts.iter().map(|p| p.2.as_ref()).collect();
            let b = make_batch(&net, &images, &masks, &priors)?;

            net.zero_grad();
            let cache = net.forward_train(&b.x, b.prior.as_ref(), &mut rng)?;
            let probs = cache.probs();
            let mut dprobs = Tensor::zeros(probs.n, probs.c, probs.h, probs.w);
            let losses = batch_loss(probs, &b.target, cfg, Some(&mut dprobs))?;
            let loss = losses.iter().sum::<f64>() / losses.len() as f64;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += losses.iter().sum::<f64>();
            net.backward(&cache, &dprobs, b.prior.as_ref())?;
            let mut params = net.params_mut();
            let norm = clip_grad_norm(&mut params, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: norm,
                });
            }
            opt.step(&mut params);
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, dice) = validate(&net, val, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                loss: val_loss,
            });
        }
        let lr = sched.lr;
        let lr_reduced = sched.observe(val_loss);
        if lr_reduced {
            info!("epoch {epoch}: validation loss plateaued, learning rate {lr:e} -> {:e}", sched.lr);
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_dice: dice.overall(),
            val_dice_by_kind: kind_dice(&dice),
            lr_reduced,
        };
        info!(
            "epoch {epoch}/{}: train loss {train_loss:.4}, val loss {val_loss:.4}, val dice {}",
            cfg.epochs,
            fmt_opt(rec.val_dice)
        );
        history.records.push(rec);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, net.clone()));
        }
    }
    let steps = opt.steps();
    let (best, best_epoch) = match best {
        Some((_, e, n)) => (n, e),
        None => (net.clone(), 0),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: net,
        history,
        steps,
    })
}

/// Boxes read off predicted masks: one per non-empty tooth channel, with the
/// mean probability of that channel over its pixels as confidence.
pub fn mask_detections(image_id: &str, probs: &Tensor, sample: usize, masks: &MaskStack) -> DetectionSet {
    let p = probs.plane();
    let s = probs.sample(sample);
    let mut set = DetectionSet::new(image_id);
    for c in 0..NUM_TEETH {
        let Some(bbox) = masks.channel_bbox(c) else { continue };
        let ch = &s[c * p..(c + 1) * p];
        let (sum, n) = masks
            .channel(c)
            .iter()
            .zip(ch)
            .filter(|(m, _)| **m != 0)
            .fold((0.0f64, 0usize), |(a, k), (_, &v)| (a + v as f64, k + 1));
        set.entries.push(Detection {
            fdi: FdiCode::from_channel(c).expect("tooth channel"),
            bbox,
            confidence: (sum / n as f64).clamp(0.0, 1.0),
        });
    }
    set
}

/// Per-image outputs kept for reports.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub image_id: String,
    pub masks: MaskStack,
    pub detections: DetectionSet,
}

pub struct Evaluation {
    pub report: MetricsReport,
    /// The first `keep` predictions, in sample order.
    pub predictions: Vec<Prediction>,
}

/// Eval-mode inference and metric aggregation. Detection metrics use the
/// prior's accepted detections when the samples carry them, and boxes read
/// off the predicted masks otherwise.
pub fn evaluate(net: &Network, samples: &[Sample], thresholds: &DetectorThresholds, keep: usize) -> Result<Evaluation> {
    check_priors(net, samples)?;
    let mut dice = DiceAccumulator::new();
    let mut dets: Vec<DetectionSet> = Vec::with_capacity(samples.len());
    let mut predictions = Vec::new();
    let mut from_prior = true;
    for s in samples {
        let x = image_batch(&[&s.prepared.image])?;
        let prior = match (&s.prior, net.is_gated()) {
            (Some(p), true) => Some(PriorPyramid::new(&[p], net.config.bb_levels)?),
            _ => None,
        };
        let probs = net.forward(&x, prior.as_ref())?;
        let masks = predict_mask(&probs, 0)?;
        dice.add(&masks, &s.prepared.masks)?;
        let det = match &s.detections {
            Some(d) => d.clone(),
            None => {
                from_prior = false;
                filter_detections(&mask_detections(s.image_id(), &probs, 0, &masks), thresholds)
            }
        };
        if predictions.len() < keep {
            predictions.push(Prediction {
                image_id: s.image_id().to_string(),
                masks,
                detections: det.clone(),
            });
        }
        dets.push(det);
    }
    if samples.is_empty() {
        warn!("evaluating an empty sample set");
    }
    let images: Vec<EvalImage<'_>> = samples
        .iter()
        .zip(&dets)
        .map(|(s, d)| EvalImage {
            detections: d,
            truth: &s.prepared.annotations,
        })
        .collect();
    let mut report = MetricsReport::build(&images, &dice, thresholds.iou);
    report.detection_source = if from_prior && !samples.is_empty() { "prior" } else { "masks" }.into();
    Ok(Evaluation { report, predictions })
}
