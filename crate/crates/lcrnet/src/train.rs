//! Optimization loop: adaptive-moment updates with decoupled weight decay,
//! the poly learning-rate schedule, deterministic epoch shuffling, and the
//! evaluation pipeline shared by training logs and the eval command.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Params, Tape};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{
    dataset_iou, niou, pd_fa, pixel_metrics, roc_auc, BinaryMask, ConfusionCounts, MatchRule,
};
use crate::net::{build_model, save_checkpoint, segment, LcrNet, NetConfig};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Optimizer hyperparameters. The update is the standard bias-corrected
/// adaptive-moment method; weight decay is decoupled (a multiplicative shrink
/// applied before the step).
#[derive(Copy, Clone, Debug)]
pub struct OptimHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-parameter first/second moments plus the step counter. Moments are
/// held in double precision regardless of the model precision.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub hyper: OptimHyper,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new<T: Real>(params: &Params<T>, hyper: OptimHyper) -> Self {
        let m = params.iter().map(|(_, e)| vec![0.0; e.value.len()]).collect();
        let v = params.iter().map(|(_, e)| vec![0.0; e.value.len()]).collect();
        OptimState { hyper, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update using the gradients currently accumulated in `params`.
    pub fn step<T: Real>(&mut self, params: &mut Params<T>, lr: f64) -> Result<()> {
        for (_, e) in params.iter() {
            if !e.grad.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter '{}'",
                    e.name
                )));
            }
        }
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        let shrink = 1.0 - lr * h.weight_decay;
        for (i, (_, e)) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (k, (val, &g)) in
                e.value.data_mut().iter_mut().zip(e.grad.data()).enumerate()
            {
                let g = g.to_f64();
                let mut x = val.to_f64() * shrink;
                m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g;
                v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g * g;
                x -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + h.eps);
                *val = T::from_f64(x);
            }
        }
        Ok(())
    }
}

/// Poly decay: base_lr * (1 - epoch/max_epochs)^power.
pub fn poly_lr(epoch: usize, max_epochs: usize, base_lr: f64, power: f64) -> f64 {
    debug_assert!(epoch <= max_epochs);
    base_lr * (1.0 - epoch as f64 / max_epochs as f64).powf(power)
}

/// Training hyperparameters plus the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub poly_power: f64,
    pub seed: u64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            max_epochs: 400,
            poly_power: 0.9,
            seed: 0,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        self.net.validate()
    }

    /// Trainer-section key = value lines.
    pub fn to_kv_lines(&self) -> Vec<String> {
        vec![
            format!("base_lr = {}", self.base_lr),
            format!("weight_decay = {}", self.weight_decay),
            format!("batch_size = {}", self.batch_size),
            format!("max_epochs = {}", self.max_epochs),
            format!("poly_power = {}", self.poly_power),
            format!("seed = {}", self.seed),
        ]
    }

    /// Apply one trainer key; false when the key is not a trainer key.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
        }
        match key {
            "base_lr" => self.base_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "poly_power" => self.poly_power = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One epoch's log row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_niou: f64,
    pub val_pd: f64,
    pub val_fa_per_image: f64,
    pub val_fa_per_megapixel: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_iou,val_niou,val_pd,val_fa_per_image,val_fa_per_megapixel";

impl EpochLog {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.val_iou,
            self.val_niou,
            self.val_pd,
            self.val_fa_per_image,
            self.val_fa_per_megapixel
        )
    }
}

pub fn format_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.to_csv_row());
        out.push('\n');
    }
    out
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    /// Checkpoint bytes of the best-validation-IoU model.
    pub checkpoint: Vec<u8>,
}

fn stack_batch<T: Real>(samples: &[Sample<T>], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let s0 = samples[idx[0]].image.shape();
    let shape = Shape::new(idx.len(), s0.c, s0.h, s0.w);
    let mut image = Tensor::zeros(shape);
    let mut mask = Tensor::zeros(shape);
    let per = s0.count();
    for (b, &i) in idx.iter().enumerate() {
        if samples[i].image.shape() != s0 {
            return Err(Error::Usage(format!(
                "sample '{}' has shape {}, expected {}",
                samples[i].id,
                samples[i].image.shape(),
                s0
            )));
        }
        image.data_mut()[b * per..(b + 1) * per].copy_from_slice(samples[i].image.data());
        mask.data_mut()[b * per..(b + 1) * per].copy_from_slice(samples[i].mask.data());
    }
    Ok((image, mask))
}

/// Per-image row of an evaluation report.
#[derive(Clone, Debug)]
pub struct ImageMetricRow {
    pub id: String,
    pub counts: ConfusionCounts,
    pub iou: f64,
}

/// Dataset-level metric report.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetricRow>,
    pub iou: f64,
    pub niou: f64,
    pub pd: f64,
    pub fa_per_image: f64,
    pub fa_per_megapixel: f64,
    pub auc: f64,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,tp,t,p,iou\n");
        for row in &self.per_image {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.id, row.counts.tp, row.counts.t, row.counts.p, row.iou
            ));
        }
        out.push_str(&format!(
            "summary,iou={},niou={},pd={},fa_per_image={},fa_per_megapixel={},auc={}\n",
            self.iou, self.niou, self.pd, self.fa_per_image, self.fa_per_megapixel, self.auc
        ));
        out
    }

    pub fn summary_text(&self) -> String {
        format!(
            "images             {}\n\
             IoU                {:.4}\n\
             nIoU               {:.4}\n\
             Pd                 {:.4}\n\
             Fa (per image)     {:.4}\n\
             Fa (per 10^6 px)   {:.4}\n\
             AUC                {:.4}\n",
            self.per_image.len(),
            self.iou,
            self.niou,
            self.pd,
            self.fa_per_image,
            self.fa_per_megapixel,
            self.auc
        )
    }
}

/// Run the model over a dataset and compute every metric. Confidence maps are
/// thresholded at the model's configured threshold.
pub fn evaluate<T: Real>(model: &LcrNet<T>, samples: &[Sample<T>]) -> Result<MetricReport> {
    evaluate_with_batch(model, samples, 8)
}

fn evaluate_with_batch<T: Real>(
    model: &LcrNet<T>,
    samples: &[Sample<T>],
    batch: usize,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Usage("evaluate called on an empty dataset".into()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    let mut preds: Vec<BinaryMask> = Vec::with_capacity(samples.len());
    let mut gts: Vec<BinaryMask> = Vec::with_capacity(samples.len());
    let mut confs: Vec<Tensor<T>> = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch) {
        let (image, _) = stack_batch(samples, chunk)?;
        let conf = model.forward(&image)?;
        let masks = segment(&conf, model.cfg.threshold)?;
        let s = conf.shape();
        for (b, &i) in chunk.iter().enumerate() {
            let gt = samples[i].mask_binary();
            let counts = pixel_metrics(&masks[b], &gt)?;
            per_image.push(ImageMetricRow {
                id: samples[i].id.clone(),
                counts,
                iou: counts.iou(),
            });
            confs.push(
                Tensor::new(Shape::new(1, 1, s.h, s.w), conf.plane(b, 0).to_vec())
                    .expect("plane length"),
            );
            preds.push(masks[b].clone());
            gts.push(gt);
        }
    }
    let counts: Vec<ConfusionCounts> = per_image.iter().map(|r| r.counts).collect();
    let detection = pd_fa(&preds, &gts, MatchRule::PixelOverlap)?;
    let pairs: Vec<(&Tensor<T>, &BinaryMask)> = confs.iter().zip(gts.iter()).collect();
    let (_, auc) = roc_auc(&pairs)?;
    Ok(MetricReport {
        iou: dataset_iou(&counts),
        niou: niou(&counts)?,
        pd: detection.pd,
        fa_per_image: detection.fa_per_image,
        fa_per_megapixel: detection.fa_per_megapixel,
        auc,
        per_image,
    })
}

/// Full training run. Deterministic for a fixed (config, dataset) pair: the
/// model seed, the per-epoch shuffle, and every kernel are seeded or ordered.
/// When `out_dir` is given, `log.csv` and `checkpoint.bin` are kept current
/// as the run progresses, so an aborted run leaves the last good state
/// behind.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Sample<f32>],
    val_set: &[Sample<f32>],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Usage("validation set is empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut model: LcrNet<f32> = build_model(&cfg.net, cfg.seed)?;
    let hyper = OptimHyper { weight_decay: cfg.weight_decay, ..OptimHyper::default() };
    let mut optim = OptimState::new(&model.params, hyper);
    let mut log: Vec<EpochLog> = Vec::with_capacity(cfg.max_epochs);
    let mut best_epoch = 0usize;
    let mut best_iou = f64::NEG_INFINITY;
    let mut best_ckpt: Option<Vec<u8>> = None;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let lr = poly_lr(epoch, cfg.max_epochs, cfg.base_lr, cfg.poly_power);
        // deterministic per-epoch shuffle
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 + 1));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut loss_sum = 0.0f64;
        let mut loss_n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (image, gt) = stack_batch(train_set, chunk)?;
            let mut tape = Tape::new();
            let xid = tape.leaf(image);
            let (_, conf) = model.forward_nodes(&mut tape, xid)?;
            let loss_node = tape.soft_iou(conf, &gt)?;
            let loss = tape.scalar_value(loss_node).to_f64();
            if !loss.is_finite() {
                flush_outputs(out_dir, &log, &best_ckpt)?;
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}: loss = {loss}"
                )));
            }
            model.params.zero_grads();
            tape.backward(loss_node, &mut model.params)?;
            optim.step(&mut model.params, lr)?;
            loss_sum += loss * chunk.len() as f64;
            loss_n += chunk.len();
        }
        let report = evaluate_with_batch(&model, val_set, cfg.batch_size)?;
        let row = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / loss_n as f64,
            val_iou: report.iou,
            val_niou: report.niou,
            val_pd: report.pd,
            val_fa_per_image: report.fa_per_image,
            val_fa_per_megapixel: report.fa_per_megapixel,
        };
        log.push(row);
        if report.iou > best_iou {
            best_iou = report.iou;
            best_epoch = epoch;
            best_ckpt = Some(save_checkpoint(&model));
        }
        flush_outputs(out_dir, &log, &best_ckpt)?;
    }
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_iou: best_iou,
        checkpoint: best_ckpt.expect("at least one epoch ran"),
    })
}

fn flush_outputs(
    out_dir: Option<&Path>,
    log: &[EpochLog],
    ckpt: &Option<Vec<u8>>,
) -> Result<()> {
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("log.csv"), format_log_csv(log))?;
        if let Some(bytes) = ckpt {
            std::fs::write(dir.join("checkpoint.bin"), bytes)?;
        }
    }
    Ok(())
}
