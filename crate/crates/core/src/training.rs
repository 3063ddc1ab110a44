//! Training recipe: AdamW, warmup + cosine schedule, weight EMA, top-k
//! evaluation and the epoch loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::error::{Error, Result as TensorResult, TensorError};
use crate::model::Model;
use crate::params::ParamStore;
use crate::ssm::ScanMode;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

/// Decoupled-weight-decay Adam. Tensors whose `decay` flag is off skip
/// the decay term.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.value.numel()])
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> TensorResult<()> {
        if grads.len() != params.len() {
            return Err(TensorError::invalid(
                "adamw_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (p, g) in params.params().iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(TensorError::shape("adamw_step", p.value.shape(), g.shape()));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let bc1 = T::c(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::c(1.0 - c.beta2.powi(self.t as i32));
        let (lr_t, eps) = (T::c(lr), T::c(c.eps));
        let one = T::one();
        for (i, (p, g)) in params.params_mut().iter_mut().zip(grads).enumerate() {
            let decay = if p.decay {
                T::c(lr * c.weight_decay)
            } else {
                T::zero()
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w - lr_t * (m_hat / (v_hat.sqrt() + eps)) - decay * *w;
            }
        }
        Ok(())
    }
}

/// Per-step learning rate: linear warmup from `warmup_init` to `lr_max`,
/// then cosine decay to `lr_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_init: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn from_epochs(
        lr_max: f64,
        warmup_epochs: usize,
        total_epochs: usize,
        steps_per_epoch: usize,
    ) -> Result<Self, Error> {
        if total_epochs == 0 || warmup_epochs >= total_epochs {
            return Err(Error::Config(format!(
                "warmup epochs ({warmup_epochs}) must be below total epochs ({total_epochs})"
            )));
        }
        Ok(Self {
            lr_max,
            lr_min: 1e-5,
            warmup_init: 1e-6,
            warmup_steps: warmup_epochs * steps_per_epoch,
            total_steps: total_epochs * steps_per_epoch,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.warmup_init + (self.lr_max - self.warmup_init) * frac;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_min
            + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    pub decay: f64,
    pub shadow: ParamStore<T>,
}

impl<T: Real> Ema<T> {
    pub fn new(decay: f64, params: &ParamStore<T>) -> Self {
        Self {
            decay,
            shadow: params.clone(),
        }
    }

    pub fn update(&mut self, params: &ParamStore<T>) {
        let (d, keep) = (T::c(self.decay), T::c(1.0 - self.decay));
        for (s, p) in self.shadow.params_mut().iter_mut().zip(params.params()) {
            for (a, &b) in s.value.data_mut().iter_mut().zip(p.value.data()) {
                *a = d * *a + keep * b;
            }
        }
    }
}

/// Whether `label` is among the `k` largest entries of `row`. Equal
/// logits rank the lower class index first.
pub fn in_top_k<T: Real>(row: &[T], label: usize, k: usize) -> bool {
    let target = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > target || (v == target && c < label))
        .count();
    ahead < k
}

/// Fraction of rows of `logits (N, K)` whose label is in the top `k`.
pub fn top_k_accuracy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    k: usize,
) -> TensorResult<f64> {
    let &[n, classes] = logits.shape() else {
        return Err(TensorError::invalid(
            "top_k_accuracy",
            format!("logits must be 2-D, got {:?}", logits.shape()),
        ));
    };
    if k == 0 || k > classes {
        return Err(TensorError::invalid(
            "top_k_accuracy",
            format!("k = {k} outside 1..={classes}"),
        ));
    }
    if labels.len() != n || labels.iter().any(|&l| l >= classes) {
        return Err(TensorError::invalid(
            "top_k_accuracy",
            "labels do not match logits",
        ));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| in_top_k(&logits.data()[i * classes..(i + 1) * classes], l, k))
        .count();
    Ok(hits as f64 / n as f64)
}

/// Images `(N, 3, H, W)` with one label each.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let shape = self.images.shape();
        let row = shape[1..].iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::from_vec(out_shape, data).expect("gathered rows"),
            labels,
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    /// Top-5, or top-K when there are fewer than five classes.
    pub top5: f64,
    /// Unsmoothed cross-entropy.
    pub loss: f64,
}

/// Logits `(N, classes)` for every image, `batch` images at a time.
pub fn predict(
    model: &Model<f32>,
    data: &LabeledImages,
    batch: usize,
    mode: ScanMode,
) -> TensorResult<Tensor<f32>> {
    let k = model.config().num_classes;
    let mut logits = Vec::with_capacity(data.len() * k);
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch.max(1)) {
        let (x, _) = data.gather(chunk);
        logits.extend(model.logits(&x, mode)?.into_data());
    }
    Tensor::from_vec([data.len(), k], logits)
}

impl Metrics {
    pub fn from_logits(logits: &Tensor<f32>, labels: &[usize]) -> TensorResult<Self> {
        if labels.is_empty() {
            return Ok(Self::default());
        }
        let k = logits.shape().get(1).copied().unwrap_or(0);
        let tape = Tape::new();
        let loss = tape
            .constant(logits.clone())
            .label_smoothed_ce(labels, 0.0)?
            .item();
        Ok(Self {
            top1: top_k_accuracy(logits, labels, 1)?,
            top5: top_k_accuracy(logits, labels, k.min(5))?,
            loss: loss as f64,
        })
    }
}

pub fn evaluate(
    model: &Model<f32>,
    data: &LabeledImages,
    batch: usize,
    mode: ScanMode,
) -> TensorResult<Metrics> {
    if data.is_empty() {
        return Ok(Metrics::default());
    }
    Metrics::from_logits(&predict(model, data, batch, mode)?, &data.labels)
}

/// Batch size used for every evaluation pass during training.
pub fn eval_batch(train_batch: usize) -> usize {
    train_batch.max(64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_init: f64,
    pub label_smoothing: f64,
    pub ema_decay: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub scan_chunk: usize,
    /// Evaluate train-set accuracy every this many epochs (0 = only at the end).
    pub train_eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            warmup_epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            lr_min: 1e-5,
            warmup_init: 1e-6,
            label_smoothing: 0.1,
            ema_decay: 0.9999,
            optimizer: AdamWConfig::default(),
            seed: 0,
            scan_chunk: 64,
            train_eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn scan_mode(&self) -> ScanMode {
        ScanMode::Chunked(self.scan_chunk.max(1))
    }
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
        val_top1: Option<f64>,
        val_top5: Option<f64>,
        ema_top1: Option<f64>,
        ema_top5: Option<f64>,
        train_top1: Option<f64>,
        wall_time: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub step_losses: Vec<f64>,
    pub initial_train: Metrics,
    pub final_train: Metrics,
    pub final_val: Option<Metrics>,
    pub final_ema_val: Option<Metrics>,
    pub final_ema_train: Metrics,
    pub best_val_top1: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Where a run writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn log(&self) -> PathBuf {
        self.dir.join("log.jsonl")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.rsvm")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.rsvm")
    }
    pub fn last_ema(&self) -> PathBuf {
        self.dir.join("last_ema.rsvm")
    }
}

fn ema_model(model: &Model<f32>, ema: &Ema<f32>) -> Result<Model<f32>, Error> {
    Model::from_params(model.config().clone(), ema.shadow.clone())
}

struct Log {
    out: Option<(PathBuf, BufWriter<File>)>,
}

impl Log {
    fn open(files: Option<&RunFiles>) -> Result<Self, Error> {
        let Some(files) = files else {
            return Ok(Self { out: None });
        };
        fs::create_dir_all(&files.dir).map_err(|e| Error::io(&files.dir, e))?;
        let path = files.log();
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: Some((path, BufWriter::new(f))),
        })
    }

    fn write(&mut self, rec: &LogRecord) -> Result<(), Error> {
        if let Some((path, w)) = &mut self.out {
            let line = serde_json::to_string(rec).expect("log records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), Error> {
        if let Some((path, w)) = &mut self.out {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }
}

/// Runs the full recipe on `model`. Every random choice derives from
/// `cfg.seed`, so a fixed config reproduces the loss trajectory bit for bit.
pub fn train(
    model: &mut Model<f32>,
    train_set: &LabeledImages,
    val_set: Option<&LabeledImages>,
    cfg: &TrainConfig,
    files: Option<&RunFiles>,
) -> Result<TrainSummary, Error> {
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut schedule =
        Schedule::from_epochs(cfg.lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch)?;
    schedule.lr_min = cfg.lr_min;
    schedule.warmup_init = cfg.warmup_init;
    let mode = cfg.scan_mode();
    let eval_batch = eval_batch(cfg.batch_size);

    let mut opt = AdamW::new(cfg.optimizer, model.params());
    let mut ema = Ema::new(cfg.ema_decay, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = Log::open(files)?;
    let started = Instant::now();

    let initial_train = evaluate(model, train_set, eval_batch, mode)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut step_losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut best: Option<(f64, usize)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.gather(batch);
            lr = schedule.lr_at(step);
            let (loss, grads) = {
                let tape = Tape::new();
                let bound = model.params().bind(&tape, true);
                let logits = model.forward(&bound, tape.constant(x), mode)?;
                let loss = logits.label_smoothed_ce(&y, cfg.label_smoothing)?;
                tape.backward(loss)?;
                (loss.item() as f64, bound.grads())
            };
            opt.step(model.params_mut(), &grads, lr)?;
            ema.update(model.params());
            log.write(&LogRecord::Step {
                epoch,
                step,
                lr,
                loss,
            })?;
            step_losses.push(loss);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }

        let last_epoch = epoch + 1 == cfg.epochs;
        let (val, ema_val) = match val_set.filter(|v| !v.is_empty()) {
            Some(v) => (
                Some(evaluate(model, v, eval_batch, mode)?),
                Some(evaluate(&ema_model(model, &ema)?, v, eval_batch, mode)?),
            ),
            None => (None, None),
        };
        let train_top1 = if cfg.train_eval_every > 0 && (epoch + 1) % cfg.train_eval_every == 0 {
            Some(evaluate(model, train_set, eval_batch, mode)?.top1)
        } else {
            None
        };
        log.write(&LogRecord::Epoch {
            epoch,
            step,
            lr,
            loss: epoch_loss / train_set.len() as f64,
            val_top1: val.map(|m| m.top1),
            val_top5: val.map(|m| m.top5),
            ema_top1: ema_val.map(|m| m.top1),
            ema_top5: ema_val.map(|m| m.top5),
            train_top1,
            wall_time: started.elapsed().as_secs_f64(),
        })?;
        log.flush()?;
        if let Some(m) = val {
            if best.is_none_or(|(b, _)| m.top1 > b) {
                best = Some((m.top1, epoch));
                if let Some(files) = files {
                    checkpoint::save(model, &files.best())?;
                }
            }
        }
        if last_epoch {
            if let Some(files) = files {
                checkpoint::save(model, &files.last())?;
                checkpoint::save(&ema_model(model, &ema)?, &files.last_ema())?;
            }
        }
    }

    let ema_final = ema_model(model, &ema)?;
    let final_val = match val_set.filter(|v| !v.is_empty()) {
        Some(v) => Some(evaluate(model, v, eval_batch, mode)?),
        None => None,
    };
    let final_ema_val = match val_set.filter(|v| !v.is_empty()) {
        Some(v) => Some(evaluate(&ema_final, v, eval_batch, mode)?),
        None => None,
    };
    Ok(TrainSummary {
        steps: step,
        epochs: cfg.epochs,
        step_losses,
        initial_train,
        final_train: evaluate(model, train_set, eval_batch, mode)?,
        final_val,
        final_ema_val,
        final_ema_train: evaluate(&ema_final, train_set, eval_batch, mode)?,
        best_val_top1: best.map(|b| b.0),
        best_epoch: best.map(|b| b.1),
    })
}

/// Reads a JSONL training log back.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    fn store(values: &[f64], decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add(
            "w",
            Tensor::from_f64s([values.len()], values).unwrap(),
            decay,
        );
        s
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut p = store(&[1.0, -2.0], true);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let g = [Tensor::zeros([2])];
        for _ in 0..3 {
            opt.step(&mut p, &g, 1e-3).unwrap();
        }
        let f = (1.0 - 1e-3 * 0.05f64).powi(3);
        assert!((p.get(p.find("w").unwrap()).data()[0] - f).abs() < 1e-15);
        assert!((p.params()[0].value.data()[1] + 2.0 * f).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[0.0], true);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[Tensor::ones([1])], 1e-3).unwrap();
        // m̂ = v̂ = 1; the 1e-8 eps shifts the step by 1e-11.
        assert!((p.params()[0].value.data()[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn no_decay_flag_is_respected() {
        let mut p = store(&[1.0], false);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[Tensor::zeros([1])], 1e-2).unwrap();
        assert_eq!(p.params()[0].value.data()[0], 1.0);
    }

    #[test]
    fn constant_gradient_gives_sign_steps() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = store(&[0.0, 0.0], true);
        let mut opt = AdamW::new(cfg, &p);
        let g = [Tensor::from_f64s([2], &[3.0, -0.5]).unwrap()];
        let mut prev = p.params()[0].value.clone();
        for _ in 0..50 {
            opt.step(&mut p, &g, 1e-3).unwrap();
            let now = p.params()[0].value.clone();
            let d: Vec<f64> = now
                .data()
                .iter()
                .zip(prev.data())
                .map(|(a, b)| a - b)
                .collect();
            assert!(
                (d[0] + 1e-3).abs() < 1e-9 && (d[1] - 1e-3).abs() < 1e-9,
                "{d:?}"
            );
            prev = now;
        }
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut p = store(&[0.0], true);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(opt.step(&mut p, &[Tensor::zeros([2])], 1e-3).is_err());
        assert!(opt.step(&mut p, &[], 1e-3).is_err());
    }

    #[test]
    fn schedule_landmarks() {
        let s = Schedule::from_epochs(1e-3, 20, 150, 10).unwrap();
        assert_eq!(s.lr_at(0), 1e-6);
        assert_eq!(s.lr_at(200), 1e-3);
        assert!((s.lr_at(1500) - 1e-5).abs() < 1e-18);
        let mid = 200 + 650;
        assert!((s.lr_at(mid) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!((s.lr_at(200) - s.lr_at(201)).abs() < 1e-3 / 10.0 * 5.0);
        assert!(Schedule::from_epochs(1e-3, 5, 5, 10).is_err());
    }

    #[test]
    fn ema_examples() {
        let params = store(&[1.0], true);
        let mut ema = Ema::new(0.9, &store(&[0.0], true));
        ema.update(&params);
        assert!((ema.shadow.params()[0].value.data()[0] - 0.1).abs() < 1e-15);
        let mut frozen = Ema::new(1.0, &store(&[0.5], true));
        frozen.update(&params);
        assert_eq!(frozen.shadow.params()[0].value.data()[0], 0.5);
        let mut follow = Ema::new(0.0, &store(&[0.5], true));
        follow.update(&params);
        assert_eq!(follow.shadow.params()[0].value.data()[0], 1.0);
    }

    #[test]
    fn top_k_examples() {
        let logits = Tensor::<f64>::from_f64s([2, 3], &[0.1, 0.9, 0.0, 0.8, 0.1, 0.5]).unwrap();
        assert_eq!(top_k_accuracy(&logits, &[1, 2], 1).unwrap(), 0.5);
        assert_eq!(top_k_accuracy(&logits, &[0, 1], 3).unwrap(), 1.0);
        assert!(top_k_accuracy(&logits, &[0, 1], 0).is_err());
        assert!(top_k_accuracy(&logits, &[0, 1], 4).is_err());
        // Ties rank the lower index first.
        let tied = Tensor::<f64>::from_f64s([1, 3], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(top_k_accuracy(&tied, &[0], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&tied, &[2], 2).unwrap(), 0.0);
    }

    fn tiny_data(n: usize) -> LabeledImages {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        LabeledImages {
            images: Tensor::randn([n, 3, 32, 32], 1.0, &mut rng),
            labels: (0..n).map(|i| i % 2).collect(),
        }
    }

    #[test]
    fn one_epoch_of_eight_in_fours_logs_two_steps() {
        let dir = tempfile::tempdir().unwrap();
        let files = RunFiles {
            dir: dir.path().join("run"),
        };
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut model = Model::new(ModelConfig::micro(2, Variant::Plain), 0).unwrap();
        let data = tiny_data(8);
        let summary = train(&mut model, &data, Some(&data), &cfg, Some(&files)).unwrap();
        assert_eq!(summary.steps, 2);
        let records = read_log(&files.log()).unwrap();
        let steps = records
            .iter()
            .filter(|r| matches!(r, LogRecord::Step { .. }))
            .count();
        assert_eq!(steps, 2);
        assert!(files.best().exists() && files.last().exists() && files.last_ema().exists());
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let data = tiny_data(7);
        let run = || {
            let mut model = Model::new(ModelConfig::micro(2, Variant::Plain), cfg.seed).unwrap();
            train(&mut model, &data, None, &cfg, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.steps, 6);
        let bits = |s: &TrainSummary| {
            s.step_losses
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
    }
}
