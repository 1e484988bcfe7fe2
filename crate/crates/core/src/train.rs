use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::datapipe::{eval_transform, train_transform, AugmentConfig};
use crate::error::{Error, Result};
use crate::heads::{argmax, combined_loss, LabeledSample, Location, Presence, LOSS_WEIGHTS};
use crate::image::ImageTensor;
use crate::metrics::{confusion, ConfusionMatrix, EvalScope};
use crate::model::Dtvit;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Train batch size when augmentation is on.
    pub batch_size: usize,
    /// Train batch size when augmentation is off.
    pub batch_size_unaugmented: usize,
    pub batch_size_val: usize,
    pub batch_size_test: usize,
    pub augment: bool,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<u64>,
    /// Supplied by the caller rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            batch_size_unaugmented: 8,
            batch_size_val: 32,
            batch_size_test: 4,
            augment: true,
            max_steps: None,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.batch_size_unaugmented == 0
            || self.batch_size_val == 0
            || self.batch_size_test == 0
        {
            return Err(Error::invalid("epochs and batch sizes must be positive"));
        }
        self.optimizer.validate()
    }

    pub fn train_batch_size(&self) -> usize {
        if self.augment {
            self.batch_size
        } else {
            self.batch_size_unaugmented
        }
    }
}

/// Per-sample outputs of an evaluation pass plus dataset-level losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub presence_loss: f64,
    /// `None` when no ICH sample was evaluated.
    pub location_loss: Option<f64>,
    pub combined_loss: f64,
    pub presence_true: Vec<usize>,
    pub presence_pred: Vec<usize>,
    pub location_true: Vec<Option<usize>>,
    /// Raw location argmax for every sample, whatever the presence call.
    pub location_pred: Vec<usize>,
}

impl Evaluation {
    pub fn len(&self) -> usize {
        self.presence_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presence_true.is_empty()
    }

    pub fn presence_accuracy(&self) -> f64 {
        let hits = self
            .presence_true
            .iter()
            .zip(&self.presence_pred)
            .filter(|(t, p)| t == p)
            .count();
        hits as f64 / self.len().max(1) as f64
    }

    /// Location accuracy over ICH-labelled samples.
    pub fn location_accuracy(&self) -> f64 {
        let (mut hits, mut n) = (0, 0);
        for (t, p) in self.location_true.iter().zip(&self.location_pred) {
            if let Some(t) = t {
                n += 1;
                hits += usize::from(t == p);
            }
        }
        hits as f64 / n.max(1) as f64
    }

    pub fn presence_confusion(&self) -> Result<ConfusionMatrix> {
        confusion(&self.presence_pred, &self.presence_true, 2)
    }

    /// 3×3 over ICH samples (`IchOnly`) or 4×4 with a trailing "none"
    /// class over all samples using presence-gated predictions (`All`).
    pub fn location_confusion(&self, scope: EvalScope) -> Result<ConfusionMatrix> {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            match scope {
                EvalScope::IchOnly => {
                    if let Some(t) = self.location_true[i] {
                        labels.push(t);
                        preds.push(self.location_pred[i]);
                    }
                }
                EvalScope::All => {
                    labels.push(self.location_true[i].unwrap_or(3));
                    let ich = self.presence_pred[i] == Presence::Ich.index();
                    preds.push(if ich { self.location_pred[i] } else { 3 });
                }
            }
        }
        let k = if scope == EvalScope::IchOnly { 3 } else { 4 };
        confusion(&preds, &labels, k)
    }
}

/// Running sums for dataset-level losses.
#[derive(Default)]
struct LossSums {
    presence: f64,
    location: f64,
    n: usize,
    n_ich: usize,
}

impl LossSums {
    fn add(&mut self, presence: f64, location: Option<f64>, n: usize, n_ich: usize) {
        self.presence += presence * n as f64;
        if let Some(l) = location {
            self.location += l * n_ich as f64;
        }
        self.n += n;
        self.n_ich += n_ich;
    }

    fn finish(&self) -> (f64, Option<f64>, f64) {
        let p = self.presence / self.n.max(1) as f64;
        let l = (self.n_ich > 0).then(|| self.location / self.n_ich as f64);
        (p, l, LOSS_WEIGHTS.0 * p + LOSS_WEIGHTS.1 * l.unwrap_or(0.0))
    }
}

fn labels_of(batch: &[&LabeledSample]) -> (Vec<Presence>, Vec<Option<Location>>) {
    (
        batch.iter().map(|s| s.presence).collect(),
        batch.iter().map(|s| s.location).collect(),
    )
}

/// Runs already-transformed inputs through the model without recording gradients.
pub fn evaluate_inputs(
    model: &Dtvit<f32>,
    inputs: &[ImageTensor],
    samples: &[LabeledSample],
    batch_size: usize,
) -> Result<Evaluation> {
    if inputs.len() != samples.len() || batch_size == 0 {
        return Err(Error::invalid("inputs and samples must align and batch size must be positive"));
    }
    let mut out = Evaluation::default();
    let mut sums = LossSums::default();
    for (inputs, batch) in inputs.chunks(batch_size).zip(samples.chunks(batch_size)) {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false)?;
        let refs: Vec<&ImageTensor> = inputs.iter().collect();
        let (l1, l2) = model.forward(&mut g, &vars, &refs)?;
        let batch: Vec<&LabeledSample> = batch.iter().collect();
        let (presence, location) = labels_of(&batch);
        let loss = combined_loss(&mut g, l1, &presence, l2, &location)?;
        let (lp, ll, _) = loss.values(&g);
        let n_ich = location.iter().flatten().count();
        sums.add(lp, ll, batch.len(), n_ich);
        let (v1, v2) = (g.value(l1).to_f64_vec(), g.value(l2).to_f64_vec());
        for (i, s) in batch.iter().enumerate() {
            out.presence_true.push(s.presence.index());
            out.location_true.push(s.location.map(Location::index));
            out.presence_pred.push(argmax(&v1[2 * i..2 * i + 2]));
            out.location_pred.push(argmax(&v2[3 * i..3 * i + 3]));
        }
    }
    (out.presence_loss, out.location_loss, out.combined_loss) = sums.finish();
    Ok(out)
}

/// Evaluation with the deterministic transform chain.
pub fn evaluate(
    model: &Dtvit<f32>,
    samples: &[LabeledSample],
    augment: &AugmentConfig,
    batch_size: usize,
) -> Result<Evaluation> {
    let inputs = samples
        .iter()
        .map(|s| eval_transform(&s.image, augment))
        .collect::<Result<Vec<_>>>()?;
    evaluate_inputs(model, &inputs, samples, batch_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub train_presence_acc: f64,
    pub train_location_acc: f64,
    pub val_loss: Option<f64>,
    pub val_presence_acc: Option<f64>,
    pub val_location_acc: Option<f64>,
}

/// Tab-separated history with a header row; missing values are `-`.
pub fn history_tsv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.8}"));
    let mut s = String::from(
        "epoch\tsteps\ttrain_loss\tval_loss\ttrain_acc_presence\ttrain_acc_location\tval_acc_presence\tval_acc_location\n",
    );
    for r in history {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.8}\t{}\t{:.8}\t{:.8}\t{}\t{}",
            r.epoch,
            r.steps,
            r.train_loss,
            opt(r.val_loss),
            r.train_presence_acc,
            r.train_location_acc,
            opt(r.val_presence_acc),
            opt(r.val_location_acc)
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest validation loss (train loss when there is no validation set).
    pub best: Dtvit<f32>,
    pub best_epoch: usize,
    pub last: Dtvit<f32>,
    pub optimizer: AdamW<f32>,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
}

/// Mini-batch AdamW on the combined loss.
///
/// The train order is reshuffled every epoch from `(seed, epoch)`, and each
/// sample's augmentation draws come from `(seed, epoch, sample index)`, so
/// the run is a pure function of its inputs. `on_epoch` sees every record
/// as it is produced.
pub fn train(
    model: Dtvit<f32>,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    augment.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("train split is empty".into()));
    }
    let mut model = model;
    let mut optimizer = AdamW::new(cfg.optimizer, model.params())?;
    let fixed_train: Option<Vec<ImageTensor>> = if cfg.augment {
        None
    } else {
        Some(
            train_set
                .iter()
                .map(|s| eval_transform(&s.image, augment))
                .collect::<Result<_>>()?,
        )
    };
    let val_inputs = val_set
        .iter()
        .map(|s| eval_transform(&s.image, augment))
        .collect::<Result<Vec<_>>>()?;

    let bs = cfg.train_batch_size();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Dtvit<f32>)> = None;
    let mut steps = 0u64;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        SplitMix64::keyed(cfg.seed, "shuffle", &[epoch as u64]).shuffle(&mut order);
        let mut sums = LossSums::default();
        let (mut hit1, mut hit2, mut n_ich) = (0usize, 0usize, 0usize);
        let mut stop = false;
        for idx in order.chunks(bs) {
            let inputs: Vec<ImageTensor> = idx
                .iter()
                .map(|&i| match &fixed_train {
                    Some(t) => Ok(t[i].clone()),
                    None => {
                        let mut rng = SplitMix64::keyed(cfg.seed, "augment", &[epoch as u64, i as u64]);
                        train_transform(&train_set[i].image, augment, &mut rng)
                    }
                })
                .collect::<Result<_>>()?;
            let batch: Vec<&LabeledSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (presence, location) = labels_of(&batch);

            let mut g = Graph::new();
            let vars = model.bind(&mut g, true)?;
            let refs: Vec<&ImageTensor> = inputs.iter().collect();
            let (l1, l2) = model.forward(&mut g, &vars, &refs)?;
            let loss = combined_loss(&mut g, l1, &presence, l2, &location)?;
            let grads = g.backward(loss.combined)?;
            let grads = model.params().collect_grads(&vars.bindings, &grads);

            let (lp, ll, _) = loss.values(&g);
            let batch_ich = location.iter().flatten().count();
            sums.add(lp, ll, batch.len(), batch_ich);
            let (v1, v2) = (g.value(l1).to_f64_vec(), g.value(l2).to_f64_vec());
            for (i, s) in batch.iter().enumerate() {
                hit1 += usize::from(argmax(&v1[2 * i..2 * i + 2]) == s.presence.index());
                if let Some(l) = s.location {
                    n_ich += 1;
                    hit2 += usize::from(argmax(&v2[3 * i..3 * i + 3]) == l.index());
                }
            }

            optimizer.step(model.params_mut(), &grads)?;
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                stop = true;
                break;
            }
        }
        let (_, _, train_loss) = sums.finish();
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_inputs(&model, &val_inputs, val_set, cfg.batch_size_val)?)
        };
        let record = EpochRecord {
            epoch,
            steps,
            train_loss,
            train_presence_acc: hit1 as f64 / sums.n.max(1) as f64,
            train_location_acc: hit2 as f64 / n_ich.max(1) as f64,
            val_loss: val.as_ref().map(|v| v.combined_loss),
            val_presence_acc: val.as_ref().map(Evaluation::presence_accuracy),
            val_location_acc: val.as_ref().map(Evaluation::location_accuracy),
        };
        on_epoch(&record);
        let score = record.val_loss.unwrap_or(record.train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, model.clone()));
        }
        history.push(record);
        if stop {
            break 'epochs;
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        optimizer,
        history,
        steps,
    })
}
