//! Two-phase training: selector pretraining, then the fusion model with
//! early stopping on validation loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{DatasetManifest, PatchBag, Split, SyntheticDataset, TaskMode, TextBank};
use crate::error::{Error, Result};
use crate::fusion::{knn_graph, Architecture, BagInput, FusionModel, GraphInput, GraphPlacement};
use crate::numeric::{Adam, AdamConfig, Tape};
use crate::select::{
    candidate_pool, pretrain_selector, select_patches, BagSelection, PretrainedSelector, SelectionSettings,
    SelectorParams,
};
use crate::train::config::TrainConfig;
use crate::train::focal::{focal_bce, focal_loss};
use crate::train::metrics::MetricsReport;

/// Loaded splits plus the text bank.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<PatchBag>,
    pub val: Vec<PatchBag>,
    pub test: Vec<PatchBag>,
    pub text: TextBank,
    pub task_mode: TaskMode,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Reads every split named by the manifest. `prompt_rows` overrides the manifest's `t`.
    pub fn load(manifest: &DatasetManifest, prompt_rows: Option<usize>, seed: u64) -> Result<Self> {
        let mut m = manifest.clone();
        if let Some(t) = prompt_rows {
            m.t = t;
        }
        Ok(Dataset {
            train: m.load_split(Split::Train)?,
            val: m.load_split(Split::Val)?,
            test: m.load_split(Split::Test)?,
            text: m.load_text_bank(seed)?,
            task_mode: m.task_mode,
            class_names: m.class_names.clone(),
        })
    }

    /// Same content as writing `ds` to disk and loading it back.
    pub fn from_synthetic(ds: &SyntheticDataset, prompt_rows: Option<usize>, seed: u64) -> Self {
        let pick = |split: Split| -> Vec<PatchBag> {
            ds.manifest
                .entries(split)
                .iter()
                .map(|e| ds.bag(&e.patient_id).expect("manifest names generated bags").clone())
                .collect()
        };
        Dataset {
            train: pick(Split::Train),
            val: pick(Split::Val),
            test: pick(Split::Test),
            text: TextBank::new(ds.text_frozen.clone(), prompt_rows.unwrap_or(ds.manifest.t), seed),
            task_mode: ds.manifest.task_mode,
            class_names: ds.manifest.class_names.clone(),
        }
    }

    pub fn classes(&self) -> usize {
        self.text.classes()
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn split(&self, split: Split) -> &[PatchBag] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Permutes label vectors among `bags` (a control that destroys the signal).
pub fn shuffle_labels(bags: &mut [PatchBag], seed: u64) {
    let mut labels: Vec<Vec<f64>> = bags.iter().map(|b| b.label.clone()).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (b, l) in bags.iter_mut().zip(labels) {
        b.label = l;
    }
}

/// Model input for one bag given its selection.
pub fn prepare_input(bag: &PatchBag, selection: &BagSelection, arch: &Architecture) -> BagInput {
    let features = bag.embeddings.select_rows(&selection.selected);
    let graph = if !arch.use_gcn {
        GraphInput::None
    } else {
        match arch.placement {
            GraphPlacement::After => {
                let coords: Vec<_> = selection.selected.iter().map(|&i| bag.coords[i]).collect();
                GraphInput::Selected(knn_graph(&coords, &selection.selected, arch.k_nn))
            }
            GraphPlacement::Before => {
                let pool = &selection.compressed;
                let coords: Vec<_> = pool.iter().map(|&i| bag.coords[i]).collect();
                let rows = selection
                    .selected
                    .iter()
                    .map(|i| pool.binary_search(i).expect("selected patches come from the pool"))
                    .collect();
                GraphInput::Pool {
                    features: bag.embeddings.select_rows(pool),
                    graph: knn_graph(&coords, pool, arch.k_nn),
                    rows,
                }
            }
        }
    };
    BagInput { features, graph }
}

/// A trained selector + fusion model and how to apply them.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub selector: Option<SelectorParams>,
    pub model: FusionModel,
    pub settings: SelectionSettings,
    pub task_mode: TaskMode,
}

impl Pipeline {
    pub fn select(&self, bag: &PatchBag) -> Result<BagSelection> {
        select_patches(bag, &self.settings, self.selector.as_ref())
    }

    pub fn prepare(&self, bag: &PatchBag) -> Result<BagInput> {
        Ok(prepare_input(bag, &self.select(bag)?, &self.model.arch))
    }

    pub fn logits(&self, bag: &PatchBag) -> Result<Vec<f64>> {
        self.model.logits(&self.prepare(bag)?)
    }

    pub fn evaluate(&self, bags: &[PatchBag], class_names: &[String]) -> Result<MetricsReport> {
        let logits: Vec<Vec<f64>> = bags.par_iter().map(|b| self.logits(b)).collect::<Result<_>>()?;
        let labels: Vec<Vec<f64>> = bags.iter().map(|b| b.label.clone()).collect();
        MetricsReport::from_logits(&logits, &labels, self.task_mode, class_names)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{:.10},{:.10},{:.6e}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub pipeline: Pipeline,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub selector_losses: Vec<f64>,
}

fn check_config(data: &Dataset, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if let Some(mode) = config.task_mode {
        if mode != data.task_mode {
            return Err(Error::Config(format!(
                "config task mode {mode} differs from the dataset's {}",
                data.task_mode
            )));
        }
    }
    if data.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    Ok(())
}

/// Phase one: the attention selector, trained on the training split's
/// candidate pools. `None` for modes that do not score patches.
pub fn pretrain_for(data: &Dataset, config: &TrainConfig) -> Result<Option<PretrainedSelector>> {
    let settings = config.selection_settings();
    if !settings.mode.uses_selector() {
        return Ok(None);
    }
    let pools: Vec<PatchBag> = data
        .train
        .par_iter()
        .map(|b| b.subset(&candidate_pool(b, &settings).0))
        .collect();
    pretrain_selector(&pools, &config.selector_config()).map(Some)
}

/// Both phases.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    check_config(data, config)?;
    let selector = pretrain_for(data, config)?;
    train_with_selector(data, config, selector)
}

/// Phase two with a given (frozen) selector.
pub fn train_with_selector(data: &Dataset, config: &TrainConfig, selector: Option<PretrainedSelector>) -> Result<TrainOutcome> {
    check_config(data, config)?;
    let settings = config.selection_settings();
    let arch = config.architecture();
    let selector_losses = selector.as_ref().map(|s| s.epoch_losses.clone()).unwrap_or_default();
    let selector = selector.map(|s| s.params);
    if settings.mode.uses_selector() && selector.is_none() {
        return Err(Error::Config(format!("selection mode {} needs a selector", settings.mode.name())));
    }

    let prepare = |bags: &[PatchBag]| -> Result<Vec<BagInput>> {
        bags.par_iter()
            .map(|b| Ok(prepare_input(b, &select_patches(b, &settings, selector.as_ref())?, &arch)))
            .collect()
    };
    let train_inputs = prepare(&data.train)?;
    let val_inputs = prepare(&data.val)?;

    let mut model = FusionModel::new(arch, data.text.frozen.clone(), data.text.learnable.clone(), config.seed ^ 0xf0_5e)?;
    let mut adam = Adam::new(&model.params, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = data.train.len();
    let total_steps = (config.epochs * n) as f64;
    let mut order: Vec<usize> = (0..n).collect();

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0, model.params.clone());
    let mut stale = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr_start = config.lr * (1.0 - (epoch * n) as f64 / total_steps);
        let mut train_sum = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let lr = config.lr * (1.0 - (epoch * n + step) as f64 / total_steps);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &model.params, &train_inputs[i])?;
            let loss = focal_loss(&mut tape, out.logits, &data.train[i].label, config.alpha, config.gamma)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss on bag {}", data.train[i].patient_id),
                    epoch: epoch + 1,
                    step,
                });
            }
            train_sum += value;
            tape.backward(loss, &mut model.params)?;
            adam.step(&mut model.params, lr);
        }

        let val_losses: Vec<f64> = val_inputs
            .par_iter()
            .zip(&data.val)
            .map(|(input, bag)| Ok(focal_bce(&model.logits(input)?, &bag.label, config.alpha, config.gamma)))
            .collect::<Result<_>>()?;
        let val_loss = val_losses.iter().sum::<f64>() / val_losses.len() as f64;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                context: "validation loss".into(),
                epoch: epoch + 1,
                step: n,
            });
        }
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: train_sum / n as f64,
            val_loss,
            lr: lr_start,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch + 1, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (best_val_loss, best_epoch, mut params) = best;
    params.zero_grads();
    model.params = params;
    Ok(TrainOutcome {
        pipeline: Pipeline {
            selector,
            model,
            settings,
            task_mode: data.task_mode,
        },
        history,
        best_epoch,
        best_val_loss,
        selector_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SyntheticSpec};
    use crate::select::SelectionMode;

    fn tiny() -> Dataset {
        let spec = SyntheticSpec {
            num_patients: 14,
            slides_per_patient: (1, 2),
            patches_per_slide: (30, 50),
            d: 32,
            classes: 2,
            seed: 5,
            ..SyntheticSpec::default()
        };
        Dataset::from_synthetic(&generate(&spec).unwrap(), Some(2), 5)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            top_k: 16,
            heads: 2,
            selector_epochs: 2,
            selector_hidden: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = tiny();
        let cfg = TrainConfig { lr: 0.0, ..quick() };
        let out = train(&data, &cfg).unwrap();
        let fresh = FusionModel::new(cfg.architecture(), data.text.frozen.clone(), data.text.learnable.clone(), cfg.seed ^ 0xf0_5e).unwrap();
        assert_eq!(out.pipeline.model.params, fresh.params);
    }

    #[test]
    fn same_seed_same_result() {
        let data = tiny();
        let a = train(&data, &quick()).unwrap();
        let b = train(&data, &quick()).unwrap();
        assert_eq!(a.pipeline, b.pipeline);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn best_checkpoint_is_returned() {
        let data = tiny();
        let out = train(&data, &TrainConfig { epochs: 6, lr: 3e-3, patience: 2, ..quick() }).unwrap();
        let best = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, best);
        assert_eq!(out.history[out.best_epoch - 1].val_loss, best);
        // the kept parameters reproduce the recorded validation loss
        let pipeline = &out.pipeline;
        let mut sum = 0.0;
        for bag in &data.val {
            sum += focal_bce(&pipeline.logits(bag).unwrap(), &bag.label, 0.25, 2.0);
        }
        assert!((sum / data.val.len() as f64 - best).abs() < 1e-12);
    }

    #[test]
    fn lr_decays_linearly() {
        let data = tiny();
        let out = train(&data, &quick()).unwrap();
        let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
        assert!((lrs[0] - 1e-4).abs() < 1e-18);
        assert!((lrs[1] - 1e-4 * 2.0 / 3.0).abs() < 1e-15);
        let csv = history_csv(&out.history);
        assert!(csv.starts_with("epoch,train_loss,val_loss,lr\n1,"));
    }

    #[test]
    fn modes_without_selector_train() {
        let data = tiny();
        for mode in [SelectionMode::Random, SelectionMode::PosK, SelectionMode::OneDim, SelectionMode::CompressOnly] {
            let out = train(&data, &TrainConfig { selection: mode, epochs: 1, ..quick() }).unwrap();
            assert!(out.pipeline.selector.is_none());
        }
    }

    #[test]
    fn empty_validation_split() {
        let mut data = tiny();
        data.val.clear();
        assert!(matches!(train(&data, &quick()), Err(Error::EmptySplit("val"))));
    }

    #[test]
    fn label_shuffle_is_a_permutation() {
        let mut bags = tiny().train;
        let mut before: Vec<Vec<u64>> = bags.iter().map(|b| b.label.iter().map(|v| v.to_bits()).collect()).collect();
        shuffle_labels(&mut bags, 3);
        let mut after: Vec<Vec<u64>> = bags.iter().map(|b| b.label.iter().map(|v| v.to_bits()).collect()).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
    }
}
