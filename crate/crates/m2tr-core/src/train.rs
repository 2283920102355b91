//! Training loop (Adam with step-decayed learning rate), evaluation,
//! prediction, and the ablation driver.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::checkpoint::{self, AdamSnapshot, Checkpoint};
use crate::config::Config;
use crate::data::{balanced_epoch, derive_seed, DatasetIndex, Sample};
use crate::error::{Error, Result};
use crate::losses::{cls_loss, contrastive_loss, seg_loss, total_loss, LossWeights};
use crate::metrics::{accuracy, auc, mask_iou, MetricRow, ScoredSet};
use crate::network::M2trModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction, moments aligned with the parameter store.
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step_count: u64,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        Adam {
            m: store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect(),
            v: store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect(),
            step_count: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - ADAM_BETA1.powf(t);
        let bias2 = 1.0 - ADAM_BETA2.powf(t);
        for id in store.ids() {
            let grad = store.get(id).grad_or_zeros();
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let values = store.get_mut(id).data_mut();
            for i in 0..values.len() {
                let g = grad[i] as f64;
                let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * g;
                let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bias1) / ((vi / bias2).sqrt() + ADAM_EPS);
                values[i] -= update as f32;
            }
        }
    }

    pub fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot {
            step: self.step_count,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(snapshot: AdamSnapshot) -> Self {
        Adam {
            m: snapshot.m,
            v: snapshot.v,
            step_count: snapshot.step,
        }
    }
}

/// Step-decay schedule: `lr0 * factor^floor(epoch / every)`.
pub fn lr_at_epoch(lr0: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    lr0 * factor.powi((epoch / every) as i32)
}

/// Builds the frame model with parameters initialized from the config seed.
pub fn build_model(config: &Config) -> Result<(ParamStore<f32>, M2trModel)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x0DE1));
    let model = M2trModel::new(&mut store, &mut rng, config)?;
    Ok((store, model))
}

/// Per-epoch log row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_seg: f64,
    pub loss_con: f64,
    pub val_acc: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub last_path: PathBuf,
    pub best_path: PathBuf,
    pub best_val_auc: Option<f64>,
}

fn load_all(index: &DatasetIndex) -> Result<Vec<Sample>> {
    (0..index.len()).map(|i| index.load_sample(i)).collect()
}

fn check_dataset(config: &Config, index: &DatasetIndex) -> Result<()> {
    if index.manifest.image_size != config.image_size {
        return Err(Error::Data(format!(
            "dataset images are {0}x{0} but the config wants {1}x{1}",
            index.manifest.image_size, config.image_size
        )));
    }
    if index.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    Ok(())
}

/// Scores every sample; returns (scores, labels, mean fake-mask IoU, fake count).
fn score_dataset(
    model: &M2trModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
) -> Result<(Vec<f64>, Vec<u8>, Option<f64>, usize)> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut iou_sum = 0.0;
    let mut iou_n = 0usize;
    for chunk in samples.chunks(32) {
        let mut tape = Tape::new();
        for sample in chunk {
            let out = model.forward(store, &mut tape, &sample.image)?;
            scores.push(tape.value(out.score).item()? as f64);
            labels.push(sample.label);
            if sample.label == 1 {
                iou_sum += mask_iou(tape.value(out.mask), &sample.mask, 0.5)?;
                iou_n += 1;
            }
        }
    }
    let iou = if iou_n > 0 { Some(iou_sum / iou_n as f64) } else { None };
    Ok((scores, labels, iou, iou_n))
}

/// Detector metrics of a model on a dataset directory: accuracy at 0.5,
/// rank AUC, and mean mask IoU over manipulated samples.
pub fn evaluate_model(
    model: &M2trModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
    config_hash: &str,
) -> Result<Vec<MetricRow>> {
    let (scores, labels, iou, iou_n) = score_dataset(model, store, samples)?;
    let set = ScoredSet::new(scores, labels)?;
    let mut rows = vec![
        MetricRow {
            metric: "acc".into(),
            value: accuracy(&set, 0.5),
            n: set.len() as u64,
            config_hash: config_hash.to_string(),
        },
        MetricRow {
            metric: "auc".into(),
            value: auc(&set)?,
            n: set.len() as u64,
            config_hash: config_hash.to_string(),
        },
    ];
    if let Some(iou) = iou {
        rows.push(MetricRow {
            metric: "mask_iou".into(),
            value: iou,
            n: iou_n as u64,
            config_hash: config_hash.to_string(),
        });
    }
    Ok(rows)
}

/// Full training run: balanced epochs, Adam on the combined loss, per-epoch
/// validation, best-AUC and last checkpoints, and a CSV metrics log.
pub fn train(
    config: &Config,
    train_dir: &Path,
    val_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainReport> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let index = DatasetIndex::load(train_dir)?;
    check_dataset(config, &index)?;
    let samples = load_all(&index)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let val_samples = match val_dir {
        Some(dir) => {
            let vi = DatasetIndex::load(dir)?;
            check_dataset(config, &vi)?;
            Some(load_all(&vi)?)
        }
        None => None,
    };

    let (mut store, model) = build_model(config)?;
    let mut adam = Adam::new(&store);
    let mut epoch_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5EED));
    let weights = LossWeights {
        lambda_seg: config.lambda_seg,
        lambda_con: config.lambda_con,
    };
    let config_hash = config.hash();

    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut best_val_auc: Option<f64> = None;
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config.lr, config.lr_decay_factor, config.lr_decay_every, epoch);
        let order = balanced_epoch(&labels, epoch_rng.gen());
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64); // total, cls, seg, con
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            store.zero_grads();
            let mut tape = Tape::new();
            let mut cls_terms = Vec::with_capacity(batch.len());
            let mut seg_terms = Vec::with_capacity(batch.len());
            let mut feats = Vec::with_capacity(batch.len());
            for &row in batch {
                let sample = &samples[row];
                let out = model.forward(&store, &mut tape, &sample.image)?;
                cls_terms.push(cls_loss(&mut tape, out.score, sample.label)?);
                seg_terms.push(seg_loss(&mut tape, out.mask, &sample.mask)?);
                feats.push((out.feature, sample.label));
            }
            let cls = mean_scalars(&mut tape, &cls_terms)?;
            let seg = mean_scalars(&mut tape, &seg_terms)?;
            let con = contrastive_loss(&mut tape, &feats)?;
            let total = total_loss(&mut tape, cls, seg, con, &weights)?;
            let total_v = tape.value(total).item()? as f64;
            if !total_v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batches}"
                )));
            }
            sums.0 += total_v;
            sums.1 += tape.value(cls).item()? as f64;
            sums.2 += tape.value(seg).item()? as f64;
            sums.3 += con.map(|c| tape.value(c).item().unwrap() as f64).unwrap_or(0.0);
            batches += 1;
            tape.backward(total, &mut store)?;
            adam.step(&mut store, lr);
        }

        let (val_acc, val_auc) = match &val_samples {
            Some(vs) => {
                let (scores, vlabels, _, _) = score_dataset(&model, &store, vs)?;
                let set = ScoredSet::new(scores, vlabels)?;
                (Some(accuracy(&set, 0.5)), Some(auc(&set)?))
            }
            None => (None, None),
        };

        let nb = batches.max(1) as f64;
        logs.push(EpochLog {
            epoch,
            lr,
            loss_total: sums.0 / nb,
            loss_cls: sums.1 / nb,
            loss_seg: sums.2 / nb,
            loss_con: sums.3 / nb,
            val_acc,
            val_auc,
        });

        let ckpt = Checkpoint::from_store(
            config,
            (epoch + 1) as u32,
            epoch_rng.get_seed(),
            epoch_rng.get_word_pos(),
            &store,
            Some(adam.snapshot()),
        );
        checkpoint::save(&last_path, &ckpt)?;
        let improved = match (val_auc, best_val_auc) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best_val_auc = val_auc;
            checkpoint::save(&best_path, &ckpt)?;
        }
    }
    if !best_path.exists() {
        std::fs::copy(&last_path, &best_path)?;
    }

    let mut log_file = std::io::BufWriter::new(std::fs::File::create(out_dir.join("train_log.csv"))?);
    writeln!(
        log_file,
        "epoch,lr,loss_total,loss_cls,loss_seg,loss_con,val_acc,val_auc"
    )?;
    for l in &logs {
        writeln!(
            log_file,
            "{},{},{},{},{},{},{},{}",
            l.epoch,
            l.lr,
            l.loss_total,
            l.loss_cls,
            l.loss_seg,
            l.loss_con,
            l.val_acc.map(|v| v.to_string()).unwrap_or_default(),
            l.val_auc.map(|v| v.to_string()).unwrap_or_default(),
        )?;
    }
    log_file.flush()?;
    drop(log_file);
    let _ = config_hash;

    Ok(TrainReport {
        epochs: logs,
        last_path,
        best_path,
        best_val_auc,
    })
}

fn mean_scalars(tape: &mut Tape<f32>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.affine(acc, 1.0 / terms.len() as f32, 0.0))
}

/// Restores a checkpoint into a freshly built model.
pub fn restore(ckpt: &Checkpoint) -> Result<(ParamStore<f32>, M2trModel)> {
    let (mut store, model) = build_model(&ckpt.config)?;
    ckpt.load_into(&mut store)?;
    Ok((store, model))
}

/// Evaluates a checkpoint on a dataset directory.
pub fn evaluate(ckpt_path: &Path, dataset_dir: &Path) -> Result<Vec<MetricRow>> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let (store, model) = restore(&ckpt)?;
    let index = DatasetIndex::load(dataset_dir)?;
    check_dataset(&ckpt.config, &index)?;
    let samples = load_all(&index)?;
    evaluate_model(&model, &store, &samples, &ckpt.config.hash())
}

pub struct Prediction {
    pub score: f64,
    pub mask_path: PathBuf,
}

/// Scores one image file and writes its predicted mask next to `out_dir`.
pub fn predict(ckpt_path: &Path, image_path: &Path, out_dir: &Path) -> Result<Prediction> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let (store, model) = restore(&ckpt)?;
    let image = crate::tns::read_tensor(image_path)?;
    std::fs::create_dir_all(out_dir)?;
    let mut tape = Tape::new();
    let out = model.forward(&store, &mut tape, &image)?;
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let mask_path = out_dir.join(format!("{stem}_mask.tns"));
    crate::tns::write_tensor(&mask_path, tape.value(out.mask))?;
    Ok(Prediction {
        score: tape.value(out.score).item()? as f64,
        mask_path,
    })
}

/// One trained-and-evaluated ablation variant.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub ablate_mt: bool,
    pub ablate_ff: bool,
    pub ablate_cmf: bool,
    pub lambda_con: f64,
    pub acc: f64,
    pub auc: f64,
}

/// The standard comparison matrix over a base configuration.
pub fn standard_ablation_matrix(base: &Config) -> Vec<(String, Config)> {
    let mut variants = vec![("full".to_string(), base.clone())];
    let mut wo_mt = base.clone();
    wo_mt.ablate_mt = true;
    variants.push(("wo_mt".into(), wo_mt));
    let mut wo_ff = base.clone();
    wo_ff.ablate_ff = true;
    variants.push(("wo_ff".into(), wo_ff));
    let mut wo_cmf = base.clone();
    wo_cmf.ablate_cmf = true;
    variants.push(("wo_cmf".into(), wo_cmf));
    let mut ncl = base.clone();
    ncl.lambda_con = 0.0;
    variants.push(("no_contrastive".into(), ncl));
    variants
}

/// Trains every variant with the shared seed and evaluates each on the test
/// split; writes `ablation.csv` under `out_dir`.
pub fn run_ablation(
    variants: &[(String, Config)],
    train_dir: &Path,
    test_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for (name, cfg) in variants {
        let run_dir = out_dir.join(name);
        let report = train(cfg, train_dir, None, &run_dir)?;
        let metrics = evaluate(&report.last_path, test_dir)?;
        let find = |metric: &str| {
            metrics
                .iter()
                .find(|r| r.metric == metric)
                .map(|r| r.value)
                .ok_or_else(|| Error::Numeric(format!("{metric} missing from evaluation")))
        };
        rows.push(AblationRow {
            variant: name.clone(),
            ablate_mt: cfg.ablate_mt,
            ablate_ff: cfg.ablate_ff,
            ablate_cmf: cfg.ablate_cmf,
            lambda_con: cfg.lambda_con,
            acc: find("acc")?,
            auc: find("auc")?,
        });
    }
    let mut csv = String::from("variant,ablate_mt,ablate_ff,ablate_cmf,lambda_con,acc,auc\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant, r.ablate_mt, r.ablate_ff, r.ablate_cmf, r.lambda_con, r.acc, r.auc
        ));
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    Ok(rows)
}
