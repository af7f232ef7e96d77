//! Stage 3: threshold-scheduled self-training.
//!
//! Each round promotes the current model's confident detections on target
//! train images to pseudo labels, then retrains from the current weights on
//! the union of labeled source images and pseudo-labeled target images. The
//! confidence threshold rises between rounds; the loop ends after the final
//! threshold. Rounds are strictly sequential; label generation inside a
//! round parallelizes across images.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adv::{lambda_schedule, Discriminator, DiscriminatorConfig};
use crate::data::coco::{doc_from_samples, write_doc};
use crate::data::{Annotation, Detection, DomainDataset, ImageSample, Labels};
use crate::det::checkpoint::sha256_hex;
use crate::det::DetectorModel;
use crate::error::{Error, Result};
use crate::nn::{Optimizer, ParamStore};
use crate::par::{map_ordered, ExecMode};
use crate::train::{train, LambdaMode, TrainConfig, TrainState};

/// Ascending confidence thresholds, one per self-training round. Values live
/// on a grid of hundredths so sequences are exact: the default
/// (0.75, 0.05, 0.90) yields precisely [0.75, 0.80, 0.85, 0.90].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub start: f64,
    pub step: f64,
    pub end: f64,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        ThresholdSchedule { start: 0.75, step: 0.05, end: 0.90 }
    }
}

fn to_hundredths(x: f64, what: &str) -> Result<i64> {
    let scaled = x * 100.0;
    if !x.is_finite() || (scaled - scaled.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "schedule {what} {x} is not a multiple of 0.01"
        )));
    }
    Ok(scaled.round() as i64)
}

impl ThresholdSchedule {
    pub fn new(start: f64, step: f64, end: f64) -> Self {
        ThresholdSchedule { start, step, end }
    }

    /// A single fixed threshold (one round).
    pub fn fixed(t: f64) -> Self {
        ThresholdSchedule { start: t, step: 0.05, end: t }
    }

    pub fn thresholds(&self) -> Result<Vec<f64>> {
        let s = to_hundredths(self.start, "start")?;
        let p = to_hundredths(self.step, "step")?;
        let e = to_hundredths(self.end, "end")?;
        if !(0..=100).contains(&s) || !(0..=100).contains(&e) {
            return Err(Error::Config(format!(
                "schedule thresholds must lie in [0, 1], got start {} end {}",
                self.start, self.end
            )));
        }
        if e < s {
            return Err(Error::Config(format!(
                "schedule end {} is below start {}",
                self.end, self.start
            )));
        }
        if p <= 0 {
            return Err(Error::Config(format!("schedule step {} must be positive", self.step)));
        }
        if (e - s) % p != 0 {
            return Err(Error::Config(format!(
                "schedule end {} is not reachable from {} in steps of {}",
                self.end, self.start, self.step
            )));
        }
        Ok((s..=e).step_by(p as usize).map(|k| k as f64 / 100.0).collect())
    }
}

/// Pseudo labels for one target train image: detections of the generating
/// model that scored at least `threshold_used`, with scores dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub domain_id: usize,
    pub image_id: u64,
    pub annotations: Vec<Annotation>,
    pub threshold_used: f64,
    pub round_index: usize,
}

/// Keeps exactly the detections with `score >= t`, order preserved, as
/// score-free annotations.
pub fn filter_detections(detections: &[Detection], t: f64) -> Result<Vec<Annotation>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Validation(format!(
            "confidence threshold {t} outside [0, 1]"
        )));
    }
    Ok(detections
        .iter()
        .filter(|d| d.score >= t)
        .map(Detection::drop_score)
        .collect())
}

/// Runs inference (standard NMS, standard score floor) on every target train
/// image and promotes detections scoring at least `t`. One record per image,
/// targets and images in input order.
pub fn generate_pseudo_labels(
    model: &DetectorModel,
    ps: &ParamStore,
    targets: &[&DomainDataset],
    t: f64,
    round_index: usize,
    mode: ExecMode,
) -> Result<Vec<PseudoLabelRecord>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Validation(format!(
            "confidence threshold {t} outside [0, 1]"
        )));
    }
    let mut records = Vec::new();
    for ds in targets {
        let results = map_ordered(mode, ds.train.iter().collect(), |s: &ImageSample| -> Result<PseudoLabelRecord> {
            let dets = model.infer(ps, &s.pixels)?;
            Ok(PseudoLabelRecord {
                domain_id: s.domain_id,
                image_id: s.id,
                annotations: filter_detections(&dets, t)?,
                threshold_used: t,
                round_index,
            })
        });
        for r in results {
            records.push(r?);
        }
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct SelfTrainConfig {
    pub schedule: ThresholdSchedule,
    /// Training budget per round; `train.iterations` is overridden by this.
    pub round_iterations: usize,
    /// Per-round training template. The constructor pins λ at its ramp
    /// ceiling — the alignment schedule finished during stage 2.
    pub train: TrainConfig,
    /// Keep the adversarial branch active during rounds (default). Off
    /// trains the rounds purely on detection losses.
    pub adversarial: bool,
    /// Drop source images from the round mix (the strictest reading of
    /// retraining "using the pseudo labels").
    pub pseudo_only: bool,
    /// Reinitialize weights and optimizer at each round instead of
    /// continuing from the current state. Labels are always generated
    /// before reinitialization.
    pub reinit_each_round: bool,
    /// When set, rounds dump pseudo-label documents and append a round log
    /// under this directory.
    pub out_dir: Option<PathBuf>,
}

impl SelfTrainConfig {
    pub fn new(mut train: TrainConfig, round_iterations: usize) -> Self {
        train.lambda_mode = LambdaMode::Fixed {
            value: lambda_schedule(1.0).expect("1.0 is a valid progress"),
        };
        SelfTrainConfig {
            schedule: ThresholdSchedule::default(),
            round_iterations,
            train,
            adversarial: true,
            pseudo_only: false,
            reinit_each_round: false,
            out_dir: None,
        }
    }
}

/// One line of the round log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLog {
    pub round_index: usize,
    pub threshold: f64,
    /// Promoted boxes per target domain.
    pub promoted_boxes: BTreeMap<String, usize>,
    /// Images carrying at least one promoted box, per target domain.
    pub pseudo_images: BTreeMap<String, usize>,
    /// Hash of the parameter vector that generated this round's labels.
    pub params_hash: String,
    /// Hash of the serialized pseudo-label records.
    pub labels_hash: String,
    /// Per-domain test mAP measured after the round, when an eval hook ran.
    pub eval_map: Option<BTreeMap<String, f64>>,
}

pub fn hash_params(ps: &ParamStore) -> String {
    let flat = ps.flatten();
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

pub fn hash_records(records: &[PseudoLabelRecord]) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(records)?))
}

/// The round's training view of the data: source as-is (unless pseudo-only),
/// and each target's full train split with pseudo-labeled images opened and
/// the rest left unreadable — they still fill domain-alignment slots, but
/// contribute no detection loss.
fn assemble_round_datasets(
    source: &DomainDataset,
    targets: &[&DomainDataset],
    records: &[PseudoLabelRecord],
    pseudo_only: bool,
) -> Vec<DomainDataset> {
    let by_key: BTreeMap<(usize, u64), &PseudoLabelRecord> = records
        .iter()
        .map(|r| ((r.domain_id, r.image_id), r))
        .collect();
    let mut out = Vec::new();
    if !pseudo_only {
        out.push(source.clone());
    }
    for ds in targets {
        let train = ds
            .train
            .iter()
            .map(|s| {
                let anns = by_key
                    .get(&(s.domain_id, s.id))
                    .map(|r| r.annotations.as_slice())
                    .unwrap_or(&[]);
                ImageSample {
                    id: s.id,
                    domain_id: s.domain_id,
                    pixels: s.pixels.clone(),
                    labels: if anns.is_empty() {
                        Labels::Poisoned
                    } else {
                        Labels::Open(anns.to_vec())
                    },
                }
            })
            .collect();
        out.push(DomainDataset {
            spec: ds.spec.clone(),
            train,
            test: ds.test.clone(),
        });
    }
    out
}

fn dump_round(
    dir: &std::path::Path,
    round_index: usize,
    datasets: &[DomainDataset],
    targets: &[&DomainDataset],
    class_names: &[String],
) -> Result<()> {
    let pseudo_dir = dir.join("pseudo");
    fs::create_dir_all(&pseudo_dir)?;
    for ds in datasets {
        if !targets.iter().any(|t| t.spec.domain_id == ds.spec.domain_id) {
            continue;
        }
        // The dump mirrors the round's view: every train image appears,
        // annotations are the promoted boxes (possibly none).
        let opened: Vec<ImageSample> = ds
            .train
            .iter()
            .map(|s| ImageSample {
                id: s.id,
                domain_id: s.domain_id,
                pixels: s.pixels.clone(),
                labels: Labels::Open(s.labels.try_open().unwrap_or(&[]).to_vec()),
            })
            .collect();
        let doc = doc_from_samples(&opened, class_names, |s| {
            format!("images/train/{:06}.png", s.id)
        })?;
        let path = pseudo_dir.join(format!("round_{round_index}_{}.json", ds.spec.name));
        write_doc(&path, &doc)?;
    }
    Ok(())
}

fn reinitialize(
    model: &DetectorModel,
    disc_cfg: Option<&DiscriminatorConfig>,
    cfg: &SelfTrainConfig,
    state: &mut TrainState,
) -> Result<()> {
    let mut ps = ParamStore::new();
    let _ = DetectorModel::build(&model.cfg, &mut ps, &mut state.rng)?;
    if let Some(dc) = disc_cfg {
        let _ = Discriminator::build_all(dc, &model.cfg, &mut ps, &mut state.rng);
    }
    // The caller's model and discriminator handles index into the store by
    // position; the rebuild must reproduce the original layout exactly.
    let old: Vec<_> = state.ps.iter().map(|(n, a)| (n.to_string(), a.shape().to_vec())).collect();
    let new: Vec<_> = ps.iter().map(|(n, a)| (n.to_string(), a.shape().to_vec())).collect();
    if old != new {
        return Err(Error::Config(
            "cannot reinitialize: parameter store layout is not reproducible from \
             the detector and discriminator configs"
                .into(),
        ));
    }
    state.ps = ps;
    state.optimizer = Optimizer::new(cfg.train.optimizer, &state.ps);
    Ok(())
}

/// Runs the full self-training loop; `state` carries the stage-2 weights in
/// and the refined weights out. Returns one log entry per round.
///
/// `eval_hook`, when given, runs after each round's training and its result
/// lands in the round log. `train_sink` receives the training loop's JSONL
/// records across all rounds.
#[allow(clippy::too_many_arguments)]
pub fn self_training_loop(
    model: &DetectorModel,
    discs: &[Discriminator],
    disc_cfg: Option<&DiscriminatorConfig>,
    source: &DomainDataset,
    targets: &[&DomainDataset],
    class_names: &[String],
    cfg: &SelfTrainConfig,
    state: &mut TrainState,
    mut eval_hook: Option<&mut dyn FnMut(&TrainState) -> Result<BTreeMap<String, f64>>>,
    mut train_sink: Option<&mut dyn Write>,
) -> Result<Vec<RoundLog>> {
    let thresholds = cfg.schedule.thresholds()?;
    if cfg.adversarial && (discs.is_empty() || disc_cfg.is_none()) {
        return Err(Error::Config(
            "adversarial self-training requires discriminators; pass them or disable the branch"
                .into(),
        ));
    }
    if targets.is_empty() {
        return Err(Error::Config("self-training requires at least one target domain".into()));
    }

    let mut logs = Vec::new();
    for (round_index, &t) in thresholds.iter().enumerate() {
        // Labels come from the model state at the start of the round; the
        // hashes make that provenance checkable after the fact.
        let params_hash = hash_params(&state.ps);
        let records =
            generate_pseudo_labels(model, &state.ps, targets, t, round_index, cfg.train.exec_mode)?;
        let labels_hash = hash_records(&records)?;

        let mut promoted_boxes = BTreeMap::new();
        let mut pseudo_images = BTreeMap::new();
        for ds in targets {
            let of_domain = records.iter().filter(|r| r.domain_id == ds.spec.domain_id);
            promoted_boxes.insert(
                ds.spec.name.clone(),
                of_domain.clone().map(|r| r.annotations.len()).sum::<usize>(),
            );
            pseudo_images.insert(
                ds.spec.name.clone(),
                of_domain.filter(|r| !r.annotations.is_empty()).count(),
            );
        }
        let total_boxes: usize = promoted_boxes.values().sum();
        if total_boxes == 0 {
            log::warn!(
                "self-training round {round_index}: no detection reached {t}; \
                 the round trains without pseudo labels"
            );
        }

        let round_datasets = assemble_round_datasets(source, targets, &records, cfg.pseudo_only);
        if let Some(dir) = &cfg.out_dir {
            dump_round(dir, round_index, &round_datasets, targets, class_names)?;
        }

        if cfg.reinit_each_round {
            reinitialize(model, disc_cfg, cfg, state)?;
        }

        let mut tcfg = cfg.train.clone();
        tcfg.iterations = cfg.round_iterations;
        if cfg.pseudo_only {
            tcfg.batch_composition.remove(&source.spec.domain_id);
        }
        let (round_discs, round_disc_cfg) = if cfg.adversarial {
            (discs, disc_cfg)
        } else {
            (&[][..], None)
        };
        let any_det_loss = round_datasets.iter().any(|ds| {
            tcfg.batch_composition.get(&ds.spec.domain_id).is_some_and(|&n| n > 0)
                && ds.train.iter().any(|s| s.labels.is_open_nonempty())
        });
        if cfg.round_iterations > 0 {
            if round_discs.is_empty() && !any_det_loss {
                log::warn!(
                    "self-training round {round_index}: nothing to optimize \
                     (no labels, no adversarial branch); skipping training"
                );
            } else {
                // Each round runs in its own iteration frame.
                state.iter = 0;
                let sink: Option<&mut dyn Write> = match train_sink {
                    Some(ref mut w) => Some(&mut **w as &mut dyn Write),
                    None => None,
                };
                train(
                    model,
                    round_discs,
                    round_disc_cfg,
                    &round_datasets,
                    &tcfg,
                    state,
                    None,
                    sink,
                )?;
            }
        }

        let eval_map = match eval_hook.as_mut() {
            Some(hook) => Some(hook(state)?),
            None => None,
        };

        let entry = RoundLog {
            round_index,
            threshold: t,
            promoted_boxes,
            pseudo_images,
            params_hash,
            labels_hash,
            eval_map,
        };
        if let Some(dir) = &cfg.out_dir {
            fs::create_dir_all(dir)?;
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("rounds.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        logs.push(entry);
    }
    Ok(logs)
}
