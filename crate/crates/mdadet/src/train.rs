//! The unified training loop used by every stage.
//!
//! Each iteration samples a fixed per-domain batch, runs every image through
//! the detector, and accumulates per-image gradient buffers that are reduced
//! in input order before a single optimizer step — execution is
//! bit-deterministic in serial and parallel mode alike.
//!
//! Detection losses apply to images whose labels are open (the source split,
//! and pseudo-labeled target images during self-training) and are averaged
//! over those images. Domain losses apply to every image at every configured
//! attachment level, averaged over the whole batch and summed across levels;
//! their gradient re-enters the detector through the gradient reversal,
//! scaled by −λ.

use std::collections::BTreeMap;
use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adv::{
    domain_loss, grl_backward, grl_forward, lambda_schedule, DiscriminatorConfig, Discriminator,
};
use crate::data::{build_batch, DomainDataset};
use crate::det::losses::{detection_loss, LossBundle};
use crate::det::DetectorModel;
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, GradStore, LrSchedule, OptimKind, Optimizer, ParamStore};
use crate::par::{map_ordered, ExecMode};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LambdaMode {
    /// λ follows the warm-up schedule over training progress.
    Progress,
    /// λ pinned to one value (used by self-training rounds, which continue
    /// from an already warmed-up model).
    Fixed { value: f64 },
}

impl Default for LambdaMode {
    fn default() -> Self {
        LambdaMode::Progress
    }
}

fn default_log_every() -> usize {
    25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total planned iterations; also the denominator of the λ progress.
    pub iterations: usize,
    /// domain_id -> images per batch.
    pub batch_composition: BTreeMap<usize, usize>,
    #[serde(default)]
    pub optimizer: OptimKind,
    pub lr: LrSchedule,
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub exec_mode: ExecMode,
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: u64,
    /// Mean over the labeled sub-batch; zero when nothing was labeled.
    pub l_class: f64,
    pub l_box: f64,
    /// Per attachment level, mean over the full batch.
    pub l_d: BTreeMap<String, f64>,
    pub lambda: f64,
    pub lr: f64,
    /// Combined objective l_class + l_box − λ · Σ l_d.
    pub total: f64,
}

impl IterRecord {
    pub fn det_total(&self) -> f64 {
        self.l_class + self.l_box
    }
}

/// Mutable training state, checkpointable and resumable bit-exactly.
pub struct TrainState {
    pub ps: ParamStore,
    pub optimizer: Optimizer,
    pub iter: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(ps: ParamStore, optimizer: OptimKind, rng: ChaCha8Rng) -> Self {
        let opt = Optimizer::new(optimizer, &ps);
        TrainState {
            ps,
            optimizer: opt,
            iter: 0,
            rng,
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }
}

struct ImageGrads {
    det: Option<LossBundle>,
    l_ds: Vec<(String, f64)>,
    grads: GradStore,
}

fn validate_setup(
    model: &DetectorModel,
    discs: &[Discriminator],
    disc_cfg: Option<&DiscriminatorConfig>,
    datasets: &[DomainDataset],
    cfg: &TrainConfig,
) -> Result<()> {
    if cfg.batch_composition.values().all(|&n| n == 0) {
        return Err(Error::Config("batch composition is empty".into()));
    }
    if !discs.is_empty() {
        if disc_cfg.is_none() {
            return Err(Error::Config(
                "discriminators supplied without a discriminator config".into(),
            ));
        }
        for ds in datasets {
            if cfg
                .batch_composition
                .get(&ds.spec.domain_id)
                .copied()
                .unwrap_or(0)
                == 0
            {
                return Err(Error::Config(format!(
                    "adversarial training requires every domain in the batch; '{}' (id {}) is missing",
                    ds.spec.name, ds.spec.domain_id
                )));
            }
        }
    } else {
        let any_labeled = datasets.iter().any(|ds| {
            cfg.batch_composition
                .get(&ds.spec.domain_id)
                .is_some_and(|&n| n > 0)
                && ds.train.iter().any(|s| s.labels.is_open_nonempty())
        });
        if !any_labeled {
            return Err(Error::Config(
                "nothing to optimize: no labeled images in the batch and no discriminators".into(),
            ));
        }
    }
    if let LambdaMode::Fixed { value } = cfg.lambda_mode {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Config(format!("fixed lambda {value} must be >= 0")));
        }
    }
    let _ = model;
    Ok(())
}

/// Runs iterations `state.iter .. cfg.iterations`. Returns the per-iteration
/// records that were produced this call (every `log_every`-th plus the last),
/// mirroring them to `log_sink` as JSON lines when given.
///
/// `stop_at` pauses the run after that iteration count without changing the
/// planned total (λ progress keeps its denominator); calling again on the
/// same state continues exactly where it left off.
pub fn train(
    model: &DetectorModel,
    discs: &[Discriminator],
    disc_cfg: Option<&DiscriminatorConfig>,
    datasets: &[DomainDataset],
    cfg: &TrainConfig,
    state: &mut TrainState,
    stop_at: Option<u64>,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<Vec<IterRecord>> {
    validate_setup(model, discs, disc_cfg, datasets, cfg)?;
    let num_classes = model.cfg.num_classes;
    let mut records = Vec::new();

    while (state.iter as usize) < cfg.iterations
        && stop_at.map_or(true, |s| state.iter < s)
    {
        let lambda = match cfg.lambda_mode {
            LambdaMode::Progress => {
                lambda_schedule(state.iter as f64 / cfg.iterations as f64)?
            }
            LambdaMode::Fixed { value } => value,
        };
        let lr = cfg.lr.at(state.iter);

        let batch = build_batch(datasets, &cfg.batch_composition, &mut state.rng)?;
        let images: Vec<&crate::data::ImageSample> = batch.iter_flat().collect();
        let n_images = images.len();
        let n_labeled = images
            .iter()
            .filter(|s| s.labels.try_open().is_some())
            .count();

        let ps = &state.ps;
        let results: Vec<Result<ImageGrads>> = map_ordered(cfg.exec_mode, images, |sample| {
            let (outputs, pyramid, cache) = model.forward_single(ps, &sample.pixels);
            let mut grads = GradStore::zeros_like(ps);
            let mut feat_grads = BTreeMap::new();
            let mut l_ds = Vec::with_capacity(discs.len());
            for disc in discs {
                let feat = grl_forward(pyramid.get(disc.level));
                let (logits, dcache) = disc.forward_cached(ps, &feat)?;
                let dc = disc_cfg
                    .expect("validated earlier")
                    .domain_class(sample.domain_id);
                let (l_d, mut dlogits) = domain_loss(&logits, dc)?;
                dlogits.mapv_inplace(|g| g / n_images as f64);
                let dfeat = disc.backward(ps, &dcache, &dlogits, &mut grads);
                let reversed = grl_backward(&dfeat, lambda);
                feat_grads
                    .entry(disc.level)
                    .and_modify(|acc: &mut ndarray::Array3<f64>| *acc += &reversed)
                    .or_insert(reversed);
                l_ds.push((disc.level.name().to_string(), l_d));
            }
            let det = match sample.labels.try_open() {
                Some(anns) => {
                    let (_, h, w) = sample.pixels.dim();
                    let anchors = model.anchors_for(h, w);
                    let (bundle, mut ograds) =
                        detection_loss(&outputs, &anchors, anns, num_classes)?;
                    let scale = 1.0 / n_labeled as f64;
                    for (dc, dr) in &mut ograds.levels {
                        dc.mapv_inplace(|g| g * scale);
                        dr.mapv_inplace(|g| g * scale);
                    }
                    model.backward_single(ps, &cache, &pyramid, Some(&ograds), &feat_grads, &mut grads);
                    Some(bundle)
                }
                None => {
                    model.backward_single(ps, &cache, &pyramid, None, &feat_grads, &mut grads);
                    None
                }
            };
            Ok(ImageGrads { det, l_ds, grads })
        });

        // Reduce in input order: identical results serial or parallel.
        let mut total = GradStore::zeros_like(&state.ps);
        let mut det_sum = LossBundle::ZERO;
        let mut l_d_sums: BTreeMap<String, f64> = BTreeMap::new();
        for r in results {
            let img = r?;
            total.add_assign(&img.grads);
            if let Some(b) = img.det {
                det_sum += b;
            }
            for (name, v) in img.l_ds {
                *l_d_sums.entry(name).or_insert(0.0) += v;
            }
        }
        if let Some(max) = cfg.clip_grad_norm {
            clip_global_norm(&mut total, max);
        }
        state.optimizer.step(&mut state.ps, &total, lr);
        state.iter += 1;

        let det_norm = n_labeled.max(1) as f64;
        let l_d: BTreeMap<String, f64> = l_d_sums
            .into_iter()
            .map(|(k, v)| (k, v / n_images as f64))
            .collect();
        let l_d_total: f64 = l_d.values().sum();
        let record = IterRecord {
            iteration: state.iter - 1,
            l_class: det_sum.l_class / det_norm,
            l_box: det_sum.l_box / det_norm,
            l_d,
            lambda,
            lr,
            total: det_sum.l_class / det_norm + det_sum.l_box / det_norm - lambda * l_d_total,
        };
        if !record.total.is_finite() {
            return Err(Error::numeric(
                "train",
                format!("non-finite objective at iteration {}", record.iteration),
            ));
        }
        let last = state.iter as usize == cfg.iterations;
        if record.iteration % cfg.log_every.max(1) as u64 == 0 || last {
            if let Some(w) = log_sink.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&record)?)?;
            }
            records.push(record);
        }
    }
    Ok(records)
}

/// Convenience used by tests and probes: detection-only training config.
pub fn detection_only_config(
    iterations: usize,
    batch_composition: BTreeMap<usize, usize>,
    base_lr: f64,
) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_composition,
        optimizer: OptimKind::default(),
        lr: LrSchedule {
            base: base_lr,
            decays: vec![],
        },
        clip_grad_norm: Some(10.0),
        lambda_mode: LambdaMode::Fixed { value: 0.0 },
        log_every: 25,
        exec_mode: ExecMode::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        Annotation, BoundingBox, DomainDataset, DomainRole, DomainSpec, ImageSample, Labels,
    };
    use crate::det::DetectorConfig;
    use crate::rng::{gauss, stream, StreamId};
    use ndarray::Array3;

    fn toy_sample(id: u64, domain_id: usize, labeled: bool, rng: &mut ChaCha8Rng) -> ImageSample {
        let mut px = Array3::from_elem((3, 32, 32), 0.5);
        // bright square on channel 0 on a mid background
        for y in 6..26 {
            for x in 6..26 {
                px[[0, y, x]] = 0.9;
            }
        }
        px.mapv_inplace(|v| (v + 0.02 * gauss(rng)).clamp(0.0, 1.0));
        let labels = if labeled {
            Labels::Open(vec![Annotation {
                bbox: BoundingBox {
                    x_min: 6.0,
                    y_min: 6.0,
                    x_max: 26.0,
                    y_max: 26.0,
                },
                class_id: 0,
            }])
        } else {
            Labels::Poisoned
        };
        ImageSample {
            id,
            domain_id,
            pixels: px,
            labels,
        }
    }

    fn toy_datasets(rng: &mut ChaCha8Rng) -> Vec<DomainDataset> {
        let mk = |domain_id: usize, name: &str, role: DomainRole, labeled: bool, rng: &mut ChaCha8Rng| {
            DomainDataset {
                spec: DomainSpec {
                    domain_id,
                    name: name.to_string(),
                    role,
                    train_labeled: labeled,
                },
                train: (0..6)
                    .map(|i| toy_sample(domain_id as u64 * 100 + i, domain_id, labeled, rng))
                    .collect(),
                test: vec![],
            }
        };
        vec![
            mk(0, "src", DomainRole::Source, true, rng),
            mk(1, "tgt", DomainRole::Target, false, rng),
        ]
    }

    fn setup(
        with_disc: bool,
    ) -> (
        DetectorModel,
        Vec<Discriminator>,
        Option<DiscriminatorConfig>,
        TrainState,
        Vec<DomainDataset>,
    ) {
        let cfg = DetectorConfig::tiny(2);
        let mut ps = ParamStore::new();
        let mut init_rng = stream(3, StreamId::ModelInit);
        let model = DetectorModel::build(&cfg, &mut ps, &mut init_rng).unwrap();
        let (discs, dcfg) = if with_disc {
            let dcfg = DiscriminatorConfig::multiclass_at_c3(1);
            dcfg.validate(1).unwrap();
            let discs = Discriminator::build_all(&dcfg, &cfg, &mut ps, &mut init_rng);
            (discs, Some(dcfg))
        } else {
            (vec![], None)
        };
        let state = TrainState::new(ps, OptimKind::default(), stream(3, StreamId::Stage2Train));
        let mut data_rng = stream(3, StreamId::BenchmarkGen);
        let datasets = toy_datasets(&mut data_rng);
        (model, discs, dcfg, state, datasets)
    }

    fn comp(pairs: &[(usize, usize)]) -> BTreeMap<usize, usize> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let (model, discs, dcfg, mut state, datasets) = setup(true);
        let before = state.ps.flatten();
        let cfg = TrainConfig {
            iterations: 0,
            batch_composition: comp(&[(0, 2), (1, 2)]),
            ..detection_only_config(0, comp(&[(0, 2), (1, 2)]), 1e-3)
        };
        let recs = train(&model, &discs, dcfg.as_ref(), &datasets, &cfg, &mut state, None, None).unwrap();
        assert!(recs.is_empty());
        assert_eq!(state.ps.flatten(), before);
        assert_eq!(state.iter, 0);
    }

    #[test]
    fn adversarial_iteration_logs_all_terms() {
        let (model, discs, dcfg, mut state, datasets) = setup(true);
        let mut cfg = detection_only_config(2, comp(&[(0, 2), (1, 2)]), 1e-3);
        cfg.lambda_mode = LambdaMode::Progress;
        cfg.log_every = 1;
        let mut sink = Vec::new();
        let recs = train(
            &model,
            &discs,
            dcfg.as_ref(),
            &datasets,
            &cfg,
            &mut state,
            None,
            Some(&mut sink),
        )
        .unwrap();
        assert_eq!(recs.len(), 2);
        // iteration 0: progress 0 -> lambda exactly 0
        assert_eq!(recs[0].lambda, 0.0);
        assert!(recs[1].lambda > 0.0);
        assert!(recs[0].l_class > 0.0);
        assert!(recs[0].l_d.contains_key("C3"));
        assert!(recs[0].l_d["C3"] > 0.0);
        assert!((recs[0].total
            - (recs[0].l_class + recs[0].l_box - recs[0].lambda * recs[0].l_d["C3"]))
            .abs()
            < 1e-15);
        // JSONL log round-trips
        let lines: Vec<&str> = std::str::from_utf8(&sink).unwrap().trim().lines().collect();
        assert_eq!(lines.len(), 2);
        let parsed: IterRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(parsed.iteration, 0);
        assert_eq!(state.iter, 2);
    }

    #[test]
    fn training_is_deterministic_across_exec_modes() {
        let run = |mode: ExecMode| {
            let (model, discs, dcfg, mut state, datasets) = setup(true);
            let mut cfg = detection_only_config(3, comp(&[(0, 2), (1, 2)]), 1e-3);
            cfg.lambda_mode = LambdaMode::Progress;
            cfg.exec_mode = mode;
            train(&model, &discs, dcfg.as_ref(), &datasets, &cfg, &mut state, None, None).unwrap();
            state.ps.flatten()
        };
        let serial = run(ExecMode::Serial);
        let parallel = run(ExecMode::Parallel);
        assert_eq!(serial, parallel, "exec modes must agree bit-for-bit");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let total = 6;
        let (model, discs, dcfg, mut full, datasets) = setup(true);
        let mut cfg = detection_only_config(total, comp(&[(0, 2), (1, 1)]), 1e-3);
        cfg.lambda_mode = LambdaMode::Progress;
        train(&model, &discs, dcfg.as_ref(), &datasets, &cfg, &mut full, None, None).unwrap();

        // Same run, interrupted at iteration 3 and resumed from captured state.
        let (model2, discs2, dcfg2, mut st, datasets2) = setup(true);
        train(
            &model2,
            &discs2,
            dcfg2.as_ref(),
            &datasets2,
            &cfg,
            &mut st,
            Some(3),
            None,
        )
        .unwrap();
        assert_eq!(st.iter, 3);

        let snapshot_params = st.ps.flatten();
        let snapshot_opt = st.optimizer.state_flat();
        let snapshot_rng = st.rng_state();
        let snapshot_iter = st.iter;

        // rebuild state from the snapshot as a checkpoint restore would
        let mut resumed = TrainState::new(
            st.ps.clone(),
            OptimKind::default(),
            snapshot_rng.restore(),
        );
        resumed.ps.unflatten(&snapshot_params);
        resumed.optimizer.load_state_flat(&snapshot_opt).unwrap();
        resumed.iter = snapshot_iter;
        train(&model2, &discs2, dcfg2.as_ref(), &datasets2, &cfg, &mut resumed, None, None).unwrap();

        assert_eq!(resumed.ps.flatten(), full.ps.flatten());
        assert_eq!(resumed.optimizer.state_flat(), full.optimizer.state_flat());
    }

    #[test]
    fn detection_only_training_reduces_loss() {
        let (model, _, _, mut state, datasets) = setup(false);
        let mut cfg = detection_only_config(30, comp(&[(0, 4)]), 2e-3);
        cfg.log_every = 1;
        let recs = train(&model, &[], None, &datasets, &cfg, &mut state, None, None).unwrap();
        let first = recs.first().unwrap().det_total();
        let last = recs.last().unwrap().det_total();
        assert!(
            last < first,
            "loss should drop: first {first}, last {last}"
        );
    }

    #[test]
    fn setup_validation_errors() {
        let (model, discs, dcfg, mut state, datasets) = setup(true);
        // adversarial training with the target missing from the batch
        let cfg = detection_only_config(1, comp(&[(0, 2)]), 1e-3);
        let err = train(&model, &discs, dcfg.as_ref(), &datasets, &cfg, &mut state, None, None);
        assert!(err.is_err());

        // no discriminators and only unlabeled domains in the batch
        let (model, _, _, mut state, datasets) = setup(false);
        let cfg = detection_only_config(1, comp(&[(1, 2)]), 1e-3);
        let err = train(&model, &[], None, &datasets, &cfg, &mut state, None, None);
        assert!(err.is_err());
    }
}
