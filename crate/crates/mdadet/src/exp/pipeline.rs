//! The three-stage pipeline runner, the plain baselines, and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adv::{DiscMode, Discriminator, DiscriminatorConfig};
use crate::data::toybench::{generate_full, generate_toy_benchmark, load_benchmark};
use crate::data::{
    validate_domain_set, DomainDataset, DomainRole, DomainSpec, Labels,
};
use crate::det::checkpoint::{load_checkpoint, restore_params, save_checkpoint};
use crate::det::DetectorModel;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::nn::ParamStore;
use crate::pixeladapt::{
    load_external_translation, save_translator, translate_dataset, Translator,
};
use crate::rng::{stream, StreamId};
use crate::selftrain::{self_training_loop, RoundLog, SelfTrainConfig};
use crate::train::{train, LambdaMode, TrainState};

use super::config::{BenchSource, ExperimentConfig, Stage1Mode};

/// Id offset separating per-target translated copies of the source split.
const PER_TARGET_ID_OFFSET: u64 = 1_000_000;

/// What a run was, for fixed report ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Baseline,
    Oracle,
    Mda,
    MdaSt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// The run died mid-flight; everything recorded up to `stage` is valid
    /// and the checkpoint map holds the last good state.
    Partial { stage: String, error: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub kind: RunKind,
    pub seed: u64,
    pub version: String,
    pub status: RunStatus,
    /// Every target domain name (evaluation covers all of them even when
    /// training is restricted to a subset).
    pub target_domains: Vec<String>,
    pub config: ExperimentConfig,
    /// Stage name -> checkpoint stem (`<stem>.json` + `<stem>.bin`).
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub evals: BTreeMap<String, EvalReport>,
    pub round_logs: Vec<RoundLog>,
    pub translators: Vec<PathBuf>,
    /// Key into `evals` holding the run's final numbers.
    pub final_eval: Option<String>,
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig, kind: RunKind, target_domains: Vec<String>) -> Self {
        RunManifest {
            name: cfg.name.clone(),
            kind,
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Complete,
            target_domains,
            config: cfg.clone(),
            checkpoints: BTreeMap::new(),
            evals: BTreeMap::new(),
            round_logs: Vec::new(),
            translators: Vec::new(),
            final_eval: None,
        }
    }

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    /// Writes `manifest.json`, first checking that every referenced artifact
    /// actually exists.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for (stage, stem) in &self.checkpoints {
            for ext in ["json", "bin"] {
                let p = stem.with_file_name(format!(
                    "{}.{ext}",
                    stem.file_name().unwrap_or_default().to_string_lossy()
                ));
                if !p.is_file() {
                    return Err(Error::Runtime(format!(
                        "manifest references missing checkpoint artifact {} for stage {stage}",
                        p.display()
                    )));
                }
            }
        }
        for t in &self.translators {
            if !t.is_file() {
                return Err(Error::Runtime(format!(
                    "manifest references missing translator {}",
                    t.display()
                )));
            }
        }
        let path = Self::path_in(dir);
        fs::create_dir_all(dir)?;
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn final_report(&self) -> Option<&EvalReport> {
        self.final_eval.as_ref().and_then(|k| self.evals.get(k))
    }

    /// Mean mAP over the target domains in the final eval.
    pub fn mean_target_map(&self) -> Option<f64> {
        let report = self.final_report()?;
        let maps: Vec<f64> = self
            .target_domains
            .iter()
            .filter_map(|n| report.domains.get(n).map(|d| d.map))
            .collect();
        if maps.is_empty() {
            None
        } else {
            Some(maps.iter().sum::<f64>() / maps.len() as f64)
        }
    }
}

pub struct ResolvedData {
    pub domains: Vec<DomainDataset>,
    pub class_names: Vec<String>,
}

pub fn resolve_data(cfg: &ExperimentConfig) -> Result<ResolvedData> {
    let (domains, class_names) = match &cfg.bench {
        BenchSource::Generate { seed, config } => {
            let mut rng = stream(*seed, StreamId::BenchmarkGen);
            (generate_toy_benchmark(config, &mut rng)?, config.class_names())
        }
        BenchSource::Load { root } => {
            load_benchmark(root, crate::data::coco::LabelPolicy::Protocol)?
        }
    };
    check_data(cfg, &domains, &class_names)?;
    Ok(ResolvedData { domains, class_names })
}

/// Oracle variant: the chosen target's train labels stay open; every other
/// target is poisoned as usual.
fn resolve_data_oracle(cfg: &ExperimentConfig, oracle_target: usize) -> Result<ResolvedData> {
    let (mut domains, class_names) = match &cfg.bench {
        BenchSource::Generate { seed, config } => {
            let mut rng = stream(*seed, StreamId::BenchmarkGen);
            (generate_full(config, &mut rng)?, config.class_names())
        }
        BenchSource::Load { root } => {
            load_benchmark(root, crate::data::coco::LabelPolicy::UnlockTargets)?
        }
    };
    let known = domains
        .iter()
        .any(|d| d.spec.domain_id == oracle_target && d.spec.role == DomainRole::Target);
    if !known {
        return Err(Error::Validation(format!(
            "oracle target {oracle_target} is not a target domain"
        )));
    }
    for d in &mut domains {
        if d.spec.role == DomainRole::Target && d.spec.domain_id != oracle_target {
            for s in &mut d.train {
                s.labels = Labels::Poisoned;
            }
        }
    }
    check_data(cfg, &domains, &class_names)?;
    Ok(ResolvedData { domains, class_names })
}

fn check_data(
    cfg: &ExperimentConfig,
    domains: &[DomainDataset],
    class_names: &[String],
) -> Result<()> {
    let specs: Vec<DomainSpec> = domains.iter().map(|d| d.spec.clone()).collect();
    validate_domain_set(&specs)?;
    if class_names.len() != cfg.detector.num_classes {
        return Err(Error::Config(format!(
            "detector is configured for {} classes but the benchmark has {}",
            cfg.detector.num_classes,
            class_names.len()
        )));
    }
    Ok(())
}

struct DomainView<'a> {
    source: &'a DomainDataset,
    all_targets: Vec<&'a DomainDataset>,
    train_targets: Vec<&'a DomainDataset>,
}

/// The multiclass discriminator maps domain ids to class indices directly,
/// so the source must be id 0 and every training target id must fit in the
/// class range. Catches the mismatch at startup instead of mid-train.
fn check_multiclass_ids(cfg: &DiscriminatorConfig, v: &DomainView) -> Result<()> {
    if !matches!(cfg.mode, DiscMode::Multiclass) {
        return Ok(());
    }
    if v.source.spec.domain_id != 0 {
        return Err(Error::Config(
            "multiclass discriminator requires the source domain to have id 0".into(),
        ));
    }
    for t in &v.train_targets {
        if t.spec.domain_id >= cfg.num_domain_classes {
            return Err(Error::Config(format!(
                "multiclass discriminator has {} classes but training target '{}' has \
                 domain id {}; renumber targets 1..=N or switch to the binary mode",
                cfg.num_domain_classes, t.spec.name, t.spec.domain_id
            )));
        }
    }
    Ok(())
}

fn view<'a>(cfg: &ExperimentConfig, data: &'a ResolvedData) -> Result<DomainView<'a>> {
    let source = data
        .domains
        .iter()
        .find(|d| d.spec.role == DomainRole::Source)
        .expect("validated domain set has a source");
    let all_targets: Vec<&DomainDataset> = data
        .domains
        .iter()
        .filter(|d| d.spec.role == DomainRole::Target)
        .collect();
    let train_targets = match &cfg.train_targets {
        None => all_targets.clone(),
        Some(ids) => {
            let mut picked = Vec::new();
            for id in ids {
                let t = all_targets
                    .iter()
                    .find(|d| d.spec.domain_id == *id)
                    .ok_or_else(|| {
                        Error::Config(format!("train_targets names unknown target domain {id}"))
                    })?;
                picked.push(*t);
            }
            picked
        }
    };
    Ok(DomainView { source, all_targets, train_targets })
}

fn write_eval(out: &Path, key: &str, report: &EvalReport) -> Result<PathBuf> {
    let dir = out.join("evals");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{key}.json"));
    fs::write(&path, report.to_json()?)?;
    Ok(path)
}

fn log_file(out: &Path, name: &str) -> Result<fs::File> {
    let dir = out.join("logs");
    fs::create_dir_all(&dir)?;
    Ok(fs::File::create(dir.join(name))?)
}

/// Runs the enabled stages in order: pixel translation, adversarial feature
/// alignment, threshold-scheduled self-training. Evaluates after stage 2 and
/// after every self-training round; writes checkpoints, logs, round dumps,
/// and finally `manifest.json`. A mid-run failure still writes the manifest,
/// marked partial, with every artifact produced up to the failure.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let out = cfg.resolved_out_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;

    let data = resolve_data(cfg)?;
    let v = view(cfg, &data)?;
    cfg.discriminator.validate(v.train_targets.len())?;
    check_multiclass_ids(&cfg.discriminator, &v)?;

    let kind = if cfg.stages.stage3 { RunKind::MdaSt } else { RunKind::Mda };
    let targets: Vec<String> = v.all_targets.iter().map(|d| d.spec.name.clone()).collect();
    let mut manifest = RunManifest::new(cfg, kind, targets);

    let mut stage = String::from("startup");
    match execute_stages(cfg, &out, &data, &v, &mut manifest, &mut stage) {
        Ok(()) => {
            manifest.save(&out)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = RunStatus::Partial { stage, error: e.to_string() };
            // Best effort: the failure being reported is the primary one.
            let _ = manifest.save(&out);
            Err(e)
        }
    }
}

fn execute_stages(
    cfg: &ExperimentConfig,
    out: &Path,
    data: &ResolvedData,
    v: &DomainView,
    manifest: &mut RunManifest,
    stage: &mut String,
) -> Result<()> {
    // ---- stage 1: pixel-level translation (optional)
    *stage = "stage1".into();
    let train_source = match cfg.stages.stage1 {
        Stage1Mode::Off => v.source.clone(),
        Stage1Mode::Reference if cfg.stages.stage1_per_target => {
            let mut train = Vec::new();
            for (i, t) in v.train_targets.iter().enumerate() {
                let tr = Translator::fit_color_match(v.source, &[*t])?;
                let path = out.join(format!("translator_{}.json", t.spec.name));
                save_translator(&path, &tr)?;
                manifest.translators.push(path);
                let translated = translate_dataset(v.source, &tr, cfg.exec_mode);
                train.extend(translated.train.into_iter().map(|mut s| {
                    s.id += (i as u64 + 1) * PER_TARGET_ID_OFFSET;
                    s
                }));
            }
            DomainDataset {
                spec: v.source.spec.clone(),
                train,
                test: v.source.test.clone(),
            }
        }
        Stage1Mode::Reference => {
            let tr = Translator::fit_color_match(v.source, &v.train_targets)?;
            let path = out.join("translator.json");
            save_translator(&path, &tr)?;
            manifest.translators.push(path);
            translate_dataset(v.source, &tr, cfg.exec_mode)
        }
        Stage1Mode::External => {
            let dir = cfg.stages.stage1_external_dir.as_ref().expect("validated");
            load_external_translation(dir, v.source)?
        }
    };

    // ---- model and discriminators
    *stage = "model init".into();
    let mut ps = ParamStore::new();
    let mut init_rng = stream(cfg.seed, StreamId::ModelInit);
    let model = DetectorModel::build(&cfg.detector, &mut ps, &mut init_rng)?;
    let discs = Discriminator::build_all(&cfg.discriminator, &cfg.detector, &mut ps, &mut init_rng);
    let mut state =
        TrainState::new(ps, cfg.optim.optimizer, stream(cfg.seed, StreamId::Stage2Train));

    let mut train_sets: Vec<DomainDataset> = vec![train_source];
    train_sets.extend(v.train_targets.iter().map(|d| (*d).clone()));
    let mut comp = cfg.composition_map();
    comp.retain(|d, _| train_sets.iter().any(|ds| ds.spec.domain_id == *d));
    if comp.values().all(|&n| n == 0) {
        return Err(Error::Config(
            "batch composition covers no training domain".into(),
        ));
    }

    // ---- stage 2: adversarial feature alignment
    if cfg.stages.stage2 {
        *stage = "stage2".into();
        let tcfg = cfg.stage2_train_config(comp.clone());
        let mut sink = log_file(out, "stage2.jsonl")?;
        train(
            &model,
            &discs,
            Some(&cfg.discriminator),
            &train_sets,
            &tcfg,
            &mut state,
            None,
            Some(&mut sink),
        )?;
        let stem = out.join("checkpoints").join("stage2");
        save_checkpoint(
            &stem,
            &state.ps,
            Some(&state.optimizer),
            state.iter,
            [(String::from("train"), state.rng_state())].into_iter().collect(),
            json!({ "stage": "stage2" }),
        )?;
        manifest.checkpoints.insert("stage2".into(), stem);

        *stage = "stage2 eval".into();
        let report = evaluate(
            &model,
            &state.ps,
            &data.domains,
            &data.class_names,
            cfg.eval_iou,
            cfg.exec_mode,
        )?;
        write_eval(out, "stage2", &report)?;
        manifest.evals.insert("stage2".into(), report);
        manifest.final_eval = Some("stage2".into());
    } else if let Some(ck) = &cfg.stage2_checkpoint {
        *stage = "restore".into();
        let (meta, params, opt_state) = load_checkpoint(ck)?;
        restore_params(&mut state.ps, &meta, &params)?;
        if !opt_state.is_empty() {
            state.optimizer.load_state_flat(&opt_state)?;
        }
        state.iter = meta.iteration;
        manifest.checkpoints.insert("restored".into(), ck.clone());
    }

    // ---- stage 3: threshold-scheduled self-training
    if cfg.stages.stage3 {
        *stage = "stage3".into();
        // A dedicated stream makes stage 3 identical whether it continues
        // in-process or resumes from the stage-2 checkpoint.
        state.rng = stream(cfg.seed, StreamId::SelfTrain);
        let mut st_cfg = SelfTrainConfig::new(
            cfg.stage2_train_config(comp.clone()),
            cfg.optim.round_iterations,
        );
        st_cfg.schedule = cfg.schedule;
        st_cfg.adversarial = cfg.selftrain.adversarial;
        st_cfg.pseudo_only = cfg.selftrain.pseudo_only;
        st_cfg.reinit_each_round = cfg.selftrain.reinit_each_round;
        st_cfg.out_dir = Some(out.join("selftrain"));

        let mut collected: Vec<(String, EvalReport, PathBuf)> = Vec::new();
        let mut round = 0usize;
        let mut hook = |st: &TrainState| -> Result<BTreeMap<String, f64>> {
            let report = evaluate(
                &model,
                &st.ps,
                &data.domains,
                &data.class_names,
                cfg.eval_iou,
                cfg.exec_mode,
            )?;
            let key = format!("round_{round}");
            let stem = out.join("checkpoints").join(&key);
            save_checkpoint(
                &stem,
                &st.ps,
                Some(&st.optimizer),
                st.iter,
                [(String::from("train"), st.rng_state())].into_iter().collect(),
                json!({ "stage": key }),
            )?;
            write_eval(out, &key, &report)?;
            let maps = report.domains.iter().map(|(k, d)| (k.clone(), d.map)).collect();
            collected.push((key, report, stem));
            round += 1;
            Ok(maps)
        };

        let mut sink = log_file(out, "selftrain.jsonl")?;
        let st_targets: Vec<&DomainDataset> = train_sets[1..].iter().collect();
        let logs = self_training_loop(
            &model,
            &discs,
            Some(&cfg.discriminator),
            &train_sets[0],
            &st_targets,
            &data.class_names,
            &st_cfg,
            &mut state,
            Some(&mut hook),
            Some(&mut sink),
        )?;
        manifest.round_logs = logs;
        for (key, report, stem) in collected {
            manifest.checkpoints.insert(key.clone(), stem);
            manifest.evals.insert(key.clone(), report);
            manifest.final_eval = Some(key);
        }
    }

    // A run with no training stage still reports where the weights stand.
    if manifest.final_eval.is_none() {
        *stage = "eval".into();
        let report = evaluate(
            &model,
            &state.ps,
            &data.domains,
            &data.class_names,
            cfg.eval_iou,
            cfg.exec_mode,
        )?;
        write_eval(out, "init", &report)?;
        manifest.evals.insert("init".into(), report);
        manifest.final_eval = Some("init".into());
    }
    Ok(())
}

/// A plain detector run with no adaptation: source-only, or an oracle run on
/// one target's real labels (upper reference; guarded by an explicit flag).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    SourceOnly,
    Oracle { target: usize, unlock_target_labels: bool },
}

pub fn train_baseline(cfg: &ExperimentConfig, kind: BaselineKind) -> Result<RunManifest> {
    cfg.validate()?;
    if let BaselineKind::Oracle { unlock_target_labels: false, .. } = kind {
        return Err(Error::Validation(
            "oracle baseline reads target train labels; pass the explicit unlock flag".into(),
        ));
    }
    let out = cfg.resolved_out_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;

    let (data, run_kind, train_domain) = match kind {
        BaselineKind::SourceOnly => {
            let data = resolve_data(cfg)?;
            let id = view(cfg, &data)?.source.spec.domain_id;
            (data, RunKind::Baseline, id)
        }
        BaselineKind::Oracle { target, .. } => {
            (resolve_data_oracle(cfg, target)?, RunKind::Oracle, target)
        }
    };
    let v = view(cfg, &data)?;
    let targets: Vec<String> = v.all_targets.iter().map(|d| d.spec.name.clone()).collect();
    let mut manifest = RunManifest::new(cfg, run_kind, targets);

    let mut run = || -> Result<()> {
        let mut ps = ParamStore::new();
        let mut init_rng = stream(cfg.seed, StreamId::ModelInit);
        let model = DetectorModel::build(&cfg.detector, &mut ps, &mut init_rng)?;
        let mut state =
            TrainState::new(ps, cfg.optim.optimizer, stream(cfg.seed, StreamId::BaselineTrain));

        // All batch slots go to the one training domain.
        let total: usize = cfg.composition_map().values().sum();
        let comp: BTreeMap<usize, usize> = [(train_domain, total)].into_iter().collect();
        let mut tcfg = cfg.stage2_train_config(comp);
        tcfg.lambda_mode = LambdaMode::Fixed { value: 0.0 };

        let train_set: Vec<DomainDataset> = data
            .domains
            .iter()
            .filter(|d| d.spec.domain_id == train_domain)
            .cloned()
            .collect();
        let mut sink = log_file(&out, "baseline.jsonl")?;
        train(&model, &[], None, &train_set, &tcfg, &mut state, None, Some(&mut sink))?;

        let stem = out.join("checkpoints").join("baseline");
        save_checkpoint(
            &stem,
            &state.ps,
            Some(&state.optimizer),
            state.iter,
            [(String::from("train"), state.rng_state())].into_iter().collect(),
            json!({ "stage": "baseline" }),
        )?;
        manifest.checkpoints.insert("baseline".into(), stem);

        let report = evaluate(
            &model,
            &state.ps,
            &data.domains,
            &data.class_names,
            cfg.eval_iou,
            cfg.exec_mode,
        )?;
        write_eval(&out, "baseline", &report)?;
        manifest.evals.insert("baseline".into(), report);
        manifest.final_eval = Some("baseline".into());
        Ok(())
    };
    match run() {
        Ok(()) => {
            manifest.save(&out)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.status =
                RunStatus::Partial { stage: "train".into(), error: e.to_string() };
            let _ = manifest.save(&out);
            Err(e)
        }
    }
}
