//! One-factor ablation suites built on the pipeline runner.
//!
//! Every suite takes a base config, derives one run per row into
//! `<out>/<suite>/<row>/`, and drops `report.{txt,json}` next to the rows.

use crate::adv::{DiscMode, DiscriminatorConfig};
use crate::data::DomainRole;
use crate::det::Level;
use crate::error::{Error, Result};
use crate::selftrain::ThresholdSchedule;

use super::config::{BenchSource, ExperimentConfig};
use super::pipeline::{resolve_data, run_pipeline, RunManifest};
use super::report::{build_report, write_report, ReportDoc};

pub const SUITES: [&str; 4] = ["placement", "threshold", "discriminator", "targets"];

pub fn run_ablation_suite(
    base: &ExperimentConfig,
    suite: &str,
) -> Result<(Vec<RunManifest>, ReportDoc)> {
    base.validate()?;
    let manifests = match suite {
        "placement" => placement_rows(base)?,
        "threshold" => threshold_rows(base)?,
        "discriminator" => discriminator_rows(base)?,
        "targets" => target_rows(base)?,
        other => {
            return Err(Error::Validation(format!(
                "unknown ablation suite '{other}'; valid suites: {}",
                SUITES.join(", ")
            )))
        }
    };
    let doc = build_report(&manifests);
    write_report(&base.resolved_out_dir().join(suite), &doc)?;
    Ok((manifests, doc))
}

/// Copy of the base config scoped to one row. Stage 3 defaults to off here;
/// rows that study self-training switch it back on.
fn child(base: &ExperimentConfig, suite: &str, row: &str) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.name = row.to_string();
    cfg.out_dir = base.out_dir.join(suite).join(row);
    cfg.stages.stage3 = false;
    cfg
}

/// Where the discriminator attaches: each backbone stage and FPN level
/// alone, then the cumulative stacks.
fn placement_rows(base: &ExperimentConfig) -> Result<Vec<RunManifest>> {
    use Level::*;
    let placements: [&[Level]; 10] = [
        &[C3],
        &[C4],
        &[C5],
        &[P3],
        &[P4],
        &[P5],
        &[C3, C4],
        &[C3, C4, C5],
        &[P3, P4],
        &[P3, P4, P5],
    ];
    let mut out = Vec::new();
    for levels in placements {
        let slug: Vec<String> = levels.iter().map(|l| l.name().to_lowercase()).collect();
        let mut cfg = child(base, "placement", &slug.join("-"));
        cfg.discriminator.attachment_levels = levels.to_vec();
        out.push(run_pipeline(&cfg)?);
    }
    Ok(out)
}

/// Self-training threshold schedules, all continuing from one shared
/// stage-2 checkpoint so the rows differ only in the schedule.
fn threshold_rows(base: &ExperimentConfig) -> Result<Vec<RunManifest>> {
    let mut shared = child(base, "threshold", "shared-stage2");
    shared.stages.stage2 = true;
    let shared_m = run_pipeline(&shared)?;
    let ck = shared_m
        .checkpoints
        .get("stage2")
        .cloned()
        .ok_or_else(|| Error::Runtime("shared stage-2 run produced no checkpoint".into()))?;

    let schedules: [(&str, ThresholdSchedule); 4] = [
        ("fixed-0.90", ThresholdSchedule::fixed(0.90)),
        ("from-0.85", ThresholdSchedule { start: 0.85, step: 0.05, end: 0.90 }),
        ("from-0.80", ThresholdSchedule { start: 0.80, step: 0.05, end: 0.90 }),
        ("from-0.75", ThresholdSchedule { start: 0.75, step: 0.05, end: 0.90 }),
    ];
    let mut out = vec![shared_m];
    for (name, schedule) in schedules {
        let mut cfg = child(base, "threshold", name);
        cfg.stages.stage2 = false;
        cfg.stages.stage3 = true;
        cfg.stage2_checkpoint = Some(ck.clone());
        cfg.schedule = schedule;
        out.push(run_pipeline(&cfg)?);
    }
    Ok(out)
}

fn discriminator_rows(base: &ExperimentConfig) -> Result<Vec<RunManifest>> {
    if base.train_targets.is_some() {
        return Err(Error::Validation(
            "the discriminator suite compares multiclass vs binary over all targets; \
             unset train_targets"
                .into(),
        ));
    }
    let n_targets = match &base.bench {
        BenchSource::Generate { config, .. } => config.targets.len(),
        BenchSource::Load { .. } => {
            let data = resolve_data(base)?;
            data.domains.iter().filter(|d| d.spec.role == DomainRole::Target).count()
        }
    };
    let rows: [(&str, DiscMode, usize); 2] = [
        ("multiclass", DiscMode::Multiclass, 1 + n_targets),
        ("binary", DiscMode::Binary, 2),
    ];
    let mut out = Vec::new();
    for (name, mode, classes) in rows {
        let mut cfg = child(base, "discriminator", name);
        cfg.discriminator.mode = mode;
        cfg.discriminator.num_domain_classes = classes;
        out.push(run_pipeline(&cfg)?);
    }
    Ok(out)
}

/// Adapting to each target alone vs both jointly. Single-target rows use
/// the binary discriminator (equivalent to multiclass over two domains, and
/// indifferent to the target's numeric id) and inherit the base batch shape
/// with all target slots given to the one target.
fn target_rows(base: &ExperimentConfig) -> Result<Vec<RunManifest>> {
    let (source_id, targets) = {
        let data = resolve_data(base)?;
        let source_id = data
            .domains
            .iter()
            .find(|d| d.spec.role == DomainRole::Source)
            .map(|d| d.spec.domain_id)
            .expect("validated domain set has a source");
        let targets: Vec<(usize, String)> = data
            .domains
            .iter()
            .filter(|d| d.spec.role == DomainRole::Target)
            .map(|d| (d.spec.domain_id, d.spec.name.clone()))
            .collect();
        (source_id, targets)
    };

    let comp = base.composition_map();
    let src_slots: usize = comp.iter().filter(|(k, _)| **k == source_id).map(|(_, n)| *n).sum();
    let tgt_slots: usize = comp.iter().filter(|(k, _)| **k != source_id).map(|(_, n)| *n).sum();
    if src_slots == 0 || tgt_slots == 0 {
        return Err(Error::Config(
            "target suite needs batch slots for the source and at least one target".into(),
        ));
    }

    let mut out = Vec::new();
    for (id, name) in &targets {
        let mut cfg = child(base, "targets", &format!("only-{name}"));
        cfg.train_targets = Some(vec![*id]);
        cfg.discriminator = DiscriminatorConfig {
            mode: DiscMode::Binary,
            attachment_levels: base.discriminator.attachment_levels.clone(),
            num_domain_classes: 2,
            hidden_channels: base.discriminator.hidden_channels,
        };
        cfg.batch_composition = vec![[source_id, src_slots], [*id, tgt_slots]];
        out.push(run_pipeline(&cfg)?);
    }
    let mut cfg = child(base, "targets", "all-targets");
    cfg.train_targets = None;
    out.push(run_pipeline(&cfg)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toybench::{TargetStack, ToyBenchConfig, Transform};
    use crate::det::DetectorConfig;
    use crate::exp::pipeline::{RunKind, RunStatus};
    use crate::par::ExecMode;
    use std::path::Path;
    use tempfile::TempDir;

    fn smoke_config(dir: &Path) -> ExperimentConfig {
        let bench = ToyBenchConfig {
            num_classes: 2,
            image_size: 32,
            train_per_domain: 5,
            test_per_domain: 3,
            margin: 2,
            min_shape: 8,
            max_shape: 14,
            max_shapes_per_image: 1,
            targets: vec![
                TargetStack {
                    name: "t-hue".into(),
                    transforms: vec![Transform::HueRotate { degrees: 120.0 }],
                },
                TargetStack {
                    name: "t-dim".into(),
                    transforms: vec![Transform::Brightness { delta: -0.1 }],
                },
            ],
        };
        let mut cfg = ExperimentConfig::default();
        cfg.name = "ablate".into();
        cfg.out_dir = dir.join("ablate");
        cfg.seed = 3;
        cfg.bench = BenchSource::Generate { seed: 5, config: bench };
        cfg.detector = DetectorConfig::tiny(2);
        cfg.discriminator = crate::adv::DiscriminatorConfig::multiclass_at_c3(2);
        cfg.optim.iterations = 2;
        cfg.optim.decay_at = None;
        cfg.optim.round_iterations = 1;
        cfg.batch_composition = vec![[0, 2], [1, 1], [2, 1]];
        cfg.exec_mode = ExecMode::Serial;
        cfg.log_every = 1;
        cfg
    }

    #[test]
    fn unknown_suite_is_rejected_with_the_valid_names() {
        let dir = TempDir::new().unwrap();
        let cfg = smoke_config(dir.path());
        let err = run_ablation_suite(&cfg, "bogus").unwrap_err();
        let msg = err.to_string();
        for s in SUITES {
            assert!(msg.contains(s), "error should list suite {s}: {msg}");
        }
    }

    #[test]
    fn placement_suite_covers_all_ten_rows() {
        let dir = TempDir::new().unwrap();
        let cfg = smoke_config(dir.path());
        let (manifests, doc) = run_ablation_suite(&cfg, "placement").unwrap();
        assert_eq!(manifests.len(), 10);
        assert!(manifests.iter().all(|m| m.status == RunStatus::Complete));
        assert!(manifests.iter().all(|m| m.kind == RunKind::Mda));
        let names: Vec<&str> = doc.rows.iter().map(|r| r.name.as_str()).collect();
        for expect in
            ["c3", "c4", "c5", "p3", "p4", "p5", "c3-c4", "c3-c4-c5", "p3-p4", "p3-p4-p5"]
        {
            assert!(names.contains(&expect), "missing placement row {expect}");
        }
        let out = cfg.resolved_out_dir().join("placement");
        assert!(out.join("report.txt").is_file());
        assert!(out.join("report.json").is_file());
        assert!(out.join("c3-c4-c5").join("manifest.json").is_file());
    }

    #[test]
    fn threshold_suite_shares_one_stage2_and_varies_round_count() {
        let dir = TempDir::new().unwrap();
        let cfg = smoke_config(dir.path());
        let (manifests, _) = run_ablation_suite(&cfg, "threshold").unwrap();
        assert_eq!(manifests.len(), 5);
        assert_eq!(manifests[0].name, "shared-stage2");

        let rounds: Vec<(String, usize)> = manifests[1..]
            .iter()
            .map(|m| (m.name.clone(), m.round_logs.len()))
            .collect();
        assert_eq!(
            rounds,
            vec![
                ("fixed-0.90".to_string(), 1),
                ("from-0.85".to_string(), 2),
                ("from-0.80".to_string(), 3),
                ("from-0.75".to_string(), 4),
            ]
        );
        // all self-training rows start from the shared weights
        for m in &manifests[1..] {
            assert_eq!(m.round_logs[0].params_hash, manifests[1].round_logs[0].params_hash);
            assert_eq!(m.kind, RunKind::MdaSt);
        }
        // and the first-round threshold matches the schedule
        assert_eq!(manifests[1].round_logs[0].threshold, 0.90);
        assert_eq!(manifests[4].round_logs[0].threshold, 0.75);
    }

    #[test]
    fn discriminator_and_target_suites_produce_expected_rows() {
        let dir = TempDir::new().unwrap();
        let cfg = smoke_config(dir.path());

        let (discs, _) = run_ablation_suite(&cfg, "discriminator").unwrap();
        assert_eq!(discs.len(), 2);
        assert_eq!(discs[0].config.discriminator.num_domain_classes, 3);
        assert_eq!(discs[1].config.discriminator.num_domain_classes, 2);

        let (tgts, doc) = run_ablation_suite(&cfg, "targets").unwrap();
        assert_eq!(tgts.len(), 3);
        let only_hue = tgts.iter().find(|m| m.name == "only-t-hue").unwrap();
        assert_eq!(only_hue.config.train_targets, Some(vec![1]));
        assert_eq!(only_hue.config.batch_composition, vec![[0, 2], [1, 2]]);
        // evaluation still covers every domain even when training is narrow
        assert_eq!(only_hue.target_domains.len(), 2);
        let only_dim = tgts.iter().find(|m| m.name == "only-t-dim").unwrap();
        assert_eq!(only_dim.config.train_targets, Some(vec![2]));
        assert!(doc.rows.iter().any(|r| r.name == "all-targets"));
    }
}
