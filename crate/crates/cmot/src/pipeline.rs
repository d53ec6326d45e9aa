//! End-to-end commands behind the CLI: generate a benchmark, train the
//! variants, track the test split and evaluate results. Everything lives
//! under one workspace directory:
//!
//! ```text
//! <workspace>/
//!   benchmark/            train/<id>/, test/<id>/, converted/<id>/,
//!                         manifest.json, resolved-config.toml
//!   checkpoints/<name>/   stage1.ckpt .. stage3.ckpt or final.ckpt,
//!                         training_manifest.json
//!   results/<name>/       <seq>.txt, <seq>.log.jsonl, resolved-config.toml
//!   reports/<name>/       report.json, *.svg, attributes.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, Sequence};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalReport};
use crate::synthdata::{
    convert_dual, generate_dual_fixture, generate_toy_benchmark_with, Converted,
    ToySequenceConfig,
};
use crate::tracker::{self, build_network, NetConfig, TrackNet};
use crate::training::{self, StageName, StageReport};

fn fnv_str(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Per-sequence tracking seed: deterministic in the run seed and the id.
pub fn sequence_seed(run_seed: u64, id: &str) -> u64 {
    run_seed ^ fnv_str(id)
}

pub fn benchmark_dir(workspace: &Path) -> PathBuf {
    workspace.join("benchmark")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Structure(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Summary returned (and written as a manifest) by `cmd_synth`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train: usize,
    pub test: usize,
    pub converted_kept: usize,
    pub converted_discarded: usize,
    pub switch_histogram: BTreeMap<String, usize>,
}

/// Generate the toy benchmark plus converted dual-modality fixtures.
pub fn cmd_synth(cfg: &RunConfig, workspace: &Path, force: bool) -> Result<SynthSummary> {
    cfg.validate()?;
    let out = benchmark_dir(workspace);
    if out.exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to regenerate",
                out.display()
            )));
        }
        fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    create_dir(&out)?;

    let (train, test, manifest) = generate_toy_benchmark_with(
        cfg.synth.n_train,
        cfg.synth.n_test,
        cfg.seed,
        &cfg.synth.options,
    )?;
    for (subdir, seqs) in [("train", &train), ("test", &test)] {
        let dir = out.join(subdir);
        create_dir(&dir)?;
        for seq in seqs {
            data::save_sequence(seq, &dir.join(&seq.id))?;
        }
    }

    // Dual-modality fixtures run through the converter.
    let mut kept = 0usize;
    let mut discarded = 0usize;
    if cfg.synth.n_dual > 0 {
        let dir = out.join("converted");
        create_dir(&dir)?;
        for i in 0..cfg.synth.n_dual {
            let mut dual_cfg = manifest.train[i % manifest.train.len()].clone();
            dual_cfg.id = format!("dual_{i:03}");
            dual_cfg.seed = cfg.seed.wrapping_add(0xD0A1).wrapping_add(i as u64);
            let fixture = generate_dual_fixture(&dual_cfg, cfg.seed.wrapping_add(77 + i as u64))?;
            match convert_dual(&fixture, cfg.seed.wrapping_add(177 + i as u64))? {
                Converted::Kept(seq) => {
                    data::save_sequence(&seq, &dir.join(&seq.id))?;
                    kept += 1;
                }
                Converted::Discarded { id, reason } => {
                    log::info!("discarded dual fixture {id}: {reason:?}");
                    discarded += 1;
                }
            }
        }
    }

    let all: Vec<Sequence> = train.iter().chain(test.iter()).cloned().collect();
    let histogram = data::switch_histogram(&all)
        .into_iter()
        .map(|(bin, n)| (bin.label().to_string(), n))
        .collect();

    write_json(&out.join("manifest.json"), &manifest)?;
    cfg.save(&out.join("resolved-config.toml"))?;

    let summary = SynthSummary {
        train: train.len(),
        test: test.len(),
        converted_kept: kept,
        converted_discarded: discarded,
        switch_histogram: histogram,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Load every sequence below a split directory, ordered by id.
pub fn load_split(workspace: &Path, split: &str) -> Result<Vec<Sequence>> {
    let dir = benchmark_dir(workspace).join(split);
    let mut roots: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    roots.sort();
    if roots.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no sequences under {}",
            dir.display()
        )));
    }
    roots.iter().map(|r| data::load_sequence(r)).collect()
}

/// Which training schedule to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagePlanKind {
    ThreeStage,
    OneStage,
}

impl StagePlanKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "three" => Ok(StagePlanKind::ThreeStage),
            "one" => Ok(StagePlanKind::OneStage),
            other => Err(Error::Config(format!(
                "unknown stage plan {other:?}; expected `three` or `one`"
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub variant: String,
    pub seed: u64,
    pub with_marmot: bool,
    /// Resolved per-stage masks, learning rates and iteration counts.
    pub stage_configs: Vec<training::StageConfig>,
    pub stages: Vec<StageReport>,
    pub checkpoints: Vec<String>,
}

/// Train a variant on the benchmark's train split and emit checkpoints.
pub fn cmd_train(
    cfg: &RunConfig,
    workspace: &Path,
    name: &str,
    plan: StagePlanKind,
    with_marmot: bool,
) -> Result<TrainingManifest> {
    cfg.validate()?;
    let dataset = load_split(workspace, "train")?;
    let out = workspace.join("checkpoints").join(name);
    create_dir(&out)?;

    let net_cfg = NetConfig {
        with_marmot,
        ..cfg.net.clone()
    };
    let mut net = build_network(&net_cfg, cfg.seed)?;
    let mut training_cfg = cfg.training.clone();
    training_cfg.seed = cfg.seed;

    let save_net = |net: &mut TrackNet, path: &Path| -> Result<()> {
        Checkpoint::from_state(|f| net.visit_state_mut(f)).save(path)
    };

    let stage_configs = match plan {
        StagePlanKind::ThreeStage => training::stage_plan(&net, &training_cfg),
        StagePlanKind::OneStage => vec![training::one_stage_plan(&net, &training_cfg)],
    };

    let mut checkpoints = Vec::new();
    let stages = match plan {
        StagePlanKind::ThreeStage => {
            let out_dir = out.clone();
            let mut names = Vec::new();
            let reports = training::run_three_stage(
                &mut net,
                &dataset,
                &training_cfg,
                |stage, net, _| {
                    let file = match stage {
                        StageName::I => "stage1.ckpt",
                        StageName::II => "stage2.ckpt",
                        StageName::III => "stage3.ckpt",
                        StageName::OneStage => "one_stage.ckpt",
                    };
                    names.push(file.to_string());
                    save_net(net, &out_dir.join(file))
                },
            );
            let reports = match reports {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    // Divergence: the net was restored to its last finite
                    // state; keep it for inspection.
                    save_net(&mut net, &out.join("last_finite.ckpt"))?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            checkpoints = names;
            reports
        }
        StagePlanKind::OneStage => {
            let report = match training::run_one_stage(&mut net, &dataset, &training_cfg) {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    save_net(&mut net, &out.join("last_finite.ckpt"))?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            vec![report]
        }
    };

    save_net(&mut net, &out.join("final.ckpt"))?;
    checkpoints.push("final.ckpt".to_string());

    let manifest = TrainingManifest {
        variant: name.to_string(),
        seed: cfg.seed,
        with_marmot,
        stage_configs,
        stages,
        checkpoints,
    };
    write_json(&out.join("training_manifest.json"), &manifest)?;
    cfg.save(&out.join("resolved-config.toml"))?;
    Ok(manifest)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrackSummary {
    pub name: String,
    pub sequences: usize,
    pub mean_init_accuracy: f64,
}

/// Track every test sequence with a checkpoint; one results file and one
/// JSON-lines log per sequence.
pub fn cmd_track(
    cfg: &RunConfig,
    workspace: &Path,
    checkpoint: &Path,
    name: &str,
    no_marmot: bool,
    jobs: usize,
) -> Result<TrackSummary> {
    cfg.validate()?;
    let dataset = load_split(workspace, "test")?;
    let out = workspace.join("results").join(name);
    create_dir(&out)?;

    let net_cfg = NetConfig {
        with_marmot: cfg.net.with_marmot && !no_marmot,
        ..cfg.net.clone()
    };
    let mut net = build_network(&net_cfg, cfg.seed)?;
    let ck = Checkpoint::load(checkpoint)?;
    ck.apply_to_state(|f| net.visit_state_mut(f))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let tracker_cfg = cfg.tracker.clone();
    let run_seed = cfg.seed;
    let runs: Vec<Result<(String, tracker::TrackRun)>> = pool.install(|| {
        dataset
            .par_iter()
            .map(|seq| {
                let mut local = net.clone();
                let seed = sequence_seed(run_seed, &seq.id);
                let run = tracker::track_sequence(&mut local, seq, &tracker_cfg, seed)?;
                Ok((seq.id.clone(), run))
            })
            .collect()
    });

    let mut mean_acc = 0.0;
    let mut count = 0usize;
    for item in runs {
        let (id, run) = item?;
        data::write_results(&out.join(format!("{id}.txt")), &run.boxes)?;
        let mut log_text = String::new();
        for entry in &run.log {
            log_text.push_str(
                &serde_json::to_string(entry)
                    .map_err(|e| Error::Structure(format!("log entry: {e}")))?,
            );
            log_text.push('\n');
        }
        let log_path = out.join(format!("{id}.log.jsonl"));
        fs::write(&log_path, log_text).map_err(|e| Error::io(&log_path, e))?;
        mean_acc += run.init.self_test_accuracy;
        count += 1;
    }
    mean_acc /= count.max(1) as f64;

    let summary = TrackSummary {
        name: name.to_string(),
        sequences: count,
        mean_init_accuracy: mean_acc,
    };
    write_json(&out.join("summary.json"), &summary)?;
    cfg.save(&out.join("resolved-config.toml"))?;
    Ok(summary)
}

/// Load the per-sequence results a tracking run produced.
pub fn load_results(
    workspace: &Path,
    name: &str,
    dataset: &[Sequence],
) -> Result<BTreeMap<String, Vec<data::BoundingBox>>> {
    let dir = workspace.join("results").join(name);
    let mut results = BTreeMap::new();
    for seq in dataset {
        let path = dir.join(format!("{}.txt", seq.id));
        if !path.exists() {
            return Err(Error::Structure(format!(
                "missing results for sequence {} (expected {})",
                seq.id,
                path.display()
            )));
        }
        results.insert(seq.id.clone(), data::read_results(&path)?);
    }
    Ok(results)
}

/// Evaluate one or more result sets; with several, also emit a comparison
/// table sorted by SR-I.
pub fn cmd_eval(
    cfg: &RunConfig,
    workspace: &Path,
    names: &[String],
) -> Result<Vec<(String, EvalReport)>> {
    cfg.validate()?;
    if names.is_empty() {
        return Err(Error::Config("no result sets to evaluate".into()));
    }
    let dataset = load_split(workspace, "test")?;

    let mut reports = Vec::new();
    for name in names {
        let results = load_results(workspace, name, &dataset)?;
        let report = evalkit::evaluate(&results, &dataset, &cfg.eval)?;
        let out = workspace.join("reports").join(name);
        evalkit::report_named(&report, name, &out)?;
        cfg.save(&out.join("resolved-config.toml"))?;
        reports.push((name.clone(), report));
    }

    if reports.len() > 1 {
        let mut rows: Vec<&(String, EvalReport)> = reports.iter().collect();
        rows.sort_by(|a, b| b.1.scores.sr1.partial_cmp(&a.1.scores.sr1).unwrap());
        let mut table = String::from("tracker,PR,NPR,SR-I,SR-II\n");
        for (name, rep) in rows {
            table.push_str(&format!(
                "{name},{:.4},{:.4},{:.4},{:.4}\n",
                rep.scores.pr, rep.scores.npr, rep.scores.sr1, rep.scores.sr2
            ));
        }
        let path = workspace.join("reports").join("comparison.csv");
        fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    }

    Ok(reports)
}

/// Re-render plots and tables from a stored report.json.
pub fn cmd_report(report_json: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(report_json).map_err(|e| Error::io(report_json, e))?;
    let report: EvalReport = serde_json::from_str(&text)
        .map_err(|e| Error::Structure(format!("{}: {e}", report_json.display())))?;
    evalkit::report(&report, out_dir)
}

/// In-memory benchmark regeneration from a stored manifest entry; used by
/// tooling and tests that need exact replicas without the disk round trip.
pub fn regenerate_sequence(cfg: &ToySequenceConfig) -> Result<Sequence> {
    crate::synthdata::generate_toy_sequence(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.synth.n_train = 3;
        cfg.synth.n_test = 2;
        cfg.synth.n_dual = 3;
        cfg.synth.options.image_size = 48;
        cfg.synth.options.min_length = 10;
        cfg.synth.options.max_length = 16;
        cfg.training.stage1_iters = 2;
        cfg.training.stage2_iters = 4;
        cfg.training.stage3_iters = 2;
        cfg.training.batch_pos = 4;
        cfg.training.batch_neg = 8;
        cfg.tracker.n_candidates = 24;
        cfg.tracker.init_iters = 8;
        cfg.tracker.init_pos = 16;
        cfg.tracker.init_neg = 48;
        cfg.tracker.reg_samples = 16;
        cfg.tracker.update_iters = 2;
        cfg
    }

    #[test]
    fn synth_writes_benchmark_and_respects_force() {
        let ws = TempDir::new().unwrap();
        let cfg = tiny_config();
        let summary = cmd_synth(&cfg, ws.path(), false).unwrap();
        assert_eq!(summary.train, 3);
        assert_eq!(summary.test, 2);
        assert_eq!(summary.converted_kept + summary.converted_discarded, 3);

        // Existing directory without --force is refused.
        assert!(matches!(
            cmd_synth(&cfg, ws.path(), false),
            Err(Error::Config(_))
        ));
        // With force it regenerates.
        cmd_synth(&cfg, ws.path(), true).unwrap();

        let train = load_split(ws.path(), "train").unwrap();
        assert_eq!(train.len(), 3);
    }

    #[test]
    fn full_pipeline_runs_end_to_end() {
        let ws = TempDir::new().unwrap();
        let cfg = tiny_config();
        cmd_synth(&cfg, ws.path(), false).unwrap();

        let manifest =
            cmd_train(&cfg, ws.path(), "marmot", StagePlanKind::ThreeStage, true).unwrap();
        assert_eq!(manifest.stages.len(), 3);
        assert!(ws.path().join("checkpoints/marmot/stage1.ckpt").exists());
        assert!(ws.path().join("checkpoints/marmot/stage3.ckpt").exists());
        assert!(ws.path().join("checkpoints/marmot/final.ckpt").exists());

        let one = cmd_train(&cfg, ws.path(), "one", StagePlanKind::OneStage, true).unwrap();
        assert_eq!(one.stages.len(), 1);
        assert_eq!(one.checkpoints, vec!["final.ckpt".to_string()]);

        let ckpt = ws.path().join("checkpoints/marmot/final.ckpt");
        let summary = cmd_track(&cfg, ws.path(), &ckpt, "marmot", false, 2).unwrap();
        assert_eq!(summary.sequences, 2);
        let results_dir = ws.path().join("results/marmot");
        let txts: Vec<_> = fs::read_dir(&results_dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().map(|x| x == "txt").unwrap_or(false))
            .collect();
        assert_eq!(txts.len(), 2);

        // Every frame is logged.
        let test_seqs = load_split(ws.path(), "test").unwrap();
        for seq in &test_seqs {
            let log = fs::read_to_string(results_dir.join(format!("{}.log.jsonl", seq.id)))
                .unwrap();
            assert_eq!(log.lines().count(), seq.len());
        }

        let reports = cmd_eval(&cfg, ws.path(), &["marmot".to_string()]).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(ws.path().join("reports/marmot/report.json").exists());
        assert!(ws.path().join("reports/marmot/success.svg").exists());

        // A second (perfect) result set produces a comparison table sorted
        // by SR-I, so the oracle row comes first.
        let oracle_dir = ws.path().join("results/oracle");
        fs::create_dir_all(&oracle_dir).unwrap();
        for seq in &test_seqs {
            let boxes: Vec<_> = seq.frames.iter().map(|f| f.gt).collect();
            data::write_results(&oracle_dir.join(format!("{}.txt", seq.id)), &boxes).unwrap();
        }
        cmd_eval(&cfg, ws.path(), &["marmot".to_string(), "oracle".to_string()]).unwrap();
        let table = fs::read_to_string(ws.path().join("reports/comparison.csv")).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "tracker,PR,NPR,SR-I,SR-II");
        assert!(lines[1].starts_with("oracle,"), "comparison not sorted by SR-I: {table}");

        // Report regeneration from the stored JSON is byte-identical.
        let rj = ws.path().join("reports/marmot/report.json");
        let out2 = ws.path().join("reports/regen");
        cmd_report(&rj, &out2).unwrap();
        let a = fs::read(ws.path().join("reports/marmot/success.svg")).unwrap();
        let b = fs::read(out2.join("success.svg")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perfect_results_score_one_and_missing_results_are_named() {
        let ws = TempDir::new().unwrap();
        let cfg = tiny_config();
        cmd_synth(&cfg, ws.path(), false).unwrap();
        let test = load_split(ws.path(), "test").unwrap();

        // Write ground truth as results.
        let dir = ws.path().join("results/oracle");
        fs::create_dir_all(&dir).unwrap();
        for seq in &test {
            let boxes: Vec<_> = seq.frames.iter().map(|f| f.gt).collect();
            data::write_results(&dir.join(format!("{}.txt", seq.id)), &boxes).unwrap();
        }
        let reports = cmd_eval(&cfg, ws.path(), &["oracle".to_string()]).unwrap();
        let scores = reports[0].1.scores;
        assert_eq!(scores.pr, 1.0);
        assert_eq!(scores.sr1, 1.0);

        // Remove one file: the error names the sequence.
        let victim = format!("{}.txt", test[0].id);
        fs::remove_file(dir.join(&victim)).unwrap();
        match cmd_eval(&cfg, ws.path(), &["oracle".to_string()]) {
            Err(Error::Structure(msg)) => assert!(msg.contains(&test[0].id)),
            other => panic!("expected structural error, got {other:?}"),
        }
    }

    #[test]
    fn no_marmot_baseline_tracks_without_block_parameters() {
        let ws = TempDir::new().unwrap();
        let cfg = tiny_config();
        cmd_synth(&cfg, ws.path(), false).unwrap();
        cmd_train(&cfg, ws.path(), "base", StagePlanKind::ThreeStage, false).unwrap();
        let ckpt = ws.path().join("checkpoints/base/final.ckpt");
        // The checkpoint carries no block parameters at all.
        let ck = Checkpoint::load(&ckpt).unwrap();
        assert!(ck.entries.keys().all(|k| !k.starts_with("marmot")));
        let summary = cmd_track(&cfg, ws.path(), &ckpt, "base", true, 1).unwrap();
        assert_eq!(summary.sequences, 2);
    }

    #[test]
    fn checkpoint_network_shape_mismatch_is_an_error() {
        let ws = TempDir::new().unwrap();
        let cfg = tiny_config();
        cmd_synth(&cfg, ws.path(), false).unwrap();
        cmd_train(&cfg, ws.path(), "m", StagePlanKind::OneStage, true).unwrap();
        let ckpt = ws.path().join("checkpoints/m/final.ckpt");

        let mut other = cfg.clone();
        other.net.backbone.layers[2].out_channels = 24;
        match cmd_track(&other, ws.path(), &ckpt, "m", false, 1) {
            Err(Error::Shape(_)) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
