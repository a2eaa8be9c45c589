use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use centroid_recal::data::Split;
use centroid_recal::trainer::FitOutcome;
use centroid_recal::{
    count_params, evaluate, fit, gen_synthetic, load_checkpoint, Dataset, DatasetSpec, Merge,
    Splits,
};

use crate::config::RunConfig;
use crate::report::{
    write_json, AblationRow, AblationRun, AblationTable, Manifest, ManifestEntry, MeanSd,
    MetricSummary, RunReport, SplitMetrics, Timings, TrainSummary, ARTIFACT_VERSION,
    REPORT_FORMAT_VERSION,
};

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_TABLE_FILE: &str = "ablation.md";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn csv_name(split: Split) -> String {
    format!("{}.csv", split.name())
}

/// Write the four splits described by `spec_path` plus a manifest.
pub fn gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let spec = DatasetSpec::load(spec_path)
        .with_context(|| format!("invalid spec {}", spec_path.display()))?;
    let splits = gen_synthetic(&spec)?;
    create_dir(out)?;
    let mut files = BTreeMap::new();
    for split in Split::ALL {
        let name = csv_name(split);
        let ds = splits.get(split);
        ds.save_csv(&out.join(&name))?;
        files.insert(
            split.name().to_string(),
            ManifestEntry {
                path: name,
                rows: ds.len(),
                class_counts: ds.histogram(spec.classes),
            },
        );
    }
    let manifest = Manifest {
        format_version: REPORT_FORMAT_VERSION,
        artifact_version: ARTIFACT_VERSION.into(),
        seed: spec.seed,
        spec,
        files,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)
}

/// One training run on already loaded data. `checkpoints` is where the
/// trainer writes its checkpoints, if anywhere.
pub fn run(
    cfg: &RunConfig,
    splits: &Splits,
    checkpoints: Option<&Path>,
) -> Result<(RunReport, FitOutcome)> {
    let model_cfg = cfg.model_config();
    let outcome = fit(
        &model_cfg,
        &splits.train,
        &splits.val,
        &cfg.train_config(),
        checkpoints,
    )?;
    let best = &outcome.best;
    let metrics = SplitMetrics {
        val: outcome.record.selected().val.clone(),
        test_i: best.evaluate(&splits.test_i).context("evaluating testI")?,
        test_ii: best
            .evaluate(&splits.test_ii)
            .context("evaluating testII")?,
    };
    let mut echo = cfg.clone();
    echo.output_dir = None;
    let report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        artifact_version: ARTIFACT_VERSION.into(),
        seed: cfg.seed,
        config: echo,
        drop_test_i_to_test_ii: metrics.drop(),
        metrics,
        train: TrainSummary::new(&outcome.record, count_params(&model_cfg)),
    };
    Ok((report, outcome))
}

/// Output directory from `--out`, else from the config.
fn out_dir(out: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    match (out, &cfg.output_dir) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(p)) => Ok(p.clone()),
        (None, None) => bail!("no output directory: pass --out or set output_dir in the config"),
    }
}

pub fn train(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunReport> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = out_dir(out, &cfg)?;
    let mut timings = Timings::default();
    let t = Instant::now();
    let splits = cfg.load_data()?;
    timings
        .phases
        .insert("load_data".into(), t.elapsed().as_secs_f64());
    create_dir(&out)?;
    let t = Instant::now();
    let (report, _) = run(&cfg, &splits, Some(&out.join(CHECKPOINT_DIR)))?;
    timings
        .phases
        .insert("train_and_evaluate".into(), t.elapsed().as_secs_f64());
    write_json(&out.join(REPORT_FILE), &report)?;
    write_json(&out.join(TIMINGS_FILE), &timings)?;
    Ok(report)
}

/// Score a CSV with a checkpoint. The checkpoint's width is checked
/// against the data before anything runs.
pub fn eval(checkpoint: &Path, data: &Path, report: &Path) -> Result<()> {
    let state = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let ds = Dataset::load_csv(data).with_context(|| format!("loading data {}", data.display()))?;
    let cfg = &state.model.config;
    if ds.d_in() != cfg.d_in {
        bail!(
            "{} has {} features but the checkpoint expects d_in = {}",
            data.display(),
            ds.d_in(),
            cfg.d_in
        );
    }
    let metrics = evaluate(&state.model, &state.centroids, &ds)?;
    write_json(report, &metrics)
}

pub fn centroids(checkpoint: &Path) -> Result<String> {
    let state = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(state.centroids.to_text())
}

/// Train every variant on seeds `base..base+k` and summarize.
pub fn ablate(
    config: &Path,
    variants: &[Merge],
    seeds: usize,
    out: Option<&Path>,
) -> Result<AblationTable> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    if variants.is_empty() {
        bail!("--variants must name at least one variant");
    }
    let cfg = RunConfig::load(config)?;
    cfg.validate()?;
    let out = out_dir(out, &cfg)?;
    let splits = cfg.load_data()?;
    let base = cfg.seed;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| base.wrapping_add(i)).collect();
    let jobs: Vec<(Merge, u64)> = variants
        .iter()
        .flat_map(|&v| seed_list.iter().map(move |&s| (v, s)))
        .collect();

    let t = Instant::now();
    let results: Vec<Result<RunReport>> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let mut c = cfg.clone();
            c.model.merge = variant;
            c.seed = seed;
            run(&c, &splits, None)
                .map(|(r, _)| r)
                .with_context(|| format!("variant {variant}, seed {seed}"))
        })
        .collect();
    let reports = results.into_iter().collect::<Result<Vec<_>>>()?;
    let elapsed = t.elapsed().as_secs_f64();

    create_dir(&out)?;
    let runs_dir = out.join("runs");
    create_dir(&runs_dir)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &variant in variants {
        let of_variant: Vec<&RunReport> = jobs
            .iter()
            .zip(&reports)
            .filter(|((v, _), _)| *v == variant)
            .map(|(_, r)| r)
            .collect();
        for r in &of_variant {
            write_json(&runs_dir.join(format!("{variant}_seed{}.json", r.seed)), r)?;
            runs.push(AblationRun {
                variant: variant.to_string(),
                seed: r.seed,
                selected_epoch: r.train.selected_epoch,
                test_i_accuracy: r.metrics.test_i.accuracy,
                test_ii_accuracy: r.metrics.test_ii.accuracy,
                drop_test_i_to_test_ii: r.drop_test_i_to_test_ii,
            });
        }
        let ti: Vec<_> = of_variant.iter().map(|r| &r.metrics.test_i).collect();
        let tii: Vec<_> = of_variant.iter().map(|r| &r.metrics.test_ii).collect();
        let drops: Vec<f64> = of_variant
            .iter()
            .map(|r| r.drop_test_i_to_test_ii)
            .collect();
        rows.push(AblationRow {
            variant: variant.to_string(),
            params: of_variant[0].train.params,
            runs: of_variant.len(),
            test_i: MetricSummary::of(&ti),
            test_ii: MetricSummary::of(&tii),
            drop_test_i_to_test_ii: MeanSd::of(&drops),
        });
    }
    // First listed variant wins ties.
    let smallest = rows
        .iter()
        .fold(None::<&AblationRow>, |best, r| match best {
            Some(b) if b.drop_test_i_to_test_ii.mean <= r.drop_test_i_to_test_ii.mean => Some(b),
            _ => Some(r),
        })
        .map(|r| r.variant.clone())
        .expect("at least one variant");
    let mut echo = cfg.clone();
    echo.output_dir = None;
    let table = AblationTable {
        format_version: REPORT_FORMAT_VERSION,
        artifact_version: ARTIFACT_VERSION.into(),
        seeds: seed_list,
        config: echo,
        rows,
        smallest_mean_drop: smallest,
        runs,
    };
    write_json(&out.join(ABLATION_FILE), &table)?;
    fs::write(out.join(ABLATION_TABLE_FILE), table.to_markdown())
        .with_context(|| format!("writing {}", out.join(ABLATION_TABLE_FILE).display()))?;
    let mut timings = Timings::default();
    timings.phases.insert("all_runs".into(), elapsed);
    write_json(&out.join(TIMINGS_FILE), &timings)?;
    Ok(table)
}
