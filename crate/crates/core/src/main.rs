use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use plaquekit::config::{Config, ConfigError, Overrides, SplitMode};
use plaquekit::metrics::{aggregate_records, emit_table, Granularity};
use plaquekit::pipeline::{
    aggregate_tables, augment_stage, copy_stage, evaluate_runs, hash_file, hash_tree, ingest_cohort, normalize_stage, resolve_artifact_root,
    run_pipeline, run_stage, split_stage, stage_digest, EvalParams, Ingested, NormalizeParams, PipelineError, SplitParams, TileParams,
};
use plaquekit::stain::{StainMethod, StainProfile};
use plaquekit::synth::{make_synthetic_cohort, SynthSpec, DEFAULT_STAIN_MATRIX};
use plaquekit::tiling::{read_manifest, NormalizationTag, PatchSize};
use plaquekit::annotations::DEFAULT_LABEL;
use plaquekit::folds::FoldPlan;
use plaquekit::wsi::Scanner;

/// Patch datasets and segmentation scores for neuritic-plaque slides.
///
/// Every verb writes into `--out` when given, otherwise into a
/// content-addressed directory under the artifact root
/// (`--artifact-root`, then $PLAQUEKIT_ARTIFACT_ROOT, then ./artifacts).
#[derive(Parser)]
#[command(name = "plaquekit", version)]
struct Cli {
    #[arg(long, global = true)]
    artifact_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic two-scanner cohort.
    Synth {
        #[arg(long, default_value_t = 8)]
        n_wsis: usize,
        #[arg(long, default_value_t = 6)]
        rois_per_wsi: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        level0_size: u32,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read sidecars and annotations of a cohort directory.
    Ingest {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value = DEFAULT_LABEL)]
        label: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample one patch per ROI at the working magnification.
    Tile {
        #[arg(long)]
        cohort: PathBuf,
        /// `ingest.json` or the directory holding it.
        #[arg(long)]
        ingest: PathBuf,
        #[arg(long)]
        patch_size: u32,
        #[arg(long, default_value_t = 0)]
        negatives_per_wsi: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add the four ROI-shift variants of every object patch.
    Augment {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        ingest: PathBuf,
        /// `manifest.jsonl` or the directory holding it.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        margin: u32,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stain-normalize every patch of a manifest.
    Normalize {
        #[arg(long)]
        manifest: PathBuf,
        /// macenko, vahadane or raw.
        #[arg(long, default_value = "macenko")]
        normalization: String,
        #[arg(long)]
        reference_profile: Option<PathBuf>,
        /// SCANNER=PATCH_ID, repeatable.
        #[arg(long = "reference-patch", value_parser = parse_reference_patch)]
        reference_patches: Vec<(Scanner, String)>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build and verify a slide-level fold plan.
    Split {
        #[arg(long)]
        ingest: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// nested or scanner.
        #[arg(long, default_value = "nested")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        n_test: usize,
        #[arg(long)]
        n_cv: Option<usize>,
        #[arg(long)]
        scanner: Option<Scanner>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions (or the DAB baseline) for runs of a fold plan.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fold_plan: PathBuf,
        /// Run names; all runs when omitted.
        #[arg(long = "run")]
        runs: Vec<String>,
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value = "pooled")]
        granularity: Granularity,
        #[arg(long, default_value_t = 0.0)]
        smooth: f64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Output CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge per-run tables and append mean/std/max/min rows.
    Aggregate {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Output CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        normalization: Option<String>,
        #[arg(long)]
        reference_profile: Option<PathBuf>,
        #[arg(long)]
        patch_size: Option<u32>,
    },
}

fn parse_reference_patch(s: &str) -> Result<(Scanner, String), String> {
    let (scanner, id) = s.split_once('=').ok_or("expected SCANNER=PATCH_ID")?;
    Ok((scanner.parse()?, id.to_string()))
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        reason: e.to_string(),
    }
}

fn config_err(path: &str, reason: impl Into<String>) -> PipelineError {
    PipelineError::Config(ConfigError::Invalid {
        path: path.to_string(),
        reason: reason.into(),
    })
}

/// Accepts either a file or the directory holding `name`.
fn dir_of(path: &Path, name: &str) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.to_path_buf(), path.join(name))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    }
}

fn hash_input(stage: &'static str, path: &Path) -> Result<String, PipelineError> {
    if path.is_dir() { hash_tree(path) } else { hash_file(path) }.map_err(|e| stage_err(stage, format!("{}: {e}", path.display())))
}

/// Runs `body` into `out`, or into the content-addressed stage directory
/// when `out` is absent. Returns the directory written.
fn into_dir(
    root: &Path,
    out: Option<PathBuf>,
    stage: &'static str,
    params: serde_json::Value,
    body: impl FnOnce(&Path) -> Result<(), PipelineError>,
) -> Result<PathBuf, PipelineError> {
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir).map_err(|e| stage_err(stage, format!("{}: {e}", dir.display())))?;
            body(&dir)?;
            Ok(dir)
        }
        None => Ok(run_stage(root, stage, stage_digest(stage, &params), body)?.1),
    }
}

/// Like [`into_dir`] for verbs whose output is one CSV file.
fn into_file(
    root: &Path,
    out: Option<PathBuf>,
    stage: &'static str,
    params: serde_json::Value,
    body: impl FnOnce(&Path) -> Result<(), PipelineError>,
) -> Result<PathBuf, PipelineError> {
    match out {
        Some(path) => {
            body(&path)?;
            Ok(path)
        }
        None => {
            let dir = run_stage(root, stage, stage_digest(stage, &params), |d| body(&d.join("metrics.csv")))?.1;
            Ok(dir.join("metrics.csv"))
        }
    }
}

fn execute(cli: Cli) -> Result<PathBuf, PipelineError> {
    let root = resolve_artifact_root(cli.artifact_root.as_deref());
    match cli.cmd {
        Cmd::Synth {
            n_wsis,
            rois_per_wsi,
            seed,
            level0_size,
            levels,
            out,
        } => {
            let spec = SynthSpec {
                n_wsis,
                rois_per_wsi,
                stain_matrix: DEFAULT_STAIN_MATRIX,
                seed,
                level0_size,
                levels,
            };
            into_dir(&root, out, "synth", json!(spec), |d| {
                make_synthetic_cohort(&spec, d).map(|_| ()).map_err(|e| stage_err("synth", e))
            })
        }
        Cmd::Ingest { cohort, label, out } => {
            let params = json!({ "cohort": hash_input("ingest", &cohort)?, "label": label });
            into_dir(&root, out, "ingest", params, |d| {
                let ing = ingest_cohort(&cohort, &label)?;
                fs::write(d.join("ingest.json"), serde_json::to_string_pretty(&ing).map_err(|e| stage_err("ingest", e))? + "\n")
                    .map_err(|e| stage_err("ingest", e))
            })
        }
        Cmd::Tile {
            cohort,
            ingest,
            patch_size,
            negatives_per_wsi,
            seed,
            workers,
            out,
        } => {
            let size = PatchSize::try_from(patch_size).map_err(|e| config_err("tile.size", e.to_string()))?;
            let (_, ingest_file) = dir_of(&ingest, "ingest.json");
            let ing = Ingested::load(&ingest_file, &cohort)?;
            let p = TileParams {
                size,
                negatives_per_wsi,
                seed,
                workers,
            };
            let params = json!({ "cohort": hash_input("tile", &cohort)?, "ingest": hash_input("tile", &ingest_file)?, "params": p });
            into_dir(&root, out, "tile", params, |d| plaquekit::pipeline::tile_stage(&ing, &p, d).map(|_| ()))
        }
        Cmd::Augment {
            cohort,
            ingest,
            manifest,
            margin,
            workers,
            out,
        } => {
            let (_, ingest_file) = dir_of(&ingest, "ingest.json");
            let ing = Ingested::load(&ingest_file, &cohort)?;
            let (mdir, _) = dir_of(&manifest, "manifest.jsonl");
            let params = json!({ "cohort": hash_input("augment", &cohort)?, "ingest": hash_input("augment", &ingest_file)?, "tile": hash_input("augment", &mdir)?, "margin": margin });
            into_dir(&root, out, "augment", params, |d| augment_stage(&ing, &mdir, margin, workers, d).map(|_| ()))
        }
        Cmd::Normalize {
            manifest,
            normalization,
            reference_profile,
            reference_patches,
            workers,
            out,
        } => {
            let tag: NormalizationTag = normalization.parse().map_err(|e: String| config_err("normalize.method", e))?;
            let (mdir, _) = dir_of(&manifest, "manifest.jsonl");
            let reference_patches: BTreeMap<Scanner, String> = reference_patches.into_iter().collect();
            let (profile, profile_hash) = match &reference_profile {
                Some(p) => (
                    Some(StainProfile::load(p).map_err(|e| stage_err("normalize", e))?),
                    Some(hash_input("normalize", p)?),
                ),
                None => (None, None),
            };
            let method = match tag {
                NormalizationTag::Raw => None,
                NormalizationTag::Vahadane => Some(StainMethod::Vahadane),
                _ => Some(StainMethod::Macenko),
            };
            let params = json!({
                "input": hash_input("normalize", &mdir)?,
                "method": method,
                "reference_profile": profile_hash,
                "reference_patches": reference_patches,
            });
            into_dir(&root, out, "normalize", params, |d| match method {
                None => copy_stage(&mdir, d).map(|_| ()),
                Some(method) => {
                    let p = NormalizeParams {
                        method,
                        reference_profile: profile,
                        reference_patches,
                        workers,
                    };
                    normalize_stage(&mdir, &p, d).map(|_| ())
                }
            })
        }
        Cmd::Split {
            ingest,
            manifest,
            mode,
            seed,
            n_test,
            n_cv,
            scanner,
            out,
        } => {
            let mode = match mode.as_str() {
                "nested" => SplitMode::Nested,
                "scanner" | "scanner_cv" => SplitMode::Scanner,
                other => return Err(config_err("split.mode", format!("unknown mode {other:?} (nested|scanner)"))),
            };
            if mode == SplitMode::Scanner && scanner.is_none() {
                return Err(config_err("split.scanner", "required in scanner mode"));
            }
            let n_cv = n_cv.unwrap_or(if mode == SplitMode::Nested { 3 } else { 4 });
            let (_, ingest_file) = dir_of(&ingest, "ingest.json");
            let text = fs::read_to_string(&ingest_file).map_err(|e| stage_err("split", format!("{}: {e}", ingest_file.display())))?;
            let ing: Ingested = serde_json::from_str(&text).map_err(|e| stage_err("split", format!("{}: {e}", ingest_file.display())))?;
            let (mdir, mfile) = dir_of(&manifest, "manifest.jsonl");
            let records = read_manifest(&mfile).map_err(|e| stage_err("split", e))?;
            let p = SplitParams {
                mode,
                n_test,
                n_cv,
                scanner,
                seed,
            };
            let params = json!({ "ingest": hash_input("split", &ingest_file)?, "manifest": hash_input("split", &mdir)?, "params": p });
            into_dir(&root, out, "split", params, |d| split_stage(&ing.records(), &records, &p, d).map(|_| ()))
        }
        Cmd::Evaluate {
            manifest,
            fold_plan,
            runs,
            pred_dir,
            threshold,
            granularity,
            smooth,
            workers,
            out,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(config_err("evaluate.threshold", "must lie in [0, 1]"));
            }
            let (mdir, _) = dir_of(&manifest, "manifest.jsonl");
            let (_, plan_file) = dir_of(&fold_plan, "fold_plan.json");
            let text = fs::read_to_string(&plan_file).map_err(|e| stage_err("evaluate", format!("{}: {e}", plan_file.display())))?;
            let plan: FoldPlan = serde_json::from_str(&text).map_err(|e| stage_err("evaluate", format!("{}: {e}", plan_file.display())))?;
            let runs = if runs.is_empty() { plan.runs.iter().map(|r| r.name.clone()).collect() } else { runs };
            let p = EvalParams {
                pred_dir: pred_dir.clone(),
                threshold,
                granularity,
                smooth,
                workers,
            };
            let params = json!({
                "manifest": hash_input("evaluate", &mdir)?,
                "plan": hash_input("evaluate", &plan_file)?,
                "runs": runs,
                "predictions": match &pred_dir { Some(d) => hash_input("evaluate", d)?, None => "baseline".into() },
                "threshold": threshold,
                "granularity": granularity,
                "smooth": smooth,
            });
            into_file(&root, out, "evaluate", params, |path| {
                let records = evaluate_runs(&mdir, &plan, &runs, &p)?;
                let stats = aggregate_records(&records).map_err(|e| stage_err("evaluate", e))?;
                emit_table(&records, &stats, path).map_err(|e| stage_err("evaluate", e))
            })
        }
        Cmd::Aggregate { inputs, out } => {
            let hashes = inputs.iter().map(|p| hash_input("aggregate", p)).collect::<Result<Vec<_>, _>>()?;
            into_file(&root, out, "aggregate", json!({ "inputs": hashes }), |path| aggregate_tables(&inputs, path).map(|_| ()))
        }
        Cmd::Run {
            config,
            seed,
            workers,
            normalization,
            reference_profile,
            patch_size,
        } => {
            let overrides = Overrides {
                seed,
                workers,
                normalization,
                reference_profile,
                patch_size,
                artifact_root: cli.artifact_root,
            };
            let cfg = Config::load(&config, &overrides)?;
            let summary = run_pipeline(&cfg)?;
            log::info!("{} of {} stages executed", summary.executed(), summary.log.stages.len());
            Ok(summary.metrics)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
