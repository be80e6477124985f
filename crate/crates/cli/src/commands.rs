use std::fs;
use std::path::{Path, PathBuf};

use aum::bench::{measure_all, BenchOptions};
use aum::encoder::{load_checkpoint, save_checkpoint, BlockVariant, ClsPosition, Model};
use aum::features::{extract_many, read_manifest, write_cache, write_manifest, write_waveform, Manifest, ManifestEntry};
use aum::training::{
    evaluate, new_model, toy_dataset, toy_waveforms, train as train_model, write_log, Dataset, TrainConfig,
    DATASET_INDEX,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::rundir::RunDir;
use crate::{worker_cap, AblateArgs, BenchArgs, EvalArgs, FeaturesArgs, ToyArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn load_config(path: &Path) -> Result<TrainConfig> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("config file {} not found", path.display())));
    }
    let cfg = TrainConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// `dir` itself if it holds the dataset index, else its `artifacts/`.
fn data_dir(dir: &Path) -> Result<PathBuf> {
    for d in [dir.to_path_buf(), dir.join("artifacts")] {
        if d.join(DATASET_INDEX).is_file() {
            return Ok(d);
        }
    }
    Err(CliError::Usage(format!("no {DATASET_INDEX} under {}", dir.display())))
}

pub fn features(a: FeaturesArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let fc = cfg.feature_config();
    let manifest = read_manifest(&a.manifest)?;
    let echo = format!("# manifest = {}\n{}", a.manifest.display(), cfg.to_toml_string());
    let mut run = RunDir::open(&a.out, "features", &echo, cfg.seed)?;
    run.init_logging()?;
    let cache_dir = run.artifact("features");
    fs::create_dir_all(&cache_dir)?;

    let cache_of = |i: usize| cache_dir.join(format!("{i:06}.aumf"));
    let pending: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| !(run.is_done(&format!("{i:06}")) && cache_of(i).is_file()))
        .collect();
    let workers = worker_cap()?;
    log::info!(
        "{} files, {} cached, {} to extract on {workers} worker(s)",
        manifest.entries.len(),
        manifest.entries.len() - pending.len(),
        pending.len()
    );
    let mut failures = Vec::new();
    for batch in pending.chunks(workers * 8) {
        let paths: Vec<PathBuf> = batch.iter().map(|&i| manifest.entries[i].path.clone()).collect();
        for (&i, r) in batch.iter().zip(extract_many(&paths, &fc, workers)) {
            match r.and_then(|s| write_cache(&cache_of(i), &s)) {
                Ok(()) => run.mark_done(&format!("{i:06}"))?,
                Err(e) => {
                    log::error!("{}: {e}", manifest.entries[i].path.display());
                    failures.push(i);
                }
            }
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Failed(format!(
            "{} of {} files failed; rerun to resume",
            failures.len(),
            manifest.entries.len()
        )));
    }

    let index = Manifest {
        entries: manifest
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ManifestEntry {
                path: cache_of(i),
                labels: e.labels.clone(),
            })
            .collect(),
        multi_label: manifest.multi_label,
    };
    let index_path = run.artifact(DATASET_INDEX);
    write_manifest(&index_path, &index)?;
    run.add_artifact(&index_path)?;
    run.add_artifact(&cache_dir)?;
    run.finish()?;
    println!("{} spectrograms cached under {}", index.entries.len(), cache_dir.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dir = data_dir(&a.data)?;
    let echo = format!("# data = {}\n{}", dir.display(), cfg.to_toml_string());
    let run_dir = a.run_dir.clone().unwrap_or_else(|| a.out.with_extension("run"));
    let mut run = RunDir::open(&run_dir, "train", &echo, cfg.seed)?;
    run.init_logging()?;
    if run.manifest().complete && a.out.is_file() {
        println!("already complete: {}", a.out.display());
        return Ok(());
    }
    let data = Dataset::load(&dir, Some((cfg.dataset_mean, cfg.dataset_std)))?;
    let mut model = new_model::<f32>(&cfg, &data)?;
    log::info!(
        "{} clips, {} classes, {} parameters, seed {}",
        data.len(),
        model.config.num_classes,
        model.weights.num_params(),
        cfg.seed
    );
    let log = train_model(&mut model, &data, &cfg)?;
    let log_path = run.log_path("train.csv");
    write_log(&log_path, &log)?;
    save_checkpoint(&a.out, &model)?;
    run.add_artifact(&log_path)?;
    run.add_artifact(&a.out)?;
    run.finish()?;
    if let Some(last) = log.last() {
        println!(
            "epoch {} loss {:.6} {} {:.6}",
            last.epoch,
            last.loss,
            cfg.task(),
            last.metric
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    task: String,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let dir = data_dir(&a.data)?;
    let echo = toml::to_string(&EvalEcho {
        ckpt: &a.ckpt,
        data: &dir,
        task: a.task.to_string(),
    })
    .expect("plain echo serializes");
    let run_dir = a.run_dir.clone().unwrap_or_else(|| a.ckpt.with_extension("eval"));
    let mut run = RunDir::open(&run_dir, "eval", &echo, 0)?;
    run.init_logging()?;
    let model: Model<f32> = load_checkpoint(&a.ckpt)?;
    let data = Dataset::load(&dir, None)?;
    data.check_geometry(model.config.n_mels, model.config.frames)?;
    let report = evaluate(&model, &data, a.task)?;
    let out = run.artifact("eval.json");
    fs::write(
        &out,
        serde_json::json!({
            "task": report.task.to_string(),
            "value": report.value,
            "excluded_classes": report.excluded_classes,
            "clips": data.len(),
        })
        .to_string(),
    )?;
    run.add_artifact(&out)?;
    run.finish()?;
    println!("{} {:.6}", report.task, report.value);
    if report.excluded_classes > 0 {
        println!("excluded classes without positives: {}", report.excluded_classes);
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchEcho {
    tokens: Vec<usize>,
    models: Vec<String>,
    reps: usize,
    warmups: usize,
    depth: usize,
    budget_mb: Option<usize>,
    seed: u64,
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let echo = toml::to_string(&BenchEcho {
        tokens: a.tokens.clone(),
        models: a.models.iter().map(|m| m.to_string()).collect(),
        reps: a.reps,
        warmups: a.warmups,
        depth: a.depth,
        budget_mb: a.budget_mb,
        seed: a.seed,
    })
    .expect("plain echo serializes");
    let run_dir = a.run_dir.clone().unwrap_or_else(|| a.out.with_extension("run"));
    let mut run = RunDir::open(&run_dir, "bench", &echo, a.seed)?;
    run.init_logging()?;
    let opts = BenchOptions {
        reps: a.reps,
        warmups: a.warmups,
        depth: a.depth,
        budget_bytes: a.budget_mb.map(|mb| mb << 20),
        seed: a.seed,
    };
    let report = measure_all(&a.models, &a.tokens, &opts)?;
    report.save_csv(&a.out)?;
    let summary = report.summary();
    let summary_path = run.artifact("summary.txt");
    fs::write(&summary_path, &summary)?;
    run.add_artifact(&a.out)?;
    run.add_artifact(&summary_path)?;
    run.finish()?;
    print!("{summary}");
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CellResult {
    variant: String,
    cls_position: String,
    metric: f64,
    loss: f64,
    epochs: usize,
}

fn cell_key(v: BlockVariant, p: ClsPosition) -> String {
    format!("{v}-{p}")
}

fn run_cell(cfg: &TrainConfig, data: &Dataset, v: BlockVariant, p: ClsPosition, run: &RunDir) -> Result<CellResult> {
    let cfg = TrainConfig {
        variant: v,
        cls_position: p,
        ..cfg.clone()
    };
    let mut model = new_model::<f32>(&cfg, data)?;
    let log = train_model(&mut model, data, &cfg)?;
    let key = cell_key(v, p);
    write_log(&run.log_path(&format!("{key}.csv")), &log)?;
    let last = log.last().ok_or_else(|| CliError::Usage("epochs must be positive".into()))?;
    Ok(CellResult {
        variant: v.to_string(),
        cls_position: p.to_string(),
        metric: last.metric,
        loss: last.loss,
        epochs: log.len(),
    })
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if (cfg.n_mels, cfg.frames) != (32, 32) {
        return Err(CliError::Usage(format!(
            "the synthetic set is 32 x 32; config asks for {} x {}",
            cfg.n_mels, cfg.frames
        )));
    }
    let echo = format!(
        "# samples = {}\n# data_seed = {}\n{}",
        a.samples,
        a.data_seed,
        cfg.to_toml_string()
    );
    let mut run = RunDir::open(&a.out, "ablate", &echo, cfg.seed)?;
    run.init_logging()?;
    let cells_dir = run.artifact("cells");
    fs::create_dir_all(&cells_dir)?;
    let cell_path = |key: &str| cells_dir.join(format!("{key}.json"));

    let grid: Vec<(BlockVariant, ClsPosition)> = BlockVariant::ALL
        .into_iter()
        .flat_map(|v| ClsPosition::ALL.into_iter().map(move |p| (v, p)))
        .collect();
    let pending: Vec<(BlockVariant, ClsPosition)> = grid
        .iter()
        .copied()
        .filter(|&(v, p)| {
            let key = cell_key(v, p);
            !(run.is_done(&key) && cell_path(&key).is_file())
        })
        .collect();
    log::info!("{} of {} cells to train", pending.len(), grid.len());

    if !pending.is_empty() {
        let (data, _) = toy_dataset(a.samples, a.data_seed)?;
        let workers = worker_cap()?.min(pending.len());
        let results: Vec<(String, Result<CellResult>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let mine: Vec<_> = pending.iter().copied().skip(w).step_by(workers).collect();
                    let (cfg, data, run) = (&cfg, &data, &run);
                    scope.spawn(move || {
                        mine.into_iter()
                            .map(|(v, p)| (cell_key(v, p), run_cell(cfg, data, v, p, run)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        });
        let mut failed = Vec::new();
        for (key, r) in results {
            match r {
                Ok(cell) => {
                    log::info!("{key}: {} {:.4}", cfg.task(), cell.metric);
                    fs::write(cell_path(&key), serde_json::to_string_pretty(&cell).expect("cell serializes"))?;
                    run.mark_done(&key)?;
                }
                Err(e) => {
                    log::error!("{key}: {e}");
                    failed.push(key);
                }
            }
        }
        if !failed.is_empty() {
            return Err(CliError::Failed(format!(
                "cells failed: {}; rerun to resume",
                failed.join(", ")
            )));
        }
    }

    let mut table = format!("variant,{}\n", ClsPosition::ALL.map(|p| p.to_string()).join(","));
    let mut pretty = format!("{:<8}{}\n", "", ClsPosition::ALL.map(|p| format!("{p:>9}")).join(""));
    for v in BlockVariant::ALL {
        let mut row = Vec::new();
        for p in ClsPosition::ALL {
            let path = cell_path(&cell_key(v, p));
            let cell: CellResult = serde_json::from_str(&fs::read_to_string(&path)?)
                .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
            row.push(cell.metric);
        }
        table.push_str(&format!(
            "{v},{}\n",
            row.iter().map(|m| format!("{m:.6}")).collect::<Vec<_>>().join(",")
        ));
        pretty.push_str(&format!(
            "{:<8}{}\n",
            v.to_string(),
            row.iter().map(|m| format!("{m:>9.4}")).collect::<String>()
        ));
    }
    let grid_path = run.artifact("grid.csv");
    fs::write(&grid_path, &table)?;
    run.add_artifact(&grid_path)?;
    run.add_artifact(&cells_dir)?;
    run.finish()?;
    print!("{pretty}");
    Ok(())
}

pub fn make_toy(a: ToyArgs) -> Result<()> {
    if a.samples < 2 {
        return Err(CliError::Usage("need at least 2 samples".into()));
    }
    let (_, fc) = toy_dataset(a.samples, a.seed)?;
    let cfg = TrainConfig {
        dataset_mean: fc.dataset_mean,
        dataset_std: fc.dataset_std,
        ..TrainConfig::default()
    };
    let echo = format!("samples = {}\nseed = {}\n", a.samples, a.seed);
    let mut run = RunDir::open(&a.out, "make-toy", &echo, a.seed)?;
    run.init_logging()?;
    let wav_dir = run.artifact("wav");
    fs::create_dir_all(&wav_dir)?;
    let mut entries = Vec::with_capacity(a.samples);
    for (i, (w, class)) in toy_waveforms(a.samples, a.seed, &fc).into_iter().enumerate() {
        let path = wav_dir.join(format!("{i:04}.wav"));
        write_waveform(&path, &w)?;
        entries.push(ManifestEntry {
            path,
            labels: vec![class],
        });
    }
    let manifest_path = run.artifact("manifest.csv");
    write_manifest(
        &manifest_path,
        &Manifest {
            entries,
            multi_label: false,
        },
    )?;
    let config_path = run.artifact("train.toml");
    fs::write(&config_path, cfg.to_toml_string())?;
    run.add_artifact(&wav_dir)?;
    run.add_artifact(&manifest_path)?;
    run.add_artifact(&config_path)?;
    run.finish()?;
    println!("{}", manifest_path.display());
    println!("{}", config_path.display());
    Ok(())
}
