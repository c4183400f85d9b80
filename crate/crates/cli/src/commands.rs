use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use pixeldyn_core::baseline_edlstm::{self, EdLstmCheckpoint};
use pixeldyn_core::dataset::{self, Corpus};
use pixeldyn_core::eval::{self, FigureOptions};
use pixeldyn_core::trainer::{self, LossRecord, ModelCheckpoint, ModelDims, TrainEvent};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{Common, Task};

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::load(common.preset.as_deref(), common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    Ok(config)
}

fn prepare_out(common: &Common) -> Result<()> {
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))
}

fn write_manifest(common: &Common, command: &str, config: &RunConfig, seed: u64, inputs: Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "inputs": inputs,
    });
    let path = common.out.join(format!("{command}_manifest.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    dataset::read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

pub fn generate(common: &Common) -> Result<()> {
    let config = resolve(common)?;
    config.dataset.validate()?;
    prepare_out(common)?;
    let split = dataset::generate(&config.dataset)?;
    dataset::write_dataset(&common.out.join("train.pdy"), &split.train)?;
    dataset::write_dataset(&common.out.join("test.pdy"), &split.test)?;
    write_manifest(common, "generate", &config, config.dataset.seed, json!({}))?;
    eprintln!(
        "wrote {} training and {} test sequences to {}",
        split.train.sequences.len(),
        split.test.sequences.len(),
        common.out.display()
    );
    Ok(())
}

fn loss_line(r: &LossRecord) -> String {
    format!("{},{},{},{},{}", r.iteration, r.elbo, r.recon, r.kl, r.beta)
}

pub fn train(
    common: &Common,
    dataset_path: &Path,
    iterations: Option<usize>,
    batch: Option<usize>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let mut config = resolve(common)?;
    if let Some(n) = iterations {
        config.train.iterations = n;
    }
    if let Some(b) = batch {
        config.train.batch_size = b;
    }
    let cfg = &config.train;
    cfg.validate()?;
    let corpus = read_corpus(dataset_path)?;
    let dims = ModelDims {
        pixels: corpus.pixels(),
        state_dim: cfg.state_dim,
        canvas_dim: cfg.canvas_dim,
        components: cfg.components,
        object_counts: corpus.object_counts(),
    };
    let start = match checkpoint {
        Some(path) => {
            let ck = ModelCheckpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            let found = ck.model.dims();
            if found.pixels != dims.pixels || found.state_dim != dims.state_dim || found.canvas_dim != dims.canvas_dim {
                bail!("checkpoint dimensions {found:?} do not match the configuration {dims:?}");
            }
            ck
        }
        None => ModelCheckpoint::new(trainer::initialize(cfg.seed, &dims)?),
    };
    prepare_out(common)?;
    let ck_dir = common.out.join("checkpoints");
    std::fs::create_dir_all(&ck_dir)?;
    write_manifest(
        common,
        "train",
        &config,
        cfg.seed,
        json!({ "dataset": dataset_path, "checkpoint": checkpoint, "parameters": start.model.parameter_count() }),
    )?;

    let mut log = BufWriter::new(File::create(common.out.join("loss.csv"))?);
    writeln!(log, "iteration,elbo,recon,kl,beta")?;
    for r in &start.history {
        writeln!(log, "{}", loss_line(r))?;
    }
    let clock = std::time::Instant::now();
    let done = trainer::train(cfg, start, &corpus, |event| {
        match event {
            TrainEvent::Step(r) => {
                writeln!(log, "{}", loss_line(r))?;
                if r.iteration % 100 == 0 {
                    log.flush()?;
                    eprintln!(
                        "iter {:>6}  elbo {:>10.1}  recon {:>10.1}  kl {:>8.2}  beta {:>6.2}  {:.0?}",
                        r.iteration,
                        r.elbo,
                        r.recon,
                        r.kl,
                        r.beta,
                        clock.elapsed()
                    );
                }
            }
            TrainEvent::Checkpoint(c) => c.save(&ck_dir.join(format!("ck_{:06}.pdyc", c.iteration)))?,
        }
        Ok(())
    })?;
    log.flush()?;
    done.save(&common.out.join("model.pdyc"))?;
    eprintln!("trained to iteration {} in {:.0?}", done.iteration, clock.elapsed());
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn write_summary(common: &Common, name: &str, summary: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(common.out.join(format!("{name}_summary.json")), text.clone() + "\n")?;
    println!("{text}");
    Ok(())
}

pub fn eval(common: &Common, task: Task, checkpoint: &Path, dataset_path: &Path, figures: usize) -> Result<()> {
    let config = resolve(common)?;
    let ck = ModelCheckpoint::load(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let corpus = read_corpus(dataset_path)?;
    prepare_out(common)?;
    let fig = FigureOptions { dir: common.out.join("figures"), count: figures };
    let fig = (figures > 0).then_some(&fig);
    let name = match task {
        Task::Infer => "infer",
        Task::Generate => "generate",
        Task::Interpolate => "interpolate",
    };
    write_manifest(
        common,
        &format!("eval_{name}"),
        &config,
        config.train.seed,
        json!({ "checkpoint": checkpoint, "dataset": dataset_path, "iteration": ck.iteration }),
    )?;
    let horizon = corpus.steps.saturating_sub(eval::OBSERVED);
    let summary = match task {
        Task::Infer => {
            let records = eval::position_inference_task(&ck.model, &corpus, fig)?;
            write_jsonl(&common.out.join("infer.jsonl"), &records)?;
            let rms: Vec<f64> = records.iter().map(|r| r.rms).collect();
            let reflected: Vec<f64> = records.iter().filter_map(|r| r.rms_with_reflection).collect();
            json!({
                "task": name,
                "sequences": records.len(),
                "width": corpus.width,
                "median_rms": median(&rms),
                "mean_rms": mean(rms.iter().copied()),
                "median_rms_with_reflection": median(&reflected),
                "mean_reconstruction_nll": mean(records.iter().map(|r| r.reconstruction_nll)),
            })
        }
        Task::Generate => {
            let records = eval::generation_report(&ck.model, &corpus, horizon, fig)?;
            write_jsonl(&common.out.join("generate.jsonl"), &records)?;
            json!({
                "task": name,
                "sequences": records.len(),
                "horizon": horizon,
                "mean_nll": mean(records.iter().map(|r| r.mean_nll)),
            })
        }
        Task::Interpolate => {
            let records = eval::interpolation_report(&ck.model, &corpus, fig)?;
            write_jsonl(&common.out.join("interpolate.jsonl"), &records)?;
            let wins = records.iter().filter(|r| r.interpolated_rms < r.generated_rms).count();
            let losses = records.iter().filter(|r| r.interpolated_rms > r.generated_rms).count();
            json!({
                "task": name,
                "sequences": records.len(),
                "mean_generated_rms": mean(records.iter().map(|r| r.generated_rms)),
                "mean_interpolated_rms": mean(records.iter().map(|r| r.interpolated_rms)),
                "wins": wins,
                "losses": losses,
                "sign_test_p": eval::sign_test(wins, losses),
            })
        }
    };
    write_summary(common, name, &summary)
}

pub fn baseline(
    common: &Common,
    dataset_path: &Path,
    test: Option<&Path>,
    iterations: Option<usize>,
    batch: Option<usize>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let mut config = resolve(common)?;
    if let Some(n) = iterations {
        config.baseline.iterations = n;
    }
    if let Some(b) = batch {
        config.baseline.batch_size = b;
    }
    let cfg = &config.baseline;
    cfg.validate()?;
    let corpus = read_corpus(dataset_path)?;
    let start = match checkpoint {
        Some(path) => EdLstmCheckpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?,
        None => EdLstmCheckpoint::new(baseline_edlstm::initialize(cfg, corpus.pixels())),
    };
    prepare_out(common)?;
    write_manifest(common, "baseline", &config, cfg.seed, json!({ "dataset": dataset_path, "test": test, "checkpoint": checkpoint }))?;
    let mut log = BufWriter::new(File::create(common.out.join("baseline_loss.csv"))?);
    writeln!(log, "iteration,nll")?;
    for r in &start.history {
        writeln!(log, "{},{}", r.iteration, r.nll)?;
    }
    let clock = std::time::Instant::now();
    let done = baseline_edlstm::train_edlstm(cfg, start, &corpus, |r| {
        writeln!(log, "{},{}", r.iteration, r.nll)?;
        if r.iteration % 100 == 0 {
            log.flush()?;
            eprintln!("iter {:>6}  nll {:.5}  {:.0?}", r.iteration, r.nll, clock.elapsed());
        }
        Ok(())
    })?;
    log.flush()?;
    done.save(&common.out.join("baseline.pdyc"))?;
    if let Some(test_path) = test {
        let test_corpus = read_corpus(test_path)?;
        let horizon = test_corpus.steps.saturating_sub(eval::OBSERVED);
        let records = baseline_edlstm::generation_report(&done.params, &test_corpus, horizon)?;
        write_jsonl(&common.out.join("baseline.jsonl"), &records)?;
        let summary = json!({
            "task": "baseline",
            "sequences": records.len(),
            "horizon": horizon,
            "mean_nll": mean(records.iter().map(|r| r.mean_nll)),
        });
        write_summary(common, "baseline", &summary)?;
    }
    Ok(())
}
