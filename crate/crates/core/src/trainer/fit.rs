//! The epoch loop: shuffling, parallel augmentation, steps, metrics log and
//! checkpoints.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::TrainConfig;
use super::model::Model;
use super::optim::Sgd;
use super::step::{Batch, StepMetrics, Trainer};
use crate::ais::{
    load_descriptions, parse_descriptions, teacher_image_embedding, CacheProvider, FixtureProvider, TeacherKind,
    TeacherProvider, TextCorpus, DEFAULT_CORPUS,
};
use crate::contrastive::EmbeddingQueue;
use crate::data::{two_view_augment, ImageRecord, Manifest, Split};
use crate::error::{Error, Result};
use crate::rng::{rng_for, STREAM_AUGMENT, STREAM_SHUFFLE};
use crate::tensor::from_f32;

/// Seed of the fixture teacher. Fixed so that the teacher does not change
/// with the run seed.
pub const FIXTURE_SEED: u64 = 0;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

pub fn teacher_from_config(cfg: &TrainConfig) -> Result<Box<dyn TeacherProvider>> {
    Ok(match cfg.ais.teacher {
        TeacherKind::Fixture => Box::new(FixtureProvider::new(cfg.ais.fixture_dim, FIXTURE_SEED)),
        TeacherKind::Cache => Box::new(CacheProvider::load(&cfg.ais.teacher_cache)?),
    })
}

pub fn corpus_from_config(cfg: &TrainConfig, teacher: &dyn TeacherProvider) -> Result<TextCorpus> {
    let descriptions = if cfg.ais.corpus.is_empty() {
        parse_descriptions(DEFAULT_CORPUS)
    } else {
        load_descriptions(&cfg.ais.corpus)?
    };
    TextCorpus::build(descriptions, teacher)
}

/// Teacher embedding of every record's decoded image, keyed by source id.
pub fn teacher_embeddings(records: &[&ImageRecord], teacher: &dyn TeacherProvider) -> Result<HashMap<usize, Vec<f32>>> {
    records
        .par_iter()
        .map(|r| Ok((r.source_id, teacher_image_embedding(teacher, r.source_id, &r.load_rgb()?)?)))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete (for interrupted runs).
    pub stop_after_epochs: Option<usize>,
}

pub struct FitOutcome {
    pub model: Model,
    /// Metrics of the steps run by this call.
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
    pub elapsed: Duration,
}

fn open_metrics(path: &Path, keep_below: Option<u64>) -> Result<fs::File> {
    let mut text = format!("{}\n", StepMetrics::CSV_HEADER);
    if let Some(limit) = keep_below {
        if let Ok(existing) = fs::read_to_string(path) {
            for line in existing.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s < limit) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

pub fn fit(
    cfg: &TrainConfig,
    manifest: &Manifest,
    teacher: &dyn TeacherProvider,
    run_dir: &Path,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    let started = Instant::now();
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    cfg.write_snapshot(run_dir.join(CONFIG_SNAPSHOT))?;

    let train: Vec<&ImageRecord> = manifest.split(Split::Train);
    if train.len() < 2 {
        return Err(Error::config(format!("need at least 2 training images, found {}", train.len())));
    }
    let dtype = cfg.model.precision.dtype();
    let corpus = corpus_from_config(cfg, teacher)?;
    let u_t = teacher_embeddings(&train, teacher)?;

    let (model, queue, optimizer, start_epoch) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load_expecting(path, cfg)?;
            (ck.model, ck.queue, ck.optimizer, ck.epoch)
        }
        None => {
            let mut model = Model::new(cfg, teacher.embed_dim())?;
            model.load_pretrained(cfg)?;
            let queue = EmbeddingQueue::new(cfg.contrastive.queue_capacity, cfg.model.proj_dim)?;
            (model, queue, Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay), 0)
        }
    };
    let mut trainer = Trainer {
        model,
        queue,
        optimizer,
        text: corpus.tensor(dtype)?,
    };

    let metrics_path = run_dir.join(METRICS_FILE);
    let resumed_step = opts.resume.as_ref().map(|_| trainer.model.state.step);
    let mut metrics_file = open_metrics(&metrics_path, resumed_step)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.data.workers)
        .build()
        .map_err(|e| Error::External(format!("thread pool: {e}")))?;
    let seed = cfg.run.seed;
    let bs = cfg.optim.batch_size;
    let end_epoch = opts
        .stop_after_epochs
        .map_or(cfg.optim.epochs, |s| s.min(cfg.optim.epochs));
    let mut metrics = Vec::new();
    let mut last_ckpt = None;

    for epoch in start_epoch..end_epoch {
        let lr = cfg.optim.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(seed, &[STREAM_SHUFFLE, epoch as u64]));
        for chunk in order.chunks(bs) {
            let views = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| {
                        let r = train[i];
                        let mut rng = rng_for(seed, &[STREAM_AUGMENT, epoch as u64, r.source_id as u64]);
                        two_view_augment(r, &cfg.data.augment, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let rows: Vec<f32> = chunk.iter().flat_map(|&i| u_t[&train[i].source_id].iter().copied()).collect();
            let teacher_rows: Tensor = from_f32(rows, (chunk.len(), teacher.embed_dim()), dtype)?;
            let batch = Batch::stack(&views, teacher_rows, &trainer.model)?;
            let m = trainer.step(&batch, cfg, lr)?;
            writeln!(metrics_file, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
            if m.degenerate_labels > 0 {
                log::debug!("step {}: {} degenerate saliency labels", m.step, m.degenerate_labels);
            }
            metrics.push(m);
        }
        let done = epoch + 1;
        log::info!(
            "epoch {done}/{} lr {lr:.5} last l_cl {:.4} ({:.1}s)",
            cfg.optim.epochs,
            metrics.last().map_or(f64::NAN, |m| m.l_cl),
            started.elapsed().as_secs_f64()
        );
        if done % cfg.run.checkpoint_every == 0 || done == end_epoch {
            let path = ckpt_dir.join(epoch_checkpoint_name(done));
            save_checkpoint(&path, cfg, done, &trainer.model, &trainer.queue, &trainer.optimizer)?;
            last_ckpt = Some(path);
        }
    }

    let final_checkpoint = ckpt_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(
        &final_checkpoint,
        cfg,
        end_epoch.max(start_epoch),
        &trainer.model,
        &trainer.queue,
        &trainer.optimizer,
    )?;
    if let Some(p) = last_ckpt {
        log::debug!("last periodic checkpoint {}", p.display());
    }
    Ok(FitOutcome {
        model: trainer.model,
        metrics,
        final_checkpoint,
        elapsed: started.elapsed(),
    })
}
