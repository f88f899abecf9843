use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use symtrans_core::train::{StepRecord, TrainConfig, Trainer};

use crate::checkpoint;
use crate::cli::TrainArgs;
use crate::commands::{create_dir, print_json};
use crate::config;
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, FILE_NAME};

pub const LOSS_CSV: &str = "loss.csv";
pub const CSV_HEADER: &str = "iteration,loss,loss_sim,loss_reg";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{:06}.symt", step)
}

pub fn csv_row(r: &StepRecord) -> String {
    format!("{},{},{},{}", r.iteration, r.loss, r.loss_sim, r.loss_reg)
}

/// Fields that may differ between a checkpoint's config and a resuming config.
fn resumable(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig {
        iterations: 0,
        checkpoint_every: 0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

/// Opens the loss curve, keeping rows up to `step` from an earlier run in the same directory.
fn open_curve(path: &Path, step: u64) -> Result<BufWriter<File>> {
    let mut kept = vec![CSV_HEADER.to_string()];
    if step > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|i| i.parse::<u64>().ok()).is_some_and(|i| i <= step))
                    .map(str::to_string),
            );
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?);
    for line in kept {
        writeln!(w, "{}", line).map_err(|e| CliError::io(path, e))?;
    }
    Ok(w)
}

#[derive(Serialize)]
struct Summary {
    step: u64,
    final_checkpoint: PathBuf,
    final_loss: Option<f64>,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let cfg: TrainConfig = config::load(&args.config)?;
    cfg.validate()?;
    let mut manifest = RunManifest::new("train", &cfg, Some(cfg.seed));
    manifest.input(&args.config)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = checkpoint::read(path)?;
            if !resumable(&ck.config, &cfg) {
                return Err(CliError::usage(format!(
                    "{} was trained with a different config; only `iterations` and `checkpoint_every` may change on resume",
                    path.display()
                )));
            }
            manifest.input(path)?;
            Trainer::<f32>::from_state(cfg.clone(), ck.state)?
        }
        None => Trainer::<f32>::new(cfg.clone())?,
    };
    create_dir(&args.out)?;
    let csv_path = args.out.join(LOSS_CSV);
    let mut csv = open_curve(&csv_path, trainer.state.step())?;
    let mut written: Vec<String> = Vec::new();
    let out = args.out.clone();
    let save = |t: &Trainer<f32>, written: &mut Vec<String>| -> Result<()> {
        let name = checkpoint_name(t.state.step());
        checkpoint::write(out.join(&name), &t.cfg, &t.model.layout, &t.state)?;
        if !written.contains(&name) {
            written.push(name);
        }
        Ok(())
    };

    let mut last = None;
    let mut failure = None;
    let result = trainer.train(|t, rec| {
        writeln!(csv, "{}", csv_row(rec)).map_err(|e| io_core(&csv_path, e, &mut failure))?;
        last = Some(rec.loss);
        if cfg.checkpoint_every > 0 && rec.iteration % cfg.checkpoint_every == 0 {
            save(t, &mut written).map_err(|e| stash(e, &mut failure))?;
        }
        Ok(())
    });
    csv.flush().map_err(|e| CliError::io(&csv_path, e))?;
    drop(csv);
    if let Some(e) = failure {
        return Err(e);
    }
    let finished = match result {
        Ok(_) => {
            save(&trainer, &mut written)?;
            Ok(())
        }
        Err(e) => Err(CliError::from(e)),
    };
    manifest.output(&args.out, LOSS_CSV)?;
    for name in &written {
        manifest.output(&args.out, name)?;
    }
    manifest.write(args.out.join(FILE_NAME))?;
    finished?;
    print_json(&Summary {
        step: trainer.state.step(),
        final_checkpoint: args.out.join(checkpoint_name(trainer.state.step())),
        final_loss: last,
    });
    Ok(())
}

/// Keeps a CLI error raised inside the training callback, which can only return core errors.
fn stash(e: CliError, slot: &mut Option<CliError>) -> symtrans_core::Error {
    let msg = e.to_string();
    *slot = Some(e);
    symtrans_core::Error::InvalidConfig {
        field: "output".into(),
        reason: msg,
    }
}

fn io_core(path: &Path, e: std::io::Error, slot: &mut Option<CliError>) -> symtrans_core::Error {
    stash(CliError::io(path, e), slot)
}
