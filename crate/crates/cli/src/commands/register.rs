use std::path::{Path, PathBuf};

use serde::Serialize;

use symtrans_core::deform::jacobian_determinant;
use symtrans_core::loss::{dice, warp_labels, LabelMap, Metrics, RegistrationMode};
use symtrans_core::model::SymTrans;
use symtrans_core::train::register;

use crate::checkpoint;
use crate::cli::RegisterArgs;
use crate::commands::print_json;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::svol::Svol;

fn svol_err(path: &Path) -> impl FnOnce(crate::svol::SvolError) -> CliError + '_ {
    move |source| CliError::Svol {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read_labels(path: &Path) -> Result<LabelMap> {
    Svol::read(path)?.to_labels().map_err(svol_err(path))
}

/// Dice of `moving` warped by `u` against `fixed`.
pub(crate) fn label_dice<S: symtrans_core::Scalar>(
    moving: &Path,
    fixed: &Path,
    u: &symtrans_core::deform::DisplacementField<S>,
) -> Result<symtrans_core::loss::DiceReport> {
    let (m, f) = (read_labels(moving)?, read_labels(fixed)?);
    for (p, l) in [(moving, &m), (fixed, &f)] {
        if l.extents() != u.extents() {
            return Err(CliError::usage(format!(
                "{}: extents {:?} differ from the field's {:?}",
                p.display(),
                l.extents(),
                u.extents()
            )));
        }
    }
    Ok(dice(&warp_labels(&m, u)?, &f, None)?)
}

#[derive(Serialize)]
struct Record<'a> {
    checkpoint: &'a Path,
    mode: RegistrationMode,
}

fn default_manifest(field: &Path) -> PathBuf {
    field.with_extension("manifest.json")
}

pub fn run(args: &RegisterArgs) -> Result<()> {
    let ck = checkpoint::read(&args.checkpoint)?;
    let mode = args.mode.map_or(ck.config.model.mode, RegistrationMode::from);
    let model = SymTrans::new(&ck.config.model)?;
    let mut volumes = Vec::new();
    for path in [&args.moving, &args.fixed] {
        let img = Svol::read(path)?.to_image::<f32>().map_err(svol_err(path))?;
        if img.channels() != 1 || img.extents() != ck.config.model.input_shape {
            return Err(CliError::usage(format!(
                "{}: {} channel(s) at {:?}, the checkpoint expects 1 channel at {:?}",
                path.display(),
                img.channels(),
                img.extents(),
                ck.config.model.input_shape
            )));
        }
        volumes.push(img.into_tensor());
    }
    let reg = register(&model, &ck.state.params, &volumes[0], &volumes[1], mode, &ck.config.loss)?;
    let folding = jacobian_determinant(&reg.displacement)?.stats;
    let dsc = match (&args.moving_labels, &args.fixed_labels) {
        (Some(m), Some(f)) => Some(label_dice(m, f, &reg.displacement)?),
        _ => None,
    };
    let mut metrics = Metrics::new(&folding, dsc.as_ref());
    metrics.loss = Some(reg.loss);
    metrics.loss_sim = Some(reg.loss_sim);
    metrics.loss_reg = Some(reg.loss_reg);

    Svol::displacement(&reg.displacement).write(&args.out_field)?;
    Svol::image(&reg.warped).write(&args.out_warped)?;
    let mut manifest = RunManifest::new(
        "register",
        &Record {
            checkpoint: &args.checkpoint,
            mode,
        },
        Some(ck.config.seed),
    );
    for p in [Some(&args.checkpoint), Some(&args.moving), Some(&args.fixed), args.moving_labels.as_ref(), args.fixed_labels.as_ref()]
        .into_iter()
        .flatten()
    {
        manifest.input(p)?;
    }
    for p in [&args.out_field, &args.out_warped] {
        manifest.output(Path::new(""), p)?;
    }
    manifest.write(args.manifest.clone().unwrap_or_else(|| default_manifest(&args.out_field)))?;
    print_json(&metrics);
    Ok(())
}
