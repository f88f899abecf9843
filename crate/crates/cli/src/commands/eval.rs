use symtrans_core::deform::jacobian_determinant;
use symtrans_core::loss::Metrics;

use crate::cli::EvalArgs;
use crate::commands::print_json;
use crate::commands::register::label_dice;
use crate::error::{CliError, Result};
use crate::svol::Svol;

pub fn run(args: &EvalArgs) -> Result<()> {
    let u = Svol::read(&args.field)?
        .to_displacement::<f64>()
        .map_err(|source| CliError::Svol {
            path: args.field.clone(),
            source,
        })?;
    let folding = jacobian_determinant(&u)?.stats;
    let dsc = match (&args.moving_labels, &args.fixed_labels) {
        (Some(m), Some(f)) => Some(label_dice(m, f, &u)?),
        _ => None,
    };
    print_json(&Metrics::new(&folding, dsc.as_ref()));
    Ok(())
}
