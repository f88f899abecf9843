use serde::Serialize;

use symtrans_core::synth::{generate_pair, SyntheticSpec};

use crate::cli::GenDataArgs;
use crate::commands::{create_dir, print_json};
use crate::config;
use crate::error::Result;
use crate::manifest::{RunManifest, FILE_NAME};
use crate::svol::Svol;

pub const MOVING: &str = "moving.svol";
pub const FIXED: &str = "fixed.svol";
pub const MOVING_LABELS: &str = "moving_labels.svol";
pub const FIXED_LABELS: &str = "fixed_labels.svol";
pub const U_TRUE: &str = "u_true.svol";

pub fn pair_dir(index: u64) -> String {
    format!("pair_{:04}", index)
}

#[derive(Serialize)]
struct Record<'a> {
    spec: &'a SyntheticSpec,
    pairs: u64,
    seed: u64,
}

#[derive(Serialize)]
struct Summary {
    pairs: u64,
    amplitudes: Vec<f64>,
}

pub fn run(args: &GenDataArgs) -> Result<()> {
    let spec: SyntheticSpec = config::load(&args.spec)?;
    spec.validate()?;
    create_dir(&args.out)?;
    let mut manifest = RunManifest::new(
        "gen-data",
        &Record {
            spec: &spec,
            pairs: args.pairs,
            seed: args.seed,
        },
        Some(args.seed),
    );
    manifest.input(&args.spec)?;
    let mut amplitudes = Vec::new();
    for i in 0..args.pairs {
        let pair = generate_pair(&spec, args.seed, i)?;
        let dir = pair_dir(i);
        create_dir(&args.out.join(&dir))?;
        let files = [
            (MOVING, Svol::image(&pair.moving)),
            (FIXED, Svol::image(&pair.fixed)),
            (MOVING_LABELS, Svol::labels(&pair.moving_labels)),
            (FIXED_LABELS, Svol::labels(&pair.fixed_labels)),
            (U_TRUE, Svol::displacement(&pair.u_true)),
        ];
        for (name, vol) in files {
            let rel = format!("{}/{}", dir, name);
            vol.write(args.out.join(&rel))?;
            manifest.output(&args.out, &rel)?;
        }
        amplitudes.push(pair.amplitude);
    }
    manifest.write(args.out.join(FILE_NAME))?;
    print_json(&Summary {
        pairs: args.pairs,
        amplitudes,
    });
    Ok(())
}
