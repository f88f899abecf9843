pub mod count;
pub mod eval;
pub mod gen_data;
pub mod register;
pub mod train;
pub mod verify;

use std::fs;
use std::path::Path;

use crate::error::{CliError, Result};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn print_json<T: serde::Serialize>(v: &T) {
    print!("{}", crate::config::pretty(v));
}
