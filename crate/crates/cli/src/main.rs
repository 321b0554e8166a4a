//! Pipeline driver: dataset generation, encoder pretraining, distillation
//! training, linear probing, and report generation.
//!
//! Exit codes: 0 on success (including idempotent skips), 1 on user or
//! configuration errors, 2 on internal errors.

mod commands;
mod plot;
mod report;

use clap::error::ErrorKind;
use clap::Parser;

/// A problem the user can fix (bad flag, missing file, refused overwrite).
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UserError {}

pub fn user_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UserError(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UserError>().is_some() {
        return 1;
    }
    if let Some(core) = err.downcast_ref::<reldiff_core::Error>() {
        if matches!(core, reldiff_core::Error::InvalidInput(_)) {
            return 1;
        }
    }
    2
}

#[derive(Parser)]
#[command(
    name = "reldiff",
    version,
    about = "Relational distillation for a toy video diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: commands::Cmd,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = commands::run(cli.cmd) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
