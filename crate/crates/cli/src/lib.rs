//! Pipeline driver behind the `eex` binary: run configuration, data
//! preparation, and one function per subcommand.

pub mod commands;
pub mod config;
pub mod pipeline;

use eex::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CONTRACT: i32 = 3;

/// Exit status for a failed run: 1 for usage and configuration problems,
/// 2 for unreadable or malformed data and checkpoints, 3 for violated
/// contracts.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Json(_)) => EXIT_USAGE,
        Some(Error::Parse { .. } | Error::Io { .. } | Error::Checkpoint(_)) => EXIT_DATA,
        Some(Error::Contract(_) | Error::Shape(_) | Error::Index(_) | Error::NonFinite(_)) => EXIT_CONTRACT,
        None => EXIT_USAGE,
    }
}
