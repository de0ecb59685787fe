//! Pipeline orchestration behind the `vscomplete` binary.

pub mod config;
pub mod pipeline;

use std::io::Write;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

/// Log to stderr, as plain text or one JSON object per line.
pub fn init_logging(json: bool, verbose: bool) {
    let default = if verbose { "debug" } else { "info" };
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default));
    if json {
        b.format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    let _ = b.try_init();
}
