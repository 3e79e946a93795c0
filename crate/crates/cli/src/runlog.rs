//! Logger that prints to stderr and, once a run directory is known, also
//! appends timestamped lines to its `run.log`. Timestamps never reach any
//! other output file.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{Level, LevelFilter, Log, Metadata, Record};

struct RunLog {
    stderr_level: AtomicUsize,
    sidecar: Mutex<Option<File>>,
}

static LOGGER: RunLog =
    RunLog { stderr_level: AtomicUsize::new(LevelFilter::Info as usize), sidecar: Mutex::new(None) };

impl Log for RunLog {
    fn enabled(&self, metadata: &Metadata<'_>) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &Record<'_>) {
        if record.level() as usize <= self.stderr_level.load(Ordering::Relaxed) {
            eprintln!("[{}] {}", record.level().as_str().to_lowercase(), record.args());
        }
        if record.level() <= Level::Info {
            if let Some(f) = self.sidecar.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
                let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
                let _ =
                    writeln!(f, "{}.{:03} {} {}", now.as_secs(), now.subsec_millis(), record.level(), record.args());
            }
        }
    }

    fn flush(&self) {
        if let Some(f) = self.sidecar.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
            let _ = f.flush();
        }
    }
}

pub fn init(verbosity: u8, quiet: bool) {
    let level = match (quiet, verbosity) {
        (true, _) => LevelFilter::Warn,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    LOGGER.stderr_level.store(level as usize, Ordering::Relaxed);
    if log::set_logger(&LOGGER).is_ok() {
        // info always reaches the sidecar even when stderr is quieter
        log::set_max_level(level.max(LevelFilter::Info));
    }
}

/// Starts appending to `dir/run.log`.
pub fn attach(dir: &Path) -> std::io::Result<()> {
    let file = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("run.log"))?;
    *LOGGER.sidecar.lock().unwrap_or_else(|e| e.into_inner()) = Some(file);
    Ok(())
}
