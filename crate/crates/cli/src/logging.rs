//! Line-delimited JSON logging on stderr.

use std::io::Write;

use log::{Level, Log, Metadata, Record};

struct JsonLogger {
    level: Level,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = serde_json::json!({
            "level": record.level().as_str().to_lowercase(),
            "target": record.target(),
            "message": record.args().to_string(),
        });
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }

    fn flush(&self) {}
}

pub fn init(verbose: bool) {
    let level = if verbose { Level::Debug } else { Level::Info };
    if log::set_boxed_logger(Box::new(JsonLogger { level })).is_ok() {
        log::set_max_level(level.to_level_filter());
    }
}
