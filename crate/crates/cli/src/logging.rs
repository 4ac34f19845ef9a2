use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

/// Writes every log line to stderr and to the run log.
struct Tee(File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stderr().flush()?;
        self.0.flush()
    }
}

/// Level from `GOBL_LOG_LEVEL` (error, info or debug; default info).
pub fn init(run_log: &Path) -> io::Result<()> {
    let level = std::env::var("GOBL_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    let filter = match level.as_str() {
        "error" | "info" | "debug" => level,
        other => {
            eprintln!("GOBL_LOG_LEVEL={other:?} not one of error, info, debug; using info");
            "info".into()
        }
    };
    let file = File::create(run_log)?;
    env_logger::Builder::new()
        .parse_filters(&filter)
        .target(env_logger::Target::Pipe(Box::new(Tee(file))))
        .try_init()
        .map_err(io::Error::other)
}
