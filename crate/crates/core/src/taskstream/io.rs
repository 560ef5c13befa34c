use std::fs;
use std::path::Path;

use super::{StreamError, TaskStream};

/// Pretty JSON with struct field order as key order.
pub fn stream_to_json(stream: &TaskStream) -> String {
    serde_json::to_string_pretty(stream).expect("stream serializes")
}

pub fn save_stream(stream: &TaskStream, path: &Path) -> Result<(), StreamError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StreamError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, stream_to_json(stream) + "\n")
        .map_err(|e| StreamError::Io(format!("{}: {e}", path.display())))
}

/// Parses and validates a stream; schema disjointness is enforced.
pub fn parse_stream(text: &str) -> Result<TaskStream, StreamError> {
    let stream: TaskStream = serde_json::from_str(text).map_err(|e| {
        let line = e.line();
        StreamError::Parse {
            line,
            column: e.column(),
            message: e.to_string(),
            context: text
                .lines()
                .nth(line.saturating_sub(1))
                .unwrap_or("")
                .trim()
                .to_string(),
        }
    })?;
    stream.validate()?;
    Ok(stream)
}

pub fn load_stream(path: &Path) -> Result<TaskStream, StreamError> {
    let text = fs::read_to_string(path)
        .map_err(|e| StreamError::Io(format!("{}: {e}", path.display())))?;
    parse_stream(&text)
}
