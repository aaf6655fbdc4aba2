use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::gateway::write_transcript;

use super::{CrimeEvent, SimError, SimulationOutput};

/// Paths of the files making up one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFiles {
    pub config: PathBuf,
    pub events: PathBuf,
    pub summary: PathBuf,
    pub transcript: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        RunFiles {
            config: dir.join("config.json"),
            events: dir.join("events.jsonl"),
            summary: dir.join("summary.json"),
            transcript: dir.join("transcript.jsonl"),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.to_owned(), source }
}

fn artifact_err(path: &Path, e: impl ToString) -> SimError {
    SimError::Artifact { path: path.to_owned(), message: e.to_string() }
}

pub fn write_events<W: Write>(events: &[CrimeEvent], mut out: W) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events<R: BufRead>(input: R) -> Result<Vec<CrimeEvent>, serde_json::Error> {
    let mut events = Vec::new();
    for line in input.lines() {
        let line = line.map_err(serde_json::Error::io)?;
        if !line.trim().is_empty() {
            events.push(serde_json::from_str(&line)?);
        }
    }
    Ok(events)
}

/// Writes `config.json`, `events.jsonl`, `summary.json` and
/// `transcript.jsonl` into `dir`, creating it if needed.
pub fn write_run_dir(dir: &Path, output: &SimulationOutput) -> Result<RunFiles, SimError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = RunFiles::in_dir(dir);
    write_json(&files.config, &output.config_echo)?;
    write_json(&files.summary, output)?;

    let mut w = BufWriter::new(File::create(&files.events).map_err(io_err(&files.events))?);
    write_events(&output.events, &mut w).and_then(|_| w.flush()).map_err(io_err(&files.events))?;
    let mut w = BufWriter::new(File::create(&files.transcript).map_err(io_err(&files.transcript))?);
    write_transcript(&output.transcript, &mut w).and_then(|_| w.flush()).map_err(io_err(&files.transcript))?;
    Ok(files)
}

/// Reassembles a [`SimulationOutput`] from a run directory. A missing
/// transcript file reads as empty.
pub fn read_run_dir(dir: &Path) -> Result<SimulationOutput, SimError> {
    let files = RunFiles::in_dir(dir);
    let text = fs::read_to_string(&files.summary).map_err(io_err(&files.summary))?;
    let mut out: SimulationOutput = serde_json::from_str(&text).map_err(|e| artifact_err(&files.summary, e))?;
    let f = File::open(&files.events).map_err(io_err(&files.events))?;
    out.events = read_events(BufReader::new(f)).map_err(|e| artifact_err(&files.events, e))?;
    if files.transcript.exists() {
        let text = fs::read_to_string(&files.transcript).map_err(io_err(&files.transcript))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            out.transcript
                .push(serde_json::from_str(line).map_err(|e| artifact_err(&files.transcript, format!("line {}: {e}", i + 1)))?);
        }
    }
    // Catch hand-edited or truncated artifacts early.
    if out.per_cell_counts.total() != out.events.len() as u64 {
        return Err(artifact_err(
            &files.events,
            format!("{} events but summary counts {}", out.events.len(), out.per_cell_counts.total()),
        ));
    }
    Ok(out)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), SimError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| artifact_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}
