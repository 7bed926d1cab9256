use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EvaluationRecord, SearchError};

pub const JOURNAL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JournalHeader {
    pub config_hash: String,
    pub schema_version: u32,
}

/// Append-only JSONL writer; every record is written with a single
/// `write_all` and flushed before the call returns.
#[derive(Debug)]
pub struct JournalWriter {
    path: PathBuf,
    file: File,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SearchError + '_ {
    move |source| SearchError::Io { path: path.to_path_buf(), source }
}

impl JournalWriter {
    pub fn create(path: &Path, header: &JournalHeader) -> Result<Self, SearchError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = JournalWriter { path: path.to_path_buf(), file };
        w.write_line(&serde_json::to_string(header).expect("header serializes"))?;
        Ok(w)
    }

    /// Open for appending, terminating a dangling last line first.
    pub fn append(path: &Path) -> Result<Self, SearchError> {
        let existing = std::fs::read(path).map_err(io_err(path))?;
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        let mut w = JournalWriter { path: path.to_path_buf(), file };
        if existing.last().is_some_and(|b| *b != b'\n') {
            w.file.write_all(b"\n").map_err(io_err(path))?;
        }
        Ok(w)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, record: &EvaluationRecord) -> Result<(), SearchError> {
        self.write_line(&serde_json::to_string(record).expect("record serializes"))
    }

    fn write_line(&mut self, line: &str) -> Result<(), SearchError> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.file.write_all(&buf).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JournalContents {
    pub header: JournalHeader,
    pub records: Vec<EvaluationRecord>,
    /// The final line was incomplete or unparsable and was ignored.
    pub dropped_tail: bool,
    /// 1-based line numbers of skipped corrupt lines (lenient mode only).
    pub corrupt_lines: Vec<usize>,
    /// Byte length of the intact prefix.
    pub intact_len: u64,
}

/// How [`read_journal_from`] treats a corrupt line that is not the last one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadMode {
    /// Fail; used when the journal must replay exactly.
    Strict,
    /// Skip and count; used by reports.
    Lenient,
}

pub fn read_journal(path: &Path, mode: ReadMode) -> Result<JournalContents, SearchError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_journal_from(BufReader::new(file), mode).map_err(|e| match e {
        SearchError::Journal { line, message, .. } => SearchError::Journal { path: path.to_path_buf(), line, message },
        other => other,
    })
}

pub fn read_journal_from(mut reader: impl BufRead, mode: ReadMode) -> Result<JournalContents, SearchError> {
    let journal_err = |line: usize, message: String| SearchError::Journal { path: PathBuf::new(), line, message };
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(|source| SearchError::Io { path: PathBuf::new(), source })?;

    let mut lines: Vec<(&[u8], bool)> = Vec::new();
    let mut start = 0;
    while start < raw.len() {
        match raw[start..].iter().position(|b| *b == b'\n') {
            Some(off) => {
                lines.push((&raw[start..start + off], true));
                start += off + 1;
            }
            None => {
                lines.push((&raw[start..], false));
                start = raw.len();
            }
        }
    }
    let Some(((first, _), rest)) = lines.split_first() else {
        return Err(journal_err(1, "empty journal (no header)".into()));
    };
    let header: JournalHeader = serde_json::from_slice(first).map_err(|e| journal_err(1, format!("bad header: {e}")))?;
    if header.schema_version != JOURNAL_SCHEMA_VERSION {
        return Err(journal_err(1, format!("unsupported schema_version {}", header.schema_version)));
    }

    let mut contents = JournalContents {
        header,
        records: Vec::new(),
        dropped_tail: false,
        corrupt_lines: Vec::new(),
        intact_len: first.len() as u64 + u64::from(lines[0].1),
    };
    for (i, (line, terminated)) in rest.iter().enumerate() {
        let line_no = i + 2;
        let is_last = i + 1 == rest.len();
        if line.is_empty() && *terminated {
            contents.intact_len += 1;
            continue;
        }
        let parsed = serde_json::from_slice::<EvaluationRecord>(line);
        match parsed {
            Ok(rec) if *terminated => {
                if mode == ReadMode::Strict && rec.seq != contents.records.len() as u64 {
                    return Err(journal_err(line_no, format!("expected seq {}, found {}", contents.records.len(), rec.seq)));
                }
                contents.records.push(rec);
                contents.intact_len += line.len() as u64 + 1;
            }
            _ if is_last => {
                log::warn!("dropping truncated final journal line {line_no}");
                contents.dropped_tail = true;
            }
            Ok(_) => unreachable!("only the last line can lack a newline"),
            Err(e) => match mode {
                ReadMode::Strict => return Err(journal_err(line_no, e.to_string())),
                ReadMode::Lenient => {
                    log::warn!("skipping corrupt journal line {line_no}: {e}");
                    contents.corrupt_lines.push(line_no);
                    contents.intact_len += line.len() as u64 + 1;
                }
            },
        }
    }
    Ok(contents)
}
