//! Workflow-note parsing and attribute label extraction.
//!
//! Technicians and fellows log timestamped free-text descriptions of events
//! while reviewing an EEG. Each description is matched against a table of
//! per-attribute patterns (synonyms and acronyms, case-insensitive), and the
//! matched attributes are assigned to the 60-second clip in which the event
//! began — never to later clips the event may span.
//!
//! Substring patterns match anywhere in the text, so `slow` catches
//! `slowing`; the cost is that `stim` also fires inside `stimulation`, which
//! is acceptable because attributes may co-occur. Anchored patterns must
//! match the whole trimmed note and require at least one character (the
//! all-`x` / all-`L` / all-`R` conventions), so the empty note matches
//! nothing.

use std::collections::BTreeSet;
use std::path::Path;

use regex::RegexBuilder;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NotesError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("attribute table line {line}: {msg}")]
    BadTableLine { line: usize, msg: String },
    #[error("duplicate attribute name '{0}'")]
    DuplicateAttribute(String),
    #[error("notes file is missing column '{0}'")]
    MissingColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// How a pattern is applied to a note.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    /// Literal alternatives, found anywhere in the text.
    Substring,
    /// Regex over the whole trimmed text.
    Anchored,
    /// Reserved vocabulary slot; never matches.
    Placeholder,
}

#[derive(Debug, Clone)]
pub struct AttributePattern {
    pub name: String,
    pub mode: MatchMode,
    pub source: String,
    regex: Option<regex::Regex>,
}

/// Ordered attribute vocabulary with compiled patterns.
#[derive(Debug, Clone)]
pub struct AttributeTable {
    patterns: Vec<AttributePattern>,
}

const DEFAULT_TABLE: &str = include_str!("../../../config/attributes.conf");

impl AttributeTable {
    /// The table shipped with the toolkit: the 25 published attribute
    /// patterns plus the `mislabeled seizure` placeholder slot.
    pub fn shipped() -> Self {
        Self::parse(DEFAULT_TABLE).expect("shipped attribute table must parse")
    }

    pub fn from_file(path: &Path) -> Result<Self, NotesError> {
        let text = std::fs::read_to_string(path).map_err(|e| NotesError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text)
    }

    /// Parse `name = pattern [mode]` lines. `#` starts a comment; blank
    /// lines are ignored; an empty pattern declares a placeholder.
    pub fn parse(text: &str) -> Result<Self, NotesError> {
        let mut patterns: Vec<AttributePattern> = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, rest) = line.split_once('=').ok_or(NotesError::BadTableLine {
                line: lineno + 1,
                msg: "expected `name = pattern [mode]`".into(),
            })?;
            let name = name.trim().to_string();
            if name.is_empty() {
                return Err(NotesError::BadTableLine {
                    line: lineno + 1,
                    msg: "empty attribute name".into(),
                });
            }
            if !seen.insert(name.to_lowercase()) {
                return Err(NotesError::DuplicateAttribute(name));
            }
            let mut body = rest.trim().to_string();
            let mut mode = MatchMode::Substring;
            for (tag, m) in [
                ("[anchored]", MatchMode::Anchored),
                ("[substring]", MatchMode::Substring),
            ] {
                if let Some(stripped) = body.strip_suffix(tag) {
                    body = stripped.trim().to_string();
                    mode = m;
                }
            }
            if body.is_empty() {
                mode = MatchMode::Placeholder;
            }
            let regex = match mode {
                MatchMode::Placeholder => None,
                MatchMode::Substring => {
                    let alts: Vec<String> = body
                        .split('|')
                        .map(|alt| regex::escape(alt.trim()))
                        .collect();
                    if alts.iter().any(|a| a.is_empty()) {
                        return Err(NotesError::BadTableLine {
                            line: lineno + 1,
                            msg: "empty alternative in substring pattern".into(),
                        });
                    }
                    Some(build_regex(&alts.join("|"), lineno + 1)?)
                }
                MatchMode::Anchored => Some(build_regex(&format!("^(?:{body})$"), lineno + 1)?),
            };
            patterns.push(AttributePattern {
                name,
                mode,
                source: body,
                regex,
            });
        }
        Ok(AttributeTable { patterns })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.patterns.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn patterns(&self) -> &[AttributePattern] {
        &self.patterns
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.patterns.iter().position(|p| p.name == name)
    }

    /// Index of the seizure attribute.
    pub fn seizure_index(&self) -> Option<usize> {
        self.index_of("seizure")
    }

    /// Evaluate every pattern independently against one note.
    pub fn match_bits(&self, text: &str) -> Vec<bool> {
        let trimmed = text.trim();
        self.patterns
            .iter()
            .map(|p| match (&p.regex, p.mode) {
                (None, _) => false,
                (Some(re), MatchMode::Anchored) => re.is_match(trimmed),
                (Some(re), _) => re.is_match(text),
            })
            .collect()
    }

    /// Names of the attributes that fire on one note.
    pub fn match_attributes(&self, text: &str) -> BTreeSet<&str> {
        self.match_bits(text)
            .iter()
            .zip(&self.patterns)
            .filter_map(|(&hit, p)| hit.then_some(p.name.as_str()))
            .collect()
    }
}

fn build_regex(pattern: &str, line: usize) -> Result<regex::Regex, NotesError> {
    RegexBuilder::new(pattern)
        .case_insensitive(true)
        .build()
        .map_err(|e| NotesError::BadTableLine {
            line,
            msg: format!("pattern does not compile: {e}"),
        })
}

/// One logged note: event description plus seconds from recording start.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowNote {
    pub timestamp_s: f64,
    pub text: String,
}

/// A notes row that failed validation, kept for the extraction report.
#[derive(Debug, Clone)]
pub struct RejectedRow {
    pub line: usize,
    pub content: String,
    pub reason: String,
}

/// Result of parsing one notes CSV.
#[derive(Debug, Default)]
pub struct ParsedNotes {
    pub notes: Vec<WorkflowNote>,
    pub rejects: Vec<RejectedRow>,
}

/// Read a notes CSV with header `timestamp_s,text`. Malformed rows are
/// routed to the rejects list, not silently dropped; surviving notes come
/// back sorted by timestamp.
pub fn parse_notes_file(path: &Path) -> Result<ParsedNotes, NotesError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => NotesError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => NotesError::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, NotesError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| NotesError::MissingColumn(name.into()))
    };
    let ts_col = col("timestamp_s")?;
    let text_col = col("text")?;

    let mut out = ParsedNotes::default();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                out.rejects.push(RejectedRow {
                    line,
                    content: String::new(),
                    reason: format!("csv parse: {e}"),
                });
                continue;
            }
        };
        let content = record.iter().collect::<Vec<_>>().join(",");
        let (Some(ts_raw), Some(text)) = (record.get(ts_col), record.get(text_col)) else {
            out.rejects.push(RejectedRow {
                line,
                content,
                reason: "missing field".into(),
            });
            continue;
        };
        let ts: f64 = match ts_raw.trim().parse() {
            Ok(v) => v,
            Err(_) => {
                out.rejects.push(RejectedRow {
                    line,
                    content,
                    reason: format!("timestamp '{ts_raw}' is not a number"),
                });
                continue;
            }
        };
        if !ts.is_finite() || ts < 0.0 {
            out.rejects.push(RejectedRow {
                line,
                content,
                reason: format!("timestamp {ts} is negative or not finite"),
            });
            continue;
        }
        out.notes.push(WorkflowNote {
            timestamp_s: ts,
            text: text.to_string(),
        });
    }
    out.notes
        .sort_by(|a, b| a.timestamp_s.partial_cmp(&b.timestamp_s).unwrap());
    Ok(out)
}

/// Per-clip binary attribute vector.
pub type ClipLabelVector = Vec<bool>;

/// Outcome of assigning notes to clips.
#[derive(Debug)]
pub struct LabelAssignment {
    /// `n_clips` rows, one bool per attribute.
    pub labels: Vec<ClipLabelVector>,
    /// Notes whose clip index fell outside `[0, n_clips)`.
    pub out_of_range: usize,
    /// Per-attribute count of notes that set the bit (before clip dedup).
    pub match_counts: Vec<usize>,
}

/// Label the clip in which each noted event began: clip index
/// `floor(timestamp / clip_len_s)`, attributes unioned into that clip.
pub fn assign_labels(
    notes: &[WorkflowNote],
    clip_len_s: f64,
    n_clips: usize,
    table: &AttributeTable,
) -> LabelAssignment {
    let mut labels = vec![vec![false; table.len()]; n_clips];
    let mut out_of_range = 0usize;
    let mut match_counts = vec![0usize; table.len()];
    for note in notes {
        let idx = (note.timestamp_s / clip_len_s).floor() as usize;
        if note.timestamp_s < 0.0 || idx >= n_clips {
            out_of_range += 1;
            continue;
        }
        for (a, hit) in table.match_bits(&note.text).into_iter().enumerate() {
            if hit {
                labels[idx][a] = true;
                match_counts[a] += 1;
            }
        }
    }
    LabelAssignment {
        labels,
        out_of_range,
        match_counts,
    }
}

/// Write a label matrix as CSV: one row per clip, one column per attribute.
pub fn write_label_matrix(
    path: &Path,
    labels: &[ClipLabelVector],
    table: &AttributeTable,
) -> Result<(), NotesError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["clip_index".to_string()];
    header.extend(table.names().iter().map(|n| n.replace(' ', "_")));
    w.write_record(&header)?;
    for (i, row) in labels.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| NotesError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Read a label matrix written by [`write_label_matrix`].
pub fn read_label_matrix(path: &Path) -> Result<Vec<ClipLabelVector>, NotesError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let row: ClipLabelVector = record.iter().skip(1).map(|v| v.trim() == "1").collect();
        out.push(row);
    }
    Ok(out)
}
